use std::cell::{Cell, RefCell};
use std::marker::PhantomData;

use super::{Element, Tensor};
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn()>;

struct Record {
    backward: BackwardFn,
}

/// Ordered record of executed primitives. `backward` replays the records in
/// exact reverse order, accumulating gradients additively into every tensor
/// that requires them.
///
/// The tape also meters activation allocations: every primitive reports the
/// element count of its output, and counts accumulate while at least one
/// region (see [`Tape::region_begin`]) is open. The search engine wraps each
/// mixed-operation subgraph in a region to measure the memory saved by
/// partial channel connections.
pub struct Tape<E: Element> {
    records: RefCell<Vec<Record>>,
    enabled: Cell<bool>,
    region_depth: Cell<usize>,
    region_elems: Cell<u64>,
    _elem: PhantomData<E>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            enabled: Cell::new(true),
            region_depth: Cell::new(0),
            region_elems: Cell::new(0),
            _elem: PhantomData,
        }
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.borrow().is_empty()
    }

    /// Drops all records (and the intermediates they keep alive).
    pub fn clear(&self) {
        self.records.borrow_mut().clear();
    }

    pub fn is_recording(&self) -> bool {
        self.enabled.get()
    }

    /// Runs `f` with recording disabled; evaluation-only forwards use this so
    /// no records (or gradients) are produced.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.enabled.replace(false);
        let out = f();
        self.enabled.set(prev);
        out
    }

    /// Opens an allocation-metering region. Regions nest; elements are
    /// counted while any region is open.
    pub fn region_begin(&self) {
        self.region_depth.set(self.region_depth.get() + 1);
    }

    pub fn region_end(&self) {
        let d = self.region_depth.get();
        debug_assert!(d > 0, "region_end without matching region_begin");
        self.region_depth.set(d.saturating_sub(1));
    }

    /// Total output elements allocated inside regions since the last reset.
    pub fn region_alloc_elems(&self) -> u64 {
        self.region_elems.get()
    }

    pub fn reset_region_alloc(&self) {
        self.region_elems.set(0);
    }

    fn note_alloc(&self, elems: usize) {
        if self.region_depth.get() > 0 {
            self.region_elems.set(self.region_elems.get() + elems as u64);
        }
    }

    /// Common tail of every primitive: meter the allocation, reject
    /// non-finite values, and record the backward closure when gradients are
    /// both requested (`track`) and enabled.
    pub(super) fn finish(
        &self,
        op: &'static str,
        out: &Tensor<E>,
        track: bool,
        backward: impl Fn() + 'static,
    ) -> Result<()> {
        self.note_alloc(out.numel());
        if !out.is_finite() {
            return Err(Error::NonFinite {
                op,
                index: self.records.borrow().len(),
            });
        }
        if track && self.enabled.get() {
            out.inner.requires_grad.set(true);
            self.records.borrow_mut().push(Record {
                backward: Box::new(backward),
            });
        }
        Ok(())
    }

    /// Replays recorded closures in reverse with whatever output gradients
    /// tests have seeded by hand; production code uses [`Tape::backward`].
    #[cfg(test)]
    pub(crate) fn replay_for_tests(&self) {
        for rec in self.records.borrow().iter().rev() {
            (rec.backward)();
        }
    }

    /// Reverse pass from a scalar loss. Seeds d(loss)/d(loss) = 1, then runs
    /// every recorded backward closure in reverse order. Gradients accumulate
    /// additively; call sites zero them explicitly between steps.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let records = self.records.borrow();
        if records.is_empty() {
            return Err(Error::EmptyTape);
        }
        loss.seed_grad_ones();
        for rec in records.iter().rev() {
            (rec.backward)();
        }
        Ok(())
    }
}

/// Elementwise, linear-algebra and indexing primitives. Convolution, pooling,
/// normalization and the channel kernels live in sibling files.
impl<E: Element> Tape<E> {
    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let data: Vec<E> = {
            let (xa, xb) = (a.data(), b.data());
            xa.iter().zip(xb.iter()).map(|(&x, &y)| x + y).collect()
        };
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let track = a.requires_grad_flag() || b.requires_grad_flag();
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.finish("add", &out, track, move || {
            let Some(g) = oc.grad() else { return };
            if ac.requires_grad_flag() {
                ac.accumulate_grad(&g);
            }
            if bc.requires_grad_flag() {
                bc.accumulate_grad(&g);
            }
        })?;
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let data: Vec<E> = {
            let (xa, xb) = (a.data(), b.data());
            xa.iter().zip(xb.iter()).map(|(&x, &y)| x * y).collect()
        };
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let track = a.requires_grad_flag() || b.requires_grad_flag();
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.finish("mul", &out, track, move || {
            let Some(g) = oc.grad() else { return };
            if ac.requires_grad_flag() {
                let bd = bc.data();
                let delta: Vec<E> = g.iter().zip(bd.iter()).map(|(&gi, &bi)| gi * bi).collect();
                drop(bd);
                ac.accumulate_grad(&delta);
            }
            if bc.requires_grad_flag() {
                let ad = ac.data();
                let delta: Vec<E> = g.iter().zip(ad.iter()).map(|(&gi, &ai)| gi * ai).collect();
                drop(ad);
                bc.accumulate_grad(&delta);
            }
        })?;
        Ok(out)
    }

    /// Multiplication by a compile-time constant (not a differentiable input).
    pub fn scale(&self, x: &Tensor<E>, c: E) -> Result<Tensor<E>> {
        let data: Vec<E> = x.data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.finish("scale", &out, x.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let delta: Vec<E> = g.iter().map(|&gi| gi * c).collect();
            xc.accumulate_grad(&delta);
        })?;
        Ok(out)
    }

    /// out = Σ_i w[i]·xs[i]. One primitive serves both the operation mixture
    /// (w = softmaxed alpha row) and node aggregation (w = softmaxed betas or
    /// constant ones): d xs[i] = w[i]·g, d w[i] = ⟨g, xs[i]⟩.
    pub fn weighted_sum(&self, xs: &[Tensor<E>], w: &Tensor<E>) -> Result<Tensor<E>> {
        if xs.is_empty() {
            return Err(Error::InvalidAttr {
                op: "weighted_sum",
                detail: "needs at least one input".into(),
            });
        }
        if w.shape() != [xs.len()] {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} inputs but weight shape {:?}", xs.len(), w.shape()),
            });
        }
        let shape = xs[0].shape().to_vec();
        for (i, x) in xs.iter().enumerate() {
            if x.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    detail: format!("input {} has shape {:?}, expected {:?}", i, x.shape(), shape),
                });
            }
        }
        let mut data = vec![E::zero(); xs[0].numel()];
        {
            let wd = w.data();
            for (i, x) in xs.iter().enumerate() {
                let wi = wd[i];
                for (acc, &v) in data.iter_mut().zip(x.data().iter()) {
                    *acc = *acc + wi * v;
                }
            }
        }
        let out = Tensor::from_vec(shape, data)?;
        let track = w.requires_grad_flag() || xs.iter().any(|x| x.requires_grad_flag());
        let xsc: Vec<Tensor<E>> = xs.to_vec();
        let (wc, oc) = (w.clone(), out.clone());
        self.finish("weighted_sum", &out, track, move || {
            let Some(g) = oc.grad() else { return };
            let wd = wc.data().clone();
            for (i, x) in xsc.iter().enumerate() {
                if x.requires_grad_flag() {
                    let wi = wd[i];
                    let delta: Vec<E> = g.iter().map(|&gi| gi * wi).collect();
                    x.accumulate_grad(&delta);
                }
            }
            if wc.requires_grad_flag() {
                let mut dw = vec![E::zero(); xsc.len()];
                for (i, x) in xsc.iter().enumerate() {
                    let xd = x.data();
                    let mut acc = E::zero();
                    for (&gi, &xi) in g.iter().zip(xd.iter()) {
                        acc = acc + gi * xi;
                    }
                    dw[i] = acc;
                }
                wc.accumulate_grad(&dw);
            }
        })?;
        Ok(out)
    }

    /// (m,k) × (k,n) → (m,n).
    pub fn matmul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} × {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![E::zero(); m * n];
        {
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                for kk in 0..k {
                    let av = ad[i * k + kk];
                    let brow = &bd[kk * n..(kk + 1) * n];
                    let crow = &mut data[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] = crow[j] + av * brow[j];
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![m, n], data)?;
        let track = a.requires_grad_flag() || b.requires_grad_flag();
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.finish("matmul", &out, track, move || {
            let Some(g) = oc.grad() else { return };
            if ac.requires_grad_flag() {
                let bd = bc.data();
                let mut da = vec![E::zero(); m * k];
                for i in 0..m {
                    for kk in 0..k {
                        let mut acc = E::zero();
                        let grow = &g[i * n..(i + 1) * n];
                        let brow = &bd[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            acc = acc + grow[j] * brow[j];
                        }
                        da[i * k + kk] = acc;
                    }
                }
                drop(bd);
                ac.accumulate_grad(&da);
            }
            if bc.requires_grad_flag() {
                let ad = ac.data();
                let mut db = vec![E::zero(); k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let av = ad[i * k + kk];
                        let grow = &g[i * n..(i + 1) * n];
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            drow[j] = drow[j] + av * grow[j];
                        }
                    }
                }
                drop(ad);
                bc.accumulate_grad(&db);
            }
        })?;
        Ok(out)
    }

    /// (m,n) + broadcast (n,) → (m,n).
    pub fn bias_add(&self, x: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (sx, sb) = (x.shape(), b.shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                detail: format!("{:?} + {:?}", sx, sb),
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let data: Vec<E> = {
            let (xd, bd) = (x.data(), b.data());
            (0..m * n).map(|idx| xd[idx] + bd[idx % n]).collect()
        };
        let out = Tensor::from_vec(vec![m, n], data)?;
        let track = x.requires_grad_flag() || b.requires_grad_flag();
        let (xc, bc, oc) = (x.clone(), b.clone(), out.clone());
        self.finish("bias_add", &out, track, move || {
            let Some(g) = oc.grad() else { return };
            if xc.requires_grad_flag() {
                xc.accumulate_grad(&g);
            }
            if bc.requires_grad_flag() {
                let mut db = vec![E::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] = db[j] + g[i * n + j];
                    }
                }
                bc.accumulate_grad(&db);
            }
        })?;
        Ok(out)
    }

    pub fn relu(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let data: Vec<E> = x
            .data()
            .iter()
            .map(|&v| if v > E::zero() { v } else { E::zero() })
            .collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.finish("relu", &out, x.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let xd = xc.data();
            let delta: Vec<E> = g
                .iter()
                .zip(xd.iter())
                .map(|(&gi, &xi)| if xi > E::zero() { gi } else { E::zero() })
                .collect();
            drop(xd);
            xc.accumulate_grad(&delta);
        })?;
        Ok(out)
    }

    /// Copies row `r` out of a (rows, cols) matrix as a (cols,) vector.
    pub fn row(&self, x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 2 || r >= s[0] {
            return Err(Error::ShapeMismatch {
                op: "row",
                detail: format!("row {} of shape {:?}", r, s),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let data = x.data()[r * cols..(r + 1) * cols].to_vec();
        let out = Tensor::from_vec(vec![cols], data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.finish("row", &out, x.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let mut dx = vec![E::zero(); rows * cols];
            dx[r * cols..(r + 1) * cols].copy_from_slice(&g);
            xc.accumulate_grad(&dx);
        })?;
        Ok(out)
    }

    /// Copies `[start, start+len)` out of a rank-1 tensor.
    pub fn slice1d(&self, x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 1 || len == 0 || start + len > s[0] {
            return Err(Error::ShapeMismatch {
                op: "slice1d",
                detail: format!("[{start}, {}) of shape {:?}", start + len, s),
            });
        }
        let total = s[0];
        let data = x.data()[start..start + len].to_vec();
        let out = Tensor::from_vec(vec![len], data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.finish("slice1d", &out, x.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let mut dx = vec![E::zero(); total];
            dx[start..start + len].copy_from_slice(&g);
            xc.accumulate_grad(&dx);
        })?;
        Ok(out)
    }
}
