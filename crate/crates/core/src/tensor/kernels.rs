use super::{check_activation, nchw_index, Element, Tape, Tensor};
use crate::error::{Error, Result};

/// Square pooling window attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolAttrs {
    fn validate(&self, op: &'static str, h: usize, w: usize) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidAttr {
                op,
                detail: format!("kernel {} and stride {} must be >= 1", self.kernel, self.stride),
            });
        }
        if self.pad >= self.kernel {
            return Err(Error::InvalidAttr {
                op,
                detail: format!("pad {} must be < kernel {}", self.pad, self.kernel),
            });
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("window {} exceeds padded input {}x{}", self.kernel, h + 2 * self.pad, w + 2 * self.pad),
            });
        }
        Ok(())
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// The group-transpose permutation: channel at grid position (g, r) of a
/// (groups × C/groups) layout moves to (r, g). `out[c'] = in[order[c']]`.
pub fn shuffle_order(channels: usize, groups: usize) -> Vec<usize> {
    debug_assert!(groups >= 1 && channels % groups == 0);
    let per = channels / groups;
    (0..channels).map(|c| (c % groups) * per + c / groups).collect()
}

/// Largest divisor of `channels` not exceeding `k` — the group count actually
/// used when the selection fraction does not divide the channel count.
pub fn shuffle_groups(channels: usize, k: usize) -> usize {
    let cap = k.max(1).min(channels.max(1));
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Statistics source for batch normalization.
pub enum BnMode<'a, E> {
    /// Normalize with the batch's own per-channel mean/variance.
    Train,
    /// Normalize with fixed statistics: a pure per-channel affine map.
    Eval { mean: &'a [E], var: &'a [E] },
}

impl<E: Element> Tape<E> {
    /// Softmax along `axis` of a rank-1 or rank-2 tensor, max-stabilized.
    pub fn softmax(&self, x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        let s = x.shape().to_vec();
        let (lanes, lane_len, stride) = match (s.len(), axis) {
            (1, 0) => (1, s[0], 1),
            (2, 1) => (s[0], s[1], 1),
            (2, 0) => (s[1], s[0], s[1]),
            _ => {
                return Err(Error::InvalidAttr {
                    op: "softmax",
                    detail: format!("axis {} invalid for shape {:?}", axis, s),
                })
            }
        };
        if lane_len == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("empty axis {} in shape {:?}", axis, s),
            });
        }
        let lane_base = move |lane: usize| -> usize {
            if stride == 1 {
                lane * lane_len
            } else {
                lane
            }
        };
        let mut data = vec![E::zero(); x.numel()];
        {
            let xd = x.data();
            for lane in 0..lanes {
                let base = lane_base(lane);
                let mut m = xd[base];
                for i in 1..lane_len {
                    let v = xd[base + i * stride];
                    if v > m {
                        m = v;
                    }
                }
                let mut sum = E::zero();
                for i in 0..lane_len {
                    let e = (xd[base + i * stride] - m).exp();
                    data[base + i * stride] = e;
                    sum = sum + e;
                }
                for i in 0..lane_len {
                    data[base + i * stride] = data[base + i * stride] / sum;
                }
            }
        }
        let out = Tensor::from_vec(s, data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.finish("softmax", &out, x.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let yd = oc.data();
            let mut dx = vec![E::zero(); g.len()];
            for lane in 0..lanes {
                let base = lane_base(lane);
                let mut dot = E::zero();
                for i in 0..lane_len {
                    let idx = base + i * stride;
                    dot = dot + g[idx] * yd[idx];
                }
                for i in 0..lane_len {
                    let idx = base + i * stride;
                    dx[idx] = yd[idx] * (g[idx] - dot);
                }
            }
            drop(yd);
            xc.accumulate_grad(&dx);
        })?;
        Ok(out)
    }

    /// Mean cross-entropy from raw logits (rows = samples). The gradient is
    /// (softmax − one-hot)/batch.
    pub fn cross_entropy(&self, logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
        let s = logits.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("expected (batch, classes) logits, got {:?}", s),
            });
        }
        let (n, c) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} logit rows but {} labels", n, labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidAttr {
                op: "cross_entropy",
                detail: format!("label {} out of range for {} classes", bad, c),
            });
        }
        let mut probs = vec![E::zero(); n * c];
        let mut total = E::zero();
        {
            let xd = logits.data();
            for i in 0..n {
                let row = &xd[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(row[0], |a, b| if b > a { b } else { a });
                let mut sum = E::zero();
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    probs[i * c + j] = e;
                    sum = sum + e;
                }
                for j in 0..c {
                    probs[i * c + j] = probs[i * c + j] / sum;
                }
                let lse = m + sum.ln();
                total = total + (lse - row[labels[i]]);
            }
        }
        let batch = E::from_f64(n as f64);
        let out = Tensor::from_vec(vec![1], vec![total / batch])?;
        let (xc, oc) = (logits.clone(), out.clone());
        let labels = labels.to_vec();
        self.finish("cross_entropy", &out, logits.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let scale = g[0] / batch;
            let mut dx = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                dx[i * c + l] = dx[i * c + l] - E::one();
            }
            for v in dx.iter_mut() {
                *v = *v * scale;
            }
            xc.accumulate_grad(&dx);
        })?;
        Ok(out)
    }

    /// Per-channel batch normalization over NCHW. Train mode normalizes with
    /// batch statistics (biased variance); eval mode with supplied fixed
    /// statistics, making it an affine map per channel.
    pub fn batch_norm(
        &self,
        x: &Tensor<E>,
        weight: Option<&Tensor<E>>,
        bias: Option<&Tensor<E>>,
        mode: BnMode<'_, E>,
        eps: E,
    ) -> Result<Tensor<E>> {
        let (n, c, h, w) = check_activation("batch_norm", x)?;
        for (name, t) in [("weight", weight), ("bias", bias)] {
            if let Some(t) = t {
                if t.shape() != [c] {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        detail: format!("{} shape {:?} for {} channels", name, t.shape(), c),
                    });
                }
            }
        }
        let m = n * h * w;
        if m == 0 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: "empty batch".into(),
            });
        }
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let xd = x.data();
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for ci in 0..c {
                    let mut acc = E::zero();
                    for ni in 0..n {
                        for hi in 0..h {
                            for wi in 0..w {
                                acc = acc + xd[nchw_index(c, h, w, ni, ci, hi, wi)];
                            }
                        }
                    }
                    mean[ci] = acc / E::from_f64(m as f64);
                    let mut vacc = E::zero();
                    for ni in 0..n {
                        for hi in 0..h {
                            for wi in 0..w {
                                let d = xd[nchw_index(c, h, w, ni, ci, hi, wi)] - mean[ci];
                                vacc = vacc + d * d;
                            }
                        }
                    }
                    var[ci] = vacc / E::from_f64(m as f64);
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        detail: format!("stats length {}/{} for {} channels", mean.len(), var.len(), c),
                    });
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let numel = x.numel();
        let mut xhat = vec![E::zero(); numel];
        let mut data = vec![E::zero(); numel];
        {
            let xd = x.data();
            let wd = weight.map(|t| t.to_vec());
            let bd = bias.map(|t| t.to_vec());
            for ni in 0..n {
                for ci in 0..c {
                    let gamma = wd.as_ref().map_or(E::one(), |v| v[ci]);
                    let beta = bd.as_ref().map_or(E::zero(), |v| v[ci]);
                    for hi in 0..h {
                        for wi in 0..w {
                            let idx = nchw_index(c, h, w, ni, ci, hi, wi);
                            let xh = (xd[idx] - mean[ci]) * inv_std[ci];
                            xhat[idx] = xh;
                            data[idx] = xh * gamma + beta;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        let track = x.requires_grad_flag()
            || weight.is_some_and(|t| t.requires_grad_flag())
            || bias.is_some_and(|t| t.requires_grad_flag());
        let (xc, oc) = (x.clone(), out.clone());
        let (wc, bc) = (weight.cloned(), bias.cloned());
        self.finish("batch_norm", &out, track, move || {
            let Some(g) = oc.grad() else { return };
            let gamma: Vec<E> = match &wc {
                Some(t) => t.to_vec(),
                None => vec![E::one(); c],
            };
            if xc.requires_grad_flag() {
                let mut dx = vec![E::zero(); g.len()];
                if train {
                    let mf = E::from_f64(m as f64);
                    for ci in 0..c {
                        let mut sum_dxh = E::zero();
                        let mut sum_dxh_xh = E::zero();
                        for ni in 0..n {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let idx = nchw_index(c, h, w, ni, ci, hi, wi);
                                    let dxh = g[idx] * gamma[ci];
                                    sum_dxh = sum_dxh + dxh;
                                    sum_dxh_xh = sum_dxh_xh + dxh * xhat[idx];
                                }
                            }
                        }
                        for ni in 0..n {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let idx = nchw_index(c, h, w, ni, ci, hi, wi);
                                    let dxh = g[idx] * gamma[ci];
                                    dx[idx] = inv_std[ci]
                                        * (dxh - sum_dxh / mf - xhat[idx] * sum_dxh_xh / mf);
                                }
                            }
                        }
                    }
                } else {
                    for ni in 0..n {
                        for ci in 0..c {
                            let k = gamma[ci] * inv_std[ci];
                            for hi in 0..h {
                                for wi in 0..w {
                                    let idx = nchw_index(c, h, w, ni, ci, hi, wi);
                                    dx[idx] = g[idx] * k;
                                }
                            }
                        }
                    }
                }
                xc.accumulate_grad(&dx);
            }
            if let Some(wt) = &wc {
                if wt.requires_grad_flag() {
                    let mut dw = vec![E::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let idx = nchw_index(c, h, w, ni, ci, hi, wi);
                                    dw[ci] = dw[ci] + g[idx] * xhat[idx];
                                }
                            }
                        }
                    }
                    wt.accumulate_grad(&dw);
                }
            }
            if let Some(bt) = &bc {
                if bt.requires_grad_flag() {
                    let mut db = vec![E::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    db[ci] = db[ci] + g[nchw_index(c, h, w, ni, ci, hi, wi)];
                                }
                            }
                        }
                    }
                    bt.accumulate_grad(&db);
                }
            }
        })?;
        Ok(out)
    }

    /// Max pooling; out-of-bounds window cells act as −∞ (never selected).
    pub fn max_pool2d(&self, x: &Tensor<E>, attrs: PoolAttrs) -> Result<Tensor<E>> {
        let (n, c, h, w) = check_activation("max_pool2d", x)?;
        attrs.validate("max_pool2d", h, w)?;
        let (oh, ow) = attrs.out_hw(h, w);
        let mut data = vec![E::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        {
            let xd = x.data();
            for ni in 0..n {
                for ci in 0..c {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let mut best: Option<(E, usize)> = None;
                            for ki in 0..attrs.kernel {
                                let hi = (oi * attrs.stride + ki) as isize - attrs.pad as isize;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                for kj in 0..attrs.kernel {
                                    let wi = (oj * attrs.stride + kj) as isize - attrs.pad as isize;
                                    if wi < 0 || wi >= w as isize {
                                        continue;
                                    }
                                    let idx = nchw_index(c, h, w, ni, ci, hi as usize, wi as usize);
                                    let v = xd[idx];
                                    if best.map_or(true, |(bv, _)| v > bv) {
                                        best = Some((v, idx));
                                    }
                                }
                            }
                            let (v, idx) = best.expect("validated window covers >= 1 cell");
                            let o = nchw_index(c, oh, ow, ni, ci, oi, oj);
                            data[o] = v;
                            argmax[o] = idx;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![n, c, oh, ow], data)?;
        let (xc, oc) = (x.clone(), out.clone());
        let in_numel = x.numel();
        self.finish("max_pool2d", &out, x.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let mut dx = vec![E::zero(); in_numel];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] = dx[src] + g[o];
            }
            xc.accumulate_grad(&dx);
        })?;
        Ok(out)
    }

    /// Average pooling; padding cells are excluded from the mean.
    pub fn avg_pool2d(&self, x: &Tensor<E>, attrs: PoolAttrs) -> Result<Tensor<E>> {
        let (n, c, h, w) = check_activation("avg_pool2d", x)?;
        attrs.validate("avg_pool2d", h, w)?;
        let (oh, ow) = attrs.out_hw(h, w);
        // In-bounds cell membership depends only on the spatial window.
        let window = move |oi: usize, oj: usize| {
            let mut cells = Vec::with_capacity(attrs.kernel * attrs.kernel);
            for ki in 0..attrs.kernel {
                let hi = (oi * attrs.stride + ki) as isize - attrs.pad as isize;
                if hi < 0 || hi >= h as isize {
                    continue;
                }
                for kj in 0..attrs.kernel {
                    let wi = (oj * attrs.stride + kj) as isize - attrs.pad as isize;
                    if wi < 0 || wi >= w as isize {
                        continue;
                    }
                    cells.push((hi as usize, wi as usize));
                }
            }
            cells
        };
        let mut data = vec![E::zero(); n * c * oh * ow];
        {
            let xd = x.data();
            for oi in 0..oh {
                for oj in 0..ow {
                    let cells = window(oi, oj);
                    let count = E::from_f64(cells.len() as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut acc = E::zero();
                            for &(hi, wi) in &cells {
                                acc = acc + xd[nchw_index(c, h, w, ni, ci, hi, wi)];
                            }
                            data[nchw_index(c, oh, ow, ni, ci, oi, oj)] = acc / count;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![n, c, oh, ow], data)?;
        let (xc, oc) = (x.clone(), out.clone());
        let in_numel = x.numel();
        self.finish("avg_pool2d", &out, x.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let mut dx = vec![E::zero(); in_numel];
            for oi in 0..oh {
                for oj in 0..ow {
                    let cells = window(oi, oj);
                    let count = E::from_f64(cells.len() as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            let go = g[nchw_index(c, oh, ow, ni, ci, oi, oj)] / count;
                            for &(hi, wi) in &cells {
                                let idx = nchw_index(c, h, w, ni, ci, hi, wi);
                                dx[idx] = dx[idx] + go;
                            }
                        }
                    }
                }
            }
            xc.accumulate_grad(&dx);
        })?;
        Ok(out)
    }

    /// (N,C,H,W) → (N,C): mean over the spatial extent.
    pub fn global_avg_pool(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, h, w) = check_activation("global_avg_pool", x)?;
        if h * w == 0 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                detail: "empty spatial extent".into(),
            });
        }
        let area = E::from_f64((h * w) as f64);
        let mut data = vec![E::zero(); n * c];
        {
            let xd = x.data();
            for ni in 0..n {
                for ci in 0..c {
                    let mut acc = E::zero();
                    for hi in 0..h {
                        for wi in 0..w {
                            acc = acc + xd[nchw_index(c, h, w, ni, ci, hi, wi)];
                        }
                    }
                    data[ni * c + ci] = acc / area;
                }
            }
        }
        let out = Tensor::from_vec(vec![n, c], data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.finish("global_avg_pool", &out, x.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let mut dx = vec![E::zero(); n * c * h * w];
            for ni in 0..n {
                for ci in 0..c {
                    let go = g[ni * c + ci] / area;
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[nchw_index(c, h, w, ni, ci, hi, wi)] = go;
                        }
                    }
                }
            }
            xc.accumulate_grad(&dx);
        })?;
        Ok(out)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&self, xs: &[Tensor<E>]) -> Result<Tensor<E>> {
        if xs.is_empty() {
            return Err(Error::InvalidAttr {
                op: "concat_channels",
                detail: "needs at least one input".into(),
            });
        }
        let (n, _, h, w) = check_activation("concat_channels", &xs[0])?;
        let mut channels = Vec::with_capacity(xs.len());
        for (i, x) in xs.iter().enumerate() {
            let (ni, ci, hi, wi) = check_activation("concat_channels", x)?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("input {} shape {:?} incompatible with {:?}", i, x.shape(), xs[0].shape()),
                });
            }
            channels.push(ci);
        }
        let c_total: usize = channels.iter().sum();
        let mut data = vec![E::zero(); n * c_total * h * w];
        {
            let mut c_off = 0;
            for (x, &ci) in xs.iter().zip(&channels) {
                let xd = x.data();
                for nn in 0..n {
                    let src = nn * ci * h * w;
                    let dst = nchw_index(c_total, h, w, nn, c_off, 0, 0);
                    data[dst..dst + ci * h * w].copy_from_slice(&xd[src..src + ci * h * w]);
                }
                c_off += ci;
            }
        }
        let out = Tensor::from_vec(vec![n, c_total, h, w], data)?;
        let track = xs.iter().any(|x| x.requires_grad_flag());
        let xsc: Vec<Tensor<E>> = xs.to_vec();
        let oc = out.clone();
        self.finish("concat_channels", &out, track, move || {
            let Some(g) = oc.grad() else { return };
            let mut c_off = 0;
            for (x, &ci) in xsc.iter().zip(&channels) {
                if x.requires_grad_flag() {
                    let mut dx = vec![E::zero(); n * ci * h * w];
                    for nn in 0..n {
                        let src = nchw_index(c_total, h, w, nn, c_off, 0, 0);
                        let dst = nn * ci * h * w;
                        dx[dst..dst + ci * h * w].copy_from_slice(&g[src..src + ci * h * w]);
                    }
                    x.accumulate_grad(&dx);
                }
                c_off += ci;
            }
        })?;
        Ok(out)
    }

    /// Contiguous channel band `[start, start+len)`.
    pub fn channel_slice(&self, x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
        let (_, c, _, _) = check_activation("channel_slice", x)?;
        if len == 0 || start + len > c {
            return Err(Error::ShapeMismatch {
                op: "channel_slice",
                detail: format!("band [{start}, {}) of {} channels", start + len, c),
            });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_channels("channel_slice", x, idx)
    }

    /// Arbitrary channel gather: out[:, j] = x[:, idx[j]].
    pub fn select_channels(&self, x: &Tensor<E>, idx: &[usize]) -> Result<Tensor<E>> {
        let (_, c, _, _) = check_activation("select_channels", x)?;
        if idx.is_empty() {
            return Err(Error::InvalidAttr {
                op: "select_channels",
                detail: "empty channel selection".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::ShapeMismatch {
                op: "select_channels",
                detail: format!("channel {} out of range for {} channels", bad, c),
            });
        }
        self.gather_channels("select_channels", x, idx.to_vec())
    }

    /// Fixed group-transpose permutation of channels; `groups` must divide
    /// the channel count. `groups == 1` is the identity and allocates nothing.
    pub fn channel_shuffle(&self, x: &Tensor<E>, groups: usize) -> Result<Tensor<E>> {
        let (_, c, _, _) = check_activation("channel_shuffle", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidAttr {
                op: "channel_shuffle",
                detail: format!("groups {} does not divide {} channels", groups, c),
            });
        }
        if groups == 1 {
            return Ok(x.clone());
        }
        self.gather_channels("channel_shuffle", x, shuffle_order(c, groups))
    }

    fn gather_channels(&self, op: &'static str, x: &Tensor<E>, idx: Vec<usize>) -> Result<Tensor<E>> {
        let (n, c, h, w) = check_activation(op, x)?;
        let co = idx.len();
        let plane = h * w;
        let mut data = vec![E::zero(); n * co * plane];
        {
            let xd = x.data();
            for nn in 0..n {
                for (j, &ci) in idx.iter().enumerate() {
                    let src = nchw_index(c, h, w, nn, ci, 0, 0);
                    let dst = nchw_index(co, h, w, nn, j, 0, 0);
                    data[dst..dst + plane].copy_from_slice(&xd[src..src + plane]);
                }
            }
        }
        let out = Tensor::from_vec(vec![n, co, h, w], data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.finish(op, &out, x.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let mut dx = vec![E::zero(); n * c * plane];
            for nn in 0..n {
                for (j, &ci) in idx.iter().enumerate() {
                    let src = nchw_index(co, h, w, nn, j, 0, 0);
                    let dst = nchw_index(c, h, w, nn, ci, 0, 0);
                    for k in 0..plane {
                        dx[dst + k] = dx[dst + k] + g[src + k];
                    }
                }
            }
            xc.accumulate_grad(&dx);
        })?;
        Ok(out)
    }

    /// Drops the first `top` rows and `left` columns of the spatial extent:
    /// out = x[:, :, top:, left:]. Used to sample offset pixels in the
    /// factorized reduction.
    pub fn crop(&self, x: &Tensor<E>, top: usize, left: usize) -> Result<Tensor<E>> {
        let (n, c, h, w) = check_activation("crop", x)?;
        if top >= h || left >= w {
            return Err(Error::ShapeMismatch {
                op: "crop",
                detail: format!("offset ({top}, {left}) leaves no pixels of {h}x{w}"),
            });
        }
        let (oh, ow) = (h - top, w - left);
        let mut data = vec![E::zero(); n * c * oh * ow];
        {
            let xd = x.data();
            for nn in 0..n {
                for ci in 0..c {
                    for oi in 0..oh {
                        let src = nchw_index(c, h, w, nn, ci, oi + top, left);
                        let dst = nchw_index(c, oh, ow, nn, ci, oi, 0);
                        data[dst..dst + ow].copy_from_slice(&xd[src..src + ow]);
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![n, c, oh, ow], data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.finish("crop", &out, x.requires_grad_flag(), move || {
            let Some(g) = oc.grad() else { return };
            let mut dx = vec![E::zero(); n * c * h * w];
            for nn in 0..n {
                for ci in 0..c {
                    for oi in 0..oh {
                        let dst = nchw_index(c, h, w, nn, ci, oi + top, left);
                        let src = nchw_index(c, oh, ow, nn, ci, oi, 0);
                        dx[dst..dst + ow].copy_from_slice(&g[src..src + ow]);
                    }
                }
            }
            xc.accumulate_grad(&dx);
        })?;
        Ok(out)
    }

    /// All-zero tensor with the spatial extent divided by `stride` (ceiling),
    /// used by the zero operation. Never recorded: its gradient is zero.
    pub fn zeros_strided(&self, x: &Tensor<E>, stride: usize) -> Result<Tensor<E>> {
        let (n, c, h, w) = check_activation("zeros_strided", x)?;
        if stride == 0 {
            return Err(Error::InvalidAttr {
                op: "zeros_strided",
                detail: "stride must be >= 1".into(),
            });
        }
        let out = Tensor::zeros(vec![n, c, h.div_ceil(stride), w.div_ceil(stride)]);
        self.finish("zeros_strided", &out, false, || {})?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn replay(tape: &Tape<f64>) {
        // Unit tests seed output grads by hand; integration paths use backward().
        tape.replay_for_tests();
    }

    #[test]
    fn softmax_symmetry() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let y = tape.softmax(&x, 0).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_and_cols() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let rows = tape.softmax(&x, 1).unwrap();
        assert_eq!(rows.to_vec(), vec![0.5, 0.5, 0.5, 0.5]);
        let cols = tape.softmax(&x, 0).unwrap();
        let e = (1.0f64).exp();
        let lo = 1.0 / (1.0 + e);
        let hi = e / (1.0 + e);
        for (got, want) in cols.to_vec().iter().zip([lo, lo, hi, hi]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let xs = Tensor::from_vec(vec![3], vec![0.3 + 7.0, -1.2 + 7.0, 2.0 + 7.0]).unwrap();
        let a = tape.softmax(&x, 0).unwrap().to_vec();
        let b = tape.softmax(&xs, 0).unwrap().to_vec();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(vec![4, 10], vec![0.7; 40]).unwrap();
        let loss = tape.cross_entropy(&logits, &[0, 3, 5, 9]).unwrap();
        assert!((loss.to_vec()[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(vec![2, 3], vec![0.1, -0.4, 1.3, 2.0, 0.0, -1.0])
            .unwrap()
            .requires_grad();
        let probs = tape.softmax(&logits, 1).unwrap().to_vec();
        let labels = [2usize, 0usize];
        let loss = tape.cross_entropy(&logits, &labels).unwrap();
        tape.backward(&loss).unwrap();
        let g = logits.grad().unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                let want = (probs[i * 3 + j] - onehot) / 2.0;
                assert!((g[i * 3 + j] - want).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -3.0, 5.0, 0.0, 2.0]).unwrap();
        let y = tape.batch_norm(&x, None, None, BnMode::Train, 1e-12).unwrap();
        let yd = y.to_vec();
        for ch in 0..2 {
            let vals = &yd[ch * 4..(ch + 1) * 4];
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_eval_is_pure_affine() {
        let tape = Tape::<f64>::new();
        let mean = [0.5, -1.0];
        let var = [4.0, 0.25];
        let weight = Tensor::from_vec(vec![2], vec![2.0, 3.0]).unwrap();
        let bias = Tensor::from_vec(vec![2], vec![0.1, -0.2]).unwrap();
        let x = Tensor::from_vec(vec![1, 2, 1, 2], vec![1.0, -2.0, 0.0, 4.0]).unwrap();
        let y = tape
            .batch_norm(&x, Some(&weight), Some(&bias), BnMode::Eval { mean: &mean, var: &var }, 0.0)
            .unwrap()
            .to_vec();
        // out = (x - mean)/sqrt(var) * gamma + beta, per channel.
        let want = [
            (1.0 - 0.5) / 2.0 * 2.0 + 0.1,
            (-2.0 - 0.5) / 2.0 * 2.0 + 0.1,
            (0.0 + 1.0) / 0.5 * 3.0 - 0.2,
            (4.0 + 1.0) / 0.5 * 3.0 - 0.2,
        ];
        for (g, w) in y.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_constant_passthrough_and_argmax_grad() {
        let tape = Tape::<f64>::new();
        let x = Tensor::full(vec![1, 1, 4, 4], 2.5);
        let y = tape
            .max_pool2d(&x, PoolAttrs { kernel: 3, stride: 1, pad: 1 })
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.to_vec().iter().all(|&v| v == 2.5));

        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap().requires_grad();
        let y = tape.max_pool2d(&x, PoolAttrs { kernel: 2, stride: 2, pad: 0 }).unwrap();
        assert_eq!(y.to_vec(), vec![5.0]);
        y.seed_grad_ones();
        replay(&tape);
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_excludes_padding() {
        let tape = Tape::<f64>::new();
        let x = Tensor::full(vec![1, 1, 4, 4], 1.0);
        let y = tape
            .avg_pool2d(&x, PoolAttrs { kernel: 3, stride: 1, pad: 1 })
            .unwrap();
        // Corner windows cover 4 in-bounds ones; mean must still be 1.
        assert!(y.to_vec().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn global_avg_pool_means() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![1, 2, 1, 2], vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let y = tape.global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.to_vec(), vec![2.0, 15.0]);
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let cat = tape.concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.shape(), &[1, 3, 1, 2]);
        assert_eq!(cat.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = tape.channel_slice(&cat, 1, 2).unwrap();
        assert_eq!(back.to_vec(), b.to_vec());
    }

    #[test]
    fn select_channels_gathers_and_scatters() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![1, 3, 1, 1], vec![10.0, 20.0, 30.0]).unwrap().requires_grad();
        let y = tape.select_channels(&x, &[2, 0]).unwrap();
        assert_eq!(y.to_vec(), vec![30.0, 10.0]);
        y.seed_grad_ones();
        replay(&tape);
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn shuffle_matches_transpose_definition() {
        assert_eq!(shuffle_order(4, 2), vec![0, 2, 1, 3]);
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![1, 4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = tape.channel_shuffle(&x, 2).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 2.0, 1.0, 3.0]);
        let z = tape.channel_shuffle(&y, 2).unwrap();
        assert_eq!(z.to_vec(), x.to_vec()); // involution for the 2x2 grid
    }

    #[test]
    fn shuffle_groups_picks_greatest_divisor() {
        assert_eq!(shuffle_groups(16, 4), 4);
        assert_eq!(shuffle_groups(6, 4), 3);
        assert_eq!(shuffle_groups(7, 4), 1);
        assert_eq!(shuffle_groups(5, 1), 1);
        assert_eq!(shuffle_groups(8, 16), 8);
    }

    #[test]
    fn shuffle_identity_for_one_group_allocates_nothing() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        tape.region_begin();
        let y = tape.channel_shuffle(&x, 1).unwrap();
        tape.region_end();
        assert_eq!(tape.region_alloc_elems(), 0);
        assert_eq!(y.ptr_id(), x.ptr_id());
    }

    #[test]
    fn zeros_strided_shapes() {
        let tape = Tape::<f64>::new();
        let x = Tensor::full(vec![2, 3, 8, 8], 1.0);
        let y = tape.zeros_strided(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
        assert!(!y.requires_grad_flag());
    }
}
