//! The super-network: stacked cells whose edges carry softmax mixtures of
//! candidate operations. Each edge routes only a 1/K slice of its input
//! channels through the mixture (the rest bypass it untouched), and each
//! node re-weights its incoming edges with a normalized coefficient set.

use std::cell::RefCell;

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{
    build_classifier, build_stem, BnPolicy, Classifier, FactorizedReduce, OpInstance, OpKind,
    ReluConvBn, Stem, OP_ORDER,
};
use crate::rng::stream;
use crate::tensor::{shuffle_groups, Element, PoolAttrs, Tape, Tensor};

/// All candidate connections of an N-node cell: pairs (i, j) with i < j and
/// 2 ≤ j ≤ N−1, ordered by destination node, then by source.
pub fn edge_list(n_nodes: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for j in 2..n_nodes {
        for i in 0..j {
            edges.push((i, j));
        }
    }
    edges
}

pub fn edge_count(n_nodes: usize) -> usize {
    (2..n_nodes).sum()
}

/// Inverts `edge_count`: the node count whose cells have `n_edges` edges.
pub fn nodes_for_edge_count(n_edges: usize) -> Option<usize> {
    (3..=64).find(|&n| edge_count(n) == n_edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellType {
    Normal,
    Reduce,
}

/// The continuous architecture encoding: one mixing weight per (edge, op)
/// and one edge coefficient per edge, each kept separately for normal and
/// reduction cells and shared across all cells of a type.
pub struct ArchParams<E: Element> {
    pub n_nodes: usize,
    pub alpha_normal: Tensor<E>,
    pub alpha_reduce: Tensor<E>,
    pub beta_normal: Tensor<E>,
    pub beta_reduce: Tensor<E>,
}

fn gauss_tensor<E: Element>(shape: Vec<usize>, std: f64, rng: &mut ChaCha12Rng) -> Tensor<E> {
    let normal = Normal::new(0.0, std).unwrap();
    let data: Vec<E> = (0..shape.iter().product())
        .map(|_| E::from_f64(normal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).unwrap().requires_grad()
}

impl<E: Element> ArchParams<E> {
    /// Small-Gaussian initialization (std = 1e-3): near-uniform mixtures at
    /// the start, with random tie-breaking. Deterministic per seed.
    pub fn init(n_nodes: usize, seed: u64) -> Result<Self> {
        if n_nodes < 3 {
            return Err(Error::Config(format!(
                "cell needs at least 3 nodes (2 inputs + 1 intermediate), got {n_nodes}"
            )));
        }
        let ne = edge_count(n_nodes);
        let ops = OP_ORDER.len();
        let t = |label: &str, shape: Vec<usize>| {
            gauss_tensor(shape, 1e-3, &mut stream(seed, label))
        };
        Ok(ArchParams {
            n_nodes,
            alpha_normal: t("arch.alpha.normal", vec![ne, ops]),
            alpha_reduce: t("arch.alpha.reduce", vec![ne, ops]),
            beta_normal: t("arch.beta.normal", vec![ne]),
            beta_reduce: t("arch.beta.reduce", vec![ne]),
        })
    }

    pub fn n_edges(&self) -> usize {
        edge_count(self.n_nodes)
    }

    pub fn alpha(&self, cell_type: CellType) -> &Tensor<E> {
        match cell_type {
            CellType::Normal => &self.alpha_normal,
            CellType::Reduce => &self.alpha_reduce,
        }
    }

    pub fn beta(&self, cell_type: CellType) -> &Tensor<E> {
        match cell_type {
            CellType::Normal => &self.beta_normal,
            CellType::Reduce => &self.beta_reduce,
        }
    }

    /// Canonical checkpoint naming.
    pub fn named(&self) -> Vec<(String, Tensor<E>)> {
        vec![
            ("alpha.normal".to_string(), self.alpha_normal.clone()),
            ("alpha.reduce".to_string(), self.alpha_reduce.clone()),
            ("beta.normal".to_string(), self.beta_normal.clone()),
            ("beta.reduce".to_string(), self.beta_reduce.clone()),
        ]
    }

    /// Rebuilds from checkpointed tensors, inferring the node count from the
    /// edge dimension and validating shape consistency.
    pub fn from_named(tensors: &[(String, Tensor<E>)]) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor<E>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
        };
        let alpha_normal = get("alpha.normal")?;
        let alpha_reduce = get("alpha.reduce")?;
        let beta_normal = get("beta.normal")?;
        let beta_reduce = get("beta.reduce")?;
        let shape = alpha_normal.shape().to_vec();
        if shape.len() != 2 || shape[1] != OP_ORDER.len() {
            return Err(Error::Checkpoint(format!(
                "alpha.normal must be (edges, {}), got {:?}",
                OP_ORDER.len(),
                shape
            )));
        }
        let ne = shape[0];
        let n_nodes = nodes_for_edge_count(ne)
            .ok_or_else(|| Error::Checkpoint(format!("{ne} edges match no cell size")))?;
        for (name, t, want) in [
            ("alpha.reduce", &alpha_reduce, vec![ne, OP_ORDER.len()]),
            ("beta.normal", &beta_normal, vec![ne]),
            ("beta.reduce", &beta_reduce, vec![ne]),
        ] {
            if t.shape() != want.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name} shape {:?} inconsistent with {ne} edges",
                    t.shape()
                )));
            }
        }
        for t in [&alpha_normal, &alpha_reduce, &beta_normal, &beta_reduce] {
            t.set_requires_grad(true);
        }
        Ok(ArchParams { n_nodes, alpha_normal, alpha_reduce, beta_normal, beta_reduce })
    }

    /// Enables/disables gradient tracking on every architecture tensor
    /// (disabled during warm-up).
    pub fn set_trainable(&self, trainable: bool) {
        for (_, t) in self.named() {
            t.set_requires_grad(trainable);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// The first ⌈C/K⌉ channels enter the mixture; shuffling after each node
    /// rotates which channels those are in the next cell.
    Efficient,
    /// A fresh random ⌈C/K⌉-subset per edge per forward.
    Random,
}

/// Which channels of an edge's input go through the op mixture and which
/// bypass it.
#[derive(Debug, Clone)]
pub struct ChannelMask {
    pub selected: Vec<usize>,
    pub masked: Vec<usize>,
}

impl ChannelMask {
    fn check(channels: usize, k: usize) -> Result<usize> {
        if k == 0 {
            return Err(Error::InvalidAttr { op: "channel_mask", detail: "K must be ≥ 1".into() });
        }
        if channels < k {
            return Err(Error::InvalidAttr {
                op: "channel_mask",
                detail: format!("{channels} channels cannot be split with K={k}"),
            });
        }
        Ok(channels.div_ceil(k))
    }

    pub fn efficient(channels: usize, k: usize) -> Result<Self> {
        let n_sel = Self::check(channels, k)?;
        Ok(ChannelMask {
            selected: (0..n_sel).collect(),
            masked: (n_sel..channels).collect(),
        })
    }

    pub fn random(channels: usize, k: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        let n_sel = Self::check(channels, k)?;
        let mut selected = rand::seq::index::sample(rng, channels, n_sel).into_vec();
        selected.sort_unstable();
        let masked = (0..channels).filter(|c| !selected.contains(c)).collect();
        Ok(ChannelMask { selected, masked })
    }
}

/// Per-forward mask source. The efficient mode is stateless; the random mode
/// consumes a private seeded stream, so mask draws are reproducible.
pub struct MaskGen {
    pub k: usize,
    pub mode: MaskMode,
    rng: RefCell<ChaCha12Rng>,
}

impl MaskGen {
    pub fn new(k: usize, mode: MaskMode, seed: u64) -> Self {
        MaskGen { k, mode, rng: RefCell::new(stream(seed, "channel-mask")) }
    }

    pub fn mask(&self, channels: usize) -> Result<ChannelMask> {
        match self.mode {
            MaskMode::Efficient => ChannelMask::efficient(channels, self.k),
            MaskMode::Random => ChannelMask::random(channels, self.k, &mut self.rng.borrow_mut()),
        }
    }
}

/// One searchable connection: every candidate op instantiated at the reduced
/// channel count, ready to mix.
pub struct MixedEdge<E: Element> {
    pub from: usize,
    pub to: usize,
    pub stride: usize,
    channels: usize,
    ops: Vec<OpInstance<E>>,
}

impl<E: Element> MixedEdge<E> {
    pub fn build(
        from: usize,
        to: usize,
        stride: usize,
        channels: usize,
        k: usize,
        affine: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        Self::with_ops(&OP_ORDER, from, to, stride, channels, k, affine, rng)
    }

    /// Restricted op slates support toy setups (e.g. a two-op edge).
    #[allow(clippy::too_many_arguments)]
    pub fn with_ops(
        kinds: &[OpKind],
        from: usize,
        to: usize,
        stride: usize,
        channels: usize,
        k: usize,
        affine: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let c_sel = ChannelMask::check(channels, k)?;
        let ops = kinds
            .iter()
            .map(|&kind| OpInstance::build(kind, c_sel, stride, affine, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixedEdge { from, to, stride, channels, ops })
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    /// Mixture over the selected channels, bypass for the rest:
    /// concat( Σ_o softmax(α)_o · o(x[selected]), x[masked] ), the bypass
    /// stepped down by a 2×2 max-pool when the edge is strided. `alpha_w`
    /// must already be normalized (softmax of this edge's α row).
    pub fn forward(
        &self,
        tape: &Tape<E>,
        x: &Tensor<E>,
        alpha_w: &Tensor<E>,
        mask: &ChannelMask,
        policy: BnPolicy,
    ) -> Result<Tensor<E>> {
        if x.shape().len() != 4 || x.shape()[1] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "mixed_edge",
                detail: format!(
                    "edge ({},{}) built for {} channels, input is {:?}",
                    self.from, self.to, self.channels, x.shape()
                ),
            });
        }
        if alpha_w.numel() != self.ops.len() {
            return Err(Error::ShapeMismatch {
                op: "mixed_edge",
                detail: format!("{} mixing weights for {} ops", alpha_w.numel(), self.ops.len()),
            });
        }
        if mask.selected.len() + mask.masked.len() != self.channels {
            return Err(Error::ShapeMismatch {
                op: "mixed_edge",
                detail: format!("mask covers {} of {} channels", mask.selected.len() + mask.masked.len(), self.channels),
            });
        }

        // Everything between begin/end is the memory-bearing mixture
        // subgraph; the allocation counter meters exactly this span.
        tape.region_begin();
        let run = || -> Result<Tensor<E>> {
            let sel = tape.select_channels(x, &mask.selected)?;
            let outs = self
                .ops
                .iter()
                .map(|op| op.forward(tape, &sel, policy))
                .collect::<Result<Vec<_>>>()?;
            tape.weighted_sum(&outs, alpha_w)
        };
        let mix = run();
        tape.region_end();
        let mix = mix?;

        if mask.masked.is_empty() {
            return Ok(mix);
        }
        let byp = tape.select_channels(x, &mask.masked)?;
        let byp = if self.stride == 2 {
            tape.max_pool2d(&byp, PoolAttrs { kernel: 2, stride: 2, pad: 0 })?
        } else {
            byp
        };
        tape.concat_channels(&[mix, byp])
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        for (o, op) in self.ops.iter().enumerate() {
            op.params(&format!("{prefix}.op{o}"), out);
        }
    }
}

enum Prep<E: Element> {
    Std(ReluConvBn<E>),
    Halve(FactorizedReduce<E>),
}

impl<E: Element> Prep<E> {
    fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, policy: BnPolicy) -> Result<Tensor<E>> {
        match self {
            Prep::Std(p) => p.forward(tape, x, policy),
            Prep::Halve(p) => p.forward(tape, x, policy),
        }
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        match self {
            Prep::Std(p) => p.params(prefix, out),
            Prep::Halve(p) => p.params(prefix, out),
        }
    }
}

pub struct Cell<E: Element> {
    pub cell_type: CellType,
    pub n_nodes: usize,
    pub channels: usize,
    prep0: Prep<E>,
    prep1: ReluConvBn<E>,
    pub edges: Vec<MixedEdge<E>>,
}

impl<E: Element> Cell<E> {
    /// `c_pp`/`c_p` are the channel counts of the two feeding cells;
    /// `prev_reduced` marks whether the immediately preceding cell halved
    /// its spatial extent (then the older input needs halving too).
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        c_pp: usize,
        c_p: usize,
        channels: usize,
        cell_type: CellType,
        prev_reduced: bool,
        n_nodes: usize,
        k: usize,
        affine: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let prep0 = if prev_reduced {
            Prep::Halve(FactorizedReduce::new(c_pp, channels, affine, rng))
        } else {
            Prep::Std(ReluConvBn::new(c_pp, channels, affine, rng))
        };
        let prep1 = ReluConvBn::new(c_p, channels, affine, rng);
        let edges = edge_list(n_nodes)
            .into_iter()
            .map(|(i, j)| {
                let stride = if cell_type == CellType::Reduce && i < 2 { 2 } else { 1 };
                MixedEdge::build(i, j, stride, channels, k, affine, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Cell { cell_type, n_nodes, channels, prep0, prep1, edges })
    }

    /// `alpha_w[e]` = normalized mixing weights of edge e; `beta_w[j−2]` =
    /// normalized coefficients over node j's incoming edges (None disables
    /// edge re-weighting and sums incoming edges plainly). Each node output
    /// is channel-shuffled so the fixed channel selection rotates.
    pub fn forward(
        &self,
        tape: &Tape<E>,
        s0: &Tensor<E>,
        s1: &Tensor<E>,
        alpha_w: &[Tensor<E>],
        beta_w: Option<&[Tensor<E>]>,
        masks: &MaskGen,
        policy: BnPolicy,
    ) -> Result<Tensor<E>> {
        if alpha_w.len() != self.edges.len() {
            return Err(Error::ShapeMismatch {
                op: "cell",
                detail: format!("{} alpha rows for {} edges", alpha_w.len(), self.edges.len()),
            });
        }
        let mut states = vec![
            self.prep0.forward(tape, s0, policy)?,
            self.prep1.forward(tape, s1, policy)?,
        ];
        let shuffle = shuffle_groups(self.channels, masks.k);
        let mut e = 0;
        for j in 2..self.n_nodes {
            let mut incoming = Vec::with_capacity(j);
            for i in 0..j {
                let edge = &self.edges[e + i];
                let mask = masks.mask(self.channels)?;
                incoming.push(edge.forward(tape, &states[i], &alpha_w[e + i], &mask, policy)?);
            }
            let coeff = match beta_w {
                Some(bw) => bw[j - 2].clone(),
                None => Tensor::full(vec![j], E::one()),
            };
            let node = tape.weighted_sum(&incoming, &coeff)?;
            let node = tape.channel_shuffle(&node, shuffle)?;
            states.push(node);
            e += j;
        }
        tape.concat_channels(&states[2..])
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.prep0.params(&format!("{prefix}.pre0"), out);
        self.prep1.params(&format!("{prefix}.pre1"), out);
        for (e, edge) in self.edges.iter().enumerate() {
            edge.params(&format!("{prefix}.e{e}"), out);
        }
    }
}

/// Construction-time knobs of the super-network.
#[derive(Debug, Clone)]
pub struct NetSpec {
    pub layers: usize,
    pub c0: usize,
    pub n_nodes: usize,
    pub k: usize,
    pub classes: usize,
    pub edge_norm: bool,
    pub mask_mode: MaskMode,
    pub bn_affine: bool,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            layers: 8,
            c0: 16,
            n_nodes: 6,
            k: 4,
            classes: 10,
            edge_norm: true,
            mask_mode: MaskMode::Efficient,
            bn_affine: false,
        }
    }
}

/// True when the cell at `index` halves spatial extent (placed at the one-
/// and two-thirds depth marks, channel count doubling there).
pub fn is_reduction(index: usize, layers: usize) -> bool {
    index == layers / 3 || index == 2 * layers / 3
}

pub struct SuperNet<E: Element> {
    pub spec: NetSpec,
    pub arch: ArchParams<E>,
    stem: Stem<E>,
    pub cells: Vec<Cell<E>>,
    classifier: Classifier<E>,
    masks: MaskGen,
}

impl<E: Element> SuperNet<E> {
    pub fn build(spec: NetSpec, seed: u64) -> Result<Self> {
        if spec.layers == 0 {
            return Err(Error::Config("need at least one cell".into()));
        }
        if spec.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if spec.c0 < spec.k {
            return Err(Error::Config(format!(
                "initial channels ({}) must be ≥ K ({})",
                spec.c0, spec.k
            )));
        }
        let arch = ArchParams::init(spec.n_nodes, seed)?;
        let rng = &mut stream(seed, "weights");
        let stem = build_stem::<E>(spec.c0, rng);

        let mut cells = Vec::with_capacity(spec.layers);
        let (mut c_pp, mut c_p, mut c) = (spec.c0, spec.c0, spec.c0);
        let mut prev_reduced = false;
        for idx in 0..spec.layers {
            let reduce = is_reduction(idx, spec.layers);
            if reduce {
                c *= 2;
            }
            let cell_type = if reduce { CellType::Reduce } else { CellType::Normal };
            let cell = Cell::build(
                c_pp,
                c_p,
                c,
                cell_type,
                prev_reduced,
                spec.n_nodes,
                spec.k,
                spec.bn_affine,
                rng,
            )?;
            cells.push(cell);
            c_pp = c_p;
            c_p = (spec.n_nodes - 2) * c;
            prev_reduced = reduce;
        }
        let classifier = build_classifier::<E>(c_p, spec.classes, rng);
        let masks = MaskGen::new(spec.k, spec.mask_mode, seed);
        Ok(SuperNet { spec, arch, stem, cells, classifier, masks })
    }

    /// Normalizes one cell type's α rows / β slices on the tape so gradient
    /// flows back into the shared architecture tensors.
    fn normalized(
        &self,
        tape: &Tape<E>,
        cell_type: CellType,
    ) -> Result<(Vec<Tensor<E>>, Option<Vec<Tensor<E>>>)> {
        let alpha = self.arch.alpha(cell_type);
        let mut alpha_w = Vec::with_capacity(self.arch.n_edges());
        for e in 0..self.arch.n_edges() {
            let row = tape.row(alpha, e)?;
            alpha_w.push(tape.softmax(&row, 0)?);
        }
        let beta_w = if self.spec.edge_norm {
            let beta = self.arch.beta(cell_type);
            let mut per_node = Vec::with_capacity(self.spec.n_nodes - 2);
            let mut offset = 0;
            for j in 2..self.spec.n_nodes {
                let slice = tape.slice1d(beta, offset, j)?;
                per_node.push(tape.softmax(&slice, 0)?);
                offset += j;
            }
            Some(per_node)
        } else {
            None
        };
        Ok((alpha_w, beta_w))
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, policy: BnPolicy) -> Result<Tensor<E>> {
        let has_normal = self.cells.iter().any(|c| c.cell_type == CellType::Normal);
        let has_reduce = self.cells.iter().any(|c| c.cell_type == CellType::Reduce);
        let normal = if has_normal { Some(self.normalized(tape, CellType::Normal)?) } else { None };
        let reduce = if has_reduce { Some(self.normalized(tape, CellType::Reduce)?) } else { None };

        let stem_out = self.stem.forward(tape, x, policy)?;
        let mut s0 = stem_out.clone();
        let mut s1 = stem_out;
        for cell in &self.cells {
            let (alpha_w, beta_w) = match cell.cell_type {
                CellType::Normal => normal.as_ref().unwrap(),
                CellType::Reduce => reduce.as_ref().unwrap(),
            };
            let out = cell.forward(tape, &s0, &s1, alpha_w, beta_w.as_deref(), &self.masks, policy)?;
            s0 = s1;
            s1 = out;
        }
        self.classifier.forward(tape, &s1)
    }

    /// Network weights ω: stem, cell preprocessing + op weights, classifier.
    pub fn weight_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.stem.params(&mut out);
        for (i, cell) in self.cells.iter().enumerate() {
            cell.params(&format!("cell{i}"), &mut out);
        }
        self.classifier.params(&mut out);
        out
    }

    /// Architecture parameters the arch optimizer updates: α always, β only
    /// when edge normalization is active (otherwise β never enters the
    /// forward pass and must stay untouched).
    pub fn arch_params(&self) -> Vec<(String, Tensor<E>)> {
        self.arch
            .named()
            .into_iter()
            .filter(|(name, _)| self.spec.edge_norm || !name.starts_with("beta"))
            .collect()
    }
}
