//! Discrete architectures: derivation from the continuous encoding,
//! structural validation, parameter/multiply-add accounting under the
//! evaluation-network layout, and DOT rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{OpKind, OP_ORDER};
use crate::space::{edge_count, is_reduction, ArchParams, CellType};
use crate::tensor::Element;

/// Two (operation, predecessor) picks per intermediate node, for each cell
/// type, plus the node range concatenated as the cell output. Serializes to
/// the interchange JSON `{"normal": [["op", i], ...], "reduce": [...],
/// "concat": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<(String, usize)>,
    pub reduce: Vec<(String, usize)>,
    pub concat: Vec<usize>,
}

impl Genotype {
    pub fn n_nodes(&self) -> usize {
        self.normal.len() / 2 + 2
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Genotype(format!("bad genotype JSON: {e}")))
    }
}

/// How an edge's score aggregates its op mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeScore {
    /// Strength of the single best op (default).
    MaxOp,
    /// Total non-excluded mixture mass (experimental alternative).
    SumOps,
}

fn softmax_f64(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Picks, for every intermediate node, the two strongest incoming edges and
/// each edge's strongest op. Edge strength multiplies the op weight by the
/// node-normalized edge coefficient when edge normalization was active.
/// Deterministic ties: lower predecessor index first, then op-list order.
pub fn derive<E: Element>(arch: &ArchParams<E>, edge_norm_used: bool) -> Result<Genotype> {
    derive_with(arch, edge_norm_used, false, EdgeScore::MaxOp)
}

pub fn derive_with<E: Element>(
    arch: &ArchParams<E>,
    edge_norm_used: bool,
    keep_zero: bool,
    score: EdgeScore,
) -> Result<Genotype> {
    let n = arch.n_nodes;
    if n < 3 {
        return Err(Error::Genotype(format!("{n} nodes leave no intermediate node")));
    }
    let ne = edge_count(n);
    for (t, want) in [
        (arch.alpha_normal.shape().to_vec(), vec![ne, OP_ORDER.len()]),
        (arch.alpha_reduce.shape().to_vec(), vec![ne, OP_ORDER.len()]),
        (arch.beta_normal.shape().to_vec(), vec![ne]),
        (arch.beta_reduce.shape().to_vec(), vec![ne]),
    ] {
        if t != want {
            return Err(Error::Genotype(format!(
                "architecture tensor shape {t:?} inconsistent with {n} nodes"
            )));
        }
    }

    let pick = |cell: CellType| -> Vec<(String, usize)> {
        let alpha = arch.alpha(cell).to_f64_vec();
        let beta = arch.beta(cell).to_f64_vec();
        let ops = OP_ORDER.len();
        let mut out = Vec::new();
        let mut offset = 0;
        for j in 2..n {
            let edge_coeff = if edge_norm_used {
                softmax_f64(&beta[offset..offset + j])
            } else {
                vec![1.0; j]
            };
            // (score, predecessor, op index) per incoming edge
            let mut scored: Vec<(f64, usize, usize)> = (0..j)
                .map(|i| {
                    let w = softmax_f64(&alpha[(offset + i) * ops..(offset + i + 1) * ops]);
                    let allowed =
                        (0..ops).filter(|&o| keep_zero || OP_ORDER[o] != OpKind::Zero);
                    let (best_op, best_w) = allowed
                        .map(|o| (o, w[o]))
                        .reduce(|acc, cur| if cur.1 > acc.1 { cur } else { acc })
                        .unwrap();
                    let mass: f64 = match score {
                        EdgeScore::MaxOp => best_w,
                        EdgeScore::SumOps => (0..ops)
                            .filter(|&o| keep_zero || OP_ORDER[o] != OpKind::Zero)
                            .map(|o| w[o])
                            .sum(),
                    };
                    (mass * edge_coeff[i], i, best_op)
                })
                .collect();
            // stable sort keeps lower predecessors first on exact ties
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut top: Vec<_> = scored.into_iter().take(2).collect();
            top.sort_by_key(|&(_, i, _)| i);
            for (_, i, o) in top {
                out.push((OP_ORDER[o].name().to_string(), i));
            }
            offset += j;
        }
        out
    };

    Ok(Genotype {
        normal: pick(CellType::Normal),
        reduce: pick(CellType::Reduce),
        concat: (2..n).collect(),
    })
}

/// Structural checks; each violation is reported as a kebab-case tag with
/// context. An empty list means the genotype is valid.
pub fn validate(g: &Genotype, n_nodes: usize) -> Vec<String> {
    let mut violations = Vec::new();
    let want = 2 * (n_nodes.saturating_sub(2));
    for (label, entries) in [("normal", &g.normal), ("reduce", &g.reduce)] {
        if entries.len() != want {
            violations.push(format!(
                "bad-arity: {label} has {} entries, expected {want}",
                entries.len()
            ));
            continue;
        }
        for (slot, (op, pred)) in entries.iter().enumerate() {
            let j = slot / 2 + 2;
            match OpKind::from_name(op) {
                None => violations.push(format!("unknown-op: {label} node {j} uses '{op}'")),
                Some(OpKind::Zero) => {
                    violations.push(format!("excluded-op: {label} node {j} uses 'zero'"))
                }
                Some(_) => {}
            }
            if *pred >= j {
                violations.push(format!(
                    "predecessor-out-of-range: {label} node {j} reads node {pred}"
                ));
            }
        }
        for pair in entries.chunks_exact(2) {
            if pair[0].1 == pair[1].1 {
                let j = entries.chunks_exact(2).position(|p| std::ptr::eq(p, pair)).unwrap() + 2;
                violations.push(format!(
                    "duplicate-predecessor: {label} node {j} reads node {} twice",
                    pair[0].1
                ));
            }
        }
    }
    for &c in &g.concat {
        if c < 2 || c >= n_nodes {
            violations.push(format!("bad-concat: node {c} outside 2..{n_nodes}"));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for &c in &g.concat {
        if !seen.insert(c) {
            violations.push(format!("bad-concat: node {c} repeated"));
        }
    }
    violations
}

/// Edge-set Jaccard similarity between two genotypes (agreement metric for
/// seed sweeps). Edges are (cell, node, predecessor, op) tuples.
pub fn jaccard(a: &Genotype, b: &Genotype) -> f64 {
    let set = |g: &Genotype| -> std::collections::HashSet<(u8, usize, usize, String)> {
        let mut s = std::collections::HashSet::new();
        for (tag, entries) in [(0u8, &g.normal), (1u8, &g.reduce)] {
            for (slot, (op, pred)) in entries.iter().enumerate() {
                s.insert((tag, slot / 2 + 2, *pred, op.clone()));
            }
        }
        s
    };
    let sa = set(a);
    let sb = set(b);
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub multiply_adds: u64,
    pub resolution: usize,
    /// Multiply-adds re-evaluated at 224×224 (the mobile-setting input).
    pub mobile_multiply_adds: u64,
    /// ≤ 600M multiply-adds at 224×224.
    pub mobile_ok: bool,
}

const MOBILE_RESOLUTION: usize = 224;
const MOBILE_BUDGET: u64 = 600_000_000;

struct OpCost {
    params: u64,
    macs: u64,
}

fn conv_cost(c_out: u64, c_in_per_group: u64, k: u64, h_out: u64, w_out: u64) -> OpCost {
    let params = c_out * c_in_per_group * k * k;
    OpCost { params, macs: c_out * h_out * w_out * c_in_per_group * k * k }
}

fn bn_cost(c: u64) -> OpCost {
    OpCost { params: 2 * c, macs: 0 } // affine scale+shift; counted as zero multiply-adds
}

fn add(a: OpCost, b: OpCost) -> OpCost {
    OpCost { params: a.params + b.params, macs: a.macs + b.macs }
}

/// Cost of one discrete op at `c` channels; `h_out` is the op's output
/// spatial extent (already strided).
fn op_cost(kind: OpKind, c: u64, stride: usize, h_out: u64, w_out: u64) -> OpCost {
    let sep_block = |k: u64| {
        add(
            add(conv_cost(c, 1, k, h_out, w_out), conv_cost(c, c, 1, h_out, w_out)),
            bn_cost(c),
        )
    };
    match kind {
        OpKind::SepConv3x3 => add(sep_block(3), sep_block(3)),
        OpKind::SepConv5x5 => add(sep_block(5), sep_block(5)),
        OpKind::DilConv3x3 => sep_block(3),
        OpKind::DilConv5x5 => sep_block(5),
        OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => bn_cost(c),
        OpKind::SkipConnect => {
            if stride == 1 {
                OpCost { params: 0, macs: 0 }
            } else {
                // factorized reduce: two parallel 1×1 stride-2 convs + BN
                let half = c / 2;
                add(
                    add(
                        conv_cost(c - half, c, 1, h_out, w_out),
                        conv_cost(half, c, 1, h_out, w_out),
                    ),
                    bn_cost(c),
                )
            }
        }
        OpKind::Zero => OpCost { params: 0, macs: 0 },
    }
}

/// Parameter and multiply-add counts for the evaluation network built from a
/// genotype: stem, L stacked cells (reductions at the third marks, channels
/// doubling there), classifier. Counts are additive over these pieces.
pub fn count_costs(
    g: &Genotype,
    c0: usize,
    layers: usize,
    classes: usize,
    resolution: usize,
) -> Result<CostReport> {
    let violations = validate(g, g.n_nodes());
    if !violations.is_empty() {
        return Err(Error::Genotype(format!(
            "cannot cost an invalid genotype: {}",
            violations.join("; ")
        )));
    }
    if layers == 0 || c0 == 0 || classes == 0 || resolution == 0 {
        return Err(Error::Genotype("layers, channels, classes, resolution must be ≥ 1".into()));
    }
    let macs_at = |res: usize| -> (u64, u64) {
        let mut params = 0u64;
        let mut macs = 0u64;
        let n = g.n_nodes();

        // stem: 3×3 conv (pad 1) from RGB to c0, then affine BN
        let st = add(conv_cost(c0 as u64, 3, 3, res as u64, res as u64), bn_cost(c0 as u64));
        params += st.params;
        macs += st.macs;

        let (mut c_pp, mut c_p, mut c) = (c0 as u64, c0 as u64, c0 as u64);
        let (mut h_pp, mut h_p) = (res as u64, res as u64);
        let mut prev_reduced = false;
        for idx in 0..layers {
            let reduce = is_reduction(idx, layers);
            if reduce {
                c *= 2;
            }
            let h_out = if reduce { h_p.div_ceil(2) } else { h_p };

            // preprocessing adapts both inputs to c channels at h_p
            let pre0 = if prev_reduced {
                let half = c / 2;
                add(
                    add(
                        conv_cost(c - half, c_pp, 1, h_p, h_p),
                        conv_cost(half, c_pp, 1, h_p, h_p),
                    ),
                    bn_cost(c),
                )
            } else {
                add(conv_cost(c, c_pp, 1, h_pp, h_pp), bn_cost(c))
            };
            let pre1 = add(conv_cost(c, c_p, 1, h_p, h_p), bn_cost(c));
            params += pre0.params + pre1.params;
            macs += pre0.macs + pre1.macs;

            let entries = if reduce { &g.reduce } else { &g.normal };
            for (slot, (op, pred)) in entries.iter().enumerate() {
                let _j = slot / 2 + 2;
                let kind = OpKind::from_name(op).unwrap();
                let stride = if reduce && *pred < 2 { 2 } else { 1 };
                let oc = op_cost(kind, c, stride, h_out, h_out);
                params += oc.params;
                macs += oc.macs;
            }

            c_pp = c_p;
            c_p = (n as u64 - 2) * c;
            h_pp = h_p;
            h_p = h_out;
            prev_reduced = reduce;
        }

        // classifier: global average pool (free) then linear with bias
        params += c_p * classes as u64 + classes as u64;
        macs += c_p * classes as u64;
        (params, macs)
    };

    let (params, multiply_adds) = macs_at(resolution);
    let (_, mobile_multiply_adds) = macs_at(MOBILE_RESOLUTION);
    Ok(CostReport {
        params,
        multiply_adds,
        resolution,
        mobile_multiply_adds,
        mobile_ok: mobile_multiply_adds <= MOBILE_BUDGET,
    })
}

/// Deterministic DOT rendering: both cells as clusters, inputs c_{k-2} and
/// c_{k-1}, intermediate nodes numbered from 0, op-labeled edges, and a
/// concat sink.
pub fn to_dot(g: &Genotype) -> String {
    let mut out = String::from("digraph genotype {\n  rankdir=LR;\n  node [shape=box, style=rounded];\n");
    for (label, entries) in [("normal", &g.normal), ("reduce", &g.reduce)] {
        let n_mid = entries.len() / 2;
        out.push_str(&format!("  subgraph cluster_{label} {{\n    label=\"{label}\";\n"));
        out.push_str(&format!("    {label}_in0 [label=\"c_{{k-2}}\"];\n"));
        out.push_str(&format!("    {label}_in1 [label=\"c_{{k-1}}\"];\n"));
        for m in 0..n_mid {
            out.push_str(&format!("    {label}_n{m} [label=\"{m}\"];\n"));
        }
        out.push_str(&format!("    {label}_out [label=\"c_{{k}}\"];\n"));
        for (slot, (op, pred)) in entries.iter().enumerate() {
            let dst = slot / 2;
            let src = match pred {
                0 => format!("{label}_in0"),
                1 => format!("{label}_in1"),
                p => format!("{label}_n{}", p - 2),
            };
            out.push_str(&format!("    {src} -> {label}_n{dst} [label=\"{op}\"];\n"));
        }
        for &cnode in &g.concat {
            out.push_str(&format!("    {label}_n{} -> {label}_out [style=dashed];\n", cnode - 2));
        }
        out.push_str("  }\n");
    }
    out.push_str("}\n");
    out
}
