//! Shared machinery for the integration suite: a central-difference gradient
//! checker, an independently written reference forward pass for the fully
//! connected (K=1, no edge normalization) super-network, a brute-force
//! genotype deriver, and small output-format checkers.
//!
//! The reference implementations here deliberately avoid the library's op
//! and cell composition code — they rebuild the network arithmetic from the
//! raw tape primitives so that agreement is evidence, not tautology.

#![allow(dead_code)]

use std::collections::HashMap;

use pcdarts_core::config::Config;
use pcdarts_core::genotype::Genotype;
use pcdarts_core::ops::{OpKind, OP_ORDER};
use pcdarts_core::rng::stream;
use pcdarts_core::space::{edge_list, is_reduction, ArchParams, CellType, NetSpec, SuperNet};
use pcdarts_core::tensor::{BnMode, ConvAttrs, Element, PoolAttrs, Tape, Tensor};
use pcdarts_core::Result;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

pub fn test_rng(label: &str) -> ChaCha12Rng {
    stream(0xC0FFEE, label)
}

/// Uniform values in [lo, hi).
pub fn rand_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values bounded away from zero (|x| ∈ [margin, 1)), so that finite
/// differences never step across a ReLU kink or a pooling argmax boundary.
pub fn rand_tensor_off_kink(rng: &mut ChaCha12Rng, shape: Vec<usize>, margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(margin..1.0)
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub struct FdReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Central-difference gradient check. `loss_fn` must rebuild the scalar loss
/// from the same `params` tensors on the tape it is handed; the analytic
/// gradient from one backward pass is compared against (f(x+h) − f(x−h))/2h
/// at up to `max_coords` randomly sampled coordinates per tensor.
pub fn fd_check(
    params: &[&Tensor<f64>],
    loss_fn: &dyn Fn(&Tape<f64>) -> Result<Tensor<f64>>,
    max_coords: usize,
    rng: &mut ChaCha12Rng,
) -> FdReport {
    let tape = Tape::<f64>::new();
    let loss = loss_fn(&tape).expect("loss construction");
    assert_eq!(loss.numel(), 1, "gradient check needs a scalar loss");
    tape.backward(&loss).expect("backward");
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }
    drop(tape);

    let eval = || -> f64 {
        let t = Tape::<f64>::new();
        let l = t.no_grad(|| loss_fn(&t)).expect("loss re-evaluation");
        l.to_f64_vec()[0]
    };

    let mut max_rel = 0.0_f64;
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, max_coords).into_vec()
        };
        let base = p.to_vec();
        let mut bumped = base.clone();
        for &ci in &coords {
            let h = 1e-5 * base[ci].abs().max(1.0);
            bumped[ci] = base[ci] + h;
            p.set_data(&bumped).unwrap();
            let up = eval();
            bumped[ci] = base[ci] - h;
            p.set_data(&bumped).unwrap();
            let down = eval();
            bumped[ci] = base[ci];
            p.set_data(&base).unwrap();

            let fd = (up - down) / (2.0 * h);
            let an = grads[pi][ci];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    FdReport { max_rel_err: max_rel, coords_checked: checked }
}

/// Reference forward pass for the degenerate configuration where partial
/// connection and edge normalization are both off (K=1): the network is then
/// an ordinary fully connected mixture super-network. Weights are looked up
/// by their checkpoint names; the composition below re-derives every stride,
/// padding, and channel count from scratch.
pub struct DartsReference<E: Element> {
    pub weights: HashMap<String, Tensor<E>>,
    pub spec: NetSpec,
}

impl<E: Element> DartsReference<E> {
    pub fn from_net(net: &SuperNet<E>) -> Self {
        assert_eq!(net.spec.k, 1, "reference model covers only K=1");
        assert!(!net.spec.edge_norm, "reference model has no edge normalization");
        DartsReference {
            weights: net.weight_params().into_iter().collect(),
            spec: net.spec.clone(),
        }
    }

    fn get(&self, name: &str) -> Tensor<E> {
        self.weights
            .get(name)
            .unwrap_or_else(|| panic!("reference model: missing weight '{name}'"))
            .clone()
    }

    fn bn(&self, tape: &Tape<E>, x: &Tensor<E>, prefix: &str) -> Result<Tensor<E>> {
        let w = self.weights.get(&format!("{prefix}.bn.weight")).cloned();
        let b = self.weights.get(&format!("{prefix}.bn.bias")).cloned();
        tape.batch_norm(x, w.as_ref(), b.as_ref(), BnMode::Train, E::from_f64(1e-5))
    }

    fn relu_conv_bn(&self, tape: &Tape<E>, x: &Tensor<E>, prefix: &str) -> Result<Tensor<E>> {
        let y = tape.relu(x)?;
        let y = tape.conv2d(&y, &self.get(&format!("{prefix}.w")), ConvAttrs::default())?;
        self.bn(tape, &y, prefix)
    }

    fn factorized_reduce(
        &self,
        tape: &Tape<E>,
        x: &Tensor<E>,
        prefix: &str,
    ) -> Result<Tensor<E>> {
        let s2 = ConvAttrs { stride: 2, ..Default::default() };
        let ya = tape.conv2d(x, &self.get(&format!("{prefix}.a")), s2)?;
        let shifted = tape.crop(x, 1, 1)?;
        let yb = tape.conv2d(&shifted, &self.get(&format!("{prefix}.b")), s2)?;
        let y = tape.concat_channels(&[ya, yb])?;
        self.bn(tape, &y, prefix)
    }

    /// ReLU → depthwise k×k → pointwise 1×1 → BN.
    fn sep_block(
        &self,
        tape: &Tape<E>,
        x: &Tensor<E>,
        prefix: &str,
        k: usize,
        stride: usize,
        dilation: usize,
        channels: usize,
    ) -> Result<Tensor<E>> {
        let dw_attrs = ConvAttrs {
            stride,
            pad: dilation * (k - 1) / 2,
            dilation,
            groups: channels,
        };
        let y = tape.relu(x)?;
        let y = tape.conv2d(&y, &self.get(&format!("{prefix}.dw")), dw_attrs)?;
        let y = tape.conv2d(&y, &self.get(&format!("{prefix}.pw")), ConvAttrs::default())?;
        self.bn(tape, &y, prefix)
    }

    fn op(
        &self,
        tape: &Tape<E>,
        x: &Tensor<E>,
        prefix: &str,
        kind: OpKind,
        stride: usize,
        channels: usize,
    ) -> Result<Tensor<E>> {
        let pool = PoolAttrs { kernel: 3, stride, pad: 1 };
        match kind {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
                let y = self.sep_block(tape, x, &format!("{prefix}.0"), k, stride, 1, channels)?;
                self.sep_block(tape, &y, &format!("{prefix}.1"), k, 1, 1, channels)
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
                self.sep_block(tape, x, prefix, k, stride, 2, channels)
            }
            OpKind::MaxPool3x3 => {
                let y = tape.max_pool2d(x, pool)?;
                self.bn(tape, &y, prefix)
            }
            OpKind::AvgPool3x3 => {
                let y = tape.avg_pool2d(x, pool)?;
                self.bn(tape, &y, prefix)
            }
            OpKind::SkipConnect => {
                if stride == 1 {
                    Ok(x.clone())
                } else {
                    self.factorized_reduce(tape, x, prefix)
                }
            }
            OpKind::Zero => {
                let s = x.shape();
                let h = (s[2] - 1) / stride + 1;
                let w = (s[3] - 1) / stride + 1;
                Ok(Tensor::zeros(vec![s[0], s[1], h, w]))
            }
        }
    }

    pub fn forward(
        &self,
        tape: &Tape<E>,
        arch: &ArchParams<E>,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let spec = &self.spec;
        let mix_weights = |ct: CellType| -> Result<Vec<Tensor<E>>> {
            let a = arch.alpha(ct);
            (0..arch.n_edges())
                .map(|e| {
                    let row = tape.row(a, e)?;
                    tape.softmax(&row, 0)
                })
                .collect()
        };
        let normal_w = mix_weights(CellType::Normal)?;
        let reduce_w = mix_weights(CellType::Reduce)?;

        let stem_attrs = ConvAttrs { pad: 1, ..Default::default() };
        let y = tape.conv2d(x, &self.get("stem.w"), stem_attrs)?;
        let y = self.bn(tape, &y, "stem")?;
        let (mut s0, mut s1) = (y.clone(), y);

        let edges = edge_list(spec.n_nodes);
        let mut c = spec.c0;
        let mut prev_reduced = false;
        for li in 0..spec.layers {
            let red = is_reduction(li, spec.layers);
            if red {
                c *= 2;
            }
            let p = format!("cell{li}");
            let h0 = if prev_reduced {
                self.factorized_reduce(tape, &s0, &format!("{p}.pre0"))?
            } else {
                self.relu_conv_bn(tape, &s0, &format!("{p}.pre0"))?
            };
            let h1 = self.relu_conv_bn(tape, &s1, &format!("{p}.pre1"))?;
            let mix = if red { &reduce_w } else { &normal_w };

            let mut states = vec![h0, h1];
            for j in 2..spec.n_nodes {
                let mut acc: Option<Tensor<E>> = None;
                for i in 0..j {
                    let e = edges.iter().position(|&pair| pair == (i, j)).unwrap();
                    let stride = if red && i < 2 { 2 } else { 1 };
                    let mut outs = Vec::with_capacity(OP_ORDER.len());
                    for (o, kind) in OP_ORDER.iter().enumerate() {
                        let prefix = format!("{p}.e{e}.op{o}");
                        outs.push(self.op(tape, &states[i], &prefix, *kind, stride, c)?);
                    }
                    let m = tape.weighted_sum(&outs, &mix[e])?;
                    acc = Some(match acc {
                        None => m,
                        Some(prev) => tape.add(&prev, &m)?,
                    });
                }
                states.push(acc.unwrap());
            }
            let out = tape.concat_channels(&states[2..])?;
            s0 = s1;
            s1 = out;
            prev_reduced = red;
        }

        let pooled = tape.global_avg_pool(&s1)?;
        let logits = tape.matmul(&pooled, &self.get("classifier.w"))?;
        tape.bias_add(&logits, &self.get("classifier.b"))
    }
}

fn softmax_plain(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Exhaustive genotype derivation: per node, enumerate every (edge pair,
/// op, op) assignment and keep the one with the largest summed combined
/// score, visiting candidates in (i1, i2, o1, o2) lexicographic order and
/// only accepting strict improvements — which reproduces the lower-index
/// preference of the production tie-break.
pub fn brute_force_derive(arch: &ArchParams<f64>, edge_norm: bool) -> Genotype {
    let n = pcdarts_core::space::nodes_for_edge_count(arch.n_edges())
        .expect("edge count must correspond to a node count");
    let mut cells: Vec<Vec<(String, usize)>> = Vec::new();
    for ct in [CellType::Normal, CellType::Reduce] {
        let a = arch.alpha(ct).to_f64_vec();
        let b = arch.beta(ct).to_f64_vec();
        let n_ops = OP_ORDER.len();
        let mut picks = Vec::new();
        let mut e_off = 0;
        for j in 2..n {
            let bw: Vec<f64> = if edge_norm {
                softmax_plain(&b[e_off..e_off + j])
            } else {
                vec![1.0; j]
            };
            let combined: Vec<Vec<f64>> = (0..j)
                .map(|i| {
                    let row = &a[(e_off + i) * n_ops..(e_off + i + 1) * n_ops];
                    softmax_plain(row).iter().map(|w| w * bw[i]).collect()
                })
                .collect();
            let mut best: Option<(f64, (usize, usize, usize, usize))> = None;
            for i1 in 0..j {
                for i2 in (i1 + 1)..j {
                    for o1 in 0..n_ops {
                        if OP_ORDER[o1] == OpKind::Zero {
                            continue;
                        }
                        for o2 in 0..n_ops {
                            if OP_ORDER[o2] == OpKind::Zero {
                                continue;
                            }
                            let sum = combined[i1][o1] + combined[i2][o2];
                            if best.map_or(true, |(s, _)| sum > s) {
                                best = Some((sum, (i1, o1, i2, o2)));
                            }
                        }
                    }
                }
            }
            let (_, (i1, o1, i2, o2)) = best.expect("every node has at least one pair");
            picks.push((OP_ORDER[o1].name().to_string(), i1));
            picks.push((OP_ORDER[o2].name().to_string(), i2));
            e_off += j;
        }
        cells.push(picks);
    }
    let reduce = cells.pop().unwrap();
    let normal = cells.pop().unwrap();
    Genotype { normal, reduce, concat: (2..n).collect() }
}

/// The searched CIFAR-10 cells shipped with the reference implementation of
/// this method; used as a known-answer input for the cost model.
pub fn published_cifar_cells() -> Genotype {
    let pairs = |v: &[(&str, usize)]| -> Vec<(String, usize)> {
        v.iter().map(|(o, i)| (o.to_string(), *i)).collect()
    };
    Genotype {
        normal: pairs(&[
            ("sep_conv_3x3", 1),
            ("skip_connect", 0),
            ("sep_conv_3x3", 0),
            ("dil_conv_3x3", 1),
            ("sep_conv_5x5", 0),
            ("sep_conv_3x3", 1),
            ("avg_pool_3x3", 0),
            ("dil_conv_3x3", 1),
        ]),
        reduce: pairs(&[
            ("sep_conv_5x5", 1),
            ("max_pool_3x3", 0),
            ("sep_conv_5x5", 1),
            ("sep_conv_5x5", 2),
            ("sep_conv_3x3", 0),
            ("sep_conv_3x3", 3),
            ("sep_conv_3x3", 1),
            ("dil_conv_5x5", 4),
        ]),
        concat: vec![2, 3, 4, 5],
    }
}

/// Structural DOT validation: balanced braces, one statement per line, every
/// statement terminated, every edge of the form `a -> b [...];`. Returns
/// (node declarations, edges).
pub fn check_dot(text: &str) -> std::result::Result<(usize, usize), String> {
    let mut depth = 0usize;
    let mut nodes = 0usize;
    let mut edges = 0usize;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    match lines.next() {
        Some(first) if first.starts_with("digraph ") && first.ends_with('{') => depth += 1,
        other => return Err(format!("expected 'digraph … {{' header, got {other:?}")),
    }
    for line in lines {
        if line.chars().filter(|&c| c == '"').count() % 2 != 0 {
            return Err(format!("unbalanced quotes in line: {line}"));
        }
        if line.ends_with('{') {
            if !line.starts_with("subgraph ") {
                return Err(format!("unexpected block opener: {line}"));
            }
            depth += 1;
        } else if line == "}" {
            if depth == 0 {
                return Err("unbalanced closing brace".into());
            }
            depth -= 1;
        } else if line.ends_with(';') {
            if line.contains("->") {
                let lhs = line.split("->").count();
                if lhs != 2 {
                    return Err(format!("malformed edge: {line}"));
                }
                edges += 1;
            } else if line.contains('[') {
                nodes += 1;
            }
        } else {
            return Err(format!("statement not terminated: {line}"));
        }
    }
    if depth != 0 {
        return Err("unbalanced braces at end of file".into());
    }
    Ok((nodes, edges))
}

pub fn cfg_from(toml_text: &str) -> Config {
    Config::from_toml(toml_text).expect("test config parses")
}

/// Overwrites an arch-parameter set with seeded uniform draws scaled by
/// `spread`, so derivation sees well-separated scores.
pub fn randomized_arch(n_nodes: usize, seed: u64, spread: f64) -> ArchParams<f64> {
    let arch = ArchParams::<f64>::init(n_nodes, seed).unwrap();
    let mut rng = stream(seed, "test-arch-draw");
    for (_, t) in arch.named() {
        let vals: Vec<f64> = (0..t.numel())
            .map(|_| rng.random_range(-1.0..1.0) * spread)
            .collect();
        t.set_data(&vals).unwrap();
    }
    arch
}
