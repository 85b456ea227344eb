//! The fixed candidate operation set, plus the stem and classifier layers
//! that sandwich the searched cells.
//!
//! Operation order is global and fixed — architecture weights are indexed by
//! position in [`OP_ORDER`], and genotype files use these exact names.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BnMode, ConvAttrs, Element, PoolAttrs, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    SkipConnect,
    Zero,
}

pub const OP_ORDER: [OpKind; 8] = [
    OpKind::SepConv3x3,
    OpKind::SepConv5x5,
    OpKind::DilConv3x3,
    OpKind::DilConv5x5,
    OpKind::MaxPool3x3,
    OpKind::AvgPool3x3,
    OpKind::SkipConnect,
    OpKind::Zero,
];

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Zero => "zero",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OP_ORDER.iter().copied().find(|k| k.name() == name)
    }

    /// Position in the global order (= the op's column in every alpha row).
    pub fn index(self) -> usize {
        OP_ORDER.iter().position(|&k| k == self).unwrap()
    }

    /// True for operations that own no trainable weights at stride 1. (The
    /// strided skip-connect instance does own reduction convolutions, but the
    /// descriptor-level distinction is what the search dynamics care about.)
    pub fn is_weight_free(self) -> bool {
        matches!(
            self,
            OpKind::MaxPool3x3 | OpKind::AvgPool3x3 | OpKind::SkipConnect | OpKind::Zero
        )
    }
}

/// How batch normalization layers obtain statistics for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnPolicy {
    /// Normalize with the current batch's statistics (search-time behavior).
    BatchStats,
    /// Normalize with identity statistics (mean 0, variance 1): the layer
    /// becomes a fixed affine map. Used by structural tests.
    IdentityEval,
}

pub struct BatchNorm<E: Element> {
    channels: usize,
    weight: Option<Tensor<E>>,
    bias: Option<Tensor<E>>,
    eps: E,
}

impl<E: Element> BatchNorm<E> {
    pub fn new(channels: usize, affine: bool) -> Self {
        let (weight, bias) = if affine {
            (
                Some(Tensor::full(vec![channels], E::one()).requires_grad()),
                Some(Tensor::zeros(vec![channels]).requires_grad()),
            )
        } else {
            (None, None)
        };
        BatchNorm { channels, weight, bias, eps: E::from_f64(1e-5) }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, policy: BnPolicy) -> Result<Tensor<E>> {
        match policy {
            BnPolicy::BatchStats => {
                tape.batch_norm(x, self.weight.as_ref(), self.bias.as_ref(), BnMode::Train, self.eps)
            }
            BnPolicy::IdentityEval => {
                let mean = vec![E::zero(); self.channels];
                let var = vec![E::one(); self.channels];
                tape.batch_norm(
                    x,
                    self.weight.as_ref(),
                    self.bias.as_ref(),
                    BnMode::Eval { mean: &mean, var: &var },
                    E::zero(),
                )
            }
        }
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        if let Some(w) = &self.weight {
            out.push((format!("{prefix}.bn.weight"), w.clone()));
        }
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bn.bias"), b.clone()));
        }
    }
}

/// He-normal initialization for a convolution weight.
fn conv_init<E: Element>(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor<E> {
    let fan_in: usize = shape[1] * shape[2] * shape[3];
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let data: Vec<E> = (0..shape.iter().product())
        .map(|_| E::from_f64(normal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).unwrap().requires_grad()
}

/// ReLU → depthwise k×k → pointwise 1×1 → BN. The building block of both
/// separable and dilated-separable convolutions.
pub struct ConvBnBlock<E: Element> {
    dw: Tensor<E>,
    pw: Tensor<E>,
    bn: BatchNorm<E>,
    dw_attrs: ConvAttrs,
}

impl<E: Element> ConvBnBlock<E> {
    pub fn new(
        channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        affine: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let pad = dilation * (kernel - 1) / 2;
        ConvBnBlock {
            dw: conv_init(rng, vec![channels, 1, kernel, kernel]),
            pw: conv_init(rng, vec![channels, channels, 1, 1]),
            bn: BatchNorm::new(channels, affine),
            dw_attrs: ConvAttrs { stride, pad, dilation, groups: channels },
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, policy: BnPolicy) -> Result<Tensor<E>> {
        let y = tape.relu(x)?;
        let y = tape.conv2d(&y, &self.dw, self.dw_attrs)?;
        let y = tape.conv2d(&y, &self.pw, ConvAttrs::default())?;
        self.bn.forward(tape, &y, policy)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.dw"), self.dw.clone()));
        out.push((format!("{prefix}.pw"), self.pw.clone()));
        self.bn.params(prefix, out);
    }
}

/// ReLU → 1×1 conv → BN; adapts channel counts in cell preprocessing.
pub struct ReluConvBn<E: Element> {
    w: Tensor<E>,
    bn: BatchNorm<E>,
}

impl<E: Element> ReluConvBn<E> {
    pub fn new(c_in: usize, c_out: usize, affine: bool, rng: &mut ChaCha12Rng) -> Self {
        ReluConvBn {
            w: conv_init(rng, vec![c_out, c_in, 1, 1]),
            bn: BatchNorm::new(c_out, affine),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, policy: BnPolicy) -> Result<Tensor<E>> {
        let y = tape.relu(x)?;
        let y = tape.conv2d(&y, &self.w, ConvAttrs::default())?;
        self.bn.forward(tape, &y, policy)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        self.bn.params(prefix, out);
    }
}

/// Halves the spatial extent without losing pixel phases: two parallel 1×1
/// stride-2 convolutions, the second reading pixels offset by (1,1), results
/// concatenated on channels and normalized. Requires even spatial extents.
pub struct FactorizedReduce<E: Element> {
    a: Tensor<E>,
    b: Tensor<E>,
    bn: BatchNorm<E>,
}

impl<E: Element> FactorizedReduce<E> {
    pub fn new(c_in: usize, c_out: usize, affine: bool, rng: &mut ChaCha12Rng) -> Self {
        let half = c_out / 2;
        FactorizedReduce {
            a: conv_init(rng, vec![c_out - half, c_in, 1, 1]),
            b: conv_init(rng, vec![half.max(1), c_in, 1, 1]),
            bn: BatchNorm::new(c_out, affine),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, policy: BnPolicy) -> Result<Tensor<E>> {
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
            return Err(Error::ShapeMismatch {
                op: "factorized_reduce",
                detail: format!("spatial extent {}x{} must be even", h, w),
            });
        }
        let stride2 = ConvAttrs { stride: 2, ..Default::default() };
        let ya = tape.conv2d(x, &self.a, stride2)?;
        let shifted = tape.crop(x, 1, 1)?;
        let yb = tape.conv2d(&shifted, &self.b, stride2)?;
        let y = tape.concat_channels(&[ya, yb])?;
        self.bn.forward(tape, &y, policy)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.a"), self.a.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
        self.bn.params(prefix, out);
    }
}

enum OpBody<E: Element> {
    SepConv(ConvBnBlock<E>, ConvBnBlock<E>),
    DilConv(ConvBnBlock<E>),
    MaxPool(BatchNorm<E>),
    AvgPool(BatchNorm<E>),
    Identity,
    FactRed(FactorizedReduce<E>),
    Zero,
}

/// One candidate operation instantiated for a concrete edge: channel count
/// and stride fixed, weights owned.
pub struct OpInstance<E: Element> {
    pub kind: OpKind,
    pub stride: usize,
    body: OpBody<E>,
}

impl<E: Element> OpInstance<E> {
    /// Channel-preserving operation at the given stride (1 or 2).
    pub fn build(
        kind: OpKind,
        channels: usize,
        stride: usize,
        affine: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidAttr {
                op: "build_op",
                detail: "channels must be >= 1".into(),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidAttr {
                op: "build_op",
                detail: format!("stride {} not in {{1, 2}}", stride),
            });
        }
        let body = match kind {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
                OpBody::SepConv(
                    ConvBnBlock::new(channels, k, stride, 1, affine, rng),
                    ConvBnBlock::new(channels, k, 1, 1, affine, rng),
                )
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
                OpBody::DilConv(ConvBnBlock::new(channels, k, stride, 2, affine, rng))
            }
            OpKind::MaxPool3x3 => OpBody::MaxPool(BatchNorm::new(channels, affine)),
            OpKind::AvgPool3x3 => OpBody::AvgPool(BatchNorm::new(channels, affine)),
            OpKind::SkipConnect => {
                if stride == 1 {
                    OpBody::Identity
                } else {
                    OpBody::FactRed(FactorizedReduce::new(channels, channels, affine, rng))
                }
            }
            OpKind::Zero => OpBody::Zero,
        };
        Ok(OpInstance { kind, stride, body })
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, policy: BnPolicy) -> Result<Tensor<E>> {
        let pool = PoolAttrs { kernel: 3, stride: self.stride, pad: 1 };
        match &self.body {
            OpBody::SepConv(b1, b2) => {
                let y = b1.forward(tape, x, policy)?;
                b2.forward(tape, &y, policy)
            }
            OpBody::DilConv(b) => b.forward(tape, x, policy),
            OpBody::MaxPool(bn) => {
                let y = tape.max_pool2d(x, pool)?;
                bn.forward(tape, &y, policy)
            }
            OpBody::AvgPool(bn) => {
                let y = tape.avg_pool2d(x, pool)?;
                bn.forward(tape, &y, policy)
            }
            OpBody::Identity => Ok(x.clone()),
            OpBody::FactRed(fr) => fr.forward(tape, x, policy),
            OpBody::Zero => tape.zeros_strided(x, self.stride),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        match &self.body {
            OpBody::SepConv(b1, b2) => {
                b1.params(&format!("{prefix}.0"), out);
                b2.params(&format!("{prefix}.1"), out);
            }
            OpBody::DilConv(b) => b.params(prefix, out),
            OpBody::MaxPool(bn) | OpBody::AvgPool(bn) => bn.params(prefix, out),
            OpBody::Identity | OpBody::Zero => {}
            OpBody::FactRed(fr) => fr.params(prefix, out),
        }
    }

    pub fn has_weights(&self) -> bool {
        let mut p = Vec::new();
        self.params("", &mut p);
        !p.is_empty()
    }
}

/// 3×3 conv → BN lifting RGB input to the initial channel count.
pub struct Stem<E: Element> {
    w: Tensor<E>,
    bn: BatchNorm<E>,
}

pub fn build_stem<E: Element>(c0: usize, rng: &mut ChaCha12Rng) -> Stem<E> {
    Stem {
        w: conv_init(rng, vec![c0, 3, 3, 3]),
        bn: BatchNorm::new(c0, true),
    }
}

impl<E: Element> Stem<E> {
    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, policy: BnPolicy) -> Result<Tensor<E>> {
        let y = tape.conv2d(x, &self.w, ConvAttrs { pad: 1, ..Default::default() })?;
        self.bn.forward(tape, &y, policy)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<E>)>) {
        out.push(("stem.w".to_string(), self.w.clone()));
        self.bn.params("stem", out);
    }
}

/// Global average pool → linear map to logits.
pub struct Classifier<E: Element> {
    w: Tensor<E>,
    b: Tensor<E>,
}

pub fn build_classifier<E: Element>(channels: usize, classes: usize, rng: &mut ChaCha12Rng) -> Classifier<E> {
    let bound = 1.0 / (channels as f64).sqrt();
    let data: Vec<E> = (0..channels * classes)
        .map(|_| E::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Classifier {
        w: Tensor::from_vec(vec![channels, classes], data).unwrap().requires_grad(),
        b: Tensor::zeros(vec![classes]).requires_grad(),
    }
}

impl<E: Element> Classifier<E> {
    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let pooled = tape.global_avg_pool(x)?;
        let logits = tape.matmul(&pooled, &self.w)?;
        tape.bias_add(&logits, &self.b)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<E>)>) {
        out.push(("classifier.w".to_string(), self.w.clone()));
        out.push(("classifier.b".to_string(), self.b.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn rng() -> ChaCha12Rng {
        stream(1, "ops-tests")
    }

    #[test]
    fn op_order_and_names_are_fixed() {
        let names: Vec<&str> = OP_ORDER.iter().map(|k| k.name()).collect();
        assert_eq!(
            names,
            [
                "sep_conv_3x3",
                "sep_conv_5x5",
                "dil_conv_3x3",
                "dil_conv_5x5",
                "max_pool_3x3",
                "avg_pool_3x3",
                "skip_connect",
                "zero"
            ]
        );
        for (i, k) in OP_ORDER.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(OpKind::from_name(k.name()), Some(*k));
        }
        assert_eq!(OpKind::from_name("conv_7x7"), None);
    }

    #[test]
    fn weight_free_set_is_exact() {
        let free: Vec<OpKind> = OP_ORDER.iter().copied().filter(|k| k.is_weight_free()).collect();
        assert_eq!(
            free,
            [OpKind::MaxPool3x3, OpKind::AvgPool3x3, OpKind::SkipConnect, OpKind::Zero]
        );
    }

    #[test]
    fn every_op_preserves_channels_and_divides_spatial() {
        let tape = Tape::<f64>::new();
        let mut rng = rng();
        for stride in [1usize, 2] {
            let x = Tensor::full(vec![2, 4, 8, 8], 0.3);
            for kind in OP_ORDER {
                let op = OpInstance::build(kind, 4, stride, false, &mut rng).unwrap();
                let y = op.forward(&tape, &x, BnPolicy::BatchStats).unwrap();
                assert_eq!(
                    y.shape(),
                    &[2, 4, 8 / stride, 8 / stride],
                    "{} at stride {}",
                    kind.name(),
                    stride
                );
            }
        }
    }

    #[test]
    fn zero_outputs_zeros_and_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let mut rng = rng();
        let op = OpInstance::build(OpKind::Zero, 3, 2, false, &mut rng).unwrap();
        let x = Tensor::full(vec![1, 3, 4, 4], 5.0).requires_grad();
        let y = op.forward(&tape, &x, BnPolicy::BatchStats).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
        assert!(tape.is_empty()); // nothing recorded → exactly zero gradient
        assert!(x.grad().is_none());
    }

    #[test]
    fn skip_connect_is_identity_at_stride_1() {
        let tape = Tape::<f64>::new();
        let mut rng = rng();
        let op = OpInstance::build(OpKind::SkipConnect, 3, 1, false, &mut rng).unwrap();
        let x = Tensor::full(vec![1, 3, 4, 4], 1.25);
        let y = op.forward(&tape, &x, BnPolicy::BatchStats).unwrap();
        assert_eq!(y.ptr_id(), x.ptr_id());
        assert!(!op.has_weights());
    }

    #[test]
    fn strided_skip_owns_reduction_weights_and_splits_oddly() {
        let tape = Tape::<f64>::new();
        let mut rng = rng();
        let op = OpInstance::build(OpKind::SkipConnect, 5, 2, false, &mut rng).unwrap();
        assert!(op.has_weights()); // instance-level, unlike the descriptor
        let x = Tensor::full(vec![1, 5, 6, 6], 0.7);
        let y = op.forward(&tape, &x, BnPolicy::BatchStats).unwrap();
        assert_eq!(y.shape(), &[1, 5, 3, 3]);
    }

    #[test]
    fn max_pool_on_constant_with_identity_stats_is_constant() {
        let tape = Tape::<f64>::new();
        let mut rng = rng();
        let op = OpInstance::build(OpKind::MaxPool3x3, 2, 1, false, &mut rng).unwrap();
        let x = Tensor::full(vec![1, 2, 4, 4], 3.5);
        let y = op.forward(&tape, &x, BnPolicy::IdentityEval).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn stem_and_classifier_shapes() {
        let tape = Tape::<f64>::new();
        let mut rng = rng();
        let stem = build_stem::<f64>(16, &mut rng);
        let x = Tensor::full(vec![2, 3, 32, 32], 0.1);
        let y = stem.forward(&tape, &x, BnPolicy::BatchStats).unwrap();
        assert_eq!(y.shape(), &[2, 16, 32, 32]);

        let clf = build_classifier::<f64>(16, 10, &mut rng);
        let logits = clf.forward(&tape, &y).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(logits.is_finite());
    }

    #[test]
    fn sep_conv_parameter_names_enumerate_blocks() {
        let mut rng = rng();
        let op = OpInstance::<f64>::build(OpKind::SepConv3x3, 4, 1, true, &mut rng).unwrap();
        let mut params = Vec::new();
        op.params("cell0.e3.op0", &mut params);
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "cell0.e3.op0.0.dw",
                "cell0.e3.op0.0.pw",
                "cell0.e3.op0.0.bn.weight",
                "cell0.e3.op0.0.bn.bias",
                "cell0.e3.op0.1.dw",
                "cell0.e3.op0.1.pw",
                "cell0.e3.op0.1.bn.weight",
                "cell0.e3.op0.1.bn.bias"
            ]
        );
    }
}
