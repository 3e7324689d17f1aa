use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::spec::{BlockKind, StageSpec};
use crate::autograd::{Float, Tensor};
use crate::error::Result;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass mode. Training uses batch statistics and updates running
/// statistics; evaluation uses the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Collects `(name, tensor)` pairs. Trainable parameters have
/// `requires_grad`; running statistics are plain leaves.
pub(crate) type Visitor<'a, F> = dyn FnMut(String, &Tensor<F>) + 'a;

fn uniform<F: Float>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<F> {
    (0..n)
        .map(|_| F::from_f64(rng.random_range(-bound..bound)))
        .collect()
}

pub(crate) struct Conv<F: Float> {
    weight: Tensor<F>,
    stride: usize,
}

impl<F: Float> Conv<F> {
    /// 3×3 convolution, padding 1, He-uniform initialised.
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let fan_in = cin * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        Ok(Conv {
            weight: Tensor::parameter(&[cout, cin, 3, 3], uniform(rng, cout * fan_in, bound))?,
            stride,
        })
    }

    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.conv2d(&self.weight, self.stride, 1)
    }
}

pub(crate) struct BatchNorm<F: Float> {
    gamma: Tensor<F>,
    beta: Tensor<F>,
    running_mean: Tensor<F>,
    running_var: Tensor<F>,
}

impl<F: Float> BatchNorm<F> {
    fn new(c: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: Tensor::parameter(&[c], vec![F::ONE; c])?,
            beta: Tensor::parameter(&[c], vec![F::ZERO; c])?,
            running_mean: Tensor::new(&[c], vec![F::ZERO; c])?,
            running_var: Tensor::new(&[c], vec![F::ONE; c])?,
        })
    }

    fn forward(&self, x: &Tensor<F>, phase: Phase) -> Result<Tensor<F>> {
        let eps = F::from_f64(BN_EPS);
        match phase {
            Phase::Train => {
                let (y, mean, var) = x.batch_norm(&self.gamma, &self.beta, eps)?;
                let count = x.numel() / mean.len();
                let unbias = if count > 1 {
                    F::from_usize(count) / F::from_usize(count - 1)
                } else {
                    F::ONE
                };
                let m = F::from_f64(BN_MOMENTUM);
                let keep = F::ONE - m;
                self.running_mean.update_data(|r| {
                    r.iter_mut().zip(&mean).for_each(|(r, b)| *r = keep * *r + m * *b)
                })?;
                self.running_var.update_data(|r| {
                    r.iter_mut()
                        .zip(&var)
                        .for_each(|(r, b)| *r = keep * *r + m * *b * unbias)
                })?;
                Ok(y)
            }
            Phase::Eval => x.batch_norm_fixed(
                &self.gamma,
                &self.beta,
                &self.running_mean.data(),
                &self.running_var.data(),
                eps,
            ),
        }
    }

    fn visit(&self, prefix: &str, f: &mut Visitor<'_, F>) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
        f(format!("{prefix}.running_mean"), &self.running_mean);
        f(format!("{prefix}.running_var"), &self.running_var);
    }
}

pub(crate) struct ConvBn<F: Float> {
    conv: Conv<F>,
    bn: BatchNorm<F>,
}

impl<F: Float> ConvBn<F> {
    pub(crate) fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv::new(rng, cin, cout, stride)?,
            bn: BatchNorm::new(cout)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor<F>, phase: Phase) -> Result<Tensor<F>> {
        self.bn.forward(&self.conv.forward(x)?, phase)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut Visitor<'_, F>) {
        f(format!("{prefix}.conv.weight"), &self.conv.weight);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
}

enum Block<F: Float> {
    Plain(ConvBn<F>),
    Residual {
        first: ConvBn<F>,
        second: ConvBn<F>,
        stride: usize,
        extra_channels: usize,
    },
}

impl<F: Float> Block<F> {
    fn new(rng: &mut ChaCha8Rng, kind: BlockKind, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(match kind {
            BlockKind::PlainConv => Block::Plain(ConvBn::new(rng, cin, cout, stride)?),
            BlockKind::ResidualBasic => {
                if cout < cin {
                    return Err(crate::Error::InvalidSpec(format!(
                        "residual block cannot reduce channels ({cin} -> {cout})"
                    )));
                }
                Block::Residual {
                    first: ConvBn::new(rng, cin, cout, stride)?,
                    second: ConvBn::new(rng, cout, cout, 1)?,
                    stride,
                    extra_channels: cout - cin,
                }
            }
        })
    }

    fn forward(&self, x: &Tensor<F>, phase: Phase) -> Result<Tensor<F>> {
        match self {
            Block::Plain(cb) => Ok(cb.forward(x, phase)?.relu()),
            Block::Residual {
                first,
                second,
                stride,
                extra_channels,
            } => {
                let h = first.forward(x, phase)?.relu();
                let h = second.forward(&h, phase)?;
                let mut shortcut = x.clone();
                if *stride > 1 {
                    shortcut = shortcut.subsample(*stride)?;
                }
                if *extra_channels > 0 {
                    shortcut = shortcut.pad_channels(*extra_channels)?;
                }
                Ok(h.add(&shortcut)?.relu())
            }
        }
    }

    fn visit(&self, prefix: &str, f: &mut Visitor<'_, F>) {
        match self {
            Block::Plain(cb) => cb.visit(prefix, f),
            Block::Residual { first, second, .. } => {
                first.visit(&format!("{prefix}.a"), f);
                second.visit(&format!("{prefix}.b"), f);
            }
        }
    }
}

pub(crate) struct Stage<F: Float> {
    blocks: Vec<Block<F>>,
}

impl<F: Float> Stage<F> {
    pub(crate) fn new(rng: &mut ChaCha8Rng, spec: &StageSpec, cin: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(spec.blocks);
        let mut c = cin;
        for b in 0..spec.blocks {
            let stride = if b == 0 && spec.downsample { 2 } else { 1 };
            blocks.push(Block::new(rng, spec.block, c, spec.channels, stride)?);
            c = spec.channels;
        }
        Ok(Stage { blocks })
    }

    pub(crate) fn forward(&self, x: &Tensor<F>, phase: Phase) -> Result<Tensor<F>> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, phase)?;
        }
        Ok(h)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut Visitor<'_, F>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
    }
}

/// Fully-connected layer with weight stored `[in, out]`.
pub(crate) struct Linear<F: Float> {
    weight: Tensor<F>,
    bias: Tensor<F>,
}

impl<F: Float> Linear<F> {
    pub(crate) fn new(rng: &mut ChaCha8Rng, fan_in: usize, out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            weight: Tensor::parameter(&[fan_in, out], uniform(rng, fan_in * out, bound))?,
            bias: Tensor::parameter(&[out], vec![F::ZERO; out])?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut Visitor<'_, F>) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
}
