//! Pyramid convolution stack and the classic multi-width text convolution.

use rand_chacha::ChaCha8Rng;

use super::init;
use crate::tensor::{Registrar, Tape, Tensor, TensorId};
use crate::{CoreError, Result};

/// Widths of the baseline text-convolution filter banks.
pub const TEXT_CNN_WIDTHS: [usize; 3] = [2, 3, 4];
/// Filters per bank in the baseline text convolution.
pub const TEXT_CNN_FILTERS: usize = 100;

/// One convolution filter bank: weight [c_out, width, c_in] plus bias.
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub w: T,
    pub b: T,
}

impl ConvLayer<Tensor> {
    pub fn init(c_out: usize, width: usize, c_in: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvLayer {
            w: init::xavier_uniform(&[c_out, width, c_in], width * c_in, c_out, rng),
            b: init::zeros(&[c_out]),
        }
    }

    pub fn register(&self, reg: &mut impl Registrar) -> ConvLayer<TensorId> {
        ConvLayer { w: reg.reg_param(&self.w), b: reg.reg_param(&self.b) }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w", &self.w), ("b", &self.b)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("w", &mut self.w), ("b", &mut self.b)]
    }
}

/// Stride-1 convolution with zero padding N = (M−1)/2 per side, so the
/// output keeps the input length. Width must be odd.
pub fn equal_width_conv(tape: &mut Tape, f: TensorId, layer: &ConvLayer<TensorId>) -> Result<TensorId> {
    let width = tape.shape(layer.w)[1];
    if width % 2 == 0 {
        return Err(CoreError::contract(format!(
            "equal_width_conv: width {width} is even; equal-length padding needs an odd width"
        )));
    }
    let pad = (width - 1) / 2;
    tape.conv1d(f, layer.w, layer.b, pad, pad)
}

/// Max-pool window 3 / stride 2; output length is exactly ⌈L/2⌉ (the final
/// window is right-padded with −∞ when it runs off the end).
pub fn halving_pool(tape: &mut Tape, f: TensorId) -> Result<TensorId> {
    tape.halving_pool(f)
}

/// Length schedule of the pyramid: the input length followed by iterated
/// ⌈L/2⌉ halvings down to ≤ 2.
pub fn dpcnn_length_schedule(l: usize) -> Vec<usize> {
    let mut lengths = vec![l];
    let mut cur = l;
    while cur > 2 {
        cur = cur.div_ceil(2);
        lengths.push(cur);
    }
    lengths
}

/// Number of {pool + residual conv block} repetitions for input length `l`.
pub fn dpcnn_block_count(l: usize) -> usize {
    dpcnn_length_schedule(l).len() - 1
}

/// Pyramid stack parameters: the region-embedding bank and one pair of
/// equal-width banks per pyramid level. Every bank keeps `num_filters`
/// output channels.
#[derive(Clone, Debug)]
pub struct ConvStackParams<T> {
    pub region: ConvLayer<T>,
    pub blocks: Vec<(ConvLayer<T>, ConvLayer<T>)>,
}

impl ConvStackParams<Tensor> {
    /// Allocates enough blocks for sequences up to `max_len`.
    pub fn init(
        num_filters: usize,
        kernel_size: usize,
        c_in: usize,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let depth = dpcnn_block_count(max_len);
        ConvStackParams {
            region: ConvLayer::init(num_filters, kernel_size, c_in, rng),
            blocks: (0..depth)
                .map(|_| {
                    (
                        ConvLayer::init(num_filters, kernel_size, num_filters, rng),
                        ConvLayer::init(num_filters, kernel_size, num_filters, rng),
                    )
                })
                .collect(),
        }
    }

    pub fn num_filters(&self) -> usize {
        self.region.w.shape()[0]
    }

    pub fn register(&self, reg: &mut impl Registrar) -> ConvStackParams<TensorId> {
        ConvStackParams {
            region: self.region.register(reg),
            blocks: self
                .blocks
                .iter()
                .map(|(c1, c2)| (c1.register(reg), c2.register(reg)))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .region
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("region.{n}"), t))
            .collect();
        for (i, (c1, c2)) in self.blocks.iter().enumerate() {
            out.extend(c1.tensors().into_iter().map(|(n, t)| (format!("block{i}.conv1.{n}"), t)));
            out.extend(c2.tensors().into_iter().map(|(n, t)| (format!("block{i}.conv2.{n}"), t)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .region
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("region.{n}"), t))
            .collect();
        for (i, (c1, c2)) in self.blocks.iter_mut().enumerate() {
            out.extend(
                c1.tensors_mut().into_iter().map(|(n, t)| (format!("block{i}.conv1.{n}"), t)),
            );
            out.extend(
                c2.tensors_mut().into_iter().map(|(n, t)| (format!("block{i}.conv2.{n}"), t)),
            );
        }
        out
    }
}

pub struct DpcnnOut {
    /// Global max-pooled features, 1×num_filters.
    pub features: TensorId,
    /// Sequence lengths visited: input length then each pooled length.
    pub lengths: Vec<usize>,
}

/// Region embedding, then repeated {halving pool → two pre-activation
/// equal-width convolutions with a shortcut} while the length exceeds 2,
/// then a global max pool. Pre-activation means conv(x) = W·relu(x) + b.
pub fn dpcnn_forward(
    tape: &mut Tape,
    x: TensorId,
    p: &ConvStackParams<TensorId>,
) -> Result<DpcnnOut> {
    if tape.shape(x)[0] == 0 {
        return Err(CoreError::contract("dpcnn_forward: empty sequence".to_string()));
    }
    let mut z = equal_width_conv(tape, x, &p.region)?;
    let mut len = tape.shape(z)[0];
    let mut lengths = vec![len];
    let mut level = 0usize;
    while len > 2 {
        z = halving_pool(tape, z)?;
        len = tape.shape(z)[0];
        lengths.push(len);
        let (conv1, conv2) = p.blocks.get(level).ok_or_else(|| {
            CoreError::contract(format!(
                "dpcnn_forward: stack has {} blocks but level {level} is needed",
                p.blocks.len()
            ))
        })?;
        let a = tape.relu(z)?;
        let c1 = equal_width_conv(tape, a, conv1)?;
        let a = tape.relu(c1)?;
        let c2 = equal_width_conv(tape, a, conv2)?;
        z = tape.add(z, c2)?;
        level += 1;
    }
    let features = tape.global_max_pool_rows(z)?;
    Ok(DpcnnOut { features, lengths })
}

/// Multi-width convolution baseline: per bank, same-length convolution,
/// relu, global max pool; bank outputs concatenated. Even widths pad one
/// extra zero row on the right.
pub fn text_cnn_forward(tape: &mut Tape, x: TensorId, banks: &TextCnnParams<TensorId>) -> Result<TensorId> {
    if tape.shape(x)[0] == 0 {
        return Err(CoreError::contract("text_cnn_forward: empty sequence".to_string()));
    }
    let mut parts: Option<TensorId> = None;
    for bank in &banks.banks {
        let width = tape.shape(bank.w)[1];
        let pad_l = (width - 1) / 2;
        let pad_r = width - 1 - pad_l;
        let c = tape.conv1d(x, bank.w, bank.b, pad_l, pad_r)?;
        let c = tape.relu(c)?;
        let pooled = tape.global_max_pool_rows(c)?;
        parts = Some(match parts {
            None => pooled,
            Some(acc) => tape.concat_last(acc, pooled)?,
        });
    }
    parts.ok_or_else(|| CoreError::contract("text_cnn_forward: no filter banks".to_string()))
}

#[derive(Clone, Debug)]
pub struct TextCnnParams<T> {
    pub banks: Vec<ConvLayer<T>>,
}

impl TextCnnParams<Tensor> {
    pub fn init(c_in: usize, rng: &mut ChaCha8Rng) -> Self {
        TextCnnParams {
            banks: TEXT_CNN_WIDTHS
                .iter()
                .map(|&w| ConvLayer::init(TEXT_CNN_FILTERS, w, c_in, rng))
                .collect(),
        }
    }

    pub fn out_width(&self) -> usize {
        self.banks.iter().map(|b| b.w.shape()[0]).sum()
    }

    pub fn register(&self, reg: &mut impl Registrar) -> TextCnnParams<TensorId> {
        TextCnnParams { banks: self.banks.iter().map(|b| b.register(reg)).collect() }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.banks
            .iter()
            .flat_map(|b| {
                let width = b.w.shape()[1];
                b.tensors().into_iter().map(move |(n, t)| (format!("width{width}.{n}"), t))
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.banks
            .iter_mut()
            .flat_map(|b| {
                let width = b.w.shape()[1];
                b.tensors_mut().into_iter().map(move |(n, t)| (format!("width{width}.{n}"), t))
            })
            .collect()
    }
}
