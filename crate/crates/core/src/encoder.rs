//! Small from-scratch convolutional pyramid encoder producing F_2..F_5 at
//! strides 4/8/16/32 (times 2^extra_pool), plus an auxiliary classifier on
//! the stage-3 output. Normalization-free: each conv is followed by a
//! learnable per-channel scale + bias and ReLU.

use crate::autodiff::{AdResult, ParamId, ParamStore, Tape, VarId};
use crate::config::EncConfig;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("input {h}x{w} not divisible by {required} (network stride with extra_pool)")]
    Divisibility { h: usize, w: usize, required: usize },
    #[error("expected a 3xHxW image, got shape {0:?}")]
    BadImage(Vec<usize>),
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub w: ParamId,
    pub scale: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub stem: ConvBlock,
    /// stages[j] produces F_{j+2}.
    pub stages: Vec<Vec<ConvBlock>>,
    pub aux_w: ParamId,
    pub aux_b: ParamId,
}

pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

fn conv_block<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    ci: usize,
    co: usize,
) -> ConvBlock {
    let w = store.add(
        &format!("{name}.w"),
        he_normal(rng, &[co, ci, 3, 3], ci * 9),
    );
    let scale = store.add(&format!("{name}.scale"), Tensor::full(&[co], 1.0));
    let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[co]));
    ConvBlock { w, scale, bias }
}

pub fn init_encoder<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &EncConfig,
    n_classes: usize,
) -> EncoderParams {
    let w = &cfg.widths;
    let stem = conv_block(store, rng, "enc.stem", 3, w[0]);
    let mut stages = Vec::new();
    for (j, &width) in w[1..].iter().enumerate() {
        let prev = if j == 0 { w[0] } else { w[j] };
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            let ci = if b == 0 { prev } else { width };
            blocks.push(conv_block(
                store,
                rng,
                &format!("enc.stage{}.block{}", j + 2, b),
                ci,
                width,
            ));
        }
        stages.push(blocks);
    }
    let f3_channels = w[2];
    let aux_w = store.add(
        "enc.aux.w",
        he_normal(rng, &[n_classes, f3_channels], f3_channels),
    );
    let aux_b = store.add("enc.aux.b", Tensor::zeros(&[n_classes]));
    EncoderParams { stem, stages, aux_w, aux_b }
}

/// Encoder outputs still on the tape: (level index, variable, H, W).
#[derive(Debug, Clone)]
pub struct PyramidVars {
    pub levels: Vec<(u32, VarId, usize, usize)>,
}

impl PyramidVars {
    pub fn get(&self, level: u32) -> Option<(VarId, usize, usize)> {
        self.levels
            .iter()
            .find(|(l, ..)| *l == level)
            .map(|&(_, v, h, w)| (v, h, w))
    }
}

fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    blk: &ConvBlock,
    x: VarId,
    stride: usize,
) -> AdResult<VarId> {
    let w = tape.param(store, blk.w);
    let s = tape.param(store, blk.scale);
    let b = tape.param(store, blk.bias);
    let y = tape.conv2d(x, w, stride, 1)?;
    let y = tape.channel_affine(y, s, b)?;
    Ok(tape.relu(y))
}

/// Runs the pyramid forward pass. Stage 1 output is average-pooled
/// `extra_pool` times before being emitted as F_2 and fed onward, so every
/// level shrinks by 2^extra_pool while the level spacing stays fixed.
pub fn encode_image(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncConfig,
    image: &Tensor,
) -> Result<PyramidVars, EncoderError> {
    if image.shape.len() != 3 || image.shape[0] != 3 {
        return Err(EncoderError::BadImage(image.shape.clone()));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let required = cfg.required_multiple();
    if h % required != 0 || w % required != 0 {
        return Err(EncoderError::Divisibility { h, w, required });
    }
    let x = tape.constant(image.clone());
    let mut x = block_forward(tape, store, &params.stem, x, 2)?;
    let mut levels = Vec::new();
    for (j, blocks) in params.stages.iter().enumerate() {
        for (b, blk) in blocks.iter().enumerate() {
            let stride = if b == 0 { 2 } else { 1 };
            x = block_forward(tape, store, blk, x, stride)?;
        }
        if j == 0 {
            for _ in 0..cfg.extra_pool {
                x = tape.avgpool2d(x, 2)?;
            }
        }
        let shape = &tape.value(x).shape;
        let (sh, sw) = (shape[1], shape[2]);
        levels.push(((j + 2) as u32 + cfg.extra_pool as u32, x, sh, sw));
    }
    Ok(PyramidVars { levels })
}

/// 1x1-conv auxiliary classifier over the stage-3 feature map.
pub fn aux_logits(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    f3: VarId,
) -> AdResult<VarId> {
    let w = tape.param(store, params.aux_w);
    let b = tape.param(store, params.aux_b);
    tape.conv1x1(f3, w, b)
}
