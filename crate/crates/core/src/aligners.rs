//! Comparison decoders: an FPN-style top-down pathway whose 2x up-sampling
//! step is interchangeable (bilinear, nearest, stride-2 deconvolution, or a
//! 3x3 conv followed by bilinear), finishing with a 1x1 classifier at the
//! finest level. All kinds accept the same pyramid and emit the same logit
//! shape, so training code is kind-agnostic.

use crate::autodiff::{ParamId, ParamStore, Tape, VarId};
use crate::config::AlignerKind;
use crate::encoder::{he_normal, PyramidVars};
use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignerError {
    #[error("fpn_fuse does not handle the ifa kind; use the ifa head")]
    IfaKind,
    #[error("pyramid has {0} levels, expected at least 2")]
    TooFewLevels(usize),
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
}

#[derive(Debug, Clone)]
pub struct FpnParams {
    pub kind: AlignerKind,
    /// Per-level 1x1 lateral projections to the common dimension.
    pub lateral: Vec<(ParamId, ParamId)>,
    /// One entry per 2x step (coarse to fine); empty for pure resize kinds.
    pub steps: Vec<ParamId>,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

pub fn init_fpn<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    kind: AlignerKind,
    in_channels: &[usize],
    dim: usize,
    n_classes: usize,
) -> FpnParams {
    assert!(kind != AlignerKind::Ifa);
    let mut lateral = Vec::new();
    for (i, &ci) in in_channels.iter().enumerate() {
        let w = store.add(&format!("fpn.lateral{i}.w"), he_normal(rng, &[dim, ci], ci));
        let b = store.add(&format!("fpn.lateral{i}.b"), Tensor::zeros(&[dim]));
        lateral.push((w, b));
    }
    let n_steps = in_channels.len() - 1;
    let mut steps = Vec::new();
    for s in 0..n_steps {
        match kind {
            AlignerKind::UpsampleModule => {
                steps.push(store.add(
                    &format!("fpn.step{s}.w"),
                    he_normal(rng, &[dim, dim, 3, 3], dim * 9),
                ));
            }
            AlignerKind::Deconv => {
                // (ci, co, k, k) layout for the transposed convolution
                steps.push(store.add(
                    &format!("fpn.step{s}.w"),
                    he_normal(rng, &[dim, dim, 4, 4], dim * 16),
                ));
            }
            _ => {}
        }
    }
    let cls_w = store.add("fpn.cls.w", he_normal(rng, &[n_classes, dim], dim));
    let cls_b = store.add("fpn.cls.b", Tensor::zeros(&[n_classes]));
    FpnParams { kind, lateral, steps, cls_w, cls_b }
}

/// Top-down fusion: start from the coarsest level, repeatedly upsample 2x by
/// the configured kind and add the 1x1-projected lateral, then classify at
/// the finest level's resolution.
pub fn fpn_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FpnParams,
    pyr: &PyramidVars,
) -> Result<VarId, AlignerError> {
    if params.kind == AlignerKind::Ifa {
        return Err(AlignerError::IfaKind);
    }
    let n = pyr.levels.len();
    if n < 2 {
        return Err(AlignerError::TooFewLevels(n));
    }
    let lat = |tape: &mut Tape, i: usize, feat: VarId| -> Result<VarId, AlignerError> {
        let (w, b) = params.lateral[i];
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        Ok(tape.conv1x1(feat, w, b)?)
    };
    let coarse = n - 1;
    let mut x = lat(tape, coarse, pyr.levels[coarse].1)?;
    for (step, i) in (0..coarse).rev().enumerate() {
        let (_, feat, th, tw) = pyr.levels[i];
        x = match params.kind {
            AlignerKind::Bilinear => tape.bilinear_resize(x, th, tw)?,
            AlignerKind::Nearest => tape.nearest_resize(x, th, tw)?,
            AlignerKind::Deconv => {
                let w = tape.param(store, params.steps[step]);
                tape.deconv2d(x, w, 2, 1)?
            }
            AlignerKind::UpsampleModule => {
                let w = tape.param(store, params.steps[step]);
                let y = tape.conv2d(x, w, 1, 1)?;
                tape.bilinear_resize(y, th, tw)?
            }
            AlignerKind::Ifa => unreachable!(),
        };
        let l = lat(tape, i, feat)?;
        x = tape.add(x, l)?;
    }
    let w = tape.param(store, params.cls_w);
    let b = tape.param(store, params.cls_b);
    Ok(tape.conv1x1(x, w, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn nearest_2x_replicates() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.nearest_resize(x, 4, 4).unwrap();
        #[rustfmt::skip]
        let want = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(tape.value(y).data, want);
    }

    #[test]
    fn bilinear_2x_of_constant_is_constant() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(Tensor::full(&[2, 3, 3], 7.5));
        let y = tape.bilinear_resize(x, 6, 6).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| (v - 7.5).abs() < 1e-12));
    }

    #[test]
    fn deconv_identity_kernel_interleaves_zeros() {
        // 4x4 kernel with a single 1 where output position (0,0) of each
        // input cell lands (kh=1, kw=1 with pad 1), stride 2.
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let mut k = vec![0.0; 16];
        k[1 * 4 + 1] = 1.0;
        let w = tape.constant(Tensor::new(vec![1, 1, 4, 4], k));
        let y = tape.deconv2d(x, w, 2, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape, vec![1, 4, 4]);
        // inputs land on even positions, everything else is zero
        assert_eq!(v.data[0], 1.0);
        assert_eq!(v.data[2], 2.0);
        assert_eq!(v.data[2 * 4], 3.0);
        assert_eq!(v.data[2 * 4 + 2], 4.0);
        let landed = [0usize, 2, 8, 10];
        for (i, &d) in v.data.iter().enumerate() {
            if !landed.contains(&i) {
                assert_eq!(d, 0.0, "position {i}");
            }
        }
    }
}
