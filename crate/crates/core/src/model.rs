//! Whole-model assembly: encoder plus either the IFA head or a baseline
//! FPN decoder, built deterministically from a `RunConfig`.

use crate::aligners::{fpn_fuse, init_fpn, AlignerError, FpnParams};
use crate::autodiff::{ParamStore, Tape, VarId};
use crate::config::{AlignerKind, ConfigError, RunConfig};
use crate::encoder::{self, EncoderError, EncoderParams, PyramidVars};
use crate::grid::FeatureGrid;
use crate::head::{HeadError, IfaHead, Pyramid};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Aligner(#[from] AlignerError),
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
    #[error("baseline aligner decodes only at its native resolution {native_h}x{native_w}, requested {h}x{w}")]
    BaselineResolution { native_h: usize, native_w: usize, h: usize, w: usize },
}

pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub enc: EncoderParams,
    pub head: Option<IfaHead>,
    pub fpn: Option<FpnParams>,
}

impl Model {
    pub fn new(cfg: RunConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let enc = encoder::init_encoder(&mut store, &mut rng, &cfg.enc, cfg.n_classes);
        let all_channels: Vec<usize> = cfg.enc.widths[1..].to_vec();
        let (head, fpn) = match cfg.align.kind {
            AlignerKind::Ifa => {
                let in_channels: Vec<usize> = cfg
                    .head
                    .levels
                    .iter()
                    .map(|&l| all_channels[(l - 2) as usize])
                    .collect();
                let head = IfaHead::init(
                    &mut store,
                    &mut rng,
                    &cfg.head,
                    &cfg.pe,
                    &in_channels,
                    cfg.n_classes,
                );
                (Some(head), None)
            }
            kind => {
                let fpn = init_fpn(
                    &mut store,
                    &mut rng,
                    kind,
                    &all_channels,
                    cfg.head.proj_dim,
                    cfg.n_classes,
                );
                (None, Some(fpn))
            }
        };
        Ok(Model { cfg, store, enc, head, fpn })
    }

    pub fn is_ifa(&self) -> bool {
        self.head.is_some()
    }

    /// Select the pyramid positions the head was configured for.
    pub fn select_levels(&self, pyr: &PyramidVars) -> PyramidVars {
        let levels = self
            .cfg
            .head
            .levels
            .iter()
            .map(|&l| pyr.levels[(l - 2) as usize])
            .collect();
        PyramidVars { levels }
    }

    pub fn encode(&self, tape: &mut Tape, image: &Tensor) -> Result<PyramidVars, ModelError> {
        Ok(encoder::encode_image(tape, &self.store, &self.enc, &self.cfg.enc, image)?)
    }

    /// Frozen-parameter pyramid extraction for inference-time decoding.
    pub fn pyramid(&self, image: &Tensor) -> Result<Pyramid, ModelError> {
        let mut tape = Tape::new(self.cfg.precision);
        let pyr = self.encode(&mut tape, image)?;
        let selected = if self.is_ifa() {
            self.select_levels(&pyr)
        } else {
            pyr
        };
        let grids = selected
            .levels
            .iter()
            .map(|&(level, v, ..)| FeatureGrid::new(level, tape.value(v).clone()).unwrap())
            .collect();
        Ok(Pyramid::new(grids))
    }

    /// Baseline forward pass to stride-4 logits.
    pub fn fpn_logits(&self, tape: &mut Tape, image: &Tensor) -> Result<VarId, ModelError> {
        let pyr = self.encode(tape, image)?;
        let fpn = self.fpn.as_ref().expect("baseline model");
        Ok(fpn_fuse(tape, &self.store, fpn, &pyr)?)
    }

    /// Argmax label map at the requested resolution. The IFA head decodes
    /// any resolution directly; baselines only their native input size
    /// (logits at stride 4, bilinearly resized to the input resolution).
    pub fn predict(&self, image: &Tensor, h_out: usize, w_out: usize) -> Result<Vec<i64>, ModelError> {
        let n = self.cfg.n_classes;
        if let Some(head) = &self.head {
            let pyr = self.pyramid(image)?;
            let map = head.decode_map(&self.store, &pyr, h_out, w_out)?;
            let hw = h_out * w_out;
            Ok(argmax_maps(&map.data, n, hw))
        } else {
            let (ih, iw) = (image.shape[1], image.shape[2]);
            if (h_out, w_out) != (ih, iw) {
                return Err(ModelError::BaselineResolution {
                    native_h: ih,
                    native_w: iw,
                    h: h_out,
                    w: w_out,
                });
            }
            let mut tape = Tape::new(self.cfg.precision);
            let logits = self.fpn_logits(&mut tape, image)?;
            let up = tape.bilinear_resize(logits, h_out, w_out)?;
            let v = tape.value(up);
            Ok(argmax_maps(&v.data, n, h_out * w_out))
        }
    }
}

/// Per-pixel argmax over `n` channel planes; ties go to the smaller class,
/// and the total order on floats keeps even non-finite inputs panic-free.
fn argmax_maps(data: &[f64], n: usize, hw: usize) -> Vec<i64> {
    (0..hw)
        .map(|p| {
            let mut best = 0usize;
            for c in 1..n {
                if data[c * hw + p].total_cmp(&data[best * hw + p]) == std::cmp::Ordering::Greater {
                    best = c;
                }
            }
            best as i64
        })
        .collect()
}
