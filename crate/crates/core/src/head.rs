//! The implicit feature alignment head: per-level 1x1 projections, position
//! encoders, and a shared MLP decoding class logits at arbitrary continuous
//! coordinates from the nearest latent code of every pyramid level.

use crate::autodiff::{ParamId, ParamStore, Tape, VarId};
use crate::config::{HeadConfig, PeConfig};
use crate::encoder::{he_normal, PyramidVars};
use crate::grid::{self, FeatureGrid, QueryCoord};
use crate::posenc::PosEncoder;
use crate::tensor::{Precision, Tensor};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("pyramid has {got} levels, head expects {expected}")]
    LevelMismatch { got: usize, expected: usize },
    #[error("pyramid levels {got:?} do not match head levels {expected:?}")]
    LevelLabels { got: Vec<u32>, expected: Vec<u32> },
    #[error("empty query list")]
    EmptyQueries,
    #[error("query ({x}, {y}) outside the unit square")]
    OutOfRange { x: f64, y: f64 },
    #[error("grid at position {pos} has {got} channels, projection expects {expected}")]
    ChannelMismatch { pos: usize, got: usize, expected: usize },
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
}

/// Raw multi-level feature grids, strictly increasing in level.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub grids: Vec<FeatureGrid>,
}

impl Pyramid {
    pub fn new(grids: Vec<FeatureGrid>) -> Self {
        assert!(
            grids.windows(2).all(|p| p[0].level < p[1].level),
            "pyramid levels must be strictly increasing"
        );
        Pyramid { grids }
    }

    pub fn levels(&self) -> Vec<u32> {
        self.grids.iter().map(|g| g.level).collect()
    }
}

#[derive(Debug, Clone)]
pub struct IfaHead {
    pub cfg: HeadConfig,
    pub pe_cfg: PeConfig,
    pub n_classes: usize,
    /// Channel count each projection expects, by level position.
    pub in_channels: Vec<usize>,
    /// Per-level (weight, bias) of the 1x1 projection to proj_dim.
    pub proj: Vec<(ParamId, ParamId)>,
    /// One encoder per level, or one shared instance repeated.
    pub encoders: Vec<PosEncoder>,
    /// (weight, bias) per MLP layer; ReLU between hidden layers.
    pub mlp: Vec<(ParamId, ParamId)>,
}

impl IfaHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &HeadConfig,
        pe_cfg: &PeConfig,
        in_channels: &[usize],
        n_classes: usize,
    ) -> Self {
        assert_eq!(in_channels.len(), cfg.levels.len());
        let d = cfg.proj_dim;
        let mut proj = Vec::new();
        for (i, &ci) in in_channels.iter().enumerate() {
            let w = store.add(&format!("head.proj{i}.w"), he_normal(rng, &[d, ci], ci));
            let b = store.add(&format!("head.proj{i}.b"), Tensor::zeros(&[d]));
            proj.push((w, b));
        }
        let l = pe_cfg.freq_count();
        let mut encoders = Vec::new();
        if pe_cfg.share_across_levels {
            let pe = PosEncoder::new(store, "head.pe", pe_cfg.mode, l);
            encoders = vec![pe; cfg.levels.len()];
        } else {
            for i in 0..cfg.levels.len() {
                encoders.push(PosEncoder::new(store, &format!("head.pe{i}"), pe_cfg.mode, l));
            }
        }
        let in_dim: usize = encoders.iter().map(|e| d + e.appended_dim()).sum();
        let mut widths = vec![in_dim];
        widths.extend(&cfg.mlp_widths);
        widths.push(n_classes);
        let mut mlp = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = store.add(
                &format!("head.mlp{i}.w"),
                he_normal(rng, &[fan_in, fan_out], fan_in),
            );
            let b = store.add(&format!("head.mlp{i}.b"), Tensor::zeros(&[fan_out]));
            mlp.push((w, b));
        }
        IfaHead {
            cfg: cfg.clone(),
            pe_cfg: pe_cfg.clone(),
            n_classes,
            in_channels: in_channels.to_vec(),
            proj,
            encoders,
            mlp,
        }
    }

    /// Exact concatenation width fed to the MLP.
    pub fn in_dim(&self) -> usize {
        self.encoders
            .iter()
            .map(|e| self.cfg.proj_dim + e.appended_dim())
            .sum()
    }

    fn check_queries(queries: &[QueryCoord]) -> Result<(), HeadError> {
        if queries.is_empty() {
            return Err(HeadError::EmptyQueries);
        }
        if let Some(q) = queries.iter().find(|q| !q.in_unit_square()) {
            return Err(HeadError::OutOfRange { x: q.x, y: q.y });
        }
        Ok(())
    }

    /// Records the decode computation on an existing tape. `pyr` may come
    /// straight from the encoder (training) or from constants (inference);
    /// levels are matched by position against the head's configuration.
    pub fn decode_vars(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyr: &PyramidVars,
        queries: &[QueryCoord],
    ) -> Result<VarId, HeadError> {
        Self::check_queries(queries)?;
        if pyr.levels.len() != self.proj.len() {
            return Err(HeadError::LevelMismatch {
                got: pyr.levels.len(),
                expected: self.proj.len(),
            });
        }
        let q = queries.len();
        let mut parts = Vec::new();
        for (i, &(_, feat, h, w)) in pyr.levels.iter().enumerate() {
            let got_c = tape.value(feat).shape[0];
            if got_c != self.in_channels[i] {
                return Err(HeadError::ChannelMismatch {
                    pos: i,
                    got: got_c,
                    expected: self.in_channels[i],
                });
            }
            let mut indices = Vec::with_capacity(q);
            let mut deltas = Vec::with_capacity(q * 2);
            for &qc in queries {
                let (r, c) = grid::nearest_rc(h, w, qc);
                indices.push(r * w + c);
                let d = grid::normalized_delta(h, w, qc, r, c);
                deltas.extend_from_slice(&d);
            }
            let (wid, bid) = self.proj[i];
            let pw = tape.param(store, wid);
            let pb = tape.param(store, bid);
            let projected = tape.conv1x1(feat, pw, pb)?;
            let rows = tape.chw_to_rows(projected)?;
            let codes = tape.gather_rows(rows, &indices)?;
            parts.push(codes);
            parts.extend(self.encoders[i].emit(tape, store, &deltas)?);
        }
        let mut x = tape.concat_lastdim(&parts)?;
        let last = self.mlp.len() - 1;
        for (i, &(wid, bid)) in self.mlp.iter().enumerate() {
            let w = tape.param(store, wid);
            let b = tape.param(store, bid);
            x = tape.matmul(x, w)?;
            x = tape.add_rows(x, b)?;
            if i != last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Decodes class logits (Q x N) for frozen parameters. Queries are
    /// processed in contiguous chunks of `cfg.chunk_size`; chunking cannot
    /// change the result since every row is independent.
    pub fn decode(
        &self,
        store: &ParamStore,
        pyr: &Pyramid,
        queries: &[QueryCoord],
    ) -> Result<Tensor, HeadError> {
        Self::check_queries(queries)?;
        if pyr.grids.len() != self.proj.len() {
            return Err(HeadError::LevelMismatch {
                got: pyr.grids.len(),
                expected: self.proj.len(),
            });
        }
        let n = self.n_classes;
        let mut out = Tensor::zeros(&[queries.len(), n]);
        for (chunk_idx, chunk) in queries.chunks(self.cfg.chunk_size.max(1)).enumerate() {
            let mut tape = Tape::new(Precision::F64);
            let levels = pyr
                .grids
                .iter()
                .map(|g| {
                    let v = tape.constant(g.values.clone());
                    (g.level, v, g.height, g.width)
                })
                .collect();
            let logits = self.decode_vars(&mut tape, store, &PyramidVars { levels }, chunk)?;
            let vals = tape.value(logits);
            let off = chunk_idx * self.cfg.chunk_size.max(1) * n;
            out.data[off..off + chunk.len() * n].copy_from_slice(&vals.data);
        }
        Ok(out)
    }

    /// Decodes a full (N x h_out x w_out) logit map over the pixel-center
    /// query grid; any output resolution is legal.
    pub fn decode_map(
        &self,
        store: &ParamStore,
        pyr: &Pyramid,
        h_out: usize,
        w_out: usize,
    ) -> Result<Tensor, HeadError> {
        let queries = grid::query_grid(h_out, w_out);
        let rows = self.decode(store, pyr, &queries)?;
        let n = self.n_classes;
        let mut out = Tensor::zeros(&[n, h_out, w_out]);
        for p in 0..h_out * w_out {
            for c in 0..n {
                out.data[c * h_out * w_out + p] = rows.data[p * n + c];
            }
        }
        Ok(out)
    }
}
