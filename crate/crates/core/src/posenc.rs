//! Sinusoidal encoding of relative coordinates with a learnable frequency
//! bank, initialized at omega_l = 2 e^l and shared across the x and y axes.

use crate::autodiff::{AdResult, ParamId, ParamStore, Tape, VarId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PeMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "coord-only")]
    CoordOnly,
    #[serde(rename = "sine-only")]
    SineOnly,
    #[serde(rename = "cosine-only")]
    CosineOnly,
    #[serde(rename = "sine-cosine-fixed")]
    SineCosineFixed,
    #[default]
    #[serde(rename = "sine-cosine-learned")]
    SineCosineLearned,
}

impl PeMode {
    pub fn learned(self) -> bool {
        self == PeMode::SineCosineLearned
    }

    /// (appended coordinate scalars, sinusoid entries) for a bank of `l`
    /// frequencies, as used by the analytic counters.
    pub fn dims_for(self, l: usize) -> (usize, usize) {
        match self {
            PeMode::None => (0, 0),
            PeMode::CoordOnly => (2, 0),
            PeMode::SineOnly | PeMode::CosineOnly => (2, 2 * l),
            PeMode::SineCosineFixed | PeMode::SineCosineLearned => (2, 4 * l),
        }
    }

    fn sin_cos(self) -> (bool, bool) {
        match self {
            PeMode::SineOnly => (true, false),
            PeMode::CosineOnly => (false, true),
            PeMode::SineCosineFixed | PeMode::SineCosineLearned => (true, true),
            _ => (false, false),
        }
    }
}

/// Initial frequency bank: omega_l = 2 e^l for l in 1..=L.
pub fn initial_frequencies(l: usize) -> Vec<f64> {
    (1..=l).map(|i| 2.0 * (i as f64).exp()).collect()
}

/// One per-level position encoder.
#[derive(Debug, Clone)]
pub struct PosEncoder {
    pub mode: PeMode,
    /// Frequency count per axis.
    pub l: usize,
    /// Present only in sinusoidal modes.
    pub omega: Option<ParamId>,
}

impl PosEncoder {
    pub fn new(store: &mut ParamStore, name: &str, mode: PeMode, l: usize) -> Self {
        let omega = match mode.sin_cos() {
            (false, false) => None,
            _ => Some(store.add_with(
                name,
                Tensor::new(vec![l], initial_frequencies(l)),
                mode.learned(),
            )),
        };
        PosEncoder { mode, l, omega }
    }

    /// Width of the encoding itself: 2L per axis in sine+cosine modes, L per
    /// axis in single-function modes, 2 in coord-only mode (the raw
    /// coordinates), 0 when disabled.
    pub fn encoding_dim(&self) -> usize {
        match self.mode {
            PeMode::None => 0,
            PeMode::CoordOnly => 2,
            PeMode::SineOnly | PeMode::CosineOnly => 2 * self.l,
            PeMode::SineCosineFixed | PeMode::SineCosineLearned => 4 * self.l,
        }
    }

    /// Total width appended after the latent code: the raw delta plus the
    /// sinusoidal encoding. Coord-only appends the delta once.
    pub fn appended_dim(&self) -> usize {
        match self.mode {
            PeMode::None => 0,
            PeMode::CoordOnly => 2,
            _ => 2 + self.encoding_dim(),
        }
    }

    /// Records the appended columns for a batch of per-query deltas
    /// (Q x 2, components in [-0.5, 0.5]) and returns the parts to
    /// concatenate after the latent codes.
    pub fn emit(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        deltas: &[f64],
    ) -> AdResult<Vec<VarId>> {
        let q = deltas.len() / 2;
        let delta_var = || Tensor::new(vec![q, 2], deltas.to_vec());
        match self.mode {
            PeMode::None => Ok(vec![]),
            PeMode::CoordOnly => Ok(vec![tape.constant(delta_var())]),
            _ => {
                let (use_sin, use_cos) = self.mode.sin_cos();
                let omega = tape.param(store, self.omega.expect("sinusoidal mode has omega"));
                let enc = tape.pos_enc(omega, deltas, use_sin, use_cos)?;
                Ok(vec![tape.constant(delta_var()), enc])
            }
        }
    }

    /// Pure evaluation of the sinusoidal encoding for one delta, given the
    /// current frequency values. Axes are concatenated x-then-y; in
    /// sine+cosine modes entries interleave (sin, cos) per frequency.
    pub fn encode_values(&self, omega: &[f64], delta: [f64; 2]) -> Vec<f64> {
        let (use_sin, use_cos) = self.mode.sin_cos();
        match self.mode {
            PeMode::None => vec![],
            PeMode::CoordOnly => delta.to_vec(),
            _ => {
                let mut out = Vec::with_capacity(self.encoding_dim());
                for &a in &delta {
                    for &f in omega {
                        let t = f * a;
                        if use_sin {
                            out.push(t.sin());
                        }
                        if use_cos {
                            out.push(t.cos());
                        }
                    }
                }
                out
            }
        }
    }
}
