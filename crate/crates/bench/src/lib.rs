//! Microbenchmark helpers; the actual benchmarks live in `benches/`.

use ifa_core::config::RunConfig;
use ifa_core::{AlignerKind, Model};

/// A tiny trained-shape model (random weights) for decode benchmarks.
pub fn desk_model(kind: AlignerKind) -> Model {
    let mut cfg = RunConfig::desk();
    cfg.align.kind = kind;
    Model::new(cfg).unwrap()
}
