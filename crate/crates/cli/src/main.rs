//! `ifa` — train, decode, benchmark, and profile the segmentation models.
//!
//! Exit codes: 0 success, 1 invalid config, 2 non-finite loss during
//! training, 3 baseline checkpoint asked for a non-native resolution,
//! 4 IO failure.

mod manifest;
mod overrides;

use clap::{Parser, Subcommand};
use ifa_core::config::RunConfig;
use ifa_core::model::{Model, ModelError};
use ifa_core::train::TrainError;
use ifa_core::{checkpoint, flops, pnm, AlignerKind};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 1;
const EXIT_NAN: u8 = 2;
const EXIT_RESOLUTION: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "ifa", version, about = "implicit feature alignment segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint, metrics CSV, and manifest.
    Train {
        /// JSON run config; omit to use the built-in desk profile
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dotted-path override applied after the JSON, last wins
        /// (e.g. --set seed=3 --set align.kind=bilinear)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Decode a PPM image to a PGM label map at any resolution.
    Decode {
        /// Run directory holding manifest.json and checkpoint files
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every (kind, extra_pool, seed) cell and tabulate mIoU/params/FLOPs.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated aligner kinds
        #[arg(long, value_delimiter = ',', default_value = "ifa,bilinear")]
        kinds: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long = "extra-pool", value_delimiter = ',', default_value = "0")]
        extra_pool: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Print per-component FLOP and parameter counts as JSON.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, (u8, String)> {
    let base = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| (EXIT_IO, format!("reading {}: {e}", p.display())))?,
        None => serde_json::to_string(&RunConfig::desk()).unwrap(),
    };
    let merged = overrides::apply(&base, sets).map_err(|e| (EXIT_CONFIG, e))?;
    RunConfig::from_json(&merged).map_err(|e| (EXIT_CONFIG, e.to_string()))
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Train { config, out, sets } => cmd_train(config.as_deref(), &out, &sets),
        Cmd::Decode { checkpoint, image, height, width, out } => {
            cmd_decode(&checkpoint, &image, height, width, &out)
        }
        Cmd::Bench { config, kinds, seeds, extra_pool, out, sets } => {
            cmd_bench(config.as_deref(), &kinds, &seeds, &extra_pool, &out, &sets)
        }
        Cmd::Flops { config, sets } => cmd_flops(config.as_deref(), &sets),
    }
}

fn cmd_train(config: Option<&Path>, out: &Path, sets: &[String]) -> ExitCode {
    let cfg = match load_config(config, sets) {
        Ok(c) => c,
        Err((code, msg)) => return fail(code, msg),
    };
    match ifa_core::train::train(&cfg, Some(out)) {
        Ok(summary) => {
            if let Err(e) = manifest::write(out, &cfg, summary.param_count) {
                return fail(EXIT_IO, e);
            }
            println!(
                "trained {} for {} iters: mIoU {:.4}, {} params",
                cfg.align.kind.name(),
                cfg.train.max_iter,
                summary.final_miou,
                summary.param_count
            );
            ExitCode::SUCCESS
        }
        Err(TrainError::NonFinite { iter, lr, history }) => fail(
            EXIT_NAN,
            format!("non-finite loss at iter {iter} (lr {lr:.6}); recent losses {history:?}"),
        ),
        Err(TrainError::Io(e)) => fail(EXIT_IO, e),
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn cmd_decode(run_dir: &Path, image: &Path, height: usize, width: usize, out: &Path) -> ExitCode {
    let cfg = match manifest::read_config(run_dir) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_IO, e),
    };
    let mut model = match Model::new(cfg.clone()) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = checkpoint::load_into(&mut model.store, run_dir) {
        return fail(EXIT_IO, e);
    }
    let img = match pnm::read_ppm(image) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_IO, e),
    };
    match model.predict(&img, height, width) {
        Ok(labels) => {
            let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
            if let Err(e) = pnm::write_pgm(out, &bytes, height, width) {
                return fail(EXIT_IO, e);
            }
            if let Err(e) = write_palette(out, cfg.n_classes) {
                return fail(EXIT_IO, e);
            }
            ExitCode::SUCCESS
        }
        Err(ModelError::BaselineResolution { native_h, native_w, h, w }) => fail(
            EXIT_RESOLUTION,
            format!(
                "a {} checkpoint decodes only at its native {native_h}x{native_w}, \
                 got {h}x{w}; train with align.kind=ifa for arbitrary resolutions",
                cfg.align.kind.name()
            ),
        ),
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

/// Text sidecar mapping PGM gray levels to class names.
fn write_palette(mask_path: &Path, n_classes: usize) -> std::io::Result<()> {
    let mut text = String::from("# gray level -> class\n");
    for c in 0..n_classes {
        text.push_str(&format!("{c} class-{c}\n"));
    }
    text.push_str("255 ignore\n");
    std::fs::write(mask_path.with_extension("palette.txt"), text)
}

fn cmd_bench(
    config: Option<&Path>,
    kinds: &[String],
    seeds: &[u64],
    extra_pool: &[usize],
    out: &Path,
    sets: &[String],
) -> ExitCode {
    let base = match load_config(config, sets) {
        Ok(c) => c,
        Err((code, msg)) => return fail(code, msg),
    };
    if kinds.is_empty() || seeds.is_empty() || extra_pool.is_empty() {
        return fail(EXIT_CONFIG, "need at least one kind, seed, and extra-pool value");
    }
    let kinds: Vec<AlignerKind> = match kinds
        .iter()
        .map(|k| k.parse())
        .collect::<Result<Vec<_>, _>>()
    {
        Ok(v) => v,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        return fail(EXIT_IO, e);
    }
    let mut rows = String::from("kind,extra_pool,seed,miou,params,flops\n");
    let mut failures = String::new();
    let mut ok = 0usize;
    for &kind in &kinds {
        for &pool in extra_pool {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.align.kind = kind;
                cfg.enc.extra_pool = pool;
                cfg.seed = seed;
                let report = flops::report(&cfg);
                match ifa_core::train::train(&cfg, None) {
                    Ok(s) => {
                        ok += 1;
                        rows.push_str(&format!(
                            "{},{},{},{:.6},{},{}\n",
                            kind.name(),
                            pool,
                            seed,
                            s.final_miou,
                            report.total_params,
                            report.total_flops
                        ));
                        eprintln!(
                            "cell {} pool={} seed={}: mIoU {:.4}",
                            kind.name(),
                            pool,
                            seed,
                            s.final_miou
                        );
                    }
                    Err(e) => {
                        failures.push_str(&format!("{},{},{},{}\n", kind.name(), pool, seed, e));
                        eprintln!("cell {} pool={} seed={} failed: {e}", kind.name(), pool, seed);
                    }
                }
            }
        }
    }
    if let Err(e) = std::fs::write(out.join("bench.csv"), rows) {
        return fail(EXIT_IO, e);
    }
    if !failures.is_empty() {
        let body = format!("kind,extra_pool,seed,error\n{failures}");
        if let Err(e) = std::fs::write(out.join("failures.csv"), body) {
            return fail(EXIT_IO, e);
        }
    }
    if ok > 0 {
        ExitCode::SUCCESS
    } else {
        fail(EXIT_CONFIG, "every bench cell failed")
    }
}

fn cmd_flops(config: Option<&Path>, sets: &[String]) -> ExitCode {
    let cfg = match load_config(config, sets) {
        Ok(c) => c,
        Err((code, msg)) => return fail(code, msg),
    };
    let report = flops::report(&cfg);
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    ExitCode::SUCCESS
}
