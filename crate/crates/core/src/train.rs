//! Training: OHEM main loss over query logits, mean cross-entropy auxiliary
//! loss on the stage-3 feature map, SGD with momentum, and poly learning
//! rate decay. All sampling is driven by seeded streams so a rerun with the
//! same config is byte-identical.

use crate::autodiff::{AdError, AdResult, ParamStore, Tape, VarId, IGNORE_LABEL};
use crate::config::RunConfig;
use crate::grid::{self, QueryCoord};
use crate::head::HeadError;
use crate::metrics::miou;
use crate::model::{Model, ModelError};
use crate::synth::gen_synth;
use crate::tensor::Tensor;
use crate::{checkpoint, encoder};
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Validation samples come from a disjoint index range of the generator.
const VAL_INDEX_BASE: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("iteration {iter} out of range 0..{max_iter}")]
    LrRange { iter: usize, max_iter: usize },
    #[error("non-finite loss at iteration {iter} (lr {lr:.6}); recent losses: {history:?}")]
    NonFinite { iter: usize, lr: f64, history: Vec<f64> },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// lr0 * (1 - iter/max_iter)^power.
pub fn poly_lr(lr0: f64, power: f64, iter: usize, max_iter: usize) -> Result<f64, TrainError> {
    if iter >= max_iter {
        return Err(TrainError::LrRange { iter, max_iter });
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Hard-example-mining cross-entropy: rows whose true-class probability
/// falls below `threshold` are kept; if fewer than `min_kept` qualify the
/// hardest `min_kept` rows are taken instead. Returns the mean loss over
/// the kept rows along with how many were kept.
pub fn ohem_xent(
    tape: &mut Tape,
    logits: VarId,
    labels: &[i64],
    threshold: f64,
    min_kept_fraction: f64,
) -> AdResult<(VarId, usize)> {
    let losses = tape.softmax_xent(logits, labels)?;
    let loss_vals = tape.value(losses).data.clone();
    let valid: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != IGNORE_LABEL)
        .collect();
    if valid.is_empty() {
        return Err(AdError::NoValidPixels);
    }
    let min_kept = ((valid.len() as f64 * min_kept_fraction).ceil() as usize)
        .clamp(1, valid.len());
    // p_true = exp(-loss); keep rows with p_true < threshold.
    let mut kept: Vec<usize> = valid
        .iter()
        .copied()
        .filter(|&i| (-loss_vals[i]).exp() < threshold)
        .collect();
    if kept.len() < min_kept {
        let mut by_loss = valid.clone();
        by_loss.sort_by(|&a, &b| {
            loss_vals[b].partial_cmp(&loss_vals[a]).unwrap().then(a.cmp(&b))
        });
        kept = by_loss[..min_kept].to_vec();
        kept.sort_unstable();
    }
    let picked = tape.gather_rows(losses, &kept)?;
    let total = tape.sum(picked);
    Ok((tape.scale(total, 1.0 / kept.len() as f64), kept.len()))
}

/// Plain mean cross-entropy over non-ignored rows.
pub fn mean_xent(tape: &mut Tape, logits: VarId, labels: &[i64]) -> AdResult<VarId> {
    let losses = tape.softmax_xent(logits, labels)?;
    let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(AdError::NoValidPixels);
    }
    let total = tape.sum(losses);
    Ok(tape.scale(total, 1.0 / valid as f64))
}

/// SGD with momentum and decoupled-into-gradient weight decay:
/// v <- m*v + g + wd*p; p <- p - lr*v. Gradients are zeroed after the step.
pub struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore) -> Self {
        let velocity = store
            .params
            .iter()
            .map(|p| Tensor::zeros(&p.value.shape))
            .collect();
        Sgd { velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) {
        for (p, v) in store.params.iter_mut().zip(self.velocity.iter_mut()) {
            if !p.requires_grad {
                continue;
            }
            for k in 0..p.value.data.len() {
                let g = p.grad.data[k] + weight_decay * p.value.data[k];
                v.data[k] = momentum * v.data[k] + g;
                p.value.data[k] -= lr * v.data[k];
            }
        }
        store.zero_grads();
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub val_miou: f64,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    pub final_miou: f64,
    pub param_count: usize,
}

fn hflip(sample: &mut crate::synth::SynthSample) {
    let (h, w) = (sample.image.shape[1], sample.image.shape[2]);
    for c in 0..3 {
        for r in 0..h {
            let off = c * h * w + r * w;
            sample.image.data[off..off + w].reverse();
        }
    }
    for r in 0..h {
        sample.labels[r * w..(r + 1) * w].reverse();
    }
}

/// Nearest-neighbor label downsampling to (oh, ow).
pub fn downsample_labels(labels: &[i64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<i64> {
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let sr = ((r as f64 + 0.5) * h as f64 / oh as f64).floor() as usize;
        for c in 0..ow {
            let sc = ((c as f64 + 0.5) * w as f64 / ow as f64).floor() as usize;
            out.push(labels[sr.min(h - 1) * w + sc.min(w - 1)]);
        }
    }
    out
}

/// Mean intersection-over-union over a fixed validation set, aggregated
/// across samples into a single confusion.
pub fn validate(model: &Model, val_size: usize) -> Result<f64, TrainError> {
    let cfg = &model.cfg;
    let [h, w] = cfg.crop;
    let mut all_pred = Vec::new();
    let mut all_gt = Vec::new();
    for v in 0..val_size {
        let sample = gen_synth(cfg.seed, VAL_INDEX_BASE + v as u64, cfg.n_classes, h, w);
        let pred = model.predict(&sample.image, h, w)?;
        all_pred.extend(pred);
        all_gt.extend(sample.labels);
    }
    Ok(miou(&all_pred, &all_gt, cfg.n_classes).unwrap().miou)
}

struct StepLosses {
    main: f64,
    aux: f64,
}

/// One sample's forward+backward; gradients accumulate into the store.
fn train_sample(
    model: &mut Model,
    sample: &crate::synth::SynthSample,
    rng: &mut ChaCha8Rng,
    batch_scale: f64,
) -> Result<StepLosses, TrainError> {
    let cfg = model.cfg.clone();
    let (h, w) = (sample.image.shape[1], sample.image.shape[2]);
    let mut tape = Tape::new(cfg.precision);
    let pyr = model.encode(&mut tape, &sample.image)?;

    let (main, main_val) = if model.is_ifa() {
        let hw = h * w;
        let k = cfg.train.query_subset.min(hw).max(1);
        let picks: Vec<usize> = if k < hw {
            let mut p = index_sample(rng, hw, k).into_vec();
            p.sort_unstable();
            p
        } else {
            (0..hw).collect()
        };
        let queries: Vec<QueryCoord> = picks
            .iter()
            .map(|&p| grid::query_grid_point(p / w, p % w, h, w))
            .collect();
        let labels: Vec<i64> = picks.iter().map(|&p| sample.labels[p]).collect();
        let selected = model.select_levels(&pyr);
        let head = model.head.as_ref().unwrap();
        let logits = head.decode_vars(&mut tape, &model.store, &selected, &queries)?;
        let (loss, _) = ohem_xent(
            &mut tape,
            logits,
            &labels,
            cfg.train.ohem_threshold,
            cfg.train.ohem_min_kept_fraction,
        )?;
        (loss, tape.value(loss).data[0])
    } else {
        let fpn = model.fpn.as_ref().unwrap();
        let logits = crate::aligners::fpn_fuse(&mut tape, &model.store, fpn, &pyr)
            .map_err(ModelError::from)?;
        let up = tape.bilinear_resize(logits, h, w)?;
        let rows = tape.chw_to_rows(up)?;
        let (loss, _) = ohem_xent(
            &mut tape,
            rows,
            &sample.labels,
            cfg.train.ohem_threshold,
            cfg.train.ohem_min_kept_fraction,
        )?;
        (loss, tape.value(loss).data[0])
    };

    // Auxiliary classifier over the stage-3 map (second pyramid position).
    let (_, f3, h3, w3) = pyr.levels[1];
    let aux = encoder::aux_logits(&mut tape, &model.store, &model.enc, f3)?;
    let aux_rows = tape.chw_to_rows(aux)?;
    let aux_labels = downsample_labels(&sample.labels, h, w, h3, w3);
    let aux_loss = mean_xent(&mut tape, aux_rows, &aux_labels)?;
    let aux_val = tape.value(aux_loss).data[0];

    let weighted_aux = tape.scale(aux_loss, cfg.train.aux_weight);
    let total = tape.add(main, weighted_aux)?;
    let total = tape.scale(total, batch_scale);
    tape.backward(total, &mut model.store)?;
    Ok(StepLosses { main: main_val, aux: aux_val })
}

/// Full training run. Writes `metrics.csv`, `checkpoint.json`, and
/// `checkpoint.bin` into `out_dir` (if given) and returns the logged rows.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainSummary, TrainError> {
    let mut model = Model::new(cfg.clone())?;
    let mut sgd = Sgd::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let t0 = Instant::now();
    let mut rows = Vec::new();
    let mut recent = Vec::new();
    let tc = cfg.train.clone();

    for iter in 0..tc.max_iter {
        let lr = poly_lr(tc.lr0, tc.power, iter, tc.max_iter)?;
        let mut main_sum = 0.0;
        let mut aux_sum = 0.0;
        for b in 0..tc.batch_size {
            let index = (iter * tc.batch_size + b) as u64;
            let mut sample = gen_synth(cfg.seed, index, cfg.n_classes, cfg.crop[0], cfg.crop[1]);
            if rng.gen_bool(0.5) {
                hflip(&mut sample);
            }
            let losses = train_sample(&mut model, &sample, &mut rng, 1.0 / tc.batch_size as f64)?;
            main_sum += losses.main;
            aux_sum += losses.aux;
        }
        let main_mean = main_sum / tc.batch_size as f64;
        let aux_mean = aux_sum / tc.batch_size as f64;
        if !main_mean.is_finite() || !aux_mean.is_finite() {
            return Err(TrainError::NonFinite { iter, lr, history: recent.clone() });
        }
        recent.push(main_mean);
        if recent.len() > 8 {
            recent.remove(0);
        }
        sgd.step(&mut model.store, lr, tc.momentum, tc.weight_decay);
        // divergence can overflow the weights while the clamped loss still
        // reads finite, so check the parameters themselves
        let exploded = model
            .store
            .params
            .iter()
            .any(|p| p.value.data.iter().any(|v| !v.is_finite()));
        if exploded {
            return Err(TrainError::NonFinite { iter, lr, history: recent.clone() });
        }

        let last = iter + 1 == tc.max_iter;
        if (iter + 1) % tc.log_interval == 0 || last {
            let val_miou = validate(&model, tc.val_size)?;
            rows.push(MetricsRow {
                iter,
                lr,
                loss_main: main_mean,
                loss_aux: aux_mean,
                val_miou,
                wall_ms: t0.elapsed().as_millis() as u64,
            });
        }
    }

    let final_miou = match rows.last() {
        Some(r) => r.val_miou,
        None => validate(&model, tc.val_size)?,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
        checkpoint::save(&model.store, cfg.precision, dir)?;
    }
    Ok(TrainSummary {
        rows,
        final_miou,
        param_count: model.store.num_scalars(),
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "iter,lr,loss_main,loss_aux,val_miou,wall_ms")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.8},{:.8},{:.8},{:.8},{}",
            r.iter, r.lr, r.loss_main, r.loss_aux, r.val_miou, r.wall_ms
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn poly_lr_endpoints_and_range() {
        assert!((poly_lr(0.1, 0.9, 0, 100).unwrap() - 0.1).abs() < 1e-12);
        let mid = poly_lr(0.1, 0.9, 50, 100).unwrap();
        assert!((mid - 0.1 * 0.5f64.powf(0.9)).abs() < 1e-12);
        let last = poly_lr(0.1, 0.9, 99, 100).unwrap();
        assert!(last > 0.0 && last < 0.1 * 0.02);
        assert!(poly_lr(0.1, 0.9, 100, 100).is_err());
    }

    #[test]
    fn ohem_keeps_hard_rows_only() {
        // Two confident-correct rows, one confident-wrong row: with a 0.7
        // threshold only the wrong row is kept, so the mean equals its loss.
        let mut tape = Tape::new(Precision::F64);
        let logits = tape.constant(Tensor::new(
            vec![3, 2],
            vec![5.0, -5.0, 5.0, -5.0, 5.0, -5.0],
        ));
        let labels = vec![0, 0, 1];
        let (loss, kept) = ohem_xent(&mut tape, logits, &labels, 0.7, 1.0 / 16.0).unwrap();
        assert_eq!(kept, 1);
        let expect = (1.0 + (-10.0f64).exp()).ln() + 10.0;
        assert!((tape.value(loss).data[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn ohem_min_kept_floor() {
        // All rows easy: falls back to the hardest ceil(4/16)=1 row.
        let mut tape = Tape::new(Precision::F64);
        let logits = tape.constant(Tensor::new(
            vec![4, 2],
            vec![4.0, -4.0, 4.0, -4.0, 4.0, -4.0, 3.0, -3.0],
        ));
        let labels = vec![0, 0, 0, 0];
        let (loss, kept) = ohem_xent(&mut tape, logits, &labels, 0.7, 1.0 / 16.0).unwrap();
        assert_eq!(kept, 1);
        // hardest row is the one with the smallest margin
        let expect = (1.0 + (-6.0f64).exp()).ln();
        assert!((tape.value(loss).data[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn ohem_ignores_ignore_label() {
        let mut tape = Tape::new(Precision::F64);
        let logits = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 9.0, -9.0]));
        let labels = vec![IGNORE_LABEL, 0];
        let (_, kept) = ohem_xent(&mut tape, logits, &labels, 0.999, 1.0).unwrap();
        assert_eq!(kept, 1);
        let all_ignored = vec![IGNORE_LABEL, IGNORE_LABEL];
        let mut tape2 = Tape::new(Precision::F64);
        let logits2 = tape2.constant(Tensor::new(vec![2, 2], vec![0.0; 4]));
        assert!(matches!(
            ohem_xent(&mut tape2, logits2, &all_ignored, 0.7, 1.0),
            Err(AdError::NoValidPixels)
        ));
    }

    #[test]
    fn sgd_momentum_hand_case() {
        // One scalar parameter, two steps with constant gradient 1,
        // lr 0.1, momentum 0.9, no decay: p = 1 -> 0.9 -> 0.71.
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![1], vec![1.0]));
        let mut sgd = Sgd::new(&store);
        store.params[id.0].grad.data[0] = 1.0;
        sgd.step(&mut store, 0.1, 0.9, 0.0);
        assert!((store.params[id.0].value.data[0] - 0.9).abs() < 1e-12);
        store.params[id.0].grad.data[0] = 1.0;
        sgd.step(&mut store, 0.1, 0.9, 0.0);
        assert!((store.params[id.0].value.data[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![1], vec![2.0]));
        let mut sgd = Sgd::new(&store);
        sgd.step(&mut store, 0.1, 0.0, 0.5);
        // g = 0 + 0.5*2 = 1; p = 2 - 0.1 = 1.9
        assert!((store.params[id.0].value.data[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn downsample_labels_nearest() {
        let labels = vec![0, 1, 2, 3];
        let out = downsample_labels(&labels, 2, 2, 1, 1);
        // centers at (0.5, 0.5) scaled -> source (1, 1)
        assert_eq!(out, vec![3]);
        let same = downsample_labels(&labels, 2, 2, 2, 2);
        assert_eq!(same, labels);
    }
}
