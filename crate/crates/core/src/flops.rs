//! Analytic FLOP and parameter counting. Conventions: one multiply-add is
//! 2 FLOPs, a bias add is 1 FLOP per output element, resampling (bilinear,
//! nearest, pooling) and activations count as 0, and each positional
//! encoding entry costs 2 FLOPs (frequency multiply plus trig evaluation).

use crate::config::{AlignerKind, EncConfig, HeadConfig, PeConfig, RunConfig};
use serde::Serialize;

/// (channels, height, width) of one pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct LevelDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

pub fn conv2d_flops(ci: usize, co: usize, k: usize, oh: usize, ow: usize, bias: bool) -> u64 {
    let macs = (ci * co * k * k * oh * ow) as u64;
    2 * macs + if bias { (co * oh * ow) as u64 } else { 0 }
}

/// Dense layers over `rows` rows: widths = [in, hidden..., out].
pub fn mlp_flops(widths: &[usize], rows: u64) -> u64 {
    widths
        .windows(2)
        .map(|p| rows * (2 * p[0] as u64 * p[1] as u64 + p[1] as u64))
        .sum()
}

pub fn mlp_params(widths: &[usize]) -> u64 {
    widths
        .windows(2)
        .map(|p| (p[0] * p[1] + p[1]) as u64)
        .sum()
}

/// Pyramid level dims produced by the encoder for an h x w input.
pub fn encoder_level_dims(cfg: &EncConfig, h: usize, w: usize) -> Vec<LevelDims> {
    let pool = 1 << cfg.extra_pool;
    (0..4)
        .map(|j| LevelDims {
            c: cfg.widths[j + 1],
            h: h / (4 << j) / pool,
            w: w / (4 << j) / pool,
        })
        .collect()
}

pub fn encoder_flops(cfg: &EncConfig, h: usize, w: usize) -> u64 {
    let mut total = conv2d_flops(3, cfg.widths[0], 3, h / 2, w / 2, false)
        + 2 * (cfg.widths[0] * (h / 2) * (w / 2)) as u64;
    let mut cur = (h / 2, w / 2);
    let mut prev = cfg.widths[0];
    for (j, &width) in cfg.widths[1..].iter().enumerate() {
        cur = (cur.0 / 2, cur.1 / 2);
        for b in 0..cfg.blocks {
            let ci = if b == 0 { prev } else { width };
            total += conv2d_flops(ci, width, 3, cur.0, cur.1, false)
                + 2 * (width * cur.0 * cur.1) as u64;
        }
        prev = width;
        if j == 0 {
            cur = (cur.0 >> cfg.extra_pool, cur.1 >> cfg.extra_pool);
        }
    }
    total
}

pub fn encoder_params(cfg: &EncConfig, n_classes: usize) -> u64 {
    let mut total = (3 * cfg.widths[0] * 9 + 2 * cfg.widths[0]) as u64;
    let mut prev = cfg.widths[0];
    for &width in &cfg.widths[1..] {
        for b in 0..cfg.blocks {
            let ci = if b == 0 { prev } else { width };
            total += (ci * width * 9 + 2 * width) as u64;
        }
        prev = width;
    }
    total + (cfg.widths[2] * n_classes + n_classes) as u64
}

fn pe_dims_per_level(pe: &PeConfig, n_levels: usize) -> Vec<(usize, usize)> {
    // (appended scalars, sinusoid entries) per level
    vec![pe.mode.dims_for(pe.freq_count()); n_levels]
}

/// Per-level 1x1 projections over the grids, positional encodings, and the
/// shared MLP over every query.
pub fn head_flops(
    head: &HeadConfig,
    pe: &PeConfig,
    levels: &[LevelDims],
    n_classes: usize,
    h_out: usize,
    w_out: usize,
) -> u64 {
    let d = head.proj_dim;
    let mut total: u64 = levels
        .iter()
        .map(|l| conv2d_flops(l.c, d, 1, l.h, l.w, true))
        .sum();
    let queries = (h_out * w_out) as u64;
    let dims = pe_dims_per_level(pe, levels.len());
    let in_dim: usize = dims.iter().map(|&(a, s)| d + a + s).sum();
    for &(_, sinusoid) in &dims {
        total += queries * 2 * sinusoid as u64;
    }
    let mut widths = vec![in_dim];
    widths.extend(&head.mlp_widths);
    widths.push(n_classes);
    total + mlp_flops(&widths, queries)
}

pub fn head_params(head: &HeadConfig, pe: &PeConfig, in_channels: &[usize], n_classes: usize) -> u64 {
    let d = head.proj_dim;
    let mut total: u64 = in_channels.iter().map(|&c| (c * d + d) as u64).sum();
    let dims = pe_dims_per_level(pe, in_channels.len());
    let learnable = pe.freq_count(); // omega vector, when sinusoids exist
    let has_sinusoid = dims[0].1 > 0;
    if has_sinusoid {
        let copies = if pe.share_across_levels { 1 } else { in_channels.len() };
        total += (learnable * copies) as u64;
    }
    let in_dim: usize = dims.iter().map(|&(a, s)| d + a + s).sum();
    let mut widths = vec![in_dim];
    widths.extend(&head.mlp_widths);
    widths.push(n_classes);
    total + mlp_params(&widths)
}

/// Lateral 1x1 projections, per-step upsampling cost by kind (convolutions
/// are applied at the source resolution of each 2x step), and the final
/// classifier at the finest level.
pub fn aligner_flops(kind: AlignerKind, levels: &[LevelDims], dim: usize, n_classes: usize) -> u64 {
    assert!(kind != AlignerKind::Ifa);
    let mut total: u64 = levels
        .iter()
        .map(|l| conv2d_flops(l.c, dim, 1, l.h, l.w, true))
        .sum();
    for src in (1..levels.len()).rev() {
        let (h, w) = (levels[src].h, levels[src].w);
        total += match kind {
            AlignerKind::UpsampleModule => conv2d_flops(dim, dim, 3, h, w, false),
            AlignerKind::Deconv => 2 * (dim * dim * 16 * h * w) as u64,
            _ => 0,
        };
    }
    total + conv2d_flops(dim, n_classes, 1, levels[0].h, levels[0].w, true)
}

pub fn aligner_params(kind: AlignerKind, in_channels: &[usize], dim: usize, n_classes: usize) -> u64 {
    assert!(kind != AlignerKind::Ifa);
    let mut total: u64 = in_channels.iter().map(|&c| (c * dim + dim) as u64).sum();
    let steps = (in_channels.len() - 1) as u64;
    total += match kind {
        AlignerKind::UpsampleModule => steps * (dim * dim * 9) as u64,
        AlignerKind::Deconv => steps * (dim * dim * 16) as u64,
        _ => 0,
    };
    total + (dim * n_classes + n_classes) as u64
}

#[derive(Debug, Serialize)]
pub struct FlopsReport {
    pub kind: String,
    pub input: [usize; 2],
    pub output: [usize; 2],
    pub encoder_flops: u64,
    pub decoder_flops: u64,
    pub total_flops: u64,
    pub encoder_params: u64,
    pub decoder_params: u64,
    pub total_params: u64,
}

/// Full-model count for a config: the decoder is the IFA head queried at
/// the stride-4 grid, or the configured baseline, to match output shapes.
pub fn report(cfg: &RunConfig) -> FlopsReport {
    let [h, w] = cfg.crop;
    let levels = encoder_level_dims(&cfg.enc, h, w);
    let enc_f = encoder_flops(&cfg.enc, h, w);
    let enc_p = encoder_params(&cfg.enc, cfg.n_classes);
    let (out_h, out_w) = (levels[0].h, levels[0].w);
    let (dec_f, dec_p) = match cfg.align.kind {
        AlignerKind::Ifa => {
            let picked: Vec<LevelDims> = cfg
                .head
                .levels
                .iter()
                .map(|&l| levels[(l - 2) as usize])
                .collect();
            let chans: Vec<usize> = picked.iter().map(|l| l.c).collect();
            (
                head_flops(&cfg.head, &cfg.pe, &picked, cfg.n_classes, out_h, out_w),
                head_params(&cfg.head, &cfg.pe, &chans, cfg.n_classes),
            )
        }
        kind => {
            let chans: Vec<usize> = levels.iter().map(|l| l.c).collect();
            (
                aligner_flops(kind, &levels, cfg.head.proj_dim, cfg.n_classes),
                aligner_params(kind, &chans, cfg.head.proj_dim, cfg.n_classes),
            )
        }
    };
    FlopsReport {
        kind: cfg.align.kind.name().to_string(),
        input: [h, w],
        output: [out_h, out_w],
        encoder_flops: enc_f,
        decoder_flops: dec_f,
        total_flops: enc_f + dec_f,
        encoder_params: enc_p,
        decoder_params: dec_p,
        total_params: enc_p + dec_p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posenc::PeMode;

    #[test]
    fn small_mlp_hand_count() {
        // widths [8,4,2], one row: (2*8*4 + 4) + (2*4*2 + 2) = 68 + 18 = 86
        assert_eq!(mlp_flops(&[8, 4, 2], 1), 86);
        assert_eq!(mlp_params(&[8, 4, 2]), 8 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn conv_count_matches_hand_case() {
        // 1x1 conv, 2 in, 3 out, 4x4 map, bias: 2*2*3*16 + 3*16 = 240
        assert_eq!(conv2d_flops(2, 3, 1, 4, 4, true), 240);
    }

    #[test]
    fn deconv_costs_more_than_upsample_module() {
        let levels = vec![
            LevelDims { c: 16, h: 16, w: 16 },
            LevelDims { c: 32, h: 8, w: 8 },
            LevelDims { c: 64, h: 4, w: 4 },
            LevelDims { c: 64, h: 2, w: 2 },
        ];
        let up = aligner_flops(AlignerKind::UpsampleModule, &levels, 32, 5);
        let de = aligner_flops(AlignerKind::Deconv, &levels, 32, 5);
        let bi = aligner_flops(AlignerKind::Bilinear, &levels, 32, 5);
        assert!(de > up && up > bi);
    }

    #[test]
    fn params_match_built_model() {
        use crate::model::Model;
        let cfg = RunConfig::desk();
        let m = Model::new(cfg.clone()).unwrap();
        let r = report(&cfg);
        assert_eq!(r.total_params as usize, m.store.num_scalars());
        let mut bcfg = cfg.clone();
        bcfg.align.kind = AlignerKind::UpsampleModule;
        let bm = Model::new(bcfg.clone()).unwrap();
        let br = report(&bcfg);
        assert_eq!(br.total_params as usize, bm.store.num_scalars());
    }

    #[test]
    fn pe_mode_changes_head_flops_monotonically() {
        let levels = vec![LevelDims { c: 16, h: 16, w: 16 }; 4];
        let head = HeadConfig::default();
        let mut pe = PeConfig::default();
        pe.mode = PeMode::None;
        let none = head_flops(&head, &pe, &levels, 5, 64, 64);
        pe.mode = PeMode::CoordOnly;
        let coord = head_flops(&head, &pe, &levels, 5, 64, 64);
        pe.mode = PeMode::SineCosineLearned;
        let full = head_flops(&head, &pe, &levels, 5, 64, 64);
        assert!(none < coord && coord < full);
    }
}
