//! Seeded synthetic segmentation task: colored, textured shapes on a
//! background, a desk-scale stand-in for a real scene-parsing dataset.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone)]
pub struct SynthSample {
    /// 3 x H x W, values in [0, 1].
    pub image: Tensor,
    /// H x W class ids, row-major.
    pub labels: Vec<i64>,
}

fn class_color(c: usize) -> [f64; 3] {
    // spread hues around the circle, alternating brightness
    let hue = (c as f64 * 0.61803398875).fract() * 6.0;
    let v = if c % 2 == 0 { 0.75 } else { 0.45 };
    let x = v * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (v, x, 0.0),
        1 => (x, v, 0.0),
        2 => (0.0, v, x),
        3 => (0.0, x, v),
        4 => (x, 0.0, v),
        _ => (v, 0.0, x),
    };
    // pull every color toward mid-gray so per-pixel appearance alone is a
    // weak cue and surrounding context is needed to decide the class
    let blend = |ch: f64| 0.5 * (ch + 0.15) + 0.5 * 0.45;
    [blend(r), blend(g), blend(b)]
}

/// Class-correlated texture: a sinusoidal pattern whose frequency and phase
/// depend on the class, giving local per-pixel evidence finer than the
/// encoder stride.
fn texture(c: usize, x: usize, y: usize) -> f64 {
    let fx = 0.12 + 0.07 * ((c * 7) % 5) as f64;
    let fy = 0.09 + 0.05 * ((c * 3) % 5) as f64;
    let phase = c as f64 * 1.3;
    0.05 * (2.0 * std::f64::consts::PI * (fx * x as f64 + fy * y as f64) + phase).sin()
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Stripe { nx: f64, ny: f64, c: f64, half_w: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Stripe { nx, ny, c, half_w } => (nx * x + ny * y - c).abs() <= half_w,
        }
    }
}

/// Deterministic function of (seed, index): same arguments, bit-identical
/// sample.
pub fn gen_synth(seed: u64, index: u64, n_classes: usize, h: usize, w: usize) -> SynthSample {
    assert!(n_classes >= 2);
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16] = 0x5a;
    let mut rng = ChaCha8Rng::from_seed(key);

    let (hf, wf) = (h as f64, w as f64);
    let n_shapes = rng.gen_range(3..=8usize);
    let mut shapes: Vec<(usize, Shape)> = Vec::with_capacity(n_shapes);
    for s in 0..n_shapes {
        let class = rng.gen_range(1..n_classes);
        let kind = if s == 0 { 0 } else { rng.gen_range(0..3usize) };
        let shape = match kind {
            0 => {
                // the first ellipse is kept large and well inside the frame,
                // guaranteeing at least two classes in the label map
                let (rmin, rmax) = if s == 0 {
                    (hf / 6.0, hf / 3.5)
                } else {
                    (hf / 12.0, hf / 3.5)
                };
                Shape::Ellipse {
                    cx: rng.gen_range(0.25 * wf..0.75 * wf),
                    cy: rng.gen_range(0.25 * hf..0.75 * hf),
                    rx: rng.gen_range(rmin..rmax),
                    ry: rng.gen_range(rmin..rmax),
                }
            }
            1 => {
                let x0 = rng.gen_range(0.0..0.8 * wf);
                let y0 = rng.gen_range(0.0..0.8 * hf);
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.gen_range(wf / 10.0..wf / 2.5),
                    y1: y0 + rng.gen_range(hf / 10.0..hf / 2.5),
                }
            }
            _ => {
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let (nx, ny) = (theta.cos(), theta.sin());
                let px = rng.gen_range(0.0..wf);
                let py = rng.gen_range(0.0..hf);
                Shape::Stripe {
                    nx,
                    ny,
                    c: nx * px + ny * py,
                    half_w: rng.gen_range(hf / 28.0..hf / 12.0),
                }
            }
        };
        shapes.push((class, shape));
    }

    let mut labels = vec![0i64; h * w];
    for y in 0..h {
        for x in 0..w {
            // later shapes draw on top
            for &(class, ref shape) in shapes.iter().rev() {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    labels[y * w + x] = class as i64;
                    break;
                }
            }
        }
    }

    let noise = Normal::new(0.0, 0.15).unwrap();
    let mut image = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let c = labels[y * w + x] as usize;
            let base = class_color(c);
            let t = texture(c, x, y);
            for ch in 0..3 {
                let v = base[ch] + t + noise.sample(&mut rng);
                image.data[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    SynthSample { image, labels }
}
