//! Synthetic street scenes with exact labels: a striped crossing band along a
//! known midline and, depending on the class, a light housing with a red or
//! green symbol and/or countdown digits, over a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{Endpoints, LabeledFrame};
use crate::class::LightClass;
use crate::tensor::Tensor;

/// Brightness of crossing stripes; nothing else in a scene is this bright.
pub const STRIPE_LEVEL: f32 = 0.95;
/// Background channel values never exceed this.
pub const BACKGROUND_MAX: f32 = 0.6;

#[derive(Clone, Copy, Debug)]
pub struct SceneGenerator {
    pub height: usize,
    pub width: usize,
    /// Endpoints stay inside `[margin, 1 − margin]`.
    pub margin: f64,
    /// Share of frames drawn without a crossing.
    pub no_crossing_rate: f64,
}

impl SceneGenerator {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            margin: 0.15,
            no_crossing_rate: 0.0,
        }
    }

    /// `count` frames cycling through the five classes.
    pub fn generate_set(&self, count: usize, seed: u64) -> Vec<LabeledFrame> {
        (0..count)
            .map(|i| self.generate(LightClass::ALL[i % 5], seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
            .collect()
    }

    pub fn generate(&self, class: LightClass, seed: u64) -> LabeledFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (self.height, self.width);
        let (hf, wf) = (h as f64, w as f64);
        let mut img = vec![0f32; 3 * h * w];
        let put = |img: &mut [f32], x: usize, y: usize, rgb: [f32; 3]| {
            for (c, v) in rgb.into_iter().enumerate() {
                img[(c * h + y) * w + x] = v;
            }
        };

        let horizon = rng.gen_range(0.3..0.45);
        let sky: [f32; 3] = [rng.gen_range(0.2..0.45), rng.gen_range(0.2..0.45), rng.gen_range(0.3..0.5)];
        let road: f32 = rng.gen_range(0.15..0.35);
        for y in 0..h {
            for x in 0..w {
                let n: f32 = rng.gen_range(-0.08..0.08);
                let base = if (y as f64) < horizon * hf { sky } else { [road; 3] };
                put(&mut img, x, y, base.map(|b| (b + n).clamp(0.0, BACKGROUND_MAX)));
            }
        }

        let m = self.margin;
        let endpoints = (!rng.gen_bool(self.no_crossing_rate)).then(|| {
            let x1 = rng.gen_range(0.3..0.7);
            let y1 = rng.gen_range(0.72..1.0 - m);
            let x2 = (x1 + rng.gen_range(-0.18f64..0.18)).clamp(m, 1.0 - m);
            let y2 = rng.gen_range(m.max(0.45)..0.58);
            Endpoints::new(x1, y1, x2, y2)
        });
        if let Some(e) = endpoints {
            let (sx, sy) = (e.x1 * wf, e.y1 * hf);
            let (ex, ey) = (e.x2 * wf, e.y2 * hf);
            let (dx, dy) = (ex - sx, ey - sy);
            let len2 = dx * dx + dy * dy;
            let len = len2.sqrt();
            let stripes = rng.gen_range(5..8) as f64;
            let near = 0.16 * wf;
            let far = 0.08 * wf;
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 + 0.5 - sx, y as f64 + 0.5 - sy);
                    let t = (px * dx + py * dy) / len2;
                    if !(-0.04..=1.04).contains(&t) {
                        continue;
                    }
                    let across = (px * dy - py * dx).abs() / len;
                    let half = near + (far - near) * t;
                    if across > half {
                        continue;
                    }
                    let phase = (t + 0.04) * stripes;
                    if phase.fract() < 0.5 {
                        put(&mut img, x, y, [STRIPE_LEVEL; 3]);
                    }
                }
            }
        }

        let housing = !matches!(class, LightClass::None);
        if housing {
            let bw = (0.14 * wf).max(6.0);
            let bh = (0.2 * hf).max(8.0);
            let bx = rng.gen_range(0.05 * wf..0.95 * wf - bw);
            let by = rng.gen_range(0.03 * hf..(horizon * hf - bh).max(0.04 * hf));
            let inside = |x: f64, y: f64, x0: f64, y0: f64, ww: f64, hh: f64| x >= x0 && x < x0 + ww && y >= y0 && y < y0 + hh;
            let red = matches!(class, LightClass::Red);
            let green = matches!(class, LightClass::Green | LightClass::CountdownGreen);
            let digits = matches!(class, LightClass::CountdownGreen | LightClass::CountdownBlank);
            let r = 0.28 * bw.min(bh);
            let (cx, cy) = (bx + 0.35 * bw, if red { by + 0.3 * bh } else { by + 0.7 * bh });
            for y in 0..h {
                for x in 0..w {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if !inside(fx, fy, bx, by, bw, bh) {
                        continue;
                    }
                    let mut rgb = [0.05, 0.05, 0.06];
                    if (red || green) && (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r {
                        rgb = if red { [0.95, 0.12, 0.1] } else { [0.1, 0.9, 0.35] };
                    }
                    if digits {
                        let dx0 = bx + 0.66 * bw;
                        let dy0 = by + 0.2 * bh;
                        let (dw, dh) = (0.25 * bw, 0.6 * bh);
                        if inside(fx, fy, dx0, dy0, dw, dh) {
                            let col = ((fx - dx0) / dw * 3.0) as usize;
                            let row = ((fy - dy0) / dh * 5.0) as usize;
                            if col != 1 || row.is_multiple_of(2) {
                                rgb = [1.0, 0.6, 0.05];
                            }
                        }
                    }
                    put(&mut img, x, y, rgb);
                }
            }
        }

        LabeledFrame {
            image: Tensor::new([3, h, w], img).expect("image buffer matches its shape"),
            class,
            endpoints,
            obstructed: false,
        }
    }
}

/// Whether pixel `(x, y)` is crossing-stripe white.
pub fn is_stripe(image: &Tensor<f32>, x: usize, y: usize) -> bool {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    (0..3).all(|c| d[(c * h + y) * w + x] >= STRIPE_LEVEL - 0.02)
}

/// Share of stripe pixels sampled along the segment between two normalized
/// points, trimmed by `trim` at both ends.
pub fn stripe_fraction_along(image: &Tensor<f32>, e: &Endpoints, trim: f64, samples: usize) -> f64 {
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let mut hits = 0;
    for i in 0..samples {
        let t = trim + (1.0 - 2.0 * trim) * i as f64 / (samples - 1) as f64;
        let x = ((e.x1 + (e.x2 - e.x1) * t) * w).floor().clamp(0.0, w - 1.0) as usize;
        let y = ((e.y1 + (e.y2 - e.y1) * t) * h).floor().clamp(0.0, h - 1.0) as usize;
        hits += usize::from(is_stripe(image, x, y));
    }
    hits as f64 / samples as f64
}
