//! Grayscale face patches and resampling.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Static appearance of one person.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FaceStyle {
    pub skin: f64,
    pub background: f64,
    /// Low-frequency cosine patterns `(amplitude, fx, fy, phase)`.
    pub texture: Vec<(f64, f64, f64, f64)>,
    pub eye_spacing: f64,
}

impl FaceStyle {
    pub fn random(rng: &mut impl Rng) -> Self {
        FaceStyle {
            skin: rng.gen_range(0.55..0.8),
            background: rng.gen_range(0.15..0.4),
            texture: (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.02..0.08),
                        rng.gen_range(0.5..2.5),
                        rng.gen_range(0.5..2.5),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect(),
            eye_spacing: rng.gen_range(0.14..0.2),
        }
    }
}

const SUPERSAMPLE: usize = 3;

/// Renders a `d × d` face. `openness ∈ [0, 1]` sets the mouth height and
/// `offset` shifts the face in units of the patch size.
pub fn render_face(style: &FaceStyle, d: usize, openness: f64, offset: (f64, f64), brightness: f64) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    let (cx, cy) = (0.5 + offset.0, 0.5 + offset.1);
    let inside = |x: f64, y: f64, ex: f64, ey: f64, rx: f64, ry: f64| {
        let (dx, dy) = ((x - ex) / rx, (y - ey) / ry);
        dx * dx + dy * dy <= 1.0
    };
    let mouth_ry = 0.015 + 0.09 * openness.clamp(0.0, 1.0);
    for py in 0..d {
        for px in 0..d {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / d as f64;
                    let y = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / d as f64;
                    let v = if inside(x, y, cx, cy, 0.36, 0.44) {
                        let mut v = style.skin;
                        for &(a, fx, fy, ph) in &style.texture {
                            v += a * (std::f64::consts::TAU * (fx * (x - cx) + fy * (y - cy)) + ph).cos();
                        }
                        let eye_y = cy - 0.12;
                        if inside(x, y, cx - style.eye_spacing, eye_y, 0.06, 0.04)
                            || inside(x, y, cx + style.eye_spacing, eye_y, 0.06, 0.04)
                        {
                            v = 0.12;
                        }
                        if inside(x, y, cx, cy + 0.22, 0.16, mouth_ry) {
                            v = 0.05;
                        }
                        v
                    } else {
                        style.background
                    };
                    acc += v;
                }
            }
            out[py * d + px] = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64 + brightness;
        }
    }
    out
}

pub fn add_pixel_noise(img: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    for v in img.iter_mut() {
        *v += n.sample(rng);
    }
}

/// Bilinear sample with edge clamping; `(x, y)` in pixel units of `src`.
pub fn sample_bilinear(src: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Pixel-centre aligned bilinear resize of a square image.
pub fn resize(src: &[f64], from: usize, to: usize) -> Vec<f64> {
    let scale = from as f64 / to as f64;
    let mut out = vec![0.0; to * to];
    for y in 0..to {
        for x in 0..to {
            let sx = (x as f64 + 0.5) * scale - 0.5;
            let sy = (y as f64 + 0.5) * scale - 0.5;
            out[y * to + x] = sample_bilinear(src, from, from, sx, sy);
        }
    }
    out
}
