use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patch::mirror_horizontal;
use super::PairSample;
use crate::geometry::HeadBox;

/// Training-time augmentation. Boxes are jittered in place; patches are not
/// re-cropped, so jitter only affects the spatial features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Center shift as a fraction of the box side, drawn from `U(-j, j)`.
    pub center_jitter: f64,
    /// Side scale drawn from `U(1 - j, 1 + j)`.
    pub size_jitter: f64,
    /// Intensity offset drawn from `U(-b, b)`.
    pub brightness: f64,
    /// Contrast factor drawn log-uniformly from `[1 / c, c]`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            center_jitter: 0.05,
            size_jitter: 0.05,
            brightness: 0.2,
            contrast: 1.25,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            center_jitter: 0.0,
            size_jitter: 0.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }
}

/// Mirror the whole scene about the vertical centerline.
pub fn flip_pair(s: &PairSample) -> PairSample {
    let flip_gaze = |g: Option<[f64; 3]>| g.map(|g| [-g[0], g[1], g[2]]);
    PairSample {
        patch1: mirror_horizontal(&s.patch1),
        patch2: mirror_horizontal(&s.patch2),
        box1: s.box1.flipped(s.dims),
        box2: s.box2.flipped(s.dims),
        true_gaze1: flip_gaze(s.true_gaze1),
        true_gaze2: flip_gaze(s.true_gaze2),
        ..s.clone()
    }
}

fn jitter_box(b: &HeadBox, u: [f64; 4], cfg: &AugmentConfig) -> HeadBox {
    HeadBox {
        cx: b.cx + u[0] * cfg.center_jitter * b.w,
        cy: b.cy + u[1] * cfg.center_jitter * b.h,
        w: b.w * (1.0 + u[2] * cfg.size_jitter),
        h: b.h * (1.0 + u[3] * cfg.size_jitter),
    }
}

/// Random flip, box jitter and photometric change. Always consumes the same
/// number of draws from `rng`, whatever the configuration.
pub fn augment_pair(s: &PairSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> PairSample {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let mut u = [0.0; 8];
    for v in u.iter_mut() {
        *v = rng.random_range(-1.0..=1.0);
    }
    let b = rng.random_range(-1.0..=1.0) * cfg.brightness;
    let c = (rng.random_range(-1.0..=1.0) * cfg.contrast.ln()).exp();

    let mut out = if flip { flip_pair(s) } else { s.clone() };
    out.box1 = jitter_box(&out.box1, [u[0], u[1], u[2], u[3]], cfg);
    out.box2 = jitter_box(&out.box2, [u[4], u[5], u[6], u[7]], cfg);
    if b != 0.0 || c != 1.0 {
        for p in [&mut out.patch1, &mut out.patch2] {
            for v in p.data_mut() {
                *v = ((*v - 0.5) * c + 0.5 + b).clamp(0.0, 1.0);
            }
        }
    }
    out
}
