//! Synthetic two-person scenes with known 3D geometry and gaze.
//!
//! Heads are spheres of a common radius placed inside the camera frustum.
//! Each is projected to a box whose side is `2 r f / Z` around the projected
//! center, which is exactly the size-depth relation the 3D encoding assumes.
//! Patches come from a parametric renderer: a disc for the head and a brighter
//! elliptical face marker displaced by the gaze's image-plane components.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::patch::crop_resize;
use super::PairSample;
use crate::error::{Error, Result};
use crate::geometry::{
    angle_deg, focal_from_fov, needs_swap, norm, relative_direction_3d, HeadBox, ImageDims, Vec3,
};
use crate::model::PATCH_SIZE;
use crate::nn::Tensor;

const MAX_ATTEMPTS: usize = 100;
const BOX_ASPECT: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// One person looks at the other, the other looks elsewhere.
    AvertedOne,
    /// Neither looks at the other; half of these look along a shared line
    /// past each other, so their gazes are antiparallel but misaligned.
    AvertedBoth,
    /// Both look in (nearly) the same direction.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthNoise {
    /// Std-dev of additive Gaussian pixel noise.
    pub pixel_sigma: f64,
    /// Relative spread of per-person head radius, `U(-s, s)`.
    pub radius_jitter: f64,
    /// Randomize background, head and marker intensities.
    pub tone_jitter: bool,
}

impl Default for SynthNoise {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.03,
            radius_jitter: 0.03,
            tone_jitter: false,
        }
    }
}

impl SynthNoise {
    pub fn none() -> Self {
        Self {
            pixel_sigma: 0.0,
            radius_jitter: 0.0,
            tone_jitter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub image: ImageDims,
    /// Meters.
    pub depth_range: (f64, f64),
    /// Meters.
    pub head_radius: f64,
    pub fov_deg: f64,
    /// Positives deviate from the exact mutual direction by less than this.
    pub mutual_angle_deg: f64,
    /// Upper bound on the deviation of averted gazes; the lower bound is
    /// twice `mutual_angle_deg`.
    pub max_averted_deg: f64,
    /// Scenes whose box-derived direction is further than this from the true
    /// 3D direction are resampled.
    pub max_projection_error_deg: f64,
    pub negative_modes: Vec<NegativeMode>,
    pub noise: SynthNoise,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            image: ImageDims {
                width: 640,
                height: 480,
            },
            depth_range: (1.0, 8.0),
            head_radius: 0.12,
            fov_deg: 53.0,
            mutual_angle_deg: 10.0,
            max_averted_deg: 75.0,
            max_projection_error_deg: 10.0,
            negative_modes: vec![
                NegativeMode::AvertedOne,
                NegativeMode::AvertedBoth,
                NegativeMode::Parallel,
            ],
            noise: SynthNoise::default(),
            channels: 1,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        let bad = |m: String| Err(Error::InvalidValue(m));
        if !(lo > 0.0 && lo < hi) {
            return bad(format!("depth range ({lo}, {hi})"));
        }
        if !(self.mutual_angle_deg > 0.0 && self.mutual_angle_deg < 45.0) {
            return bad(format!("mutual angle {}", self.mutual_angle_deg));
        }
        if !(self.max_averted_deg > 2.0 * self.mutual_angle_deg && self.max_averted_deg <= 180.0) {
            return bad(format!("max averted angle {}", self.max_averted_deg));
        }
        if !(self.head_radius > 0.0) {
            return bad(format!("head radius {}", self.head_radius));
        }
        if self.negative_modes.is_empty() {
            return bad("no negative modes".into());
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        ImageDims::new(self.image.width, self.image.height)?;
        focal_from_fov(self.image, self.fov_deg)?;
        Ok(())
    }
}

fn normalize(v: Vec3) -> Vec3 {
    let n = norm(&v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rotate unit `d` away from itself by `angle_deg` toward azimuth `phi`.
fn deviate(d: &Vec3, angle_deg: f64, phi: f64) -> Vec3 {
    let helper = if d[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let e1 = normalize(cross(d, &helper));
    let e2 = cross(d, &e1);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (sp, cp) = phi.sin_cos();
    normalize([
        c * d[0] + s * (cp * e1[0] + sp * e2[0]),
        c * d[1] + s * (cp * e1[1] + sp * e2[1]),
        c * d[2] + s * (cp * e1[2] + sp * e2[2]),
    ])
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn azimuth<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.0..std::f64::consts::TAU)
}

struct Placement {
    boxes: [HeadBox; 2],
    /// True unit direction from head 1 to head 2.
    dir: Vec3,
}

fn place_heads(cfg: &SyntheticSceneConfig, rng: &mut impl Rng) -> Result<Placement> {
    let dims = cfg.image;
    let f = focal_from_fov(dims, cfg.fov_deg)?.focal_px;
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    for _ in 0..MAX_ATTEMPTS {
        let mut centers = [[0.0; 3]; 2];
        let mut boxes = [HeadBox {
            cx: 0.0,
            cy: 0.0,
            w: 1.0,
            h: 1.0,
        }; 2];
        let mut ok = true;
        for i in 0..2 {
            let z = rng.random_range(cfg.depth_range.0..=cfg.depth_range.1);
            let r =
                cfg.head_radius * (1.0 + rng.random_range(-1.0..=1.0) * cfg.noise.radius_jitter);
            let side = 2.0 * r * f / z;
            let (bw, bh) = (side, side * BOX_ASPECT);
            if bw >= w / 2.0 || bh >= h / 2.0 {
                ok = false;
                break;
            }
            let u = rng.random_range(bw / 2.0..=w - bw / 2.0);
            let v = rng.random_range(bh / 2.0..=h - bh / 2.0);
            centers[i] = [(u - w / 2.0) * z / f, (v - h / 2.0) * z / f, z];
            boxes[i] = HeadBox {
                cx: u,
                cy: v,
                w: bw,
                h: bh,
            };
        }
        if !ok {
            continue;
        }
        let rel = [
            centers[1][0] - centers[0][0],
            centers[1][1] - centers[0][1],
            centers[1][2] - centers[0][2],
        ];
        if norm(&rel) < 4.0 * cfg.head_radius {
            continue;
        }
        let (dx, dy) = (boxes[1].cx - boxes[0].cx, boxes[1].cy - boxes[0].cy);
        if dx.hypot(dy) < 0.5 * boxes[0].w.max(boxes[1].w) {
            continue;
        }
        let dir = normalize(rel);
        let cam = focal_from_fov(dims, cfg.fov_deg)?;
        match relative_direction_3d(&boxes[0], &boxes[1], dims, &cam) {
            Ok(v) if angle_deg(&v, &dir) <= cfg.max_projection_error_deg => {
                return Ok(Placement { boxes, dir });
            }
            _ => continue,
        }
    }
    Err(Error::RetryExhausted(MAX_ATTEMPTS))
}

/// Gaze directions for a scene whose true relative direction is `dir`.
fn draw_gazes(
    cfg: &SyntheticSceneConfig,
    label: u8,
    dir: &Vec3,
    rng: &mut impl Rng,
) -> (Vec3, Vec3) {
    let theta = cfg.mutual_angle_deg;
    let lo = 2.0 * theta;
    let hi = cfg.max_averted_deg;
    let back = [-dir[0], -dir[1], -dir[2]];
    let near = |t: &Vec3, rng: &mut dyn rand::RngCore| {
        let a = rng.random_range(0.0..theta);
        deviate(t, a, azimuth(rng))
    };
    let far = |t: &Vec3, rng: &mut dyn rand::RngCore| {
        let a = rng.random_range(lo..=hi);
        deviate(t, a, azimuth(rng))
    };
    if label == 1 {
        return (near(dir, rng), near(&back, rng));
    }
    let mode = *cfg.negative_modes.choose(rng).expect("validated nonempty");
    match mode {
        NegativeMode::AvertedOne => {
            if rng.random::<bool>() {
                (near(dir, rng), far(&back, rng))
            } else {
                (far(dir, rng), near(&back, rng))
            }
        }
        NegativeMode::AvertedBoth => {
            if rng.random::<bool>() {
                // Looking past each other along parallel lines.
                let g1 = far(dir, rng);
                (g1, [-g1[0], -g1[1], -g1[2]])
            } else {
                (far(dir, rng), far(&back, rng))
            }
        }
        NegativeMode::Parallel => {
            let d = random_unit(rng);
            let a = rng.random_range(0.0..theta);
            (d, deviate(&d, a, azimuth(rng)))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Tones {
    background: f64,
    head: f64,
    marker_gain: f64,
}

/// Render one head patch for a unit gaze in camera coordinates (x right,
/// y down, z away from the camera). `box_size` sets the native resolution
/// before resampling to 64x64.
pub fn synth_render_head(
    gaze: &Vec3,
    box_size: f64,
    noise: &SynthNoise,
    channels: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let tones = if noise.tone_jitter {
        Tones {
            background: rng.random_range(0.05..0.25),
            head: rng.random_range(0.35..0.55),
            marker_gain: rng.random_range(0.4..0.5),
        }
    } else {
        Tones {
            background: 0.15,
            head: 0.45,
            marker_gain: 0.45,
        }
    };
    let res = (box_size.round() as usize).clamp(16, PATCH_SIZE);
    let canvas = render_canvas(gaze, res, tones);
    let mut patch = if res == PATCH_SIZE {
        canvas
    } else {
        let half = res as f64 / 2.0;
        crop_resize(
            &canvas,
            &HeadBox {
                cx: half,
                cy: half,
                w: res as f64,
                h: res as f64,
            },
            PATCH_SIZE,
        )
    };
    if noise.pixel_sigma > 0.0 {
        let n = Normal::new(0.0, noise.pixel_sigma).expect("positive sigma");
        for v in patch.data_mut() {
            *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
        }
    }
    if channels == 1 {
        return patch;
    }
    let mut data = Vec::with_capacity(channels * patch.len());
    for _ in 0..channels {
        data.extend_from_slice(patch.data());
    }
    Tensor::new(vec![channels, PATCH_SIZE, PATCH_SIZE], data).expect("consistent shape")
}

const HEAD_RADIUS: f64 = 0.8;
const MARKER_OFFSET: f64 = 0.5;
const MARKER_RADIUS: f64 = 0.32;

fn render_canvas(gaze: &Vec3, res: usize, tones: Tones) -> Tensor {
    // The face marker sits at the orthographic projection of the face point
    // and is foreshortened along its offset; its contrast against the head
    // fades as the face turns away (gz -> +1).
    let (mx, my) = (MARKER_OFFSET * gaze[0], MARKER_OFFSET * gaze[1]);
    let lateral = gaze[0].hypot(gaze[1]);
    let (ax, ay) = if lateral > 1e-12 {
        (gaze[0] / lateral, gaze[1] / lateral)
    } else {
        (1.0, 0.0)
    };
    let squash = gaze[2].abs().max(0.35);
    let marker = tones.head + tones.marker_gain * (1.0 - gaze[2]) / 2.0;
    let mut t = Tensor::zeros(&[1, res, res]);
    let d = t.data_mut();
    for i in 0..res {
        let y = (i as f64 + 0.5) / res as f64 * 2.0 - 1.0;
        for j in 0..res {
            let x = (j as f64 + 0.5) / res as f64 * 2.0 - 1.0;
            let mut v = tones.background;
            if x * x + y * y <= HEAD_RADIUS * HEAD_RADIUS {
                v = tones.head;
                let (px, py) = (x - mx, y - my);
                let along = px * ax + py * ay;
                let across = -px * ay + py * ax;
                let rr =
                    (along / (MARKER_RADIUS * squash)).powi(2) + (across / MARKER_RADIUS).powi(2);
                if rr <= 1.0 {
                    v = marker;
                }
            }
            d[i * res + j] = v;
        }
    }
    t
}

/// Generate one scene with the requested label.
pub fn synth_generate_scene(
    cfg: &SyntheticSceneConfig,
    label: u8,
    rng: &mut impl Rng,
) -> Result<PairSample> {
    if label > 1 {
        return Err(Error::InvalidValue(format!("label {label}")));
    }
    let Placement { boxes, dir } = place_heads(cfg, rng)?;
    let (g1, g2) = draw_gazes(cfg, label, &dir, rng);
    let patch1 = synth_render_head(&g1, boxes[0].w, &cfg.noise, cfg.channels, rng);
    let patch2 = synth_render_head(&g2, boxes[1].w, &cfg.noise, cfg.channels, rng);
    let mut s = PairSample {
        patch1,
        patch2,
        box1: boxes[0],
        box2: boxes[1],
        dims: cfg.image,
        label,
        true_gaze1: Some(g1),
        true_gaze2: Some(g2),
    };
    if needs_swap(&s.box1, &s.box2) {
        s.swap_heads();
    }
    Ok(s)
}

const STREAM_LABELS: u64 = 0;
const STREAM_SCENES: u64 = 1 << 32;

/// `n_pairs` scenes with exactly `round(n_pairs * positive_fraction)`
/// positives in a seeded random order. Scene `i` depends only on the seed
/// and `i`.
pub fn synth_make_dataset(
    cfg: &SyntheticSceneConfig,
    n_pairs: usize,
    positive_fraction: f64,
) -> Result<Vec<PairSample>> {
    cfg.validate()?;
    if n_pairs == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::InvalidValue(format!(
            "positive fraction {positive_fraction}"
        )));
    }
    let n_pos = (n_pairs as f64 * positive_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..n_pairs).map(|i| u8::from(i < n_pos)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_LABELS);
    labels.shuffle(&mut rng);
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(STREAM_SCENES + i as u64);
            synth_generate_scene(cfg, label, &mut r)
        })
        .collect()
}
