//! The mutual-gaze network and its training loop.
//!
//! ```text
//! patch1 ─┐                    ┌─ enc1 ─┐
//!         ├─ shared encoder ───┤        ├─ [enc1 | enc2 | enc2d | dir3d] ─ 16 ─ 8 ─ 1 ─ sigmoid
//! patch2 ─┘                    └─ enc2 ─┘
//!                       enc_i ─ 6 ─ 3 ─ unit normalize   (auxiliary gaze head, training only)
//! ```
//!
//! The encoder is four 3x3 stride-2 convolutions (8/16/24/32 channels, ReLU),
//! global average pooling, and a linear projection to 12 features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_pair, AugmentConfig, PairSample};
use crate::error::{Error, Result};
use crate::eval::average_precision;
use crate::geometry::{
    focal_from_fov, relative_direction_3d, spatial_encoding_2d, CameraIntrinsics, HeadBox,
    ImageDims, SpatialEncoding, Vec3, DEFAULT_FOV_DEG,
};
use crate::nn::layers::{
    conv2d, conv2d_backward_opt, dense, dense_backward, relu_backward, relu_inplace, sigmoid,
    unit_normalize, unit_normalize_backward, LayerGrads,
};
use crate::nn::loss::{bce_logit_grad, bce_loss, l2_grad, l2_loss};
use crate::nn::{Checkpoint, GradcheckReport, LayerParams, OptimizerState, RmspropConfig, Tensor};

pub const PATCH_SIZE: usize = 64;
pub const ENC_DIM: usize = 12;
pub const MG_INPUT_DIM: usize = 2 * ENC_DIM + SpatialEncoding::DIM;
const CONV_CHANNELS: [usize; 4] = [8, 16, 24, 32];
const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const MG_HIDDEN: [usize; 2] = [16, 8];
const GAZE_HIDDEN: usize = 6;

const LAYER_NAMES: [&str; 10] = [
    "encoder.conv1",
    "encoder.conv2",
    "encoder.conv3",
    "encoder.conv4",
    "encoder.proj",
    "mg_head.fc1",
    "mg_head.fc2",
    "mg_head.fc3",
    "gaze_head.fc1",
    "gaze_head.fc2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub convs: Vec<LayerParams>,
    pub proj: LayerParams,
    pub mg_head: Vec<LayerParams>,
    pub gaze_head: Vec<LayerParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub score: f64,
    pub gaze1: Vec3,
    pub gaze2: Vec3,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    /// `label * (L2(g1, v) + L2(g2, -v)) / 2`, before weighting.
    pub gaze: f64,
    pub lambda: f64,
}

impl ModelParams {
    pub fn init(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = in_channels;
        let convs = CONV_CHANNELS
            .iter()
            .map(|&c| {
                let l = LayerParams::conv2d(c, prev, CONV_KERNEL, &mut rng);
                prev = c;
                l
            })
            .collect();
        let proj = LayerParams::dense(ENC_DIM, prev, &mut rng);
        let mg_head = vec![
            LayerParams::dense(MG_HIDDEN[0], MG_INPUT_DIM, &mut rng),
            LayerParams::dense(MG_HIDDEN[1], MG_HIDDEN[0], &mut rng),
            LayerParams::dense(1, MG_HIDDEN[1], &mut rng),
        ];
        let gaze_head = vec![
            LayerParams::dense(GAZE_HIDDEN, ENC_DIM, &mut rng),
            LayerParams::dense(3, GAZE_HIDDEN, &mut rng),
        ];
        Self {
            convs,
            proj,
            mg_head,
            gaze_head,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].weights.shape()[1]
    }

    pub fn layers(&self) -> Vec<&LayerParams> {
        self.convs
            .iter()
            .chain(std::iter::once(&self.proj))
            .chain(&self.mg_head)
            .chain(&self.gaze_head)
            .collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        self.convs
            .iter_mut()
            .chain(std::iter::once(&mut self.proj))
            .chain(self.mg_head.iter_mut())
            .chain(self.gaze_head.iter_mut())
            .collect()
    }

    /// Weight and bias tensors of every layer, in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers()
            .into_iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(LayerParams::zeros_like).collect(),
            proj: self.proj.zeros_like(),
            mg_head: self.mg_head.iter().map(LayerParams::zeros_like).collect(),
            gaze_head: self.gaze_head.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten_from(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, optimizer: Option<&OptimizerState>) -> Checkpoint {
        Checkpoint {
            layers: LAYER_NAMES
                .iter()
                .zip(self.layers())
                .map(|(n, l)| (n.to_string(), l.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let names: Vec<&str> = ckpt.layers.iter().map(|(n, _)| n.as_str()).collect();
        if names != LAYER_NAMES {
            return Err(Error::Checkpoint(format!("unexpected layers {names:?}")));
        }
        let l: Vec<LayerParams> = ckpt.layers.iter().map(|(_, l)| l.clone()).collect();
        let params = Self {
            convs: l[0..4].to_vec(),
            proj: l[4].clone(),
            mg_head: l[5..8].to_vec(),
            gaze_head: l[8..10].to_vec(),
        };
        let reference = Self::init(params.in_channels(), 0);
        for (a, b) in params.tensors().iter().zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(params)
    }

    /// On/off state of every ReLU in a pair's forward pass, gaze head
    /// included when `lambda * label` is nonzero.
    fn relu_pattern(
        &self,
        sample: &PairSample,
        spatial: &SpatialEncoding,
        lambda: f64,
    ) -> Result<Vec<bool>> {
        let (e1, c1) = self.encode_cached(&sample.patch1)?;
        let (e2, c2) = self.encode_cached(&sample.patch2)?;
        let mut bits: Vec<bool> = c1
            .pre
            .iter()
            .chain(&c2.pre)
            .flat_map(|t| t.data().iter().map(|&x| x > 0.0))
            .collect();
        let mg = self.mg_forward(&mg_input(&e1, &e2, spatial))?;
        let hidden = mg.pre.len() - 1;
        bits.extend(mg.pre[..hidden].iter().flatten().map(|&x| x > 0.0));
        if lambda * f64::from(sample.label) != 0.0 {
            for e in [&e1, &e2] {
                let (c, _) = self.gaze_forward(e)?;
                bits.extend(c.pre.iter().map(|&x| x > 0.0));
            }
        }
        Ok(bits)
    }

    fn check_patch(&self, patch: &Tensor) -> Result<()> {
        let want = [self.in_channels(), PATCH_SIZE, PATCH_SIZE];
        if patch.shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "patch {:?}, expected {want:?}",
                patch.shape()
            )));
        }
        Ok(())
    }

    pub fn encode_head(&self, patch: &Tensor) -> Result<[f64; ENC_DIM]> {
        Ok(self.encode_cached(patch)?.0)
    }

    fn encode_cached(&self, patch: &Tensor) -> Result<([f64; ENC_DIM], EncoderCache)> {
        self.check_patch(patch)?;
        let mut inputs = Vec::with_capacity(CONV_CHANNELS.len());
        let mut pre = Vec::with_capacity(CONV_CHANNELS.len());
        let mut x = patch.clone();
        for conv in &self.convs {
            let y = conv2d(conv, &x, CONV_STRIDE)?;
            let mut a = y.clone();
            relu_inplace(a.data_mut());
            inputs.push(x);
            pre.push(y);
            x = a;
        }
        let ch = x.shape()[0];
        let hw = x.len() / ch;
        let pooled: Vec<f64> = x
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = dense(&self.proj, &pooled)?;
        let mut enc = [0.0; ENC_DIM];
        enc.copy_from_slice(&out);
        Ok((
            enc,
            EncoderCache {
                inputs,
                pre,
                pooled,
            },
        ))
    }

    fn encode_backward(
        &self,
        cache: &EncoderCache,
        d_enc: &[f64],
        grads: &mut ModelParams,
    ) -> Result<()> {
        let g = dense_backward(&self.proj, &cache.pooled, d_enc)?;
        accumulate(&mut grads.proj, &g);
        let d_pooled = g.input.expect("dense yields input grad");
        let last = cache.pre.last().expect("encoder has layers");
        let (ch, hw) = (last.shape()[0], last.len() / last.shape()[0]);
        let mut d = Tensor::zeros(last.shape());
        for (c, chunk) in d.data_mut().chunks_mut(hw).enumerate().take(ch) {
            chunk.fill(d_pooled.data()[c] / hw as f64);
        }
        for i in (0..self.convs.len()).rev() {
            relu_backward(cache.pre[i].data(), d.data_mut());
            let g = conv2d_backward_opt(&self.convs[i], &cache.inputs[i], CONV_STRIDE, &d, i > 0)?;
            accumulate(&mut grads.convs[i], &g);
            if let Some(dx) = g.input {
                d = dx;
            }
        }
        Ok(())
    }

    pub fn predict_mutual_gaze(
        &self,
        enc1: &[f64; ENC_DIM],
        enc2: &[f64; ENC_DIM],
        spatial: &SpatialEncoding,
    ) -> Result<f64> {
        Ok(sigmoid(
            self.mg_forward(&mg_input(enc1, enc2, spatial))?.logit,
        ))
    }

    fn mg_forward(&self, input: &[f64]) -> Result<MlpCache> {
        let mut acts = vec![input.to_vec()];
        let mut pre = Vec::new();
        for (i, layer) in self.mg_head.iter().enumerate() {
            let y = dense(layer, acts.last().expect("nonempty"))?;
            if i + 1 < self.mg_head.len() {
                let mut a = y.clone();
                relu_inplace(&mut a);
                acts.push(a);
            }
            pre.push(y);
        }
        let logit = pre.last().expect("nonempty")[0];
        Ok(MlpCache { acts, pre, logit })
    }

    fn mg_backward(
        &self,
        cache: &MlpCache,
        d_logit: f64,
        grads: &mut ModelParams,
    ) -> Result<Vec<f64>> {
        let mut d = vec![d_logit];
        for i in (0..self.mg_head.len()).rev() {
            if i + 1 < self.mg_head.len() {
                relu_backward(&cache.pre[i], &mut d);
            }
            let g = dense_backward(&self.mg_head[i], &cache.acts[i], &d)?;
            accumulate(&mut grads.mg_head[i], &g);
            d = g.input.expect("dense yields input grad").into_data();
        }
        Ok(d)
    }

    pub fn estimate_gaze(&self, enc: &[f64; ENC_DIM]) -> Result<Vec3> {
        Ok(self.gaze_forward(enc)?.1)
    }

    fn gaze_forward(&self, enc: &[f64; ENC_DIM]) -> Result<(GazeCache, Vec3)> {
        let pre = dense(&self.gaze_head[0], enc)?;
        let mut hidden = pre.clone();
        relu_inplace(&mut hidden);
        let out = dense(&self.gaze_head[1], &hidden)?;
        let raw = [out[0], out[1], out[2]];
        let g = unit_normalize(&raw)?;
        Ok((
            GazeCache {
                input: enc.to_vec(),
                pre,
                hidden,
                raw,
            },
            g,
        ))
    }

    fn gaze_backward(
        &self,
        cache: &GazeCache,
        d_gaze: &Vec3,
        grads: &mut ModelParams,
    ) -> Result<Vec<f64>> {
        let d_raw = unit_normalize_backward(&cache.raw, d_gaze)?;
        let g = dense_backward(&self.gaze_head[1], &cache.hidden, &d_raw)?;
        accumulate(&mut grads.gaze_head[1], &g);
        let mut d = g.input.expect("dense yields input grad").into_data();
        relu_backward(&cache.pre, &mut d);
        let g = dense_backward(&self.gaze_head[0], &cache.input, &d)?;
        accumulate(&mut grads.gaze_head[0], &g);
        Ok(g.input.expect("dense yields input grad").into_data())
    }

    /// Full forward pass of one pair, including both gaze estimates.
    pub fn predict_pair(
        &self,
        patch1: &Tensor,
        patch2: &Tensor,
        spatial: &SpatialEncoding,
    ) -> Result<PairPrediction> {
        let e1 = self.encode_head(patch1)?;
        let e2 = self.encode_head(patch2)?;
        Ok(PairPrediction {
            score: self.predict_mutual_gaze(&e1, &e2, spatial)?,
            gaze1: self.estimate_gaze(&e1)?,
            gaze2: self.estimate_gaze(&e2)?,
        })
    }

    /// Forward and backward for one pair. Gradients of `scale * L` are added
    /// into `grads`; the gaze branch is skipped entirely when its weight
    /// `lambda * label` is zero.
    #[allow(clippy::too_many_arguments)]
    pub fn pair_gradients(
        &self,
        patch1: &Tensor,
        patch2: &Tensor,
        spatial: &SpatialEncoding,
        label: u8,
        target: Option<Vec3>,
        lambda: f64,
        scale: f64,
        grads: &mut ModelParams,
    ) -> Result<LossBreakdown> {
        check_label(label)?;
        let (e1, c1) = self.encode_cached(patch1)?;
        let (e2, c2) = self.encode_cached(patch2)?;
        let mg = self.mg_forward(&mg_input(&e1, &e2, spatial))?;
        let score = sigmoid(mg.logit);
        let bce = bce_loss(score, label);

        let d_in = self.mg_backward(&mg, scale * bce_logit_grad(score, label), grads)?;
        let mut d1 = d_in[..ENC_DIM].to_vec();
        let mut d2 = d_in[ENC_DIM..2 * ENC_DIM].to_vec();

        let weight = lambda * f64::from(label);
        let mut gaze = 0.0;
        if weight != 0.0 {
            let v = target.ok_or(Error::MissingPseudoLabel)?;
            let nv = [-v[0], -v[1], -v[2]];
            let (gc1, g1) = self.gaze_forward(&e1)?;
            let (gc2, g2) = self.gaze_forward(&e2)?;
            gaze = (l2_loss(&g1, &v) + l2_loss(&g2, &nv)) / 2.0;
            let k = scale * weight / 2.0;
            let dg1 = l2_grad(&g1, &v).map(|x| x * k);
            let dg2 = l2_grad(&g2, &nv).map(|x| x * k);
            for (a, b) in d1.iter_mut().zip(self.gaze_backward(&gc1, &dg1, grads)?) {
                *a += b;
            }
            for (a, b) in d2.iter_mut().zip(self.gaze_backward(&gc2, &dg2, grads)?) {
                *a += b;
            }
        }
        self.encode_backward(&c1, &d1, grads)?;
        self.encode_backward(&c2, &d2, grads)?;
        Ok(LossBreakdown {
            total: bce + lambda * gaze,
            bce,
            gaze,
            lambda,
        })
    }

    /// Loss of one pair without gradients; the gaze head only runs when its
    /// weight is nonzero.
    pub fn pair_loss(
        &self,
        patch1: &Tensor,
        patch2: &Tensor,
        spatial: &SpatialEncoding,
        label: u8,
        target: Option<Vec3>,
        lambda: f64,
    ) -> Result<LossBreakdown> {
        check_label(label)?;
        let e1 = self.encode_head(patch1)?;
        let e2 = self.encode_head(patch2)?;
        let score = self.predict_mutual_gaze(&e1, &e2, spatial)?;
        if lambda * f64::from(label) == 0.0 {
            let bce = bce_loss(score, label);
            return Ok(LossBreakdown {
                total: bce,
                bce,
                gaze: 0.0,
                lambda,
            });
        }
        let pred = PairPrediction {
            score,
            gaze1: self.estimate_gaze(&e1)?,
            gaze2: self.estimate_gaze(&e2)?,
        };
        combined_loss(&pred, label, target, lambda)
    }
}

struct EncoderCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    pooled: Vec<f64>,
}

struct MlpCache {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    logit: f64,
}

struct GazeCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    raw: Vec3,
}

fn accumulate(dst: &mut LayerParams, g: &LayerGrads) {
    dst.weights
        .add_scaled(&g.weights, 1.0)
        .expect("gradient shape matches layer");
    dst.bias
        .add_scaled(&g.bias, 1.0)
        .expect("gradient shape matches layer");
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::InvalidValue(format!("label {label} is not 0/1")));
    }
    Ok(())
}

/// `[enc1 | enc2 | enc2d | dir3d]`.
pub fn mg_input(enc1: &[f64; ENC_DIM], enc2: &[f64; ENC_DIM], s: &SpatialEncoding) -> Vec<f64> {
    let mut v = Vec::with_capacity(MG_INPUT_DIM);
    v.extend_from_slice(enc1);
    v.extend_from_slice(enc2);
    v.extend_from_slice(&s.enc2d);
    v.extend_from_slice(&s.dir3d);
    v
}

/// `bce(score, l) + lambda * l * (L2(g1, v) + L2(g2, -v)) / 2`.
pub fn combined_loss(
    pred: &PairPrediction,
    label: u8,
    v: Option<Vec3>,
    lambda: f64,
) -> Result<LossBreakdown> {
    check_label(label)?;
    let bce = bce_loss(pred.score, label);
    let gaze = if label == 1 {
        let v = v.ok_or(Error::MissingPseudoLabel)?;
        (l2_loss(&pred.gaze1, &v) + l2_loss(&pred.gaze2, &[-v[0], -v[1], -v[2]])) / 2.0
    } else {
        0.0
    };
    Ok(LossBreakdown {
        total: bce + lambda * gaze,
        bce,
        gaze,
        lambda,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: u64,
    pub epochs: usize,
    pub seed: u64,
    pub in_channels: usize,
    pub aux_gaze: bool,
    pub use_3d_encoding: bool,
    pub fov_deg: f64,
    pub augment: AugmentConfig,
    /// Run validation every this many epochs (0 disables).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            batch_size: 128,
            lr: 5e-4,
            lr_decay: 0.94,
            decay_every: 2000,
            epochs: 10,
            seed: 0,
            in_channels: 3,
            aux_gaze: true,
            use_3d_encoding: true,
            fov_deg: DEFAULT_FOV_DEG,
            augment: AugmentConfig::default(),
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {}", self.lambda));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::OutOfRangeFov(self.fov_deg));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        OptimizerState::new(self.rmsprop(), std::iter::empty::<&Tensor>())?;
        Ok(())
    }

    /// Weight actually applied to the gaze term.
    pub fn effective_lambda(&self) -> f64 {
        if self.aux_gaze {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn rmsprop(&self) -> RmspropConfig {
        RmspropConfig {
            base_lr: self.lr,
            decay_factor: self.lr_decay,
            decay_every: self.decay_every,
            ..RmspropConfig::default()
        }
    }

    /// Optimizer steps per epoch: `floor(n / batch)`, at least one.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        (n / self.batch_size).max(1)
    }
}

/// Spatial features for a training or inference pair. Degenerate geometry
/// gives a zero direction; `use_3d = false` zeroes it as well.
pub fn pair_spatial(
    b1: &HeadBox,
    b2: &HeadBox,
    dims: ImageDims,
    cam: &CameraIntrinsics,
    use_3d: bool,
) -> Result<(SpatialEncoding, Option<Vec3>)> {
    let enc2d = spatial_encoding_2d(b1, b2, dims);
    let v = match relative_direction_3d(b1, b2, dims, cam) {
        Ok(v) => Some(v),
        Err(Error::DegenerateGeometry(_)) => None,
        Err(e) => return Err(e),
    };
    let dir3d = if use_3d {
        v.unwrap_or([0.0; 3])
    } else {
        [0.0; 3]
    };
    Ok((SpatialEncoding { enc2d, dir3d }, v))
}

/// Mean gradient and loss over a batch, accumulated in sample order.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[PairSample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grads = params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let lambda = cfg.effective_lambda();
    let mut mean = LossBreakdown {
        lambda,
        ..Default::default()
    };
    for (i, s) in batch.iter().enumerate() {
        let cam = focal_from_fov(s.dims, cfg.fov_deg)?;
        let (spatial, v) = pair_spatial(&s.box1, &s.box2, s.dims, &cam, cfg.use_3d_encoding)?;
        if s.label == 1 && v.is_none() {
            return Err(Error::DegeneratePositive(i));
        }
        let l = params.pair_gradients(
            &s.patch1, &s.patch2, &spatial, s.label, v, lambda, scale, &mut grads,
        )?;
        mean.total += l.total * scale;
        mean.bce += l.bce * scale;
        mean.gaze += l.gaze * scale;
    }
    Ok((grads, mean))
}

/// One optimizer step on a batch. Returns the mean loss and the learning rate used.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &[PairSample],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, f64)> {
    let (grads, loss) = batch_gradients(params, batch, cfg)?;
    for t in grads.tensors() {
        t.ensure_finite("gradient")?;
    }
    let lr = opt.step(&mut params.tensors_mut(), &grads.tensors())?;
    Ok((loss, lr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub bce: f64,
    pub gaze: f64,
    pub total: f64,
    #[serde(rename = "val_AP")]
    pub val_ap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub log: Vec<StepLog>,
}

const STREAM_DATA: u64 = 1;

/// Train from scratch; the run is a pure function of the data and `cfg`.
pub fn train(
    train_set: &[PairSample],
    val_set: &[PairSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = ModelParams::init(cfg.in_channels, cfg.seed);
    let mut opt = OptimizerState::new(cfg.rmsprop(), params.tensors())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_DATA);

    let steps = cfg.steps_per_epoch(train_set.len());
    let bs = cfg.batch_size.min(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(steps * cfg.epochs);
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(bs).take(steps) {
            let batch: Vec<PairSample> = chunk
                .iter()
                .map(|&i| augment_pair(&train_set[i], &cfg.augment, &mut rng))
                .collect();
            let (loss, lr) = train_step(&mut params, &mut opt, &batch, cfg)?;
            log.push(StepLog {
                step: opt.step_count,
                epoch,
                lr,
                bce: loss.bce,
                gaze: loss.gaze,
                total: loss.total,
                val_ap: None,
            });
        }
        if cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0 && !val_set.is_empty() {
            let scores = predict_scores(&params, val_set, cfg)?;
            let labels: Vec<u8> = val_set.iter().map(|s| s.label).collect();
            let ap = average_precision(&scores, &labels).ok().map(|c| c.ap);
            if let Some(last) = log.last_mut() {
                last.val_ap = ap;
            }
            log::debug!("epoch {epoch}: val AP {ap:?}");
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        log,
    })
}

/// Mutual-gaze scores for a list of pairs, without augmentation.
pub fn predict_scores(
    params: &ModelParams,
    samples: &[PairSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let cam = focal_from_fov(s.dims, cfg.fov_deg)?;
            infer_pair_with(
                params,
                &s.patch1,
                &s.patch2,
                &s.box1,
                &s.box2,
                s.dims,
                &cam,
                cfg.use_3d_encoding,
            )
        })
        .collect()
}

/// Mutual-gaze score of a single pair. The gaze head is not evaluated and
/// degenerate geometry falls back to a zero direction.
pub fn infer_pair(
    params: &ModelParams,
    patch1: &Tensor,
    patch2: &Tensor,
    b1: &HeadBox,
    b2: &HeadBox,
    dims: ImageDims,
    cam: &CameraIntrinsics,
) -> Result<f64> {
    infer_pair_with(params, patch1, patch2, b1, b2, dims, cam, true)
}

#[allow(clippy::too_many_arguments)]
pub fn infer_pair_with(
    params: &ModelParams,
    patch1: &Tensor,
    patch2: &Tensor,
    b1: &HeadBox,
    b2: &HeadBox,
    dims: ImageDims,
    cam: &CameraIntrinsics,
    use_3d: bool,
) -> Result<f64> {
    let (spatial, _) = pair_spatial(b1, b2, dims, cam, use_3d)?;
    let e1 = params.encode_head(patch1)?;
    let e2 = params.encode_head(patch2)?;
    params.predict_mutual_gaze(&e1, &e2, &spatial)
}

/// A parameter point for gradient checks: the usual initialization with
/// biases drawn from `U(-0.2, 0.2)`. With zero biases the encodings of flat
/// synthetic patches are tiny and the normalized gaze output sits next to its
/// singularity at the origin, where central differences are meaningless.
pub fn gradcheck_params(in_channels: usize, seed: u64) -> ModelParams {
    use rand::Rng;
    let mut p = ModelParams::init(in_channels, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    for l in p.layers_mut() {
        for b in l.bias.data_mut() {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    p
}

/// Finite-difference check of the full pair loss `bce + lambda * gaze` against
/// [`ModelParams::pair_gradients`]. Every projection and head parameter is
/// compared, plus `conv_samples` random coordinates of each convolution
/// tensor (all of them when it has fewer). Coordinates whose perturbation
/// flips any ReLU are skipped: central differences straddle the kink there.
pub fn gradcheck_pair(
    params: &ModelParams,
    sample: &PairSample,
    cfg: &TrainConfig,
    conv_samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let cam = focal_from_fov(sample.dims, cfg.fov_deg)?;
    let (spatial, v) = pair_spatial(
        &sample.box1,
        &sample.box2,
        sample.dims,
        &cam,
        cfg.use_3d_encoding,
    )?;
    let lambda = cfg.effective_lambda();
    let mut grads = params.zeros_like();
    params.pair_gradients(
        &sample.patch1,
        &sample.patch2,
        &spatial,
        sample.label,
        v,
        lambda,
        1.0,
        &mut grads,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv_tensors = 2 * params.convs.len();
    let mut indices = Vec::new();
    let mut off = 0;
    for (i, t) in params.tensors().into_iter().enumerate() {
        let n = t.len();
        if i < conv_tensors && n > conv_samples {
            let mut pick = rand::seq::index::sample(&mut rng, n, conv_samples).into_vec();
            pick.sort_unstable();
            indices.extend(pick.into_iter().map(|j| off + j));
        } else {
            indices.extend(off..off + n);
        }
        off += n;
    }

    let theta = params.flatten();
    let analytic = grads.flatten();
    let base_pattern = params.relu_pattern(sample, &spatial, lambda)?;
    let mut work = params.clone();
    let mut shifted = theta.clone();
    let mut eval = |theta: &[f64]| -> Result<(f64, Vec<bool>)> {
        work.unflatten_from(theta)?;
        let l = work.pair_loss(
            &sample.patch1,
            &sample.patch2,
            &spatial,
            sample.label,
            v,
            lambda,
        )?;
        Ok((l.total, work.relu_pattern(sample, &spatial, lambda)?))
    };
    let mut report = GradcheckReport::default();
    for &i in &indices {
        shifted[i] = theta[i] + step;
        let (up, up_pattern) = eval(&shifted)?;
        shifted[i] = theta[i] - step;
        let (down, down_pattern) = eval(&shifted)?;
        shifted[i] = theta[i];
        if up_pattern != base_pattern || down_pattern != base_pattern {
            report.skipped += 1;
            continue;
        }
        report.record(i, analytic[i], (up - down) / (2.0 * step));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate_scene, SyntheticSceneConfig};

    fn sample(label: u8, seed: u64) -> PairSample {
        let cfg = SyntheticSceneConfig::default();
        synth_generate_scene(&cfg, label, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            in_channels: 1,
            batch_size: 4,
            epochs: 2,
            augment: AugmentConfig::none(),
            ..Default::default()
        }
    }

    fn spatial_of(s: &PairSample) -> (SpatialEncoding, Option<Vec3>) {
        let cam = focal_from_fov(s.dims, 53.0).unwrap();
        pair_spatial(&s.box1, &s.box2, s.dims, &cam, true).unwrap()
    }

    #[test]
    fn zero_weights_score_one_half() {
        let p = ModelParams::init(1, 0).zeros_like();
        let s = sample(1, 1);
        let (sp, _) = spatial_of(&s);
        let (e1, e2) = (
            p.encode_head(&s.patch1).unwrap(),
            p.encode_head(&s.patch2).unwrap(),
        );
        assert_eq!(e1, [0.0; ENC_DIM]);
        assert_eq!(p.predict_mutual_gaze(&e1, &e2, &sp).unwrap(), 0.5);
        // The gaze head has nothing to normalize.
        assert!(matches!(p.estimate_gaze(&e1), Err(Error::NearZeroNorm(_))));
    }

    #[test]
    fn layout_and_checkpoint_round_trip() {
        let p = ModelParams::init(3, 9);
        assert_eq!(p.in_channels(), 3);
        assert_eq!(p.mg_head[0].weights.shape(), &[16, MG_INPUT_DIM]);
        assert_eq!(p.gaze_head[1].weights.shape(), &[3, 6]);
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_params());
        let back = ModelParams::from_checkpoint(&p.to_checkpoint(None)).unwrap();
        assert_eq!(back, p);
        let mut q = p.zeros_like();
        q.unflatten_from(&flat).unwrap();
        assert_eq!(q, p);
        assert!(q.unflatten_from(&flat[1..]).is_err());
    }

    #[test]
    fn wrong_patch_shape_is_rejected() {
        let p = ModelParams::init(3, 0);
        let s = sample(0, 2);
        assert!(matches!(
            p.encode_head(&s.patch1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn negatives_leave_gaze_head_untouched() {
        let p = ModelParams::init(1, 3);
        let batch: Vec<PairSample> = (0..4).map(|i| sample(0, 10 + i)).collect();
        let (g, loss) = batch_gradients(&p, &batch, &cfg()).unwrap();
        assert_eq!(loss.gaze, 0.0);
        for l in &g.gaze_head {
            assert!(l
                .weights
                .data()
                .iter()
                .chain(l.bias.data())
                .all(|&x| x == 0.0));
        }
        assert!(g.mg_head[0].weights.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn positive_without_target_is_an_error() {
        let p = ModelParams::init(1, 3);
        let s = sample(1, 4);
        let (sp, _) = spatial_of(&s);
        let mut g = p.zeros_like();
        let r = p.pair_gradients(&s.patch1, &s.patch2, &sp, 1, None, 1.0, 1.0, &mut g);
        assert!(matches!(r, Err(Error::MissingPseudoLabel)));
        // With the gaze term switched off no target is needed.
        assert!(p
            .pair_gradients(&s.patch1, &s.patch2, &sp, 1, None, 0.0, 1.0, &mut g)
            .is_ok());
    }

    #[test]
    fn loss_is_affine_in_lambda() {
        let p = ModelParams::init(1, 5);
        let s = sample(1, 5);
        let (sp, v) = spatial_of(&s);
        let l = |lam| p.pair_loss(&s.patch1, &s.patch2, &sp, 1, v, lam).unwrap();
        let (a, b, c) = (l(0.0), l(1.0), l(2.5));
        assert_eq!(a.bce, b.bce);
        assert!(b.gaze > 0.0);
        assert!((c.total - (a.total + 2.5 * b.gaze)).abs() < 1e-12);
    }

    #[test]
    fn gaze_loss_reaches_the_shared_encoder() {
        let p = ModelParams::init(1, 6);
        let s = sample(1, 6);
        let (sp, v) = spatial_of(&s);
        let grads = |lam| {
            let mut g = p.zeros_like();
            p.pair_gradients(&s.patch1, &s.patch2, &sp, 1, v, lam, 1.0, &mut g)
                .unwrap();
            g
        };
        let (off, on) = (grads(0.0), grads(1.0));
        assert_ne!(off.convs[0].weights, on.convs[0].weights);
        assert_eq!(off.mg_head, on.mg_head);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let p = gradcheck_params(1, 7);
        for (label, seed) in [(1, 20), (0, 21)] {
            let s = sample(label, seed);
            let r = gradcheck_pair(&p, &s, &cfg(), 16, 1e-5, seed).unwrap();
            assert!(r.checked > 100 && r.skipped < r.checked / 10, "{r:?}");
            assert!(r.max_rel_error < 1e-3, "label {label}: {r:?}");
        }
    }

    #[test]
    fn small_step_descends() {
        let mut p = ModelParams::init(1, 8);
        let batch: Vec<PairSample> = (0..4).map(|i| sample((i % 2) as u8, 30 + i)).collect();
        let c = TrainConfig { lr: 1e-5, ..cfg() };
        let before = batch_gradients(&p, &batch, &c).unwrap().1.total;
        let mut opt = OptimizerState::new(c.rmsprop(), p.tensors()).unwrap();
        train_step(&mut p, &mut opt, &batch, &c).unwrap();
        let after = batch_gradients(&p, &batch, &c).unwrap().1.total;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn lambda_zero_matches_aux_off_and_runs_repeat() {
        let data: Vec<PairSample> = (0..8).map(|i| sample((i % 2) as u8, 40 + i)).collect();
        let a = train(
            &data,
            &[],
            &TrainConfig {
                lambda: 0.0,
                ..cfg()
            },
        )
        .unwrap();
        let b = train(
            &data,
            &[],
            &TrainConfig {
                aux_gaze: false,
                ..cfg()
            },
        )
        .unwrap();
        assert_eq!(a.params, b.params);
        let c = train(&data, &[], &cfg()).unwrap();
        let d = train(&data, &[], &cfg()).unwrap();
        assert_eq!(c.params, d.params);
        assert_ne!(a.params, c.params);
        assert_eq!(c.log.len(), 4);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig {
            batch_size: 0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            fov_deg: 180.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lambda: -1.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { lr: 0.0, ..cfg() }.validate().is_err());
        assert_eq!(
            TrainConfig {
                aux_gaze: false,
                ..cfg()
            }
            .effective_lambda(),
            0.0
        );
        assert_eq!(cfg().steps_per_epoch(9), 2);
        assert_eq!(cfg().steps_per_epoch(3), 1);
    }
}
