//! Layer forward passes with explicit backward functions.
//!
//! Convolutions are lowered to a matrix product over an im2col buffer and
//! use symmetric zero padding of `(k - 1) / 2`, which for odd kernels gives
//! `ceil(H / stride)` output rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Guard below which a vector is considered too short to normalize.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients of a layer with respect to its weights, bias and input.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
    pub input: Option<Tensor>,
}

impl LayerParams {
    pub fn conv2d(out_ch: usize, in_ch: usize, k: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * k * k;
        let fan_out = out_ch * k * k;
        Self {
            kind: LayerKind::Conv2d,
            weights: glorot(&[out_ch, in_ch, k, k], fan_in, fan_out, rng),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn dense(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            kind: LayerKind::Dense,
            weights: glorot(&[out_dim, in_dim], in_dim, out_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weights.shape();
        let ok = match self.kind {
            LayerKind::Conv2d => ws.len() == 4 && ws[2] == ws[3] && ws[2] % 2 == 1,
            LayerKind::Dense => ws.len() == 2,
        };
        if !ok || self.bias.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch(format!(
                "{:?} layer with weights {:?} and bias {:?}",
                self.kind,
                ws,
                self.bias.shape()
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            weights: self.weights.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// `c = a' * b' + beta * c`, where `a'` is `m x k` and `b'` is `k x n`,
/// each optionally read transposed from row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths were checked against the dimensions above and the
    // strides describe dense row-major (or transposed) layouts of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    pad: usize,
    stride: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(params: &LayerParams, input: &Tensor, stride: usize) -> Result<Self> {
        if params.kind != LayerKind::Conv2d {
            return Err(Error::ShapeMismatch("conv2d needs conv2d params".into()));
        }
        params.validate()?;
        let ws = params.weights.shape();
        let is = input.shape();
        if stride == 0 {
            return Err(Error::ShapeMismatch("stride must be >= 1".into()));
        }
        if is.len() != 3 || is[0] != ws[1] {
            return Err(Error::ShapeMismatch(format!(
                "conv input {is:?} for weights {ws:?}"
            )));
        }
        let k = ws[2];
        let pad = (k - 1) / 2;
        if is[1] + 2 * pad < k || is[2] + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!(
                "kernel {k} does not fit input {is:?}"
            )));
        }
        Ok(Self {
            in_ch: is[0],
            out_ch: ws[0],
            k,
            pad,
            stride,
            h: is[1],
            w: is[2],
            oh: is[1].div_ceil(stride),
            ow: is[2].div_ceil(stride),
        })
    }

    fn rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visit every (row, col, input index) triple of the im2col matrix that
    /// lands inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.cols();
        for c in 0..self.in_ch {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * p + oy * self.ow + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.cols()];
        self.for_each_tap(|ci, ii| cols[ci] = input[ii]);
        cols
    }
}

pub fn conv2d(params: &LayerParams, input: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvGeom::new(params, input, stride)?;
    input.ensure_finite("conv2d input")?;
    let cols = g.im2col(input.data());
    let p = g.cols();
    let mut out = vec![0.0; g.out_ch * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(params.bias.data()[o]);
    }
    gemm(
        g.out_ch,
        g.rows(),
        p,
        params.weights.data(),
        false,
        &cols,
        false,
        1.0,
        &mut out,
    );
    Tensor::new(vec![g.out_ch, g.oh, g.ow], out)
}

pub fn conv2d_backward(
    params: &LayerParams,
    input: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<LayerGrads> {
    conv2d_backward_opt(params, input, stride, grad_out, true)
}

pub(crate) fn conv2d_backward_opt(
    params: &LayerParams,
    input: &Tensor,
    stride: usize,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<LayerGrads> {
    let g = ConvGeom::new(params, input, stride)?;
    if grad_out.shape() != [g.out_ch, g.oh, g.ow] {
        return Err(Error::ShapeMismatch(format!(
            "conv grad {:?}, expected {:?}",
            grad_out.shape(),
            [g.out_ch, g.oh, g.ow]
        )));
    }
    let p = g.cols();
    let cols = g.im2col(input.data());
    let dy = grad_out.data();

    let mut dw = vec![0.0; g.out_ch * g.rows()];
    gemm(g.out_ch, p, g.rows(), dy, false, &cols, true, 0.0, &mut dw);
    let db = dy.chunks(p).map(|r| r.iter().sum()).collect();

    let dx = if want_input {
        let mut dcols = vec![0.0; g.rows() * p];
        gemm(
            g.rows(),
            g.out_ch,
            p,
            params.weights.data(),
            true,
            dy,
            false,
            0.0,
            &mut dcols,
        );
        let mut dx = vec![0.0; input.len()];
        g.for_each_tap(|ci, ii| dx[ii] += dcols[ci]);
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };

    Ok(LayerGrads {
        weights: Tensor::new(params.weights.shape().to_vec(), dw)?,
        bias: Tensor::from_vec(db),
        input: dx,
    })
}

fn dense_dims(params: &LayerParams, in_len: usize) -> Result<(usize, usize)> {
    if params.kind != LayerKind::Dense {
        return Err(Error::ShapeMismatch("dense needs dense params".into()));
    }
    params.validate()?;
    let ws = params.weights.shape();
    if ws[1] != in_len {
        return Err(Error::ShapeMismatch(format!(
            "dense layer {ws:?} got input of length {in_len}"
        )));
    }
    Ok((ws[0], ws[1]))
}

pub fn dense(params: &LayerParams, input: &[f64]) -> Result<Vec<f64>> {
    let (out_dim, in_dim) = dense_dims(params, input.len())?;
    if !input.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("dense input"));
    }
    let w = params.weights.data();
    Ok((0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            params.bias.data()[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect())
}

pub fn dense_backward(params: &LayerParams, input: &[f64], grad_out: &[f64]) -> Result<LayerGrads> {
    let (out_dim, in_dim) = dense_dims(params, input.len())?;
    if grad_out.len() != out_dim {
        return Err(Error::ShapeMismatch(format!(
            "dense grad of length {}, expected {out_dim}",
            grad_out.len()
        )));
    }
    let w = params.weights.data();
    let mut dw = vec![0.0; out_dim * in_dim];
    let mut dx = vec![0.0; in_dim];
    for (o, &g) in grad_out.iter().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            drow[i] = g * input[i];
            dx[i] += g * row[i];
        }
    }
    Ok(LayerGrads {
        weights: Tensor::new(vec![out_dim, in_dim], dw)?,
        bias: Tensor::from_vec(grad_out.to_vec()),
        input: Some(Tensor::from_vec(dx)),
    })
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// ReLU derivative, taking 0 at the kink.
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn relu_inplace(xs: &mut [f64]) {
    xs.iter_mut().for_each(|v| *v = relu(*v));
}

/// Zero the upstream gradient wherever the pre-activation was not positive.
pub fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, x) in grad.iter_mut().zip(pre) {
        *g *= relu_grad(*x);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub fn unit_normalize(x: &[f64; 3]) -> Result<[f64; 3]> {
    let n = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    if !(n >= NORM_EPS) {
        return Err(Error::NearZeroNorm(n));
    }
    Ok([x[0] / n, x[1] / n, x[2] / n])
}

/// Vector-Jacobian product of `x / |x|`: `(g - y (y . g)) / |x|` with `y = x / |x|`.
pub fn unit_normalize_backward(x: &[f64; 3], grad: &[f64; 3]) -> Result<[f64; 3]> {
    let y = unit_normalize(x)?;
    let n = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    let yg = y[0] * grad[0] + y[1] * grad[1] + y[2] * grad[2];
    Ok([
        (grad[0] - y[0] * yg) / n,
        (grad[1] - y[1] * yg) / n,
        (grad[2] - y[2] * yg) / n,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::central_difference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        if a.abs() + b.abs() <= 1e-8 {
            0.0
        } else {
            (a - b).abs() / (a.abs() + b.abs())
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 5, 7], &mut rng);
        let p = LayerParams {
            kind: LayerKind::Conv2d,
            weights: Tensor::filled(&[1, 1, 1, 1], 1.0),
            bias: Tensor::zeros(&[1]),
        };
        let y = conv2d(&p, &x, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = LayerParams::conv2d(3, 2, 3, &mut rng);
        p.bias = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let y = conv2d(&p, &Tensor::zeros(&[2, 6, 6]), 2).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        for (o, chunk) in y.data().chunks(9).enumerate() {
            assert!(chunk.iter().all(|&v| v == p.bias.data()[o]));
        }
    }

    #[test]
    fn conv_output_geometry_is_ceil() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LayerParams::conv2d(2, 1, 3, &mut rng);
        for (h, s, e) in [(64, 2, 32), (5, 2, 3), (7, 3, 3), (4, 1, 4)] {
            let y = conv2d(&p, &Tensor::zeros(&[1, h, h]), s).unwrap();
            assert_eq!(y.shape(), &[2, e, e]);
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = LayerParams::conv2d(2, 3, 3, &mut rng);
        let x = rand_tensor(&[3, 6, 5], &mut rng);
        let y = conv2d(&p, &x, 2).unwrap();
        let w = p.weights.data();
        for o in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..6).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w[((o * 3 + c) * 3 + ky) * 3 + kx]
                                        * x.data()[(c * 6 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(o * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LayerParams::conv2d(2, 3, 3, &mut rng);
        assert!(matches!(
            conv2d(&p, &Tensor::zeros(&[2, 4, 4]), 1),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(conv2d(&p, &Tensor::zeros(&[3, 4, 4]), 0).is_err());
        let mut bad = Tensor::zeros(&[3, 4, 4]);
        bad.data_mut()[0] = f64::NAN;
        assert!(matches!(conv2d(&p, &bad, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = LayerParams::conv2d(2, 1, 3, &mut rng);
        let x = rand_tensor(&[1, 5, 5], &mut rng);
        let up = rand_tensor(&[2, 3, 3], &mut rng);
        let loss = |p: &LayerParams, x: &Tensor| -> f64 {
            conv2d(p, x, 2)
                .unwrap()
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = conv2d_backward(&p, &x, 2, &up).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.weights.len() {
            let num = central_difference(
                |d| {
                    let mut q = p.clone();
                    q.weights.data_mut()[i] += d;
                    loss(&q, &x)
                },
                h,
            );
            worst = worst.max(rel_err(num, g.weights.data()[i]));
        }
        for i in 0..2 {
            let num = central_difference(
                |d| {
                    let mut q = p.clone();
                    q.bias.data_mut()[i] += d;
                    loss(&q, &x)
                },
                h,
            );
            worst = worst.max(rel_err(num, g.bias.data()[i]));
        }
        let gx = g.input.unwrap();
        for i in 0..x.len() {
            let num = central_difference(
                |d| {
                    let mut y = x.clone();
                    y.data_mut()[i] += d;
                    loss(&p, &y)
                },
                h,
            );
            worst = worst.max(rel_err(num, gx.data()[i]));
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn dense_identity_and_bias() {
        let p = LayerParams {
            kind: LayerKind::Dense,
            weights: Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
            bias: Tensor::zeros(&[3]),
        };
        assert_eq!(dense(&p, &[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
        let mut q = p.clone();
        q.bias = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        assert_eq!(dense(&q, &[0.0; 3]).unwrap(), vec![0.1, 0.2, 0.3]);
        assert!(matches!(dense(&p, &[1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = LayerParams::dense(3, 4, &mut rng);
        p.bias = rand_tensor(&[3], &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = [0.3, -1.2, 0.7];
        let loss = |p: &LayerParams, x: &[f64]| -> f64 {
            dense(p, x)
                .unwrap()
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = dense_backward(&p, &x, &up).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..12 {
            let num = central_difference(
                |d| {
                    let mut q = p.clone();
                    q.weights.data_mut()[i] += d;
                    loss(&q, &x)
                },
                1e-5,
            );
            worst = worst.max(rel_err(num, g.weights.data()[i]));
        }
        let gx = g.input.unwrap();
        for i in 0..4 {
            let num = central_difference(
                |d| {
                    let mut y = x.clone();
                    y[i] += d;
                    loss(&p, &y)
                },
                1e-5,
            );
            worst = worst.max(rel_err(num, gx.data()[i]));
        }
        assert_eq!(g.bias.data(), &up);
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn activations() {
        assert_eq!(relu(-2.0), 0.0);
        assert_eq!(relu(3.0), 3.0);
        assert_eq!(relu_grad(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid_grad(0.0), 0.25);
        let num = central_difference(sigmoid, 1e-5);
        assert!((num - 0.25).abs() < 1e-10);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(unit_normalize(&[3.0, 4.0, 0.0]).unwrap(), [0.6, 0.8, 0.0]);
        let u = [0.0, 0.6, 0.8];
        assert_eq!(unit_normalize(&u).unwrap(), u);
        assert!(matches!(
            unit_normalize(&[0.0, 0.0, 1e-9]),
            Err(Error::NearZeroNorm(_))
        ));
    }

    #[test]
    fn normalize_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let raw: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
        let x = [raw[0] * 0.5 / n, raw[1] * 0.5 / n, raw[2] * 0.5 / n];
        for out in 0..3 {
            let mut e = [0.0; 3];
            e[out] = 1.0;
            let row = unit_normalize_backward(&x, &e).unwrap();
            for i in 0..3 {
                let num = central_difference(
                    |d| {
                        let mut y = x;
                        y[i] += d;
                        unit_normalize(&y).unwrap()[out]
                    },
                    1e-5,
                );
                assert!(rel_err(num, row[i]) < 1e-5);
            }
        }
    }
}
