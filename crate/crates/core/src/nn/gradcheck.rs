//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv2d, conv2d_backward, dense, dense_backward, relu, relu_grad, sigmoid, unit_normalize,
    unit_normalize_backward, LayerParams,
};
use super::loss::{bce_logit_grad, bce_loss, l2_grad, l2_loss};
use super::tensor::Tensor;

/// Coordinates whose analytic and numeric magnitudes sum below this are skipped.
pub const GRAD_FLOOR: f64 = 1e-8;

/// `(f(h) - f(-h)) / 2h` for a scalar perturbation.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Coordinate index of the worst error, if any coordinate was compared.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates left out because the perturbation crossed a kink.
    pub skipped: usize,
}

impl GradcheckReport {
    /// Fold one compared coordinate into the report.
    pub fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        if let Some(e) = relative_error(analytic, numeric) {
            self.checked += 1;
            if self.worst_index.is_none() || e > self.max_rel_error {
                self.max_rel_error = e;
                self.worst_index = Some(index);
            }
        }
    }
}

/// `|a - n| / max(|a|, |n|)`, or `None` when both are below [`GRAD_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    if analytic.abs() + numeric.abs() <= GRAD_FLOOR {
        return None;
    }
    Some((analytic - numeric).abs() / analytic.abs().max(numeric.abs()))
}

/// Compare an analytic gradient against central differences of `loss` at
/// `theta`, over the coordinates listed in `indices` (all when `None`).
pub fn finite_diff_gradcheck(
    mut loss: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    step: f64,
    indices: Option<&[usize]>,
) -> GradcheckReport {
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(theta.len(), analytic.len());
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut work = theta.to_vec();
    let mut report = GradcheckReport::default();
    for &i in idx {
        let orig = work[i];
        work[i] = orig + step;
        let up = loss(&work);
        work[i] = orig - step;
        let down = loss(&work);
        work[i] = orig;
        report.record(i, analytic[i], (up - down) / (2.0 * step));
    }
    report
}

fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_case(stride: usize, rng: &mut ChaCha8Rng, step: f64) -> GradcheckReport {
    let (out_ch, in_ch, h, w) = (3, 2, 7, 6);
    let mut p = LayerParams::conv2d(out_ch, in_ch, 3, rng);
    p.bias = Tensor::from_vec(uniform(out_ch, rng));
    let x = Tensor::new(vec![in_ch, h, w], uniform(in_ch * h * w, rng)).expect("shape");
    let y = conv2d(&p, &x, stride).expect("valid conv");
    let up = Tensor::new(y.shape().to_vec(), uniform(y.len(), rng)).expect("shape");
    let g = conv2d_backward(&p, &x, stride, &up).expect("valid conv");
    let (nw, nb) = (p.weights.len(), p.bias.len());
    let theta = [p.weights.data(), p.bias.data(), x.data()].concat();
    let analytic = [
        g.weights.data(),
        g.bias.data(),
        g.input.as_ref().expect("input grad").data(),
    ]
    .concat();
    let loss = |t: &[f64]| {
        let mut q = p.clone();
        q.weights.data_mut().copy_from_slice(&t[..nw]);
        q.bias.data_mut().copy_from_slice(&t[nw..nw + nb]);
        let xi = Tensor::new(x.shape().to_vec(), t[nw + nb..].to_vec()).expect("shape");
        dot(
            conv2d(&q, &xi, stride).expect("valid conv").data(),
            up.data(),
        )
    };
    finite_diff_gradcheck(loss, &theta, &analytic, step, None)
}

fn dense_case(rng: &mut ChaCha8Rng, step: f64) -> GradcheckReport {
    let (out, inp) = (5, 7);
    let mut p = LayerParams::dense(out, inp, rng);
    p.bias = Tensor::from_vec(uniform(out, rng));
    let x = uniform(inp, rng);
    let up = uniform(out, rng);
    let g = dense_backward(&p, &x, &up).expect("valid dense");
    let (nw, nb) = (p.weights.len(), p.bias.len());
    let theta = [p.weights.data(), p.bias.data(), &x].concat();
    let analytic = [
        g.weights.data(),
        g.bias.data(),
        g.input.as_ref().expect("input grad").data(),
    ]
    .concat();
    let loss = |t: &[f64]| {
        let mut q = p.clone();
        q.weights.data_mut().copy_from_slice(&t[..nw]);
        q.bias.data_mut().copy_from_slice(&t[nw..nw + nb]);
        dot(&dense(&q, &t[nw + nb..]).expect("valid dense"), &up)
    };
    finite_diff_gradcheck(loss, &theta, &analytic, step, None)
}

fn relu_case(rng: &mut ChaCha8Rng, step: f64) -> GradcheckReport {
    // Keep inputs away from the kink, where the derivative is undefined.
    let x: Vec<f64> = uniform(16, rng)
        .into_iter()
        .map(|v| v + 0.1 * v.signum())
        .collect();
    let up = uniform(16, rng);
    let analytic: Vec<f64> = x.iter().zip(&up).map(|(v, u)| relu_grad(*v) * u).collect();
    let loss = |t: &[f64]| t.iter().zip(&up).map(|(v, u)| relu(*v) * u).sum();
    finite_diff_gradcheck(loss, &x, &analytic, step, None)
}

fn sigmoid_bce_case(rng: &mut ChaCha8Rng, step: f64) -> GradcheckReport {
    let mut worst = GradcheckReport::default();
    for label in [0u8, 1] {
        for _ in 0..8 {
            let z = rng.random_range(-4.0..4.0);
            let g = bce_logit_grad(sigmoid(z), label);
            let r =
                finite_diff_gradcheck(|t| bce_loss(sigmoid(t[0]), label), &[z], &[g], step, None);
            worst = merge(worst, r);
        }
    }
    worst
}

fn normalize_case(rng: &mut ChaCha8Rng, step: f64) -> GradcheckReport {
    let x = [
        rng.random_range(0.2..1.0),
        rng.random_range(-1.0..-0.2),
        rng.random_range(-1.0..1.0),
    ];
    let up = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let analytic = unit_normalize_backward(&x, &up).expect("nonzero input");
    let loss = |t: &[f64]| {
        let n = unit_normalize(&[t[0], t[1], t[2]]).expect("nonzero input");
        dot(&n, &up)
    };
    finite_diff_gradcheck(loss, &x, &analytic, step, None)
}

fn l2_case(rng: &mut ChaCha8Rng, step: f64) -> GradcheckReport {
    let p = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let t = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let analytic = l2_grad(&p, &t);
    finite_diff_gradcheck(
        |x| l2_loss(&[x[0], x[1], x[2]], &t),
        &p,
        &analytic,
        step,
        None,
    )
}

fn merge(a: GradcheckReport, b: GradcheckReport) -> GradcheckReport {
    let worst = if b.max_rel_error > a.max_rel_error {
        b
    } else {
        a
    };
    GradcheckReport {
        checked: a.checked + b.checked,
        skipped: a.skipped + b.skipped,
        ..worst
    }
}

/// Finite-difference checks of every layer and loss primitive on small random
/// inputs, with respect to parameters and inputs alike.
pub fn layer_suite(seed: u64, step: f64) -> Vec<(&'static str, GradcheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        ("conv2d_stride1", conv_case(1, &mut rng, step)),
        ("conv2d_stride2", conv_case(2, &mut rng, step)),
        ("dense", dense_case(&mut rng, step)),
        ("relu", relu_case(&mut rng, step)),
        ("sigmoid_bce", sigmoid_bce_case(&mut rng, step)),
        ("unit_normalize", normalize_case(&mut rng, step)),
        ("l2", l2_case(&mut rng, step)),
    ]
}
