/// Probability clamp applied before taking logs in the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Binary cross entropy of a probability against a 0/1 label.
pub fn bce_loss(pred: f64, label: u8) -> f64 {
    let p = clamp_prob(pred);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `dL/dp`; zero where the clamp is active.
pub fn bce_grad(pred: f64, label: u8) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pred) {
        return 0.0;
    }
    if label == 1 {
        -1.0 / pred
    } else {
        1.0 / (1.0 - pred)
    }
}

/// BCE gradient with respect to the logit feeding a sigmoid: `p - l`.
///
/// Algebraically equal to `bce_grad(p) * p * (1 - p)` away from the clamp,
/// without the cancellation near saturation.
pub fn bce_logit_grad(pred: f64, label: u8) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pred) {
        return 0.0;
    }
    pred - f64::from(label)
}

/// Squared Euclidean distance.
pub fn l2_loss(pred: &[f64; 3], target: &[f64; 3]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

pub fn l2_grad(pred: &[f64; 3], target: &[f64; 3]) -> [f64; 3] {
    [
        2.0 * (pred[0] - target[0]),
        2.0 * (pred[1] - target[1]),
        2.0 * (pred[2] - target[2]),
    ]
}
