use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precision-recall curve with one point per distinct score threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    /// `(recall, precision)`, recall non-decreasing.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Step-interpolated average precision: the sum over thresholds of the recall
/// gained times the precision at that threshold.
///
/// Scores are visited in descending order with ties kept in input order.
/// Tied scores form a single threshold, so the result does not depend on how
/// ties are ordered.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<PRCurve> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let p = positives as f64;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut sum = 0.0;
    let mut points = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let mut gained = 0usize;
        while k < order.len() && scores[order[k]] == s {
            gained += usize::from(labels[order[k]] == 1);
            seen += 1;
            k += 1;
        }
        tp += gained;
        let precision = tp as f64 / seen as f64;
        if gained > 0 {
            sum += gained as f64 * precision;
        }
        points.push((tp as f64 / p, precision));
    }
    Ok(PRCurve {
        points,
        ap: sum / p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(average_precision(&[0.9, 0.1], &[1, 0]).unwrap().ap, 1.0);
        assert_eq!(average_precision(&[0.9, 0.1], &[0, 1]).unwrap().ap, 0.5);
        let c = average_precision(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap();
        assert!((c.ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(c.points, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
    }

    #[test]
    fn ties_form_one_threshold() {
        let a = average_precision(&[0.5, 0.5], &[1, 0]).unwrap().ap;
        let b = average_precision(&[0.5, 0.5], &[0, 1]).unwrap().ap;
        assert_eq!(a, 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[0, 0]),
            Err(Error::NoPositives)
        ));
        assert!(matches!(
            average_precision(&[0.1], &[0, 1]),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
