//! Experiment harnesses: the aux/3D ablation grid, the limited-data study and
//! the field-of-view sweep. Every run is keyed by its full configuration and
//! memoized, so conditions shared between harnesses are trained once.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ap::average_precision;
use crate::data::PairSample;
use crate::error::{Error, Result};
use crate::model::{predict_scores, train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub condition: String,
    pub seeds: Vec<u64>,
    pub ap_per_seed: Vec<f64>,
    pub median_ap: f64,
}

impl ExperimentReport {
    fn new(condition: impl Into<String>, seeds: &[u64], ap_per_seed: Vec<f64>) -> Self {
        Self {
            condition: condition.into(),
            seeds: seeds.to_vec(),
            median_ap: median(&ap_per_seed),
            ap_per_seed,
        }
    }
}

/// Median by the usual order statistic; the mean of the middle pair for even
/// lengths. `NaN` for an empty slice.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub test_ap: f64,
    pub train_pairs: usize,
    pub steps_per_epoch: usize,
    pub total_steps: u64,
    /// Wall-clock training time.
    pub train_seconds: f64,
}

/// A fixed train/test pair of datasets with a cache of finished runs.
pub struct Experiment<'a> {
    train: &'a [PairSample],
    test: &'a [PairSample],
    cache: BTreeMap<String, RunResult>,
}

impl<'a> Experiment<'a> {
    pub fn new(train: &'a [PairSample], test: &'a [PairSample]) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !test.iter().any(|s| s.label == 1) {
            return Err(Error::NoPositives);
        }
        Ok(Self {
            train,
            test,
            cache: BTreeMap::new(),
        })
    }

    pub fn runs_trained(&self) -> usize {
        self.cache.len()
    }

    pub fn results(&self) -> impl Iterator<Item = &RunResult> {
        self.cache.values()
    }

    /// Train on `fraction` of the training split (subsampled with
    /// `cfg.seed`) and report test AP.
    pub fn run(&mut self, cfg: &TrainConfig, fraction: f64) -> Result<RunResult> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidValue(format!("fraction {fraction}")));
        }
        let key = format!("{}|{fraction}", serde_json::to_string(cfg)?);
        if let Some(r) = self.cache.get(&key) {
            return Ok(*r);
        }
        let subset = subsample(self.train, fraction, cfg.seed);
        let start = std::time::Instant::now();
        let outcome = train(&subset, &[], cfg)?;
        let train_seconds = start.elapsed().as_secs_f64();
        let scores = predict_scores(&outcome.params, self.test, cfg)?;
        let labels: Vec<u8> = self.test.iter().map(|s| s.label).collect();
        let result = RunResult {
            test_ap: average_precision(&scores, &labels)?.ap,
            train_pairs: subset.len(),
            steps_per_epoch: cfg.steps_per_epoch(subset.len()),
            total_steps: outcome.optimizer.step_count,
            train_seconds,
        };
        log::info!(
            "run aux={} 3d={} fov={} frac={fraction} seed={}: AP {:.4} ({} steps)",
            cfg.aux_gaze,
            cfg.use_3d_encoding,
            cfg.fov_deg,
            cfg.seed,
            result.test_ap,
            result.total_steps
        );
        self.cache.insert(key, result);
        Ok(result)
    }

    fn report(
        &mut self,
        condition: &str,
        cfg: &TrainConfig,
        fraction: f64,
        seeds: &[u64],
    ) -> Result<ExperimentReport> {
        let aps = seeds
            .iter()
            .map(|&seed| {
                let c = TrainConfig {
                    seed,
                    ..cfg.clone()
                };
                self.run(&c, fraction).map(|r| r.test_ap)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperimentReport::new(condition, seeds, aps))
    }
}

/// Deterministic subset of `round(fraction * n)` samples (at least one);
/// the whole set, in order, for `fraction == 1`.
pub fn subsample(data: &[PairSample], fraction: f64, seed: u64) -> Vec<PairSample> {
    if fraction >= 1.0 {
        return data.to_vec();
    }
    let k = ((data.len() as f64 * fraction).round() as usize).clamp(1, data.len());
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    idx.shuffle(&mut rng);
    idx.truncate(k);
    idx.sort_unstable();
    idx.into_iter().map(|i| data[i].clone()).collect()
}

/// Training settings used for the synthetic experiments: single-channel
/// patches and a smaller batch with a larger step than the real-data
/// defaults, so each run converges in a few minutes on one core.
pub fn synthetic_experiment_config() -> TrainConfig {
    TrainConfig {
        in_channels: 1,
        batch_size: 16,
        lr: 3e-3,
        epochs: 10,
        val_every: 0,
        ..TrainConfig::default()
    }
}

pub const FULL: &str = "full";
pub const NO_AUX: &str = "no_aux";
pub const NO_3D: &str = "no_3d";
pub const NO_AUX_NO_3D: &str = "no_aux_no_3d";

fn variant(base: &TrainConfig, aux: bool, use_3d: bool) -> TrainConfig {
    TrainConfig {
        aux_gaze: aux,
        use_3d_encoding: use_3d,
        ..base.clone()
    }
}

fn check_seeds(seeds: &[u64], min: usize) -> Result<()> {
    if seeds.len() < min {
        return Err(Error::InvalidValue(format!(
            "need at least {min} seeds, got {}",
            seeds.len()
        )));
    }
    Ok(())
}

/// The 2x2 grid of {auxiliary gaze on/off} x {3D encoding on/off}.
pub fn ablation_run(
    exp: &mut Experiment<'_>,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<ExperimentReport>> {
    check_seeds(seeds, 3)?;
    [
        (FULL, true, true),
        (NO_AUX, false, true),
        (NO_3D, true, false),
        (NO_AUX_NO_3D, false, false),
    ]
    .into_iter()
    .map(|(name, aux, d3)| exp.report(name, &variant(base, aux, d3), 1.0, seeds))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitedDataReport {
    pub fraction: f64,
    pub train_pairs: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub full: ExperimentReport,
    pub no_aux: ExperimentReport,
    /// `median(full) - median(no_aux)`.
    pub gap: f64,
}

/// Full model vs. no auxiliary task on subsets of the training split. Epochs
/// are scaled by `1 / fraction` so every fraction gets about the same number
/// of optimizer steps.
pub fn limited_data_run(
    exp: &mut Experiment<'_>,
    base: &TrainConfig,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<LimitedDataReport>> {
    check_seeds(seeds, 1)?;
    fractions
        .iter()
        .map(|&fraction| {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::InvalidValue(format!("fraction {fraction}")));
            }
            let epochs = (base.epochs as f64 / fraction).ceil() as usize;
            let cfg = TrainConfig {
                epochs,
                ..base.clone()
            };
            let full = exp.report(FULL, &variant(&cfg, true, true), fraction, seeds)?;
            let no_aux = exp.report(NO_AUX, &variant(&cfg, false, true), fraction, seeds)?;
            let train_pairs = subsample(exp.train, fraction, seeds[0]).len();
            Ok(LimitedDataReport {
                fraction,
                train_pairs,
                steps_per_epoch: cfg.steps_per_epoch(train_pairs),
                epochs,
                gap: full.median_ap - no_aux.median_ap,
                full,
                no_aux,
            })
        })
        .collect()
}

/// Retrain the full model with each assumed field of view.
pub fn fov_sweep(
    exp: &mut Experiment<'_>,
    base: &TrainConfig,
    fov_values: &[f64],
    seeds: &[u64],
) -> Result<Vec<ExperimentReport>> {
    if fov_values.is_empty() {
        return Err(Error::InvalidValue("empty field-of-view list".into()));
    }
    check_seeds(seeds, 1)?;
    fov_values
        .iter()
        .map(|&fov| {
            let cfg = TrainConfig {
                fov_deg: fov,
                ..base.clone()
            };
            cfg.validate()?;
            exp.report(&format!("fov_{fov}"), &cfg, 1.0, seeds)
        })
        .collect()
}

/// Fixed-width text table of reports.
pub fn format_table(reports: &[ExperimentReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>10}  per-seed AP", "condition", "median AP");
    for r in reports {
        let per: Vec<String> = r.ap_per_seed.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(
            s,
            "{:<16} {:>10.4}  {}",
            r.condition,
            r.median_ap,
            per.join(" ")
        );
    }
    s
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

/// `fov_deg,median_ap` series for plotting a sweep.
pub fn fov_csv(fovs: &[f64], reports: &[ExperimentReport]) -> String {
    let mut s = String::from("fov_deg,median_ap\n");
    for (f, r) in fovs.iter().zip(reports) {
        let _ = writeln!(s, "{f},{}", r.median_ap);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_order_statistic() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn table_lists_conditions() {
        let r = ExperimentReport::new("full", &[1, 2, 3], vec![0.5, 0.7, 0.6]);
        assert_eq!(r.median_ap, 0.6);
        let t = format_table(std::slice::from_ref(&r));
        assert!(t.contains("full") && t.contains("0.6000"));
        let j = to_jsonl(&[r]).unwrap();
        assert_eq!(j.lines().count(), 1);
        assert!(fov_csv(&[53.0], &[]).starts_with("fov_deg,median_ap\n"));
    }
}
