//! Saliency evaluation: F-beta over binarised maps, mean absolute error, and
//! architectural efficiency between generations.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{Network, Tensor};
use crate::scalar::Scalar;

pub const DEFAULT_BETA_SQUARED: f64 = 0.3;
/// Number of uniformly spaced thresholds `i / 255` in the max-F sweep.
pub const SWEEP_THRESHOLDS: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Thresholding {
    /// Best F over thresholds `0/255, 1/255, ..., 255/255`, per image.
    #[default]
    MaxSweep,
    Fixed { threshold: f64 },
}

impl std::fmt::Display for Thresholding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Thresholding::MaxSweep => write!(f, "max-over-{SWEEP_THRESHOLDS}-thresholds"),
            Thresholding::Fixed { threshold } => write!(f, "fixed({threshold})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub beta_squared: f64,
    pub thresholding: Thresholding,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            beta_squared: DEFAULT_BETA_SQUARED,
            thresholding: Thresholding::MaxSweep,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_squared.is_finite() && self.beta_squared > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta-squared must be positive, got {}",
                self.beta_squared
            )));
        }
        if let Thresholding::Fixed { threshold } = self.thresholding {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::InvalidConfig(format!(
                    "fixed threshold must lie in [0, 1], got {threshold}"
                )));
            }
        }
        Ok(())
    }
}

/// `(1 + b2) P R / (b2 P + R)`, or 0 when the denominator vanishes.
pub fn f_beta_from_pr(precision: f64, recall: f64, beta_squared: f64) -> f64 {
    let denominator = beta_squared * precision + recall;
    if denominator > 0.0 {
        (1.0 + beta_squared) * precision * recall / denominator
    } else {
        0.0
    }
}

fn f_from_counts(tp: usize, fp: usize, positives: usize, beta_squared: f64) -> f64 {
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if positives > 0 { tp as f64 / positives as f64 } else { 0.0 };
    f_beta_from_pr(precision, recall, beta_squared)
}

fn check_pair<S: Scalar>(prediction: &Tensor<S>, truth: &Tensor<S>) -> Result<()> {
    if prediction.shape() != truth.shape() {
        return Err(Error::RejectedInput(format!(
            "prediction shape {} differs from ground truth {}",
            prediction.shape(),
            truth.shape()
        )));
    }
    Ok(())
}

fn binary_truth<S: Scalar>(truth: &Tensor<S>) -> Result<Vec<bool>> {
    truth
        .data()
        .iter()
        .map(|&v| {
            if v == S::one() {
                Ok(true)
            } else if v == S::zero() {
                Ok(false)
            } else {
                Err(Error::RejectedInput(format!("ground truth value {v} is not binary")))
            }
        })
        .collect()
}

/// Index of the largest sweep threshold `i / 255` not exceeding `p`, if any.
fn sweep_bin(p: f64) -> Option<usize> {
    let last = (SWEEP_THRESHOLDS - 1) as i64;
    let scale = last as f64;
    let mut b = ((p * scale).floor() as i64).clamp(-1, last);
    while b < last && (b + 1) as f64 / scale <= p {
        b += 1;
    }
    while b >= 0 && b as f64 / scale > p {
        b -= 1;
    }
    usize::try_from(b).ok()
}

/// F-beta of one map and the threshold that produced it.
pub fn f_beta_with_threshold<S: Scalar>(
    prediction: &Tensor<S>,
    truth: &Tensor<S>,
    cfg: &MetricsConfig,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    check_pair(prediction, truth)?;
    let gt = binary_truth(truth)?;
    let positives = gt.iter().filter(|&&g| g).count();
    match cfg.thresholding {
        Thresholding::Fixed { threshold } => {
            let (mut tp, mut fp) = (0, 0);
            for (p, &g) in prediction.data().iter().zip(&gt) {
                if p.to_f64_lossy() >= threshold {
                    if g {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            Ok((f_from_counts(tp, fp, positives, cfg.beta_squared), threshold))
        }
        Thresholding::MaxSweep => {
            let mut pos = [0usize; SWEEP_THRESHOLDS];
            let mut neg = [0usize; SWEEP_THRESHOLDS];
            for (p, &g) in prediction.data().iter().zip(&gt) {
                if let Some(b) = sweep_bin(p.to_f64_lossy()) {
                    if g {
                        pos[b] += 1;
                    } else {
                        neg[b] += 1;
                    }
                }
            }
            let (mut tp, mut fp) = (0, 0);
            let mut best = (f64::NEG_INFINITY, 0.0);
            for i in (0..SWEEP_THRESHOLDS).rev() {
                tp += pos[i];
                fp += neg[i];
                let f = f_from_counts(tp, fp, positives, cfg.beta_squared);
                if f >= best.0 {
                    best = (f, i as f64 / (SWEEP_THRESHOLDS - 1) as f64);
                }
            }
            Ok(best)
        }
    }
}

pub fn f_beta<S: Scalar>(prediction: &Tensor<S>, truth: &Tensor<S>, cfg: &MetricsConfig) -> Result<f64> {
    f_beta_with_threshold(prediction, truth, cfg).map(|(f, _)| f)
}

pub fn mae<S: Scalar>(prediction: &Tensor<S>, truth: &Tensor<S>) -> Result<f64> {
    check_pair(prediction, truth)?;
    let n = prediction.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = prediction
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p.to_f64_lossy() - t.to_f64_lossy()).abs())
        .sum();
    Ok(total / n as f64)
}

/// Ancestor-to-descendant synapse ratio.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Efficiency(pub f64);

impl Efficiency {
    /// The ratio truncated to two decimals, as it appears in reports
    /// (63767232 / 1333010 = 47.837... is reported as 47.83).
    pub fn reported(&self) -> f64 {
        (self.0 * 100.0 * (1.0 + 1e-12)).floor() / 100.0
    }
}

impl std::fmt::Display for Efficiency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}X", self.reported())
    }
}

pub fn architectural_efficiency(ancestor: usize, descendant: usize) -> Result<Efficiency> {
    if descendant == 0 {
        return Err(Error::RejectedInput(
            "descendant synapse count must be at least 1".into(),
        ));
    }
    Ok(Efficiency(ancestor as f64 / descendant as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub f_beta: f64,
    pub mae: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f_beta: f64,
    pub mae: f64,
    pub beta_squared: f64,
    pub thresholding: Thresholding,
    pub per_image: Vec<ImageScore>,
}

/// Scores every sample and averages the per-image values.
pub fn evaluate<S: Scalar>(network: &Network<S>, samples: &[Sample<S>], cfg: &MetricsConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let per_image = samples
        .iter()
        .map(|s| {
            let prediction = network.forward(&s.image)?;
            let (f, threshold) = f_beta_with_threshold(&prediction, &s.mask, cfg)?;
            Ok(ImageScore {
                name: s.name.clone(),
                f_beta: f,
                mae: mae(&prediction, &s.mask)?,
                threshold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len().max(1) as f64;
    Ok(EvalReport {
        f_beta: per_image.iter().map(|s| s.f_beta).sum::<f64>() / n,
        mae: per_image.iter().map(|s| s.mae).sum::<f64>() / n,
        beta_squared: cfg.beta_squared,
        thresholding: cfg.thresholding,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;
    use proptest::prelude::*;

    fn map(values: &[f64]) -> Tensor<f64> {
        Tensor::new(Shape::new(1, 1, values.len()), values.to_vec()).unwrap()
    }

    fn fixed(threshold: f64) -> MetricsConfig {
        MetricsConfig {
            thresholding: Thresholding::Fixed { threshold },
            ..MetricsConfig::default()
        }
    }

    #[test]
    fn f_beta_formula() {
        assert!((f_beta_from_pr(0.5, 1.0, 0.3) - 0.565217).abs() < 1e-6);
        assert_eq!(f_beta_from_pr(0.0, 0.0, 0.3), 0.0);
        assert_eq!(f_beta_from_pr(1.0, 1.0, 0.3), 1.0);
    }

    #[test]
    fn efficiency_is_truncated_to_two_decimals() {
        assert_eq!(architectural_efficiency(63767232, 1333010).unwrap().reported(), 47.83);
        assert_eq!(architectural_efficiency(63767232, 15471797).unwrap().reported(), 4.12);
        assert_eq!(architectural_efficiency(100, 100).unwrap().to_string(), "1.00X");
        assert_eq!(architectural_efficiency(2, 3).unwrap().reported(), 0.66);
        assert!(architectural_efficiency(5, 0).is_err());
    }

    #[test]
    fn fixed_threshold_counts() {
        let truth = map(&[1.0, 1.0, 0.0, 0.0]);
        let pred = map(&[0.9, 0.2, 0.6, 0.1]);
        // TP 1, FP 1, FN 1: P = R = 0.5.
        assert!((f_beta(&pred, &truth, &fixed(0.5)).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(f_beta(&pred, &truth, &fixed(0.95)).unwrap(), 0.0);
    }

    #[test]
    fn sweep_picks_the_best_threshold() {
        let truth = map(&[1.0, 1.0, 0.0, 0.0]);
        let pred = map(&[0.9, 0.7, 0.6, 0.1]);
        let (f, t) = f_beta_with_threshold(&pred, &truth, &MetricsConfig::default()).unwrap();
        assert_eq!(f, 1.0);
        assert!(t > 0.6 && t <= 0.7);
    }

    #[test]
    fn sweep_bins_are_exact() {
        assert_eq!(sweep_bin(0.0), Some(0));
        assert_eq!(sweep_bin(1.0), Some(255));
        assert_eq!(sweep_bin(-0.1), None);
        assert_eq!(sweep_bin(128.0 / 255.0), Some(128));
        assert_eq!(sweep_bin(128.0 / 255.0 - 1e-12), Some(127));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&map(&[0.5, 0.5]), &map(&[1.0, 0.0])).unwrap(), 0.5);
        assert_eq!(mae(&map(&[1.0, 0.0]), &map(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(mae(&map(&[0.5]), &map(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn rejects_non_binary_truth_and_bad_config() {
        assert!(f_beta(&map(&[0.5]), &map(&[0.5]), &MetricsConfig::default()).is_err());
        assert!(f_beta(&map(&[0.5]), &map(&[1.0]), &fixed(1.5)).is_err());
        let bad = MetricsConfig {
            beta_squared: 0.0,
            ..MetricsConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0f64..=1.0, n),
                proptest::collection::vec(any::<bool>().prop_map(f64::from), n),
            )
        })
    }

    proptest! {
        #[test]
        fn scores_stay_in_the_unit_interval((p, t) in pair()) {
            let (p, t) = (map(&p), map(&t));
            let f = f_beta(&p, &t, &MetricsConfig::default()).unwrap();
            let m = mae(&p, &t).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!((0.0..=1.0).contains(&m));
        }

        #[test]
        fn sweep_dominates_every_fixed_threshold((p, t) in pair(), i in 0usize..256) {
            let (p, t) = (map(&p), map(&t));
            let best = f_beta(&p, &t, &MetricsConfig::default()).unwrap();
            let one = f_beta(&p, &t, &fixed(i as f64 / 255.0)).unwrap();
            prop_assert!(best >= one - 1e-12);
        }

        #[test]
        fn perfect_prediction_scores_one(t in proptest::collection::vec(any::<bool>(), 1..40)) {
            prop_assume!(t.iter().any(|&b| b));
            let t = map(&t.iter().map(|&b| f64::from(b)).collect::<Vec<_>>());
            prop_assert_eq!(f_beta(&t, &t, &fixed(0.5)).unwrap(), 1.0);
            prop_assert_eq!(f_beta(&t, &t, &MetricsConfig::default()).unwrap(), 1.0);
        }

        #[test]
        fn mae_ignores_pixel_order((p, t) in pair(), rot in 0usize..40) {
            let n = p.len();
            let rotate = |v: &[f64]| (0..n).map(|i| v[(i + rot) % n]).collect::<Vec<_>>();
            let a = mae(&map(&p), &map(&t)).unwrap();
            let b = mae(&map(&rotate(&p)), &map(&rotate(&t))).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
