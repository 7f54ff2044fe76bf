//! Uncertainty metrics and the selection machinery.
//!
//! An uncertainty metric maps an input to a finite score; lower means the
//! amortized explanation is expected to be better. Two metrics are provided:
//!
//! - deep: mean per-coordinate variance (population convention) across a seed
//!   ensemble of amortizers, scaled by 1/(d*k);
//! - learned: a regressor trained to predict the squared error between the
//!   amortized explanation and its Monte Carlo target.
//!
//! Thresholds are empirical quantiles calibrated on held-out rows: `t_alpha`
//! is the smallest observed score with at least an `alpha` fraction of
//! calibration scores at or below it. Selection covers whatever scores at or
//! below the threshold, so calibration coverage is at least `alpha` by
//! construction. Because the rule is a quantile, any strictly increasing
//! rescaling of the metric leaves every covered set unchanged.

use crate::amortize::{AmortizedExplainer, ExplainerEnsemble};
use crate::data::{FeatureVector, TargetClass};
use crate::mlp::{fit_regressor, Mlp, MlpSpec};
use crate::rng::RngSpec;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Mean across coordinates of the across-member variance, divided by the
/// ensemble size: (1 / (d * k)) * sum_i Var(member_1(x)_i, .., member_k(x)_i)
/// with the population variance (divide by k). Zero exactly when all members
/// agree on x.
pub fn deep_uncertainty(
    ensemble: &ExplainerEnsemble,
    x: &FeatureVector,
    y: TargetClass,
) -> Result<f64> {
    let k = ensemble.size();
    if k < 2 {
        return Err(Error::InvalidParameter(
            "deep uncertainty needs an ensemble of k >= 2".into(),
        ));
    }
    let outputs: Vec<Vec<f64>> = ensemble
        .members
        .iter()
        .map(|m| m.predict_scores(x, y))
        .collect::<Result<_>>()?;
    let d = outputs[0].len();
    let mut total_var = 0.0;
    for i in 0..d {
        // Exactly zero when every member emits the same value, so perfect
        // agreement scores 0 regardless of float summation order.
        if outputs.iter().all(|o| o[i] == outputs[0][i]) {
            continue;
        }
        let mean: f64 = outputs.iter().map(|o| o[i]).sum::<f64>() / k as f64;
        let var: f64 = outputs.iter().map(|o| (o[i] - mean).powi(2)).sum::<f64>() / k as f64;
        total_var += var;
    }
    Ok(total_var / (d as f64 * k as f64))
}

/// Regressor from an input to the expected amortized-vs-target squared error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedUncertainty {
    net: Mlp,
}

impl LearnedUncertainty {
    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::InvalidParameter(
                "learned uncertainty net must have scalar output".into(),
            ));
        }
        Ok(Self { net })
    }

    pub fn score(&self, x: &FeatureVector) -> Result<f64> {
        if x.dim() != self.net.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.net.input_dim(),
                actual: x.dim(),
            });
        }
        Ok(self.net.forward(x.values())[0])
    }
}

/// Fit the learned metric: targets are the per-dimension mean squared error
/// between the amortized explanation and its Monte Carlo counterpart on the
/// training rows (nonnegative by construction; clamped at 0 for safety).
/// The regressor output itself is reported raw.
pub fn train_learned_uncertainty(
    features: &[FeatureVector],
    classes: &[TargetClass],
    amortizer: &AmortizedExplainer,
    mc_scores: &[Vec<f64>],
    arch: &MlpSpec,
    rng: RngSpec,
) -> Result<LearnedUncertainty> {
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if mc_scores.len() != features.len() || classes.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            actual: mc_scores.len().min(classes.len()),
        });
    }
    let mut spec = arch.clone();
    spec.seed = rng;
    let d = features[0].dim();
    if spec.layer_widths[0] != d || *spec.layer_widths.last().unwrap() != 1 {
        return Err(Error::InvalidParameter(format!(
            "uncertainty regressor widths must run {d} -> .. -> 1, got {:?}",
            spec.layer_widths
        )));
    }
    let inputs: Vec<Vec<f64>> = features.iter().map(|f| f.values().to_vec()).collect();
    let targets: Vec<Vec<f64>> = features
        .iter()
        .zip(classes)
        .zip(mc_scores)
        .map(|((x, y), mc)| {
            let amor = amortizer.predict_scores(x, *y)?;
            Ok(vec![crate::eval::mse(&amor, mc)?.max(0.0)])
        })
        .collect::<Result<_>>()?;
    let (net, _) = fit_regressor(&spec, &inputs, &targets)?;
    Ok(LearnedUncertainty { net })
}

/// Architecture default for the learned metric: d -> 3d -> 1.
pub fn learned_uncertainty_arch(d: usize, seed: RngSpec) -> MlpSpec {
    MlpSpec::default_arch(d, 1, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Deep,
    Learned,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(MetricKind::Deep),
            "learned" => Ok(MetricKind::Learned),
            other => Err(Error::Parse(format!(
                "unknown metric `{other}` (expected deep|learned)"
            ))),
        }
    }
}

/// Either metric behind one scoring surface. Lower scores mean higher
/// expected explanation quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UncertaintyMetric {
    Deep(ExplainerEnsemble),
    Learned(LearnedUncertainty),
}

impl UncertaintyMetric {
    pub fn kind(&self) -> MetricKind {
        match self {
            UncertaintyMetric::Deep(_) => MetricKind::Deep,
            UncertaintyMetric::Learned(_) => MetricKind::Learned,
        }
    }

    pub fn score(&self, x: &FeatureVector, y: TargetClass) -> Result<f64> {
        let s = match self {
            UncertaintyMetric::Deep(ensemble) => deep_uncertainty(ensemble, x, y)?,
            UncertaintyMetric::Learned(learned) => learned.score(x)?,
        };
        if !s.is_finite() {
            return Err(Error::NonFinite {
                context: "uncertainty score".into(),
            });
        }
        Ok(s)
    }

    pub fn score_batch(
        &self,
        features: &[FeatureVector],
        classes: &[TargetClass],
    ) -> Result<Vec<f64>> {
        features
            .iter()
            .zip(classes)
            .map(|(x, y)| self.score(x, *y))
            .collect()
    }
}

/// Calibrated threshold: a finite score bound, or the cover-none sentinel
/// produced at coverage 0 (no finite minimizer exists there).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Threshold {
    CoverNone,
    Value(f64),
}

/// Smallest observed score `t` with `Pr_cal[s <= t] >= alpha`: the ceil(alpha*n)-th
/// order statistic. `alpha = 0` yields the cover-none sentinel.
pub fn threshold_from_scores(scores: &[f64], alpha: f64) -> Result<Threshold> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "coverage alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "calibration scores".into(),
        });
    }
    if alpha == 0.0 {
        return Ok(Threshold::CoverNone);
    }
    let n = scores.len();
    let rank = ((alpha * n as f64).ceil() as usize).clamp(1, n);
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(Threshold::Value(sorted[rank - 1]))
}

/// A calibrated metric plus threshold: the decision rule for when the
/// amortized explanation is trusted on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub metric: UncertaintyMetric,
    pub threshold: Threshold,
    pub alpha: f64,
}

impl SelectionPolicy {
    /// 1 iff the score is at or below the threshold (ties are covered, so
    /// coverage can exceed alpha).
    pub fn select(&self, x: &FeatureVector, y: TargetClass) -> Result<bool> {
        let score = self.metric.score(x, y)?;
        Ok(self.select_score(score))
    }

    /// Full coverage is a sentinel like cover-none: at alpha = 1 the policy
    /// covers every input, including unseen scores above the calibration
    /// maximum, so the amortizer-only regime really costs zero inferences.
    pub fn select_score(&self, score: f64) -> bool {
        if self.alpha >= 1.0 {
            return true;
        }
        match self.threshold {
            Threshold::CoverNone => false,
            Threshold::Value(t) => score <= t,
        }
    }

    /// Rebuild the threshold for a different coverage level from stored
    /// calibration scores.
    pub fn recalibrated(&self, cal_scores: &[f64], alpha: f64) -> Result<Self> {
        Ok(Self {
            metric: self.metric.clone(),
            threshold: threshold_from_scores(cal_scores, alpha)?,
            alpha,
        })
    }
}

/// Calibrate the coverage threshold of `metric` on the calibration rows.
pub fn calibrate_threshold(
    metric: UncertaintyMetric,
    cal_features: &[FeatureVector],
    cal_classes: &[TargetClass],
    alpha: f64,
) -> Result<(SelectionPolicy, Vec<f64>)> {
    let scores = metric.score_batch(cal_features, cal_classes)?;
    let threshold = threshold_from_scores(&scores, alpha)?;
    Ok((
        SelectionPolicy {
            metric,
            threshold,
            alpha,
        },
        scores,
    ))
}

/// Minimal coverage meeting a per-explanation inference budget, with the
/// recourse explainer costing `n` inferences and the amortized branch one:
/// alpha = (n + 1 - budget) / n, for budgets in [1, n + 1].
pub fn coverage_for_budget(n: u64, n_budget: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter("budget rule needs n >= 1".into()));
    }
    let top = n as f64 + 1.0;
    if !(1.0..=top).contains(&n_budget) {
        return Err(Error::InvalidParameter(format!(
            "inference budget must lie in [1, {top}], got {n_budget}"
        )));
    }
    Ok((top - n_budget) / n as f64)
}

/// How to fit a metric inside the end-to-end pipeline.
#[derive(Debug, Clone)]
pub enum MetricFitSpec<'a> {
    /// Retrain the amortizer pipeline `members` times (streams 1..=members of
    /// the arch seed) and score by ensemble variance.
    Deep { members: usize, arch: &'a MlpSpec },
    /// Train the error regressor with this architecture.
    Learned { arch: &'a MlpSpec },
}

/// Fit either metric from training rows, the amortizer, and the amortizer's
/// Monte Carlo targets.
pub fn fit_metric(
    spec: &MetricFitSpec,
    features: &[FeatureVector],
    classes: &[TargetClass],
    num_classes: usize,
    amortizer: &AmortizedExplainer,
    mc_targets: &[Vec<f64>],
    rng: RngSpec,
) -> Result<UncertaintyMetric> {
    match spec {
        MetricFitSpec::Deep { members, arch } => {
            let mut arch = (*arch).clone();
            arch.seed = rng;
            let ensemble = crate::amortize::train_ensemble(
                features,
                classes,
                num_classes,
                mc_targets,
                &amortizer.train_meta.target_method,
                &arch,
                *members,
            )?;
            Ok(UncertaintyMetric::Deep(ensemble))
        }
        MetricFitSpec::Learned { arch } => {
            let learned = train_learned_uncertainty(
                features, classes, amortizer, mc_targets, arch, rng,
            )?;
            Ok(UncertaintyMetric::Learned(learned))
        }
    }
}
