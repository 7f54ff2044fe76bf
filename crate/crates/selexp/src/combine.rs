//! Uncertainty bins, per-bin combination weights, and the assembled
//! selective explainer.
//!
//! Calibration scores are quantized into k quantile bins. Within each bin, a
//! scalar weight lambda minimizes the summed squared distance between the
//! combined explanation `lambda * Amor + (1 - lambda) * MC` and an
//! independently drawn, higher-quality Monte Carlo reference; the minimizer
//! has the closed form
//!
//! ```text
//! lambda = sum <MC - Ref, MC - Amor> / sum ||Amor - MC||^2
//! ```
//!
//! (unclamped: the minimizer ranges over all reals; a flag records bins whose
//! weight leaves [0, 1]).
//!
//! Query-time dispatch: inputs whose uncertainty score clears the calibrated
//! threshold get the amortized explanation alone (0 inferences); the rest get
//! the combined explanation with a fresh Monte Carlo draw (n inferences).

use crate::amortize::AmortizedExplainer;
use crate::attribution::{Explainer, MaskingSpec, MethodSpec};
use crate::data::{AttributionVector, FeatureVector, TargetClass};
use crate::model::CountedModel;
use crate::rng::RngSpec;
use crate::uncertainty::{
    calibrate_threshold, fit_metric, MetricFitSpec, SelectionPolicy, Threshold,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Quantile bin edges with fitted per-bin weights.
///
/// `edges` has k+1 entries at coverage levels i/k; `edges[0]` is the minimum
/// calibration score. A score s belongs to the first bin when
/// s <= edges[1], to bin j when edges[j] < s <= edges[j+1], and out-of-range
/// scores clamp to the nearest end bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub edges: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub counts: Vec<usize>,
    /// Bin fell back to lambda = 0 (too few members or a zero denominator).
    pub degenerate: Vec<bool>,
    /// Fitted weight left [0, 1]; reported, not clamped.
    pub out_of_unit: Vec<bool>,
}

impl BinTable {
    pub fn num_bins(&self) -> usize {
        self.lambdas.len()
    }

    pub fn bin_index(&self, score: f64) -> usize {
        let k = self.num_bins();
        if k <= 1 || score <= self.edges[1] {
            return 0;
        }
        for j in 1..k {
            if score <= self.edges[j + 1] {
                return j;
            }
        }
        k - 1
    }

    pub fn lambda_for(&self, score: f64) -> f64 {
        self.lambdas[self.bin_index(score)]
    }
}

/// Quantile edges over calibration scores for the partition i/k, plus the
/// bin membership of every calibration score. Counts partition the
/// calibration set exactly.
pub fn build_bins(scores: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k == 0 {
        return Err(Error::InvalidParameter("bins need k >= 1".into()));
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut edges = Vec::with_capacity(k + 1);
    edges.push(min);
    for i in 1..=k {
        let alpha = i as f64 / k as f64;
        match crate::uncertainty::threshold_from_scores(scores, alpha)? {
            Threshold::Value(t) => edges.push(t),
            Threshold::CoverNone => unreachable!("alpha > 0 always has a finite threshold"),
        }
    }
    let table = BinTable {
        edges: edges.clone(),
        lambdas: vec![0.0; k],
        counts: vec![0; k],
        degenerate: vec![false; k],
        out_of_unit: vec![false; k],
    };
    let memberships: Vec<usize> = scores.iter().map(|s| table.bin_index(*s)).collect();
    Ok((edges, memberships))
}

/// Closed-form combination weight for one bin from parallel rows of
/// (amortized, Monte Carlo, reference) explanations. Errors on an empty bin
/// or a zero denominator; the caller applies the lambda = 0 fallback.
pub fn fit_lambda(amor: &[Vec<f64>], mc: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if amor.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if amor.len() != mc.len() || amor.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: amor.len(),
            actual: mc.len().min(reference.len()),
        });
    }
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for ((a, m), r) in amor.iter().zip(mc).zip(reference) {
        for i in 0..a.len() {
            let mc_minus_ref = m[i] - r[i];
            let mc_minus_amor = m[i] - a[i];
            numerator += mc_minus_ref * mc_minus_amor;
            denominator += mc_minus_amor * mc_minus_amor;
        }
    }
    if denominator <= 0.0 {
        return Err(Error::DegenerateBin);
    }
    let lambda = numerator / denominator;
    if !lambda.is_finite() {
        return Err(Error::DegenerateBin);
    }
    Ok(lambda)
}

/// The in-bin objective the weight minimizes:
/// sum ||lambda*Amor + (1-lambda)*MC - Ref||^2.
pub fn lambda_objective(
    amor: &[Vec<f64>],
    mc: &[Vec<f64>],
    reference: &[Vec<f64>],
    lambda: f64,
) -> f64 {
    let mut total = 0.0;
    for ((a, m), r) in amor.iter().zip(mc).zip(reference) {
        for i in 0..a.len() {
            let combined = lambda * a[i] + (1.0 - lambda) * m[i];
            total += (combined - r[i]) * (combined - r[i]);
        }
    }
    total
}

/// Everything the selective explainer needs at query time.
#[derive(Debug, Clone)]
pub struct SelectiveExplainer {
    pub amortizer: AmortizedExplainer,
    pub mc_method: MethodSpec,
    pub policy: SelectionPolicy,
    pub bins: BinTable,
    pub mask: MaskingSpec,
    /// Calibration scores retained so coverage sweeps can recalibrate the
    /// threshold without refitting anything.
    pub cal_scores: Vec<f64>,
}

impl SelectiveExplainer {
    /// Same fitted state under a different coverage level.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut out = self.clone();
        out.policy = self.policy.recalibrated(&self.cal_scores, alpha)?;
        Ok(out)
    }

    /// The combined explanation for an uncovered input: fresh Monte Carlo
    /// draw blended with the amortized guess by the bin weight. Costs exactly
    /// the Monte Carlo method's inference count.
    pub fn initial_guess_explain(
        &self,
        model: &CountedModel,
        x: &FeatureVector,
        y: TargetClass,
        rng: RngSpec,
    ) -> Result<AttributionVector> {
        let score = self.policy.metric.score(x, y)?;
        let lambda = self.bins.lambda_for(score);
        let amor = self.amortizer.predict_scores(x, y)?;
        let mc = self.mc_method.explain(model, x, y, &self.mask, rng)?;
        let scores: Vec<f64> = amor
            .iter()
            .zip(&mc.scores)
            .map(|(a, m)| lambda * a + (1.0 - lambda) * m)
            .collect();
        AttributionVector::new(scores, y, mc.inference_cost)
    }

    /// Dispatch: amortized alone when covered, combined otherwise.
    pub fn explain_selective(
        &self,
        model: &CountedModel,
        x: &FeatureVector,
        y: TargetClass,
        rng: RngSpec,
    ) -> Result<AttributionVector> {
        if self.policy.select(x, y)? {
            crate::amortize::amortized_explain(&self.amortizer, x, y)
        } else {
            self.initial_guess_explain(model, x, y, rng)
        }
    }

    /// Covered flag alongside the explanation, for per-example reporting.
    pub fn explain_with_flag(
        &self,
        model: &CountedModel,
        x: &FeatureVector,
        y: TargetClass,
        rng: RngSpec,
    ) -> Result<(AttributionVector, bool)> {
        let covered = self.policy.select(x, y)?;
        let att = if covered {
            crate::amortize::amortized_explain(&self.amortizer, x, y)?
        } else {
            self.initial_guess_explain(model, x, y, rng)?
        };
        Ok((att, covered))
    }
}

impl Explainer for SelectiveExplainer {
    fn method_name(&self) -> String {
        format!("selective({}, alpha={})", self.mc_method.name(), self.policy.alpha)
    }

    fn explain(
        &self,
        model: &CountedModel,
        x: &FeatureVector,
        y: TargetClass,
        rng: RngSpec,
    ) -> Result<AttributionVector> {
        self.explain_selective(model, x, y, rng)
    }
}

/// Fit-time configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveConfig {
    /// Coverage: fraction served by the amortizer alone.
    pub alpha: f64,
    /// Number of quantile bins k.
    pub num_bins: usize,
    /// Bins with fewer calibration members fall back to lambda = 0.
    pub min_bin_count: usize,
    /// The recourse Monte Carlo explainer.
    pub mc_method: MethodSpec,
}

impl SelectiveConfig {
    pub fn new(alpha: f64, num_bins: usize, mc_method: MethodSpec) -> Self {
        Self {
            alpha,
            num_bins,
            min_bin_count: 5,
            mc_method,
        }
    }
}

/// Data the fitting pipeline consumes. Monte Carlo columns are cached draws:
/// `cal_mc` (the recourse method) and `cal_reference` (the higher-quality
/// reference) must come from independent seeds.
#[derive(Debug, Clone, Copy)]
pub struct FitData<'a> {
    pub train_features: &'a [FeatureVector],
    pub train_classes: &'a [TargetClass],
    /// Monte Carlo targets on the train split (the amortizer's own targets).
    pub train_mc_targets: &'a [Vec<f64>],
    pub cal_features: &'a [FeatureVector],
    pub cal_classes: &'a [TargetClass],
    /// Recourse-method draws on the calibration split.
    pub cal_mc: &'a [Vec<f64>],
    /// Reference-method draws on the calibration split.
    pub cal_reference: &'a [Vec<f64>],
    pub num_classes: usize,
}

/// The end-to-end fitting pipeline, in order: fit the uncertainty metric,
/// calibrate the coverage threshold, build quantile bins, fit one combination
/// weight per bin, and assemble the dispatcher.
pub fn fit_selective(
    amortizer: AmortizedExplainer,
    metric_spec: &MetricFitSpec,
    data: &FitData,
    config: &SelectiveConfig,
    mask: MaskingSpec,
    rng: RngSpec,
) -> Result<SelectiveExplainer> {
    if data.cal_features.len() != data.cal_mc.len()
        || data.cal_features.len() != data.cal_reference.len()
        || data.cal_features.len() != data.cal_classes.len()
    {
        return Err(Error::DimensionMismatch {
            expected: data.cal_features.len(),
            actual: data.cal_mc.len().min(data.cal_reference.len()),
        });
    }

    let metric = fit_metric(
        metric_spec,
        data.train_features,
        data.train_classes,
        data.num_classes,
        &amortizer,
        data.train_mc_targets,
        rng.substream(1),
    )?;

    let (policy, cal_scores) = calibrate_threshold(
        metric,
        data.cal_features,
        data.cal_classes,
        config.alpha,
    )?;

    let amor_on_cal: Vec<Vec<f64>> = data
        .cal_features
        .iter()
        .zip(data.cal_classes)
        .map(|(x, y)| amortizer.predict_scores(x, *y))
        .collect::<Result<_>>()?;

    let bins = fit_bin_table(
        &cal_scores,
        &amor_on_cal,
        data.cal_mc,
        data.cal_reference,
        config.num_bins,
        config.min_bin_count,
    )?;

    Ok(SelectiveExplainer {
        amortizer,
        mc_method: config.mc_method,
        policy,
        bins,
        mask,
        cal_scores,
    })
}

/// Quantile bins over calibration scores with one fitted weight per bin.
/// Bins with fewer than `min_bin_count` members or a degenerate denominator
/// fall back to weight 0 (pure Monte Carlo).
pub fn fit_bin_table(
    cal_scores: &[f64],
    amor_on_cal: &[Vec<f64>],
    cal_mc: &[Vec<f64>],
    cal_reference: &[Vec<f64>],
    k: usize,
    min_bin_count: usize,
) -> Result<BinTable> {
    let (edges, memberships) = build_bins(cal_scores, k)?;
    let mut lambdas = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut degenerate = vec![false; k];
    let mut out_of_unit = vec![false; k];
    for j in 0..k {
        let idx: Vec<usize> = memberships
            .iter()
            .enumerate()
            .filter(|(_, b)| **b == j)
            .map(|(i, _)| i)
            .collect();
        counts[j] = idx.len();
        if idx.len() < min_bin_count {
            degenerate[j] = true;
            continue;
        }
        let amor: Vec<Vec<f64>> = idx.iter().map(|&i| amor_on_cal[i].clone()).collect();
        let mc: Vec<Vec<f64>> = idx.iter().map(|&i| cal_mc[i].clone()).collect();
        let reference: Vec<Vec<f64>> = idx.iter().map(|&i| cal_reference[i].clone()).collect();
        match fit_lambda(&amor, &mc, &reference) {
            Ok(lambda) => {
                lambdas[j] = lambda;
                out_of_unit[j] = !(0.0..=1.0).contains(&lambda);
            }
            Err(Error::DegenerateBin) => degenerate[j] = true,
            Err(e) => return Err(e),
        }
    }
    Ok(BinTable {
        edges,
        lambdas,
        counts,
        degenerate,
        out_of_unit,
    })
}
