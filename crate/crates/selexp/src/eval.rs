//! Quality metrics and the evaluation protocols.
//!
//! Per-example quality is measured against a reference explainer by
//! per-dimension mean squared error and by Spearman rank correlation. The
//! protocol functions aggregate those per-example values into plot-ready
//! curves: coverage sweeps with an oracle baseline, recourse comparisons
//! (fitted combination weight vs the naive pure-Monte-Carlo substitution),
//! worst-case quantile profiles, perturbation (local fidelity) curves,
//! inference-budget time sharing, and recourse-estimator ablations.
//!
//! Every curve point carries the number of contributing examples and a 95%
//! nonparametric bootstrap halfwidth. Reports serialize to a JSON document
//! (curves + metadata) and a flat CSV per-example table.

use crate::artifact::SCHEMA_VERSION;
use crate::attribution::MaskingSpec;
use crate::combine::SelectiveExplainer;
use crate::data::{FeatureVector, TargetClass};
use crate::model::{argmax, CountedModel};
use crate::rng::RngSpec;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-dimension mean squared error between two score vectors.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("mse needs d >= 1".into()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

/// Average ranks (1-based), ties receiving the mean of their rank range.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Spearman rank correlation with average ranks; `None` when either side has
/// zero rank variance (correlation undefined).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidParameter("spearman needs d >= 2".into()));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Nonparametric bootstrap settings for curve confidence halfwidths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub resamples: usize,
    pub seed: RngSpec,
}

impl BootstrapSpec {
    pub fn new(seed: RngSpec) -> Self {
        Self {
            resamples: 1000,
            seed,
        }
    }
}

/// Half the width of the central 95% interval of bootstrap means.
pub fn bootstrap_halfwidth(values: &[f64], spec: &BootstrapSpec) -> f64 {
    if values.len() < 2 || spec.resamples == 0 {
        return 0.0;
    }
    let mut rng = spec.seed.rng();
    let n = values.len();
    let mut means = Vec::with_capacity(spec.resamples);
    for _ in 0..spec.resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += values[rng.gen_range(0..n)];
        }
        means.push(sum / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = means[((0.025 * spec.resamples as f64) as usize).min(spec.resamples - 1)];
    let hi = means[((0.975 * spec.resamples as f64) as usize).min(spec.resamples - 1)];
    (hi - lo) / 2.0
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub ci_halfwidth: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            points: Vec::new(),
        }
    }

    fn push(&mut self, x: f64, values: &[f64], bootstrap: &BootstrapSpec) {
        if values.is_empty() {
            return;
        }
        self.points.push(CurvePoint {
            x,
            y: mean(values),
            ci_halfwidth: bootstrap_halfwidth(values, bootstrap),
            n: values.len(),
        });
    }

    fn push_exact(&mut self, x: f64, y: f64, n: usize) {
        self.points.push(CurvePoint {
            x,
            y,
            ci_halfwidth: 0.0,
            n,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerExample {
    pub input_id: u64,
    pub mse: f64,
    pub spearman: Option<f64>,
    pub covered: Option<bool>,
    pub inference_cost: u64,
}

/// One protocol's plot-ready output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub protocol: String,
    pub metadata: serde_json::Value,
    pub curves: Vec<Curve>,
    pub per_example: Vec<PerExample>,
}

impl EvalReport {
    fn new(protocol: &str, metadata: serde_json::Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            protocol: protocol.into(),
            metadata,
            curves: Vec::new(),
            per_example: Vec::new(),
        }
    }

    pub fn curve(&self, name: &str) -> Option<&Curve> {
        self.curves.iter().find(|c| c.name == name)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::artifact::save_json(path, self)
    }

    /// Flat per-example table; `spearman` is empty when undefined.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("input_id,mse,spearman,covered,inference_cost\n");
        for row in &self.per_example {
            let sp = row.spearman.map(|s| s.to_string()).unwrap_or_default();
            let cov = row.covered.map(|c| (c as u8).to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.input_id, row.mse, sp, cov, row.inference_cost
            ));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Indices of the `count` smallest values, ties broken by index.
fn bottom_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap().then(i.cmp(&j)));
    order.truncate(count);
    order
}

fn grid_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).min(n)
}

/// Coverage sweep: at each coverage level, the covered set is the bottom
/// fraction of test rows by uncertainty score, and the curve reports the mean
/// amortized-explanation error over it. The oracle series covers the bottom
/// fraction by true error instead — the best any selector could do.
pub fn coverage_curve_report(
    metric_name: &str,
    scores: &[f64],
    per_point_mse: &[f64],
    per_point_spearman: &[Option<f64>],
    alpha_grid: &[f64],
    bootstrap: &BootstrapSpec,
) -> Result<EvalReport> {
    if scores.len() != per_point_mse.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: per_point_mse.len(),
        });
    }
    let n = scores.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut report = EvalReport::new(
        "coverage",
        serde_json::json!({
            "metric": metric_name,
            "alpha_grid": alpha_grid,
            "n_test": n,
        }),
    );
    let mut metric_curve = Curve::new(metric_name);
    let mut oracle_curve = Curve::new("oracle");

    let mut sorted_mse = per_point_mse.to_vec();
    sorted_mse.sort_by(|a, b| a.partial_cmp(b).unwrap());

    for &alpha in alpha_grid {
        let count = grid_count(alpha, n);
        if count == 0 {
            continue;
        }
        let covered = bottom_indices(scores, count);
        let covered_mse: Vec<f64> = covered.iter().map(|&i| per_point_mse[i]).collect();
        metric_curve.push(alpha, &covered_mse, bootstrap);
        let oracle_prefix = &sorted_mse[..count];
        oracle_curve.push(alpha, oracle_prefix, bootstrap);
    }
    report.curves.push(metric_curve);
    report.curves.push(oracle_curve);
    report.per_example = per_point_mse
        .iter()
        .zip(per_point_spearman)
        .enumerate()
        .map(|(i, (m, s))| PerExample {
            input_id: i as u64,
            mse: *m,
            spearman: *s,
            covered: None,
            inference_cost: 0,
        })
        .collect();
    Ok(report)
}

/// Per-point Monte Carlo draw shared by the selective and naive arms so the
/// comparison isolates the combination weight.
fn recourse_eval_at_alpha(
    se: &SelectiveExplainer,
    model: &CountedModel,
    features: &[FeatureVector],
    classes: &[TargetClass],
    reference: &[Vec<f64>],
    alpha: f64,
    rng: RngSpec,
) -> Result<RecourseArm> {
    let se_alpha = se.with_alpha(alpha)?;
    let mut selective_mse = Vec::with_capacity(features.len());
    let mut naive_mse = Vec::with_capacity(features.len());
    let mut selective_spearman = Vec::new();
    let mut naive_spearman = Vec::new();
    let mut covered_flags = Vec::with_capacity(features.len());
    let mut cost_total = 0u64;
    for (i, ((x, y), reference_scores)) in features.iter().zip(classes).zip(reference).enumerate() {
        let covered = se_alpha.policy.select(x, *y)?;
        covered_flags.push(covered);
        let amor = se_alpha.amortizer.predict_scores(x, *y)?;
        let (selective_scores, naive_scores) = if covered {
            (amor.clone(), amor.clone())
        } else {
            let mc = se_alpha
                .mc_method
                .explain(model, x, *y, &se_alpha.mask, rng.substream(i as u64))?;
            cost_total += mc.inference_cost;
            let score = se_alpha.policy.metric.score(x, *y)?;
            let lambda = se_alpha.bins.lambda_for(score);
            let combined: Vec<f64> = amor
                .iter()
                .zip(&mc.scores)
                .map(|(a, m)| lambda * a + (1.0 - lambda) * m)
                .collect();
            (combined, mc.scores)
        };
        selective_mse.push(mse(&selective_scores, reference_scores)?);
        naive_mse.push(mse(&naive_scores, reference_scores)?);
        if let Some(s) = spearman(&selective_scores, reference_scores)? {
            selective_spearman.push(s);
        }
        if let Some(s) = spearman(&naive_scores, reference_scores)? {
            naive_spearman.push(s);
        }
    }
    Ok(RecourseArm {
        selective_mse,
        naive_mse,
        selective_spearman,
        naive_spearman,
        covered_flags,
        cost_total,
    })
}

struct RecourseArm {
    selective_mse: Vec<f64>,
    naive_mse: Vec<f64>,
    selective_spearman: Vec<f64>,
    naive_spearman: Vec<f64>,
    covered_flags: Vec<bool>,
    cost_total: u64,
}

/// Recourse comparison: overall test error of the selective explainer versus
/// the naive variant (combination weight pinned to 0) across recourse
/// fractions 1 - alpha.
#[allow(clippy::too_many_arguments)]
pub fn recourse_comparison_report(
    se: &SelectiveExplainer,
    model: &CountedModel,
    features: &[FeatureVector],
    classes: &[TargetClass],
    reference: &[Vec<f64>],
    recourse_grid: &[f64],
    rng: RngSpec,
    bootstrap: &BootstrapSpec,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(
        "recourse",
        serde_json::json!({
            "mc_method": se.mc_method.name(),
            "metric": se.policy.metric.kind(),
            "recourse_grid": recourse_grid,
            "fitted_alpha": se.policy.alpha,
            "n_test": features.len(),
        }),
    );
    let mut ig_mse = Curve::new("initial_guess_mse");
    let mut nv_mse = Curve::new("naive_mse");
    let mut ig_sp = Curve::new("initial_guess_spearman");
    let mut nv_sp = Curve::new("naive_spearman");
    for &fraction in recourse_grid {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidParameter(format!(
                "recourse fraction {fraction} outside [0, 1]"
            )));
        }
        let arm = recourse_eval_at_alpha(se, model, features, classes, reference, 1.0 - fraction, rng)?;
        ig_mse.push(fraction, &arm.selective_mse, bootstrap);
        nv_mse.push(fraction, &arm.naive_mse, bootstrap);
        ig_sp.push(fraction, &arm.selective_spearman, bootstrap);
        nv_sp.push(fraction, &arm.naive_spearman, bootstrap);
    }
    report.curves.push(ig_mse);
    report.curves.push(nv_mse);
    report.curves.push(ig_sp);
    report.curves.push(nv_sp);

    // Per-example table at the explainer's own fitted coverage.
    let arm = recourse_eval_at_alpha(se, model, features, classes, reference, se.policy.alpha, rng)?;
    let n_cost = se.mc_method.cost(features[0].dim());
    report.per_example = arm
        .selective_mse
        .iter()
        .enumerate()
        .map(|(i, m)| PerExample {
            input_id: i as u64,
            mse: *m,
            spearman: None,
            covered: Some(arm.covered_flags[i]),
            inference_cost: if arm.covered_flags[i] { 0 } else { n_cost },
        })
        .collect();
    Ok(report)
}

/// One method's per-example quality columns: name, error per test row, and
/// rank correlation per test row (None where undefined).
pub type MethodQuality = (String, Vec<f64>, Vec<Option<f64>>);

/// Worst-case quantile profiles: for each method, the mean error over the
/// worst fraction of test points, ranked independently per metric (by highest
/// error for the error panel, by lowest correlation for the correlation
/// panel).
pub fn worst_case_report(
    methods: &[MethodQuality],
    quantile_grid: &[f64],
    bootstrap: &BootstrapSpec,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(
        "quantiles",
        serde_json::json!({
            "methods": methods.iter().map(|(n, _, _)| n.clone()).collect::<Vec<_>>(),
            "quantile_grid": quantile_grid,
        }),
    );
    for (name, mse_values, spearman_values) in methods {
        let mut worst_mse = Curve::new(format!("{name}_worst_mse"));
        let mut worst_sp = Curve::new(format!("{name}_worst_spearman"));
        let mut sorted_desc = mse_values.clone();
        sorted_desc.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let defined: Vec<f64> = spearman_values.iter().flatten().copied().collect();
        let mut sorted_sp = defined.clone();
        sorted_sp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &q in quantile_grid {
            let count = grid_count(q, sorted_desc.len());
            if count > 0 {
                worst_mse.push(q, &sorted_desc[..count], bootstrap);
            }
            let sp_count = grid_count(q, sorted_sp.len());
            if sp_count > 0 {
                worst_sp.push(q, &sorted_sp[..sp_count], bootstrap);
            }
        }
        report.curves.push(worst_mse);
        report.curves.push(worst_sp);
    }
    Ok(report)
}

/// What masked predictions are scored against in the perturbation curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationReference {
    /// Agreement with the model's own unmasked predictions (default).
    OriginalPredictions,
    /// Agreement with gold labels.
    GoldLabels,
}

/// Local-fidelity curve: mask the top fraction of features by attribution
/// rank and report how often the masked prediction still matches the
/// reference.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_report(
    model: &CountedModel,
    methods: &[(String, Vec<Vec<f64>>)],
    features: &[FeatureVector],
    labels: &[TargetClass],
    mask: &MaskingSpec,
    removal_grid: &[f64],
    reference: PerturbationReference,
    bootstrap: &BootstrapSpec,
) -> Result<EvalReport> {
    let n = features.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = features[0].dim();
    let original: Vec<usize> = features
        .iter()
        .map(|x| Ok(argmax(&model.predict(x)?)))
        .collect::<Result<_>>()?;
    let target: Vec<usize> = match reference {
        PerturbationReference::OriginalPredictions => original.clone(),
        PerturbationReference::GoldLabels => labels.iter().map(|y| y.index()).collect(),
    };

    let mut report = EvalReport::new(
        "perturbation",
        serde_json::json!({
            "methods": methods.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
            "removal_grid": removal_grid,
            "reference": match reference {
                PerturbationReference::OriginalPredictions => "original_predictions",
                PerturbationReference::GoldLabels => "gold_labels",
            },
            "n_test": n,
        }),
    );

    for (name, attributions) in methods {
        if attributions.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: attributions.len(),
            });
        }
        let mut curve = Curve::new(name.clone());
        for &r in removal_grid {
            let k = ((r * d as f64) + 0.5).floor() as usize;
            let k = k.min(d);
            let mut agreements = Vec::with_capacity(n);
            for (i, x) in features.iter().enumerate() {
                // Keep everything except the k features with the highest
                // attribution scores (ties broken by index).
                let mut order: Vec<usize> = (0..d).collect();
                order.sort_by(|&a, &b| {
                    attributions[i][b]
                        .partial_cmp(&attributions[i][a])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let keep: Vec<usize> = order[k..].to_vec();
                let masked = mask.masked_vector(x, &keep)?;
                let p = model.predict_batch(&[masked])?;
                agreements.push(if argmax(&p[0]) == target[i] { 1.0 } else { 0.0 });
            }
            curve.push(r, &agreements, bootstrap);
        }
        report.curves.push(curve);
    }
    Ok(report)
}

/// Inference-vs-error trade-off with three allocation strategies over the
/// same cached Monte Carlo ladder:
///
/// - vanilla: every point gets the same ladder level;
/// - selective: the level's per-point cost becomes the inference budget,
///   budget maps to coverage, and the selective explainer spends it;
/// - oracle: each point independently takes the best cached explanation
///   affordable at the level's budget (reference error known).
///
/// The x-axis is total inferences under the one-inference-per-amortized-call
/// convention; the selective series also reports its measured mean cost.
#[allow(clippy::too_many_arguments)]
pub fn time_sharing_report(
    se: &SelectiveExplainer,
    model: &CountedModel,
    features: &[FeatureVector],
    classes: &[TargetClass],
    reference: &[Vec<f64>],
    ladder_costs: &[u64],
    ladder_mse: &[Vec<Vec<f64>>],
    rng: RngSpec,
    bootstrap: &BootstrapSpec,
) -> Result<EvalReport> {
    let n = features.len();
    if ladder_costs.len() != ladder_mse.len() || ladder_costs.is_empty() {
        return Err(Error::InvalidParameter(
            "time sharing needs one cached score table per ladder level".into(),
        ));
    }
    let d = features[0].dim();
    let recourse_cost = se.mc_method.cost(d);
    let mut report = EvalReport::new(
        "timeshare",
        serde_json::json!({
            "ladder_costs": ladder_costs,
            "recourse_method": se.mc_method.name(),
            "n_test": n,
        }),
    );
    let mut vanilla = Curve::new("vanilla");
    let mut selective = Curve::new("selective");
    let mut oracle = Curve::new("oracle");

    // Per-point error at each ladder level.
    let mut level_errors: Vec<Vec<f64>> = Vec::with_capacity(ladder_costs.len());
    for table in ladder_mse {
        if table.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: table.len(),
            });
        }
        let errs: Vec<f64> = table
            .iter()
            .zip(reference)
            .map(|(scores, r)| mse(scores, r))
            .collect::<Result<_>>()?;
        level_errors.push(errs);
    }

    for (li, &budget) in ladder_costs.iter().enumerate() {
        let total_budget = (budget * n as u64) as f64;
        vanilla.push(total_budget, &level_errors[li], bootstrap);

        // Oracle: per point, the best affordable cached explanation.
        let affordable: Vec<usize> = (0..ladder_costs.len())
            .filter(|&l| ladder_costs[l] <= budget)
            .collect();
        let oracle_errs: Vec<f64> = (0..n)
            .map(|i| {
                affordable
                    .iter()
                    .map(|&l| level_errors[l][i])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        oracle.push(total_budget, &oracle_errs, bootstrap);

        // Selective: budget -> coverage, then dispatch. Budgets beyond the
        // cost of full recourse clamp to coverage 0.
        let clamped = (budget as f64).min(recourse_cost as f64 + 1.0).max(1.0);
        let alpha = crate::uncertainty::coverage_for_budget(recourse_cost, clamped)?;
        let se_alpha = se.with_alpha(alpha)?;
        let mut errs = Vec::with_capacity(n);
        let mut paper_cost = 0u64;
        for (i, ((x, y), r)) in features.iter().zip(classes).zip(reference).enumerate() {
            let covered = se_alpha.policy.select(x, *y)?;
            if covered {
                paper_cost += 1;
                let amor = se_alpha.amortizer.predict_scores(x, *y)?;
                errs.push(mse(&amor, r)?);
            } else {
                paper_cost += recourse_cost + 1;
                let att =
                    se_alpha.initial_guess_explain(model, x, *y, rng.substream(i as u64))?;
                errs.push(mse(&att.scores, r)?);
            }
        }
        selective.push(paper_cost as f64, &errs, bootstrap);
    }
    report.curves.push(vanilla);
    report.curves.push(selective);
    report.curves.push(oracle);
    Ok(report)
}

/// Recourse-estimator ablation: each variant is the same fitted pipeline with
/// a different Monte Carlo recourse method (weights refitted per method).
/// Emits error and correlation curves per variant plus the measured mean
/// black-box cost per explanation from the inference counter.
#[allow(clippy::too_many_arguments)]
pub fn estimator_ablation_report(
    variants: &[(String, SelectiveExplainer)],
    model: &CountedModel,
    features: &[FeatureVector],
    classes: &[TargetClass],
    reference: &[Vec<f64>],
    recourse_grid: &[f64],
    rng: RngSpec,
    bootstrap: &BootstrapSpec,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(
        "ablation",
        serde_json::json!({
            "variants": variants.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
            "recourse_grid": recourse_grid,
            "n_test": features.len(),
        }),
    );
    for (name, se) in variants {
        let mut mse_curve = Curve::new(format!("{name}_mse"));
        let mut sp_curve = Curve::new(format!("{name}_spearman"));
        let mut cost_curve = Curve::new(format!("{name}_cost"));
        for &fraction in recourse_grid {
            let before = model.inference_count();
            let arm = recourse_eval_at_alpha(
                se,
                model,
                features,
                classes,
                reference,
                1.0 - fraction,
                rng,
            )?;
            let measured = model.inference_count() - before;
            debug_assert_eq!(measured, arm.cost_total);
            mse_curve.push(fraction, &arm.selective_mse, bootstrap);
            sp_curve.push(fraction, &arm.selective_spearman, bootstrap);
            cost_curve.push_exact(
                fraction,
                measured as f64 / features.len() as f64,
                features.len(),
            );
        }
        report.curves.push(mse_curve);
        report.curves.push(sp_curve);
        report.curves.push(cost_curve);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;

    #[test]
    fn mse_basics_and_oracle() {
        assert_eq!(mse(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let mut rng = RngSpec::from_seed(1).rng();
        let a: Vec<f64> = (0..7).map(|_| standard_normal(&mut rng)).collect();
        let b: Vec<f64> = (0..7).map(|_| standard_normal(&mut rng)).collect();
        let mut direct = 0.0;
        for i in 0..7 {
            direct += (a[i] - b[i]) * (a[i] - b[i]);
        }
        direct /= 7.0;
        assert!((mse(&a, &b).unwrap() - direct).abs() < 1e-12);
        assert!(mse(&a, &b[..3]).is_err());
    }

    #[test]
    fn mse_positive_unless_equal() {
        let a = [0.3, -0.2, 0.9];
        let mut b = a;
        assert_eq!(mse(&a, &b).unwrap(), 0.0);
        b[1] += 1e-9;
        assert!(mse(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn spearman_perfect_and_reversed() {
        let a = [0.1, 0.4, 0.2, 0.9];
        let up: Vec<f64> = a.iter().map(|v| v * 3.0 + 1.0).collect();
        let down: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(spearman(&a, &up).unwrap(), Some(1.0));
        assert_eq!(spearman(&a, &down).unwrap(), Some(-1.0));
    }

    #[test]
    fn spearman_with_ties_matches_brute_force() {
        let a = [1.0, 2.0, 2.0, 3.0, 1.0];
        let b = [0.5, 0.5, 2.0, 1.5, -1.0];
        // Independent oracle: rank by sorting with explicit tie averaging,
        // then Pearson from first principles.
        fn brute_ranks(v: &[f64]) -> Vec<f64> {
            let n = v.len();
            let mut r = vec![0.0; n];
            for i in 0..n {
                let less = v.iter().filter(|x| **x < v[i]).count() as f64;
                let equal = v.iter().filter(|x| **x == v[i]).count() as f64;
                r[i] = less + (equal + 1.0) / 2.0;
            }
            r
        }
        let ra = brute_ranks(&a);
        let rb = brute_ranks(&b);
        let n = a.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..a.len() {
            cov += (ra[i] - ma) * (rb[i] - mb);
            va += (ra[i] - ma) * (ra[i] - ma);
            vb += (rb[i] - mb) * (rb[i] - mb);
        }
        let expect = cov / (va * vb).sqrt();
        let got = spearman(&a, &b).unwrap().unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn spearman_undefined_on_constant_side() {
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[0.1, 0.5, 0.9]).unwrap(), None);
    }

    #[test]
    fn spearman_invariant_to_increasing_transform() {
        let mut rng = RngSpec::from_seed(2).rng();
        let a: Vec<f64> = (0..9).map(|_| standard_normal(&mut rng)).collect();
        let b: Vec<f64> = (0..9).map(|_| standard_normal(&mut rng)).collect();
        let a_tr: Vec<f64> = a.iter().map(|v| (v * 0.7).exp()).collect();
        let s1 = spearman(&a, &b).unwrap().unwrap();
        let s2 = spearman(&a_tr, &b).unwrap().unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn coverage_curve_anchors_and_oracle_dominance() {
        let mut rng = RngSpec::from_seed(3).rng();
        let n = 50;
        let scores: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let errors: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng).abs()).collect();
        let spearmans: Vec<Option<f64>> = vec![None; n];
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let bootstrap = BootstrapSpec {
            resamples: 50,
            seed: RngSpec::from_seed(4),
        };
        let report =
            coverage_curve_report("test_metric", &scores, &errors, &spearmans, &grid, &bootstrap)
                .unwrap();
        let metric = report.curve("test_metric").unwrap();
        let oracle = report.curve("oracle").unwrap();

        // Full coverage equals the overall mean for both series.
        let overall = mean(&errors);
        assert!((metric.points.last().unwrap().y - overall).abs() < 1e-12);
        assert!((oracle.points.last().unwrap().y - overall).abs() < 1e-12);

        // Oracle is non-decreasing and pointwise minimal.
        for w in oracle.points.windows(2) {
            assert!(w[1].y >= w[0].y - 1e-12);
        }
        for (m, o) in metric.points.iter().zip(&oracle.points) {
            assert!(m.y >= o.y - 1e-12);
        }
    }

    #[test]
    fn coverage_oracle_is_exhaustively_optimal_on_small_instance() {
        // 12 points: enumerate every subset of each size and confirm the
        // oracle prefix mean is the minimum achievable mean.
        let mut rng = RngSpec::from_seed(5).rng();
        let errors: Vec<f64> = (0..12).map(|_| standard_normal(&mut rng).abs()).collect();
        let mut sorted = errors.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for count in 1..=12usize {
            let oracle = mean(&sorted[..count]);
            let mut best = f64::INFINITY;
            for bits in 0u32..(1 << 12) {
                if bits.count_ones() as usize != count {
                    continue;
                }
                let sum: f64 = (0..12).filter(|i| bits >> i & 1 == 1).map(|i| errors[i]).sum();
                best = best.min(sum / count as f64);
            }
            assert!((oracle - best).abs() < 1e-12, "count {count}");
        }
    }

    #[test]
    fn worst_case_anchors() {
        let errors = vec![0.1, 0.5, 0.9, 0.2, 0.7];
        let spearmans: Vec<Option<f64>> = vec![Some(0.9), Some(0.1), Some(-0.5), Some(0.4), None];
        let grid = [0.2, 0.4, 0.6, 0.8, 1.0];
        let bootstrap = BootstrapSpec {
            resamples: 10,
            seed: RngSpec::from_seed(6),
        };
        let report = worst_case_report(
            &[("m".into(), errors.clone(), spearmans)],
            &grid,
            &bootstrap,
        )
        .unwrap();
        let worst = report.curve("m_worst_mse").unwrap();
        // q = 1 is the overall mean; the series is non-increasing in q.
        assert!((worst.points.last().unwrap().y - mean(&errors)).abs() < 1e-12);
        for w in worst.points.windows(2) {
            assert!(w[1].y <= w[0].y + 1e-12);
        }
        // Worst 20% of 5 points is the single highest error.
        assert!((worst.points[0].y - 0.9).abs() < 1e-12);
        let sp = report.curve("m_worst_spearman").unwrap();
        assert!((sp.points[0].y - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_halfwidth_behaves() {
        let spec = BootstrapSpec {
            resamples: 400,
            seed: RngSpec::from_seed(7),
        };
        assert_eq!(bootstrap_halfwidth(&[1.0], &spec), 0.0);
        let mut rng = RngSpec::from_seed(8).rng();
        let values: Vec<f64> = (0..200).map(|_| standard_normal(&mut rng)).collect();
        let hw = bootstrap_halfwidth(&values, &spec);
        // Rough sanity: near 1.96 / sqrt(n) for standard normal data.
        let expect = 1.96 / (200f64).sqrt();
        assert!(hw > 0.5 * expect && hw < 2.0 * expect, "hw {hw}");
        // Deterministic given the seed.
        assert_eq!(hw, bootstrap_halfwidth(&values, &spec));
    }

    #[test]
    fn report_files_roundtrip() {
        let bootstrap = BootstrapSpec {
            resamples: 10,
            seed: RngSpec::from_seed(9),
        };
        let report = coverage_curve_report(
            "m",
            &[0.1, 0.2, 0.3],
            &[0.5, 0.4, 0.6],
            &[Some(0.5), None, Some(-0.2)],
            &[0.5, 1.0],
            &bootstrap,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("selexp-eval-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let json_path = dir.join("report.json");
        let csv_path = dir.join("report.csv");
        report.write_json(&json_path).unwrap();
        report.write_csv(&csv_path).unwrap();
        let loaded: EvalReport = crate::artifact::load_json(&json_path).unwrap();
        assert_eq!(loaded, report);
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert!(csv.starts_with("input_id,mse,spearman,covered,inference_cost\n"));
        assert_eq!(csv.lines().count(), 4);
        // Undefined spearman serializes as an empty cell.
        assert!(csv.lines().nth(2).unwrap().contains(",,"));
        std::fs::remove_file(&json_path).unwrap();
        std::fs::remove_file(&csv_path).unwrap();
    }
}
