//! The masking convention and the three reference explainers.
//!
//! All explainers score one (input, target-class) pair by probing the model on
//! masked inputs: features outside the active subset are replaced by a fixed
//! baseline vector (the train-split feature means; the zero vector in
//! standardized space).
//!
//! - [`exact_shap`] enumerates all `2^d` subsets once, caches every masked
//!   evaluation by bitmask, and averages marginal contributions with the
//!   inverse-binomial weights. Cost: exactly `2^d` inferences.
//! - [`svs`] samples `m` uniform feature permutations and averages prefix
//!   marginals, sharing the single empty-set evaluation across permutations.
//!   Cost: exactly `m*d + 1` inferences.
//! - [`kernel_shap`] samples subsets, evaluates the model on each, and solves
//!   a kernel-weighted least-squares problem whose intercept is pinned to the
//!   baseline output and whose coefficients are constrained to sum to the
//!   full-minus-baseline output. Cost: exactly `n` inferences.

use crate::data::{AttributionVector, FeatureVector, TargetClass};
use crate::model::CountedModel;
use crate::rng::RngSpec;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Exact enumeration is refused above this dimension unless forced.
pub const EXACT_GUARD: usize = 20;

/// Batched masked evaluations are chunked to bound peak memory.
const EVAL_CHUNK: usize = 8192;

/// Replacement values for absent features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingSpec {
    pub baseline: FeatureVector,
}

impl MaskingSpec {
    pub fn new(baseline: FeatureVector) -> Self {
        Self { baseline }
    }

    /// The canonical baseline in standardized space.
    pub fn zeros(d: usize) -> Self {
        Self {
            baseline: FeatureVector::new(vec![0.0; d]).expect("zeros are finite"),
        }
    }

    pub fn dim(&self) -> usize {
        self.baseline.dim()
    }

    /// The input with coordinates outside `subset` replaced by the baseline.
    pub fn masked_vector(&self, x: &FeatureVector, subset: &[usize]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = self.baseline.values().to_vec();
        for &i in subset {
            if i >= d {
                return Err(Error::FeatureIndexOutOfRange { index: i, d });
            }
            out[i] = x[i];
        }
        Ok(out)
    }

    fn masked_vector_bits(&self, x: &FeatureVector, bits: u64) -> Vec<f64> {
        let mut out = self.baseline.values().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            if bits >> i & 1 == 1 {
                *v = x[i];
            }
        }
        out
    }
}

/// Model output for class `y` on the masked input; costs exactly 1 inference.
pub fn masked_eval(
    model: &CountedModel,
    x: &FeatureVector,
    subset: &[usize],
    y: TargetClass,
    mask: &MaskingSpec,
) -> Result<f64> {
    let masked = mask.masked_vector(x, subset)?;
    let p = model.predict_batch(&[masked])?;
    Ok(p[0][y.index()])
}

fn check_inputs(
    model: &CountedModel,
    x: &FeatureVector,
    y: TargetClass,
    mask: &MaskingSpec,
) -> Result<usize> {
    let d = model.input_dim();
    if x.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x.dim(),
        });
    }
    if mask.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: mask.dim(),
        });
    }
    y.check(model.num_classes())?;
    Ok(d)
}

/// Evaluate h_y on every subset (by bitmask) and return the table indexed by
/// mask bits. Costs exactly `2^d` inferences.
fn subset_value_table(
    model: &CountedModel,
    x: &FeatureVector,
    y: TargetClass,
    mask: &MaskingSpec,
    d: usize,
) -> Result<Vec<f64>> {
    let total: u64 = 1 << d;
    let mut values = Vec::with_capacity(total as usize);
    let mut batch = Vec::with_capacity(EVAL_CHUNK.min(total as usize));
    let mut start = 0u64;
    while start < total {
        let end = (start + EVAL_CHUNK as u64).min(total);
        batch.clear();
        for bits in start..end {
            batch.push(mask.masked_vector_bits(x, bits));
        }
        for p in model.predict_batch(&batch)? {
            values.push(p[y.index()]);
        }
        start = end;
    }
    Ok(values)
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c
}

/// Exact Shapley attribution by full subset enumeration, guarded at
/// d <= [`EXACT_GUARD`]. `inference_cost` is exactly `2^d`.
pub fn exact_shap(
    model: &CountedModel,
    x: &FeatureVector,
    y: TargetClass,
    mask: &MaskingSpec,
) -> Result<AttributionVector> {
    let d = check_inputs(model, x, y, mask)?;
    if d > EXACT_GUARD {
        return Err(Error::ExactGuard {
            d,
            guard: EXACT_GUARD,
        });
    }
    exact_shap_unguarded(model, x, y, mask)
}

/// Exact enumeration without the dimension guard; the caller owns the
/// `2^d` cost.
pub fn exact_shap_unguarded(
    model: &CountedModel,
    x: &FeatureVector,
    y: TargetClass,
    mask: &MaskingSpec,
) -> Result<AttributionVector> {
    let d = check_inputs(model, x, y, mask)?;
    if d >= 63 {
        return Err(Error::InvalidParameter(
            "exact enumeration needs d < 63".into(),
        ));
    }
    let values = subset_value_table(model, x, y, mask, d)?;

    // Weight on a subset of size s absent the probed feature: 1 / (d * C(d-1, s)).
    let weights: Vec<f64> = (0..d)
        .map(|s| 1.0 / (d as f64 * binomial(d - 1, s)))
        .collect();

    let mut scores = vec![0.0; d];
    for bits in 0..(1u64 << d) {
        let size = bits.count_ones() as usize;
        for (i, score) in scores.iter_mut().enumerate() {
            if bits >> i & 1 == 0 {
                let with = values[(bits | 1 << i) as usize];
                let without = values[bits as usize];
                *score += weights[size] * (with - without);
            }
        }
    }
    AttributionVector::new(scores, y, 1 << d)
}

/// Shapley value sampling: average prefix marginals over `m` uniform feature
/// permutations. The empty-set evaluation is shared across permutations, so
/// `inference_cost` is exactly `m*d + 1`.
pub fn svs(
    model: &CountedModel,
    x: &FeatureVector,
    y: TargetClass,
    m: usize,
    mask: &MaskingSpec,
    rng: RngSpec,
) -> Result<AttributionVector> {
    let d = check_inputs(model, x, y, mask)?;
    if m == 0 {
        return Err(Error::InvalidParameter(
            "svs needs m >= 1 permutations".into(),
        ));
    }
    let mut gen = rng.rng();
    let empty = mask.masked_vector(x, &[])?;
    let v_empty = model.predict_batch(&[empty])?[0][y.index()];

    let mut scores = vec![0.0; d];
    let mut prefix_rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    for _ in 0..m {
        let perm = crate::rng::permutation(&mut gen, d);
        prefix_rows.clear();
        let mut current = mask.baseline.values().to_vec();
        for &feat in &perm {
            current[feat] = x[feat];
            prefix_rows.push(current.clone());
        }
        let outputs = model.predict_batch(&prefix_rows)?;
        let mut prev = v_empty;
        for (&feat, p) in perm.iter().zip(&outputs) {
            let v = p[y.index()];
            scores[feat] += v - prev;
            prev = v;
        }
    }
    for s in &mut scores {
        *s /= m as f64;
    }
    AttributionVector::new(scores, y, (m * d) as u64 + 1)
}

/// One sampled or enumerated coalition with its regression weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSample {
    pub subset: Vec<usize>,
    pub weight: f64,
}

/// Shapley kernel weight on a proper subset of size `s`:
/// (d-1) / (C(d,s) * s * (d-s)).
pub fn shapley_kernel_weight(d: usize, s: usize) -> f64 {
    (d as f64 - 1.0) / (binomial(d, s) * s as f64 * (d - s) as f64)
}

/// Kernel-weighted Shapley regression: sample `n - 2` proper subsets (size
/// uniform in 1..d-1, subset uniform within size), spend the remaining two
/// inferences on the empty and full sets, and solve the constrained weighted
/// least squares. `inference_cost` is exactly `n`.
///
/// Sampled subsets carry the kernel weight divided by their sampling
/// probability, so the sampled objective is an unbiased estimate of the fully
/// enumerated one and the estimator converges to the exact attribution.
pub fn kernel_shap(
    model: &CountedModel,
    x: &FeatureVector,
    y: TargetClass,
    n: usize,
    mask: &MaskingSpec,
    rng: RngSpec,
) -> Result<AttributionVector> {
    let d = check_inputs(model, x, y, mask)?;
    if d < 2 {
        return Err(Error::InvalidParameter(
            "kernel regression needs d >= 2".into(),
        ));
    }
    if n < d + 2 {
        return Err(Error::InvalidParameter(format!(
            "kernel regression needs n >= d + 2 = {}, got {n}",
            d + 2
        )));
    }
    let mut gen = rng.rng();
    let mut samples = Vec::with_capacity(n - 2);
    for _ in 0..(n - 2) {
        let size = gen.gen_range(1..d);
        let mut indices = crate::rng::permutation(&mut gen, d);
        indices.truncate(size);
        indices.sort_unstable();
        // Importance correction: kernel weight over the sampling probability
        // 1 / ((d-1) * C(d, size)).
        let weight = (d as f64 - 1.0).powi(2) / (size as f64 * (d - size) as f64);
        samples.push(SubsetSample {
            subset: indices,
            weight,
        });
    }
    kernel_shap_on_samples(model, x, y, mask, &samples)
}

/// Kernel SHAP over every proper subset with exact kernel weights; recovers
/// the exact attribution. Costs `2^d` inferences.
pub fn kernel_shap_full_enum(
    model: &CountedModel,
    x: &FeatureVector,
    y: TargetClass,
    mask: &MaskingSpec,
) -> Result<AttributionVector> {
    let d = check_inputs(model, x, y, mask)?;
    if d < 2 {
        return Err(Error::InvalidParameter(
            "kernel regression needs d >= 2".into(),
        ));
    }
    if d > EXACT_GUARD {
        return Err(Error::ExactGuard {
            d,
            guard: EXACT_GUARD,
        });
    }
    let mut samples = Vec::with_capacity((1usize << d) - 2);
    for bits in 1..(1u64 << d) - 1 {
        let subset: Vec<usize> = (0..d).filter(|i| bits >> i & 1 == 1).collect();
        let weight = shapley_kernel_weight(d, subset.len());
        samples.push(SubsetSample { subset, weight });
    }
    kernel_shap_on_samples(model, x, y, mask, &samples)
}

fn kernel_shap_on_samples(
    model: &CountedModel,
    x: &FeatureVector,
    y: TargetClass,
    mask: &MaskingSpec,
    samples: &[SubsetSample],
) -> Result<AttributionVector> {
    let d = mask.dim();
    let v_empty = masked_eval(model, x, &[], y, mask)?;
    let full: Vec<usize> = (0..d).collect();
    let v_full = masked_eval(model, x, &full, y, mask)?;

    let mut values = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        let end = (start + EVAL_CHUNK).min(samples.len());
        let rows: Vec<Vec<f64>> = samples[start..end]
            .iter()
            .map(|s| mask.masked_vector(x, &s.subset))
            .collect::<Result<_>>()?;
        for p in model.predict_batch(&rows)? {
            values.push(p[y.index()]);
        }
        start = end;
    }

    let scores = solve_shapley_regression(d, samples, &values, v_empty, v_full)?;
    let cost = samples.len() as u64 + 2;
    AttributionVector::new(scores, y, cost)
}

/// Solve min_phi sum_j w_j (v_j - v_empty - sum_{i in S_j} phi_i)^2 subject to
/// sum_i phi_i = v_full - v_empty, via the stationarity system with one
/// multiplier for the constraint.
pub(crate) fn solve_shapley_regression(
    d: usize,
    samples: &[SubsetSample],
    values: &[f64],
    v_empty: f64,
    v_full: f64,
) -> Result<Vec<f64>> {
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for (s, v) in samples.iter().zip(values) {
        let b = v - v_empty;
        for &i in &s.subset {
            rhs[i] += s.weight * b;
            for &j in &s.subset {
                gram[i * d + j] += s.weight;
            }
        }
    }

    // KKT system: [2G 1; 1' 0] [phi; nu] = [2c; delta]
    let m = d + 1;
    let mut a = vec![0.0; m * m];
    let mut b = vec![0.0; m];
    for i in 0..d {
        for j in 0..d {
            a[i * m + j] = 2.0 * gram[i * d + j];
        }
        a[i * m + d] = 1.0;
        a[d * m + i] = 1.0;
        b[i] = 2.0 * rhs[i];
    }
    b[d] = v_full - v_empty;

    let solution = solve_linear(&mut a, &mut b, m)?;
    Ok(solution[..d].to_vec())
}

/// Gaussian elimination with partial pivoting; rank deficiency is signaled.
fn solve_linear(a: &mut [f64], b: &mut [f64], m: usize) -> Result<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-30);
    for col in 0..m {
        let mut pivot = col;
        for row in col + 1..m {
            if a[row * m + col].abs() > a[pivot * m + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * m + col].abs() < 1e-12 * scale {
            return Err(Error::RankDeficientDesign);
        }
        if pivot != col {
            for k in 0..m {
                a.swap(col * m + k, pivot * m + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * m + col];
        for row in col + 1..m {
            let factor = a[row * m + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..m {
                a[row * m + k] -= factor * a[col * m + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; m];
    for col in (0..m).rev() {
        let mut acc = b[col];
        for k in col + 1..m {
            acc -= a[col * m + k] * x[k];
        }
        x[col] = acc / a[col * m + col];
    }
    Ok(x)
}

/// An explainer method addressable by name, with its per-explanation
/// inference cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodSpec {
    Exact,
    /// Permutation sampling with `permutations` passes.
    Svs { permutations: usize },
    /// Kernel regression with a total budget of `inferences`.
    KernelShap { inferences: usize },
}

impl MethodSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "exact" {
            return Ok(MethodSpec::Exact);
        }
        if let Some(m) = s.strip_prefix("svs-") {
            let m: usize = m
                .parse()
                .map_err(|_| Error::Parse(format!("bad method `{s}`")))?;
            return Ok(MethodSpec::Svs { permutations: m });
        }
        if let Some(n) = s.strip_prefix("ks-") {
            let n: usize = n
                .parse()
                .map_err(|_| Error::Parse(format!("bad method `{s}`")))?;
            return Ok(MethodSpec::KernelShap { inferences: n });
        }
        Err(Error::Parse(format!(
            "unknown method `{s}` (expected exact | svs-M | ks-N)"
        )))
    }

    pub fn name(&self) -> String {
        match self {
            MethodSpec::Exact => "exact".into(),
            MethodSpec::Svs { permutations } => format!("svs-{permutations}"),
            MethodSpec::KernelShap { inferences } => format!("ks-{inferences}"),
        }
    }

    /// Black-box inferences one explanation costs at dimension `d`.
    pub fn cost(&self, d: usize) -> u64 {
        match self {
            MethodSpec::Exact => 1u64 << d,
            MethodSpec::Svs { permutations } => (*permutations * d) as u64 + 1,
            MethodSpec::KernelShap { inferences } => *inferences as u64,
        }
    }

    pub fn is_monte_carlo(&self) -> bool {
        !matches!(self, MethodSpec::Exact)
    }

    pub fn explain(
        &self,
        model: &CountedModel,
        x: &FeatureVector,
        y: TargetClass,
        mask: &MaskingSpec,
        rng: RngSpec,
    ) -> Result<AttributionVector> {
        match self {
            MethodSpec::Exact => exact_shap(model, x, y, mask),
            MethodSpec::Svs { permutations } => svs(model, x, y, *permutations, mask, rng),
            MethodSpec::KernelShap { inferences } => {
                kernel_shap(model, x, y, *inferences, mask, rng)
            }
        }
    }
}

impl std::fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// The uniform explainer contract: one (input, target class) pair in, an
/// attribution vector out. Deterministic explainers ignore the rng spec.
pub trait Explainer {
    fn method_name(&self) -> String;
    fn explain(
        &self,
        model: &CountedModel,
        x: &FeatureVector,
        y: TargetClass,
        rng: RngSpec,
    ) -> Result<AttributionVector>;
}

/// [`MethodSpec`] bound to a masking convention, usable through the uniform
/// contract.
#[derive(Debug, Clone)]
pub struct MethodExplainer {
    pub method: MethodSpec,
    pub mask: MaskingSpec,
}

impl Explainer for MethodExplainer {
    fn method_name(&self) -> String {
        self.method.name()
    }

    fn explain(
        &self,
        model: &CountedModel,
        x: &FeatureVector,
        y: TargetClass,
        rng: RngSpec,
    ) -> Result<AttributionVector> {
        self.method.explain(model, x, y, &self.mask, rng)
    }
}
