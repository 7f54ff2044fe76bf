//! The black-box model contract.
//!
//! A [`CountedModel`] wraps any probabilistic classifier behind an exact
//! inference tally: the counter goes up by one per row evaluated, whether rows
//! arrive singly or batched. Explainers report their cost from this tally, so
//! every budget claim in the pipeline is auditable against it.
//!
//! Synthetic closed-form models ([`SyntheticModelSpec`]) back the oracle tests:
//! their Shapley values can be reasoned about by hand.

use crate::data::{FeatureVector, TargetClass};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// A probabilistic classifier: feature vector in, class distribution out.
/// Implementations must be immutable after construction so concurrent
/// read-only evaluation is safe.
pub trait ProbModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Class distribution for one row. The input slice length is guaranteed
    /// to equal `input_dim` by the wrapper.
    fn predict_row(&self, x: &[f64]) -> Vec<f64>;
}

/// A [`ProbModel`] plus a monotone tally of evaluations.
pub struct CountedModel {
    inner: Box<dyn ProbModel>,
    counter: AtomicU64,
}

impl CountedModel {
    pub fn new(inner: Box<dyn ProbModel>) -> Self {
        Self {
            inner,
            counter: AtomicU64::new(0),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Total evaluations performed so far.
    pub fn inference_count(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }

    /// Evaluate one row; counts exactly 1 inference.
    pub fn predict(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        self.check_dim(x.dim())?;
        self.counter.fetch_add(1, Ordering::SeqCst);
        let p = self.inner.predict_row(x.values());
        validate_probabilities(&p, self.num_classes())?;
        Ok(p)
    }

    /// Evaluate `rows.len()` rows; counts one inference per row.
    pub fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for r in rows {
            self.check_dim(r.len())?;
        }
        self.counter.fetch_add(rows.len() as u64, Ordering::SeqCst);
        let mut out = Vec::with_capacity(rows.len());
        for r in rows {
            let p = self.inner.predict_row(r);
            validate_probabilities(&p, self.num_classes())?;
            out.push(p);
        }
        Ok(out)
    }

    /// Probability of class `y` for row `x`; counts 1 inference.
    pub fn prob_of(&self, x: &FeatureVector, y: TargetClass) -> Result<f64> {
        y.check(self.num_classes())?;
        Ok(self.predict(x)?[y.index()])
    }

    /// Predicted class (argmax); counts 1 inference. Ties break to the lower
    /// index.
    pub fn predict_class(&self, x: &FeatureVector) -> Result<TargetClass> {
        let p = self.predict(x)?;
        Ok(TargetClass(argmax(&p)))
    }

    fn check_dim(&self, actual: usize) -> Result<()> {
        if actual != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual,
            });
        }
        Ok(())
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Outputs must sum to 1 within 1e-6 and be entrywise >= -1e-9.
fn validate_probabilities(p: &[f64], num_classes: usize) -> Result<()> {
    if p.len() != num_classes {
        return Err(Error::DimensionMismatch {
            expected: num_classes,
            actual: p.len(),
        });
    }
    let sum: f64 = p.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < -1e-9) {
        return Err(Error::NumericalFailure(format!(
            "invalid probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Closed-form model families for oracle-verified tests.
///
/// All kinds are binary with a softmax link over (0, score): the class-1 score
/// is the stated form and the class-0 score is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SyntheticModelSpec {
    /// Ignores the input; always returns `probs`.
    Constant { probs: Vec<f64> },
    /// score_1(x) = coefficients . x + intercept
    Linear {
        coefficients: Vec<f64>,
        intercept: f64,
    },
    /// score_1(x) = coefficients . x + intercept + sum_{i<j} pairwise[(i,j)] x_i x_j
    LinearPlusPairwise {
        coefficients: Vec<f64>,
        intercept: f64,
        pairwise: Vec<(usize, usize, f64)>,
    },
}

struct SyntheticModel {
    spec: SyntheticModelSpec,
    dim: usize,
    num_classes: usize,
}

impl ProbModel for SyntheticModel {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        match &self.spec {
            SyntheticModelSpec::Constant { probs } => probs.clone(),
            SyntheticModelSpec::Linear {
                coefficients,
                intercept,
            } => {
                let s: f64 = coefficients.iter().zip(x).map(|(c, v)| c * v).sum::<f64>() + intercept;
                softmax(&[0.0, s])
            }
            SyntheticModelSpec::LinearPlusPairwise {
                coefficients,
                intercept,
                pairwise,
            } => {
                let mut s: f64 =
                    coefficients.iter().zip(x).map(|(c, v)| c * v).sum::<f64>() + intercept;
                for (i, j, w) in pairwise {
                    s += w * x[*i] * x[*j];
                }
                softmax(&[0.0, s])
            }
        }
    }
}

/// Build a counted model from a closed-form spec; `d` is the input dimension.
pub fn make_synthetic(spec: SyntheticModelSpec, d: usize) -> Result<CountedModel> {
    let num_classes = match &spec {
        SyntheticModelSpec::Constant { probs } => {
            if probs.is_empty() {
                return Err(Error::InvalidParameter("constant model needs >= 1 class".into()));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|p| *p < 0.0) {
                return Err(Error::InvalidParameter(
                    "constant model probabilities must be a distribution".into(),
                ));
            }
            probs.len()
        }
        SyntheticModelSpec::Linear { coefficients, .. } => {
            if coefficients.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: coefficients.len(),
                });
            }
            2
        }
        SyntheticModelSpec::LinearPlusPairwise {
            coefficients,
            pairwise,
            ..
        } => {
            if coefficients.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: coefficients.len(),
                });
            }
            for (i, j, _) in pairwise {
                if *i >= d || *j >= d {
                    return Err(Error::FeatureIndexOutOfRange {
                        index: (*i).max(*j),
                        d,
                    });
                }
            }
            2
        }
    };
    Ok(CountedModel::new(Box::new(SyntheticModel {
        spec,
        dim: d,
        num_classes,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn constant_model_ignores_input() {
        let m = make_synthetic(
            SyntheticModelSpec::Constant {
                probs: vec![0.25, 0.75],
            },
            3,
        )
        .unwrap();
        assert_eq!(m.predict(&fv(&[0.0, 0.0, 0.0])).unwrap(), vec![0.25, 0.75]);
        assert_eq!(m.predict(&fv(&[9.0, -2.0, 1.0])).unwrap(), vec![0.25, 0.75]);
    }

    #[test]
    fn counter_is_exact_across_single_and_batch() {
        let m = make_synthetic(
            SyntheticModelSpec::Constant {
                probs: vec![0.5, 0.5],
            },
            2,
        )
        .unwrap();
        m.predict(&fv(&[0.0, 0.0])).unwrap();
        m.predict(&fv(&[1.0, 1.0])).unwrap();
        assert_eq!(m.inference_count(), 2);
        m.predict_batch(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]])
            .unwrap();
        assert_eq!(m.inference_count(), 5);
    }

    #[test]
    fn counter_tolerates_concurrent_increments() {
        let m = std::sync::Arc::new(
            make_synthetic(
                SyntheticModelSpec::Constant {
                    probs: vec![1.0],
                },
                1,
            )
            .unwrap(),
        );
        let mut handles = Vec::new();
        for _ in 0..8 {
            let m = m.clone();
            handles.push(std::thread::spawn(move || {
                for _ in 0..250 {
                    m.predict(&fv(&[0.0])).unwrap();
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(m.inference_count(), 2000);
    }

    #[test]
    fn linear_model_is_monotone_in_weighted_feature() {
        let m = make_synthetic(
            SyntheticModelSpec::Linear {
                coefficients: vec![1.0, 0.0],
                intercept: 0.0,
            },
            2,
        )
        .unwrap();
        let p_low = m.predict(&fv(&[-1.0, 5.0])).unwrap()[1];
        let p_mid = m.predict(&fv(&[0.0, -3.0])).unwrap()[1];
        let p_high = m.predict(&fv(&[2.0, 0.0])).unwrap()[1];
        assert!(p_low < p_mid && p_mid < p_high);
    }

    #[test]
    fn pairwise_model_matches_hand_formula() {
        let coefs = vec![0.5, -1.0, 2.0];
        let pairs = vec![(0, 1, 0.7), (1, 2, -0.4)];
        let m = make_synthetic(
            SyntheticModelSpec::LinearPlusPairwise {
                coefficients: coefs.clone(),
                intercept: 0.3,
                pairwise: pairs.clone(),
            },
            3,
        )
        .unwrap();
        let points = [
            [0.1, 0.2, 0.3],
            [-1.0, 0.5, 2.0],
            [0.0, 0.0, 0.0],
            [1.5, -0.5, 0.25],
            [2.0, 2.0, -2.0],
        ];
        for pt in points {
            let s = 0.3
                + coefs.iter().zip(&pt).map(|(c, v)| c * v).sum::<f64>()
                + 0.7 * pt[0] * pt[1]
                - 0.4 * pt[1] * pt[2];
            let expect = 1.0 / (1.0 + (-s).exp());
            let got = m.predict(&fv(&pt)).unwrap()[1];
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = make_synthetic(
            SyntheticModelSpec::Linear {
                coefficients: vec![1.0, 2.0],
                intercept: 0.0,
            },
            2,
        )
        .unwrap();
        assert!(matches!(
            m.predict(&fv(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        let before = m.inference_count();
        assert_eq!(before, 0, "failed calls must not count");
    }

    #[test]
    fn invalid_probability_vector_is_caught() {
        struct Bad;
        impl ProbModel for Bad {
            fn input_dim(&self) -> usize {
                1
            }
            fn num_classes(&self) -> usize {
                2
            }
            fn predict_row(&self, _x: &[f64]) -> Vec<f64> {
                vec![0.9, 0.3]
            }
        }
        let m = CountedModel::new(Box::new(Bad));
        assert!(m.predict(&fv(&[0.0])).is_err());
    }
}
