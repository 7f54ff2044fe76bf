//! Stochastic amortization: train a network to regress Monte Carlo
//! attributions, then answer new queries in one forward pass with zero
//! black-box inferences.
//!
//! The network input is the feature vector concatenated with a one-hot
//! encoding of the target class, so one network serves all classes. Targets
//! are one cached Monte Carlo explanation per training row (noisy but
//! unbiased); the squared-error fit averages the noise away.
//!
//! A seed ensemble ([`train_ensemble`]) reruns the identical training
//! pipeline k times on the same data and targets, varying only the rng
//! stream; member disagreement is the raw material for deep uncertainty.

use crate::attribution::Explainer;
use crate::data::{AttributionVector, FeatureVector, TargetClass};
use crate::mlp::{fit_regressor, Mlp, MlpSpec, TrainDiag};
use crate::model::CountedModel;
use crate::rng::RngSpec;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where an amortizer's regression targets came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmortizerMeta {
    pub target_method: String,
    pub seed: RngSpec,
}

/// A trained amortized explainer. Evaluation costs 0 black-box inferences;
/// the network's own forward pass is not an inference of the explained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmortizedExplainer {
    net: Mlp,
    d: usize,
    num_classes: usize,
    pub train_meta: AmortizerMeta,
}

impl AmortizedExplainer {
    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn from_parts(net: Mlp, d: usize, num_classes: usize, train_meta: AmortizerMeta) -> Result<Self> {
        if net.input_dim() != d + num_classes || net.output_dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d + num_classes,
                actual: net.input_dim(),
            });
        }
        Ok(Self {
            net,
            d,
            num_classes,
            train_meta,
        })
    }

    fn encode(&self, x: &FeatureVector, y: TargetClass) -> Vec<f64> {
        encode_input(x, y, self.num_classes)
    }

    /// Raw attribution scores for (x, y).
    pub fn predict_scores(&self, x: &FeatureVector, y: TargetClass) -> Result<Vec<f64>> {
        if x.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                actual: x.dim(),
            });
        }
        y.check(self.num_classes)?;
        Ok(self.net.forward(&self.encode(x, y)))
    }
}

fn encode_input(x: &FeatureVector, y: TargetClass, num_classes: usize) -> Vec<f64> {
    let mut input = Vec::with_capacity(x.dim() + num_classes);
    input.extend_from_slice(x.values());
    for c in 0..num_classes {
        input.push(if c == y.index() { 1.0 } else { 0.0 });
    }
    input
}

/// The explainer-contract view: zero inference cost, rng ignored.
pub fn amortized_explain(
    explainer: &AmortizedExplainer,
    x: &FeatureVector,
    y: TargetClass,
) -> Result<AttributionVector> {
    let scores = explainer.predict_scores(x, y)?;
    AttributionVector::new(scores, y, 0)
}

impl Explainer for AmortizedExplainer {
    fn method_name(&self) -> String {
        "amortized".into()
    }

    fn explain(
        &self,
        _model: &CountedModel,
        x: &FeatureVector,
        y: TargetClass,
        _rng: RngSpec,
    ) -> Result<AttributionVector> {
        amortized_explain(self, x, y)
    }
}

/// Architecture defaults for an amortizer at dimension `d` with
/// `num_classes` classes: input d + |Y|, one hidden layer of width 3d,
/// output d.
pub fn amortizer_arch(d: usize, num_classes: usize, seed: RngSpec) -> MlpSpec {
    let mut spec = MlpSpec::default_arch(d + num_classes, d, seed);
    spec.layer_widths = vec![d + num_classes, 3 * d, d];
    spec
}

/// Fit an amortizer by squared-error regression onto one Monte Carlo target
/// per training row. `rng` overrides the seed in `arch`; everything else in
/// `arch` (widths, epochs, batch size, learning rate) is used as given.
pub fn train_amortized(
    features: &[FeatureVector],
    classes: &[TargetClass],
    num_classes: usize,
    targets: &[Vec<f64>],
    target_method: &str,
    arch: &MlpSpec,
    rng: RngSpec,
) -> Result<AmortizedExplainer> {
    let (explainer, _) =
        train_amortized_diag(features, classes, num_classes, targets, target_method, arch, rng)?;
    Ok(explainer)
}

pub fn train_amortized_diag(
    features: &[FeatureVector],
    classes: &[TargetClass],
    num_classes: usize,
    targets: &[Vec<f64>],
    target_method: &str,
    arch: &MlpSpec,
    rng: RngSpec,
) -> Result<(AmortizedExplainer, TrainDiag)> {
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if features.len() != targets.len() || features.len() != classes.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            actual: targets.len().min(classes.len()),
        });
    }
    let d = features[0].dim();
    let mut spec = arch.clone();
    spec.seed = rng;
    if spec.layer_widths[0] != d + num_classes || *spec.layer_widths.last().unwrap() != d {
        return Err(Error::InvalidParameter(format!(
            "amortizer widths must run {} -> .. -> {}, got {:?}",
            d + num_classes,
            d,
            spec.layer_widths
        )));
    }
    let inputs: Vec<Vec<f64>> = features
        .iter()
        .zip(classes)
        .map(|(x, y)| encode_input(x, *y, num_classes))
        .collect();
    let (net, diag) = fit_regressor(&spec, &inputs, targets)?;
    let explainer = AmortizedExplainer {
        net,
        d,
        num_classes,
        train_meta: AmortizerMeta {
            target_method: target_method.to_string(),
            seed: rng,
        },
    };
    Ok((explainer, diag))
}

/// k amortizers trained on identical data and targets under rng streams
/// 1..=k of the base seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerEnsemble {
    pub members: Vec<AmortizedExplainer>,
}

impl ExplainerEnsemble {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }
}

pub fn train_ensemble(
    features: &[FeatureVector],
    classes: &[TargetClass],
    num_classes: usize,
    targets: &[Vec<f64>],
    target_method: &str,
    arch: &MlpSpec,
    k: usize,
) -> Result<ExplainerEnsemble> {
    if k < 2 {
        return Err(Error::InvalidParameter("ensemble needs k >= 2".into()));
    }
    let streams: Vec<RngSpec> = (1..=k as u64).map(|i| arch.seed.substream(i)).collect();
    train_ensemble_with_streams(features, classes, num_classes, targets, target_method, arch, &streams)
}

/// Ensemble training with explicit member streams; duplicated streams produce
/// duplicated members.
pub fn train_ensemble_with_streams(
    features: &[FeatureVector],
    classes: &[TargetClass],
    num_classes: usize,
    targets: &[Vec<f64>],
    target_method: &str,
    arch: &MlpSpec,
    streams: &[RngSpec],
) -> Result<ExplainerEnsemble> {
    let members = streams
        .iter()
        .map(|s| {
            train_amortized(features, classes, num_classes, targets, target_method, arch, *s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExplainerEnsemble { members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_synthetic, SyntheticModelSpec};
    use crate::rng::standard_normal;

    fn toy_problem(n: usize, d: usize, seed: u64) -> (Vec<FeatureVector>, Vec<TargetClass>, Vec<Vec<f64>>) {
        let mut rng = RngSpec::from_seed(seed).rng();
        let features: Vec<FeatureVector> = (0..n)
            .map(|_| {
                FeatureVector::new((0..d).map(|_| standard_normal(&mut rng)).collect()).unwrap()
            })
            .collect();
        let classes: Vec<TargetClass> = (0..n).map(|i| TargetClass(i % 2)).collect();
        // A smooth learnable target: scaled coordinates flipped by class.
        let targets: Vec<Vec<f64>> = features
            .iter()
            .zip(&classes)
            .map(|(x, y)| {
                let sign = if y.index() == 0 { 1.0 } else { -1.0 };
                x.values().iter().map(|v| 0.3 * sign * v).collect()
            })
            .collect();
        (features, classes, targets)
    }

    fn quick_arch(d: usize, seed: u64) -> MlpSpec {
        let mut arch = amortizer_arch(d, 2, RngSpec::from_seed(seed));
        arch.epochs = 300;
        arch.learning_rate = 0.05;
        arch.batch_size = 8;
        arch
    }

    #[test]
    fn zero_targets_regress_to_zero() {
        let (features, classes, _) = toy_problem(24, 3, 1);
        let targets = vec![vec![0.0; 3]; 24];
        let mut arch = quick_arch(3, 2);
        arch.epochs = 2000;
        arch.learning_rate = 0.1;
        let amor = train_amortized(&features, &classes, 2, &targets, "svs-12", &arch, RngSpec::from_seed(3)).unwrap();
        let inputs: Vec<Vec<f64>> = features
            .iter()
            .zip(&classes)
            .map(|(x, y)| encode_input(x, *y, 2))
            .collect();
        let mse = crate::mlp::regression_mse(amor.net(), &inputs, &targets);
        assert!(mse <= 1e-4, "train mse {mse}");
    }

    #[test]
    fn interpolation_regime_reaches_small_train_mse() {
        let (features, classes, targets) = toy_problem(20, 3, 5);
        let mut arch = quick_arch(3, 6);
        // Capacity well above 20 rows, long schedule.
        arch.layer_widths = vec![5, 48, 3];
        arch.epochs = 3000;
        arch.learning_rate = 0.05;
        let amor = train_amortized(&features, &classes, 2, &targets, "svs-12", &arch, RngSpec::from_seed(7)).unwrap();
        let inputs: Vec<Vec<f64>> = features
            .iter()
            .zip(&classes)
            .map(|(x, y)| encode_input(x, *y, 2))
            .collect();
        let mse = crate::mlp::regression_mse(amor.net(), &inputs, &targets);
        assert!(mse <= 1e-3, "train mse {mse}");
    }

    #[test]
    fn training_is_deterministic_in_rng() {
        let (features, classes, targets) = toy_problem(16, 2, 8);
        let arch = quick_arch(2, 9);
        let a = train_amortized(&features, &classes, 2, &targets, "svs-12", &arch, RngSpec::new(5, 1)).unwrap();
        let b = train_amortized(&features, &classes, 2, &targets, "svs-12", &arch, RngSpec::new(5, 1)).unwrap();
        assert_eq!(a.net().params(), b.net().params());
    }

    #[test]
    fn amortized_explain_costs_zero_model_inferences() {
        let (features, classes, targets) = toy_problem(12, 2, 10);
        let mut arch = quick_arch(2, 11);
        arch.epochs = 50;
        let amor = train_amortized(&features, &classes, 2, &targets, "svs-12", &arch, RngSpec::from_seed(12)).unwrap();
        let model = make_synthetic(
            SyntheticModelSpec::Constant {
                probs: vec![0.5, 0.5],
            },
            2,
        )
        .unwrap();
        for x in &features {
            let att = amor.explain(&model, x, TargetClass(1), RngSpec::from_seed(0)).unwrap();
            assert_eq!(att.inference_cost, 0);
            assert_eq!(att.dim(), 2);
        }
        assert_eq!(model.inference_count(), 0);
    }

    #[test]
    fn ensemble_members_differ_by_stream_only() {
        let (features, classes, targets) = toy_problem(16, 2, 13);
        let mut arch = quick_arch(2, 14);
        arch.epochs = 40;
        let ens = train_ensemble(&features, &classes, 2, &targets, "svs-12", &arch, 5).unwrap();
        assert_eq!(ens.size(), 5);
        // Seed sensitivity: some pair of members must disagree somewhere.
        let x = &features[0];
        let outputs: Vec<Vec<f64>> = ens
            .members
            .iter()
            .map(|m| m.predict_scores(x, TargetClass(0)).unwrap())
            .collect();
        let mut max_gap: f64 = 0.0;
        for i in 0..outputs.len() {
            for j in (i + 1)..outputs.len() {
                let gap = outputs[i]
                    .iter()
                    .zip(&outputs[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                max_gap = max_gap.max(gap);
            }
        }
        assert!(max_gap > 0.0);
        // All members accept the same inputs and emit length-d outputs.
        for o in &outputs {
            assert_eq!(o.len(), 2);
        }
    }

    #[test]
    fn forced_identical_streams_give_identical_members() {
        let (features, classes, targets) = toy_problem(12, 2, 15);
        let mut arch = quick_arch(2, 16);
        arch.epochs = 30;
        let stream = RngSpec::new(21, 4);
        let ens = train_ensemble_with_streams(
            &features,
            &classes,
            2,
            &targets,
            "svs-12",
            &arch,
            &[stream, stream],
        )
        .unwrap();
        assert_eq!(
            ens.members[0].net().params(),
            ens.members[1].net().params()
        );
    }

    #[test]
    fn missing_targets_are_rejected() {
        let (features, classes, mut targets) = toy_problem(8, 2, 17);
        targets.pop();
        let arch = quick_arch(2, 18);
        let err = train_amortized(&features, &classes, 2, &targets, "svs-12", &arch, RngSpec::from_seed(19)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }
}
