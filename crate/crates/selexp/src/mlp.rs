//! A small fully-connected network trained by mini-batch SGD.
//!
//! One implementation serves three roles: the tabular black-box classifier
//! (softmax + cross-entropy head), the amortized explainer (linear +
//! squared-error head, vector targets), and the learned uncertainty regressor
//! (same head, scalar targets). Gradients are hand-derived and checked against
//! central finite differences in the tests.

use crate::data::{FeatureVector, TargetClass};
use crate::model::{softmax, CountedModel, ProbModel};
use crate::rng::RngSpec;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed in the post-activation value.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// Output head: what the final linear layer feeds and which loss is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Softmax over the outputs, cross-entropy against a class index.
    SoftmaxCrossEntropy,
    /// Raw outputs, 0.5 * squared L2 distance to a target vector.
    SquaredError,
}

/// Architecture and optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: RngSpec,
}

impl MlpSpec {
    /// The default architecture used throughout: one hidden layer of width
    /// 3 * input_dim.
    pub fn default_arch(input_dim: usize, output_dim: usize, seed: RngSpec) -> Self {
        Self {
            layer_widths: vec![input_dim, 3 * input_dim, output_dim],
            activation: Activation::Tanh,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.05,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 || self.layer_widths.contains(&0) {
            return Err(Error::InvalidParameter(
                "layer_widths needs >= 2 positive entries".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidParameter(
                "learning_rate must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    /// Row-major out x in.
    weights: Vec<f64>,
    biases: Vec<f64>,
    fan_in: usize,
    fan_out: usize,
}

impl Layer {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        // Xavier-uniform keeps tanh pre-activations in range at init.
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weights,
            biases: vec![0.0; fan_out],
            fan_in,
            fan_out,
        }
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.fan_out {
            let row = &self.weights[o * self.fan_in..(o + 1) * self.fan_in];
            let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + self.biases[o];
            out.push(z);
        }
    }
}

/// The network: linear layers with an elementwise activation between them and
/// a linear final layer interpreted by [`Head`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
    head: Head,
}

/// Per-sample training target.
pub enum Target<'a> {
    Class(usize),
    Vector(&'a [f64]),
}

/// Per-epoch average loss on the full training set, recorded after the
/// epoch's updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainDiag {
    pub epoch_losses: Vec<f64>,
}

impl Mlp {
    pub fn init(spec: &MlpSpec, head: Head) -> Result<Self> {
        spec.validate()?;
        let mut rng = spec.seed.rng();
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Layer::init(w[0], w[1], &mut rng))
            .collect();
        Ok(Self {
            layers,
            activation: spec.activation,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.layers.iter().map(|l| l.fan_out));
        widths
    }

    /// Raw output of the final linear layer.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut current = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward(&current, &mut next);
            if l < last {
                for v in next.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            std::mem::swap(&mut current, &mut next);
        }
        current
    }

    /// Class distribution (softmax of the outputs).
    pub fn predict_proba(&self, input: &[f64]) -> Vec<f64> {
        softmax(&self.forward(input))
    }

    fn loss_one(&self, input: &[f64], target: &Target) -> f64 {
        let out = self.forward(input);
        match (self.head, target) {
            (Head::SoftmaxCrossEntropy, Target::Class(y)) => {
                let p = softmax(&out);
                -p[*y].max(1e-300).ln()
            }
            (Head::SquaredError, Target::Vector(t)) => {
                0.5 * out.iter().zip(*t).map(|(o, t)| (o - t) * (o - t)).sum::<f64>()
            }
            _ => panic!("target kind does not match head"),
        }
    }

    /// Average loss over a batch.
    pub fn loss_batch(&self, inputs: &[Vec<f64>], targets: &[Target]) -> f64 {
        let n = inputs.len().max(1) as f64;
        inputs
            .iter()
            .zip(targets)
            .map(|(x, t)| self.loss_one(x, t))
            .sum::<f64>()
            / n
    }

    /// Average loss and parameter gradient over a batch, flattened in the
    /// same order as [`Mlp::params`].
    pub fn grad_batch(&self, inputs: &[Vec<f64>], targets: &[Target]) -> (f64, Vec<f64>) {
        let mut grads = vec![0.0; self.param_count()];
        let mut total_loss = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            total_loss += self.accumulate_grad_one(x, t, &mut grads);
        }
        let n = inputs.len().max(1) as f64;
        for g in &mut grads {
            *g /= n;
        }
        (total_loss / n, grads)
    }

    fn accumulate_grad_one(&self, input: &[f64], target: &Target, grads: &mut [f64]) -> f64 {
        let n_layers = self.layers.len();
        // Forward pass keeping post-activation values per layer.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        let mut buf = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward(acts.last().unwrap(), &mut buf);
            if l < n_layers - 1 {
                for v in buf.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            acts.push(buf.clone());
        }
        let out = acts.last().unwrap();

        // Head loss and gradient at the final pre-activation.
        let (loss, mut delta) = match (self.head, target) {
            (Head::SoftmaxCrossEntropy, Target::Class(y)) => {
                let p = softmax(out);
                let loss = -p[*y].max(1e-300).ln();
                let mut g = p;
                g[*y] -= 1.0;
                (loss, g)
            }
            (Head::SquaredError, Target::Vector(t)) => {
                let g: Vec<f64> = out.iter().zip(*t).map(|(o, t)| o - t).collect();
                let loss = 0.5 * g.iter().map(|v| v * v).sum::<f64>();
                (loss, g)
            }
            _ => panic!("target kind does not match head"),
        };

        // Backward pass.
        let mut offset = self.param_count();
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let layer_params = layer.fan_in * layer.fan_out + layer.fan_out;
            offset -= layer_params;
            let (wg, bg) = grads[offset..offset + layer_params].split_at_mut(layer.fan_in * layer.fan_out);
            let input_act = &acts[l];
            for (o, dv) in delta.iter().enumerate() {
                bg[o] += dv;
                let row = &mut wg[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (g, a) in row.iter_mut().zip(input_act) {
                    *g += dv * a;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.fan_in];
                for (o, dv) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * dv;
                    }
                }
                for (p, a) in prev.iter_mut().zip(&acts[l]) {
                    *p *= self.activation.derivative_from_output(*a);
                }
                delta = prev;
            }
        }
        loss
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.fan_in * l.fan_out + l.fan_out)
            .sum()
    }

    /// Flattened parameters: per layer, weights row-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.fan_in * l.fan_out;
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            l.biases.copy_from_slice(&params[offset..offset + l.fan_out]);
            offset += l.fan_out;
        }
    }

    /// Mini-batch SGD on (inputs, targets). Batches are reshuffled each epoch
    /// from the spec's seed; the recorded epoch loss is evaluated on the full
    /// set after the epoch's updates.
    pub fn fit(&mut self, spec: &MlpSpec, inputs: &[Vec<f64>], targets: &[Target]) -> Result<TrainDiag> {
        spec.validate()?;
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        // Independent stream so init draws stay untouched by shuffling.
        let mut shuffle_rng = spec.seed.substream(u64::MAX).rng();
        let mut params = self.params();
        let mut epoch_losses = Vec::with_capacity(spec.epochs);
        for epoch in 0..spec.epochs {
            let order = crate::rng::permutation(&mut shuffle_rng, inputs.len());
            for batch in order.chunks(spec.batch_size) {
                let bx: Vec<Vec<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
                let bt: Vec<Target> = batch
                    .iter()
                    .map(|&i| match &targets[i] {
                        Target::Class(y) => Target::Class(*y),
                        Target::Vector(v) => Target::Vector(v),
                    })
                    .collect();
                let (_, grads) = self.grad_batch(&bx, &bt);
                for (p, g) in params.iter_mut().zip(&grads) {
                    *p -= spec.learning_rate * g;
                }
                self.set_params(&params);
            }
            let loss = self.loss_batch(inputs, targets);
            if !loss.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            epoch_losses.push(loss);
        }
        Ok(TrainDiag { epoch_losses })
    }
}

/// Train the tabular black-box classifier on (already standardized) rows.
pub fn fit_classifier(
    spec: &MlpSpec,
    features: &[FeatureVector],
    labels: &[TargetClass],
) -> Result<(Mlp, TrainDiag)> {
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = features[0].dim();
    let out = *spec.layer_widths.last().unwrap();
    if spec.layer_widths[0] != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: spec.layer_widths[0],
        });
    }
    for y in labels {
        y.check(out)?;
    }
    let mut net = Mlp::init(spec, Head::SoftmaxCrossEntropy)?;
    let inputs: Vec<Vec<f64>> = features.iter().map(|f| f.values().to_vec()).collect();
    let targets: Vec<Target> = labels.iter().map(|y| Target::Class(y.index())).collect();
    let diag = net.fit(spec, &inputs, &targets)?;
    Ok((net, diag))
}

/// Train a squared-error regressor on raw input/target vectors.
pub fn fit_regressor(
    spec: &MlpSpec,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<(Mlp, TrainDiag)> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if spec.layer_widths[0] != inputs[0].len() {
        return Err(Error::DimensionMismatch {
            expected: inputs[0].len(),
            actual: spec.layer_widths[0],
        });
    }
    let out = *spec.layer_widths.last().unwrap();
    for t in targets {
        if t.len() != out {
            return Err(Error::DimensionMismatch {
                expected: out,
                actual: t.len(),
            });
        }
    }
    let mut net = Mlp::init(spec, Head::SquaredError)?;
    let t: Vec<Target> = targets.iter().map(|v| Target::Vector(v)).collect();
    let diag = net.fit(spec, inputs, &t)?;
    Ok((net, diag))
}

/// Mean per-dimension squared error of the regressor over a set.
pub fn regression_mse(net: &Mlp, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let d = net.output_dim() as f64;
    let n = inputs.len().max(1) as f64;
    inputs
        .iter()
        .zip(targets)
        .map(|(x, t)| {
            let out = net.forward(x);
            out.iter().zip(t).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / d
        })
        .sum::<f64>()
        / n
}

/// A trained classifier exposed through the black-box contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    pub net: Mlp,
}

impl ProbModel for MlpClassifier {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        self.net.predict_proba(x)
    }
}

/// Train an MLP classifier and wrap it behind the inference counter.
pub fn train_mlp(
    spec: &MlpSpec,
    features: &[FeatureVector],
    labels: &[TargetClass],
) -> Result<CountedModel> {
    let (net, _) = fit_classifier(spec, features, labels)?;
    Ok(CountedModel::new(Box::new(MlpClassifier { net })))
}
