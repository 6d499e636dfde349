//! Feed-forward multilayer perceptron with logistic units trained by
//! backpropagation.
//!
//! Every non-input neuron computes `y_j = f(θ_j + Σ_i w_ij · y_i)` with the
//! logistic `f`. Output deltas are `δ = y(1 - y)(desired - y)`, hidden deltas
//! are `δ_i = y_i(1 - y_i) Σ_j w_ij δ_j`, and updates are
//! `w_ij += η · δ_j · y_i` (thresholds see a constant input of 1). With this
//! sign convention the update descends the half squared error
//! `½ Σ (desired - y)²`.
//!
//! The input layer passes its values through unchanged unless the network is
//! built with `input_activation`, in which case it applies `y_i = f(x_i)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Input, hidden and output sizes of the filter-placement network.
pub const DEFAULT_LAYERS: [usize; 3] = [2048, 16, 8];
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("target {value} of sample {sample} outside [0, 1]")]
    TargetOutOfRange { sample: usize, value: f64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("bad model file: {0}")]
    BadFormat(String),
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u64),
}

const LOGISTIC_CLAMP: f64 = 500.0;
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// `1 / (1 + e^-x)`, clamped so the result stays strictly inside `(0, 1)`.
#[inline]
pub fn logistic(x: f64) -> f64 {
    let x = x.clamp(-LOGISTIC_CLAMP, LOGISTIC_CLAMP);
    (1.0 / (1.0 + (-x).exp())).min(BELOW_ONE)
}

/// Logistic derivative expressed through the unit's output.
#[inline]
pub fn logistic_derivative(y: f64) -> f64 {
    y * (1.0 - y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layer_sizes: Vec<usize>,
    /// `weights[l][i * to + j]` connects neuron `i` of layer `l` to neuron `j` of layer `l + 1`.
    weights: Vec<Vec<f64>>,
    thresholds: Vec<Vec<f64>>,
    input_activation: bool,
}

impl MlpNetwork {
    fn check_sizes(layer_sizes: &[usize]) -> Result<(), NeuralError> {
        if layer_sizes.len() < 2 {
            return Err(NeuralError::ShapeMismatch("a network needs at least 2 layers".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(NeuralError::ShapeMismatch("layer sizes must be positive".into()));
        }
        Ok(())
    }

    /// A network with every weight and threshold at zero.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self, NeuralError> {
        Self::check_sizes(layer_sizes)?;
        let weights = layer_sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect();
        let thresholds = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(MlpNetwork {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            thresholds,
            input_activation: false,
        })
    }

    /// Weights and thresholds drawn uniformly from `[-range, range]`.
    pub fn random(layer_sizes: &[usize], seed: u64, range: f64) -> Result<Self, NeuralError> {
        let mut net = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.weights.iter_mut().chain(net.thresholds.iter_mut()) {
            for w in layer.iter_mut() {
                *w = rng.random_range(-range..=range);
            }
        }
        Ok(net)
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        thresholds: Vec<Vec<f64>>,
        input_activation: bool,
    ) -> Result<Self, NeuralError> {
        Self::check_sizes(&layer_sizes)?;
        if weights.len() != layer_sizes.len() - 1 || thresholds.len() != layer_sizes.len() - 1 {
            return Err(NeuralError::ShapeMismatch(
                "expected one weight matrix and threshold vector per layer pair".into(),
            ));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] {
                return Err(NeuralError::ShapeMismatch(format!(
                    "weights[{l}] has {} entries, expected {}",
                    weights[l].len(),
                    pair[0] * pair[1]
                )));
            }
            if thresholds[l].len() != pair[1] {
                return Err(NeuralError::ShapeMismatch(format!(
                    "thresholds[{l}] has {} entries, expected {}",
                    thresholds[l].len(),
                    pair[1]
                )));
            }
        }
        Ok(MlpNetwork {
            layer_sizes,
            weights,
            thresholds,
            input_activation,
        })
    }

    pub fn with_input_activation(mut self, enabled: bool) -> Self {
        self.input_activation = enabled;
        self
    }

    pub fn input_activation(&self) -> bool {
        self.input_activation
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_len(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn thresholds(&self) -> &[Vec<f64>] {
        &self.thresholds
    }

    #[inline]
    pub fn weight(&self, layer: usize, from: usize, to: usize) -> f64 {
        self.weights[layer][from * self.layer_sizes[layer + 1] + to]
    }

    pub fn set_weight(&mut self, layer: usize, from: usize, to: usize, value: f64) {
        let to_len = self.layer_sizes[layer + 1];
        self.weights[layer][from * to_len + to] = value;
    }

    pub fn set_threshold(&mut self, layer: usize, neuron: usize, value: f64) {
        self.thresholds[layer][neuron] = value;
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NeuralError> {
        if x.len() != self.input_len() {
            return Err(NeuralError::ShapeMismatch(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_len()
            )));
        }
        Ok(())
    }

    /// Outputs of every layer, input layer first.
    pub fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, NeuralError> {
        self.check_input(x)?;
        let first = if self.input_activation {
            x.iter().map(|&v| logistic(v)).collect()
        } else {
            x.to_vec()
        };
        let mut outputs = Vec::with_capacity(self.layer_sizes.len());
        outputs.push(first);
        for (l, (weights, thresholds)) in self.weights.iter().zip(&self.thresholds).enumerate() {
            let to_len = self.layer_sizes[l + 1];
            let prev = &outputs[l];
            let mut sums = thresholds.clone();
            for (i, &y) in prev.iter().enumerate() {
                if y == 0.0 {
                    continue;
                }
                let row = &weights[i * to_len..(i + 1) * to_len];
                for (s, w) in sums.iter_mut().zip(row) {
                    *s += w * y;
                }
            }
            outputs.push(sums.into_iter().map(logistic).collect());
        }
        Ok(outputs)
    }

    /// Output-layer activations.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        Ok(self.forward_trace(x)?.pop().expect("trace has an output layer"))
    }

    /// Error deltas and the update factors `δ_j · y_i` for one sample.
    pub fn backprop(&self, x: &[f64], desired: &[f64]) -> Result<Gradients, NeuralError> {
        if desired.len() != self.output_len() {
            return Err(NeuralError::ShapeMismatch(format!(
                "target has {} values, network outputs {}",
                desired.len(),
                self.output_len()
            )));
        }
        let mut outputs = self.forward_trace(x)?;
        let layers = self.weights.len();
        let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); layers];

        let out = &outputs[layers];
        deltas[layers - 1] = out
            .iter()
            .zip(desired)
            .map(|(&y, &d)| logistic_derivative(y) * (d - y))
            .collect();
        for l in (0..layers - 1).rev() {
            // neurons of layer l + 1, fed forward into layer l + 2 by weights[l + 1]
            let next = &deltas[l + 1];
            let to_len = self.layer_sizes[l + 2];
            let w = &self.weights[l + 1];
            deltas[l] = outputs[l + 1]
                .iter()
                .enumerate()
                .map(|(i, &y)| {
                    let row = &w[i * to_len..(i + 1) * to_len];
                    let back: f64 = row.iter().zip(next).map(|(w, d)| w * d).sum();
                    logistic_derivative(y) * back
                })
                .collect();
        }

        let weights = (0..layers)
            .map(|l| {
                let y = &outputs[l];
                let d = &deltas[l];
                let mut g = Vec::with_capacity(y.len() * d.len());
                for &yi in y {
                    g.extend(d.iter().map(|&dj| dj * yi));
                }
                g
            })
            .collect();
        Ok(Gradients {
            thresholds: deltas.clone(),
            deltas,
            weights,
            output: outputs.pop().expect("output layer"),
        })
    }

    /// `w_ij += η · δ_j · y_i` for every weight; `θ_j += η · δ_j` for every threshold.
    pub fn apply_update(&mut self, grads: &Gradients, eta: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            for (w, g) in w.iter_mut().zip(g) {
                *w += eta * g;
            }
        }
        for (t, g) in self.thresholds.iter_mut().zip(&grads.thresholds) {
            for (t, g) in t.iter_mut().zip(g) {
                *t += eta * g;
            }
        }
    }

    /// Mean over samples and output components of `(desired - y)²`.
    pub fn mse(&self, samples: &[Pair<'_>]) -> Result<f64, NeuralError> {
        if samples.is_empty() {
            return Err(NeuralError::EmptyTrainingSet);
        }
        let mut sum = 0.0;
        for (x, d) in samples {
            let y = self.forward(x)?;
            if d.len() != y.len() {
                return Err(NeuralError::ShapeMismatch("target length".into()));
            }
            sum += y.iter().zip(d.iter()).map(|(y, d)| (d - y).powi(2)).sum::<f64>();
        }
        Ok(sum / (samples.len() * self.output_len()) as f64)
    }
}

/// Per-sample update factors produced by [`MlpNetwork::backprop`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Error delta of every non-input neuron, per layer.
    pub deltas: Vec<Vec<f64>>,
    /// `δ_j · y_i`, laid out like the network's weights.
    pub weights: Vec<Vec<f64>>,
    /// `δ_j`, laid out like the network's thresholds.
    pub thresholds: Vec<Vec<f64>>,
    /// Network output for the sample.
    pub output: Vec<f64>,
}

impl Gradients {
    fn zeros_like(net: &MlpNetwork) -> Self {
        Gradients {
            deltas: Vec::new(),
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            thresholds: net.thresholds.iter().map(|t| vec![0.0; t.len()]).collect(),
            output: Vec::new(),
        }
    }

    fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        for (a, b) in self.thresholds.iter_mut().zip(&other.thresholds) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
    }

    fn divide(&mut self, n: f64) {
        for v in self.weights.iter_mut().chain(self.thresholds.iter_mut()) {
            v.iter_mut().for_each(|a| *a /= n);
        }
    }
}

/// An (input, desired output) training pair.
pub type Pair<'a> = (&'a [f64], &'a [f64]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Update after every sample, in a freshly shuffled order each epoch.
    Online,
    /// One update per epoch with the per-sample updates averaged.
    #[default]
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub mode: TrainMode,
    pub max_epochs: usize,
    /// Training stops once the epoch MSE falls below this value.
    pub error_limit: f64,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    pub init_range: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.2,
            mode: TrainMode::Batch,
            max_epochs: 5000,
            error_limit: 1e-4,
            shuffle_seed: 0,
            init_seed: 0,
            init_range: 0.1,
        }
    }
}

/// Learning rates outside this band are accepted with a warning.
pub const RECOMMENDED_LEARNING_RATE: (f64, f64) = (0.05, 0.3);

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(NeuralError::InvalidConfig(format!(
                "learning rate {} outside (0, 1)",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(NeuralError::InvalidConfig("max_epochs must be positive".into()));
        }
        if !(self.error_limit >= 0.0) {
            return Err(NeuralError::InvalidConfig("error_limit must be non-negative".into()));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return Err(NeuralError::InvalidConfig("init_range must be non-negative".into()));
        }
        let (lo, hi) = RECOMMENDED_LEARNING_RATE;
        if self.learning_rate < lo || self.learning_rate > hi {
            log::warn!(
                "learning rate {} is outside the usual band [{lo}, {hi}]",
                self.learning_rate
            );
        }
        Ok(())
    }

    /// A freshly initialized network for this configuration.
    pub fn init_network(&self, layer_sizes: &[usize]) -> Result<MlpNetwork, NeuralError> {
        MlpNetwork::random(layer_sizes, self.init_seed, self.init_range)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ErrorLimit,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training-set MSE after each epoch.
    pub train_mse: Vec<f64>,
    pub validation_mse: Option<f64>,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn final_train_mse(&self) -> f64 {
        *self.train_mse.last().expect("at least one epoch")
    }
}

fn check_samples(net: &MlpNetwork, samples: &[Pair<'_>]) -> Result<(), NeuralError> {
    for (k, (x, d)) in samples.iter().enumerate() {
        if x.len() != net.input_len() || d.len() != net.output_len() {
            return Err(NeuralError::ShapeMismatch(format!(
                "sample {k} has shape ({}, {}), network is ({}, {})",
                x.len(),
                d.len(),
                net.input_len(),
                net.output_len()
            )));
        }
        if let Some(&value) = d.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(NeuralError::TargetOutOfRange { sample: k, value });
        }
    }
    Ok(())
}

/// Runs one epoch of the configured mode.
pub fn train_epoch(
    net: &mut MlpNetwork,
    samples: &[Pair<'_>],
    mode: TrainMode,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(), NeuralError> {
    match mode {
        TrainMode::Online => {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(rng);
            for k in order {
                let (x, d) = samples[k];
                let g = net.backprop(x, d)?;
                net.apply_update(&g, eta);
            }
        }
        TrainMode::Batch => {
            let mut total = Gradients::zeros_like(net);
            for (x, d) in samples {
                total.accumulate(&net.backprop(x, d)?);
            }
            total.divide(samples.len() as f64);
            net.apply_update(&total, eta);
        }
    }
    Ok(())
}

/// Trains until the epoch MSE drops below `error_limit` or `max_epochs` is reached.
pub fn train(
    mut net: MlpNetwork,
    samples: &[Pair<'_>],
    validation: Option<&[Pair<'_>]>,
    cfg: &TrainConfig,
) -> Result<(MlpNetwork, TrainReport), NeuralError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(NeuralError::EmptyTrainingSet);
    }
    check_samples(&net, samples)?;
    if let Some(v) = validation {
        check_samples(&net, v)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut curve = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        train_epoch(&mut net, samples, cfg.mode, cfg.learning_rate, &mut rng)?;
        let mse = net.mse(samples)?;
        curve.push(mse);
        if epoch % 500 == 0 {
            log::debug!("epoch {epoch}: training mse {mse:.3e}");
        }
        if mse < cfg.error_limit {
            stop_reason = StopReason::ErrorLimit;
            break;
        }
    }
    let validation_mse = match validation {
        Some(v) if !v.is_empty() => Some(net.mse(v)?),
        _ => None,
    };
    let report = TrainReport {
        epochs_run: curve.len(),
        train_mse: curve,
        validation_mse,
        stop_reason,
    };
    Ok((net, report))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u64,
    layers: Vec<usize>,
    activation: String,
    input_activation: bool,
    weights: Vec<Vec<f64>>,
    thresholds: Vec<Vec<f64>>,
}

/// Serializes a network to the versioned JSON model format.
pub fn save_model(net: &MlpNetwork) -> Vec<u8> {
    let file = ModelFile {
        version: MODEL_VERSION.into(),
        layers: net.layer_sizes.clone(),
        activation: "logistic".into(),
        input_activation: net.input_activation,
        weights: net.weights.clone(),
        thresholds: net.thresholds.clone(),
    };
    serde_json::to_vec(&file).expect("model serializes")
}

pub fn load_model(bytes: &[u8]) -> Result<MlpNetwork, NeuralError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| NeuralError::BadFormat(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| NeuralError::BadFormat("missing integer version field".into()))?;
    if version != u64::from(MODEL_VERSION) {
        return Err(NeuralError::UnsupportedVersion(version));
    }
    let file: ModelFile =
        serde_json::from_value(value).map_err(|e| NeuralError::BadFormat(e.to_string()))?;
    if file.activation != "logistic" {
        return Err(NeuralError::BadFormat(format!(
            "unsupported activation {:?}",
            file.activation
        )));
    }
    if file.weights.iter().chain(&file.thresholds).flatten().any(|w| !w.is_finite()) {
        return Err(NeuralError::BadFormat("non-finite parameter".into()));
    }
    MlpNetwork::from_parts(file.layers, file.weights, file.thresholds, file.input_activation)
        .map_err(|e| NeuralError::BadFormat(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// The [2,2,1] fixture, values computed with 40-digit arithmetic.
    fn fixture() -> MlpNetwork {
        MlpNetwork::from_parts(
            vec![2, 2, 1],
            vec![vec![0.1, -0.2, 0.4, 0.3], vec![0.5, -0.6]],
            vec![vec![0.05, -0.1], vec![0.2]],
            false,
        )
        .unwrap()
    }

    const X: [f64; 2] = [0.3, 0.9];

    #[test]
    fn logistic_values() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(logistic(1000.0) < 1.0 && logistic(-1000.0) > 0.0);
        assert_eq!(logistic(1000.0), logistic(500.0));
    }

    #[test]
    fn logistic_derivative_matches_finite_difference() {
        let h = 1e-5;
        for x in [-2.0, 0.0, 2.0] {
            let y = logistic(x);
            let fd = (logistic(x + h) - logistic(x - h)) / (2.0 * h);
            assert!((logistic_derivative(y) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_network_outputs_half() {
        let net = MlpNetwork::zeros(&[5, 3, 4]).unwrap();
        assert_eq!(net.forward(&[0.2, 0.4, 0.1, 1.0, 0.0]).unwrap(), vec![0.5; 4]);
        let mut single = MlpNetwork::zeros(&[1, 1]).unwrap();
        single.set_weight(0, 0, 0, 1.0);
        assert_eq!(single.forward(&[0.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn forward_matches_hand_calculation() {
        let trace = fixture().forward_trace(&X).unwrap();
        assert!((trace[1][0] - 0.608_259_030_746_514_4).abs() < 1e-12);
        assert!((trace[1][1] - 0.527_472_304_344_593_7).abs() < 1e-12);
        assert!((trace[2][0] - 0.546_774_365_708_405_2).abs() < 1e-12);
    }

    #[test]
    fn wrong_input_length_is_shape_mismatch() {
        assert!(matches!(fixture().forward(&[0.1]), Err(NeuralError::ShapeMismatch(_))));
        assert!(matches!(fixture().backprop(&X, &[0.1, 0.2]), Err(NeuralError::ShapeMismatch(_))));
    }

    #[test]
    fn backprop_and_update_match_hand_calculation() {
        let mut net = fixture();
        let g = net.backprop(&X, &[0.8]).unwrap();
        assert!((g.deltas[1][0] - 0.062_752_391_075_161_52).abs() < 1e-12);
        assert!((g.deltas[0][0] - 0.007_476_319_316_138_304).abs() < 1e-12);
        assert!((g.deltas[0][1] + 0.009_384_442_087_907_138).abs() < 1e-12);
        net.apply_update(&g, 0.25);
        assert!((net.weight(1, 0, 0) - 0.509_542_427_143_100_99).abs() < 1e-12);
        assert!((net.weight(1, 1, 0) + 0.591_724_962_919_112_86).abs() < 1e-12);
        assert!((net.thresholds()[1][0] - 0.215_688_097_768_790_38).abs() < 1e-12);
        assert!((net.weight(0, 0, 0) - 0.100_560_723_948_710_37).abs() < 1e-12);
        assert!((net.weight(0, 0, 1) + 0.200_703_833_156_593_04).abs() < 1e-12);
        assert!((net.weight(0, 1, 0) - 0.401_682_171_846_131_12).abs() < 1e-12);
        assert!((net.weight(0, 1, 1) - 0.297_888_500_530_220_9).abs() < 1e-12);
        assert!((net.thresholds()[0][0] - 0.051_869_079_829_034_576).abs() < 1e-12);
        assert!((net.thresholds()[0][1] + 0.102_346_110_521_976_78).abs() < 1e-12);
    }

    #[test]
    fn single_output_delta() {
        // y = 0.5 from a zero network, desired 1 -> 0.25 * 0.5
        let net = MlpNetwork::zeros(&[1, 1]).unwrap();
        let g = net.backprop(&[0.3], &[1.0]).unwrap();
        assert_eq!(g.deltas[0][0], 0.125);
    }

    #[test]
    fn zero_error_gives_zero_updates() {
        let net = fixture();
        let y = net.forward(&X).unwrap();
        let g = net.backprop(&X, &y).unwrap();
        assert!(g.weights.iter().chain(&g.thresholds).flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn update_rule_arithmetic() {
        // δ_j = 0.125, y_i = 0.8, η = 0.2 -> +0.02
        let mut net = MlpNetwork::zeros(&[1, 1]).unwrap();
        let g = Gradients {
            deltas: vec![vec![0.125]],
            weights: vec![vec![0.125 * 0.8]],
            thresholds: vec![vec![0.0]],
            output: vec![],
        };
        net.apply_update(&g, 0.2);
        assert!((net.weight(0, 0, 0) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn no_op_updates() {
        let mut net = fixture();
        let g = net.backprop(&X, &[0.1]).unwrap();
        net.apply_update(&g, 0.0);
        assert_eq!(net, fixture());
        let zero = Gradients::zeros_like(&net);
        net.apply_update(&zero, 0.3);
        assert_eq!(net, fixture());
    }

    fn half_sq_error(net: &MlpNetwork, x: &[f64], d: &[f64]) -> f64 {
        let y = net.forward(x).unwrap();
        0.5 * y.iter().zip(d).map(|(y, d)| (d - y).powi(2)).sum::<f64>()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..4 {
            let net = MlpNetwork::random(&[4, 3, 2], seed, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let d: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
            let g = net.backprop(&x, &d).unwrap();
            for l in 0..2 {
                for k in 0..net.weights[l].len() {
                    let mut plus = net.clone();
                    plus.weights[l][k] += h;
                    let mut minus = net.clone();
                    minus.weights[l][k] -= h;
                    let fd = -(half_sq_error(&plus, &x, &d) - half_sq_error(&minus, &x, &d)) / (2.0 * h);
                    let err = (g.weights[l][k] - fd).abs() / fd.abs().max(g.weights[l][k].abs()).max(1e-8);
                    assert!(err < 1e-4, "layer {l} weight {k}: {} vs {fd}", g.weights[l][k]);
                }
            }
        }
    }

    #[test]
    fn backprop_with_input_activation_matches_finite_differences() {
        let h = 1e-5;
        let net = MlpNetwork::random(&[3, 4, 2], 9, 1.0).unwrap().with_input_activation(true);
        let x = [0.1, 0.7, 0.4];
        let d = [0.9, 0.2];
        let g = net.backprop(&x, &d).unwrap();
        for k in 0..net.weights[0].len() {
            let mut plus = net.clone();
            plus.weights[0][k] += h;
            let mut minus = net.clone();
            minus.weights[0][k] -= h;
            let fd = -(half_sq_error(&plus, &x, &d) - half_sq_error(&minus, &x, &d)) / (2.0 * h);
            assert!((g.weights[0][k] - fd).abs() / fd.abs().max(1e-8) < 1e-4);
        }
    }

    fn xor() -> Vec<(Vec<f64>, Vec<f64>)> {
        vec![
            (vec![0.0, 0.0], vec![0.0]),
            (vec![0.0, 1.0], vec![1.0]),
            (vec![1.0, 0.0], vec![1.0]),
            (vec![1.0, 1.0], vec![0.0]),
        ]
    }

    fn pairs(data: &[(Vec<f64>, Vec<f64>)]) -> Vec<Pair<'_>> {
        data.iter().map(|(x, d)| (x.as_slice(), d.as_slice())).collect()
    }

    #[test]
    fn online_step_descends() {
        let net = MlpNetwork::random(&[3, 4, 2], 3, 0.5).unwrap();
        let x = [0.2, 0.5, 0.9];
        let d = [0.9, 0.1];
        let before = half_sq_error(&net, &x, &d);
        let mut after_net = net.clone();
        after_net.apply_update(&net.backprop(&x, &d).unwrap(), 0.05);
        assert!(half_sq_error(&after_net, &x, &d) <= before);
    }

    #[test]
    fn batch_epoch_is_average_of_updates_at_start_weights() {
        let data = xor();
        let samples = pairs(&data);
        let start = MlpNetwork::random(&[2, 2, 1], 5, 0.5).unwrap();
        let mut batch = start.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_epoch(&mut batch, &samples, TrainMode::Batch, 0.3, &mut rng).unwrap();

        let mut expected = start.clone();
        let all: Vec<Gradients> = samples.iter().map(|(x, d)| start.backprop(x, d).unwrap()).collect();
        for l in 0..2 {
            for k in 0..start.weights[l].len() {
                let avg = all.iter().map(|g| g.weights[l][k]).sum::<f64>() / 4.0;
                expected.weights[l][k] += 0.3 * avg;
            }
            for k in 0..start.thresholds[l].len() {
                let avg = all.iter().map(|g| g.thresholds[l][k]).sum::<f64>() / 4.0;
                expected.thresholds[l][k] += 0.3 * avg;
            }
        }
        for l in 0..2 {
            for (a, b) in batch.weights[l].iter().zip(&expected.weights[l]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_sample_batch_equals_online() {
        let x = vec![0.3, 0.6];
        let d = vec![0.7];
        let samples = [(x.as_slice(), d.as_slice())];
        let start = MlpNetwork::random(&[2, 3, 1], 8, 0.5).unwrap();
        let mut online = start.clone();
        let mut batch = start.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        train_epoch(&mut online, &samples, TrainMode::Online, 0.2, &mut rng).unwrap();
        train_epoch(&mut batch, &samples, TrainMode::Batch, 0.2, &mut rng).unwrap();
        assert_eq!(online, batch);
    }

    #[test]
    fn xor_converges() {
        let data = xor();
        let samples = pairs(&data);
        let cfg = TrainConfig {
            learning_rate: 0.3,
            mode: TrainMode::Online,
            max_epochs: 20_000,
            error_limit: 0.01,
            init_seed: 1,
            init_range: 1.0,
            ..Default::default()
        };
        let net = cfg.init_network(&[2, 2, 1]).unwrap();
        let (net, report) = train(net, &samples, None, &cfg).unwrap();
        assert!(report.final_train_mse() < 0.01, "{report:?}");
        assert_eq!(report.stop_reason, StopReason::ErrorLimit);
        for (x, d) in &data {
            let y = net.forward(x).unwrap()[0];
            assert_eq!(y > 0.5, d[0] > 0.5);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = xor();
        let samples = pairs(&data);
        let cfg = TrainConfig { mode: TrainMode::Online, max_epochs: 300, ..Default::default() };
        let run = || train(cfg.init_network(&[2, 3, 1]).unwrap(), &samples, Some(&samples[..2]), &cfg).unwrap();
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.epochs_run, 300);
        assert_eq!(ra.stop_reason, StopReason::MaxEpochs);
        assert!(ra.validation_mse.is_some());
    }

    #[test]
    fn training_errors() {
        let net = MlpNetwork::zeros(&[2, 1]).unwrap();
        let cfg = TrainConfig::default();
        assert_eq!(train(net.clone(), &[], None, &cfg).unwrap_err(), NeuralError::EmptyTrainingSet);
        let x = [0.1, 0.2];
        let d = [1.5];
        assert!(matches!(
            train(net.clone(), &[(&x, &d)], None, &cfg),
            Err(NeuralError::TargetOutOfRange { sample: 0, .. })
        ));
        let bad = TrainConfig { learning_rate: 1.0, ..cfg };
        assert!(matches!(train(net, &[(&x, &[0.5])], None, &bad), Err(NeuralError::InvalidConfig(_))));
    }

    #[test]
    fn model_round_trip_is_exact() {
        let net = MlpNetwork::random(&[7, 5, 3], 42, 0.1).unwrap();
        let back = load_model(&save_model(&net)).unwrap();
        assert_eq!(back, net);
        let x = [0.1, 0.9, 0.3, 0.33, 0.7, 0.0, 1.0];
        assert_eq!(
            back.forward(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            net.forward(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn model_format_errors() {
        let bytes = save_model(&MlpNetwork::zeros(&[3, 2]).unwrap());
        assert!(matches!(load_model(&bytes[..bytes.len() / 2]), Err(NeuralError::BadFormat(_))));
        let text = String::from_utf8(bytes).unwrap().replace("\"version\":1", "\"version\":999");
        assert_eq!(load_model(text.as_bytes()).unwrap_err(), NeuralError::UnsupportedVersion(999));
        let wrong = br#"{"version":1,"layers":[2,1],"activation":"logistic","input_activation":false,"weights":[[0.0]],"thresholds":[[0.0]]}"#;
        assert!(matches!(load_model(wrong), Err(NeuralError::BadFormat(_))));
    }

    #[test]
    fn model_file_layout() {
        let v: serde_json::Value = serde_json::from_slice(&save_model(&MlpNetwork::zeros(&[2, 2]).unwrap())).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["layers"], serde_json::json!([2, 2]));
        assert_eq!(v["activation"], "logistic");
        assert_eq!(v["input_activation"], false);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn outputs_strictly_inside_unit_interval(seed in 0u64..1000, x in prop::collection::vec(0.0..=1.0f64, 6)) {
            let net = MlpNetwork::random(&[6, 4, 3], seed, 5.0).unwrap();
            for y in net.forward(&x).unwrap() {
                prop_assert!(y > 0.0 && y < 1.0);
            }
        }
    }
}
