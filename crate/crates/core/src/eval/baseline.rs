use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AccuracyWeighting, EvalError, MetricSet};
use crate::numeric::{sigmoid, Adam, AdamConfig, Graph, Init, ParamStore, Tensor};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Full-batch optimizer steps.
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub holdout_fraction: f64,
    /// Reweight the logistic loss by inverse class frequency.
    pub class_weighting: bool,
    pub weighting: AccuracyWeighting,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.05,
            l2: 1e-4,
            holdout_fraction: 0.3,
            class_weighting: true,
            weighting: AccuracyWeighting::Balanced,
            seed: 0,
        }
    }
}

/// Logistic regression over standardized inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn check_matrix(x: &[Vec<f64>], labels: usize) -> Result<usize, EvalError> {
    if x.len() != labels {
        return Err(EvalError::LengthMismatch(x.len(), labels));
    }
    let dim = x.first().map(Vec::len).ok_or(EvalError::SingleClass)?;
    if dim == 0 || x.iter().any(|r| r.len() != dim) {
        return Err(EvalError::LengthMismatch(dim, 0));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(dim)
}

impl LinearClassifier {
    /// Trains with the numeric engine's Adam on the (optionally
    /// class-weighted) logistic loss.
    pub fn fit(x: &[Vec<f64>], labels: &[bool], config: &BaselineConfig) -> Result<Self, EvalError> {
        let dim = check_matrix(x, labels.len())?;
        let n_pos = labels.iter().filter(|&&l| l).count();
        if n_pos == 0 || n_pos == labels.len() {
            return Err(EvalError::SingleClass);
        }
        let n = x.len();
        let mean: Vec<f64> = (0..dim)
            .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let standardized: Vec<f64> = x
            .iter()
            .flat_map(|r| (0..dim).map(|j| (r[j] - mean[j]) / scale[j]).collect::<Vec<_>>())
            .collect();
        let design = Tensor::new(vec![n, dim], standardized)?;
        let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(usize::from(l))).collect();
        let weights: Vec<f64> = labels
            .iter()
            .map(|&l| match (config.class_weighting, l) {
                (false, _) => 1.0,
                (true, true) => n as f64 / (2.0 * n_pos as f64),
                (true, false) => n as f64 / (2.0 * (n - n_pos) as f64),
            })
            .collect();

        let mut store = ParamStore::new();
        let mut rng = substream(config.seed, "baseline-init");
        let w = store.add("w", &[dim, 1], Init::Zeros, &mut rng);
        let b = store.add("b", &[1], Init::Zeros, &mut rng);
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
            &store,
        );
        let zeros = Tensor::zeros(&[n, 1]);
        for _ in 0..config.epochs {
            let mut g = Graph::new(true, 0);
            let xv = g.constant(design.clone());
            let (wv, bv) = (g.param(&store, w), g.param(&store, b));
            let z = g.matmul(xv, wv)?;
            let z = g.add(z, bv)?;
            let zero = g.constant(zeros.clone());
            let logits = g.concat(&[zero, z], 1)?;
            let mut loss = g.cross_entropy(logits, &targets, &weights)?;
            if config.l2 > 0.0 {
                let sq = g.mul(wv, wv)?;
                let pen = g.sum(sq);
                let pen = g.scale(pen, config.l2);
                loss = g.add(loss, pen)?;
            }
            g.backward(loss)?.accumulate_into(&mut store);
            adam.step(&mut store)?;
        }
        Ok(Self {
            mean,
            scale,
            weights: store.get(w).value.data().to_vec(),
            bias: store.get(b).value.item(),
        })
    }

    pub fn decision(&self, row: &[f64]) -> f64 {
        self.bias
            + row
                .iter()
                .enumerate()
                .map(|(j, v)| self.weights[j] * (v - self.mean[j]) / self.scale[j])
                .sum::<f64>()
    }

    /// Positive-class probabilities.
    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| sigmoid(self.decision(r))).collect()
    }
}

/// Stratified split of item indices into `(train, holdout)`.
pub fn stratified_split(labels: &[bool], holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = substream(seed, "holdout");
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * holdout_fraction).round() as usize;
        holdout.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    (train, holdout)
}

/// Fits a [`LinearClassifier`] on a stratified training split and reports
/// metrics on the held-out part.
pub fn baseline_linear(
    x: &[Vec<f64>],
    labels: &[bool],
    config: &BaselineConfig,
) -> Result<(LinearClassifier, MetricSet), EvalError> {
    check_matrix(x, labels.len())?;
    let (train, holdout) = stratified_split(labels, config.holdout_fraction, config.seed);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
        (
            idx.iter().map(|&i| x[i].clone()).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (xt, yt) = pick(&train);
    let (xh, yh) = pick(&holdout);
    let model = LinearClassifier::fit(&xt, &yt, config)?;
    let metrics = MetricSet::from_probabilities(&model.predict_proba(&xh), &yh, config.weighting)?;
    Ok((model, metrics))
}
