//! The frozen point classifier used to score and steer generations.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::CHECKPOINT_FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::grad::{softmax_cross_entropy, AdamState, Graph, Tensor, Var};
use crate::nn::{Activation, Dense, DenseJson, Mlp};
use crate::rng::RngStream;
use crate::scenario::LabeledDataset;

/// Per-dimension standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(Error::Shape(format!(
                "mean has {} entries, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("normalization mean"));
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "standard deviations must be positive and finite, got {std:?}"
            )));
        }
        Ok(Self { mean, std })
    }

    /// Mean and population standard deviation of `points`.
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::InvalidArgument("no points to fit statistics on".into()));
        };
        let d = first.len();
        let n = points.len() as f64;
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for p in points {
            for ((s, v), m) in var.iter_mut().zip(p).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        Self::new(mean, var.into_iter().map(|s| (s / n).sqrt()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }
}

/// `(x − mean) / std` per column, inside the graph so gradients pass through.
pub fn psi_transform<'g>(x: Var<'g>, stats: &NormStats) -> Result<Var<'g>> {
    let cols = x.shape().last().copied().unwrap_or(0);
    if cols != stats.dim() {
        return Err(Error::Shape(format!(
            "input has {cols} features, statistics have {}",
            stats.dim()
        )));
    }
    let g = x.graph();
    let neg_mean = Tensor::vector(stats.mean.iter().map(|m| -m).collect())?;
    let inv_std = Tensor::vector(stats.std.iter().map(|s| 1.0 / s).collect())?;
    x.add_row(g.constant(neg_mean))?.mul_row(g.constant(inv_std))
}

/// Anything that maps points to class logits through the graph. Forging
/// only needs this, which lets tests substitute hand-built classifiers.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// Logits `[m, K]` for points `[m, d]`.
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>>;

    fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_dim())?;
        let g = Graph::new();
        Ok(self.logits(&g, g.constant(x.clone()))?.value())
    }

    /// Argmax per row; ties go to the lowest class index.
    fn predict_class(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_logits(x)?))
    }
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn check_input(x: &Tensor, dim: usize) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != dim {
        return Err(Error::Shape(format!(
            "expected points of shape [m, {dim}], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Fraction of `ds` whose predicted class equals its label.
pub fn accuracy(clf: &impl Classifier, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
    }
    let pred = clf.predict_class(&points_tensor(&ds.points, ds.dim)?)?;
    let hits = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}

pub(crate) fn points_tensor(points: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape(format!("points must have dimension {dim}")));
    }
    Tensor::new(&[points.len(), dim], points.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 200,
            batch_size: 64,
            lr: 5e-3,
        }
    }
}

/// A tanh MLP applied after training-set standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    stats: NormStats,
    net: Mlp,
}

impl ClassifierModel {
    pub fn new(stats: NormStats, net: Mlp) -> Result<Self> {
        if net.input_width() != stats.dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, statistics have {}",
                net.input_width(),
                stats.dim()
            )));
        }
        if net.output_width() < 2 {
            return Err(Error::InvalidArgument("a classifier needs at least 2 classes".into()));
        }
        Ok(Self { stats, net })
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.net.hidden_widths()
    }

    pub fn zero_output_layer(&mut self) {
        self.net.zero_output_layer();
    }

    /// Activations after the last hidden layer, `[m, hidden.last()]`.
    pub fn penultimate_features(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_dim())?;
        let g = Graph::new();
        let net = self.net.bind(&g, false);
        let z = psi_transform(g.constant(x.clone()), &self.stats)?;
        Ok(net.hidden(z)?.value())
    }

    /// Applies only the output layer to precomputed features.
    pub fn logits_from_features(&self, features: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let net = self.net.bind(&g, false);
        Ok(net.output(g.constant(features.clone()))?.value())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = ClassifierCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "classifier".into(),
            num_classes: self.num_classes(),
            hidden: self.hidden(),
            norm: self.stats.clone(),
            layers: self.net.layers().iter().map(Dense::to_json).collect(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: ClassifierCheckpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        if ck.kind != "classifier" {
            return Err(Error::Checkpoint(format!("expected a classifier, found {:?}", ck.kind)));
        }
        let stats = NormStats::new(ck.norm.mean, ck.norm.std)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let layers = ck
            .layers
            .iter()
            .map(Dense::from_json)
            .collect::<Result<Vec<_>>>()?;
        let net = Mlp::from_layers(layers, Activation::Tanh)?;
        if net.output_width() != ck.num_classes || net.hidden_widths() != ck.hidden {
            return Err(Error::Checkpoint("layer widths do not match header".into()));
        }
        Self::new(stats, net).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Classifier for ClassifierModel {
    fn num_classes(&self) -> usize {
        self.net.output_width()
    }

    fn input_dim(&self) -> usize {
        self.stats.dim()
    }

    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let net = self.net.bind(g, false);
        net.forward(psi_transform(x, &self.stats)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierCheckpoint {
    format_version: u32,
    kind: String,
    num_classes: usize,
    hidden: Vec<usize>,
    norm: NormStats,
    layers: Vec<DenseJson>,
}

/// Fits a classifier over all `num_classes` classes by minibatch Adam on
/// softmax cross-entropy. Every class must appear in `ds`.
pub fn train_classifier(
    ds: &LabeledDataset,
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<ClassifierModel> {
    fit_classifier(ds, num_classes, cfg, seed).map(|(m, _)| m)
}

/// [`train_classifier`], also returning the mean loss of every epoch.
pub fn fit_classifier(
    ds: &LabeledDataset,
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(ClassifierModel, Vec<f64>)> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("a classifier needs at least 2 classes".into()));
    }
    if let Some(&l) = ds.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {l} out of range for {num_classes} classes"
        )));
    }
    if let Some(k) = (0..num_classes).find(|&k| !ds.labels.contains(&k)) {
        return Err(Error::InvalidArgument(format!("class {k} has no training points")));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.hidden.is_empty() {
        return Err(Error::InvalidArgument(
            "epochs, batch_size and hidden must be nonempty".into(),
        ));
    }
    let stream = RngStream::new(seed);
    let stats = NormStats::fit(&ds.points)?;
    let mut sizes = vec![ds.dim];
    sizes.extend(&cfg.hidden);
    sizes.push(num_classes);
    let net = Mlp::new(&sizes, Activation::Tanh, &mut stream.rng("classifier-init", 0))?;
    let mut model = ClassifierModel::new(stats, net)?;
    let mut adam = AdamState::new(model.net.params());
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream.rng("classifier-epoch", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let pts: Vec<Vec<f64>> = chunk.iter().map(|&i| ds.points[i].clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let grads = {
                let g = Graph::new();
                let net = model.net.bind(&g, true);
                let x = psi_transform(g.constant(points_tensor(&pts, ds.dim)?), &model.stats)?;
                let loss = softmax_cross_entropy(net.forward(x)?, &targets)?;
                let value = loss.item()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite("classifier loss"));
                }
                total += value;
                batches += 1;
                let mut grads = g.backward(loss)?;
                net.vars()
                    .iter()
                    .zip(model.net.params())
                    .map(|(v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect::<Vec<_>>()
            };
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut model.net.params_mut(), &grad_refs, cfg.lr)?;
        }
        curve.push(total / batches as f64);
    }
    Ok((model, curve))
}
