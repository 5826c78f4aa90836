//! Labeled synthetic point clouds with caption vocabularies.
//!
//! Each class is a Gaussian with an optional "background" translation that
//! is applied to a fixed fraction of its samples, and a categorical
//! distribution over captions (token sequences). The built-in scenarios
//! reproduce three failure modes of caption-conditioned generators at toy
//! scale: an ambiguous class name, fine-grained classes whose distinguishing
//! tokens are rare and noisy, and a class whose training data carries a
//! spurious background feature.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, RngStream};

/// Reserved token whose embedding is the unconditional (null) condition.
pub const EMPTY_TOKEN: &str = "";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Background {
    pub offset: Vec<f64>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub label: String,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// Tokens a user would type to ask for this class.
    pub name_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<Background>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caption {
    pub class: usize,
    pub tokens: Vec<String>,
    pub prob: f64,
}

/// A complete scenario. Class ids are positions in `classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Token a forged class token is initialized from.
    #[serde(default)]
    pub base_token: String,
    pub vocab: Vec<String>,
    pub classes: Vec<ClassSpec>,
    pub captions: Vec<Caption>,
}

fn default_dim() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinScenario {
    Ambiguity,
    FineGrained,
    Bias,
}

impl std::str::FromStr for BuiltinScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ambiguity" => Ok(Self::Ambiguity),
            "finegrained" => Ok(Self::FineGrained),
            "bias" => Ok(Self::Bias),
            other => Err(Error::InvalidArgument(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Threshold on axis 1 above which a point shows the background signature
/// of the bias scenario.
pub const BIAS_AXIS1_THRESHOLD: f64 = 1.5;

fn toks(t: &[&str]) -> Vec<String> {
    t.iter().map(|s| s.to_string()).collect()
}

fn iso(dim: usize, var: f64) -> Vec<Vec<f64>> {
    (0..dim)
        .map(|i| (0..dim).map(|j| if i == j { var } else { 0.0 }).collect())
        .collect()
}

fn cap(class: usize, tokens: &[&str], prob: f64) -> Caption {
    Caption {
        class,
        tokens: toks(tokens),
        prob,
    }
}

/// Fixed built-in scenarios.
///
/// * `ambiguity`: `tiger` at (-4,0), `tiger_cat` at (4,0), `house_cat` at
///   (0,4), unit covariance. `[tiger, cat]` is the caption of 80% of tiger
///   points and 20% of tiger_cat points, so the name of tiger_cat decodes
///   to tiger.
/// * `finegrained`: four species on a radius-2 arc, 1.2 apart (chord),
///   covariance 0.16·I. Captions are mostly the shared `[bird]`; the
///   species token appears in 15% of captions and is confused with the
///   next species in another 15%.
/// * `bias`: `dish` at (-1,0) and `cup` at (1,0), covariance 0.25·I; 90%
///   of dish points are shifted by +3 on axis 1.
pub fn builtin_scenario(kind: BuiltinScenario) -> ScenarioSpec {
    match kind {
        BuiltinScenario::Ambiguity => ScenarioSpec {
            name: "ambiguity".into(),
            dim: 2,
            base_token: "cat".into(),
            vocab: toks(&["", "tiger", "cat", "striped", "house"]),
            classes: vec![
                ClassSpec {
                    label: "tiger".into(),
                    mean: vec![-4.0, 0.0],
                    cov: iso(2, 1.0),
                    name_tokens: toks(&["tiger"]),
                    background: None,
                },
                ClassSpec {
                    label: "tiger_cat".into(),
                    mean: vec![4.0, 0.0],
                    cov: iso(2, 1.0),
                    name_tokens: toks(&["tiger", "cat"]),
                    background: None,
                },
                ClassSpec {
                    label: "house_cat".into(),
                    mean: vec![0.0, 4.0],
                    cov: iso(2, 1.0),
                    name_tokens: toks(&["house", "cat"]),
                    background: None,
                },
            ],
            captions: vec![
                cap(0, &["tiger", "cat"], 0.8),
                cap(0, &["tiger"], 0.2),
                cap(1, &["tiger", "cat"], 0.2),
                cap(1, &["striped", "cat"], 0.8),
                cap(2, &["house", "cat"], 1.0),
            ],
        },
        BuiltinScenario::FineGrained => {
            let k = 4;
            let radius = 2.0_f64;
            let step = 2.0 * (1.2 / (2.0 * radius)).asin();
            let center = std::f64::consts::FRAC_PI_2;
            let species: Vec<String> = (0..k).map(|i| format!("sp{i}")).collect();
            let mut vocab = toks(&["", "bird"]);
            vocab.extend(species.iter().cloned());
            let classes = (0..k)
                .map(|i| {
                    let theta = center + (i as f64 - (k as f64 - 1.0) / 2.0) * step;
                    ClassSpec {
                        label: format!("species_{i}"),
                        mean: vec![radius * theta.cos(), radius * theta.sin()],
                        cov: iso(2, 0.16),
                        name_tokens: vec!["bird".into(), species[i].clone()],
                        background: None,
                    }
                })
                .collect();
            let mut captions = Vec::new();
            for i in 0..k {
                captions.push(cap(i, &["bird"], 0.7));
                captions.push(cap(i, &["bird", &species[i]], 0.15));
                captions.push(cap(i, &["bird", &species[(i + 1) % k]], 0.15));
            }
            ScenarioSpec {
                name: "finegrained".into(),
                dim: 2,
                base_token: "bird".into(),
                vocab,
                classes,
                captions,
            }
        }
        BuiltinScenario::Bias => ScenarioSpec {
            name: "bias".into(),
            dim: 2,
            base_token: EMPTY_TOKEN.into(),
            vocab: toks(&["", "dish", "cup"]),
            classes: vec![
                ClassSpec {
                    label: "dish".into(),
                    mean: vec![-1.0, 0.0],
                    cov: iso(2, 0.25),
                    name_tokens: toks(&["dish"]),
                    background: Some(Background {
                        offset: vec![0.0, 3.0],
                        prob: 0.9,
                    }),
                },
                ClassSpec {
                    label: "cup".into(),
                    mean: vec![1.0, 0.0],
                    cov: iso(2, 0.25),
                    name_tokens: toks(&["cup"]),
                    background: None,
                },
            ],
            captions: vec![cap(0, &["dish"], 1.0), cap(1, &["cup"], 1.0)],
        },
    }
}

impl ScenarioSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }

    /// Caption distribution of one class, in declaration order.
    pub fn captions_of(&self, class: usize) -> impl Iterator<Item = &Caption> {
        self.captions.iter().filter(move |c| c.class == class)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("scenario {}: {m}", self.name)));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.classes.len() < 2 {
            return bad("need at least two classes".into());
        }
        if self.vocab.first().map(String::as_str) != Some(EMPTY_TOKEN) {
            return bad("vocab must start with the empty token".into());
        }
        let vocab: BTreeSet<&str> = self.vocab.iter().map(String::as_str).collect();
        if vocab.len() != self.vocab.len() {
            return bad("duplicate vocab entries".into());
        }
        for t in &self.vocab {
            if t.chars().any(|c| c.is_whitespace() || c == ',' || c == '"') {
                return bad(format!("token {t:?} contains a separator character"));
            }
        }
        if !vocab.contains(self.base_token.as_str()) {
            return bad(format!("base token {:?} not in vocab", self.base_token));
        }
        let labels: BTreeSet<&str> = self.classes.iter().map(|c| c.label.as_str()).collect();
        if labels.len() != self.classes.len() {
            return bad("duplicate class labels".into());
        }
        for c in &self.classes {
            if c.mean.len() != self.dim {
                return bad(format!("class {}: mean has wrong length", c.label));
            }
            check_spd(&c.cov, self.dim).map_err(|e| {
                Error::InvalidArgument(format!("scenario {}: class {}: {e}", self.name, c.label))
            })?;
            if c.name_tokens.is_empty() {
                return bad(format!("class {}: empty name", c.label));
            }
            if let Some(t) = c.name_tokens.iter().find(|t| !vocab.contains(t.as_str())) {
                return bad(format!("class {}: name token {t:?} not in vocab", c.label));
            }
            if let Some(b) = &c.background {
                if b.offset.len() != self.dim || !(0.0..=1.0).contains(&b.prob) {
                    return bad(format!("class {}: invalid background", c.label));
                }
            }
        }
        for cap in &self.captions {
            if cap.class >= self.classes.len() {
                return bad(format!("caption for unknown class {}", cap.class));
            }
            if cap.tokens.is_empty() || !(cap.prob > 0.0) {
                return bad("captions need tokens and positive probability".into());
            }
            if let Some(t) = cap.tokens.iter().find(|t| !vocab.contains(t.as_str())) {
                return bad(format!("caption token {t:?} not in vocab"));
            }
        }
        for k in 0..self.classes.len() {
            let total: f64 = self.captions_of(k).map(|c| c.prob).sum();
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("caption probabilities of class {k} sum to {total}"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }
}

fn check_spd(cov: &[Vec<f64>], dim: usize) -> std::result::Result<DMatrix<f64>, String> {
    if cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
        return Err("covariance has wrong shape".into());
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| cov[i][j]);
    if (&m - m.transpose()).amax() > 1e-12 {
        return Err("covariance is not symmetric".into());
    }
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    if !(min_eig > 0.0) {
        return Err(format!("covariance is not positive definite (min eigenvalue {min_eig})"));
    }
    m.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| "covariance is not positive definite".into())
}

/// Points with class labels and captions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub captions: Vec<Vec<String>>,
}

impl LabeledDataset {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            points: Vec::new(),
            labels: Vec::new(),
            captions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: Vec<f64>, label: usize, caption: Vec<String>) {
        self.points.push(point);
        self.labels.push(label);
        self.captions.push(caption);
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            dim: self.dim,
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            captions: idx.iter().map(|&i| self.captions[i].clone()).collect(),
        }
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn points_of(&self, class: usize) -> Vec<Vec<f64>> {
        self.indices_of(class)
            .into_iter()
            .map(|i| self.points[i].clone())
            .collect()
    }

    pub fn extend(&mut self, other: &LabeledDataset) {
        self.points.extend(other.points.iter().cloned());
        self.labels.extend(&other.labels);
        self.captions.extend(other.captions.iter().cloned());
    }

    /// CSV with header `x0,x1,...,label,caption`; caption tokens are joined
    /// by single spaces.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        header.push("caption".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.points[i].iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.captions[i].join(" "));
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        let n = header.len();
        if n < 3 || &header[n - 2] != "label" || &header[n - 1] != "caption" {
            return Err(Error::InvalidArgument(
                "dataset csv header must be x0,...,label,caption".into(),
            ));
        }
        let dim = n - 2;
        for (i, h) in header.iter().take(dim).enumerate() {
            if h != format!("x{i}") {
                return Err(Error::InvalidArgument(format!("unexpected column {h:?}")));
            }
        }
        let mut ds = LabeledDataset::empty(dim);
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
            };
            let point = (0..dim).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            if point.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset csv"));
            }
            let label = rec[dim]
                .parse::<usize>()
                .map_err(|e| Error::InvalidArgument(format!("bad label: {e}")))?;
            let caption = rec[dim + 1].split(' ').map(str::to_string).collect();
            ds.push(point, label, caption);
        }
        Ok(ds)
    }
}

/// Draws `n_per_class` points per class. A pure function of its inputs.
pub fn sample_dataset(spec: &ScenarioSpec, n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    spec.validate()?;
    let stream = RngStream::new(seed);
    let mut ds = LabeledDataset::empty(spec.dim);
    for (k, class) in spec.classes.iter().enumerate() {
        let chol = check_spd(&class.cov, spec.dim).map_err(Error::InvalidArgument)?;
        let mean = DVector::from_column_slice(&class.mean);
        let caps: Vec<&Caption> = spec.captions_of(k).collect();
        let mut rng = stream.rng("dataset", k as u64);
        for _ in 0..n_per_class {
            let z = DVector::from_vec(standard_normal(&mut rng, spec.dim));
            let mut x = &mean + &chol * z;
            if let Some(bg) = &class.background {
                if rng.random::<f64>() < bg.prob {
                    x += DVector::from_column_slice(&bg.offset);
                }
            }
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = caps[caps.len() - 1];
            for c in &caps {
                acc += c.prob;
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            ds.push(x.as_slice().to_vec(), k, chosen.tokens.clone());
        }
    }
    Ok(ds)
}

/// Per-class stratified split. Each class contributes
/// `clamp(round(test_frac · n_k), 1, n_k - 1)` points to the test half.
pub fn train_test_split(
    ds: &LabeledDataset,
    test_frac: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_frac must be in (0,1), got {test_frac}"
        )));
    }
    let stream = RngStream::new(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for k in 0..ds.class_count() {
        let mut idx = ds.indices_of(k);
        let n = idx.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {k} has {n} points; need at least 2 to split"
            )));
        }
        let n_test = ((test_frac * n as f64).round() as usize).clamp(1, n - 1);
        let mut rng = stream.rng("split", k as u64);
        // Partial Fisher-Yates: the first n_test entries become the test set.
        for i in 0..n_test {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}
