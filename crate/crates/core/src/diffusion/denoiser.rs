use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grad::{concat_features, Graph, Tensor, Var};
use crate::nn::{Activation, BoundMlp, Dense, DenseJson, Mlp};
use crate::rng::RngStream;
use crate::scenario::EMPTY_TOKEN;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Token name → embedding. The empty token is always present.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    emb_dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl TokenTable {
    pub fn new(emb_dim: usize, entries: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        if emb_dim == 0 {
            return Err(Error::InvalidArgument("emb_dim must be positive".into()));
        }
        if !entries.contains_key(EMPTY_TOKEN) {
            return Err(Error::InvalidArgument("token table lacks the empty token".into()));
        }
        if let Some((name, _)) = entries.iter().find(|(_, e)| e.len() != emb_dim) {
            return Err(Error::Shape(format!("embedding of {name:?} is not {emb_dim} wide")));
        }
        if entries.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("token table"));
        }
        Ok(Self { emb_dim, entries })
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.entries
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownToken(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.keys().position(|k| k == name)
    }

    /// Adds `name`, failing if it already exists.
    pub fn insert(&mut self, name: &str, embedding: Vec<f64>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArgument(format!("token {name:?} already exists")));
        }
        if embedding.len() != self.emb_dim {
            return Err(Error::Shape(format!(
                "embedding has {} values, table width is {}",
                embedding.len(),
                self.emb_dim
            )));
        }
        self.entries.insert(name.to_string(), embedding);
        Ok(())
    }

    pub fn set(&mut self, name: &str, embedding: Vec<f64>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownToken(name.to_string()))?;
        if embedding.len() != slot.len() {
            return Err(Error::Shape("embedding width mismatch".into()));
        }
        *slot = embedding;
        Ok(())
    }

    /// All embeddings as a `[V, emb_dim]` matrix in name order.
    pub fn matrix(&self) -> Tensor {
        let data = self.entries.values().flatten().copied().collect();
        Tensor::from_raw(vec![self.entries.len(), self.emb_dim], data)
    }

    pub(crate) fn set_matrix(&mut self, m: &Tensor) {
        for (row, emb) in self.entries.values_mut().enumerate() {
            emb.copy_from_slice(m.row(row));
        }
    }

    /// Mean of the prompt's token embeddings, computed outside any graph.
    pub fn embed_prompt(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        let g = Graph::new();
        let bound = BoundTokens::bind(&g, self, None)?;
        Ok(bound.embed_prompt(prompt)?.value().into_data())
    }
}

/// A non-empty token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt(Vec<String>);

impl Prompt {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("prompt must contain a token".into()));
        }
        Ok(Self(tokens))
    }

    /// The unconditional prompt `[""]`.
    pub fn empty() -> Self {
        Self(vec![EMPTY_TOKEN.to_string()])
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.iter().any(|t| t == token)
    }

    /// Tokens joined by spaces; the empty token is written as `<empty>`.
    pub fn display(&self) -> String {
        self.0
            .iter()
            .map(|t| if t.is_empty() { "<empty>" } else { t.as_str() })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token embeddings bound into a graph, one leaf per token.
pub struct BoundTokens<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> BoundTokens<'g> {
    /// Binds every token as a constant, except `trainable` (if given) which
    /// becomes a gradient-tracked leaf.
    pub fn bind(g: &'g Graph, table: &TokenTable, trainable: Option<&str>) -> Result<Self> {
        if let Some(name) = trainable {
            table.get(name)?;
        }
        let vars = table
            .entries
            .iter()
            .map(|(name, e)| {
                let t = Tensor::from_raw(vec![1, table.emb_dim], e.clone());
                let v = g.leaf(t, trainable == Some(name.as_str()));
                (name.clone(), v)
            })
            .collect();
        Ok(Self { vars })
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownToken(name.to_string()))
    }

    /// Mean-pools the prompt's embeddings into a `[1, emb_dim]` condition.
    pub fn embed_prompt(&self, prompt: &Prompt) -> Result<Var<'g>> {
        let mut acc = self.get(&prompt.0[0])?;
        for t in &prompt.0[1..] {
            acc = acc.add(self.get(t)?)?;
        }
        Ok(acc.scale(1.0 / prompt.0.len() as f64))
    }
}

/// Sinusoidal features of step `t`: `[sin(a_k), cos(a_k)]` with
/// `a_k = (t/T)·f_k` and frequencies `f_k` spaced geometrically from 1 to T.
pub fn time_features(t: usize, dim: usize, steps: usize) -> Vec<f64> {
    let half = dim / 2;
    let u = t as f64 / steps as f64;
    let freq = |k: usize| {
        if half <= 1 {
            1.0
        } else {
            (steps as f64).powf(k as f64 / (half - 1) as f64)
        }
    };
    let angles: Vec<f64> = (0..half).map(|k| u * freq(k)).collect();
    angles
        .iter()
        .map(|a| a.sin())
        .chain(angles.iter().map(|a| a.cos()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub emb_dim: usize,
    pub time_emb_dim: usize,
    pub hidden: Vec<usize>,
    pub steps: usize,
    /// Standard deviation of the initial token embeddings.
    pub emb_init_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            emb_dim: 8,
            time_emb_dim: 8,
            hidden: vec![64, 64],
            steps: 50,
            emb_init_std: 1.0,
        }
    }
}

/// Token-conditioned MLP noise predictor together with its schedule.
///
/// The network input is `[x_t, time_features(t), condition]`, the output
/// has the width of `x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDenoiser {
    data_dim: usize,
    time_emb_dim: usize,
    schedule: NoiseSchedule,
    table: TokenTable,
    net: Mlp,
}

impl ConditionalDenoiser {
    pub fn new(cfg: &DenoiserConfig, vocab: &[String], seed: u64) -> Result<Self> {
        if cfg.time_emb_dim < 2 || !cfg.time_emb_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "time_emb_dim must be even and at least 2".into(),
            ));
        }
        let stream = RngStream::new(seed);
        let mut rng = stream.rng("denoiser-tokens", 0);
        let mut entries = BTreeMap::new();
        let mut names: Vec<&str> = vocab.iter().map(String::as_str).collect();
        if !names.contains(&EMPTY_TOKEN) {
            names.insert(0, EMPTY_TOKEN);
        }
        for name in names {
            let e: Vec<f64> = (0..cfg.emb_dim)
                .map(|_| {
                    cfg.emb_init_std
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            entries.insert(name.to_string(), e);
        }
        let table = TokenTable::new(cfg.emb_dim, entries)?;
        let mut sizes = vec![cfg.data_dim + cfg.time_emb_dim + cfg.emb_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.data_dim);
        let net = Mlp::new(&sizes, Activation::Silu, &mut stream.rng("denoiser-net", 0))?;
        Ok(Self {
            data_dim: cfg.data_dim,
            time_emb_dim: cfg.time_emb_dim,
            schedule: make_schedule(cfg.steps)?,
            table,
            net,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn emb_dim(&self) -> usize {
        self.table.emb_dim()
    }

    pub fn time_emb_dim(&self) -> usize {
        self.time_emb_dim
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.net.hidden_widths()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn table(&self) -> &TokenTable {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut TokenTable {
        &mut self.table
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Zeroes the output layer so every prediction is exactly zero.
    pub fn zero_output_layer(&mut self) {
        self.net.zero_output_layer();
    }

    /// A copy with one extra token.
    pub fn with_token(&self, name: &str, embedding: Vec<f64>) -> Result<Self> {
        let mut m = self.clone();
        m.table.insert(name, embedding)?;
        Ok(m)
    }

    /// Binds the network and token table into `g`. Only `trainable_token`
    /// (if any) is gradient-tracked; network weights are constants.
    pub fn bind<'g>(&'g self, g: &'g Graph, trainable_token: Option<&str>) -> Result<BoundDenoiser<'g>> {
        Ok(BoundDenoiser {
            model: self,
            net: self.net.bind(g, false),
            tokens: BoundTokens::bind(g, &self.table, trainable_token)?,
        })
    }

    pub(crate) fn time_block(&self, t: usize, rows: usize) -> Tensor {
        let f = time_features(t, self.time_emb_dim, self.schedule.steps());
        let mut data = Vec::with_capacity(rows * f.len());
        for _ in 0..rows {
            data.extend_from_slice(&f);
        }
        Tensor::from_raw(vec![rows, self.time_emb_dim], data)
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = DenoiserCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "denoiser".into(),
            data_dim: self.data_dim,
            emb_dim: self.emb_dim(),
            time_emb_dim: self.time_emb_dim,
            hidden: self.hidden(),
            schedule: self.schedule.clone(),
            table: self.table.entries.clone(),
            layers: self.net.layers().iter().map(Dense::to_json).collect(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: DenoiserCheckpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        if ck.kind != "denoiser" {
            return Err(Error::Checkpoint(format!("expected a denoiser, found {:?}", ck.kind)));
        }
        let schedule = NoiseSchedule::from_alpha_bar(ck.schedule.alpha_bars().to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if schedule.steps() != ck.schedule.steps() {
            return Err(Error::Checkpoint("schedule T does not match alpha_bar".into()));
        }
        let table = TokenTable::new(ck.emb_dim, ck.table)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let layers = ck
            .layers
            .iter()
            .map(Dense::from_json)
            .collect::<Result<Vec<_>>>()?;
        let net = Mlp::from_layers(layers, Activation::Silu)?;
        if net.input_width() != ck.data_dim + ck.time_emb_dim + ck.emb_dim
            || net.output_width() != ck.data_dim
            || net.hidden_widths() != ck.hidden
        {
            return Err(Error::Checkpoint("layer widths do not match header".into()));
        }
        if ck.time_emb_dim < 2 || !ck.time_emb_dim.is_multiple_of(2) {
            return Err(Error::Checkpoint("invalid time_emb_dim".into()));
        }
        Ok(Self {
            data_dim: ck.data_dim,
            time_emb_dim: ck.time_emb_dim,
            schedule,
            table,
            net,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenoiserCheckpoint {
    format_version: u32,
    kind: String,
    data_dim: usize,
    emb_dim: usize,
    time_emb_dim: usize,
    hidden: Vec<usize>,
    schedule: NoiseSchedule,
    table: BTreeMap<String, Vec<f64>>,
    layers: Vec<DenseJson>,
}

/// A denoiser whose weights and token embeddings live in a graph.
pub struct BoundDenoiser<'g> {
    model: &'g ConditionalDenoiser,
    net: BoundMlp<'g>,
    tokens: BoundTokens<'g>,
}

impl<'g> BoundDenoiser<'g> {
    pub fn tokens(&self) -> &BoundTokens<'g> {
        &self.tokens
    }

    pub fn embed_prompt(&self, prompt: &Prompt) -> Result<Var<'g>> {
        self.tokens.embed_prompt(prompt)
    }

    pub fn null_condition(&self) -> Result<Var<'g>> {
        self.tokens.get(EMPTY_TOKEN)
    }

    /// `ε_θ(x_t, t, cond)` for every row of `x_t`; `cond` is `[1, emb_dim]`.
    pub fn predict(&self, x_t: Var<'g>, t: usize, cond: Var<'g>) -> Result<Var<'g>> {
        let shape = x_t.shape();
        if shape.len() != 2 || shape[1] != self.model.data_dim {
            return Err(Error::Shape(format!(
                "denoiser expects [m, {}] points, got {shape:?}",
                self.model.data_dim
            )));
        }
        if cond.shape().iter().product::<usize>() != self.model.emb_dim() {
            return Err(Error::Shape(format!(
                "condition must have {} values",
                self.model.emb_dim()
            )));
        }
        let m = shape[0];
        let g = x_t.graph();
        let time = g.constant(self.model.time_block(t, m));
        let input = concat_features(&[x_t, time, cond.repeat_rows(m)?])?;
        self.net.forward(input)
    }

    /// Guided prediction `(1 + w)·ε_θ(x_t, cond) − w·ε_θ(x_t, null)`.
    /// With `w = 0` this is exactly the conditional prediction.
    pub fn guided_predict(&self, x_t: Var<'g>, t: usize, cond: Var<'g>, w: f64) -> Result<Var<'g>> {
        if !(w >= 0.0) {
            return Err(Error::InvalidArgument(format!("guidance scale must be >= 0, got {w}")));
        }
        let eps_cond = self.predict(x_t, t, cond)?;
        if w == 0.0 {
            return Ok(eps_cond);
        }
        let eps_null = self.predict(x_t, t, self.null_condition()?)?;
        eps_cond.scale(1.0 + w).sub(eps_null.scale(w))
    }
}
