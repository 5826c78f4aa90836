//! Optimization of a new class token against a frozen classifier.
//!
//! Only the final sampler step is differentiated: steps `T..2` run without a
//! tape, `x₁` enters a fresh graph as a constant, and the loss reaches the
//! token embedding through one guided prediction and one sampler step.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax_rows, Classifier};
use crate::diffusion::{initial_noise, run_steps, ConditionalDenoiser, Prompt, TokenTable};
use crate::error::{Error, Result};
use crate::grad::{clip_global_norm, softmax_cross_entropy, AdamState, Graph, Tensor, Var};
use crate::rng::RngStream;
use crate::scenario::{ScenarioSpec, EMPTY_TOKEN};

/// Stream label for the terminal noise of forge step `k`.
pub const STEP_SEED_LABEL: &str = "forge-step";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    pub target_class: usize,
    pub token_name: String,
    pub base_token: String,
    /// The two training prompts, used alternately. Both contain the token.
    pub prompts: [Vec<String>; 2],
    pub batch_size: usize,
    pub guidance_w: f64,
    pub lr: f64,
    /// Use `0.00025 · batch_size` instead of `lr`.
    pub lr_rule: bool,
    pub max_steps: usize,
    pub patience: usize,
    pub min_correct_frac: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl ForgeConfig {
    /// Defaults for a built-in or user scenario: the token is named after the
    /// class, initialized from the scenario's base token, and prepended to
    /// the class's name tokens. The second prompt appends the empty token.
    pub fn for_class(spec: &ScenarioSpec, class: usize, seed: u64) -> Result<Self> {
        let c = spec.classes.get(class).ok_or_else(|| {
            Error::InvalidArgument(format!("class {class} out of range for {}", spec.name))
        })?;
        let token_name = forged_token_name(&c.label);
        let mut p1 = vec![token_name.clone()];
        p1.extend(c.name_tokens.iter().cloned());
        let mut p2 = p1.clone();
        p2.push(EMPTY_TOKEN.to_string());
        Ok(Self {
            target_class: class,
            token_name,
            base_token: spec.base_token.clone(),
            prompts: [p1, p2],
            batch_size: 5,
            guidance_w: 7.0,
            lr: 0.0005,
            lr_rule: false,
            max_steps: 200,
            patience: 20,
            min_correct_frac: 0.5,
            clip_norm: 1.0,
            seed,
        })
    }

    pub fn effective_lr(&self) -> f64 {
        if self.lr_rule {
            0.00025 * self.batch_size as f64
        } else {
            self.lr
        }
    }

    pub fn prompt(&self, step: usize) -> Result<Prompt> {
        Prompt::new(self.prompts[(step - 1) % 2].iter().cloned())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.min_correct_frac > 0.0 && self.min_correct_frac <= 1.0) {
            return bad(format!("min_correct_frac {} not in (0, 1]", self.min_correct_frac));
        }
        if self.max_steps == 0 || self.patience >= self.max_steps {
            return bad(format!(
                "need 0 < patience < max_steps, got {} and {}",
                self.patience, self.max_steps
            ));
        }
        if !(self.effective_lr() > 0.0 && self.effective_lr().is_finite()) {
            return bad(format!("learning rate {} must be positive", self.effective_lr()));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(self.guidance_w >= 0.0) {
            return bad(format!("guidance_w {} must be nonnegative", self.guidance_w));
        }
        for p in &self.prompts {
            if !p.contains(&self.token_name) {
                return bad(format!("prompt {p:?} does not contain {:?}", self.token_name));
            }
        }
        Ok(())
    }
}

/// `<label>`: angle brackets keep forged tokens apart from vocabulary words.
pub fn forged_token_name(label: &str) -> String {
    format!("<{label}>")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    AllCorrect,
    PatienceMet,
    StepCap,
}

impl fmt::Display for StopRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopRule::AllCorrect => "all_correct",
            StopRule::PatienceMet => "patience_met",
            StopRule::StepCap => "step_cap",
        })
    }
}

/// One forge step; `step` counts from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub batch_accuracy: f64,
    pub grad_norm_pre_clip: f64,
    pub prompt_used: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeResult {
    pub token_name: String,
    pub config: ForgeConfig,
    /// Embedding at initialization followed by one snapshot per step.
    pub embedding_trajectory: Vec<Vec<f64>>,
    pub log: Vec<StepRecord>,
    pub stop_rule: StopRule,
    pub steps_taken: usize,
}

impl ForgeResult {
    pub fn final_embedding(&self) -> &[f64] {
        self.embedding_trajectory.last().expect("trajectory holds the initialization")
    }

    /// Embedding after `step` updates; 0 is the initialization.
    pub fn embedding_at(&self, step: usize) -> Result<&[f64]> {
        self.embedding_trajectory
            .get(step)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no snapshot for step {step}; the run took {} steps",
                    self.steps_taken
                ))
            })
    }

    /// A copy of `model` with the token set to its snapshot after `step`.
    pub fn install(&self, model: &ConditionalDenoiser, step: usize) -> Result<ConditionalDenoiser> {
        model.with_token(&self.token_name, self.embedding_at(step)?.to_vec())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.embedding_trajectory.len() != r.steps_taken + 1 || r.log.len() != r.steps_taken {
            return Err(Error::Checkpoint(
                "trajectory and log lengths disagree with steps_taken".into(),
            ));
        }
        Ok(r)
    }

    /// Step table with header `step,loss,batch_acc,grad_norm,prompt`.
    pub fn log_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "loss", "batch_acc", "grad_norm", "prompt"])?;
        for r in &self.log {
            w.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.batch_accuracy.to_string(),
                r.grad_norm_pre_clip.to_string(),
                r.prompt_used.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Adds `name` to `table` as a copy of `base`; returns its row position.
pub fn init_token(table: &mut TokenTable, name: &str, base: &str) -> Result<usize> {
    let emb = table.get(base)?.to_vec();
    table.insert(name, emb)?;
    Ok(table.position(name).expect("just inserted"))
}

/// Generates `n` points for `prompt`, differentiable with respect to the
/// embedding of `token` through the final sampler step only. Returns `x₀`
/// and the token's leaf, both in `g`.
pub fn generate_batch_grad_last<'g>(
    g: &'g Graph,
    model: &'g ConditionalDenoiser,
    token: &str,
    prompt: &Prompt,
    w: f64,
    n: usize,
    seed: u64,
) -> Result<(Var<'g>, Var<'g>)> {
    if !prompt.contains(token) {
        return Err(Error::InvalidArgument(format!(
            "prompt {:?} does not contain {token:?}",
            prompt.display()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let x_t = initial_noise(n, model.data_dim(), seed);
    let x_1 = run_steps(model, prompt, w, x_t, model.schedule().steps(), 2)?;
    let bound = model.bind(g, Some(token))?;
    let leaf = bound.tokens().get(token)?;
    let cond = bound.embed_prompt(prompt)?;
    let x = g.constant(x_1);
    let eps = bound.guided_predict(x, 1, cond, w)?;
    Ok((model.schedule().ddim_step(x, 1, eps)?, leaf))
}

/// Mutable state of a forge run: a private copy of the denoiser holding the
/// token, and the optimizer moments for its embedding.
pub struct ForgeState {
    model: ConditionalDenoiser,
    adam: AdamState,
    cfg: ForgeConfig,
}

impl ForgeState {
    pub fn new(model: &ConditionalDenoiser, cfg: &ForgeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = model.clone();
        init_token(model.table_mut(), &cfg.token_name, &cfg.base_token)?;
        let adam = AdamState::new(vec![&Tensor::vector(
            model.table().get(&cfg.token_name)?.to_vec(),
        )?]);
        Ok(Self {
            model,
            adam,
            cfg: cfg.clone(),
        })
    }

    pub fn embedding(&self) -> &[f64] {
        self.model
            .table()
            .get(&self.cfg.token_name)
            .expect("token inserted at construction")
    }

    pub fn model(&self) -> &ConditionalDenoiser {
        &self.model
    }
}

/// Gradient of the batch loss and the logged statistics, before clipping.
pub struct StepGradient {
    pub loss: f64,
    pub batch_accuracy: f64,
    pub grad: Tensor,
    /// Number of entries in the gradient map, for locality checks.
    pub grad_entries: usize,
}

/// Loss and token gradient for forge step `step` without updating anything.
pub fn step_gradient(
    state: &ForgeState,
    clf: &impl Classifier,
    step: usize,
) -> Result<StepGradient> {
    let cfg = &state.cfg;
    let prompt = cfg.prompt(step)?;
    let seed = RngStream::new(cfg.seed).child_seed(STEP_SEED_LABEL, step as u64);
    let g = Graph::new();
    let (x0, leaf) = generate_batch_grad_last(
        &g,
        &state.model,
        &cfg.token_name,
        &prompt,
        cfg.guidance_w,
        cfg.batch_size,
        seed,
    )?;
    let logits = clf.logits(&g, x0)?;
    let targets = vec![cfg.target_class; cfg.batch_size];
    let loss = softmax_cross_entropy(logits, &targets)?;
    let loss_value = loss.item()?;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("forge loss"));
    }
    let hits = argmax_rows(&logits.value())
        .iter()
        .filter(|&&k| k == cfg.target_class)
        .count();
    let mut grads = g.backward(loss)?;
    let grad_entries = grads.len();
    let dim = state.embedding().len();
    let grad = match grads.take(&leaf) {
        Some(t) => t.reshape(&[dim])?,
        None => Tensor::zeros(&[dim]),
    };
    Ok(StepGradient {
        loss: loss_value,
        batch_accuracy: hits as f64 / cfg.batch_size as f64,
        grad,
        grad_entries,
    })
}

/// One optimization step: generate, score, clip, and update the token.
pub fn forge_step(state: &mut ForgeState, clf: &impl Classifier, step: usize) -> Result<StepRecord> {
    let sg = step_gradient(state, clf, step)?;
    if sg.grad_entries > 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient reached {} leaves; only the token may be trainable",
            sg.grad_entries
        )));
    }
    let mut grad = sg.grad;
    let pre = clip_global_norm(std::iter::once(&mut grad), state.cfg.clip_norm)?;
    let mut emb = Tensor::vector(state.embedding().to_vec())?;
    let lr = state.cfg.effective_lr();
    state.adam.step(&mut [&mut emb], &[&grad], lr)?;
    let name = state.cfg.token_name.clone();
    state.model.table_mut().set(&name, emb.into_data())?;
    Ok(StepRecord {
        step,
        loss: sg.loss,
        batch_accuracy: sg.batch_accuracy,
        grad_norm_pre_clip: pre,
        prompt_used: state.cfg.prompt(step)?.display(),
    })
}

/// The first stop rule that fires on `log`, checked in order: all correct,
/// patience exhausted with enough correct, step cap.
///
/// A step improves when its loss is strictly below every earlier loss.
pub fn should_stop(log: &[StepRecord], cfg: &ForgeConfig) -> Option<StopRule> {
    let last = log.last()?;
    if last.batch_accuracy >= 1.0 {
        return Some(StopRule::AllCorrect);
    }
    let mut best = 0;
    for (i, r) in log.iter().enumerate() {
        if r.loss < log[best].loss {
            best = i;
        }
    }
    let stale = log.len() - 1 - best;
    if stale >= cfg.patience && last.batch_accuracy >= cfg.min_correct_frac {
        return Some(StopRule::PatienceMet);
    }
    if log.len() >= cfg.max_steps {
        return Some(StopRule::StepCap);
    }
    None
}

/// Runs the full loop. `model` and `clf` are only read.
pub fn forge(
    model: &ConditionalDenoiser,
    clf: &impl Classifier,
    cfg: &ForgeConfig,
) -> Result<ForgeResult> {
    if cfg.target_class >= clf.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "target class {} out of range for {} classes",
            cfg.target_class,
            clf.num_classes()
        )));
    }
    if clf.input_dim() != model.data_dim() {
        return Err(Error::Shape(format!(
            "classifier expects dimension {}, denoiser generates {}",
            clf.input_dim(),
            model.data_dim()
        )));
    }
    let mut state = ForgeState::new(model, cfg)?;
    let mut trajectory = vec![state.embedding().to_vec()];
    let mut log = Vec::new();
    for step in 1..=cfg.max_steps {
        log.push(forge_step(&mut state, clf, step)?);
        trajectory.push(state.embedding().to_vec());
        if let Some(rule) = should_stop(&log, cfg) {
            return Ok(ForgeResult {
                token_name: cfg.token_name.clone(),
                config: cfg.clone(),
                embedding_trajectory: trajectory,
                steps_taken: log.len(),
                log,
                stop_rule: rule,
            });
        }
    }
    unreachable!("the step cap fires at max_steps")
}
