use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierTrainConfig;
use crate::diffusion::{DenoiserConfig, DenoiserTrainConfig};
use crate::error::{Error, Result};
use crate::forge::ForgeConfig;
use crate::rng::RngStream;
use crate::scenario::{builtin_scenario, BuiltinScenario, ScenarioSpec};

/// Everything a run depends on, as one flat table. Unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// A built-in scenario name or a path to a scenario TOML file.
    pub scenario: String,
    pub seed: u64,
    pub out_dir: String,

    pub n_per_class: usize,
    pub test_frac: f64,

    pub steps: usize,
    pub emb_dim: usize,
    pub time_emb_dim: usize,
    pub denoiser_hidden: Vec<usize>,
    pub emb_init_std: f64,
    pub denoiser_epochs: usize,
    pub denoiser_batch_size: usize,
    pub denoiser_lr: f64,
    pub p_uncond: f64,

    pub classifier_hidden: Vec<usize>,
    pub classifier_epochs: usize,
    pub classifier_batch_size: usize,
    pub classifier_lr: f64,

    /// Class labels to forge tokens for; empty means every class.
    pub forge_classes: Vec<String>,
    pub forge_batch_size: usize,
    pub guidance_w: f64,
    pub forge_lr: f64,
    pub lr_rule: bool,
    pub max_steps: usize,
    pub patience: usize,
    pub min_correct_frac: f64,
    pub clip_norm: f64,

    pub eval_n: usize,
    pub aug_k: Vec<usize>,
    pub aug_n_gen: usize,
    pub ablation_bsz: Vec<usize>,
    /// Class label the ablation forges for; empty means the first forged class.
    pub ablation_class: String,
    pub bias_n: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: "ambiguity".into(),
            seed: 0,
            out_dir: "runs".into(),
            n_per_class: 500,
            test_frac: 0.2,
            steps: 50,
            emb_dim: 8,
            time_emb_dim: 8,
            denoiser_hidden: vec![64, 64],
            emb_init_std: 1.0,
            denoiser_epochs: 1500,
            denoiser_batch_size: 128,
            denoiser_lr: 2e-3,
            p_uncond: 0.1,
            classifier_hidden: vec![32, 32],
            classifier_epochs: 200,
            classifier_batch_size: 64,
            classifier_lr: 5e-3,
            forge_classes: Vec::new(),
            forge_batch_size: 5,
            guidance_w: 7.0,
            forge_lr: 0.2,
            lr_rule: false,
            max_steps: 200,
            patience: 20,
            min_correct_frac: 0.5,
            clip_norm: 1.0,
            eval_n: 100,
            aug_k: vec![0, 3, 9, 15],
            aug_n_gen: 100,
            ablation_bsz: (1..=6).collect(),
            ablation_class: String::new(),
            bias_n: 200,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_per_class < 2 {
            return bad("n_per_class must be at least 2".into());
        }
        if !(self.test_frac > 0.0 && self.test_frac < 1.0) {
            return bad(format!("test_frac {} not in (0, 1)", self.test_frac));
        }
        if self.ablation_bsz.is_empty() || self.ablation_bsz.contains(&0) {
            return bad(format!("ablation_bsz {:?} must be nonempty and positive", self.ablation_bsz));
        }
        if self.eval_n < 2 || self.aug_n_gen == 0 || self.bias_n == 0 {
            return bad("eval_n must be at least 2; aug_n_gen and bias_n positive".into());
        }
        Ok(())
    }

    pub fn stream(&self) -> RngStream {
        RngStream::new(self.seed)
    }

    pub fn seed_for(&self, label: &str, index: u64) -> u64 {
        self.stream().child_seed(label, index)
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        resolve_scenario(&self.scenario)
    }

    pub fn denoiser_config(&self, data_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            data_dim,
            emb_dim: self.emb_dim,
            time_emb_dim: self.time_emb_dim,
            hidden: self.denoiser_hidden.clone(),
            steps: self.steps,
            emb_init_std: self.emb_init_std,
        }
    }

    pub fn denoiser_train_config(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            epochs: self.denoiser_epochs,
            batch_size: self.denoiser_batch_size,
            lr: self.denoiser_lr,
            p_uncond: self.p_uncond,
            fixed_t: None,
        }
    }

    pub fn classifier_train_config(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            hidden: self.classifier_hidden.clone(),
            epochs: self.classifier_epochs,
            batch_size: self.classifier_batch_size,
            lr: self.classifier_lr,
        }
    }

    pub fn forge_config(&self, spec: &ScenarioSpec, class: usize) -> Result<ForgeConfig> {
        let mut cfg = ForgeConfig::for_class(spec, class, self.seed_for("forge", class as u64))?;
        cfg.batch_size = self.forge_batch_size;
        cfg.guidance_w = self.guidance_w;
        cfg.lr = self.forge_lr;
        cfg.lr_rule = self.lr_rule;
        cfg.max_steps = self.max_steps;
        cfg.patience = self.patience;
        cfg.min_correct_frac = self.min_correct_frac;
        cfg.clip_norm = self.clip_norm;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Indices of the classes to forge, in class order.
    pub fn forge_class_indices(&self, spec: &ScenarioSpec) -> Result<Vec<usize>> {
        if self.forge_classes.is_empty() {
            return Ok((0..spec.num_classes()).collect());
        }
        let mut idx = self
            .forge_classes
            .iter()
            .map(|l| {
                spec.class_index(l)
                    .ok_or_else(|| Error::Config(format!("unknown class {l:?} in forge_classes")))
            })
            .collect::<Result<Vec<_>>>()?;
        idx.sort_unstable();
        idx.dedup();
        Ok(idx)
    }

    pub fn ablation_class_index(&self, spec: &ScenarioSpec) -> Result<usize> {
        if self.ablation_class.is_empty() {
            return Ok(self.forge_class_indices(spec)?[0]);
        }
        spec.class_index(&self.ablation_class)
            .ok_or_else(|| Error::Config(format!("unknown ablation_class {:?}", self.ablation_class)))
    }
}

/// A built-in scenario by name, or a scenario TOML file by path.
pub fn resolve_scenario(name: &str) -> Result<ScenarioSpec> {
    if let Ok(kind) = name.parse::<BuiltinScenario>() {
        return Ok(builtin_scenario(kind));
    }
    let path = Path::new(name);
    if path.exists() {
        return ScenarioSpec::load(path);
    }
    Err(Error::Config(format!(
        "unknown scenario {name:?}: not a built-in name (ambiguity, finegrained, bias) or an existing file"
    )))
}
