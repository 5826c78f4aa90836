use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::classifier::{fit_classifier, ClassifierModel};
use crate::diffusion::{train_denoiser, ConditionalDenoiser, Prompt};
use crate::error::{Error, Result};
use crate::forge::{forge, ForgeResult};
use crate::metrics::{
    augmentation_study, batch_size_ablation, bias_fraction, bias_probe, eval_generation_accuracy,
    summarize_distances, AblationRow, AugmentationRow, ClassGenerators, DistanceRow, EvalRow,
    Generator,
};
use crate::scenario::{sample_dataset, train_test_split, LabeledDataset, ScenarioSpec};

/// The full dataset of a run.
pub fn generate_data(cfg: &RunConfig, spec: &ScenarioSpec) -> Result<LabeledDataset> {
    sample_dataset(spec, cfg.n_per_class, cfg.seed_for("data", 0))
}

/// Train and held-out test halves of `data`.
pub fn split_data(cfg: &RunConfig, data: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> {
    train_test_split(data, cfg.test_frac, cfg.seed_for("split", 0))
}

pub fn fit_denoiser(
    cfg: &RunConfig,
    spec: &ScenarioSpec,
    train: &LabeledDataset,
) -> Result<(ConditionalDenoiser, Vec<f64>)> {
    let mut model = ConditionalDenoiser::new(
        &cfg.denoiser_config(spec.dim),
        &spec.vocab,
        cfg.seed_for("denoiser-init", 0),
    )?;
    let curve = train_denoiser(
        &mut model,
        train,
        &cfg.denoiser_train_config(),
        cfg.seed_for("denoiser-train", 0),
    )?;
    Ok((model, curve))
}

pub fn fit_expert(
    cfg: &RunConfig,
    spec: &ScenarioSpec,
    train: &LabeledDataset,
) -> Result<(ClassifierModel, Vec<f64>)> {
    fit_classifier(
        train,
        spec.num_classes(),
        &cfg.classifier_train_config(),
        cfg.seed_for("classifier", 0),
    )
}

/// One forge run per configured class, in class order.
pub fn forge_all(
    cfg: &RunConfig,
    spec: &ScenarioSpec,
    model: &ConditionalDenoiser,
    clf: &ClassifierModel,
) -> Result<Vec<ForgeResult>> {
    cfg.forge_class_indices(spec)?
        .into_iter()
        .map(|c| forge(model, clf, &cfg.forge_config(spec, c)?))
        .collect()
}

/// Generators pairing each forged token with its class's plain name prompt.
/// The forged side uses the first training prompt and the final embedding.
pub fn class_generators(
    cfg: &RunConfig,
    spec: &ScenarioSpec,
    model: &ConditionalDenoiser,
    forged: &[ForgeResult],
) -> Result<Vec<ClassGenerators>> {
    forged
        .iter()
        .map(|r| {
            let class = r.config.target_class;
            let c = spec.classes.get(class).ok_or_else(|| {
                Error::InvalidArgument(format!("forge result targets unknown class {class}"))
            })?;
            Ok(ClassGenerators {
                class,
                label: c.label.clone(),
                baseline: Generator {
                    model: model.clone(),
                    prompt: Prompt::new(c.name_tokens.iter().cloned())?,
                    w: cfg.guidance_w,
                },
                forged: Generator {
                    model: r.install(model, r.steps_taken)?,
                    prompt: r.config.prompt(1)?,
                    w: cfg.guidance_w,
                },
            })
        })
        .collect()
}

/// Background fractions for one class of a scenario with a background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub class: String,
    pub real: f64,
    pub baseline: f64,
    pub forged: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutputs {
    pub rows: Vec<EvalRow>,
    pub distances: Vec<DistanceRow>,
    /// Present when every class has a forged token.
    pub augmentation: Option<Vec<AugmentationRow>>,
    /// One row per forged class whose scenario entry has a background.
    pub bias: Vec<BiasRow>,
}

pub fn evaluate(
    cfg: &RunConfig,
    spec: &ScenarioSpec,
    model: &ConditionalDenoiser,
    clf: &ClassifierModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    forged: &[ForgeResult],
) -> Result<EvalOutputs> {
    let gens = class_generators(cfg, spec, model, forged)?;
    let rows = eval_generation_accuracy(&spec.name, &gens, clf, test, cfg.eval_n, cfg.seed_for("eval", 0))?;
    let distances = summarize_distances(&rows);
    let all_classes = gens.len() == spec.num_classes();
    let augmentation = if all_classes && !cfg.aug_k.is_empty() {
        Some(augmentation_study(
            &gens,
            train,
            test,
            &cfg.aug_k,
            cfg.aug_n_gen,
            &cfg.classifier_train_config(),
            cfg.seed_for("augment", 0),
        )?)
    } else {
        None
    };
    let mut bias = Vec::new();
    for g in &gens {
        if spec.classes[g.class].background.is_none() {
            continue;
        }
        let seed = cfg.seed_for("bias", g.class as u64);
        bias.push(BiasRow {
            class: g.label.clone(),
            real: bias_fraction(&test.points_of(g.class))?,
            baseline: bias_probe(&g.baseline, cfg.bias_n, seed)?,
            forged: bias_probe(&g.forged, cfg.bias_n, seed)?,
        });
    }
    Ok(EvalOutputs {
        rows,
        distances,
        augmentation,
        bias,
    })
}

pub fn ablate(
    cfg: &RunConfig,
    spec: &ScenarioSpec,
    model: &ConditionalDenoiser,
    clf: &ClassifierModel,
) -> Result<Vec<AblationRow>> {
    let class = cfg.ablation_class_index(spec)?;
    let base = cfg.forge_config(spec, class)?;
    let prompt = Prompt::new(spec.classes[class].name_tokens.iter().cloned())?;
    batch_size_ablation(
        model,
        clf,
        &base,
        &cfg.ablation_bsz,
        &prompt,
        cfg.eval_n,
        cfg.seed_for("ablation", 0),
    )
}
