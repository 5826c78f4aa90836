use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tokenforge::classifier::ClassifierModel;
use tokenforge::diffusion::{sample, ConditionalDenoiser, Prompt};
use tokenforge::experiment::{
    ablate, evaluate, fit_denoiser, fit_expert, forge_all, generate_data, loss_csv, points_csv,
    resolve_scenario, scatter_svg, split_data, token_snapshots_csv, write_file, write_run_metadata,
    EvalOutputs, RunConfig,
};
use tokenforge::forge::ForgeResult;
use tokenforge::metrics::{ablation_csv, accuracy_csv, augmentation_csv, distance_csv, Method};
use tokenforge::scenario::{sample_dataset, LabeledDataset, ScenarioSpec};

#[derive(Parser)]
#[command(name = "tokenforge", version, about = "Forge discriminative class tokens for a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a labeled dataset from a scenario.
    GenData {
        /// Built-in scenario name or scenario TOML path.
        #[arg(long, default_value = "ambiguity")]
        scenario: String,
        /// Points per class.
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional denoiser on the train split of a dataset.
    TrainDenoiser(TrainArgs),
    /// Train the expert classifier on the train split of a dataset.
    TrainClassifier(TrainArgs),
    /// Optimize one token per configured class against a frozen classifier.
    Forge {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw points from the denoiser, optionally with a forged token snapshot.
    Sample {
        #[arg(long)]
        denoiser: PathBuf,
        /// A forge result; its token is installed before sampling.
        #[arg(long)]
        forge: Option<PathBuf>,
        /// Snapshot index into the token trajectory; defaults to the last one.
        #[arg(long)]
        step: Option<usize>,
        /// Prompt tokens, repeated. Defaults to the forge result's first
        /// training prompt. Pass an empty string for the empty token.
        #[arg(long = "prompt")]
        prompt: Vec<String>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 7.0)]
        w: f64,
        /// Also write an SVG scatter plot.
        #[arg(long)]
        svg: bool,
        /// Dataset whose class contours are drawn under the scatter.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, distance, augmentation and bias protocols.
    Eval {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Directory holding the forge_<label>.json results.
        #[arg(long)]
        forged: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forge with each configured batch size and compare against the baseline.
    AblateBsz {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The whole pipeline into one directory tree.
    Run {
        #[command(flatten)]
        common: ConfigArg,
        /// Overrides out_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the batch-size ablation.
        #[arg(long)]
        no_ablation: bool,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration TOML; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArg,
    /// Dataset CSV written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { scenario, n, seed, out } => gen_data(&scenario, n, seed, &out),
        Command::TrainDenoiser(a) => train_denoiser_cmd(&a),
        Command::TrainClassifier(a) => train_classifier_cmd(&a),
        Command::Forge { common, denoiser, classifier, out } => {
            let cfg = common.load()?;
            let spec = cfg.scenario_spec()?;
            let model = load_denoiser(&denoiser)?;
            let clf = load_classifier(&classifier)?;
            let results = forge_all(&cfg, &spec, &model, &clf)?;
            write_forge_results(&spec, &results, &out)?;
            write_run_metadata(
                &out,
                &json!({
                    "command": "forge",
                    "denoiser": denoiser,
                    "classifier": classifier,
                    "config": cfg,
                }),
            )?;
            for r in &results {
                println!("{}: {} after {} steps", r.token_name, r.stop_rule, r.steps_taken);
            }
            Ok(())
        }
        Command::Sample { denoiser, forge, step, prompt, n, seed, w, svg, data, out } => {
            sample_cmd(&denoiser, forge.as_deref(), step, prompt, n, seed, w, svg, data.as_deref(), &out)
        }
        Command::Eval { common, data, denoiser, classifier, forged, out } => {
            let cfg = common.load()?;
            let spec = cfg.scenario_spec()?;
            let ds = load_dataset(&data, &spec)?;
            let (train, test) = split_data(&cfg, &ds)?;
            let model = load_denoiser(&denoiser)?;
            let clf = load_classifier(&classifier)?;
            let results = load_forge_results(&cfg, &spec, &forged)?;
            let outputs = evaluate(&cfg, &spec, &model, &clf, &train, &test, &results)?;
            write_eval(&spec, &outputs, &out)?;
            write_run_metadata(
                &out,
                &json!({
                    "command": "eval",
                    "data": data,
                    "denoiser": denoiser,
                    "classifier": classifier,
                    "forged": forged,
                    "config": cfg,
                }),
            )?;
            Ok(())
        }
        Command::AblateBsz { common, denoiser, classifier, out } => {
            let cfg = common.load()?;
            let spec = cfg.scenario_spec()?;
            let model = load_denoiser(&denoiser)?;
            let clf = load_classifier(&classifier)?;
            let rows = ablate(&cfg, &spec, &model, &clf)?;
            write_file(&out.join("ablation.csv"), &ablation_csv(&rows)?)?;
            write_run_metadata(
                &out,
                &json!({
                    "command": "ablate-bsz",
                    "denoiser": denoiser,
                    "classifier": classifier,
                    "config": cfg,
                }),
            )?;
            Ok(())
        }
        Command::Run { common, out, no_ablation } => {
            let mut cfg = common.load()?;
            if let Some(o) = out {
                cfg.out_dir = o.display().to_string();
            }
            run_all(&cfg, !no_ablation)
        }
    }
}

fn gen_data(scenario: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let spec = resolve_scenario(scenario)?;
    let ds = sample_dataset(&spec, n, seed)?;
    write_file(&out.join("data.csv"), &ds.to_csv()?)?;
    write_file(&out.join("scenario.toml"), &spec.to_toml()?)?;
    write_run_metadata(
        out,
        &json!({ "command": "gen-data", "scenario": scenario, "n": n, "seed": seed }),
    )?;
    Ok(())
}

fn train_denoiser_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let spec = cfg.scenario_spec()?;
    let ds = load_dataset(&a.data, &spec)?;
    let (train, _) = split_data(&cfg, &ds)?;
    let (model, curve) = fit_denoiser(&cfg, &spec, &train)?;
    write_file(&a.out.join("denoiser.json"), &model.to_json()?)?;
    write_file(&a.out.join("denoiser_loss.csv"), &loss_csv(&curve)?)?;
    write_run_metadata(
        &a.out,
        &json!({ "command": "train-denoiser", "data": a.data, "config": cfg }),
    )?;
    Ok(())
}

fn train_classifier_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let spec = cfg.scenario_spec()?;
    let ds = load_dataset(&a.data, &spec)?;
    let (train, _) = split_data(&cfg, &ds)?;
    let (clf, curve) = fit_expert(&cfg, &spec, &train)?;
    write_file(&a.out.join("classifier.json"), &clf.to_json()?)?;
    write_file(&a.out.join("classifier_loss.csv"), &loss_csv(&curve)?)?;
    write_run_metadata(
        &a.out,
        &json!({ "command": "train-classifier", "data": a.data, "config": cfg }),
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    denoiser: &Path,
    forge: Option<&Path>,
    step: Option<usize>,
    prompt: Vec<String>,
    n: usize,
    seed: u64,
    w: f64,
    svg: bool,
    data: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut model = load_denoiser(denoiser)?;
    let mut prompt = if prompt.is_empty() { None } else { Some(Prompt::new(prompt)?) };
    let mut title = String::new();
    if let Some(path) = forge {
        let result = load_forge_result(path)?;
        let k = step.unwrap_or(result.steps_taken);
        model = result.install(&model, k)?;
        if prompt.is_none() {
            prompt = Some(result.config.prompt(1)?);
        }
        title = format!("{} step {k}: ", result.token_name);
    } else if step.is_some() {
        bail!("--step needs --forge");
    }
    let Some(prompt) = prompt else {
        bail!("no prompt given and no forge result to take one from");
    };
    title.push_str(&prompt.display());
    let points = sample(&model, &prompt, w, n, seed)?.to_rows();
    write_file(&out.join("samples.csv"), &points_csv(&points)?)?;
    if svg || data.is_some() {
        let real = match data {
            Some(p) => Some(LabeledDataset::from_csv(&read(p, "dataset")?)?),
            None => None,
        };
        write_file(&out.join("samples.svg"), &scatter_svg(&points, real.as_ref(), &title)?)?;
    }
    write_run_metadata(
        out,
        &json!({
            "command": "sample",
            "denoiser": denoiser,
            "forge": forge,
            "step": step,
            "prompt": prompt.tokens(),
            "n": n,
            "seed": seed,
            "w": w,
            "data": data,
        }),
    )?;
    Ok(())
}

fn run_all(cfg: &RunConfig, ablation: bool) -> Result<()> {
    let root = PathBuf::from(&cfg.out_dir);
    let spec = cfg.scenario_spec()?;
    let meta = |cmd: &str| json!({ "command": cmd, "config": cfg });

    let data = generate_data(cfg, &spec)?;
    write_file(&root.join("data/data.csv"), &data.to_csv()?)?;
    write_file(&root.join("data/scenario.toml"), &spec.to_toml()?)?;
    write_run_metadata(&root.join("data"), &meta("run/gen-data"))?;
    let (train, test) = split_data(cfg, &data)?;

    let (model, curve) = fit_denoiser(cfg, &spec, &train)?;
    let dir = root.join("denoiser");
    write_file(&dir.join("denoiser.json"), &model.to_json()?)?;
    write_file(&dir.join("denoiser_loss.csv"), &loss_csv(&curve)?)?;
    write_run_metadata(&dir, &meta("run/train-denoiser"))?;

    let (clf, curve) = fit_expert(cfg, &spec, &train)?;
    let dir = root.join("classifier");
    write_file(&dir.join("classifier.json"), &clf.to_json()?)?;
    write_file(&dir.join("classifier_loss.csv"), &loss_csv(&curve)?)?;
    write_run_metadata(&dir, &meta("run/train-classifier"))?;

    let results = forge_all(cfg, &spec, &model, &clf)?;
    write_forge_results(&spec, &results, &root.join("forge"))?;
    write_run_metadata(&root.join("forge"), &meta("run/forge"))?;

    let outputs = evaluate(cfg, &spec, &model, &clf, &train, &test, &results)?;
    write_eval(&spec, &outputs, &root.join("eval"))?;
    write_run_metadata(&root.join("eval"), &meta("run/eval"))?;

    if ablation {
        let rows = ablate(cfg, &spec, &model, &clf)?;
        write_file(&root.join("ablation/ablation.csv"), &ablation_csv(&rows)?)?;
        write_run_metadata(&root.join("ablation"), &meta("run/ablate-bsz"))?;
    }
    write_run_metadata(&root, &meta("run"))?;
    Ok(())
}

fn read(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display()))
}

fn load_dataset(path: &Path, spec: &ScenarioSpec) -> Result<LabeledDataset> {
    let ds = LabeledDataset::from_csv(&read(path, "dataset")?)
        .with_context(|| format!("parsing dataset {}", path.display()))?;
    if ds.dim != spec.dim || ds.class_count() > spec.num_classes() {
        bail!(
            "dataset {} does not match scenario {:?} ({} dims, {} classes)",
            path.display(),
            spec.name,
            spec.dim,
            spec.num_classes()
        );
    }
    Ok(ds)
}

fn load_denoiser(path: &Path) -> Result<ConditionalDenoiser> {
    ConditionalDenoiser::from_json(&read(path, "denoiser checkpoint")?)
        .with_context(|| format!("parsing denoiser checkpoint {}", path.display()))
}

fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    ClassifierModel::from_json(&read(path, "classifier checkpoint")?)
        .with_context(|| format!("parsing classifier checkpoint {}", path.display()))
}

fn load_forge_result(path: &Path) -> Result<ForgeResult> {
    ForgeResult::from_json(&read(path, "forge result")?)
        .with_context(|| format!("parsing forge result {}", path.display()))
}

fn load_forge_results(cfg: &RunConfig, spec: &ScenarioSpec, dir: &Path) -> Result<Vec<ForgeResult>> {
    cfg.forge_class_indices(spec)?
        .into_iter()
        .map(|c| load_forge_result(&dir.join(format!("forge_{}.json", spec.classes[c].label))))
        .collect()
}

fn write_forge_results(spec: &ScenarioSpec, results: &[ForgeResult], dir: &Path) -> Result<()> {
    for r in results {
        let label = &spec.classes[r.config.target_class].label;
        write_file(&dir.join(format!("forge_{label}.json")), &r.to_json()?)?;
        write_file(&dir.join(format!("forge_{label}.csv")), &r.log_csv()?)?;
        write_file(&dir.join(format!("tokens_{label}.csv")), &token_snapshots_csv(r)?)?;
    }
    Ok(())
}

fn write_eval(spec: &ScenarioSpec, outputs: &EvalOutputs, dir: &Path) -> Result<()> {
    write_file(&dir.join("accuracy.csv"), &accuracy_csv(&outputs.rows)?)?;
    write_file(&dir.join("distances.csv"), &distance_csv(&outputs.distances)?)?;
    if let Some(aug) = &outputs.augmentation {
        write_file(&dir.join("augmentation.csv"), &augmentation_csv(aug)?)?;
    }
    let accuracy: serde_json::Map<String, serde_json::Value> = spec
        .classes
        .iter()
        .filter_map(|c| {
            let top1 = |m: Method| {
                outputs
                    .rows
                    .iter()
                    .find(|r| r.class == c.label && r.method == m)
                    .map(|r| r.top1)
            };
            Some((
                c.label.clone(),
                json!({ "baseline": top1(Method::Baseline)?, "forged": top1(Method::Forged)? }),
            ))
        })
        .collect();
    let summary = json!({
        "scenario": spec.name,
        "accuracy": accuracy,
        "distances": outputs.distances,
        "augmentation": outputs.augmentation,
        "bias": outputs.bias,
    });
    write_file(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
