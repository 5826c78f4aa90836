use std::fmt;

use serde::{Deserialize, Serialize};

use super::{frechet_distance, kernel_distance};
use crate::classifier::{accuracy, train_classifier, Classifier, ClassifierModel, ClassifierTrainConfig};
use crate::diffusion::{sample, ConditionalDenoiser, Prompt};
use crate::error::{Error, Result};
use crate::forge::{forge, ForgeConfig};
use crate::grad::Tensor;
use crate::rng::RngStream;
use crate::scenario::{LabeledDataset, BIAS_AXIS1_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Forged,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Forged => "forged",
        })
    }
}

/// A denoiser with a fixed prompt and guidance scale.
#[derive(Debug, Clone)]
pub struct Generator {
    pub model: ConditionalDenoiser,
    pub prompt: Prompt,
    pub w: f64,
}

impl Generator {
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        Ok(sample(&self.model, &self.prompt, self.w, n, seed)?.to_rows())
    }
}

/// Baseline and forged generators for one class.
#[derive(Debug, Clone)]
pub struct ClassGenerators {
    pub class: usize,
    pub label: String,
    pub baseline: Generator,
    pub forged: Generator,
}

impl ClassGenerators {
    pub fn get(&self, method: Method) -> &Generator {
        match method {
            Method::Baseline => &self.baseline,
            Method::Forged => &self.forged,
        }
    }
}

const METHODS: [Method; 2] = [Method::Baseline, Method::Forged];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scenario: String,
    pub class: String,
    pub method: Method,
    pub n: usize,
    pub top1: f64,
    pub frechet_raw: f64,
    pub frechet_feat: f64,
    pub kernel: f64,
}

fn rows_tensor(points: &[Vec<f64>]) -> Result<Tensor> {
    let d = points.first().map_or(0, Vec::len);
    Tensor::new(&[points.len(), d], points.concat())
}

fn top1(clf: &impl Classifier, points: &[Vec<f64>], class: usize) -> Result<f64> {
    let pred = clf.predict_class(&rows_tensor(points)?)?;
    Ok(pred.iter().filter(|&&k| k == class).count() as f64 / points.len() as f64)
}

/// Generates `n` points per class and method from the same terminal noise,
/// and scores them against the classifier and the real held-out points of
/// that class (raw coordinates and classifier features).
pub fn eval_generation_accuracy(
    scenario: &str,
    gens: &[ClassGenerators],
    clf: &ClassifierModel,
    real: &LabeledDataset,
    n: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let stream = RngStream::new(seed);
    let mut rows = Vec::with_capacity(2 * gens.len());
    for cg in gens {
        let real_pts = real.points_of(cg.class);
        if real_pts.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no real points of class {} to compare against",
                cg.label
            )));
        }
        let real_feat = clf.penultimate_features(&rows_tensor(&real_pts)?)?.to_rows();
        let class_seed = stream.child_seed("eval-class", cg.class as u64);
        for method in METHODS {
            let pts = cg.get(method).generate(n, class_seed)?;
            let feat = clf.penultimate_features(&rows_tensor(&pts)?)?.to_rows();
            rows.push(EvalRow {
                scenario: scenario.to_string(),
                class: cg.label.clone(),
                method,
                n,
                top1: top1(clf, &pts, cg.class)?,
                frechet_raw: frechet_distance(&pts, &real_pts)?,
                frechet_feat: frechet_distance(&feat, &real_feat)?,
                kernel: kernel_distance(&feat, &real_feat)?,
            });
        }
    }
    Ok(rows)
}

fn csv_string(header: &[&str], records: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `scenario,class,method,n,top1`.
pub fn accuracy_csv(rows: &[EvalRow]) -> Result<String> {
    csv_string(
        &["scenario", "class", "method", "n", "top1"],
        rows.iter()
            .map(|r| {
                vec![
                    r.scenario.clone(),
                    r.class.clone(),
                    r.method.to_string(),
                    r.n.to_string(),
                    r.top1.to_string(),
                ]
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub scenario: String,
    pub method: Method,
    pub frechet_raw: f64,
    pub frechet_feat: f64,
    pub kernel: f64,
}

/// Per-method means of the per-class distances.
pub fn summarize_distances(rows: &[EvalRow]) -> Vec<DistanceRow> {
    let mut out = Vec::new();
    for method in METHODS {
        let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.method == method).collect();
        let Some(first) = sel.first() else { continue };
        let mean = |f: fn(&EvalRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64;
        out.push(DistanceRow {
            scenario: first.scenario.clone(),
            method,
            frechet_raw: mean(|r| r.frechet_raw),
            frechet_feat: mean(|r| r.frechet_feat),
            kernel: mean(|r| r.kernel),
        });
    }
    out
}

/// `scenario,method,frechet_raw,frechet_feat,kernel`.
pub fn distance_csv(rows: &[DistanceRow]) -> Result<String> {
    csv_string(
        &["scenario", "method", "frechet_raw", "frechet_feat", "kernel"],
        rows.iter()
            .map(|r| {
                vec![
                    r.scenario.clone(),
                    r.method.to_string(),
                    r.frechet_raw.to_string(),
                    r.frechet_feat.to_string(),
                    r.kernel.to_string(),
                ]
            })
            .collect(),
    )
}

/// Test accuracies of classifiers trained on `k` real points per class,
/// alone and with generated points added. `real_only` is 0 when `k = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRow {
    pub k: usize,
    pub real_only: f64,
    pub real_plus_baseline: f64,
    pub real_plus_forged: f64,
}

pub fn augmentation_study(
    gens: &[ClassGenerators],
    pool: &LabeledDataset,
    test: &LabeledDataset,
    ks: &[usize],
    n_gen: usize,
    clf_cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<Vec<AugmentationRow>> {
    let num_classes = gens.len();
    if gens.iter().enumerate().any(|(i, g)| g.class != i) {
        return Err(Error::InvalidArgument(
            "augmentation needs generators for classes 0..K in order".into(),
        ));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let stream = RngStream::new(seed);
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let mut real_order = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut idx = pool.indices_of(c);
        if idx.len() < k_max {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} pool points, {k_max} needed",
                idx.len()
            )));
        }
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut stream.rng("aug-real", c as u64));
        real_order.push(idx);
    }
    let mut generated = [LabeledDataset::empty(pool.dim), LabeledDataset::empty(pool.dim)];
    for cg in gens {
        let s = stream.child_seed("aug-gen", cg.class as u64);
        for (set, method) in generated.iter_mut().zip(METHODS) {
            for p in cg.get(method).generate(n_gen, s)? {
                set.push(p, cg.class, Vec::new());
            }
        }
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let idx: Vec<usize> = real_order.iter().flat_map(|o| o[..k].iter().copied()).collect();
        let real = pool.subset(&idx);
        let clf_seed = stream.child_seed("aug-clf", k as u64);
        let fit = |extra: Option<&LabeledDataset>| -> Result<f64> {
            let mut ds = real.clone();
            if let Some(e) = extra {
                ds.extend(e);
            }
            let clf = train_classifier(&ds, num_classes, clf_cfg, clf_seed)?;
            accuracy(&clf, test)
        };
        rows.push(AugmentationRow {
            k,
            real_only: if k == 0 { 0.0 } else { fit(None)? },
            real_plus_baseline: fit(Some(&generated[0]))?,
            real_plus_forged: fit(Some(&generated[1]))?,
        });
    }
    Ok(rows)
}

/// `k,real_only,real_plus_baseline,real_plus_forged`.
pub fn augmentation_csv(rows: &[AugmentationRow]) -> Result<String> {
    csv_string(
        &["k", "real_only", "real_plus_baseline", "real_plus_forged"],
        rows.iter()
            .map(|r| {
                vec![
                    r.k.to_string(),
                    r.real_only.to_string(),
                    r.real_plus_baseline.to_string(),
                    r.real_plus_forged.to_string(),
                ]
            })
            .collect(),
    )
}

/// One ablation row; `bsz` is `None` for the baseline prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub bsz: Option<usize>,
    pub top1: f64,
}

/// Forges the token once per batch size and scores each result, plus the
/// baseline prompt, on the same `n_eval` terminal draws.
pub fn batch_size_ablation(
    model: &ConditionalDenoiser,
    clf: &impl Classifier,
    base_cfg: &ForgeConfig,
    bszs: &[usize],
    baseline_prompt: &Prompt,
    n_eval: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if bszs.is_empty() || bszs.contains(&0) {
        return Err(Error::InvalidArgument(format!("invalid batch sizes {bszs:?}")));
    }
    let eval_seed = RngStream::new(seed).child_seed("ablation-eval", 0);
    let target = base_cfg.target_class;
    let score = |m: &ConditionalDenoiser, p: &Prompt| -> Result<f64> {
        let pts = sample(m, p, base_cfg.guidance_w, n_eval, eval_seed)?.to_rows();
        top1(clf, &pts, target)
    };
    let mut rows = vec![AblationRow {
        bsz: None,
        top1: score(model, baseline_prompt)?,
    }];
    let forged_prompt = base_cfg.prompt(1)?;
    for &b in bszs {
        let cfg = ForgeConfig {
            batch_size: b,
            ..base_cfg.clone()
        };
        let result = forge(model, clf, &cfg)?;
        let fm = result.install(model, result.steps_taken)?;
        rows.push(AblationRow {
            bsz: Some(b),
            top1: score(&fm, &forged_prompt)?,
        });
    }
    Ok(rows)
}

/// `bsz,top1`; the baseline row is labeled `baseline`.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    csv_string(
        &["bsz", "top1"],
        rows.iter()
            .map(|r| {
                vec![
                    r.bsz.map_or_else(|| "baseline".to_string(), |b| b.to_string()),
                    r.top1.to_string(),
                ]
            })
            .collect(),
    )
}

/// Fraction of points whose second coordinate exceeds the background
/// threshold.
pub fn bias_fraction(points: &[Vec<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("bias fraction of no points".into()));
    }
    if points.iter().any(|p| p.len() < 2) {
        return Err(Error::Shape("bias probe needs at least 2 coordinates".into()));
    }
    let hits = points.iter().filter(|p| p[1] > BIAS_AXIS1_THRESHOLD).count();
    Ok(hits as f64 / points.len() as f64)
}

/// Background fraction among `n` generations.
pub fn bias_probe(gen: &Generator, n: usize, seed: u64) -> Result<f64> {
    bias_fraction(&gen.generate(n, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;
    use crate::grad::{Graph, Var};
    use crate::scenario::{builtin_scenario, sample_dataset, BuiltinScenario};

    struct AlwaysRight(usize);

    impl Classifier for AlwaysRight {
        fn num_classes(&self) -> usize {
            3
        }
        fn input_dim(&self) -> usize {
            2
        }
        fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
            let mut b = vec![0.0; 3];
            b[self.0] = 1.0;
            x.matmul(g.constant(Tensor::zeros(&[2, 3])))?
                .add_row(g.constant(Tensor::vector(b)?))
        }
    }

    fn toy_generators() -> Vec<ClassGenerators> {
        let spec = builtin_scenario(BuiltinScenario::Ambiguity);
        let model = ConditionalDenoiser::new(
            &DenoiserConfig {
                hidden: vec![8],
                steps: 4,
                ..Default::default()
            },
            &spec.vocab,
            1,
        )
        .unwrap();
        spec.classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let p = Prompt::new(c.name_tokens.clone()).unwrap();
                let g = Generator {
                    model: model.clone(),
                    prompt: p,
                    w: 2.0,
                };
                ClassGenerators {
                    class: i,
                    label: c.label.clone(),
                    baseline: g.clone(),
                    forged: Generator { w: 0.0, ..g },
                }
            })
            .collect()
    }

    #[test]
    fn methods_share_terminal_noise() {
        // With the same prompt and w = 0 on both sides, seed matching makes
        // the two methods' samples identical.
        let mut gens = toy_generators();
        for g in &mut gens {
            g.baseline.w = 0.0;
        }
        let spec = builtin_scenario(BuiltinScenario::Ambiguity);
        let real = sample_dataset(&spec, 40, 2).unwrap();
        let clf = train_classifier(&real, 3, &ClassifierTrainConfig { epochs: 2, ..Default::default() }, 1)
            .unwrap();
        let rows = eval_generation_accuracy("ambiguity", &gens, &clf, &real, 40, 5).unwrap();
        assert_eq!(rows.len(), 6);
        for pair in rows.chunks(2) {
            assert_eq!(pair[0].method, Method::Baseline);
            assert_eq!(pair[1].method, Method::Forged);
            assert_eq!(pair[0].top1, pair[1].top1);
            assert_eq!(pair[0].frechet_feat, pair[1].frechet_feat);
        }
        let csv = accuracy_csv(&rows).unwrap();
        assert!(csv.starts_with("scenario,class,method,n,top1\n"));
        assert_eq!(csv.lines().count(), 7);
        let dist = distance_csv(&summarize_distances(&rows)).unwrap();
        assert!(dist.starts_with("scenario,method,frechet_raw,frechet_feat,kernel\n"));
        assert_eq!(dist.lines().count(), 3);
    }

    #[test]
    fn always_right_stub_scores_one() {
        let gens = toy_generators();
        for cg in &gens {
            let pts = cg.forged.generate(10, 3).unwrap();
            assert_eq!(top1(&AlwaysRight(cg.class), &pts, cg.class).unwrap(), 1.0);
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_shaped() {
        let gens = toy_generators();
        let spec = builtin_scenario(BuiltinScenario::Ambiguity);
        let pool = sample_dataset(&spec, 20, 3).unwrap();
        let test = sample_dataset(&spec, 20, 4).unwrap();
        let cfg = ClassifierTrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let a = augmentation_study(&gens, &pool, &test, &[0, 3], 10, &cfg, 7).unwrap();
        let b = augmentation_study(&gens, &pool, &test, &[0, 3], 10, &cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].real_only, 0.0);
        assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.real_plus_forged)));
        assert!(augmentation_study(&gens, &pool, &test, &[30], 10, &cfg, 7).is_err());
    }

    #[test]
    fn bias_fraction_of_real_data() {
        let spec = builtin_scenario(BuiltinScenario::Bias);
        let ds = sample_dataset(&spec, 4000, 11).unwrap();
        let dish = bias_fraction(&ds.points_of(0)).unwrap();
        let cup = bias_fraction(&ds.points_of(1)).unwrap();
        // Axis 1 is N(3, 0.25) with probability 0.9 and N(0, 0.25) otherwise;
        // both are 3 standard deviations from the threshold.
        let tail = 0.5 * erfc(3.0 / 2f64.sqrt());
        let expected_dish = 0.9 * (1.0 - tail) + 0.1 * tail;
        let se = (expected_dish * (1.0 - expected_dish) / 4000.0).sqrt();
        assert!((dish - expected_dish).abs() < 4.0 * se, "dish {dish} vs {expected_dish}");
        assert!(cup < 0.01);
    }

    /// Abramowitz and Stegun 7.1.26, absolute error below 1.5e-7.
    fn erfc(x: f64) -> f64 {
        let t = 1.0 / (1.0 + 0.327_591_1 * x);
        let poly = t
            * (0.254_829_592
                + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
        poly * (-x * x).exp()
    }

    #[test]
    fn ablation_csv_layout() {
        let rows = vec![
            AblationRow { bsz: None, top1: 0.1 },
            AblationRow { bsz: Some(1), top1: 0.5 },
        ];
        assert_eq!(ablation_csv(&rows).unwrap(), "bsz,top1\nbaseline,0.1\n1,0.5\n");
    }
}
