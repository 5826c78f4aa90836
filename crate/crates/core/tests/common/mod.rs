//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokenforge::classifier::{Classifier, ClassifierModel, NormStats};
use tokenforge::diffusion::{ConditionalDenoiser, DenoiserConfig};
use tokenforge::grad::{concat_features, mean_sq_err, softmax_cross_entropy, Graph, Tensor, Var};
use tokenforge::nn::{Activation, Dense, Mlp};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for the relative error, so entries whose true gradient
/// is (numerically) zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

/// Builds a scalar from freshly created leaves holding `inputs`; returns the
/// scalar and the leaves in input order.
pub type Builder = Box<dyn for<'g> Fn(&'g Graph, &[Tensor]) -> tokenforge::Result<(Var<'g>, Vec<Var<'g>>)>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

/// Entries uniform in `[-half_width, half_width]`.
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], half_width: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-half_width..=half_width)).collect();
    Tensor::new(shape, data).unwrap()
}

fn leaves<'g>(g: &'g Graph, inputs: &[Tensor]) -> Vec<Var<'g>> {
    inputs.iter().map(|t| g.leaf(t.clone(), true)).collect()
}

/// Reduces a non-scalar output to a scalar whose gradient differs for every
/// entry: squared error against a fixed random target.
fn reduce<'g>(out: Var<'g>, target: &Tensor) -> tokenforge::Result<Var<'g>> {
    let t = out.graph().constant(target.clone());
    mean_sq_err(out, t)
}

fn unary(name: &'static str, x: Tensor, target: Tensor, f: fn(Var<'_>) -> Var<'_>) -> GradCase {
    GradCase {
        name,
        inputs: vec![x],
        build: Box::new(move |g, ins| {
            let v = leaves(g, ins);
            Ok((reduce(f(v[0]), &target)?, v))
        }),
    }
}

fn binary(
    name: &'static str,
    a: Tensor,
    b: Tensor,
    target: Tensor,
    f: for<'g> fn(Var<'g>, Var<'g>) -> tokenforge::Result<Var<'g>>,
) -> GradCase {
    GradCase {
        name,
        inputs: vec![a, b],
        build: Box::new(move |g, ins| {
            let v = leaves(g, ins);
            Ok((reduce(f(v[0], v[1])?, &target)?, v))
        }),
    }
}

fn mlp_case(name: &'static str, act: Activation, rng: &mut ChaCha8Rng) -> GradCase {
    let sizes = [3, 6, 5, 2];
    let m = rng.random_range(1..4);
    let mut inputs = vec![uniform(rng, &[m, sizes[0]], 2.0)];
    for w in sizes.windows(2) {
        inputs.push(uniform(rng, &[w[0], w[1]], 1.0));
        inputs.push(uniform(rng, &[w[1]], 0.5));
    }
    let target = uniform(rng, &[m, 2], 2.0);
    GradCase {
        name,
        inputs,
        build: Box::new(move |g, ins| {
            let layers = ins[1..]
                .chunks(2)
                .map(|wb| Dense { w: wb[0].clone(), b: wb[1].clone() })
                .collect();
            let mlp = Mlp::from_layers(layers, act)?;
            let x = g.leaf(ins[0].clone(), true);
            let bound = mlp.bind(g, true);
            let mut vars = vec![x];
            vars.extend(bound.vars());
            Ok((reduce(bound.forward(x)?, &target)?, vars))
        }),
    }
}

fn denoiser_case(rng: &mut ChaCha8Rng, guided: bool) -> GradCase {
    let cfg = DenoiserConfig {
        data_dim: 2,
        emb_dim: 4,
        time_emb_dim: 4,
        hidden: vec![8, 8],
        steps: 10,
        emb_init_std: 1.0,
    };
    let vocab: Vec<String> = ["", "a"].iter().map(|s| s.to_string()).collect();
    // Binding ties the model borrow to the graph lifetime, which the boxed
    // builder cannot name; tests can afford to leak the small model.
    let model: &'static ConditionalDenoiser =
        Box::leak(Box::new(ConditionalDenoiser::new(&cfg, &vocab, rng.random()).unwrap()));
    let m = rng.random_range(1..4);
    let t = rng.random_range(1..=cfg.steps);
    let w = if guided { rng.random_range(0.5..8.0) } else { 0.0 };
    let inputs = vec![uniform(rng, &[m, 2], 2.0), uniform(rng, &[1, 4], 2.0)];
    let target = uniform(rng, &[m, 2], 2.0);
    GradCase {
        name: if guided { "denoiser_guided" } else { "denoiser" },
        inputs,
        build: Box::new(move |g, ins| {
            let v = leaves(g, ins);
            let bound = model.bind(g, None)?;
            let eps = bound.guided_predict(v[0], t, v[1], w)?;
            Ok((reduce(eps, &target)?, v))
        }),
    }
}

fn classifier_case(rng: &mut ChaCha8Rng) -> GradCase {
    let net = Mlp::new(&[2, 6, 6, 3], Activation::Tanh, rng).unwrap();
    let stats = NormStats::new(
        vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        vec![rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)],
    )
    .unwrap();
    let clf = ClassifierModel::new(stats, net).unwrap();
    let m = rng.random_range(1..5);
    let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
    GradCase {
        name: "classifier",
        inputs: vec![uniform(rng, &[m, 2], 2.0)],
        build: Box::new(move |g, ins| {
            let v = leaves(g, ins);
            Ok((softmax_cross_entropy(clf.logits(g, v[0])?, &targets)?, v))
        }),
    }
}

/// Every differentiable operation plus full two-hidden-layer networks, with
/// shapes and values drawn from `seed`.
pub fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let m = r.random_range(1..5);
    let k = r.random_range(1..5);
    let n = r.random_range(1..5);
    let mut cases = vec![
        binary("matmul", uniform(r, &[m, k], 2.0), uniform(r, &[k, n], 2.0), uniform(r, &[m, n], 2.0), |a, b| a.matmul(b)),
        binary("add_row", uniform(r, &[m, n], 2.0), uniform(r, &[n], 2.0), uniform(r, &[m, n], 2.0), |a, b| a.add_row(b)),
        binary("mul_row", uniform(r, &[m, n], 2.0), uniform(r, &[n], 2.0), uniform(r, &[m, n], 2.0), |a, b| a.mul_row(b)),
        binary("add", uniform(r, &[m, n], 2.0), uniform(r, &[m, n], 2.0), uniform(r, &[m, n], 2.0), |a, b| a.add(b)),
        binary("sub", uniform(r, &[m, n], 2.0), uniform(r, &[m, n], 2.0), uniform(r, &[m, n], 2.0), |a, b| a.sub(b)),
        binary("mean_sq_err", uniform(r, &[m, n], 2.0), uniform(r, &[m, n], 2.0), Tensor::scalar(0.0), mean_sq_err),
        unary("silu", uniform(r, &[m, n], 2.0), uniform(r, &[m, n], 2.0), |x| x.silu()),
        unary("tanh", uniform(r, &[m, n], 2.0), uniform(r, &[m, n], 2.0), |x| x.tanh()),
        unary("sum", uniform(r, &[m, n], 2.0), Tensor::scalar(0.3), |x| x.sum()),
    ];
    let c: f64 = r.random_range(-3.0..3.0);
    let target = uniform(r, &[m, n], 2.0);
    cases.push(GradCase {
        name: "scale",
        inputs: vec![uniform(r, &[m, n], 2.0)],
        build: Box::new(move |g, ins| {
            let v = leaves(g, ins);
            Ok((reduce(v[0].scale(c), &target)?, v))
        }),
    });
    let reps = r.random_range(1..5);
    let target = uniform(r, &[reps, n], 2.0);
    cases.push(GradCase {
        name: "repeat_rows",
        inputs: vec![uniform(r, &[1, n], 2.0)],
        build: Box::new(move |g, ins| {
            let v = leaves(g, ins);
            Ok((reduce(v[0].repeat_rows(reps)?, &target)?, v))
        }),
    });
    let widths = [r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
    let target = uniform(r, &[m, widths.iter().sum()], 2.0);
    cases.push(GradCase {
        name: "concat_features",
        inputs: widths.iter().map(|&w| uniform(r, &[m, w], 2.0)).collect(),
        build: Box::new(move |g, ins| {
            let v = leaves(g, ins);
            Ok((reduce(concat_features(&v)?, &target)?, v))
        }),
    });
    let classes = r.random_range(2..6);
    let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..classes)).collect();
    cases.push(GradCase {
        name: "softmax_cross_entropy",
        inputs: vec![uniform(r, &[m, classes], 2.0)],
        build: Box::new(move |g, ins| {
            let v = leaves(g, ins);
            Ok((softmax_cross_entropy(v[0], &targets)?, v))
        }),
    });
    cases.push(mlp_case("mlp_silu", Activation::Silu, r));
    cases.push(mlp_case("mlp_tanh", Activation::Tanh, r));
    cases.push(denoiser_case(r, false));
    cases.push(denoiser_case(r, true));
    cases.push(classifier_case(r));
    cases
}

fn eval(case: &GradCase, inputs: &[Tensor]) -> f64 {
    let g = Graph::new();
    let (loss, _) = (case.build)(&g, inputs).unwrap();
    loss.item().unwrap()
}

/// Largest relative disagreement between reverse-mode and central
/// finite-difference gradients over every input entry.
pub fn max_rel_error(case: &GradCase) -> f64 {
    let g = Graph::new();
    let (loss, vars) = (case.build)(&g, &case.inputs).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        for j in 0..case.inputs[i].len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(case, &plus) - eval(case, &minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// A run's data, trained denoiser and trained expert classifier.
pub struct Trained {
    pub cfg: tokenforge::experiment::RunConfig,
    pub spec: tokenforge::scenario::ScenarioSpec,
    pub train: tokenforge::scenario::LabeledDataset,
    pub test: tokenforge::scenario::LabeledDataset,
    pub model: ConditionalDenoiser,
    pub clf: ClassifierModel,
}

/// Trains with the default run configuration for `scenario` and `seed`.
pub fn train_default(scenario: &str, seed: u64) -> Trained {
    use tokenforge::experiment::*;
    let cfg = RunConfig {
        scenario: scenario.into(),
        seed,
        ..RunConfig::default()
    };
    train_with(cfg)
}

pub fn train_with(cfg: tokenforge::experiment::RunConfig) -> Trained {
    use tokenforge::experiment::*;
    let spec = cfg.scenario_spec().unwrap();
    let data = generate_data(&cfg, &spec).unwrap();
    let (train, test) = split_data(&cfg, &data).unwrap();
    let (model, _) = fit_denoiser(&cfg, &spec, &train).unwrap();
    let (clf, _) = fit_expert(&cfg, &spec, &train).unwrap();
    Trained { cfg, spec, train, test, model, clf }
}
