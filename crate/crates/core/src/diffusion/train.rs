use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::ConditionalDenoiser;
use crate::error::{Error, Result};
use crate::grad::{concat_features, mean_sq_err, AdamState, Graph, Tensor};
use crate::rng::RngStream;
use crate::scenario::{LabeledDataset, EMPTY_TOKEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing a caption's condition by the null embedding.
    pub p_uncond: f64,
    /// Train at one fixed step instead of `t ~ U{1..T}`.
    #[serde(default)]
    pub fixed_t: Option<usize>,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            lr: 2e-3,
            p_uncond: 0.1,
            fixed_t: None,
        }
    }
}

/// Row `i` averages the embeddings of caption `i`, or selects the null
/// embedding when the condition is dropped.
fn pooling_matrix(
    model: &ConditionalDenoiser,
    captions: &[&[String]],
    dropped: &[bool],
) -> Result<Tensor> {
    let v = model.table().len();
    let null = model.table().position(EMPTY_TOKEN).expect("empty token present");
    let mut m = vec![0.0; captions.len() * v];
    for (i, (cap, &drop)) in captions.iter().zip(dropped).enumerate() {
        if drop {
            m[i * v + null] = 1.0;
            continue;
        }
        let w = 1.0 / cap.len() as f64;
        for tok in cap.iter() {
            let j = model
                .table()
                .position(tok)
                .ok_or_else(|| Error::UnknownToken(tok.clone()))?;
            m[i * v + j] += w;
        }
    }
    Tensor::new(&[captions.len(), v], m)
}

/// One minibatch of the noise-prediction objective.
pub(crate) struct Batch {
    pub x_t: Tensor,
    pub eps: Tensor,
    pub steps: Vec<usize>,
    pub pooling: Tensor,
}

pub(crate) fn make_batch(
    model: &ConditionalDenoiser,
    ds: &LabeledDataset,
    idx: &[usize],
    cfg: &DenoiserTrainConfig,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let sched = model.schedule();
    let d = model.data_dim();
    let mut x_t = Vec::with_capacity(idx.len() * d);
    let mut eps_all = Vec::with_capacity(idx.len() * d);
    let mut steps = Vec::with_capacity(idx.len());
    let mut dropped = Vec::with_capacity(idx.len());
    for &i in idx {
        let t = match cfg.fixed_t {
            Some(t) => t,
            None => rng.random_range(1..=sched.steps()),
        };
        let eps: Vec<f64> = (0..d)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
            .collect();
        x_t.extend(sched.forward_noise(&ds.points[i], t, &eps)?);
        eps_all.extend(eps);
        steps.push(t);
        dropped.push(rng.random::<f64>() < cfg.p_uncond);
    }
    let captions: Vec<&[String]> = idx.iter().map(|&i| ds.captions[i].as_slice()).collect();
    Ok(Batch {
        x_t: Tensor::new(&[idx.len(), d], x_t)?,
        eps: Tensor::new(&[idx.len(), d], eps_all)?,
        steps,
        pooling: pooling_matrix(model, &captions, &dropped)?,
    })
}

/// Gradients of the batch loss for the token table matrix and every
/// network parameter, in that order.
pub(crate) fn batch_gradients(
    model: &ConditionalDenoiser,
    emb: &Tensor,
    batch: &Batch,
) -> Result<(f64, Vec<Tensor>)> {
    let g = Graph::new();
    let table = g.param(emb.clone());
    let net = model.net().bind(&g, true);
    let cond = g.constant(batch.pooling.clone()).matmul(table)?;
    let m = batch.steps.len();
    let mut time = Vec::with_capacity(m * model.time_emb_dim());
    for &t in &batch.steps {
        time.extend(model.time_block(t, 1).into_data());
    }
    let time = g.constant(Tensor::new(&[m, model.time_emb_dim()], time)?);
    let input = concat_features(&[g.constant(batch.x_t.clone()), time, cond])?;
    let pred = net.forward(input)?;
    let loss = mean_sq_err(pred, g.constant(batch.eps.clone()))?;
    let mut grads = g.backward(loss)?;
    let mut out = Vec::with_capacity(1 + net.vars().len());
    out.push(
        grads
            .take(&table)
            .unwrap_or_else(|| Tensor::zeros(emb.shape())),
    );
    for (v, p) in net.vars().iter().zip(model.net().params()) {
        out.push(grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())));
    }
    Ok((loss.item()?, out))
}

/// Minimizes the noise-prediction error with condition dropout. Returns the
/// mean training loss of every epoch.
pub fn train_denoiser(
    model: &mut ConditionalDenoiser,
    ds: &LabeledDataset,
    cfg: &DenoiserTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if ds.dim != model.data_dim() {
        return Err(Error::Shape(format!(
            "dataset has dim {}, model expects {}",
            ds.dim,
            model.data_dim()
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.p_uncond) {
        return Err(Error::InvalidArgument("p_uncond must lie in [0, 1]".into()));
    }
    if let Some(t) = cfg.fixed_t {
        if t == 0 || t > model.schedule().steps() {
            return Err(Error::InvalidArgument(format!("fixed_t {t} out of range")));
        }
    }
    for cap in &ds.captions {
        for tok in cap {
            model.table().get(tok)?;
        }
    }
    let stream = RngStream::new(seed);
    let mut emb = model.table().matrix();
    let mut adam = {
        let mut ps = vec![&emb];
        ps.extend(model.net().params());
        AdamState::new(ps)
    };
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream.rng("denoiser-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_batch(model, ds, chunk, cfg, &mut rng)?;
            let (loss, grads) = batch_gradients(model, &emb, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("denoiser loss"));
            }
            total += loss;
            batches += 1;
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut params: Vec<&mut Tensor> = vec![&mut emb];
            params.extend(model.net_mut().params_mut());
            adam.step(&mut params, &grad_refs, cfg.lr)?;
        }
        curve.push(total / batches as f64);
    }
    model.table_mut().set_matrix(&emb);
    Ok(curve)
}
