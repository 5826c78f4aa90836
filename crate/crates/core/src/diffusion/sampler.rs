use super::denoiser::{ConditionalDenoiser, Prompt};
use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor};
use crate::rng::{standard_normal, RngStream};

/// Stream label for the terminal noise of item `i`.
pub const TERMINAL_NOISE_LABEL: &str = "x_T";

/// `x_T ~ N(0, I)` for `n` items; item `i` draws from its own stream so a
/// batch is the concatenation of its items regardless of `n`.
pub fn initial_noise(n: usize, dim: usize, seed: u64) -> Tensor {
    let stream = RngStream::new(seed);
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        data.extend(standard_normal(
            &mut stream.rng(TERMINAL_NOISE_LABEL, i as u64),
            dim,
        ));
    }
    Tensor::from_raw(vec![n, dim], data)
}

/// One guided sampler step `t → t−1` with no gradient tracking.
pub fn guided_step(
    model: &ConditionalDenoiser,
    prompt: &Prompt,
    w: f64,
    x_t: &Tensor,
    t: usize,
) -> Result<Tensor> {
    let g = Graph::new();
    let bound = model.bind(&g, None)?;
    let cond = bound.embed_prompt(prompt)?;
    let x = g.constant(x_t.clone());
    let eps = bound.guided_predict(x, t, cond, w)?;
    Ok(model.schedule().ddim_step(x, t, eps)?.value())
}

/// Applies guided sampler steps `from, from-1, ..., to` to `x`.
pub fn run_steps(
    model: &ConditionalDenoiser,
    prompt: &Prompt,
    w: f64,
    mut x: Tensor,
    from: usize,
    to: usize,
) -> Result<Tensor> {
    for t in (to..=from).rev() {
        x = guided_step(model, prompt, w, &x, t)?;
    }
    Ok(x)
}

/// Deterministic guided generation of `n` points.
pub fn sample(
    model: &ConditionalDenoiser,
    prompt: &Prompt,
    w: f64,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let x_t = initial_noise(n, model.data_dim(), seed);
    run_steps(model, prompt, w, x_t, model.schedule().steps(), 1)
}
