use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Var;

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Lower clamp on the cumulative signal coefficient.
pub const MIN_ALPHA_BAR: f64 = 1e-5;

/// Cumulative signal coefficients `alpha_bar[0..=T]` with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    #[serde(rename = "T")]
    steps: usize,
    alpha_bar: Vec<f64>,
}

/// Cosine schedule: `alpha_bar(t) = f(t)/f(0)` with
/// `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, clamped to `[1e-5, 1]`.
pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("need T >= 2, got {steps}")));
    }
    let f = |t: usize| {
        let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    let alpha_bar = (0..=steps)
        .map(|t| if t == 0 { 1.0 } else { (f(t) / f0).clamp(MIN_ALPHA_BAR, 1.0) })
        .collect();
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

impl NoiseSchedule {
    /// Validates an explicit coefficient table.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::InvalidArgument("schedule needs T >= 2".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidArgument("alpha_bar[0] must be exactly 1".into()));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidArgument("alpha_bar must strictly decrease".into()));
        }
        if !(alpha_bar[alpha_bar.len() - 1] > 0.0) {
            return Err(Error::InvalidArgument("alpha_bar[T] must be positive".into()));
        }
        Ok(Self {
            steps: alpha_bar.len() - 1,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside {min}..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`, elementwise.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t, 0)?;
        if x0.len() != eps.len() {
            return Err(Error::Shape(format!(
                "x0 has {} values, noise {}",
                x0.len(),
                eps.len()
            )));
        }
        let a = self.alpha_bar[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect())
    }

    /// One deterministic sampler step from `t` to `t − 1`:
    /// `x̂0 = (x_t − √(1−ᾱ_t)·ε̄)/√ᾱ_t`,
    /// `x_{t−1} = √ᾱ_{t−1}·x̂0 + √(1−ᾱ_{t−1})·ε̄`.
    pub fn ddim_step<'g>(&self, x_t: Var<'g>, t: usize, eps: Var<'g>) -> Result<Var<'g>> {
        self.check_t(t, 1)?;
        let (a_t, a_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let x0 = x_t
            .sub(eps.scale((1.0 - a_t).sqrt()))?
            .scale(1.0 / a_t.sqrt());
        x0.scale(a_prev.sqrt()).add(eps.scale((1.0 - a_prev).sqrt()))
    }
}
