use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Joint L2 norm over all entries of all tensors.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads
        .into_iter()
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt()
}

/// Rescales every tensor by `max_norm / norm` when the joint norm exceeds
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm<'a>(
    grads: impl IntoIterator<Item = &'a mut Tensor>,
    max_norm: f64,
) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let mut grads: Vec<&mut Tensor> = grads.into_iter().collect();
    let norm = global_norm(grads.iter().map(|g| &**g));
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

/// Bias-corrected adaptive-moment optimizer state for a fixed list of
/// parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first_moment: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            second_moment: first_moment.clone(),
            first_moment,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update: `p -= lr · m̂ / (√v̂ + eps)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {lr}")));
        }
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} moments, {} params, {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "adam: param {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first_moment[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
            }
            let v = self.second_moment[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
            }
            let m = self.first_moment[i].data();
            let v = self.second_moment[i].data();
            for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn clip_three_four_five() {
        let mut g = v(&[3.0, 4.0]);
        let pre = clip_global_norm([&mut g], 1.0).unwrap();
        assert_eq!(pre, 5.0);
        assert!((g.data()[0] - 0.6).abs() < 1e-15);
        assert!((g.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_below_threshold_is_noop() {
        let mut g = v(&[0.3, 0.4]);
        clip_global_norm([&mut g], 1.0).unwrap();
        assert_eq!(g.data(), &[0.3, 0.4]);
        assert!(clip_global_norm([&mut g], 0.0).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = v(&[1.0, -2.0]);
        let g = v(&[0.0, 0.0]);
        let mut st = AdamState::new([&p]);
        st.step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let mut p = v(&[0.0]);
        let g = v(&[0.5]);
        let mut st = AdamState::new([&p]);
        st.step(&mut [&mut p], &[&g], 0.0005).unwrap();
        let expected = -0.0005 * (0.5 / (0.5 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = v(&[0.0, 1.0]);
        let g = v(&[0.5]);
        let mut st = AdamState::new([&p]);
        assert!(st.step(&mut [&mut p], &[&g], 0.1).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
