//! Distribution distances and the evaluation protocols built on them.

mod protocols;

pub use protocols::{
    ablation_csv, accuracy_csv, augmentation_csv, augmentation_study, batch_size_ablation,
    bias_fraction, bias_probe, distance_csv, eval_generation_accuracy, summarize_distances,
    AblationRow, AugmentationRow, ClassGenerators, DistanceRow, EvalRow, Generator, Method,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Slack allowed below zero for the unbiased kernel estimator.
pub const KERNEL_NEGATIVE_SLACK: f64 = 1e-6;

/// Sample mean and unbiased (`n − 1`) covariance of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let d = check_points(points, "moments")?;
        if points.len() < 2 {
            return Err(Error::InvalidArgument("moments need at least 2 points".into()));
        }
        let n = points.len() as f64;
        let mut mean = DVector::zeros(d);
        for p in points {
            mean += DVector::from_column_slice(p);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for p in points {
            let c = DVector::from_column_slice(p) - &mean;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_points(points: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = points
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument(format!("{what}: empty point set")))?;
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape(format!("{what}: points must share a positive dimension")));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input"));
    }
    Ok(d)
}

/// Square root of a symmetric positive semidefinite matrix. Eigenvalues
/// that round-off pushed below zero are treated as zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between two Gaussians.
///
/// `tr((Σ_a Σ_b)^{1/2})` is computed as `tr((Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`,
/// which has the same eigenvalues but stays symmetric.
pub fn frechet_from_moments(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "moment dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let s = sqrt_psd(&a.cov);
    let inner = &s * &b.cov * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner
        .symmetric_eigenvalues()
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d2 = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d2.max(0.0))
}

/// Squared Fréchet distance between Gaussians fitted to `x` and `y`. Each
/// set needs at least `dim + 1` points.
pub fn frechet_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let d = check_points(x, "frechet")?;
    check_points(y, "frechet")?;
    if x.len() < d + 1 || y.len() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "frechet needs at least {} points per set, got {} and {}",
            d + 1,
            x.len(),
            y.len()
        )));
    }
    frechet_from_moments(&GaussianMoments::fit(x)?, &GaussianMoments::fit(y)?)
}

/// `(aᵀb / d + 1)³`.
pub fn poly_kernel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.len() as f64;
    let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared MMD under [`poly_kernel`].
pub fn kernel_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let d = check_points(x, "kernel")?;
    if check_points(y, "kernel")? != d {
        return Err(Error::Shape("kernel: sets have different dimensions".into()));
    }
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidArgument("kernel needs at least 2 points per set".into()));
    }
    let within = |s: &[Vec<f64>]| {
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                total += poly_kernel(&s[i], &s[j]);
            }
        }
        let n = s.len() as f64;
        2.0 * total / (n * (n - 1.0))
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += poly_kernel(a, b);
        }
    }
    let cross = cross / (x.len() * y.len()) as f64;
    Ok(within(x) + within(y) - 2.0 * cross)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kernel_formula() {
        assert_eq!(poly_kernel(&[1.0, 0.0], &[1.0, 0.0]), 3.375);
    }

    #[test]
    fn moments_are_unbiased() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 1.0], vec![4.0, 4.0]];
        let m = GaussianMoments::fit(&pts).unwrap();
        assert_abs_diff_eq!(m.mean[0], 2.0);
        assert_abs_diff_eq!(m.mean[1], 2.0);
        assert_abs_diff_eq!(m.cov[(0, 0)], 4.0);
        assert_abs_diff_eq!(m.cov[(0, 1)], 3.0);
        assert_abs_diff_eq!(m.cov[(1, 1)], 3.0);
    }

    fn moments(mean: [f64; 2], diag: [f64; 2]) -> GaussianMoments {
        GaussianMoments {
            mean: DVector::from_column_slice(&mean),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(&diag)),
        }
    }

    #[test]
    fn closed_form_cases() {
        let a = moments([0.0, 0.0], [1.0, 1.0]);
        let b = moments([1.0, 0.0], [1.0, 1.0]);
        assert_abs_diff_eq!(frechet_from_moments(&a, &b).unwrap(), 1.0, epsilon = 1e-9);
        let c = moments([0.0, 0.0], [4.0, 1.0]);
        assert_abs_diff_eq!(frechet_from_moments(&c, &a).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos() * 2.0, i as f64 * 0.1])
            .collect();
        assert!(frechet_distance(&pts, &pts).unwrap() < 1e-9);
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(frechet_distance(&pts, &pts).is_err());
        assert!(kernel_distance(&pts[..1], &pts).is_err());
        assert!(frechet_distance(&[], &pts).is_err());
        let bad = vec![vec![f64::NAN, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]];
        assert!(frechet_distance(&bad, &bad).is_err());
    }

    #[test]
    fn kernel_matches_hand_expansion() {
        let x = vec![vec![0.5, -1.0], vec![2.0, 0.0], vec![-1.5, 1.0]];
        let y = vec![vec![1.0, 1.0], vec![0.0, -2.0], vec![0.3, 0.3]];
        // Every pair written out: the within-set sums skip the diagonal.
        let k = |a: &Vec<f64>, b: &Vec<f64>| {
            let dot = a[0] * b[0] + a[1] * b[1];
            (dot / 2.0 + 1.0) * (dot / 2.0 + 1.0) * (dot / 2.0 + 1.0)
        };
        let kxx = (k(&x[0], &x[1]) + k(&x[0], &x[2]) + k(&x[1], &x[2])) * 2.0 / 6.0;
        let kyy = (k(&y[0], &y[1]) + k(&y[0], &y[2]) + k(&y[1], &y[2])) * 2.0 / 6.0;
        let mut kxy = 0.0;
        for a in &x {
            for b in &y {
                kxy += k(a, b);
            }
        }
        let expected = kxx + kyy - 2.0 * kxy / 9.0;
        assert_abs_diff_eq!(kernel_distance(&x, &y).unwrap(), expected, epsilon = 1e-12);
    }
}
