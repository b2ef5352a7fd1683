use super::{Result, TaskError};
use crate::rng::Stream;

/// `L(θ) = ½ Σ aᵢ (θᵢ − cᵢ)²` with positive diagonal curvature `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTask {
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
}

impl QuadraticTask {
    pub fn new(curvature: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        if curvature.len() != center.len() || curvature.is_empty() {
            return Err(TaskError::BadQuadratic(format!(
                "curvature has {} entries, center {}",
                curvature.len(),
                center.len()
            )));
        }
        if let Some(a) = curvature.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
            return Err(TaskError::BadQuadratic(format!("curvature entry {a} is not positive")));
        }
        Ok(Self { curvature, center })
    }

    /// Curvatures uniform in `[lo, hi]`, centers standard normal.
    pub fn random(dim: usize, lo: f64, hi: f64, rng: &mut Stream) -> Result<Self> {
        let curvature = (0..dim).map(|_| lo + (hi - lo) * rng.next_f64()).collect();
        let center = (0..dim).map(|_| rng.normal()).collect();
        Self::new(curvature, center)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn max_curvature(&self) -> f64 {
        self.curvature.iter().copied().fold(0.0, f64::max)
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        self.curvature
            .iter()
            .zip(&self.center)
            .zip(theta)
            .map(|((a, c), t)| 0.5 * a * (t - c) * (t - c))
            .sum()
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        self.curvature
            .iter()
            .zip(&self.center)
            .zip(theta)
            .map(|((a, c), t)| a * (t - c))
            .collect()
    }

    /// Parameters after `k` gradient steps of size `alpha` from `theta0`.
    pub fn unrolled(&self, theta0: &[f64], alpha: f64, k: usize) -> Vec<f64> {
        self.curvature
            .iter()
            .zip(&self.center)
            .zip(theta0)
            .map(|((a, c), t)| c + (1.0 - alpha * a).powi(k as i32) * (t - c))
            .collect()
    }
}

/// Closed-form gradient of `θ₀ ↦ L(θ_k)` where `θ_k` is `k` inner steps of size `alpha`.
pub fn quadratic_meta_gradient_oracle(task: &QuadraticTask, theta0: &[f64], alpha: f64, k: usize) -> Result<Vec<f64>> {
    if theta0.len() != task.dim() {
        return Err(TaskError::BadQuadratic(format!(
            "theta0 has {} entries, task has {}",
            theta0.len(),
            task.dim()
        )));
    }
    let product = alpha * task.max_curvature();
    if product >= 2.0 {
        return Err(TaskError::Unstable(product));
    }
    let theta_k = task.unrolled(theta0, alpha, k);
    Ok(task
        .curvature
        .iter()
        .zip(&task.center)
        .zip(&theta_k)
        .map(|((a, c), t)| (1.0 - alpha * a).powi(k as i32) * a * (t - c))
        .collect())
}
