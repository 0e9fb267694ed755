//! Discretized variance-preserving SDE.
//!
//! Index convention: timesteps run `1..=N` with `ᾱ_0 = 1`. A reverse step
//! maps `x_i` to `x_{i-1}` using `α_i`, `ᾱ_i` and `ᾱ_{i-1}`, so the last
//! step (`i = 1`) carries no noise.

use serde::{Deserialize, Serialize};

use crate::error::{CkmError, Result};
use crate::tensor::Tensor;

/// Maximum allowed `ᾱ_N`: the terminal marginal must be close to N(0, I).
pub const TERMINAL_ALPHA_BAR_MAX: f64 = 0.01;

/// Parameters from which a schedule is rebuilt; stored with model weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub n: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleSpec {
    /// Linear `β(t) ∈ [0.1, 20]` of the continuous VP SDE discretized into `n` steps.
    pub fn vp(n: usize) -> Self {
        ScheduleSpec {
            n,
            beta_min: 0.1 / n as f64,
            beta_max: 20.0 / n as f64,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.n, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear β ramp from `beta_min` to `beta_max` over `n` steps.
pub fn make_schedule(n: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if n < 10 {
        return Err(CkmError::invalid(format!(
            "need at least 10 timesteps, got {n}"
        )));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(CkmError::invalid(format!(
            "beta range [{beta_min}, {beta_max}] must satisfy 0 < min <= max < 1"
        )));
    }
    let beta: Vec<f64> = (0..n)
        .map(|k| beta_min + (beta_max - beta_min) * k as f64 / (n - 1) as f64)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(n);
    let mut acc = 1.0f64;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    if acc >= TERMINAL_ALPHA_BAR_MAX {
        return Err(CkmError::invalid(format!(
            "terminal alpha_bar {acc:.4} is not below {TERMINAL_ALPHA_BAR_MAX}; increase n or beta_max"
        )));
    }
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            n,
            beta_min,
            beta_max,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `β_i` for `1 <= i <= N`.
    pub fn beta(&self, i: usize) -> f64 {
        self.beta[i - 1]
    }

    /// `α_i` for `1 <= i <= N`.
    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha[i - 1]
    }

    /// `ᾱ_i` for `0 <= i <= N`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.alpha_bar[i - 1]
        }
    }

    /// Standard deviation of the perturbation kernel at step `i`.
    pub fn sigma(&self, i: usize) -> f64 {
        (1.0 - self.alpha_bar(i)).sqrt()
    }

    fn check_step(&self, i: usize, lo: usize) -> Result<()> {
        if i < lo || i > self.steps() {
            return Err(CkmError::invalid(format!(
                "timestep {i} outside [{lo}, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `x_i = √ᾱ_i·x0 + √(1−ᾱ_i)·z0`.
    pub fn perturb(&self, x0: &Tensor<f64>, i: usize, z0: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check_step(i, 0)?;
        let ab = self.alpha_bar(i);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(z0, |x, z| a * x + b * z)
    }

    /// Score of the perturbed marginal implied by the injected noise: `−z0/√(1−ᾱ_i)`.
    pub fn score_from_noise(&self, z0: &Tensor<f64>, i: usize) -> Result<Tensor<f64>> {
        self.check_step(i, 0)?;
        let var = 1.0 - self.alpha_bar(i);
        if var <= 0.0 {
            return Err(CkmError::invalid(format!(
                "score undefined at timestep {i}: 1 - alpha_bar is 0"
            )));
        }
        Ok(z0.scale(-1.0 / var.sqrt()))
    }

    /// One ancestral (predictor) step from `x_i` to `x_{i-1}`:
    /// `x_i/√α_i + (1−α_i)/√α_i·s + √((1−α_i)(1−ᾱ_{i−1})/(1−ᾱ_i))·z`.
    pub fn ancestral_step(
        &self,
        x_i: &Tensor<f64>,
        score: &Tensor<f64>,
        i: usize,
        z: &Tensor<f64>,
    ) -> Result<Tensor<f64>> {
        self.check_step(i, 1)?;
        CkmError::check_shape(x_i.shape(), score.shape())?;
        CkmError::check_shape(x_i.shape(), z.shape())?;
        let a = self.alpha(i);
        let inv_sqrt_a = 1.0 / a.sqrt();
        let drift = (1.0 - a) * inv_sqrt_a;
        let noise = self.posterior_std(i);
        let data = x_i
            .data()
            .iter()
            .zip(score.data())
            .zip(z.data())
            .map(|((&x, &s), &z)| inv_sqrt_a * x + drift * s + noise * z)
            .collect();
        Tensor::from_vec(x_i.shape(), data)
    }

    /// Noise coefficient of the ancestral step; exactly 0 at `i = 1`.
    pub fn posterior_std(&self, i: usize) -> f64 {
        let prev = self.alpha_bar(i - 1);
        ((1.0 - self.alpha(i)) * (1.0 - prev) / (1.0 - self.alpha_bar(i))).sqrt()
    }

    /// `x̂0 = (x_i + (1−ᾱ_i)·s)/√ᾱ_i`.
    pub fn progressive_estimate(
        &self,
        x_i: &Tensor<f64>,
        score: &Tensor<f64>,
        i: usize,
    ) -> Result<Tensor<f64>> {
        self.check_step(i, 1)?;
        let ab = self.alpha_bar(i);
        let inv = 1.0 / ab.sqrt();
        x_i.zip_map(score, |x, s| (x + (1.0 - ab) * s) * inv)
    }
}

/// One Langevin MCMC step: `x + ε·s + √(2ε)·z`.
pub fn langevin_step(
    x: &Tensor<f64>,
    score: &Tensor<f64>,
    eps: f64,
    z: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    if !(eps > 0.0) {
        return Err(CkmError::invalid(format!(
            "Langevin step size must be positive, got {eps}"
        )));
    }
    CkmError::check_shape(x.shape(), score.shape())?;
    CkmError::check_shape(x.shape(), z.shape())?;
    let noise = (2.0 * eps).sqrt();
    let data = x
        .data()
        .iter()
        .zip(score.data())
        .zip(z.data())
        .map(|((&x, &s), &z)| x + eps * s + noise * z)
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ddpm() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 0.02).unwrap()
    }

    fn rand_t(seed: u64, shape: Shape) -> Tensor<f64> {
        Tensor::standard_normal(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn schedule_first_and_last() {
        let s = ddpm();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        // Independent one-line product.
        let prod: f64 = (0..1000)
            .map(|k| 1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 999.0))
            .product();
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn schedule_invariants() {
        for s in [
            ddpm(),
            ScheduleSpec::vp(200).build().unwrap(),
            ScheduleSpec::vp(50).build().unwrap(),
        ] {
            for i in 1..=s.steps() {
                assert_eq!(s.alpha(i) + s.beta(i), 1.0);
                assert!(s.beta(i) > 0.0 && s.beta(i) < 1.0);
                assert_eq!(s.alpha_bar(i), s.alpha_bar(i - 1) * s.alpha(i));
                assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
                if i > 1 {
                    assert!(s.beta(i) >= s.beta(i - 1));
                }
            }
            assert!(s.alpha_bar(s.steps()) < TERMINAL_ALPHA_BAR_MAX);
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(5, 1e-4, 0.02).is_err());
        assert!(make_schedule(100, 0.0, 0.02).is_err());
        assert!(make_schedule(100, 0.03, 0.02).is_err());
        assert!(make_schedule(100, 1e-4, 1.0).is_err());
        // Too short a ramp never reaches the terminal distribution.
        assert!(make_schedule(200, 1e-4, 0.02).is_err());
    }

    #[test]
    fn perturb_branches() {
        let s = ddpm();
        let shape = Shape::new(2, 3, 3);
        let x0 = rand_t(1, shape);
        let zero = Tensor::zeros(shape);
        let p = s.perturb(&x0, 500, &zero).unwrap();
        for (a, b) in p.data().iter().zip(x0.data()) {
            assert!((a - s.alpha_bar(500).sqrt() * b).abs() < 1e-15);
        }
        assert_eq!(s.perturb(&x0, 0, &rand_t(2, shape)).unwrap(), x0);
        let ones = Tensor::filled(shape, 1.0);
        let p = s.perturb(&zero, 1000, &ones).unwrap();
        let expect = (1.0 - s.alpha_bar(1000)).sqrt();
        assert!(p.data().iter().all(|v| (v - expect).abs() < 1e-15));
        assert!(s
            .perturb(&x0, 3, &Tensor::zeros(Shape::new(1, 3, 3)))
            .is_err());
    }

    #[test]
    fn score_from_noise_properties() {
        let s = ddpm();
        let shape = Shape::new(1, 4, 4);
        let zero = Tensor::zeros(shape);
        assert_eq!(s.score_from_noise(&zero, 10).unwrap(), zero);
        let z = rand_t(5, shape);
        let a = s.score_from_noise(&z, 10).unwrap();
        let b = s.score_from_noise(&z.scale(2.0), 10).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        let at_n = s.score_from_noise(&z, 1000).unwrap();
        for (x, y) in at_n.data().iter().zip(z.data()) {
            assert!((x + y).abs() < 1e-4 * y.abs().max(1.0));
        }
        assert!(s.score_from_noise(&z, 0).is_err());
    }

    #[test]
    fn ancestral_step_examples() {
        let s = ScheduleSpec::vp(200).build().unwrap();
        let shape = Shape::new(2, 2, 2);
        let x = rand_t(3, shape);
        let zero = Tensor::zeros(shape);
        let out = s.ancestral_step(&x, &zero, 50, &zero).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b / s.alpha(50).sqrt()).abs() < 1e-12);
        }
        // The final step is deterministic.
        assert_eq!(s.posterior_std(1), 0.0);
        let score = rand_t(4, shape);
        let a = s.ancestral_step(&x, &score, 1, &rand_t(5, shape)).unwrap();
        let b = s.ancestral_step(&x, &score, 1, &rand_t(6, shape)).unwrap();
        assert_eq!(a, b);
        assert!(s.ancestral_step(&x, &score, 0, &zero).is_err());
        assert!(s.ancestral_step(&x, &score, 201, &zero).is_err());
    }

    #[test]
    fn ancestral_step_identity_limit() {
        // β → 0: a schedule whose first β is tiny leaves x unchanged at step 1.
        let s = make_schedule(2000, 1e-12, 0.02).unwrap();
        let shape = Shape::new(1, 2, 2);
        let x = rand_t(8, shape);
        let zero = Tensor::zeros(shape);
        let out = s.ancestral_step(&x, &zero, 1, &zero).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn langevin_step_examples() {
        let shape = Shape::new(1, 3, 3);
        let x = rand_t(9, shape);
        let zero = Tensor::zeros(shape);
        assert_eq!(langevin_step(&x, &zero, 0.1, &zero).unwrap(), x);
        let half = langevin_step(&x, &x.scale(-1.0), 0.5, &zero).unwrap();
        for (a, b) in half.data().iter().zip(x.data()) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
        assert!(langevin_step(&x, &zero, 0.0, &zero).is_err());
        assert!(langevin_step(&x, &zero, -1.0, &zero).is_err());
    }

    #[test]
    fn langevin_reaches_gaussian_stationary_variance() {
        // Target N(μ, s²) with analytic score −(x−μ)/s²; 10⁴ independent chains.
        let (mu, var) = (0.7, 0.25);
        let shape = Shape::new(1, 100, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut x = Tensor::<f64>::zeros(shape);
        let eps = 0.005 * var;
        for _ in 0..2000 {
            let score = x.map(|v| -(v - mu) / var);
            let z = Tensor::standard_normal(shape, &mut rng);
            x = langevin_step(&x, &score, eps, &z).unwrap();
        }
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let sample_var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - mu).abs() < 0.02, "mean {mean}");
        assert!((sample_var / var - 1.0).abs() < 0.05, "var {sample_var}");
    }

    #[test]
    fn progressive_estimate_inverts_kernel() {
        let s = ddpm();
        let shape = Shape::new(2, 4, 4);
        for (k, i) in [1, 500, 1000].into_iter().enumerate() {
            let x0 = rand_t(20 + k as u64, shape);
            let z0 = rand_t(30 + k as u64, shape);
            let xi = s.perturb(&x0, i, &z0).unwrap();
            let score = s.score_from_noise(&z0, i).unwrap();
            let back = s.progressive_estimate(&xi, &score, i).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-5, "i={i}: {a} vs {b}");
            }
        }
        let x = rand_t(40, shape);
        let zero = Tensor::zeros(shape);
        let est = s.progressive_estimate(&x, &zero, 100).unwrap();
        for (a, b) in est.data().iter().zip(x.data()) {
            assert!((a - b / s.alpha_bar(100).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_moments() {
        let s = ScheduleSpec::vp(200).build().unwrap();
        let shape = Shape::new(2, 4, 4);
        let x0 = rand_t(50, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for i in [1, 100, 200] {
            let draws = 10_000;
            let mut sum = vec![0.0; shape.len()];
            let mut sq = vec![0.0; shape.len()];
            for _ in 0..draws {
                let z = Tensor::standard_normal(shape, &mut rng);
                let p = s.perturb(&x0, i, &z).unwrap();
                for (k, v) in p.data().iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            let var_true = 1.0 - s.alpha_bar(i);
            let se = (var_true / draws as f64).sqrt();
            let mut pooled = 0.0;
            for k in 0..shape.len() {
                let mean = sum[k] / draws as f64;
                assert!((mean - s.alpha_bar(i).sqrt() * x0.data()[k]).abs() < 3.0 * se + 1e-12);
                pooled += (sq[k] - draws as f64 * mean * mean) / (draws as f64 - 1.0);
            }
            pooled /= shape.len() as f64;
            assert!(
                (pooled / var_true - 1.0).abs() < 0.02,
                "i={i}: {pooled} vs {var_true}"
            );
        }
    }
}
