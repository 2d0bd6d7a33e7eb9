//! Linear noise schedule and the closed-form diffusion algebra.
//!
//! Timesteps are 1-based: `t ∈ [1, T]` are noisy levels and `t = 0` is clean
//! data with `ᾱ₀ = 1`.

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    /// `alpha_bar[t]` for `t ∈ [0, T]`.
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_linear_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

pub fn make_linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::Config("diffusion.T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    // running sum of logs keeps the tail accurate
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    let mut log_acc = 0.0f64;
    for b in &beta {
        log_acc += (-b).ln_1p();
        alpha_bar.push(log_acc.exp());
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    /// `β_t` for `t ∈ [1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::Timestep { t, max: self.t_max() });
        }
        Ok(())
    }

    /// `√ᾱ_t · y0 + √(1-ᾱ_t) · ε`.
    pub fn q_sample(&self, y0: &Volume, t: usize, eps: &Volume) -> Result<Volume> {
        let ab = self.alpha_bar(t)?;
        mix(y0, ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// `(y_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`. Near `t = T` this divides by a tiny number.
    pub fn estimate_y0(&self, y_t: &Volume, eps_hat: &Volume, t: usize) -> Result<Volume> {
        let ab = self.alpha_bar(t)?;
        let inv = 1.0 / ab.sqrt();
        mix(y_t, inv, eps_hat, -(1.0 - ab).sqrt() * inv)
    }

    /// `√ᾱ_{t_prev} ŷ0 + √(1-ᾱ_{t_prev}) ε`; same formula as [`Self::q_sample`].
    pub fn renoise(&self, y0_hat: &Volume, t_prev: usize, eps: &Volume) -> Result<Volume> {
        self.q_sample(y0_hat, t_prev, eps)
    }

    /// Noise implied by `y_t` and a clean estimate: `(y_t - √ᾱ_t ŷ0) / √(1-ᾱ_t)`.
    pub fn implied_eps(&self, y_t: &Volume, y0_hat: &Volume, t: usize) -> Result<Volume> {
        let ab = self.alpha_bar(t)?;
        if t == 0 {
            return Err(Error::Timestep { t, max: self.t_max() });
        }
        let inv = 1.0 / (1.0 - ab).sqrt();
        mix(y_t, inv, y0_hat, -ab.sqrt() * inv)
    }
}

/// `a·u + b·v` evaluated in f64 per voxel.
fn mix(u: &Volume, a: f64, v: &Volume, b: f64) -> Result<Volume> {
    u.expect_dims(v.dims())?;
    Volume::new(
        u.dims(),
        u.data()
            .iter()
            .zip(v.data())
            .map(|(&x, &y)| (a * x as f64 + b * y as f64) as f32)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Every timestep.
    Ddpm,
    /// Evenly strided subsequence.
    Ddim,
}

impl std::str::FromStr for StepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(StepMode::Ddpm),
            "ddim" => Ok(StepMode::Ddim),
            other => Err(Error::Config(format!("unknown sample.mode `{other}` (ddpm|ddim)"))),
        }
    }
}

/// Timesteps the denoiser is evaluated at, strictly decreasing in `[1, T]`;
/// step `i` lands on `timesteps[i + 1]`, and the last step lands on 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    pub mode: StepMode,
    pub timesteps: Vec<usize>,
}

impl StepPlan {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// `(t, t_prev)` pairs in execution order.
    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
    }
}

pub fn make_step_plan(s: &NoiseSchedule, mode: StepMode, inference_steps: usize) -> Result<StepPlan> {
    let t_max = s.t_max();
    let n = match mode {
        StepMode::Ddpm => t_max,
        StepMode::Ddim => inference_steps,
    };
    if n == 0 || n > t_max {
        return Err(Error::Config(format!("inference steps must lie in [1, {t_max}], got {n}")));
    }
    let timesteps = (0..n).rev().map(|i| (i + 1) * t_max / n).collect();
    Ok(StepPlan { mode, timesteps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Volume::new(dims, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn alpha_bar_endpoints() {
        let s = NoiseSchedule::default();
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        // plain sequential product in f64
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        let last = s.alpha_bar(1000).unwrap();
        assert!(((last - prod) / prod).abs() < 1e-7, "{last} vs {prod}");
        assert!((last - 4.0358e-5).abs() < 1e-8, "{last}");
        assert!(last < 1e-3);
        let one = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(one.alpha_bar(1).unwrap(), 0.5);
    }

    #[test]
    fn schedule_is_monotone_within_bounds() {
        let s = NoiseSchedule::default();
        for t in 1..=1000 {
            assert!(s.beta(t) >= 1e-4 - 1e-18 && s.beta(t) <= 0.02 + 1e-18);
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        assert!(make_linear_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
    }

    #[test]
    fn q_sample_edges() {
        let s = NoiseSchedule::default();
        let y0 = normal_volume([2, 3, 4], 1);
        let eps = normal_volume([2, 3, 4], 2);
        assert_eq!(s.q_sample(&y0, 0, &eps).unwrap(), y0);
        let z = s.q_sample(&Volume::zeros([2, 3, 4]), 300, &eps).unwrap();
        let c = (1.0 - s.alpha_bar(300).unwrap()).sqrt();
        for (a, b) in z.data().iter().zip(eps.data()) {
            assert!((*a as f64 - c * *b as f64).abs() < 1e-6);
        }
        assert!(matches!(s.q_sample(&y0, 1001, &eps), Err(Error::Timestep { .. })));
    }

    #[test]
    fn q_sample_at_t_max_is_unit_variance() {
        let s = NoiseSchedule::default();
        let y0 = Volume::new([2, 2, 2], vec![-1.0, -0.5, 0.0, 0.25, 0.5, 0.75, 0.9, 1.0]).unwrap();
        let draws = 100_000;
        let mut sum = [0.0f64; 8];
        let mut sq = [0.0f64; 8];
        for d in 0..draws {
            let eps = normal_volume([2, 2, 2], 1_000 + d as u64);
            let y = s.q_sample(&y0, 1000, &eps).unwrap();
            for (i, &v) in y.data().iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += (v as f64).powi(2);
            }
        }
        for i in 0..8 {
            let m = sum[i] / draws as f64;
            let sd = ((sq[i] - draws as f64 * m * m) / (draws - 1) as f64).sqrt();
            assert!((sd - 1.0).abs() < 0.01, "voxel {i}: std {sd}");
        }
    }

    #[test]
    fn estimate_inverts_q_sample() {
        let s = NoiseSchedule::default();
        let y0 = normal_volume([4, 4, 4], 3).map(|v| v.clamp(-1.0, 1.0));
        let eps = normal_volume([4, 4, 4], 4);
        for t in [0, 1, 500, 990] {
            let yt = s.q_sample(&y0, t, &eps).unwrap();
            let back = s.estimate_y0(&yt, &eps, t).unwrap();
            assert!(back.max_abs_diff(&y0).unwrap() <= 1e-4, "t={t}");
        }
        let yt = normal_volume([4, 4, 4], 5);
        let zero = Volume::zeros([4, 4, 4]);
        let r = s.estimate_y0(&yt, &zero, 500).unwrap();
        let inv = 1.0 / s.alpha_bar(500).unwrap().sqrt();
        for (a, b) in r.data().iter().zip(yt.data()) {
            assert!((*a as f64 - *b as f64 * inv).abs() < 1e-5);
        }
        assert_eq!(s.estimate_y0(&yt, &eps, 0).unwrap(), yt);
    }

    #[test]
    fn renoise_cases() {
        let s = NoiseSchedule::default();
        let y0 = normal_volume([2, 2, 2], 6);
        let eps = normal_volume([2, 2, 2], 7);
        let zero = Volume::zeros([2, 2, 2]);
        let r = s.renoise(&y0, 400, &zero).unwrap();
        let c = s.alpha_bar(400).unwrap().sqrt();
        for (a, b) in r.data().iter().zip(y0.data()) {
            assert!((*a as f64 - c * *b as f64).abs() < 1e-6);
        }
        assert_eq!(s.renoise(&y0, 0, &eps).unwrap(), y0);
        assert_eq!(s.renoise(&y0, 321, &eps).unwrap(), s.q_sample(&y0, 321, &eps).unwrap());
    }

    #[test]
    fn implied_eps_recovers_noise() {
        let s = NoiseSchedule::default();
        let y0 = normal_volume([2, 2, 2], 8);
        let eps = normal_volume([2, 2, 2], 9);
        let yt = s.q_sample(&y0, 700, &eps).unwrap();
        assert!(s.implied_eps(&yt, &y0, 700).unwrap().max_abs_diff(&eps).unwrap() < 1e-4);
    }

    #[test]
    fn step_plans() {
        let s = NoiseSchedule::default();
        let p = make_step_plan(&s, StepMode::Ddim, 50).unwrap();
        assert_eq!(p.len(), 50);
        assert!(p.timesteps.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(p.timesteps[0], 1000);
        assert_eq!(p.steps().last().unwrap(), (20, 0));
        let full = make_step_plan(&s, StepMode::Ddim, 1000).unwrap();
        assert_eq!(full.timesteps, (1..=1000).rev().collect::<Vec<_>>());
        assert_eq!(make_step_plan(&s, StepMode::Ddpm, 7).unwrap(), full.clone_with(StepMode::Ddpm));
        let one = make_step_plan(&s, StepMode::Ddim, 1).unwrap();
        assert_eq!(one.steps().collect::<Vec<_>>(), vec![(1000, 0)]);
        assert!(make_step_plan(&s, StepMode::Ddim, 0).is_err());
        assert!(make_step_plan(&s, StepMode::Ddim, 1001).is_err());
        let odd = make_step_plan(&make_linear_schedule(10, 1e-4, 0.02).unwrap(), StepMode::Ddim, 3).unwrap();
        assert_eq!(odd.timesteps, vec![10, 6, 3]);
    }

    impl StepPlan {
        fn clone_with(&self, mode: StepMode) -> StepPlan {
            StepPlan {
                mode,
                timesteps: self.timesteps.clone(),
            }
        }
    }
}
