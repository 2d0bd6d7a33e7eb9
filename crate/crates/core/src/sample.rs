//! Reverse diffusion with per-step branch aggregation, fusion, optional
//! consistency projection and multi-run uncertainty.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::branch::{precompute_branch_outputs, ScoreBranch};
use crate::degrade::DegradationOperator;
use crate::error::{Error, Result};
use crate::fusion::{AverageFusion, Fusion};
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::volume::{ValueRange, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Learned,
    Average,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(FusionMode::Learned),
            "average" => Ok(FusionMode::Average),
            other => Err(Error::Config(format!("unknown fusion mode `{other}` (learned|average)"))),
        }
    }
}

/// What is added back between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// A fresh standard normal draw every step.
    Fresh,
    /// The noise implied by the current `y_t` and `ŷ0` (deterministic DDIM).
    Deterministic,
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(NoiseMode::Fresh),
            "deterministic" => Ok(NoiseMode::Deterministic),
            other => Err(Error::Config(format!("unknown noise mode `{other}` (fresh|deterministic)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Consistency {
    pub op: DegradationOperator,
    /// Which condition volume is the degraded observation.
    pub condition: usize,
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub plan: StepPlan,
    pub consistency: Option<Consistency>,
    pub runs: usize,
    pub fusion: FusionMode,
    pub noise: NoiseMode,
    /// Clamp every `ŷ0` to the model range before projection and renoising.
    pub clip_denoised: bool,
    pub seed: u64,
}

/// Passed to the step observer after projection.
pub struct StepInfo<'a> {
    pub index: usize,
    pub t: usize,
    pub t_prev: usize,
    pub y0_hat: &'a Volume,
    /// `max |Aŷ0 − x|` when projection is on.
    pub consistency_residual: Option<f64>,
}

fn normal_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Result<Volume> {
    let n = dims.iter().product();
    Volume::new(dims, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// RNG for run `run` of seed `seed`; runs use disjoint streams.
pub fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

fn check_inputs(cond: &[Volume], cfg: &SampleConfig) -> Result<[usize; 3]> {
    let first = cond.first().ok_or_else(|| Error::Config("sampling needs at least one condition".into()))?;
    let dims = first.dims();
    for c in cond {
        c.expect_dims(dims)?;
    }
    if let Some(c) = &cfg.consistency {
        let x = cond
            .get(c.condition)
            .ok_or_else(|| Error::Config(format!("consistency condition {} missing", c.condition)))?;
        c.op.check_dims(dims)?;
        let residual = c.op.range_residual(x)?;
        if residual > crate::degrade::RANGE_TOLERANCE {
            return Err(Error::ConsistencyDomain { residual });
        }
    }
    Ok(dims)
}

fn sample_run(
    sched: &NoiseSchedule,
    branches: &[&dyn ScoreBranch],
    fusion: &dyn Fusion,
    cond: &[Volume],
    cfg: &SampleConfig,
    mut rng: ChaCha8Rng,
    on_step: &mut dyn FnMut(&StepInfo<'_>),
) -> Result<Volume> {
    let dims = check_inputs(cond, cfg)?;
    if cfg.plan.is_empty() {
        return Err(Error::Config("empty step plan".into()));
    }
    let mut y = normal_volume(&mut rng, dims)?;
    let mut last = None;
    for (index, (t, t_prev)) in cfg.plan.steps().enumerate() {
        let outs = precompute_branch_outputs(branches, &y, cond, t, fusion.wants_features())?;
        let fused = fusion.fuse(&y, cond, &outs, t)?;
        let mut y0 = sched.estimate_y0(&y, &fused.eps3d, t)?;
        if cfg.clip_denoised {
            y0 = y0.clamp(ValueRange::MODEL);
        }
        let mut residual = None;
        if let Some(c) = &cfg.consistency {
            let x = &cond[c.condition];
            y0 = c.op.project_consistency(&y0, x)?;
            residual = Some(c.op.apply(&y0)?.max_abs_diff(x)? as f64);
        }
        on_step(&StepInfo {
            index,
            t,
            t_prev,
            y0_hat: &y0,
            consistency_residual: residual,
        });
        if t_prev == 0 {
            last = Some(y0);
            break;
        }
        let eps = match cfg.noise {
            NoiseMode::Fresh => normal_volume(&mut rng, dims)?,
            NoiseMode::Deterministic => sched.implied_eps(&y, &y0, t)?,
        };
        y = sched.renoise(&y0, t_prev, &eps)?;
    }
    let y0 = last.expect("plans end at t = 0");
    Ok(y0.clamp(ValueRange::MODEL))
}

fn pick_fusion<'a>(fusion: Option<&'a dyn Fusion>, cfg: &SampleConfig) -> &'a dyn Fusion {
    static AVERAGE: AverageFusion = AverageFusion;
    match (cfg.fusion, fusion) {
        (FusionMode::Learned, Some(f)) => f,
        _ => &AVERAGE,
    }
}

/// One reverse trajectory in model range. Average mode, or no fusion net,
/// uses the plain score average.
pub fn sample_volume(
    sched: &NoiseSchedule,
    branches: &[&dyn ScoreBranch],
    fusion: Option<&dyn Fusion>,
    cond: &[Volume],
    cfg: &SampleConfig,
) -> Result<Volume> {
    sample_volume_with(sched, branches, fusion, cond, cfg, &mut |_| {})
}

pub fn sample_volume_with(
    sched: &NoiseSchedule,
    branches: &[&dyn ScoreBranch],
    fusion: Option<&dyn Fusion>,
    cond: &[Volume],
    cfg: &SampleConfig,
    on_step: &mut dyn FnMut(&StepInfo<'_>),
) -> Result<Volume> {
    let f = pick_fusion(fusion, cfg);
    sample_run(sched, branches, f, cond, cfg, run_rng(cfg.seed, 0), on_step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyStats {
    pub mean: Volume,
    /// Sample standard deviation (n − 1 in the denominator).
    pub std: Volume,
    pub n: usize,
}

/// Voxelwise mean and sample standard deviation of `runs`.
pub fn run_statistics(runs: &[Volume]) -> Result<UncertaintyStats> {
    let n = runs.len();
    if n < 2 {
        return Err(Error::Config(format!("uncertainty needs at least 2 runs, got {n}")));
    }
    let dims = runs[0].dims();
    for r in runs {
        r.expect_dims(dims)?;
    }
    let len = runs[0].len();
    let mut mean = vec![0.0f32; len];
    let mut std = vec![0.0f32; len];
    for i in 0..len {
        let m = runs.iter().map(|r| r.data()[i] as f64).sum::<f64>() / n as f64;
        let ss = runs.iter().map(|r| (r.data()[i] as f64 - m).powi(2)).sum::<f64>();
        mean[i] = m as f32;
        std[i] = (ss / (n - 1) as f64).sqrt() as f32;
    }
    Ok(UncertaintyStats {
        mean: Volume::new(dims, mean)?,
        std: Volume::new(dims, std)?,
        n,
    })
}

/// `cfg.runs` independent trajectories on disjoint RNG streams. Returns the
/// first run as the point estimate together with the voxelwise statistics.
pub fn sample_with_uncertainty(
    sched: &NoiseSchedule,
    branches: &[&dyn ScoreBranch],
    fusion: Option<&dyn Fusion>,
    cond: &[Volume],
    cfg: &SampleConfig,
) -> Result<(Volume, UncertaintyStats)> {
    if cfg.runs < 2 {
        return Err(Error::Config(format!("uncertainty needs at least 2 runs, got {}", cfg.runs)));
    }
    let f = pick_fusion(fusion, cfg);
    let runs = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|r| sample_run(sched, branches, f, cond, cfg, run_rng(cfg.seed, r), &mut |_| {}))
        .collect::<Result<Vec<_>>>()?;
    let stats = run_statistics(&runs)?;
    Ok((runs.into_iter().next().expect("runs >= 2"), stats))
}

/// Multi-condition sampling: one perpendicular branch pair per condition,
/// fused by a single `K = 2·pairs` net.
pub fn fuse_multimodality(
    sched: &NoiseSchedule,
    branch_pairs: &[[&dyn ScoreBranch; 2]],
    fusion: Option<&dyn Fusion>,
    cond: &[Volume],
    cfg: &SampleConfig,
) -> Result<Volume> {
    if branch_pairs.is_empty() || branch_pairs.len() != cond.len() {
        return Err(Error::Config(format!(
            "{} branch pairs for {} conditions",
            branch_pairs.len(),
            cond.len()
        )));
    }
    let flat: Vec<&dyn ScoreBranch> = branch_pairs.iter().flat_map(|p| p.iter().copied()).collect();
    sample_volume(sched, &flat, fusion, cond, cfg)
}
