//! Training loops for the planar branches and the fusion net.
//!
//! Every random draw comes from one ChaCha8 stream per trainer, consumed in a
//! fixed order, so a run is determined by its seed, config and data. The
//! stream position is checkpointed alongside the Adam moments.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use scorefusion_tensor::{Adam, AdamConfig, Gradients, Tensor};

use crate::branch::{precompute_branch_outputs, slice_batch, Branch2D, ScoreBranch};
use crate::checkpoint::{AdamState, Checkpoint, NetKind, RngState};
use crate::config::{echo_net2d, echo_net3d, join_list, net2d_from, net3d_from, ConfigMap};
use crate::error::{Error, Result};
use crate::net2d::{build_net2d, Net2D};
use crate::net3d::{build_net3d, Net3D};
use crate::schedule::{make_linear_schedule, NoiseSchedule};
use crate::task::TaskInputs;
use crate::volume::{PatchSpec, SliceAxis, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Clip the global gradient norm; off by default.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Adam at 5e-5, batch 4.
    pub fn planar(seed: u64) -> Self {
        Self {
            lr: 5e-5,
            batch: 4,
            seed,
            grad_clip: None,
        }
    }

    /// Adam at 1e-4, batch 1.
    pub fn volumetric(seed: u64) -> Self {
        Self {
            lr: 1e-4,
            batch: 1,
            seed,
            grad_clip: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    fn echo(&self, map: &mut ConfigMap) {
        map.set("train.lr", self.lr);
        map.set("train.batch", self.batch);
        map.set("train.seed", self.seed);
        map.set("train.grad_clip", self.grad_clip.unwrap_or(0.0));
    }

    fn from_echo(map: &ConfigMap) -> Result<Self> {
        let clip: f64 = map.require("train.grad_clip")?;
        Ok(Self {
            lr: map.require("train.lr")?,
            batch: map.require("train.batch")?,
            seed: map.require("train.seed")?,
            grad_clip: (clip > 0.0).then_some(clip),
        })
    }
}

/// Patch pre-training, then optional full-volume fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage3D {
    pub patch_extent: [usize; 3],
    pub patch_steps: u64,
    pub finetune: bool,
    pub finetune_steps: u64,
}

impl Stage3D {
    pub fn total_steps(&self) -> u64 {
        self.patch_steps + if self.finetune { self.finetune_steps } else { 0 }
    }

    fn echo(&self, map: &mut ConfigMap) {
        map.set("train3d.patch_extent", join_list(&self.patch_extent));
        map.set("train3d.patch_steps", self.patch_steps);
        map.set("train3d.finetune", self.finetune);
        map.set("train3d.finetune_steps", self.finetune_steps);
    }

    fn from_echo(map: &ConfigMap) -> Result<Self> {
        let e = map
            .get_list("train3d.patch_extent")?
            .ok_or_else(|| Error::Config("missing key `train3d.patch_extent`".into()))?;
        let patch_extent: [usize; 3] = e
            .try_into()
            .map_err(|_| Error::Config("train3d.patch_extent needs three values".into()))?;
        Ok(Self {
            patch_extent,
            patch_steps: map.require("train3d.patch_steps")?,
            finetune: map.get_bool("train3d.finetune")?.unwrap_or(false),
            finetune_steps: map.require("train3d.finetune_steps")?,
        })
    }
}

pub fn echo_schedule(s: &NoiseSchedule, map: &mut ConfigMap) {
    map.set("schedule.t", s.t_max());
    map.set("schedule.beta_start", s.beta(1));
    map.set("schedule.beta_end", s.beta(s.t_max()));
}

pub fn schedule_from(map: &ConfigMap) -> Result<NoiseSchedule> {
    let d = NoiseSchedule::default();
    make_linear_schedule(
        map.get_or("schedule.t", d.t_max())?,
        map.get_or("schedule.beta_start", d.beta(1))?,
        map.get_or("schedule.beta_end", d.beta(d.t_max()))?,
    )
}

/// One telemetry line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

impl StepRecord {
    pub const HEADER: &'static str = "step,loss,lr,wall_ms";

    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.lr, self.wall_ms)
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn clip(grads: &mut Gradients<f32>, limit: Option<f64>) {
    if let Some(c) = limit {
        let norm = grads.sq_norm().sqrt();
        if norm > c {
            grads.scale(c / norm);
        }
    }
}

fn check_finite(step: u64, loss: f64, grads: &Gradients<f32>, detail: impl FnOnce() -> String) -> Result<()> {
    let g = grads.sq_norm();
    if loss.is_finite() && g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("loss {loss}, grad sq-norm {g}, {}", detail()),
        })
    }
}

/// Slice-wise noise-prediction training of one planar branch.
pub struct Trainer2D {
    pub net: Net2D<f32>,
    pub axis: SliceAxis,
    /// Indices into the task's condition list.
    pub conditions: Vec<usize>,
    pub cfg: TrainConfig,
    pub sched: NoiseSchedule,
    pub echo: ConfigMap,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer2D {
    /// `extra` is merged into the checkpoint's config echo.
    pub fn new(
        net: Net2D<f32>,
        axis: SliceAxis,
        conditions: Vec<usize>,
        sched: NoiseSchedule,
        cfg: TrainConfig,
        extra: &ConfigMap,
    ) -> Result<Self> {
        cfg.validate()?;
        if conditions.len() != net.cfg.cond_channels {
            return Err(Error::Config(format!(
                "{} conditions bound to a net with {} condition channels",
                conditions.len(),
                net.cfg.cond_channels
            )));
        }
        let mut echo = extra.clone();
        echo_net2d(&net.cfg, &mut echo);
        echo_schedule(&sched, &mut echo);
        cfg.echo(&mut echo);
        echo.set("branch.axis", axis.index());
        echo.set("branch.conditions", join_list(&conditions));
        let adam = Adam::new(AdamConfig::with_lr(cfg.lr), &net.store);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            net,
            axis,
            conditions,
            cfg,
            sched,
            echo,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Draw `batch` (volume, slice, t, ε) tuples, take one Adam step.
    pub fn step(&mut self, data: &[TaskInputs]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let start = Instant::now();
        let t_max = self.sched.t_max();
        let mut ys = Vec::with_capacity(self.cfg.batch);
        let mut xs = Vec::with_capacity(self.cfg.batch);
        let mut eps = Vec::new();
        let mut ts = Vec::with_capacity(self.cfg.batch);
        let mut picks = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            let v = self.rng.random_range(0..data.len());
            let item = &data[v];
            let dims = item.target.dims();
            let s = self.rng.random_range(0..self.axis.count(dims));
            let t = self.rng.random_range(1..=t_max);
            let (rows, cols) = self.axis.plane_dims(dims);
            eps.extend(normal_vec(&mut self.rng, rows * cols));
            ys.push(slice_batch(&item.target, self.axis, s..s + 1));
            let parts = self
                .conditions
                .iter()
                .map(|&c| {
                    let cv = item.cond.get(c).ok_or_else(|| {
                        Error::Config(format!("branch wants condition {c}, data has {}", item.cond.len()))
                    })?;
                    cv.expect_dims(dims)?;
                    Ok(slice_batch(cv, self.axis, s..s + 1))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor<f32>> = parts.iter().collect();
            xs.push(Tensor::concat_channels(&refs)?);
            ts.push(t);
            picks.push((v, s));
        }
        let y0 = Tensor::concat_batch(&ys.iter().collect::<Vec<_>>())?;
        let x = Tensor::concat_batch(&xs.iter().collect::<Vec<_>>())?;
        let eps = Tensor::from_vec(y0.shape(), eps)?;
        let (loss, mut grads) = self.net.loss(&self.sched, &y0, &x, &ts, &eps)?;
        self.step += 1;
        check_finite(self.step, loss, &grads, || format!("t {ts:?}, (volume, slice) {picks:?}"))?;
        clip(&mut grads, self.cfg.grad_clip);
        self.adam.update(&mut self.net.store, &grads)?;
        Ok(StepRecord {
            step: self.step,
            loss,
            lr: self.cfg.lr,
            wall_ms: start.elapsed().as_millis(),
        })
    }

    /// Run until `step_count() == until`, calling `on_step` after each step.
    pub fn run(
        &mut self,
        data: &[TaskInputs],
        until: u64,
        on_step: &mut dyn FnMut(&Self, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let r = self.step(data)?;
            on_step(self, &r)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: NetKind::Planar,
            config: self.echo.clone(),
            step: self.step,
            rng: Some(RngState::capture(&self.rng)),
            params: Checkpoint::params_of(&self.net.store),
            adam: Some(AdamState::capture(&self.adam)),
        }
    }

    /// Rebuild a trainer from a checkpoint alone.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let (net, axis, conditions) = planar_from_checkpoint(ck)?;
        let sched = schedule_from(&ck.config)?;
        let cfg = TrainConfig::from_echo(&ck.config)?;
        let rng = ck
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no RNG state to resume from".into()))?
            .restore();
        let adam = ck
            .adam
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?
            .restore(&net.store)?;
        Ok(Self {
            net,
            axis,
            conditions,
            cfg,
            sched,
            echo: ck.config.clone(),
            adam,
            rng,
            step: ck.step,
        })
    }

    pub fn branch(&self) -> Branch2D {
        Branch2D::new(self.net.clone(), self.axis, self.conditions.clone())
    }
}

fn planar_from_checkpoint(ck: &Checkpoint) -> Result<(Net2D<f32>, SliceAxis, Vec<usize>)> {
    if ck.kind != NetKind::Planar {
        return Err(Error::Checkpoint("expected a planar-branch checkpoint".into()));
    }
    let cfg = net2d_from(&ck.config, 0)?;
    let mut net = build_net2d(cfg, 0)?;
    ck.load_into(&mut net.store)?;
    let axis = SliceAxis::from_index(ck.config.require("branch.axis")?)?;
    let conditions = ck.config.get_list("branch.conditions")?.unwrap_or_default();
    Ok((net, axis, conditions))
}

/// A frozen branch from a planar checkpoint.
pub fn load_branch(ck: &Checkpoint) -> Result<Branch2D> {
    let (net, axis, conditions) = planar_from_checkpoint(ck)?;
    Ok(Branch2D::new(net, axis, conditions))
}

/// Trains the fusion net against frozen branches.
pub struct Trainer3D {
    pub net: Net3D<f32>,
    pub cfg: TrainConfig,
    pub stage: Stage3D,
    pub sched: NoiseSchedule,
    pub echo: ConfigMap,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer3D {
    pub fn new(
        net: Net3D<f32>,
        sched: NoiseSchedule,
        cfg: TrainConfig,
        stage: Stage3D,
        extra: &ConfigMap,
    ) -> Result<Self> {
        cfg.validate()?;
        PatchSpec {
            origin: [0; 3],
            extent: stage.patch_extent,
        }
        .validate(stage.patch_extent)?;
        let mut echo = extra.clone();
        echo_net3d(&net.cfg, &mut echo);
        echo_schedule(&sched, &mut echo);
        cfg.echo(&mut echo);
        stage.echo(&mut echo);
        let adam = Adam::new(AdamConfig::with_lr(cfg.lr), &net.store);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            net,
            cfg,
            stage,
            sched,
            echo,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Whether the next step uses patches.
    pub fn in_patch_phase(&self) -> bool {
        self.step < self.stage.patch_steps || !self.stage.finetune
    }

    fn draw_item(&mut self, data: &[TaskInputs]) -> Result<(TaskInputs, usize)> {
        let v = self.rng.random_range(0..data.len());
        let item = &data[v];
        if !self.in_patch_phase() {
            return Ok((item.clone(), v));
        }
        let dims = item.target.dims();
        let extent = self.stage.patch_extent;
        let mut origin = [0; 3];
        for a in 0..3 {
            if extent[a] > dims[a] {
                return Err(Error::Dimension {
                    axis: a,
                    msg: format!("patch extent {} exceeds volume extent {}", extent[a], dims[a]),
                });
            }
            origin[a] = self.rng.random_range(0..=dims[a] - extent[a]);
        }
        let spec = PatchSpec { origin, extent };
        spec.validate(dims)?;
        Ok((
            TaskInputs {
                cond: item
                    .cond
                    .iter()
                    .map(|c| c.sub_volume(origin, extent))
                    .collect::<Result<_>>()?,
                target: item.target.sub_volume(origin, extent)?,
            },
            v,
        ))
    }

    /// One Adam step; gradients are averaged over the batch.
    pub fn step(&mut self, data: &[TaskInputs], branches: &[&dyn ScoreBranch]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if branches.len() != self.net.cfg.branches {
            return Err(Error::Config(format!(
                "{} branches for a fusion net over {}",
                branches.len(),
                self.net.cfg.branches
            )));
        }
        let start = Instant::now();
        let mut total = 0.0;
        let mut acc = Gradients::default();
        let mut picks = Vec::new();
        for _ in 0..self.cfg.batch {
            let (item, v) = self.draw_item(data)?;
            let dims = item.target.dims();
            let t = self.rng.random_range(1..=self.sched.t_max());
            let eps = Volume::new(dims, normal_vec(&mut self.rng, dims.iter().product()))?;
            let y_t = self.sched.q_sample(&item.target, t, &eps)?;
            let want = self.net.cfg.injects();
            let outs = precompute_branch_outputs(branches, &y_t, &item.cond, t, want)?;
            let scores: Vec<&Volume> = outs.iter().map(|o| &o.eps).collect();
            let pyr: Vec<&[Tensor<f32>]> = outs.iter().filter_map(|o| o.pyramid.as_deref()).collect();
            let inputs = self
                .net
                .prepare(&y_t, &item.cond, &scores, want.then_some(&pyr[..]), t)?;
            let [a, b, c] = dims;
            let target = Tensor::from_vec(&[1, 1, a, b, c], eps.into_data())?;
            let (loss, grads) = self.net.loss(&inputs, &target)?;
            total += loss;
            acc.accumulate(grads)?;
            picks.push((v, t));
        }
        let n = self.cfg.batch as f64;
        let loss = total / n;
        acc.scale(1.0 / n);
        self.step += 1;
        check_finite(self.step, loss, &acc, || format!("(volume, t) {picks:?}"))?;
        clip(&mut acc, self.cfg.grad_clip);
        self.adam.update(&mut self.net.store, &acc)?;
        Ok(StepRecord {
            step: self.step,
            loss,
            lr: self.cfg.lr,
            wall_ms: start.elapsed().as_millis(),
        })
    }

    /// Run both phases to completion.
    pub fn run(
        &mut self,
        data: &[TaskInputs],
        branches: &[&dyn ScoreBranch],
        on_step: &mut dyn FnMut(&Self, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        let until = self.stage.total_steps();
        while self.step < until {
            let r = self.step(data, branches)?;
            on_step(self, &r)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: NetKind::Volumetric,
            config: self.echo.clone(),
            step: self.step,
            rng: Some(RngState::capture(&self.rng)),
            params: Checkpoint::params_of(&self.net.store),
            adam: Some(AdamState::capture(&self.adam)),
        }
    }

    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let net = load_fusion(ck)?;
        let sched = schedule_from(&ck.config)?;
        let cfg = TrainConfig::from_echo(&ck.config)?;
        let stage = Stage3D::from_echo(&ck.config)?;
        let rng = ck
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no RNG state to resume from".into()))?
            .restore();
        let adam = ck
            .adam
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?
            .restore(&net.store)?;
        Ok(Self {
            net,
            cfg,
            stage,
            sched,
            echo: ck.config.clone(),
            adam,
            rng,
            step: ck.step,
        })
    }
}

/// The fusion net stored in a volumetric checkpoint.
pub fn load_fusion(ck: &Checkpoint) -> Result<Net3D<f32>> {
    if ck.kind != NetKind::Volumetric {
        return Err(Error::Checkpoint("expected a fusion-net checkpoint".into()));
    }
    let cfg = net3d_from(&ck.config, 0, 0, &[])?;
    let mut net = build_net3d(cfg, 0)?;
    ck.load_into(&mut net.store)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch::BranchVolume;
    use crate::degrade::DegradationOperator;
    use crate::net2d::Net2DConfig;
    use crate::net3d::Net3DConfig;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::task::{make_task_inputs, Task};

    fn data(n: u64, dims: [usize; 3]) -> Vec<TaskInputs> {
        let spec = PhantomSpec::with_dims(dims, 4);
        let op = DegradationOperator::avg_pool(4);
        (0..n)
            .map(|i| {
                let (a, b) = generate_phantom(&spec, i).unwrap();
                make_task_inputs(&a, &b, Task::Sr, &op).unwrap().to_model().unwrap()
            })
            .collect()
    }

    fn tiny2d() -> Net2DConfig {
        Net2DConfig {
            channel_multipliers: vec![1, 2],
            resblocks_per_level: 1,
            ..Net2DConfig::with_base(1, 4)
        }
    }

    fn trainer2d(seed: u64) -> Trainer2D {
        let net = build_net2d(tiny2d(), seed).unwrap();
        let cfg = TrainConfig {
            lr: 2e-3,
            ..TrainConfig::planar(seed)
        };
        Trainer2D::new(net, SliceAxis::Second, vec![0], NoiseSchedule::default(), cfg, &ConfigMap::new()).unwrap()
    }

    #[test]
    fn planar_training_is_deterministic_and_resumable() {
        let d = data(3, [8, 8, 8]);
        let mut a = trainer2d(1);
        let mut b = trainer2d(1);
        for _ in 0..3 {
            assert_eq!(a.step(&d).unwrap().loss, b.step(&d).unwrap().loss);
        }
        assert_eq!(a.net.checksum(), b.net.checksum());
        let ck = Checkpoint::decode(&a.checkpoint().encode()).unwrap();
        let mut resumed = Trainer2D::resume(&ck).unwrap();
        let la = a.step(&d).unwrap().loss;
        let lr = resumed.step(&d).unwrap().loss;
        assert_eq!(la, lr);
        assert_eq!(a.net.checksum(), resumed.net.checksum());
        assert_eq!(a.checkpoint().encode(), resumed.checkpoint().encode());
    }

    #[test]
    fn planar_loss_is_finite_and_falls() {
        let d = data(4, [8, 8, 8]);
        let mut tr = trainer2d(2);
        tr.cfg.lr = 1e-2;
        let mut losses = Vec::new();
        tr.run(&d, 200, &mut |_, r| {
            losses.push(r.loss);
            Ok(())
        })
        .unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
        let head: f64 = losses[..40].iter().sum::<f64>() / 40.0;
        let tail: f64 = losses[160..].iter().sum::<f64>() / 40.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn empty_dataset_and_bad_binding() {
        let mut tr = trainer2d(0);
        assert!(matches!(tr.step(&[]), Err(Error::EmptyDataset)));
        let net = build_net2d(tiny2d(), 0).unwrap();
        let r = Trainer2D::new(net, SliceAxis::Third, vec![0, 1], NoiseSchedule::default(), TrainConfig::planar(0), &ConfigMap::new());
        assert!(r.is_err());
    }

    #[test]
    fn nan_data_aborts_with_step() {
        let mut tr = trainer2d(0);
        tr.net.store.get_mut(tr.net.store.id("out.conv.bias").unwrap()).data_mut()[0] = f32::NAN;
        let d = data(1, [8, 8, 8]);
        match tr.step(&d) {
            Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }

    /// Returns the exact noise that produced `y_t` from a known target.
    struct Oracle {
        axis: SliceAxis,
        sched: NoiseSchedule,
        target: Volume,
    }

    impl ScoreBranch for Oracle {
        fn axis(&self) -> SliceAxis {
            self.axis
        }
        fn predict(&self, y_t: &Volume, _: &[Volume], t: usize, _: bool) -> Result<BranchVolume> {
            Ok(BranchVolume {
                eps: self.sched.implied_eps(y_t, &self.target, t)?,
                pyramid: None,
            })
        }
    }

    fn tiny3d() -> Net3DConfig {
        Net3DConfig {
            levels: vec![4, 8],
            time_embed_dim: 16,
            resblocks_per_level: 1,
            ..Net3DConfig::small(1, 2)
        }
    }

    fn stage(extent: usize, steps: u64) -> Stage3D {
        Stage3D {
            patch_extent: [extent; 3],
            patch_steps: steps,
            finetune: false,
            finetune_steps: 0,
        }
    }

    #[test]
    fn oracle_branches_give_zero_loss() {
        let d = data(1, [8, 8, 8]);
        let sched = NoiseSchedule::default();
        let oracle = |axis| Oracle {
            axis,
            sched: sched.clone(),
            target: d[0].target.clone(),
        };
        let (a, b) = (oracle(SliceAxis::Second), oracle(SliceAxis::Third));
        let net = build_net3d(tiny3d(), 0).unwrap();
        let mut tr = Trainer3D::new(net, sched.clone(), TrainConfig::volumetric(0), stage(8, 5), &ConfigMap::new()).unwrap();
        // Exact zero up to f32 rounding of y_t at the untouched init.
        let first = tr.step(&d, &[&a, &b]).unwrap().loss;
        assert!(first < 1e-6, "{first}");
        // Adam rescales the rounding-level gradients to lr-sized steps, so the
        // residual head drifts by about lr per step instead of staying at 0.
        for _ in 0..4 {
            let r = tr.step(&d, &[&a, &b]).unwrap();
            assert!(r.loss < 1e-4, "{}", r.loss);
        }
    }

    #[test]
    fn fusion_training_leaves_branches_alone_and_resumes() {
        let d = data(2, [16, 16, 8]);
        let cfg2 = tiny2d();
        let a = Branch2D::new(build_net2d(cfg2.clone(), 1).unwrap(), SliceAxis::Second, vec![0]);
        let b = Branch2D::new(build_net2d(cfg2, 2).unwrap(), SliceAxis::Third, vec![0]);
        let before = (a.net.checksum(), b.net.checksum());
        let net = build_net3d(tiny3d(), 0).unwrap();
        let st = Stage3D {
            finetune: true,
            finetune_steps: 2,
            ..stage(8, 2)
        };
        let mut tr = Trainer3D::new(net, NoiseSchedule::default(), TrainConfig::volumetric(3), st, &ConfigMap::new()).unwrap();
        let mut phases = Vec::new();
        tr.run(&d, &[&a, &b], &mut |t, _| {
            phases.push(t.in_patch_phase());
            Ok(())
        })
        .unwrap();
        assert_eq!(phases, vec![true, false, false, false]);
        assert_eq!(before, (a.net.checksum(), b.net.checksum()));
        let ck = Checkpoint::decode(&tr.checkpoint().encode()).unwrap();
        let mut resumed = Trainer3D::resume(&ck).unwrap();
        tr.stage.finetune_steps = 3;
        resumed.stage.finetune_steps = 3;
        let x = tr.step(&d, &[&a, &b]).unwrap().loss;
        let y = resumed.step(&d, &[&a, &b]).unwrap().loss;
        assert_eq!(x, y);
        assert_eq!(tr.net.checksum(), resumed.net.checksum());
    }

    #[test]
    fn patch_extent_is_checked() {
        let net = build_net3d(tiny3d(), 0).unwrap();
        assert!(Trainer3D::new(net.clone(), NoiseSchedule::default(), TrainConfig::volumetric(0), stage(12, 1), &ConfigMap::new()).is_err());
        let mut tr = Trainer3D::new(net, NoiseSchedule::default(), TrainConfig::volumetric(0), stage(16, 1), &ConfigMap::new()).unwrap();
        let d = data(1, [8, 8, 8]);
        let oracle = Oracle {
            axis: SliceAxis::Second,
            sched: NoiseSchedule::default(),
            target: d[0].target.clone(),
        };
        assert!(matches!(tr.step(&d, &[&oracle, &oracle]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn branch_reloads_from_checkpoint() {
        let tr = trainer2d(5);
        let ck = tr.checkpoint();
        let br = load_branch(&ck).unwrap();
        assert_eq!(br.net.checksum(), tr.net.checksum());
        assert_eq!(br.axis, SliceAxis::Second);
        assert_eq!(br.conditions, vec![0]);
        assert!(load_fusion(&ck).is_err());
    }
}
