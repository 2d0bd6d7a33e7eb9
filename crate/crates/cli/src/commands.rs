use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use rayon::prelude::*;

use scorefusion::branch::{Branch2D, ScoreBranch};
use scorefusion::checkpoint::Checkpoint;
use scorefusion::config::{echo_net2d, net2d_from, net3d_from, parse_bool, parse_list, ConfigMap};
use scorefusion::degrade::DegradationOperator;
use scorefusion::fusion::Fusion;
use scorefusion::io::{load_any, load_volume, save_volume, write_atomic};
use scorefusion::metrics::{fid, mace, mmd, psnr, ssim3d, FeatureExtractor, MetricsReport, RandomProjection, VolumeMetrics};
use scorefusion::net2d::build_net2d;
use scorefusion::net3d::{build_net3d, Net3D};
use scorefusion::phantom::{build_dataset, Manifest, PhantomSpec, Split, MANIFEST_FILE};
use scorefusion::sample::{sample_volume, sample_with_uncertainty, Consistency, FusionMode, NoiseMode, SampleConfig};
use scorefusion::schedule::{make_step_plan, StepMode};
use scorefusion::task::{make_task_inputs, Task, TaskInputs};
use scorefusion::train::{load_branch, load_fusion, schedule_from, Stage3D, StepRecord, TrainConfig, Trainer2D, Trainer3D};
use scorefusion::volume::{denormalize, SliceAxis, ValueRange, Volume};

use crate::error::CliError;
use crate::run::{require_file, resolve, run_dir, set_workers, write_echo, Telemetry};
use crate::Common;

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const TELEMETRY_FILE: &str = "telemetry.csv";

fn s<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|x| x.to_string())
}

fn manifest_path(data: &str) -> PathBuf {
    let p = PathBuf::from(data);
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p
    }
}

fn load_manifest(map: &ConfigMap) -> Result<Manifest, CliError> {
    let data: String = map
        .get("data")?
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let path = manifest_path(&data);
    require_file(&path)?;
    Ok(Manifest::load(&path)?)
}

fn degrade_op(map: &ConfigMap) -> Result<DegradationOperator, CliError> {
    Ok(DegradationOperator::avg_pool(map.get_or("degrade.factor", 4usize)?))
}

/// Model-range task inputs for every record of `split`, with ids.
fn task_data(map: &ConfigMap, task: Task, split: Split) -> Result<Vec<(String, TaskInputs)>, CliError> {
    let manifest = load_manifest(map)?;
    let op = degrade_op(map)?;
    let pairs = manifest.load_pairs(split)?;
    if pairs.is_empty() {
        return Err(scorefusion::Error::EmptyDataset.into());
    }
    pairs
        .into_iter()
        .map(|(id, a, b)| Ok((id, make_task_inputs(&a, &b, task, &op)?.to_model()?)))
        .collect()
}

fn parse_split(map: &ConfigMap, default: Split) -> Result<Split, CliError> {
    Ok(map.get::<String>("split")?.map(|v| v.parse()).transpose()?.unwrap_or(default))
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint, CliError> {
    require_file(p)?;
    Ok(Checkpoint::load(p)?)
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub count: Option<usize>,
    /// Comma-separated extents, e.g. 32,32,24.
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of records assigned to the training split.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

pub fn phantom(a: PhantomArgs) -> Result<(), CliError> {
    let map = resolve(
        &a.common,
        &[
            ("count", "200".into()),
            ("dims", "32,32,24".into()),
            ("seed", "0".into()),
            ("train_fraction", "0.8".into()),
            ("degrade.factor", "4".into()),
        ],
        &[
            ("count", s(a.count)),
            ("dims", a.dims.clone()),
            ("seed", s(a.seed)),
            ("train_fraction", s(a.train_fraction)),
        ],
    )?;
    set_workers(&a.common, &map)?;
    let dims = parse_list("dims", map.raw("dims").unwrap_or_default())?;
    let dims: [usize; 3] = dims
        .try_into()
        .map_err(|_| CliError::Usage("--dims needs three comma-separated extents".into()))?;
    let spec = PhantomSpec::with_dims(dims, map.require("seed")?);
    spec.validate(map.require("degrade.factor")?)
        .map_err(|e| CliError::Usage(format!("--dims: {e}")))?;
    let out = run_dir(&a.common, &map, "phantom");
    let m = build_dataset(&spec, map.require("count")?, map.require("train_fraction")?, &out)?;
    write_echo(&out, &map)?;
    info!(
        "wrote {} pairs ({} train, {} val) to {}",
        m.records.len(),
        m.split(Split::Train).count(),
        m.split(Split::Val).count(),
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct Train2dArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    /// Slicing axis: 1 or 2.
    #[arg(long)]
    pub axis: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a planar checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn train_config(map: &ConfigMap, base: TrainConfig) -> Result<TrainConfig, CliError> {
    let clip: f64 = map.get_or("train.grad_clip", 0.0)?;
    Ok(TrainConfig {
        lr: map.get_or("train.lr", base.lr)?,
        batch: map.get_or("train.batch", base.batch)?,
        seed: map.get_or("seed", base.seed)?,
        grad_clip: (clip > 0.0).then_some(clip),
    })
}

fn log_step(tel: &mut Telemetry, r: &StepRecord, every: u64, last: u64) {
    tel.line(&r.csv());
    if every > 0 && (r.step.is_multiple_of(every) || r.step == last) {
        info!("step {} loss {:.5}", r.step, r.loss);
    }
}

pub fn train2d(a: Train2dArgs) -> Result<(), CliError> {
    let map = resolve(
        &a.common,
        &[
            ("task", "sr".into()),
            ("axis", "1".into()),
            ("steps", "1000".into()),
            ("seed", "0".into()),
            ("log_every", "50".into()),
            ("checkpoint_every", "0".into()),
        ],
        &[
            ("data", a.data.clone()),
            ("task", a.task.clone()),
            ("axis", s(a.axis)),
            ("steps", s(a.steps)),
            ("seed", s(a.seed)),
        ],
    )?;
    set_workers(&a.common, &map)?;
    let task: Task = map.require("task")?;
    let axis = SliceAxis::from_index(map.require("axis")?).map_err(|e| CliError::Usage(e.to_string()))?;
    let steps: u64 = map.require("steps")?;
    let data: Vec<TaskInputs> = task_data(&map, task, Split::Train)?.into_iter().map(|(_, t)| t).collect();
    let out = run_dir(&a.common, &map, "train2d");
    let net_cfg = net2d_from(&map, task.cond_channels())?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let mut want = ConfigMap::new();
            echo_net2d(&net_cfg, &mut want);
            want.set("branch.axis", axis.index());
            let d = ck.config.diff(&want, "net2d.");
            let d2 = ck.config.diff(&want, "branch.axis");
            if !d.is_empty() || !d2.is_empty() {
                return Err(CliError::Conflict(format!(
                    "resume checkpoint disagrees with the config: {}",
                    [d, d2].concat().join("; ")
                )));
            }
            Trainer2D::resume(&ck)?
        }
        None => {
            let net = build_net2d(net_cfg, map.get_or("seed", 0u64)?)?;
            let sched = schedule_from(&map)?;
            let cfg = train_config(&map, TrainConfig::planar(0))?;
            Trainer2D::new(net, axis, (0..task.cond_channels()).collect(), sched, cfg, &map)?
        }
    };
    std::fs::create_dir_all(&out).map_err(|e| scorefusion::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let mut echo = trainer.echo.clone();
    echo.merge(&map);
    write_echo(&out, &echo)?;
    info!(
        "training axis-{} branch ({} parameters) for {} steps into {}",
        axis.index(),
        trainer.net.parameter_count(),
        steps,
        out.display()
    );
    let mut tel = Telemetry::open(&out.join(TELEMETRY_FILE), StepRecord::HEADER)?;
    let every: u64 = map.require("log_every")?;
    let ck_every: u64 = map.require("checkpoint_every")?;
    let ck_path = out.join(CHECKPOINT_FILE);
    trainer.run(&data, steps, &mut |t, r| {
        log_step(&mut tel, r, every, steps);
        if ck_every > 0 && r.step % ck_every == 0 {
            t.checkpoint().save(&ck_path)?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&ck_path)?;
    info!("checkpoint {}", ck_path.display());
    Ok(())
}

/// Branches from checkpoints. With `2·C` branches for `C > 1` conditions,
/// pair `p` is rebound to condition `p`.
fn load_branches(paths: &[PathBuf], task: Task) -> Result<Vec<Branch2D>, CliError> {
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        out.push(load_branch(&load_checkpoint(p)?)?);
    }
    let c = task.cond_channels();
    if out.len() == 2 * c && c > 1 {
        for (i, b) in out.iter_mut().enumerate() {
            if b.net.cfg.cond_channels != 1 {
                return Err(CliError::Conflict(format!(
                    "multi-condition fusion needs single-condition branches; branch {i} takes {}",
                    b.net.cfg.cond_channels
                )));
            }
            b.conditions = vec![i / 2];
        }
    } else if out.len() != 2 {
        return Err(CliError::Conflict(format!(
            "{} branches for task {task}: give one perpendicular pair, or one pair per condition",
            out.len()
        )));
    }
    for (i, b) in out.iter().enumerate() {
        if let Some(&c) = b.conditions.iter().find(|&&c| c >= task.cond_channels()) {
            return Err(CliError::Conflict(format!(
                "branch {i} reads condition {c}, task {task} has {}",
                task.cond_channels()
            )));
        }
    }
    Ok(out)
}

fn branch_paths(map: &ConfigMap) -> Result<Vec<PathBuf>, CliError> {
    Ok(map
        .raw("branches")
        .filter(|v| !v.is_empty())
        .ok_or_else(|| CliError::Usage("at least two --branch checkpoints are required".into()))?
        .split(',')
        .map(|p| PathBuf::from(p.trim()))
        .collect())
}

fn join_paths(p: &[PathBuf]) -> Option<String> {
    if p.is_empty() {
        None
    } else {
        Some(p.iter().map(|x| x.display().to_string()).collect::<Vec<_>>().join(","))
    }
}

#[derive(Args, Debug)]
pub struct Train3dArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    /// Planar branch checkpoint; repeat once per branch, pairs in order.
    #[arg(long = "branch")]
    pub branches: Vec<PathBuf>,
    /// Patch pre-training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Full-volume fine-tuning steps (after the patch phase).
    #[arg(long)]
    pub finetune_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn default_patch(dims: [usize; 3]) -> String {
    dims.map(|d| (d.min(32) / 8 * 8).max(8))
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn train3d(a: Train3dArgs) -> Result<(), CliError> {
    let map = resolve(
        &a.common,
        &[
            ("task", "sr".into()),
            ("steps", "1000".into()),
            ("seed", "0".into()),
            ("log_every", "50".into()),
            ("checkpoint_every", "0".into()),
            ("train3d.finetune", "on".into()),
        ],
        &[
            ("data", a.data.clone()),
            ("task", a.task.clone()),
            ("branches", join_paths(&a.branches)),
            ("steps", s(a.steps)),
            ("train3d.finetune_steps", s(a.finetune_steps)),
            ("seed", s(a.seed)),
        ],
    )?;
    set_workers(&a.common, &map)?;
    let task: Task = map.require("task")?;
    let branches = load_branches(&branch_paths(&map)?, task)?;
    let refs: Vec<&dyn ScoreBranch> = branches.iter().map(|b| b as &dyn ScoreBranch).collect();
    let data: Vec<TaskInputs> = task_data(&map, task, Split::Train)?.into_iter().map(|(_, t)| t).collect();
    let out = run_dir(&a.common, &map, "train3d");
    let steps: u64 = map.require("steps")?;
    let finetune = map.get_bool("train3d.finetune")?.unwrap_or(true);
    let finetune_steps: u64 = map.get_or("train3d.finetune_steps", steps / 5)?;
    let stage = Stage3D {
        patch_extent: parse_list(
            "train3d.patch_extent",
            &map.raw("train3d.patch_extent")
                .map(str::to_string)
                .unwrap_or_else(|| default_patch(data[0].target.dims())),
        )?
        .try_into()
        .map_err(|_| CliError::Usage("train3d.patch_extent needs three values".into()))?,
        patch_steps: steps,
        finetune,
        finetune_steps,
    };
    let k = branches.len();
    let mut defaults = map.clone();
    defaults.set_default("net3d.variant", if k == 2 { "full" } else { "small" });
    let levels = branches[0].net.cfg.level_channels();
    let inject = defaults.get_bool("net3d.feature_injection")?;
    if inject == Some(true) && defaults.raw("net3d.variant") == Some("small") {
        return Err(CliError::Conflict("net3d.variant = small has no feature injection".into()));
    }
    if inject != Some(false) && branches.iter().any(|b| b.net.cfg.level_channels() != levels) {
        return Err(CliError::Conflict("feature injection needs branches with equal pyramid widths".into()));
    }
    let net_cfg = net3d_from(&defaults, task.cond_channels(), k, &levels)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let mut want = ConfigMap::new();
            scorefusion::config::echo_net3d(&net_cfg, &mut want);
            let d = ck.config.diff(&want, "net3d.");
            if !d.is_empty() {
                return Err(CliError::Conflict(format!("resume checkpoint disagrees with the config: {}", d.join("; "))));
            }
            let mut t = Trainer3D::resume(&ck)?;
            t.stage = stage;
            t
        }
        None => {
            let net = build_net3d(net_cfg, map.get_or("seed", 0u64)?)?;
            let cfg = train_config(&map, TrainConfig::volumetric(0))?;
            Trainer3D::new(net, schedule_from(&map)?, cfg, stage, &map)?
        }
    };
    std::fs::create_dir_all(&out).map_err(|e| scorefusion::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let mut echo = trainer.echo.clone();
    echo.merge(&map);
    write_echo(&out, &echo)?;
    let total = trainer.stage.total_steps();
    info!(
        "training {}-branch fusion net ({} parameters) for {} steps into {}",
        k,
        trainer.net.parameter_count(),
        total,
        out.display()
    );
    let before: Vec<u64> = branches.iter().map(|b| b.net.checksum()).collect();
    let mut tel = Telemetry::open(&out.join(TELEMETRY_FILE), StepRecord::HEADER)?;
    let every: u64 = map.require("log_every")?;
    let ck_every: u64 = map.require("checkpoint_every")?;
    let ck_path = out.join(CHECKPOINT_FILE);
    trainer.run(&data, &refs, &mut |t, r| {
        log_step(&mut tel, r, every, total);
        if ck_every > 0 && r.step % ck_every == 0 {
            t.checkpoint().save(&ck_path)?;
        }
        Ok(())
    })?;
    debug_assert_eq!(before, branches.iter().map(|b| b.net.checksum()).collect::<Vec<_>>());
    trainer.checkpoint().save(&ck_path)?;
    info!("checkpoint {}", ck_path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long = "branch")]
    pub branches: Vec<PathBuf>,
    /// Fusion-net checkpoint.
    #[arg(long)]
    pub fusion_checkpoint: Option<PathBuf>,
    /// learned or average.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Number of reverse steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// on or off; defaults to on when a condition is pooled.
    #[arg(long)]
    pub consistency: Option<String>,
    /// Independent runs; 2 or more also writes mean and std.
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// train or val.
    #[arg(long)]
    pub split: Option<String>,
    /// Only the first N records of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

pub fn sample(a: SampleArgs) -> Result<(), CliError> {
    let map = resolve(
        &a.common,
        &[
            ("task", "sr".into()),
            ("steps", "50".into()),
            ("runs", "1".into()),
            ("seed", "0".into()),
            ("split", "val".into()),
            ("sample.mode", "ddim".into()),
            ("sample.noise", "fresh".into()),
        ],
        &[
            ("data", a.data.clone()),
            ("task", a.task.clone()),
            ("branches", join_paths(&a.branches)),
            ("fusion_checkpoint", a.fusion_checkpoint.as_ref().map(|p| p.display().to_string())),
            ("fusion", a.fusion.clone()),
            ("steps", s(a.steps)),
            ("consistency", a.consistency.clone()),
            ("runs", s(a.runs)),
            ("seed", s(a.seed)),
            ("split", a.split.clone()),
            ("limit", s(a.limit)),
        ],
    )?;
    set_workers(&a.common, &map)?;
    let task: Task = map.require("task")?;
    let branches = load_branches(&branch_paths(&map)?, task)?;
    let refs: Vec<&dyn ScoreBranch> = branches.iter().map(|b| b as &dyn ScoreBranch).collect();
    let fusion_ck = map.raw("fusion_checkpoint").map(PathBuf::from);
    let mode: FusionMode = match map.raw("fusion") {
        Some(v) => v.parse()?,
        None if fusion_ck.is_some() => FusionMode::Learned,
        None => FusionMode::Average,
    };
    let net: Option<Net3D<f32>> = match (&fusion_ck, mode) {
        (Some(p), FusionMode::Learned) => Some(load_fusion(&load_checkpoint(p)?)?),
        (None, FusionMode::Learned) => {
            return Err(CliError::Conflict("--fusion learned needs --fusion-checkpoint".into()));
        }
        (_, FusionMode::Average) => None,
    };
    if let Some(n) = &net {
        if n.cfg.branches != branches.len() {
            return Err(CliError::Conflict(format!(
                "fusion net fuses {} branches, {} given",
                n.cfg.branches,
                branches.len()
            )));
        }
    }
    let consistency = match map.raw("consistency") {
        Some(v) => parse_bool("consistency", v)?,
        None => task.pooled_condition().is_some(),
    };
    let consistency = if consistency {
        let condition = task
            .pooled_condition()
            .ok_or_else(|| CliError::Conflict(format!("--consistency on needs a pooled condition; task {task} has none")))?;
        Some(Consistency {
            op: degrade_op(&map)?,
            condition,
        })
    } else {
        None
    };
    let sched = schedule_from(&map)?;
    let step_mode: StepMode = map.require("sample.mode")?;
    let cfg = SampleConfig {
        plan: make_step_plan(&sched, step_mode, map.require("steps")?)?,
        consistency,
        runs: map.require("runs")?,
        fusion: mode,
        noise: map.require::<NoiseMode>("sample.noise")?,
        clip_denoised: map.get_bool("sample.clip")?.unwrap_or(true),
        seed: map.require("seed")?,
    };
    if cfg.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let split = parse_split(&map, Split::Val)?;
    let mut items = task_data(&map, task, split)?;
    if let Some(n) = map.get::<usize>("limit")? {
        items.truncate(n);
    }
    let out = run_dir(&a.common, &map, "sample");
    std::fs::create_dir_all(&out).map_err(|e| scorefusion::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write_echo(&out, &map)?;
    let fusion = net.as_ref().map(|n| n as &dyn Fusion);
    let to_metric = |v: &Volume| denormalize(v, ValueRange::METRIC, ValueRange::MODEL);
    for (id, item) in &items {
        let dir = out.join(id);
        if cfg.runs >= 2 {
            let (pred, stats) = sample_with_uncertainty(&sched, &refs, fusion, &item.cond, &cfg)?;
            save_volume(&to_metric(&pred)?, &dir.join("pred.sfv"))?;
            save_volume(&to_metric(&stats.mean)?, &dir.join("mean.sfv"))?;
            // std scales with the range width: [-1, 1] -> [0, 1] halves it
            save_volume(&stats.std.map(|v| 0.5 * v), &dir.join("std.sfv"))?;
        } else {
            let pred = sample_volume(&sched, &refs, fusion, &item.cond, &cfg)?;
            save_volume(&to_metric(&pred)?, &dir.join("pred.sfv"))?;
        }
        info!("sampled {id}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<String>,
    /// Directory written by `sample`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Comma-separated subset of psnr,ssim,mmd,fid,mace.
    #[arg(long)]
    pub metrics: Option<String>,
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let map = resolve(
        &a.common,
        &[("split", "val".into()), ("metrics", "psnr,ssim,mmd,fid,mace".into())],
        &[
            ("data", a.data.clone()),
            ("pred", a.pred.as_ref().map(|p| p.display().to_string())),
            ("split", a.split.clone()),
            ("metrics", a.metrics.clone()),
        ],
    )?;
    set_workers(&a.common, &map)?;
    let pred_dir = PathBuf::from(
        map.raw("pred")
            .ok_or_else(|| CliError::Usage("--pred is required".into()))?,
    );
    require_file(&pred_dir)?;
    let wanted: Vec<String> = map.raw("metrics").unwrap_or_default().split(',').map(|m| m.trim().to_string()).collect();
    for m in &wanted {
        if !["psnr", "ssim", "mmd", "fid", "mace"].contains(&m.as_str()) {
            return Err(CliError::Usage(format!("unknown metric `{m}`")));
        }
    }
    let has = |m: &str| wanted.iter().any(|w| w == m);
    let manifest = load_manifest(&map)?;
    let split = parse_split(&map, Split::Val)?;
    let records: Vec<_> = manifest.split(split).filter(|r| pred_dir.join(&r.id).join("pred.sfv").exists()).collect();
    if records.is_empty() {
        return Err(CliError::Missing(pred_dir.join("<id>").join("pred.sfv")));
    }
    let rows = records
        .par_iter()
        .map(|r| -> Result<(VolumeMetrics, Volume, Volume), CliError> {
            let gt = load_any(&r.path_a)?;
            let d = pred_dir.join(&r.id);
            let pred = load_volume(&d.join("pred.sfv"))?;
            let uncertainty = if has("mace") && d.join("std.sfv").exists() {
                let mean = load_volume(&d.join("mean.sfv"))?;
                Some(mace(&mean, &load_volume(&d.join("std.sfv"))?, &gt)?)
            } else {
                None
            };
            let row = VolumeMetrics {
                id: r.id.clone(),
                psnr: if has("psnr") { psnr(&pred, &gt)? } else { f64::NAN },
                ssim: if has("ssim") { ssim3d(&pred, &gt)? } else { f64::NAN },
                mace: uncertainty,
            };
            Ok((row, pred, gt))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (mut set_mmd, mut set_fid) = (None, None);
    if has("mmd") || has("fid") {
        let ex = RandomProjection::default();
        let fa = rows.iter().map(|(_, p, _)| ex.extract(p)).collect::<Result<Vec<_>, _>>()?;
        let fb = rows.iter().map(|(_, _, g)| ex.extract(g)).collect::<Result<Vec<_>, _>>()?;
        if has("mmd") {
            set_mmd = Some(mmd(&fa, &fb)?);
        }
        if has("fid") {
            set_fid = Some(fid(&fa, &fb)?);
        }
    }
    let report = MetricsReport::new(rows.into_iter().map(|(r, _, _)| r).collect(), set_mmd, set_fid);
    let out = a.common.out.clone().unwrap_or(pred_dir);
    let mut csv = String::from("id,psnr,ssim,mace\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.volumes {
        csv.push_str(&format!("{},{},{},{}\n", r.id, r.psnr, r.ssim, opt(r.mace)));
    }
    let agg = |f: fn(&scorefusion::metrics::MeanStd) -> f64| {
        [report.psnr, report.ssim, report.mace].map(|m| opt(m.as_ref().map(f))).join(",")
    };
    csv.push_str(&format!("mean,{}\n", agg(|m| m.mean)));
    csv.push_str(&format!("std,{}\n", agg(|m| m.std)));
    write_atomic(&out.join("eval.csv"), csv.as_bytes())?;
    let summary = serde_json::to_string_pretty(&report).map_err(|e| CliError::Run(scorefusion::Error::Checkpoint(e.to_string())))?;
    write_atomic(&out.join("summary.json"), summary.as_bytes())?;
    write_echo(&out, &map)?;
    info!(
        "{} volumes: psnr {:?}, ssim {:?}, mmd {:?}, fid {:?}",
        report.volumes.len(),
        report.psnr.map(|m| m.mean),
        report.ssim.map(|m| m.mean),
        report.mmd,
        report.fid
    );
    Ok(())
}
