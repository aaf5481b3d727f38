//! End-to-end operations behind the command-line tool: data materialisation,
//! the two training stages, evaluation and report tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{DataSource, RunConfig};
use crate::data::{
    gen_advection_trajectory, gen_gaussian_field_trajectory, read_archive, window_sequences, write_archive, DatasetMeta,
    FieldSchema, SequenceDataset, Trajectory, CONTEXT_LEN, SEQUENCE_LEN,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, rollout_evaluate, BandPartition, CsvRow, MetricReport, RolloutReport};
use crate::model::{Emulator, EmulatorPredictor};
use crate::run::{latest_checkpoint, RunDir};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokeniser::{denormalise, rms_normalise, CompressionChoice};
use crate::training::{Stage, TokeniserInit, TrainData, TrainSummary, Trainer, TOKENISER_PREFIX};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// SplitMix64 finaliser over the combined inputs.
pub fn derive_seed(base: u64, split: Split, index: u64) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Val => 0x7661_6c00_0000_0000u64,
    };
    let mut z = base ^ tag ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trajectories of one split of a source.
pub fn source_trajectories<T: Scalar>(src: &DataSource, split: Split) -> Result<Vec<Trajectory<T>>> {
    match src {
        DataSource::Advection { grid, frames, trajectories, val_trajectories, max_speed, seed, .. } => {
            let n = if split == Split::Train { *trajectories } else { *val_trajectories };
            (0..n as u64)
                .map(|i| {
                    let s = derive_seed(*seed, split, i);
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let v = (rng.random_range(-max_speed..=*max_speed), rng.random_range(-max_speed..=*max_speed));
                    gen_advection_trajectory(*grid, v, *frames, s)
                })
                .collect()
        }
        DataSource::Gaussian { grid, frames, trajectories, val_trajectories, beta, seed, .. } => {
            let n = if split == Split::Train { *trajectories } else { *val_trajectories };
            (0..n as u64).map(|i| gen_gaussian_field_trajectory(*grid, *beta, *frames, derive_seed(*seed, split, i))).collect()
        }
        DataSource::Archive { path, val_path, .. } => {
            let p = if split == Split::Train { path } else { val_path };
            read_archive(p, None)?.trajectories().collect()
        }
    }
}

/// Validation trajectories of one source, kept whole for rollouts.
#[derive(Clone, Debug)]
pub struct NamedTrajectories<T> {
    pub name: String,
    pub schema: FieldSchema,
    pub active: Vec<usize>,
    pub trajectories: Vec<Trajectory<T>>,
}

#[derive(Clone, Debug)]
pub struct LoadedData<T> {
    pub train: TrainData<T>,
    pub val_trajectories: Vec<NamedTrajectories<T>>,
}

pub fn load_data<T: Scalar>(cfg: &RunConfig) -> Result<LoadedData<T>> {
    let union = cfg.union_schema()?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut val_tr = Vec::new();
    for src in &cfg.data.sources {
        let schema = src.schema()?;
        let active = schema.channels_within(&union)?;
        let mk = |trs: &[Trajectory<T>]| -> Result<SequenceDataset<T>> {
            let w = window_sequences(trs, SEQUENCE_LEN, cfg.data.stride)?;
            Ok(SequenceDataset {
                name: src.name().into(),
                schema: schema.clone(),
                active: active.clone(),
                sequences: w.sequences,
                tags: BTreeMap::new(),
            })
        };
        let tr = source_trajectories::<T>(src, Split::Train)?;
        let va = source_trajectories::<T>(src, Split::Val)?;
        train.push(mk(&tr)?);
        val.push(mk(&va)?);
        val_tr.push(NamedTrajectories { name: src.name().into(), schema: schema.clone(), active: active.clone(), trajectories: va });
    }
    Ok(LoadedData { train: TrainData { union, train, val }, val_trajectories: val_tr })
}

/// Writes `<name>.train.fxta` and `<name>.val.fxta` for every synthetic
/// source.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for src in &cfg.data.sources {
        let (grid, frames, tags) = match src {
            DataSource::Archive { .. } => continue,
            DataSource::Advection { grid, frames, max_speed, seed, .. } => {
                (*grid, *frames, [("kind", "advection".to_string()), ("max_speed", max_speed.to_string()), ("seed", seed.to_string())])
            }
            DataSource::Gaussian { grid, frames, beta, seed, .. } => {
                (*grid, *frames, [("kind", "gaussian".to_string()), ("beta", beta.to_string()), ("seed", seed.to_string())])
            }
        };
        let meta = DatasetMeta {
            name: src.name().into(),
            grid,
            trajectory_len: frames,
            tags: tags.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        };
        for (split, tag) in [(Split::Train, "train"), (Split::Val, "val")] {
            let trs = source_trajectories::<f32>(src, split)?;
            let path = out.join(format!("{}.{tag}.fxta", src.name()));
            write_archive(&path, &src.schema()?, Some(&meta), &trs)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn build_model<T: Scalar>(cfg: &RunConfig) -> Result<Emulator<T>> {
    Emulator::new(&cfg.model_config()?, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint { path: path.to_path_buf() });
    }
    Checkpoint::load(path)
}

/// Copies tokeniser weights from a checkpoint; shapes must agree exactly.
pub fn load_tokeniser<T: Scalar>(model: &mut Emulator<T>, path: &Path) -> Result<()> {
    let ckpt = load_checkpoint::<T>(path)?;
    let ours = &model.tokeniser.cfg;
    let theirs = &ckpt.meta.model.tokeniser;
    if ours.depth_scales != theirs.depth_scales {
        return Err(Error::Incompatible(format!(
            "tokeniser scale sets differ: checkpoint {:?} vs config {:?}",
            theirs.depth_scales, ours.depth_scales
        )));
    }
    model.params.load_prefix(&ckpt.param_store()?, TOKENISER_PREFIX)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(Emulator<T>, CheckpointMeta)> {
    let ckpt = load_checkpoint::<T>(path)?;
    let mut model = Emulator::new(&ckpt.meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.params.load_prefix(&ckpt.param_store()?, "")?;
    Ok((model, ckpt.meta))
}

#[derive(Debug)]
pub struct StageOutput {
    pub run_dir: PathBuf,
    pub summary: TrainSummary,
    pub final_checkpoint: PathBuf,
    pub resumed_from: Option<usize>,
}

/// Runs (or resumes) one stage in `out`. A checkpoint already present in
/// `out` is resumed when it was produced by the same stage and config.
pub fn train_stage<T: Scalar>(cfg: &RunConfig, stage: Stage, out: &Path) -> Result<StageOutput> {
    let cfg = cfg.clone().resolve()?;
    let snapshot = serde_json::to_value(&cfg)?;
    let data = load_data::<T>(&cfg)?;
    let run = RunDir::open(out)?;
    run.write_snapshot(&cfg.to_toml()?)?;
    run.event(&format!("dtype {} deterministic kernels {}", T::NAME, cfg.deterministic))?;
    let tcfg = match stage {
        Stage::Pretrain => cfg.pretrain.clone(),
        Stage::Rollout => cfg.rollout.clone(),
    };
    let (mut trainer, resumed_from) = match latest_checkpoint(out)? {
        Some(p) => {
            let ckpt = Checkpoint::<T>::load(&p)?;
            if ckpt.meta.stage != stage || ckpt.meta.run_config.as_ref() != Some(&snapshot) {
                return Err(Error::Incompatible(format!(
                    "{} holds a checkpoint from a different stage or configuration",
                    out.display()
                )));
            }
            let t = Trainer::resume(&ckpt, &data.train)?;
            run.event(&format!("resumed from {}", p.display()))?;
            let s = t.step;
            (t, Some(s))
        }
        None => {
            let mut model = build_model::<T>(&cfg)?;
            if let TokeniserInit::Checkpoint(p) = &tcfg.tokeniser_init {
                load_tokeniser(&mut model, p)?;
                run.event(&format!("tokeniser initialised from {}", p.display()))?;
            }
            let mut t = Trainer::new(stage, tcfg, model, &data.train, cfg.seed)?;
            t.run_config = Some(snapshot);
            (t, None)
        }
    };
    let summary = trainer.run(Some(&run))?;
    let final_checkpoint = run.checkpoint_path(trainer.step);
    if !final_checkpoint.exists() {
        trainer.checkpoint().save(&final_checkpoint)?;
    }
    Ok(StageOutput { run_dir: out.to_path_buf(), summary, final_checkpoint, resumed_from })
}

fn eval_choice(cfg: &RunConfig, model: &Emulator<impl Scalar>) -> CompressionChoice {
    CompressionChoice(cfg.eval.compression.clone().unwrap_or_else(|| model.tokeniser.cfg.validation_scales.clone()))
}

fn add_batch_dim<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.clone().reshape(&s)
}

fn drop_batch_dim<T: Scalar>(t: Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape()[1..].to_vec();
    t.reshape(&s)
}

/// Metrics of a checkpoint on the validation sequences in physical units:
/// reconstructions of the 9 context frames for a pretraining checkpoint,
/// next-frame predictions otherwise.
pub fn eval_checkpoint<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<MetricReport> {
    let cfg = cfg.clone().resolve()?;
    let (model, meta) = load_model::<T>(path)?;
    if meta.model.tokeniser.c_total != cfg.model_config()?.tokeniser.c_total {
        return Err(Error::Incompatible("checkpoint field slots differ from the config's data".into()));
    }
    let data = load_data::<T>(&cfg)?;
    let choice = eval_choice(&cfg, &model);
    let mut entries = Vec::new();
    for ds in &data.train.val {
        for seq in &ds.sequences {
            let (h, w) = (seq.shape()[2], seq.shape()[3]);
            let partition = BandPartition::new(h, w)?;
            let ctx = add_batch_dim(&seq.narrow(1, 0, CONTEXT_LEN)?)?;
            let (target, pred) = match meta.stage {
                Stage::Pretrain => {
                    let (xn, st) = rms_normalise(&ctx, &ds.schema)?;
                    let mut g = crate::autograd::Graph::new();
                    let x = g.constant(xn);
                    let z = model.tokeniser.encode(&mut g, &model.params, x, &choice, &ds.active)?;
                    let r = model.tokeniser.decode(&mut g, &model.params, z, &choice, &ds.active)?;
                    (ctx.clone(), denormalise(g.value(r), &st)?)
                }
                Stage::Rollout => {
                    let p = model.predict_next_frame(&ctx, &ds.schema, &choice, &ds.active)?;
                    (add_batch_dim(&seq.narrow(1, CONTEXT_LEN, 1)?)?, p)
                }
            };
            let r = evaluate(&drop_batch_dim(target)?, &drop_batch_dim(pred)?, &ds.schema, &partition)?;
            entries.extend(r.entries);
        }
    }
    Ok(MetricReport::from_entries(entries))
}

/// Metrics of predicted against target trajectories stored in two archives
/// with identical schema and layout.
pub fn eval_archives(pred: &Path, target: &Path) -> Result<MetricReport> {
    let t = read_archive(target, None)?;
    let p = read_archive(pred, Some(&t.schema))?;
    if p.len() != t.len() {
        return Err(Error::Incompatible(format!("{} predicted vs {} target trajectories", p.len(), t.len())));
    }
    let mut entries = Vec::new();
    for i in 0..t.len() {
        let tt = t.trajectory::<f64>(i)?;
        let pt = p.trajectory::<f64>(i)?;
        if tt.frames.shape() != pt.frames.shape() {
            return Err(Error::Incompatible(format!(
                "trajectory {i}: predicted {:?} vs target {:?}",
                pt.frames.shape(),
                tt.frames.shape()
            )));
        }
        let (h, w) = tt.grid();
        let partition = BandPartition::new(h, w)?;
        let tf = tt.frames.permute(&[1, 0, 2, 3])?;
        let pf = pt.frames.permute(&[1, 0, 2, 3])?;
        entries.extend(evaluate(&tf, &pf, &t.schema, &partition)?.entries);
    }
    Ok(MetricReport::from_entries(entries))
}

/// Autoregressive rollout of a checkpoint on each source's validation
/// trajectories.
pub fn rollout_eval<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<Vec<(String, RolloutReport)>> {
    let cfg = cfg.clone().resolve()?;
    let (model, _) = load_model::<T>(path)?;
    let data = load_data::<T>(&cfg)?;
    let choice = eval_choice(&cfg, &model);
    let mut out = Vec::new();
    for nt in &data.val_trajectories {
        let mut pred = EmulatorPredictor { model: &model, schema: nt.schema.clone(), choice: choice.clone(), active: nt.active.clone() };
        out.push((nt.name.clone(), rollout_evaluate(&mut pred, &nt.trajectories, cfg.eval.rollout_steps)?));
    }
    Ok(out)
}

/// One row per logged step of a run, for learning-curve plots.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub lr: Option<f64>,
    pub val_loss: Option<f64>,
    pub vrmse: Option<f64>,
    pub neps_low: Option<f64>,
    pub neps_mid: Option<f64>,
    pub neps_high: Option<f64>,
}

pub const CURVE_HEADER: &str = "step,train_loss,lr,val_loss,vrmse,neps_low,neps_mid,neps_high";

impl CurveRow {
    pub fn to_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            f(self.train_loss),
            f(self.lr),
            f(self.val_loss),
            f(self.vrmse),
            f(self.neps_low),
            f(self.neps_mid),
            f(self.neps_high)
        )
    }
}

/// Pivots aggregate rows of a long-format metrics table by step.
pub fn learning_curves(rows: &[CsvRow]) -> Vec<CurveRow> {
    let mut by_step: BTreeMap<usize, CurveRow> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.field == "all" && r.frame.is_none()) {
        let c = by_step.entry(r.step).or_insert_with(|| CurveRow { step: r.step, ..Default::default() });
        let slot = match (r.split.as_str(), r.metric.as_str()) {
            ("train", "loss") => &mut c.train_loss,
            ("train", "lr") => &mut c.lr,
            ("val", "loss") => &mut c.val_loss,
            ("val", "vrmse") => &mut c.vrmse,
            ("val", "neps_low") => &mut c.neps_low,
            ("val", "neps_mid") => &mut c.neps_mid,
            ("val", "neps_high") => &mut c.neps_high,
            _ => continue,
        };
        *slot = Some(r.value);
    }
    by_step.into_values().collect()
}
