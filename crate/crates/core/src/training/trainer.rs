use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{clip_grad_norm, mixture_sample, AdamW, FreezeStrategy, LoaderState, ShardLoader, TOKENISER_PREFIX};
use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState, MOMENT1_PREFIX, MOMENT2_PREFIX};
use crate::data::{FieldSchema, SequenceDataset, CONTEXT_LEN, SEQUENCE_LEN};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::metrics::{evaluate, BandPartition, CsvRow, MetricReport};
use crate::model::Emulator;
use crate::ops::ScalePair;
use crate::params::ParamId;
use crate::processor::rollout_loss;
use crate::run::RunDir;
use crate::scalar::Scalar;
use crate::schedule::{lr_at_epoch, OptimiserConfig, ScheduleConfig};
use crate::tensor::Tensor;
use crate::tokeniser::{normalise_with, rms_normalise, rms_scales, sample_compression, tokeniser_loss, CompressionChoice, CompressionMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Tokeniser autoencoding on the first 9 frames.
    Pretrain,
    /// Next-frame prediction through tokeniser and processor.
    Rollout,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrain => "pretrain",
            Self::Rollout => "rollout",
        })
    }
}

/// Where the tokeniser weights of a run come from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum TokeniserInit {
    #[default]
    Fresh,
    Checkpoint(PathBuf),
}

impl FromStr for TokeniserInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" => Err(arg_err!("empty tokeniser init")),
            "fresh" => Ok(Self::Fresh),
            p => Ok(Self::Checkpoint(PathBuf::from(p))),
        }
    }
}

impl fmt::Display for TokeniserInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fresh => f.write_str("fresh"),
            Self::Checkpoint(p) => write!(f, "{}", p.display()),
        }
    }
}

impl Serialize for TokeniserInit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokeniserInit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn four() -> usize {
    4
}

/// Settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per micro-batch (one simulated worker).
    #[serde(default = "two")]
    pub batch_size: usize,
    /// Micro-batches accumulated per optimiser step; each draws from its
    /// own disjoint shard.
    #[serde(default = "one")]
    pub accumulation: usize,
    /// Unique batches per shard before reseeding. One pass is one epoch.
    pub unique_batches: usize,
    pub optimiser: OptimiserConfig,
    /// Per-epoch schedule; `None` keeps `optimiser.lr` constant.
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub freeze: FreezeStrategy,
    #[serde(default)]
    pub tokeniser_init: TokeniserInit,
    /// Fixed compression for rollout training; defaults to the tokeniser's
    /// validation scales.
    #[serde(default)]
    pub compression: Option<Vec<ScalePair>>,
    #[serde(default = "one")]
    pub log_every: usize,
    /// Validation cadence in steps; 0 validates only at the start and end.
    #[serde(default)]
    pub val_every: usize,
    /// Batches per validation dataset.
    #[serde(default = "four")]
    pub val_batches: usize,
    /// Checkpoint cadence in steps; 0 saves only the final state.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn pretrain_reference() -> Self {
        Self {
            steps: super::PRETRAIN_STEPS,
            batch_size: super::BATCH_PER_WORKER,
            accumulation: super::WORKERS,
            unique_batches: super::PRETRAIN_UNIQUE_BATCHES,
            optimiser: OptimiserConfig::tokeniser_reference(),
            schedule: None,
            freeze: FreezeStrategy::FullyTrainable,
            tokeniser_init: TokeniserInit::Fresh,
            compression: None,
            log_every: 100,
            val_every: 1_000,
            val_batches: 64,
            checkpoint_every: 10_000,
        }
    }

    /// 14 passes of 2,100 batches; warmup and cooldown lengths are not
    /// given for the reference run and are set to 1 and 2 epochs.
    pub fn rollout_reference() -> Self {
        let opt = OptimiserConfig::rollout_reference();
        Self {
            steps: super::ROLLOUT_STEPS,
            unique_batches: super::ROLLOUT_UNIQUE_BATCHES,
            schedule: Some(ScheduleConfig::new(14, 1, 2, opt.lr).expect("valid reference schedule")),
            optimiser: opt,
            ..Self::pretrain_reference()
        }
    }

    /// Desk-scale tokeniser pretraining: single micro-batch of 2 and a
    /// higher constant learning rate.
    pub fn desk_pretrain() -> Self {
        Self {
            steps: 200,
            accumulation: 1,
            unique_batches: 50,
            optimiser: OptimiserConfig { lr: 2e-3, ..OptimiserConfig::tokeniser_reference() },
            log_every: 10,
            val_every: 50,
            val_batches: 4,
            checkpoint_every: 100,
            ..Self::pretrain_reference()
        }
    }

    pub fn desk_rollout() -> Self {
        let opt = OptimiserConfig { lr: 1e-3, ..OptimiserConfig::rollout_reference() };
        Self {
            steps: 200,
            accumulation: 1,
            unique_batches: 50,
            schedule: Some(ScheduleConfig::new(4, 1, 1, opt.lr).expect("valid desk schedule")),
            optimiser: opt,
            log_every: 10,
            val_every: 50,
            val_batches: 4,
            checkpoint_every: 100,
            ..Self::rollout_reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation == 0 || self.unique_batches == 0 || self.log_every == 0 {
            return Err(arg_err!("batch_size, accumulation, unique_batches and log_every must be positive"));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        if !(self.optimiser.clip_norm > 0.0) || !(self.optimiser.lr > 0.0) {
            return Err(arg_err!("clip_norm and lr must be positive"));
        }
        Ok(())
    }

    /// Epoch index of `step`: completed passes over one shard.
    pub fn epoch_of(&self, step: usize) -> usize {
        step / self.unique_batches
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        match &self.schedule {
            None => Ok(self.optimiser.lr),
            Some(s) => lr_at_epoch(self.epoch_of(step).min(s.epochs), s),
        }
    }
}

/// Training and validation sequences of every dataset in the mixture.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    /// Field set the tokeniser heads are built for.
    pub union: FieldSchema,
    pub train: Vec<SequenceDataset<T>>,
    pub val: Vec<SequenceDataset<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationResult {
    pub step: usize,
    pub loss: f64,
    pub report: MetricReport,
}

impl ValidationResult {
    pub fn rows(&self) -> Vec<CsvRow> {
        let mut rows = vec![CsvRow::new(self.step, "val", "all", None, "loss", self.loss)];
        rows.extend(self.report.summary_rows(self.step, "val"));
        rows
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub train: Vec<StepOutcome>,
    pub val: Vec<ValidationResult>,
    pub checkpoints: Vec<PathBuf>,
}

/// Single-writer training loop for either stage.
pub struct Trainer<'d, T: Scalar> {
    pub stage: Stage,
    pub cfg: TrainConfig,
    pub model: Emulator<T>,
    pub optim: AdamW<T>,
    pub step: usize,
    pub seed: u64,
    data: &'d TrainData<T>,
    loaders: Vec<Vec<ShardLoader>>,
    rng: ChaCha8Rng,
    /// Resolved run configuration recorded in checkpoints.
    pub run_config: Option<serde_json::Value>,
}

fn stage_stream(stage: Stage) -> u64 {
    match stage {
        Stage::Pretrain => 1,
        Stage::Rollout => 2,
    }
}

fn loader_seed(seed: u64, dataset: usize) -> u64 {
    seed ^ (dataset as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn check_data<T: Scalar>(data: &TrainData<T>, model: &Emulator<T>) -> Result<()> {
    if data.train.is_empty() || data.train.len() != data.val.len() {
        return Err(arg_err!("need at least one dataset with matching train and validation splits"));
    }
    let c_total = model.tokeniser.cfg.c_total;
    for ds in data.train.iter().chain(&data.val) {
        if let Some(&bad) = ds.active.iter().find(|&&a| a >= c_total) {
            return Err(shape_err!("dataset `{}` uses field slot {bad} but the tokeniser has {c_total}", ds.name));
        }
        if let Some(s) = ds.sequences.first() {
            if s.shape()[1] < SEQUENCE_LEN {
                return Err(shape_err!("dataset `{}` sequences have {} frames, need {SEQUENCE_LEN}", ds.name, s.shape()[1]));
            }
        }
    }
    Ok(())
}

impl<'d, T: Scalar> Trainer<'d, T> {
    /// The freeze mask is applied before the optimiser is built. Pretraining
    /// updates only tokeniser parameters.
    pub fn new(stage: Stage, cfg: TrainConfig, mut model: Emulator<T>, data: &'d TrainData<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        check_data(data, &model)?;
        apply_stage_mask(stage, cfg.freeze, &mut model);
        let optim = AdamW::new(cfg.optimiser.clone(), &model.params);
        let loaders = data
            .train
            .iter()
            .enumerate()
            .map(|(d, ds)| {
                (0..cfg.accumulation)
                    .map(|w| ShardLoader::new(ds.len(), w, cfg.accumulation, cfg.batch_size, cfg.unique_batches, loader_seed(seed, d)))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| arg_err!("dataset `{}`: {e}", ds.name))
            })
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stage_stream(stage));
        Ok(Self { stage, cfg, model, optim, step: 0, seed, data, loaders, rng, run_config: None })
    }

    /// Restores model, optimiser, loaders and generator from `ckpt`.
    pub fn resume(ckpt: &Checkpoint<T>, data: &'d TrainData<T>) -> Result<Self> {
        let meta = &ckpt.meta;
        let mut model = Emulator::new(&meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        let stored = ckpt.param_store()?;
        model.params.load_prefix(&stored, "")?;
        let mut t = Self::new(meta.stage, meta.train.clone(), model, data, meta.seed)?;
        let trainable: Vec<String> =
            t.model.params.ids().filter(|&id| t.model.params.is_trainable(id)).map(|id| t.model.params.name(id).to_string()).collect();
        if trainable != meta.trainable {
            return Err(Error::Incompatible("trainable parameter set differs from the checkpoint".into()));
        }
        for id in t.optim.tracked().collect::<Vec<_>>() {
            let name = t.model.params.name(id).to_string();
            let get = |prefix: &str| {
                ckpt.tensors.get(&format!("{prefix}{name}")).cloned().ok_or_else(|| Error::Checkpoint(format!("missing optimiser state for `{name}`")))
            };
            t.optim.set_moments(id, get(MOMENT1_PREFIX)?, get(MOMENT2_PREFIX)?)?;
        }
        t.optim.step = meta.optimiser_step;
        if meta.loaders.len() != data.train.len() {
            return Err(Error::Incompatible(format!("checkpoint has {} dataset loaders, data has {}", meta.loaders.len(), data.train.len())));
        }
        t.loaders = meta
            .loaders
            .iter()
            .zip(&data.train)
            .map(|(states, ds)| states.iter().map(|s| ShardLoader::from_state(ds.len(), s.clone())).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        t.rng = meta.rng.restore()?;
        t.step = meta.step;
        t.run_config = meta.run_config.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let p = &self.model.params;
        let mut tensors: std::collections::BTreeMap<String, Tensor<T>> =
            p.ids().map(|id| (p.name(id).to_string(), p.get(id).clone())).collect();
        for id in self.optim.tracked() {
            let (m, v) = self.optim.moments(id).expect("tracked");
            tensors.insert(format!("{MOMENT1_PREFIX}{}", p.name(id)), m.clone());
            tensors.insert(format!("{MOMENT2_PREFIX}{}", p.name(id)), v.clone());
        }
        let meta = CheckpointMeta {
            format_version: crate::checkpoint::CHECKPOINT_VERSION,
            dtype: T::NAME.into(),
            stage: self.stage,
            step: self.step,
            model: self.model.config(),
            train: self.cfg.clone(),
            run_config: self.run_config.clone(),
            seed: self.seed,
            rng: RngState::capture(&self.rng),
            freeze: self.cfg.freeze,
            trainable: p.ids().filter(|&id| p.is_trainable(id)).map(|id| p.name(id).to_string()).collect(),
            optimiser_step: self.optim.step,
            loaders: self.loaders.iter().map(|ls| ls.iter().map(|l| l.state().clone()).collect()).collect(),
            tensors: Vec::new(),
        };
        Checkpoint { meta, tensors }
    }

    pub fn loader_states(&self) -> Vec<Vec<LoaderState>> {
        self.loaders.iter().map(|ls| ls.iter().map(|l| l.state().clone()).collect()).collect()
    }

    fn rollout_choice(&self) -> CompressionChoice {
        match &self.cfg.compression {
            Some(c) => CompressionChoice(c.clone()),
            None => CompressionChoice(self.model.tokeniser.cfg.validation_scales.clone()),
        }
    }

    /// Loss of one `(B, C, L, H, W)` batch; with `train` set, compressions
    /// are sampled and drop path is active.
    fn batch_loss(&mut self, g: &mut Graph<T>, x: &Tensor<T>, ds: &SequenceDataset<T>, train: bool) -> Result<(crate::autograd::Var, Tensor<T>, Tensor<T>)> {
        let ctx = x.narrow(2, 0, CONTEXT_LEN)?;
        match self.stage {
            Stage::Pretrain => {
                let (xn, _) = rms_normalise(&ctx, &ds.schema)?;
                let mode = if train { CompressionMode::Train } else { CompressionMode::Validate };
                let choice = sample_compression(&self.model.tokeniser.cfg, mode, &mut self.rng);
                let xv = g.constant(xn.clone());
                let z = self.model.tokeniser.encode(g, &self.model.params, xv, &choice, &ds.active)?;
                let r = self.model.tokeniser.decode(g, &self.model.params, z, &choice, &ds.active)?;
                let l = tokeniser_loss(g, xv, r)?;
                Ok((l, xn, g.value(r).clone()))
            }
            Stage::Rollout => {
                let target = x.narrow(2, CONTEXT_LEN, 1)?;
                let state = rms_scales(&ctx, &ds.schema)?;
                let xn = normalise_with(&ctx, &state)?;
                let yn = normalise_with(&target, &state)?;
                let choice = self.rollout_choice();
                let xv = g.constant(xn);
                let yv = g.constant(yn.clone());
                let rng = if train { Some(&mut self.rng) } else { None };
                let p = self.model.predict_next_frame_var(g, xv, &choice, &ds.active, rng)?;
                let l = rollout_loss(g, yv, p)?;
                Ok((l, yn, g.value(p).clone()))
            }
        }
    }

    /// One optimiser step over `accumulation` micro-batches.
    pub fn train_step(&mut self, run: Option<&RunDir>) -> Result<StepOutcome> {
        let lr = self.cfg.lr_at(self.step)?;
        let accum = self.cfg.accumulation;
        let mut total: Option<Vec<(ParamId, Tensor<T>)>> = None;
        let mut loss_sum = 0.0;
        let data = self.data;
        for w in 0..accum {
            let d = mixture_sample(data.train.len(), &mut self.rng)?;
            let idx = self.loaders[d][w].next_batch();
            let ds = &data.train[d];
            let x = ds.batch(&idx)?;
            let mut g = Graph::new();
            let (l, ..) = self.batch_loss(&mut g, &x, ds, true)?;
            let lv = g.value(l).as_slice()[0].to_f64_lossless();
            if !lv.is_finite() {
                return Err(self.non_finite(run, lv, &ds.name, &idx));
            }
            loss_sum += lv;
            let grads = g.backward(l)?.into_param_grads();
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for ((ia, a), (ib, b)) in acc.iter_mut().zip(&grads) {
                        debug_assert_eq!(ia, ib);
                        *a = a.zip_map(b, |x, y| x + y)?;
                    }
                }
            }
        }
        let mut grads = total.unwrap_or_default();
        if accum > 1 {
            let s = T::lit(1.0 / accum as f64);
            for (_, g) in grads.iter_mut() {
                *g = g.scale(s);
            }
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.optimiser.clip_norm);
        if !grad_norm.is_finite() {
            return Err(self.non_finite(run, grad_norm, "gradient norm", &[]));
        }
        self.optim.update(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(StepOutcome { step: self.step, loss: loss_sum / accum as f64, lr, grad_norm })
    }

    fn non_finite(&self, run: Option<&RunDir>, loss: f64, source: &str, batch: &[usize]) -> Error {
        if let Some(run) = run {
            let path = run.diagnostic_path(self.step);
            let saved = self.checkpoint().save(&path);
            let _ = run.event(&format!(
                "non-finite value {loss} at step {} ({source}, batch {batch:?}); snapshot {} ({})",
                self.step,
                path.display(),
                if saved.is_ok() { "saved" } else { "not saved" }
            ));
        }
        Error::NonFiniteLoss { step: self.step, loss }
    }

    /// Mean loss and metrics over the first `val_batches` batches of every
    /// validation dataset, with the fixed validation compression and no
    /// drop path. Metrics are computed in normalised units.
    pub fn validate(&mut self) -> Result<ValidationResult> {
        let mut losses = Vec::new();
        let mut entries = Vec::new();
        let data = self.data;
        let bs = self.cfg.batch_size;
        for ds in &data.val {
            let n = ds.len().min(self.cfg.val_batches * bs);
            let (h, w) = match ds.sequences.first() {
                Some(s) => (s.shape()[2], s.shape()[3]),
                None => continue,
            };
            let partition = BandPartition::new(h, w)?;
            for start in (0..n).step_by(bs) {
                let idx: Vec<usize> = (start..(start + bs).min(n)).collect();
                let x = ds.batch(&idx)?;
                let mut g = Graph::new();
                let (l, target, pred) = self.batch_loss(&mut g, &x, ds, false)?;
                losses.push(g.value(l).as_slice()[0].to_f64_lossless());
                for b in 0..idx.len() {
                    let tb = squeeze0(target.narrow(0, b, 1)?)?;
                    let pb = squeeze0(pred.narrow(0, b, 1)?)?;
                    entries.extend(evaluate(&tb, &pb, &ds.schema, &partition)?.entries);
                }
            }
        }
        let loss = if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        Ok(ValidationResult { step: self.step, loss, report: MetricReport::from_entries(entries) })
    }

    fn save_checkpoint(&self, run: &RunDir, summary: &mut TrainSummary) -> Result<()> {
        let path = run.checkpoint_path(self.step);
        self.checkpoint().save(&path)?;
        run.event(&format!("checkpoint {}", path.display()))?;
        summary.checkpoints.push(path);
        Ok(())
    }

    /// Trains until `cfg.steps`, logging to `run` when given.
    pub fn run(&mut self, run: Option<&RunDir>) -> Result<TrainSummary> {
        let mut summary = TrainSummary::default();
        if let Some(r) = run {
            r.truncate_metrics_after(self.step)?;
            r.event(&format!("{} stage from step {} to {}", self.stage, self.step, self.cfg.steps))?;
        }
        if self.step == 0 {
            let v = self.validate()?;
            if let Some(r) = run {
                r.append_metrics(&v.rows())?;
            }
            summary.val.push(v);
        }
        while self.step < self.cfg.steps {
            let out = self.train_step(run)?;
            summary.train.push(out);
            let s = self.step;
            let last = s == self.cfg.steps;
            let mut rows = Vec::new();
            if s % self.cfg.log_every == 0 || last {
                rows.push(CsvRow::new(s, "train", "all", None, "loss", out.loss));
                rows.push(CsvRow::new(s, "train", "all", None, "lr", out.lr));
                rows.push(CsvRow::new(s, "train", "all", None, "grad_norm", out.grad_norm));
            }
            if (self.cfg.val_every > 0 && s % self.cfg.val_every == 0) || last {
                let v = self.validate()?;
                rows.extend(v.rows());
                summary.val.push(v);
            }
            if let Some(r) = run {
                if !rows.is_empty() {
                    r.append_metrics(&rows)?;
                    r.event(&format!("step {s} loss {:e} lr {:e}", out.loss, out.lr))?;
                }
                if (self.cfg.checkpoint_every > 0 && s % self.cfg.checkpoint_every == 0) || last {
                    self.save_checkpoint(r, &mut summary)?;
                }
            }
        }
        Ok(summary)
    }
}

fn squeeze0<T: Scalar>(t: Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape()[1..].to_vec();
    t.reshape(&s)
}

/// Pretraining touches only the tokeniser; rollout training follows the
/// freeze strategy.
fn apply_stage_mask<T: Scalar>(stage: Stage, freeze: FreezeStrategy, model: &mut Emulator<T>) {
    let p = &mut model.params;
    for id in p.ids().collect::<Vec<_>>() {
        let name = p.name(id);
        let on = match stage {
            Stage::Pretrain => name.starts_with(TOKENISER_PREFIX),
            Stage::Rollout => freeze.trains(name),
        };
        p.set_trainable(id, on);
    }
}
