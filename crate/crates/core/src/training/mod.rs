//! Freezing, optimisation, shard loading and the two training stages.

mod trainer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::params::{ParamId, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::schedule::OptimiserConfig;
use crate::tensor::Tensor;
use crate::tokeniser::is_interface_param;

pub use trainer::{Stage, StepOutcome, TokeniserInit, TrainConfig, TrainData, TrainSummary, Trainer, ValidationResult};

/// Reference step budgets.
pub const PRETRAIN_STEPS: usize = 168_000;
pub const ROLLOUT_STEPS: usize = 29_400;
/// Unique batches per shard before the loader reseeds.
pub const PRETRAIN_UNIQUE_BATCHES: usize = 21_000;
pub const ROLLOUT_UNIQUE_BATCHES: usize = 2_100;
/// Samples per worker and workers in the reference runs.
pub const BATCH_PER_WORKER: usize = 2;
pub const WORKERS: usize = 8;
pub const EFFECTIVE_BATCH: usize = BATCH_PER_WORKER * WORKERS;

pub const TOKENISER_PREFIX: &str = "tokeniser.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeStrategy {
    #[default]
    #[serde(alias = "full")]
    FullyTrainable,
    MostlyFrozen,
}

impl FreezeStrategy {
    /// Whether the parameter named `name` is updated under this strategy.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Self::FullyTrainable => true,
            Self::MostlyFrozen => !name.starts_with(TOKENISER_PREFIX) || is_interface_param(name),
        }
    }

    /// Sets the trainable flag of every parameter in `store`.
    pub fn apply<T: Scalar>(self, store: &mut ParamStore<T>) {
        for id in store.ids().collect::<Vec<_>>() {
            let on = self.trains(store.name(id));
            store.set_trainable(id, on);
        }
    }
}

impl fmt::Display for FreezeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FullyTrainable => "full",
            Self::MostlyFrozen => "mostly-frozen",
        })
    }
}

impl FromStr for FreezeStrategy {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "fully-trainable" => Ok(Self::FullyTrainable),
            "mostly-frozen" => Ok(Self::MostlyFrozen),
            _ => Err(arg_err!("unknown freeze strategy `{s}` (expected full or mostly-frozen)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

/// Trainable and total tokeniser parameter counts under `freeze`, from the
/// model layout.
pub fn trainable_fraction(layout: &[ParamSpec], freeze: FreezeStrategy) -> ParamCounts {
    let tok = layout.iter().filter(|s| s.name.starts_with(TOKENISER_PREFIX));
    let (trainable, total) = tok.fold((0, 0), |(t, n), s| {
        let k = s.numel();
        (t + if freeze.trains(&s.name) { k } else { 0 }, n + k)
    });
    ParamCounts { trainable, total }
}

/// Tokeniser counts according to the store's current trainable flags.
pub fn store_trainable_fraction<T: Scalar>(store: &ParamStore<T>) -> ParamCounts {
    let mut c = ParamCounts { trainable: 0, total: 0 };
    for id in store.ids().filter(|&id| store.name(id).starts_with(TOKENISER_PREFIX)) {
        let k = store.get(id).numel();
        c.total += k;
        if store.is_trainable(id) {
            c.trainable += k;
        }
    }
    c
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|(_, g)| g.as_slice()).map(|v| v.to_f64_lossless().powi(2)).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay. Moment buffers exist only for
/// parameters that were trainable when the optimiser was built.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: OptimiserConfig,
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimiserConfig, store: &ParamStore<T>) -> Self {
        let moments = store
            .ids()
            .filter(|&id| store.is_trainable(id))
            .map(|id| {
                let shape = store.get(id).shape();
                (id, (Tensor::zeros(shape), Tensor::zeros(shape)))
            })
            .collect();
        Self { cfg, step: 0, moments }
    }

    /// Parameters holding optimiser state.
    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }

    /// Replaces the state of one tracked parameter.
    pub fn set_moments(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        match self.moments.get_mut(&id) {
            Some(slot) if slot.0.shape() == m.shape() && slot.1.shape() == v.shape() => {
                *slot = (m, v);
                Ok(())
            }
            Some(slot) => Err(arg_err!("moment shape {:?} does not match parameter {:?}", m.shape(), slot.0.shape())),
            None => Err(arg_err!("parameter {id:?} has no optimiser state")),
        }
    }

    /// One update with learning rate `lr`. Gradients of untracked
    /// parameters are an error.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        for (id, g) in grads {
            let Some((m, v)) = self.moments.get_mut(id) else {
                return Err(arg_err!("gradient for `{}`, which has no optimiser state", store.name(*id)));
            };
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(arg_err!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            let it = p.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(g.as_slice());
            for (((p, m), v), &g) in it {
                let g = g.to_f64_lossless();
                let mf = b1 * m.to_f64_lossless() + (1.0 - b1) * g;
                let vf = b2 * v.to_f64_lossless() + (1.0 - b2) * g * g;
                let step = lr * (mf / c1) / ((vf / c2).sqrt() + self.cfg.eps);
                *p = T::lit(p.to_f64_lossless() * decay - step);
                *m = T::lit(mf);
                *v = T::lit(vf);
            }
        }
        Ok(())
    }
}

/// Serialisable position of a [`ShardLoader`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoaderState {
    pub shard: usize,
    pub num_shards: usize,
    pub batch_size: usize,
    pub budget: usize,
    pub seed: u64,
    pub pass: u64,
    pub cursor: usize,
}

/// Yields batches from one disjoint shard of a dataset. Within a pass the
/// shard is traversed in a random order without replacement; after
/// `budget` batches (or when the shard runs out) the generator is reseeded
/// for the next pass.
#[derive(Clone, Debug)]
pub struct ShardLoader {
    state: LoaderState,
    samples: Vec<usize>,
    order: Vec<usize>,
}

impl ShardLoader {
    /// Shard `shard` of `num_shards` holds samples `i` with
    /// `i % num_shards == shard`.
    pub fn new(dataset_len: usize, shard: usize, num_shards: usize, batch_size: usize, budget: usize, seed: u64) -> Result<Self> {
        let state = LoaderState { shard, num_shards, batch_size, budget, seed, pass: 0, cursor: 0 };
        Self::from_state(dataset_len, state)
    }

    pub fn from_state(dataset_len: usize, state: LoaderState) -> Result<Self> {
        if state.num_shards == 0 || state.shard >= state.num_shards {
            return Err(arg_err!("shard {} of {}", state.shard, state.num_shards));
        }
        if state.batch_size == 0 || state.budget == 0 {
            return Err(arg_err!("batch size and unique-batch budget must be positive"));
        }
        let samples: Vec<usize> = (state.shard..dataset_len).step_by(state.num_shards).collect();
        if samples.len() < state.batch_size {
            return Err(arg_err!(
                "shard {} holds {} samples, fewer than one batch of {}",
                state.shard,
                samples.len(),
                state.batch_size
            ));
        }
        let mut loader = Self { state, samples, order: Vec::new() };
        if loader.state.cursor > loader.batches_per_pass() {
            return Err(arg_err!("loader cursor {} beyond pass length {}", loader.state.cursor, loader.batches_per_pass()));
        }
        loader.shuffle();
        Ok(loader)
    }

    pub fn state(&self) -> &LoaderState {
        &self.state
    }

    /// Global sample indices of this shard.
    pub fn samples(&self) -> &[usize] {
        &self.samples
    }

    pub fn batches_per_pass(&self) -> usize {
        self.state.budget.min(self.samples.len() / self.state.batch_size)
    }

    fn pass_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        rng.set_stream(((self.state.shard as u64) << 40) ^ self.state.pass);
        rng
    }

    fn shuffle(&mut self) {
        let mut rng = self.pass_rng();
        self.order = self.samples.clone();
        self.order.shuffle(&mut rng);
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.state.cursor == self.batches_per_pass() {
            self.state.pass += 1;
            self.state.cursor = 0;
            self.shuffle();
        }
        let bs = self.state.batch_size;
        let c = self.state.cursor;
        self.state.cursor += 1;
        self.order[c * bs..(c + 1) * bs].to_vec()
    }
}

/// Uniform choice among `n` datasets.
pub fn mixture_sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<usize> {
    if n == 0 {
        return Err(arg_err!("mixture over zero datasets"));
    }
    Ok(if n == 1 { 0 } else { rng.random_range(0..n) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_strategy_parsing() {
        assert_eq!("full".parse::<FreezeStrategy>().unwrap(), FreezeStrategy::FullyTrainable);
        assert_eq!("mostly-frozen".parse::<FreezeStrategy>().unwrap(), FreezeStrategy::MostlyFrozen);
        assert!("none".parse::<FreezeStrategy>().is_err());
        assert_eq!(FreezeStrategy::MostlyFrozen.to_string(), "mostly-frozen");
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![
            (ParamId(0), Tensor::new(vec![2], vec![3.0f64, 0.0]).unwrap()),
            (ParamId(1), Tensor::new(vec![1], vec![4.0]).unwrap()),
        ];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[1].1.as_slice(), &[4.0]);
        assert_eq!(clip_grad_norm(&mut g, 0.5), 5.0);
        assert!((g[0].1.as_slice()[0] - 0.3).abs() < 1e-15);
        assert!((g[1].1.as_slice()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        let cfg = OptimiserConfig { weight_decay: 0.0, eps: 0.0, ..OptimiserConfig::rollout_reference() };
        let mut opt = AdamW::new(cfg, &s);
        let g = Tensor::new(vec![2], vec![0.3, -7.0]).unwrap();
        opt.update(&mut s, &[(id, g)], 0.1).unwrap();
        let p = s.get(id).as_slice();
        assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] + 0.9).abs() < 1e-12);
    }
}
