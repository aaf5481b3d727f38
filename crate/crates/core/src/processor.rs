//! Latent-space transformer with factorised spatial and causal temporal
//! attention.
//!
//! Token grids are `(B, T, H, W, D)`. Each block applies full spatial
//! attention within every frame (axial rotary encodings), then causal
//! temporal attention at every spatial site (learned relative biases), then a
//! SwiGLU MLP, each as a pre-normalised residual branch.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorConfig {
    pub blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_drop_path")]
    pub drop_path_max: f64,
    pub latent_dim: usize,
    /// Size of the relative temporal bias table; longer distances share the
    /// last entry.
    #[serde(default = "default_max_time")]
    pub max_time: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_mlp_ratio() -> usize {
    4
}
fn default_drop_path() -> f64 {
    0.05
}
fn default_max_time() -> usize {
    32
}
fn default_rope_base() -> f64 {
    10_000.0
}

impl ProcessorConfig {
    pub fn reference() -> Self {
        Self {
            blocks: 6,
            embed_dim: 1088,
            heads: 16,
            mlp_ratio: 4,
            drop_path_max: 0.05,
            latent_dim: 18,
            max_time: default_max_time(),
            rope_base: default_rope_base(),
        }
    }

    pub fn desk() -> Self {
        Self { blocks: 2, embed_dim: 128, heads: 4, ..Self::reference() }
    }

    pub fn tiny(latent_dim: usize) -> Self {
        Self { blocks: 2, embed_dim: 32, heads: 4, latent_dim, ..Self::reference() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(arg_err!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.head_dim() % 4 != 0 {
            return Err(arg_err!("head dim {} must be a multiple of 4 for axial rotary encodings", self.head_dim()));
        }
        if self.blocks == 0 || self.latent_dim == 0 || self.max_time == 0 || self.mlp_ratio == 0 {
            return Err(arg_err!("blocks, latent_dim, max_time and mlp_ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_max) {
            return Err(arg_err!("drop_path_max {} outside [0, 1)", self.drop_path_max));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// `drop_path_max * i / (B - 1)`.
    pub fn drop_path_rate(&self, i: usize) -> f64 {
        if self.blocks <= 1 {
            0.0
        } else {
            self.drop_path_max * i as f64 / (self.blocks - 1) as f64
        }
    }
}

pub const PROJECTION_PREFIX: &str = "projection.";
pub const PROCESSOR_PREFIX: &str = "processor.";

pub fn layout(cfg: &ProcessorConfig) -> Vec<ParamSpec> {
    let (d, l) = (cfg.embed_dim, cfg.latent_dim);
    let hidden = cfg.mlp_ratio * d;
    let std_in = (d as f64).sqrt().recip();
    let std_res = std_in / ((2 * cfg.blocks) as f64).sqrt();
    let mut v = vec![
        ParamSpec::new("projection.in.weight", &[l, d], Init::Normal((l as f64).sqrt().recip())),
        ParamSpec::new("projection.in.bias", &[d], Init::Zeros),
    ];
    for i in 0..cfg.blocks {
        let p = format!("processor.block{i}");
        v.push(ParamSpec::new(format!("{p}.norm1.gain"), &[d], Init::Ones));
        v.push(ParamSpec::new(format!("{p}.spatial.qkv"), &[d, 3 * d], Init::Normal(std_in)));
        v.push(ParamSpec::new(format!("{p}.spatial.out"), &[d, d], Init::Normal(std_res)));
        v.push(ParamSpec::new(format!("{p}.norm2.gain"), &[d], Init::Ones));
        v.push(ParamSpec::new(format!("{p}.temporal.qkv"), &[d, 3 * d], Init::Normal(std_in)));
        v.push(ParamSpec::new(format!("{p}.temporal.out"), &[d, d], Init::Normal(std_res)));
        v.push(ParamSpec::new(format!("{p}.temporal.rel_bias"), &[cfg.heads, cfg.max_time], Init::Zeros));
        v.push(ParamSpec::new(format!("{p}.norm3.gain"), &[d], Init::Ones));
        v.push(ParamSpec::new(format!("{p}.mlp.gate"), &[d, hidden], Init::Normal(std_in)));
        v.push(ParamSpec::new(format!("{p}.mlp.up"), &[d, hidden], Init::Normal(std_in)));
        v.push(ParamSpec::new(
            format!("{p}.mlp.down"),
            &[hidden, d],
            Init::Normal((hidden as f64).sqrt().recip() / ((2 * cfg.blocks) as f64).sqrt()),
        ));
    }
    v.push(ParamSpec::new("processor.final_norm.gain", &[d], Init::Ones));
    v.push(ParamSpec::new("projection.out.weight", &[d, l], Init::Normal(std_in)));
    v.push(ParamSpec::new("projection.out.bias", &[l], Init::Zeros));
    v
}

/// Cos/sin tables `[H W, hd/2]`: the first half of the rotated pairs follow
/// the row index, the second half the column index.
pub fn axial_rope_tables<T: Scalar>(h: usize, w: usize, head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let pairs = head_dim / 2;
    let per_axis = pairs / 2;
    let mut cos = Vec::with_capacity(h * w * pairs);
    let mut sin = Vec::with_capacity(h * w * pairs);
    for y in 0..h {
        for x in 0..w {
            for i in 0..pairs {
                let (pos, j) = if i < per_axis { (y, i) } else { (x, i - per_axis) };
                let theta = pos as f64 * base.powf(-(j as f64) / per_axis as f64);
                cos.push(T::lit(theta.cos()));
                sin.push(T::lit(theta.sin()));
            }
        }
    }
    (cos, sin)
}

/// Gather indices mapping a `[heads, max_time]` bias table to
/// `[heads, T, T]` with entry `(i, j)` reading distance `min(i - j, max - 1)`.
/// Entries above the diagonal are masked downstream and read distance 0.
pub fn relative_bias_index(heads: usize, t: usize, max_time: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let dist = if j <= i { (i - j).min(max_time - 1) } else { 0 };
                idx.push(h * max_time + dist);
            }
        }
    }
    idx
}

fn param<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(g.param(store, store.require(name)?))
}

fn dims5(shape: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    match shape {
        &[b, t, h, w, d] => Ok((b, t, h, w, d)),
        s => Err(shape_err!("expected a (B, T, H, W, D) token grid, got {s:?}")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Processor {
    pub cfg: ProcessorConfig,
}

impl Processor {
    pub fn new(cfg: ProcessorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        layout(&self.cfg)
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.add_all(&self.layout(), rng).map(|_| ())
    }

    /// Latent `(B, L, T, H, W)` to tokens `(B, T, H, W, D)`.
    pub fn project_in<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, z: Var) -> Result<Var> {
        let (_, l, ..) = g.value(z).dims5()?;
        if l != self.cfg.latent_dim {
            return Err(shape_err!("latent has {l} channels, processor expects {}", self.cfg.latent_dim));
        }
        let zt = g.permute(z, &[0, 2, 3, 4, 1])?;
        let w = param(g, s, "projection.in.weight")?;
        let b = param(g, s, "projection.in.bias")?;
        let y = g.linear(zt, w)?;
        g.add_bcast(y, b)
    }

    /// Tokens `(B, T, H, W, D)` to latent `(B, L, T, H, W)`.
    pub fn project_out<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (.., d) = dims5(g.shape(x))?;
        if d != self.cfg.embed_dim {
            return Err(shape_err!("tokens have width {d}, processor expects {}", self.cfg.embed_dim));
        }
        let w = param(g, s, "projection.out.weight")?;
        let b = param(g, s, "projection.out.bias")?;
        let y = g.linear(x, w)?;
        let y = g.add_bcast(y, b)?;
        g.permute(y, &[0, 4, 1, 2, 3])
    }

    fn split_heads<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        qkv: Var,
        lead: &[usize],
        axes: &[usize],
        rows: usize,
        len: usize,
    ) -> Result<[Var; 3]> {
        let hd = self.cfg.head_dim();
        let mut shape = lead.to_vec();
        shape.extend_from_slice(&[3, self.cfg.heads, hd]);
        let r = g.reshape(qkv, &shape)?;
        let p = g.permute(r, axes)?;
        let mut out = [p; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let part = g.narrow(p, 0, i, 1)?;
            *o = g.reshape(part, &[rows, len, hd])?;
        }
        Ok(out)
    }

    fn spatial_attention<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
        let (b, t, h, w, d) = dims5(g.shape(x))?;
        let (nh, hd) = (self.cfg.heads, self.cfg.head_dim());
        let wqkv = param(g, s, &format!("{prefix}.qkv"))?;
        let qkv = g.linear(x, wqkv)?;
        let [q, k, v] = self.split_heads(g, qkv, &[b * t, h * w], &[2, 0, 3, 1, 4], b * t * nh, h * w)?;
        let (cos, sin) = axial_rope_tables::<T>(h, w, hd, self.cfg.rope_base);
        let (cos, sin) = (Arc::new(cos), Arc::new(sin));
        let q = g.rope(q, cos.clone(), sin.clone())?;
        let k = g.rope(k, cos, sin)?;
        let sc = g.bmm(q, k, true)?;
        let sc = g.scale(sc, T::lit((hd as f64).sqrt().recip()));
        let a = g.softmax(sc, false)?;
        let o = g.bmm(a, v, false)?;
        let o = g.reshape(o, &[b * t, nh, h * w, hd])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, t, h, w, d])?;
        let wo = param(g, s, &format!("{prefix}.out"))?;
        g.linear(o, wo)
    }

    fn temporal_attention<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
        let (b, t, h, w, d) = dims5(g.shape(x))?;
        let (nh, hd) = (self.cfg.heads, self.cfg.head_dim());
        let wqkv = param(g, s, &format!("{prefix}.qkv"))?;
        let qkv = g.linear(x, wqkv)?;
        let [q, k, v] = self.split_heads(g, qkv, &[b, t, h * w], &[3, 0, 2, 4, 1, 5], b * h * w * nh, t)?;
        let sc = g.bmm(q, k, true)?;
        let sc = g.scale(sc, T::lit((hd as f64).sqrt().recip()));
        let sc = g.reshape(sc, &[b * h * w, nh, t, t])?;
        let table = param(g, s, &format!("{prefix}.rel_bias"))?;
        let bias = g.gather(table, Arc::new(relative_bias_index(nh, t, self.cfg.max_time)), &[nh, t, t])?;
        let sc = g.add_bcast(sc, bias)?;
        let sc = g.reshape(sc, &[b * h * w * nh, t, t])?;
        let a = g.softmax(sc, true)?;
        let o = g.bmm(a, v, false)?;
        let o = g.reshape(o, &[b, h * w, nh, t, hd])?;
        let o = g.permute(o, &[0, 3, 1, 2, 4])?;
        let o = g.reshape(o, &[b, t, h, w, d])?;
        let wo = param(g, s, &format!("{prefix}.out"))?;
        g.linear(o, wo)
    }

    fn mlp<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
        let wg = param(g, s, &format!("{prefix}.gate"))?;
        let wu = param(g, s, &format!("{prefix}.up"))?;
        let wd = param(g, s, &format!("{prefix}.down"))?;
        let a = g.linear(x, wg)?;
        let a = g.silu(a);
        let u = g.linear(x, wu)?;
        let h = g.mul(a, u)?;
        g.linear(h, wd)
    }

    fn norm<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
        let gain = param(g, s, name)?;
        g.rms_group_norm(x, gain, self.cfg.heads)
    }

    /// Residual add with per-sample stochastic depth when `rng` is given.
    fn residual<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        branch: Var,
        rate: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let branch = match rng {
            Some(rng) if rate > 0.0 => {
                let shape = g.shape(branch).to_vec();
                let per = shape[1..].iter().product::<usize>();
                let keep = T::lit((1.0 - rate).recip());
                let mut mask = Vec::with_capacity(shape[0] * per);
                for _ in 0..shape[0] {
                    let m = if rng.random::<f64>() < rate { T::zero() } else { keep };
                    mask.extend(std::iter::repeat_n(m, per));
                }
                g.mul_const(branch, Arc::new(Tensor::new(shape, mask)?))?
            }
            _ => branch,
        };
        g.add(x, branch)
    }

    /// Applies every block and the final norm. Drop path is active only when
    /// `rng` is supplied (training).
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let (.., d) = dims5(g.shape(x))?;
        if d != self.cfg.embed_dim {
            return Err(shape_err!("tokens have width {d}, processor expects {}", self.cfg.embed_dim));
        }
        let mut x = x;
        for i in 0..self.cfg.blocks {
            let p = format!("processor.block{i}");
            let rate = self.cfg.drop_path_rate(i);
            let h = self.norm(g, s, x, &format!("{p}.norm1.gain"))?;
            let h = self.spatial_attention(g, s, h, &format!("{p}.spatial"))?;
            x = self.residual(g, x, h, rate, rng.as_deref_mut())?;
            let h = self.norm(g, s, x, &format!("{p}.norm2.gain"))?;
            let h = self.temporal_attention(g, s, h, &format!("{p}.temporal"))?;
            x = self.residual(g, x, h, rate, rng.as_deref_mut())?;
            let h = self.norm(g, s, x, &format!("{p}.norm3.gain"))?;
            let h = self.mlp(g, s, h, &format!("{p}.mlp"))?;
            x = self.residual(g, x, h, rate, rng.as_deref_mut())?;
        }
        self.norm(g, s, x, "processor.final_norm.gain")
    }
}

/// Mean absolute error over all elements.
pub fn rollout_loss<T: Scalar>(g: &mut Graph<T>, x: Var, xh: Var) -> Result<Var> {
    let d = g.sub(x, xh)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drop_path_schedule() {
        let cfg = ProcessorConfig::reference();
        assert_eq!(cfg.drop_path_rate(0), 0.0);
        assert!((cfg.drop_path_rate(5) - 0.05).abs() < 1e-15);
        assert!((cfg.drop_path_rate(2) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn bias_index_clips_distance() {
        let idx = relative_bias_index(2, 4, 3);
        // head 1, query 3, key 0: distance 3 clipped to 2.
        assert_eq!(idx[16 + 3 * 4], 3 + 2);
        assert_eq!(idx[2 * 4 + 1], 1);
    }

    #[test]
    fn rope_tables_split_axes() {
        let (cos, sin) = axial_rope_tables::<f64>(2, 3, 8, 10_000.0);
        // Position (y=1, x=2): pairs 0..2 rotate by y, pairs 2..4 by x.
        let row = (3 + 2) * 4;
        assert!((cos[row] - 1f64.cos()).abs() < 1e-15);
        assert!((sin[row + 2] - 2f64.sin()).abs() < 1e-15);
        assert!((cos[row + 3] - (2.0 * 0.01f64).cos()).abs() < 1e-15);
    }
}
