//! Causal convolutional autoencoder with runtime-selectable compression.
//!
//! Encoder: adaptive field head, three stages of residual blocks each
//! followed by a flexible strided downsample, a middle stage, and a 1x1x1
//! bottleneck to the latent channels. The decoder mirrors it with a k=3
//! bottleneck, flexible depth-to-space upsampling and an adaptive output
//! head. Every layer is temporally causal.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::FieldSchema;
use crate::error::{arg_err, shape_err, Result};
use crate::ops::{
    adaptive_field_conv, causal_conv3d, downsample_dims, flexible_depth_to_space, flexible_downsample, BaseKernel,
    FieldAxis, ScalePair,
};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp of per-field RMS scales.
pub const RMS_FLOOR: f64 = 1e-7;

pub const ENCODER_HEAD: &str = "tokeniser.encoder.head";
pub const DECODER_HEAD: &str = "tokeniser.decoder.head";
pub const ENCODER_BOTTLENECK: &str = "tokeniser.encoder.bottleneck";
pub const DECODER_BOTTLENECK: &str = "tokeniser.decoder.bottleneck";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokeniserConfig {
    /// Channel count entering each of the three stages.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
    /// Set of scale pairs selectable at each depth.
    pub depth_scales: Vec<Vec<ScalePair>>,
    pub res_blocks: usize,
    /// Number of field channel slots the heads are built for.
    pub c_total: usize,
    pub norm_groups: usize,
    /// Fixed compression used for validation.
    pub validation_scales: Vec<ScalePair>,
}

fn sp(t: usize, s: usize) -> ScalePair {
    ScalePair { t, s }
}

pub fn table_scales() -> Vec<Vec<ScalePair>> {
    let flexible = vec![sp(1, 2), sp(1, 4), sp(2, 2), sp(2, 4)];
    vec![vec![sp(1, 2)], flexible.clone(), flexible]
}

impl TokeniserConfig {
    /// Full-size layout: channels 16/32/64, 18 latent channels.
    pub fn reference(c_total: usize) -> Self {
        Self {
            channels: vec![16, 32, 64],
            latent_channels: 18,
            depth_scales: table_scales(),
            res_blocks: 2,
            c_total,
            norm_groups: 8,
            validation_scales: vec![sp(1, 2), sp(2, 2), sp(2, 2)],
        }
    }

    /// Small layout for CPU tests and trend runs.
    pub fn tiny(c_total: usize) -> Self {
        Self { channels: vec![8, 16, 16], latent_channels: 8, res_blocks: 1, norm_groups: 4, ..Self::reference(c_total) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 3 || self.depth_scales.len() != 3 || self.validation_scales.len() != 3 {
            return Err(arg_err!("tokeniser needs exactly 3 depths (channels, depth_scales, validation_scales)"));
        }
        if self.latent_channels == 0 || self.c_total == 0 {
            return Err(arg_err!("latent_channels and c_total must be positive"));
        }
        for &c in &self.channels {
            if self.norm_groups == 0 || c % self.norm_groups != 0 {
                return Err(arg_err!("{c} channels not divisible into {} norm groups", self.norm_groups));
            }
        }
        for (d, set) in self.depth_scales.iter().enumerate() {
            if set.is_empty() {
                return Err(arg_err!("depth {d} has no selectable scales"));
            }
            if !set.contains(&self.validation_scales[d]) {
                return Err(arg_err!("validation scale {} not selectable at depth {d}", self.validation_scales[d]));
            }
        }
        Ok(())
    }

    /// Largest `(s_t, s_s)` at depth `d`; sizes that depth's base kernels.
    pub fn base_scale(&self, d: usize) -> ScalePair {
        let set = &self.depth_scales[d];
        sp(set.iter().map(|p| p.t).max().unwrap_or(1), set.iter().map(|p| p.s).max().unwrap_or(1))
    }

    fn stage_io(&self, d: usize) -> (usize, usize) {
        let c_in = self.channels[d];
        let c_out = if d + 1 < self.channels.len() { self.channels[d + 1] } else { self.channels[d] };
        (c_in, c_out)
    }

    fn deepest(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, co: usize, ci: usize, kt: usize, ks: usize) {
    let fan_in = (ci * kt * ks * ks) as f64;
    out.push(ParamSpec::new(format!("{name}.weight"), &[co, ci, kt, ks, ks], Init::Normal(fan_in.sqrt().recip())));
    out.push(ParamSpec::new(format!("{name}.bias"), &[co], Init::Zeros));
}

fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(ParamSpec::new(format!("{name}.gamma"), &[c], Init::Ones));
    out.push(ParamSpec::new(format!("{name}.beta"), &[c], Init::Zeros));
}

fn block_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    norm_specs(out, &format!("{name}.norm1"), c);
    conv_specs(out, &format!("{name}.conv1"), c, c, 3, 3);
    norm_specs(out, &format!("{name}.norm2"), c);
    conv_specs(out, &format!("{name}.conv2"), c, c, 3, 3);
}

/// Every tokeniser parameter in construction order.
pub fn layout(cfg: &TokeniserConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    let enc = "tokeniser.encoder";
    let dec = "tokeniser.decoder";
    conv_specs(&mut v, ENCODER_HEAD, cfg.channels[0], cfg.c_total, 3, 3);
    for d in 0..3 {
        let (ci, co) = cfg.stage_io(d);
        for b in 0..cfg.res_blocks {
            block_specs(&mut v, &format!("{enc}.stage{d}.block{b}"), ci);
        }
        let (kt, ks) = cfg.base_scale(d).kernel_size();
        conv_specs(&mut v, &format!("{enc}.stage{d}.down"), co, ci, kt, ks);
    }
    for b in 0..cfg.res_blocks {
        block_specs(&mut v, &format!("{enc}.mid.block{b}"), cfg.deepest());
    }
    norm_specs(&mut v, &format!("{enc}.out_norm"), cfg.deepest());
    conv_specs(&mut v, ENCODER_BOTTLENECK, cfg.latent_channels, cfg.deepest(), 1, 1);

    conv_specs(&mut v, DECODER_BOTTLENECK, cfg.deepest(), cfg.latent_channels, 3, 3);
    for b in 0..cfg.res_blocks {
        block_specs(&mut v, &format!("{dec}.mid.block{b}"), cfg.deepest());
    }
    for d in (0..3).rev() {
        let (ci, co) = cfg.stage_io(d);
        let base = cfg.base_scale(d);
        conv_specs(&mut v, &format!("{dec}.stage{d}.up"), ci * base.t * base.s * base.s, co, 3, 3);
        for b in 0..cfg.res_blocks {
            block_specs(&mut v, &format!("{dec}.stage{d}.block{b}"), ci);
        }
    }
    norm_specs(&mut v, &format!("{dec}.out_norm"), cfg.channels[0]);
    conv_specs(&mut v, DECODER_HEAD, cfg.c_total, cfg.channels[0], 3, 3);
    v
}

/// Parameters trained under the mostly-frozen strategy: both heads and both
/// bottlenecks.
pub fn is_interface_param(name: &str) -> bool {
    [ENCODER_HEAD, DECODER_HEAD, ENCODER_BOTTLENECK, DECODER_BOTTLENECK]
        .iter()
        .any(|p| name.strip_prefix(p).is_some_and(|rest| rest.starts_with('.')))
}

/// One scale pair per depth.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompressionChoice(pub Vec<ScalePair>);

impl CompressionChoice {
    pub fn temporal(&self) -> usize {
        self.0.iter().map(|p| p.t).product()
    }

    pub fn spatial(&self) -> usize {
        self.0.iter().map(|p| p.s).product()
    }
}

impl fmt::Display for CompressionChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompressionMode {
    Train,
    Validate,
}

/// Validation: the configured fixed scales. Training: an independent uniform
/// draw from each depth's set.
pub fn sample_compression<R: Rng + ?Sized>(cfg: &TokeniserConfig, mode: CompressionMode, rng: &mut R) -> CompressionChoice {
    match mode {
        CompressionMode::Validate => CompressionChoice(cfg.validation_scales.clone()),
        CompressionMode::Train => {
            CompressionChoice(cfg.depth_scales.iter().map(|set| set[rng.random_range(0..set.len())]).collect())
        }
    }
}

/// Every combination of per-depth scales.
pub fn all_choices(cfg: &TokeniserConfig) -> Vec<CompressionChoice> {
    let mut out = vec![Vec::new()];
    for set in &cfg.depth_scales {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                set.iter().map(move |&p| {
                    let mut v = prefix.clone();
                    v.push(p);
                    v
                })
            })
            .collect();
    }
    out.into_iter().map(CompressionChoice).collect()
}

/// `(T', H', W')` after encoding, or the first depth at which the input is
/// incompatible.
pub fn latent_dims(cfg: &TokeniserConfig, t: usize, h: usize, w: usize, choice: &CompressionChoice) -> Result<(usize, usize, usize)> {
    if choice.0.len() != cfg.depth_scales.len() {
        return Err(arg_err!("choice has {} depths, tokeniser {}", choice.0.len(), cfg.depth_scales.len()));
    }
    let mut dims = (t, h, w);
    for (d, &scale) in choice.0.iter().enumerate() {
        if !cfg.depth_scales[d].contains(&scale) {
            return Err(arg_err!("scale {scale} is not selectable at depth {d}"));
        }
        dims = downsample_dims(dims.0, dims.1, dims.2, scale).map_err(|e| shape_err!("depth {d}: {e}"))?;
    }
    Ok(dims)
}

/// Per-sample, per-field RMS scales.
#[derive(Clone, Debug, PartialEq)]
pub struct NormaliserState<T> {
    /// `[batch][field]`, each at least [`RMS_FLOOR`].
    pub scales: Vec<Vec<T>>,
    pub groups: Vec<Range<usize>>,
}

fn batch_dims<T: Scalar>(x: &Tensor<T>, groups: &[Range<usize>]) -> Result<(usize, usize, usize)> {
    let (b, c, t, h, w) = x.dims5()?;
    if groups.last().map(|g| g.end) != Some(c) {
        return Err(shape_err!("field groups {groups:?} do not cover {c} channels"));
    }
    Ok((b, c, t * h * w))
}

/// RMS of each field of each sample over all frames and pixels.
pub fn rms_scales<T: Scalar>(x: &Tensor<T>, schema: &FieldSchema) -> Result<NormaliserState<T>> {
    let groups = schema.channel_groups();
    let (b, c, plane) = batch_dims(x, &groups)?;
    let xs = x.as_slice();
    let floor = T::lit(RMS_FLOOR);
    let scales = (0..b)
        .map(|bi| {
            groups
                .iter()
                .map(|g| {
                    let s = &xs[(bi * c + g.start) * plane..(bi * c + g.end) * plane];
                    let ms = s.iter().map(|&v| v * v).sum::<T>() / T::from_usize_lossy(s.len());
                    ms.sqrt().max(floor)
                })
                .collect()
        })
        .collect();
    Ok(NormaliserState { scales, groups })
}

fn apply_scales<T: Scalar>(x: &Tensor<T>, state: &NormaliserState<T>, divide: bool) -> Result<Tensor<T>> {
    let (b, c, plane) = batch_dims(x, &state.groups)?;
    if state.scales.len() != b {
        return Err(shape_err!("normaliser holds {} samples, batch has {b}", state.scales.len()));
    }
    let mut out = x.clone();
    let o = out.as_mut_slice();
    for bi in 0..b {
        for (g, &s) in state.groups.iter().zip(&state.scales[bi]) {
            for v in &mut o[(bi * c + g.start) * plane..(bi * c + g.end) * plane] {
                *v = if divide { *v / s } else { *v * s };
            }
        }
    }
    Ok(out)
}

/// Divides each field of each sample of a `(B, C, T, H, W)` batch by its
/// clamped RMS.
pub fn rms_normalise<T: Scalar>(x: &Tensor<T>, schema: &FieldSchema) -> Result<(Tensor<T>, NormaliserState<T>)> {
    let state = rms_scales(x, schema)?;
    Ok((apply_scales(x, &state, true)?, state))
}

/// Applies previously computed scales (e.g. context statistics to a target).
pub fn normalise_with<T: Scalar>(x: &Tensor<T>, state: &NormaliserState<T>) -> Result<Tensor<T>> {
    apply_scales(x, state, true)
}

pub fn denormalise<T: Scalar>(x: &Tensor<T>, state: &NormaliserState<T>) -> Result<Tensor<T>> {
    apply_scales(x, state, false)
}

/// Mean squared error over all elements.
pub fn tokeniser_loss<T: Scalar>(g: &mut Graph<T>, x: Var, xh: Var) -> Result<Var> {
    let d = g.sub(x, xh)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Architecture description; parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tokeniser {
    pub cfg: TokeniserConfig,
}

fn param<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(g.param(store, store.require(name)?))
}

impl Tokeniser {
    pub fn new(cfg: TokeniserConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        layout(&self.cfg)
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.add_all(&self.layout(), rng).map(|_| ())
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
        let w = param(g, s, &format!("{name}.weight"))?;
        let b = param(g, s, &format!("{name}.bias"))?;
        causal_conv3d(g, x, w, Some(b))
    }

    fn norm_act<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
        let gamma = param(g, s, &format!("{name}.gamma"))?;
        let beta = param(g, s, &format!("{name}.beta"))?;
        let y = g.group_norm_frame(x, gamma, beta, self.cfg.norm_groups)?;
        Ok(g.silu(y))
    }

    fn res_block<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
        let h = self.norm_act(g, s, x, &format!("{name}.norm1"))?;
        let h = self.conv(g, s, h, &format!("{name}.conv1"))?;
        let h = self.norm_act(g, s, h, &format!("{name}.norm2"))?;
        let h = self.conv(g, s, h, &format!("{name}.conv2"))?;
        g.add(x, h)
    }

    fn blocks<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, mut x: Var, stage: &str) -> Result<Var> {
        for b in 0..self.cfg.res_blocks {
            x = self.res_block(g, s, x, &format!("{stage}.block{b}"))?;
        }
        Ok(x)
    }

    fn base<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, name: &str, d: usize) -> Result<BaseKernel> {
        Ok(BaseKernel {
            weight: param(g, s, &format!("{name}.weight"))?,
            bias: Some(param(g, s, &format!("{name}.bias"))?),
            max_scale: self.cfg.base_scale(d),
        })
    }

    /// `(B, |active|, T, H, W)` to `(B, latent, T', H', W')`. `active` lists
    /// the field slots occupied by the input channels.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        choice: &CompressionChoice,
        active: &[usize],
    ) -> Result<Var> {
        let (_, c, t, h, w) = g.value(x).dims5()?;
        if c != active.len() {
            return Err(shape_err!("input has {c} channels but {} active fields", active.len()));
        }
        latent_dims(&self.cfg, t, h, w, choice)?;
        let hw = param(g, s, &format!("{ENCODER_HEAD}.weight"))?;
        let hb = param(g, s, &format!("{ENCODER_HEAD}.bias"))?;
        let mut y = adaptive_field_conv(g, x, hw, Some(hb), active, FieldAxis::Input)?;
        for (d, &scale) in choice.0.iter().enumerate() {
            let stage = format!("tokeniser.encoder.stage{d}");
            y = self.blocks(g, s, y, &stage)?;
            let base = self.base(g, s, &format!("{stage}.down"), d)?;
            y = flexible_downsample(g, y, &base, scale)?;
        }
        y = self.blocks(g, s, y, "tokeniser.encoder.mid")?;
        y = self.norm_act(g, s, y, "tokeniser.encoder.out_norm")?;
        self.conv(g, s, y, ENCODER_BOTTLENECK)
    }

    /// `(B, latent, T', H', W')` back to `(B, |active|, T, H, W)`.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        z: Var,
        choice: &CompressionChoice,
        active: &[usize],
    ) -> Result<Var> {
        let (_, c, ..) = g.value(z).dims5()?;
        if c != self.cfg.latent_channels {
            return Err(shape_err!("latent has {c} channels, tokeniser expects {}", self.cfg.latent_channels));
        }
        if choice.0.len() != 3 {
            return Err(arg_err!("choice has {} depths, tokeniser 3", choice.0.len()));
        }
        let mut y = self.conv(g, s, z, DECODER_BOTTLENECK)?;
        y = self.blocks(g, s, y, "tokeniser.decoder.mid")?;
        for d in (0..3).rev() {
            let stage = format!("tokeniser.decoder.stage{d}");
            let base = self.base(g, s, &format!("{stage}.up"), d)?;
            y = flexible_depth_to_space(g, y, &base, choice.0[d])?;
            y = self.blocks(g, s, y, &stage)?;
        }
        y = self.norm_act(g, s, y, "tokeniser.decoder.out_norm")?;
        let hw = param(g, s, &format!("{DECODER_HEAD}.weight"))?;
        let hb = param(g, s, &format!("{DECODER_HEAD}.bias"))?;
        adaptive_field_conv(g, y, hw, Some(hb), active, FieldAxis::Output)
    }

    /// Decoded shape check: errors unless decoding `z` under `choice`
    /// reproduces `(t, h, w)`.
    pub fn check_round_trip(&self, latent: (usize, usize, usize), target: (usize, usize, usize), choice: &CompressionChoice) -> Result<()> {
        let want = latent_dims(&self.cfg, target.0, target.1, target.2, choice)?;
        if want != latent {
            return Err(shape_err!("latent {latent:?} does not decode to {target:?} under {choice} (expects {want:?})"));
        }
        Ok(())
    }
}
