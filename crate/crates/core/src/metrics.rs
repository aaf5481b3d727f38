//! Spatial and spectral error metrics.
//!
//! `vrmse` is the RMSE normalised by the population standard deviation of
//! the target frame. The spectral metrics bin 2-d Fourier modes by rounded
//! wavenumber magnitude; with the unitary FFT used here
//! `(1/N²) Σ_k |B_k| P(k)` equals the pixel-space MSE exactly.

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::data::{FieldSchema, Trajectory, CONTEXT_LEN};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::spectral::{fft2, wavenumber_bins};
use crate::tensor::Tensor;

/// Targets with a standard deviation below this are rejected by [`vrmse`].
pub const DEGENERATE_STD: f64 = 1e-12;
/// Bins whose signal power is below this are left out of NEPS band means.
pub const NEPS_MIN_SIGNAL: f64 = 1e-20;
/// Headroom over the `N eps^2` roundoff power of an FFT.
pub const NEPS_ROUNDOFF_FACTOR: f64 = 100.0;
/// Autoregressive steps in the rollout protocol.
pub const ROLLOUT_STEPS: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    Mid,
    High,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Low, Band::Mid, Band::High];

    pub fn name(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::Mid => "mid",
            Band::High => "high",
        }
    }
}

/// Wavenumber bins of an `h x w` grid split into low/mid/high bands.
#[derive(Clone, Debug)]
pub struct BandPartition {
    h: usize,
    w: usize,
    cell_bin: Vec<usize>,
    multiplicity: Vec<usize>,
    thresholds: (f64, f64),
}

impl BandPartition {
    /// Equal-width thirds of `[0, k_max]`; the DC bin is in the low band.
    pub fn new(h: usize, w: usize) -> Result<Self> {
        let cell_bin = wavenumber_bins(h, w);
        let k_max = cell_bin.iter().copied().max().unwrap_or(0) as f64;
        Self::with_thresholds(h, w, (k_max / 3.0, 2.0 * k_max / 3.0), cell_bin)
    }

    /// Band `low` holds bins `k <= t1`, `mid` holds `t1 < k <= t2`, `high`
    /// the rest.
    pub fn custom(h: usize, w: usize, t1: f64, t2: f64) -> Result<Self> {
        Self::with_thresholds(h, w, (t1, t2), wavenumber_bins(h, w))
    }

    fn with_thresholds(h: usize, w: usize, thresholds: (f64, f64), cell_bin: Vec<usize>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(arg_err!("empty grid ({h}, {w})"));
        }
        if !(thresholds.0 <= thresholds.1) {
            return Err(arg_err!("band thresholds {thresholds:?} are not ordered"));
        }
        let k_max = cell_bin.iter().copied().max().unwrap_or(0);
        let mut multiplicity = vec![0; k_max + 1];
        for &b in &cell_bin {
            multiplicity[b] += 1;
        }
        Ok(Self { h, w, cell_bin, multiplicity, thresholds })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn num_bins(&self) -> usize {
        self.multiplicity.len()
    }

    pub fn k_max(&self) -> usize {
        self.multiplicity.len() - 1
    }

    pub fn thresholds(&self) -> (f64, f64) {
        self.thresholds
    }

    /// `|B_k|`: number of Fourier modes in bin `k`.
    pub fn multiplicity(&self, k: usize) -> usize {
        self.multiplicity[k]
    }

    /// Bin of grid cell `i` (row-major).
    pub fn bin_of_cell(&self, i: usize) -> usize {
        self.cell_bin[i]
    }

    pub fn band_of(&self, k: usize) -> Band {
        let k = k as f64;
        if k <= self.thresholds.0 {
            Band::Low
        } else if k <= self.thresholds.1 {
            Band::Mid
        } else {
            Band::High
        }
    }
}

fn check_pair<T>(x: &[T], xh: &[T]) -> Result<()> {
    if x.len() != xh.len() {
        return Err(shape_err!("target has {} values, prediction {}", x.len(), xh.len()));
    }
    if x.is_empty() {
        return Err(arg_err!("empty frame"));
    }
    Ok(())
}

/// RMSE / σ_x over all values of one frame of one field. Accumulates in f64,
/// so a constant f32 frame has a standard deviation of exactly zero.
pub fn vrmse<T: Scalar>(x: &[T], xh: &[T]) -> Result<T> {
    check_pair(x, xh)?;
    let n = x.len() as f64;
    let xs = || x.iter().map(|v| v.to_f64_lossless());
    let mean = xs().sum::<f64>() / n;
    let std = (xs().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std < DEGENERATE_STD {
        return Err(Error::DegenerateTarget { std, threshold: DEGENERATE_STD });
    }
    let mse = xs().zip(xh).map(|(a, b)| (a - b.to_f64_lossless()).powi(2)).sum::<f64>() / n;
    Ok(T::lit(mse.sqrt() / std))
}

/// Mean squared Fourier magnitude per bin of a real `h x w` field, under
/// the unitary 2-d DFT. Empty bins are `None`.
pub fn power_spectrum<T: Scalar>(field: &[T], partition: &BandPartition) -> Result<Vec<Option<T>>> {
    let (h, w) = partition.grid();
    if field.len() != h * w {
        return Err(shape_err!("field has {} values, partition grid is {h}x{w}", field.len()));
    }
    let mut buf: Vec<Complex<T>> = field.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2(&mut buf, h, w, false, true);
    let mut sums = vec![T::zero(); partition.num_bins()];
    for (i, c) in buf.iter().enumerate() {
        sums[partition.bin_of_cell(i)] = sums[partition.bin_of_cell(i)] + c.norm_sqr();
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            let m = partition.multiplicity(k);
            (m > 0).then(|| s / T::from_usize_lossy(m))
        })
        .collect())
}

/// `P_{x - x̂}(k)` for every wavenumber bin.
pub fn residual_power_spectrum<T: Scalar>(x: &[T], xh: &[T], partition: &BandPartition) -> Result<Vec<Option<T>>> {
    check_pair(x, xh)?;
    let r: Vec<T> = x.iter().zip(xh).map(|(&a, &b)| a - b).collect();
    power_spectrum(&r, partition)
}

/// Power below which a bin of `x` counts as empty: the absolute floor, or
/// the FFT roundoff level `N eps^2` relative to the field's mean power.
pub fn neps_signal_floor<T: Scalar>(x: &[T]) -> f64 {
    let n = x.len().max(1) as f64;
    let mean_power = x.iter().map(|v| v.to_f64_lossless().powi(2)).sum::<f64>() / n;
    let eps = T::epsilon().to_f64_lossless();
    NEPS_MIN_SIGNAL.max(NEPS_ROUNDOFF_FACTOR * n * eps * eps * mean_power)
}

/// Per-bin ratio of residual to signal power, `None` where the bin is empty
/// or carries no signal above [`neps_signal_floor`].
pub fn neps_per_bin<T: Scalar>(x: &[T], xh: &[T], partition: &BandPartition) -> Result<Vec<Option<T>>> {
    let pr = residual_power_spectrum(x, xh, partition)?;
    let px = power_spectrum(x, partition)?;
    let floor = neps_signal_floor(x);
    Ok(pr
        .into_iter()
        .zip(px)
        .map(|(r, s)| match (r, s) {
            (Some(r), Some(s)) if s.to_f64_lossless() >= floor => Some(r / s),
            _ => None,
        })
        .collect())
}

/// Band means of the per-bin NEPS ratio: `[low, mid, high]`. A band with no
/// signal-carrying bin is `None`.
pub fn neps<T: Scalar>(x: &[T], xh: &[T], partition: &BandPartition) -> Result<[Option<T>; 3]> {
    let ratios = neps_per_bin(x, xh, partition)?;
    let mut sum = [T::zero(); 3];
    let mut count = [0usize; 3];
    for (k, r) in ratios.into_iter().enumerate() {
        if let Some(r) = r {
            let b = partition.band_of(k) as usize;
            sum[b] = sum[b] + r;
            count[b] += 1;
        }
    }
    Ok([0, 1, 2].map(|b| (count[b] > 0).then(|| sum[b] / T::from_usize_lossy(count[b]))))
}

/// Metrics of one field channel at one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFieldMetrics {
    pub field: String,
    pub frame: usize,
    /// `None` for a degenerate (constant) target.
    pub vrmse: Option<f64>,
    pub neps: [Option<f64>; 3],
}

/// Per-frame, per-field metrics and their means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub vrmse: Option<f64>,
    pub neps_low: Option<f64>,
    pub neps_mid: Option<f64>,
    pub neps_high: Option<f64>,
    pub entries: Vec<FrameFieldMetrics>,
    /// Entries left out of the VRMSE mean because the target was constant.
    pub degenerate: usize,
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = vals.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    pub fn from_entries(entries: Vec<FrameFieldMetrics>) -> Self {
        let degenerate = entries.iter().filter(|e| e.vrmse.is_none()).count();
        Self {
            vrmse: mean_defined(entries.iter().map(|e| e.vrmse)),
            neps_low: mean_defined(entries.iter().map(|e| e.neps[0])),
            neps_mid: mean_defined(entries.iter().map(|e| e.neps[1])),
            neps_high: mean_defined(entries.iter().map(|e| e.neps[2])),
            entries,
            degenerate,
        }
    }

    /// Aggregate rows in the long CSV layout `step,split,field,frame,metric,value`.
    pub fn summary_rows(&self, step: usize, split: &str) -> Vec<CsvRow> {
        let mut rows = Vec::new();
        for (name, v) in [
            ("vrmse", self.vrmse),
            ("neps_low", self.neps_low),
            ("neps_mid", self.neps_mid),
            ("neps_high", self.neps_high),
        ] {
            if let Some(v) = v {
                rows.push(CsvRow::new(step, split, "all", None, name, v));
            }
        }
        rows
    }

    /// Aggregate rows followed by every per-frame, per-field value.
    pub fn csv_rows(&self, step: usize, split: &str) -> Vec<CsvRow> {
        let mut rows = self.summary_rows(step, split);
        for e in &self.entries {
            let vals = [("vrmse", e.vrmse), ("neps_low", e.neps[0]), ("neps_mid", e.neps[1]), ("neps_high", e.neps[2])];
            for (name, v) in vals {
                if let Some(v) = v {
                    rows.push(CsvRow::new(step, split, &e.field, Some(e.frame), name, v));
                }
            }
        }
        rows
    }
}

/// One row of the long-format metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub step: usize,
    pub split: String,
    pub field: String,
    /// `None` for aggregates, written as `all`.
    pub frame: Option<usize>,
    pub metric: String,
    pub value: f64,
}

pub const CSV_HEADER: &str = "step,split,field,frame,metric,value";

impl CsvRow {
    pub fn new(step: usize, split: &str, field: &str, frame: Option<usize>, metric: &str, value: f64) -> Self {
        Self { step, split: split.into(), field: field.into(), frame, metric: metric.into(), value }
    }

    /// Formats with a round-trippable float representation.
    pub fn to_line(&self) -> String {
        let frame = self.frame.map_or_else(|| "all".to_string(), |f| f.to_string());
        format!("{},{},{},{},{},{:e}", self.step, self.split, self.field, frame, self.metric, self.value)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let p: Vec<&str> = line.trim().split(',').collect();
        if p.len() != 6 {
            return Err(arg_err!("metrics row needs 6 columns: {line:?}"));
        }
        let bad = |what: &str| arg_err!("bad {what} in metrics row {line:?}");
        Ok(Self {
            step: p[0].parse().map_err(|_| bad("step"))?,
            split: p[1].into(),
            field: p[2].into(),
            frame: if p[3] == "all" { None } else { Some(p[3].parse().map_err(|_| bad("frame"))?) },
            metric: p[4].into(),
            value: p[5].parse().map_err(|_| bad("value"))?,
        })
    }
}

/// Metrics of a prediction against a target, both `(C, F, H, W)` with
/// channel labels from `schema`.
pub fn evaluate<T: Scalar>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    schema: &FieldSchema,
    partition: &BandPartition,
) -> Result<MetricReport> {
    if target.shape() != pred.shape() {
        return Err(shape_err!("target {:?} vs prediction {:?}", target.shape(), pred.shape()));
    }
    let (c, f, h, w) = match target.shape() {
        &[c, f, h, w] => (c, f, h, w),
        s => return Err(shape_err!("expected (C, F, H, W), got {s:?}")),
    };
    let labels = schema.channel_labels();
    if labels.len() != c {
        return Err(Error::SchemaMismatch {
            field: schema.fields.last().map(|f| f.name.clone()).unwrap_or_default(),
            detail: format!("schema has {} channels, data {c}", labels.len()),
        });
    }
    let plane = h * w;
    let mut entries = Vec::with_capacity(c * f);
    for (ch, label) in labels.iter().enumerate() {
        for fr in 0..f {
            let o = (ch * f + fr) * plane;
            let x = &target.as_slice()[o..o + plane];
            let xh = &pred.as_slice()[o..o + plane];
            let v = match vrmse(x, xh) {
                Ok(v) => Some(v.to_f64_lossless()),
                Err(Error::DegenerateTarget { .. }) => None,
                Err(e) => return Err(e),
            };
            let n = neps(x, xh, partition)?.map(|b| b.map(|v| v.to_f64_lossless()));
            entries.push(FrameFieldMetrics { field: label.clone(), frame: fr, vrmse: v, neps: n });
        }
    }
    Ok(MetricReport::from_entries(entries))
}

/// Produces the next frame `(C, H, W)` from a `(C, L, H, W)` context.
pub trait NextFramePredictor<T: Scalar> {
    fn predict_next(&mut self, context: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar, F: FnMut(&Tensor<T>) -> Result<Tensor<T>>> NextFramePredictor<T> for F {
    fn predict_next(&mut self, context: &Tensor<T>) -> Result<Tensor<T>> {
        self(context)
    }
}

/// VRMSE averaged over a range of rollout steps (1-based, inclusive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonBucket {
    pub label: String,
    pub first: usize,
    pub last: usize,
    pub vrmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub buckets: Vec<HorizonBucket>,
    /// Mean VRMSE at each step `1..=steps` over trajectories and fields.
    pub per_step: Vec<Option<f64>>,
    pub evaluated: usize,
    /// Trajectories too short for context plus all steps.
    pub rejected: usize,
}

/// Bucket ranges `(first, last)` over steps `1..=18`.
pub const HORIZON_BUCKETS: [(usize, usize); 3] = [(1, 2), (3, 6), (7, 18)];

/// Rolls the model out from 9 ground-truth frames, feeding predictions back,
/// and averages VRMSE per horizon bucket.
pub fn rollout_evaluate<T: Scalar, P: NextFramePredictor<T> + ?Sized>(
    model: &mut P,
    trajectories: &[Trajectory<T>],
    steps: usize,
) -> Result<RolloutReport> {
    let need = CONTEXT_LEN + steps;
    let mut sums = vec![(0.0, 0usize); steps];
    let mut rejected = 0;
    let mut evaluated = 0;
    for tr in trajectories {
        if tr.len() < need {
            rejected += 1;
            continue;
        }
        evaluated += 1;
        let mut context = tr.window(0, CONTEXT_LEN)?;
        let (c, h, w) = match context.shape() {
            &[c, _, h, w] => (c, h, w),
            s => return Err(shape_err!("trajectory window {s:?} is not (C, L, H, W)")),
        };
        for s in 0..steps {
            let pred = model.predict_next(&context)?;
            if pred.shape() != [c, h, w] {
                return Err(shape_err!("predictor returned {:?}, expected {:?}", pred.shape(), [c, h, w]));
            }
            let truth = tr.frame(CONTEXT_LEN + s)?;
            let plane = h * w;
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                match vrmse(&truth.as_slice()[r.clone()], &pred.as_slice()[r]) {
                    Ok(v) => {
                        sums[s].0 += v.to_f64_lossless();
                        sums[s].1 += 1;
                    }
                    Err(Error::DegenerateTarget { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            let next = pred.reshape(&[c, 1, h, w])?;
            let kept = context.narrow(1, 1, CONTEXT_LEN - 1)?;
            context = Tensor::concat(&[&kept, &next], 1)?;
        }
    }
    let per_step: Vec<Option<f64>> = sums.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect();
    let buckets = HORIZON_BUCKETS
        .iter()
        .filter(|&&(first, _)| first <= steps)
        .map(|&(first, last)| {
            let last = last.min(steps);
            HorizonBucket {
                label: format!("steps {first}-{last}"),
                first,
                last,
                vrmse: mean_defined(per_step[first - 1..last].iter().copied()),
            }
        })
        .collect();
    Ok(RolloutReport { buckets, per_step, evaluated, rejected })
}
