//! Field schemas, synthetic generators, sequence windowing and the on-disk
//! trajectory archive.

mod archive;
mod generators;
mod schema;

use std::collections::BTreeMap;

pub use archive::{convert_field_arrays, read_archive, write_archive, ArchiveReader, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use generators::{
    gaussian_field, gen_advection_trajectory, gen_gaussian_field_trajectory, shift_frame, ADVECTION_TRACER_SLOPE,
};
pub use schema::{DatasetMeta, FieldRank, FieldSchema, FieldSpec, SPATIAL_RANK};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Frames per training sequence: 9 context frames plus 1 target.
pub const SEQUENCE_LEN: usize = 10;
/// Context frames fed to the tokeniser / used to predict the next frame.
pub const CONTEXT_LEN: usize = 9;

/// A simulated trajectory stored as `(frames, channels, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub schema: FieldSchema,
    pub frames: Tensor<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(schema: FieldSchema, frames: Tensor<T>) -> Result<Self> {
        match frames.shape() {
            &[_, c, _, _] if c == schema.total_channels() => Ok(Self { schema, frames }),
            s => Err(shape_err!("trajectory {s:?} does not match schema with {} channels", schema.total_channels())),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }

    /// Frame `t` as `(C, H, W)`.
    pub fn frame(&self, t: usize) -> Result<Tensor<T>> {
        let s = self.frames.shape().to_vec();
        self.frames.narrow(0, t, 1)?.reshape(&s[1..])
    }

    /// Frames `[start, start + len)` as a `(C, len, H, W)` sequence.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        self.frames.narrow(0, start, len)?.permute(&[1, 0, 2, 3])
    }
}

/// Result of windowing a set of trajectories.
#[derive(Clone, Debug)]
pub struct Windows<T> {
    pub sequences: Vec<Tensor<T>>,
    /// Trajectories shorter than one window.
    pub short_trajectories: usize,
}

/// Consecutive `length`-frame windows starting every `stride` frames.
pub fn window_sequences<T: Scalar>(trajectories: &[Trajectory<T>], length: usize, stride: usize) -> Result<Windows<T>> {
    let mut out = Windows { sequences: Vec::new(), short_trajectories: 0 };
    let stride = stride.max(1);
    for tr in trajectories {
        if tr.len() < length {
            out.short_trajectories += 1;
            continue;
        }
        let mut start = 0;
        while start + length <= tr.len() {
            out.sequences.push(tr.window(start, length)?);
            start += stride;
        }
    }
    Ok(out)
}

/// Windowed sequences of one dataset, with the channel slots they occupy in
/// the tokeniser's full field set.
#[derive(Clone, Debug)]
pub struct SequenceDataset<T> {
    pub name: String,
    pub schema: FieldSchema,
    /// Indices of this dataset's channels in the tokeniser's `c_total` slots.
    pub active: Vec<usize>,
    /// `(C, L, H, W)` sequences.
    pub sequences: Vec<Tensor<T>>,
    pub tags: BTreeMap<String, String>,
}

impl<T: Scalar> SequenceDataset<T> {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Stacks the selected sequences into `(B, C, L, H, W)`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = indices
            .iter()
            .map(|&i| {
                let s = &self.sequences[i];
                let mut shape = vec![1];
                shape.extend_from_slice(s.shape());
                s.clone().reshape(&shape)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        let mk = |n| gen_advection_trajectory::<f32>((8, 8), (1, 0), n, 0).unwrap();
        let one = window_sequences(&[mk(10)], 10, 10).unwrap();
        assert_eq!(one.sequences.len(), 1);
        for len in [9usize, 10, 19, 20, 27, 35] {
            let w = window_sequences(&[mk(len)], 10, 10).unwrap();
            assert_eq!(w.sequences.len(), len / 10, "length {len}");
        }
        let short = window_sequences(&[mk(9)], 10, 10).unwrap();
        assert!(short.sequences.is_empty());
        assert_eq!(short.short_trajectories, 1);
    }

    #[test]
    fn window_layout_is_channel_major() {
        let tr = gen_advection_trajectory::<f64>((8, 8), (1, 1), 12, 3).unwrap();
        let w = tr.window(2, 10).unwrap();
        assert_eq!(w.shape(), &[3, 10, 8, 8]);
        assert_eq!(w.get(&[0, 4, 3, 5]), tr.frames.get(&[6, 0, 3, 5]));
    }
}
