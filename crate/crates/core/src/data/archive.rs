//! Chunked trajectory archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FXTA" | version u32 | header_len u64 | header JSON {schema, meta}
//! chunk 0: f32[frames * channels * H * W]
//! ...
//! index: count u64, then per chunk: offset u64, frames u32, channels u32, h u32, w u32
//! trailer: index_offset u64 | magic "FXIX"
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetMeta, FieldSchema, Trajectory};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"FXTA";
const INDEX_MAGIC: &[u8; 4] = b"FXIX";
pub const ARCHIVE_VERSION: u32 = 1;
const INDEX_ENTRY_BYTES: u64 = 8 + 4 * 4;

#[derive(Serialize, Deserialize)]
struct Header {
    schema: FieldSchema,
    #[serde(default)]
    meta: Option<DatasetMeta>,
}

#[derive(Clone, Copy, Debug)]
struct ChunkEntry {
    offset: u64,
    frames: u32,
    channels: u32,
    h: u32,
    w: u32,
}

impl ChunkEntry {
    fn bytes(&self) -> u64 {
        4 * self.frames as u64 * self.channels as u64 * self.h as u64 * self.w as u64
    }
}

pub fn write_archive<T: Scalar>(
    path: &Path,
    schema: &FieldSchema,
    meta: Option<&DatasetMeta>,
    trajectories: &[Trajectory<T>],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = serde_json::to_vec(&Header { schema: schema.clone(), meta: meta.cloned() })?;
    out.write_all(ARCHIVE_MAGIC)?;
    out.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut offset = 4 + 4 + 8 + header.len() as u64;
    let mut index = Vec::with_capacity(trajectories.len());
    for (i, tr) in trajectories.iter().enumerate() {
        if let Some((field, detail)) = schema.first_mismatch(&tr.schema) {
            return Err(Error::SchemaMismatch { field, detail: format!("trajectory {i}: {detail}") });
        }
        let s = tr.frames.shape();
        let entry = ChunkEntry { offset, frames: s[0] as u32, channels: s[1] as u32, h: s[2] as u32, w: s[3] as u32 };
        for v in tr.frames.as_slice() {
            out.write_all(&(v.to_f64_lossless() as f32).to_le_bytes())?;
        }
        offset += entry.bytes();
        index.push(entry);
    }
    let index_offset = offset;
    out.write_all(&(index.len() as u64).to_le_bytes())?;
    for e in &index {
        out.write_all(&e.offset.to_le_bytes())?;
        for v in [e.frames, e.channels, e.h, e.w] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.write_all(&index_offset.to_le_bytes())?;
    out.write_all(INDEX_MAGIC)?;
    out.flush()?;
    Ok(())
}

/// Open archive with a validated header and chunk index.
pub struct ArchiveReader {
    path: PathBuf,
    pub schema: FieldSchema,
    pub meta: Option<DatasetMeta>,
    index: Vec<ChunkEntry>,
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptHeader(msg.into())
}

/// Opens an archive and checks it against `expected` (when given).
pub fn read_archive(path: &Path, expected: Option<&FieldSchema>) -> Result<ArchiveReader> {
    let mut f = BufReader::new(File::open(path)?);
    let file_len = f.get_ref().metadata()?.len();
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| corrupt("file shorter than magic"))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut f).map_err(|_| corrupt("missing version"))?;
    if version != ARCHIVE_VERSION {
        return Err(corrupt(format!("unsupported version {version} (expected {ARCHIVE_VERSION})")));
    }
    let hlen = read_u64(&mut f).map_err(|_| corrupt("missing header length"))?;
    if hlen > file_len {
        return Err(corrupt(format!("header length {hlen} exceeds file size {file_len}")));
    }
    let mut hbytes = vec![0u8; hlen as usize];
    f.read_exact(&mut hbytes).map_err(|_| corrupt("header JSON truncated"))?;
    let header: Header = serde_json::from_slice(&hbytes).map_err(|e| corrupt(format!("header JSON: {e}")))?;
    let data_start = 16 + hlen;

    if file_len < data_start + 12 {
        return Err(corrupt("missing trailer"));
    }
    f.seek(SeekFrom::Start(file_len - 12))?;
    let index_offset = read_u64(&mut f)?;
    let mut tail = [0u8; 4];
    f.read_exact(&mut tail)?;
    if &tail != INDEX_MAGIC || index_offset < data_start || index_offset + 8 > file_len - 12 {
        return Err(corrupt("chunk index trailer missing or invalid"));
    }
    f.seek(SeekFrom::Start(index_offset))?;
    let count = read_u64(&mut f)?;
    if index_offset + 8 + count * INDEX_ENTRY_BYTES != file_len - 12 {
        return Err(corrupt(format!("chunk index of {count} entries does not fit the file")));
    }
    let mut index = Vec::with_capacity(count as usize);
    for _ in 0..count {
        index.push(ChunkEntry {
            offset: read_u64(&mut f)?,
            frames: read_u32(&mut f)?,
            channels: read_u32(&mut f)?,
            h: read_u32(&mut f)?,
            w: read_u32(&mut f)?,
        });
    }
    for (i, e) in index.iter().enumerate() {
        if e.offset < data_start || e.offset + e.bytes() > index_offset {
            return Err(Error::TruncatedChunk { index: i, offset: e.offset, needed: e.bytes(), available: index_offset.saturating_sub(e.offset) });
        }
    }
    let reader = ArchiveReader { path: path.to_path_buf(), schema: header.schema, meta: header.meta, index };
    if let Some(exp) = expected {
        if let Some((field, detail)) = exp.first_mismatch(&reader.schema) {
            return Err(Error::SchemaMismatch { field, detail });
        }
    }
    for i in 0..reader.len() {
        reader.check_channels(i)?;
    }
    Ok(reader)
}

impl ArchiveReader {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn check_channels(&self, i: usize) -> Result<()> {
        let got = self.index[i].channels as usize;
        let want = self.schema.total_channels();
        if got == want {
            return Ok(());
        }
        let groups = self.schema.channel_groups();
        let field = if got < want {
            let k = groups.iter().position(|g| g.end > got).unwrap_or(0);
            self.schema.fields[k].name.clone()
        } else {
            self.schema.fields.last().map(|f| f.name.clone()).unwrap_or_default()
        };
        Err(Error::SchemaMismatch {
            field,
            detail: format!("chunk {i} has {got} channels, schema needs {want}"),
        })
    }

    /// Reads chunk `i`.
    pub fn trajectory<T: Scalar>(&self, i: usize) -> Result<Trajectory<T>> {
        let e = self.index[i];
        let mut f = BufReader::new(File::open(&self.path)?);
        let available = f.get_ref().metadata()?.len().saturating_sub(e.offset);
        f.seek(SeekFrom::Start(e.offset))?;
        let mut raw = vec![0u8; e.bytes() as usize];
        f.read_exact(&mut raw).map_err(|_| Error::TruncatedChunk { index: i, offset: e.offset, needed: e.bytes(), available })?;
        let data = raw.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)).collect();
        let shape = vec![e.frames as usize, e.channels as usize, e.h as usize, e.w as usize];
        Trajectory::new(self.schema.clone(), Tensor::new(shape, data)?)
    }

    /// All trajectories in index order.
    pub fn trajectories<T: Scalar>(&self) -> impl Iterator<Item = Result<Trajectory<T>>> + '_ {
        (0..self.len()).map(move |i| self.trajectory(i))
    }
}

/// Assembles per-field arrays from an external simulation archive into the
/// channel layout of `schema`.
///
/// Scalar fields are `(frames, H, W)`; vector and tensor fields carry their
/// components on axis 1: `(frames, k, H, W)` / `(frames, k*k, H, W)`. An
/// adapter for a foreign format (e.g. per-field HDF5 datasets) only needs to
/// load each field into such an array and call this function.
pub fn convert_field_arrays<T: Scalar>(schema: &FieldSchema, arrays: &BTreeMap<String, Tensor<T>>) -> Result<Trajectory<T>> {
    let mut parts = Vec::new();
    for f in &schema.fields {
        let a = arrays
            .get(&f.name)
            .ok_or_else(|| Error::SchemaMismatch { field: f.name.clone(), detail: "array missing".into() })?;
        let k = f.rank.channels();
        let shaped = match (a.shape(), k) {
            (&[fr, h, w], 1) => a.clone().reshape(&[fr, 1, h, w])?,
            (&[_, c, _, _], k) if c == k => a.clone(),
            (s, k) => {
                return Err(Error::SchemaMismatch {
                    field: f.name.clone(),
                    detail: format!("array shape {s:?} does not carry {k} component(s)"),
                })
            }
        };
        parts.push(shaped);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Trajectory::new(schema.clone(), Tensor::concat(&refs, 1)?)
}
