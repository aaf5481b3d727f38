use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// Number of spatial dimensions; fixes vector (k) and tensor (k^2) widths.
pub const SPATIAL_RANK: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldRank {
    Scalar,
    Vector,
    Tensor,
}

impl FieldRank {
    pub const fn channels(self) -> usize {
        match self {
            FieldRank::Scalar => 1,
            FieldRank::Vector => SPATIAL_RANK,
            FieldRank::Tensor => SPATIAL_RANK * SPATIAL_RANK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub rank: FieldRank,
}

/// Ordered physical fields of a dataset and their channel layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub fields: Vec<FieldSpec>,
}

impl FieldSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &fields {
            if !seen.insert(f.name.as_str()) {
                return Err(arg_err!("duplicate field name `{}`", f.name));
            }
        }
        if fields.is_empty() {
            return Err(arg_err!("schema has no fields"));
        }
        Ok(Self { fields })
    }

    pub fn scalar(name: &str) -> Self {
        Self { fields: vec![FieldSpec { name: name.into(), rank: FieldRank::Scalar }] }
    }

    /// Tracer plus a velocity vector.
    pub fn advection() -> Self {
        Self {
            fields: vec![
                FieldSpec { name: "tracer".into(), rank: FieldRank::Scalar },
                FieldSpec { name: "velocity".into(), rank: FieldRank::Vector },
            ],
        }
    }

    pub fn total_channels(&self) -> usize {
        self.fields.iter().map(|f| f.rank.channels()).sum()
    }

    /// Channel range of every field, in order.
    pub fn channel_groups(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.fields
            .iter()
            .map(|f| {
                let r = start..start + f.rank.channels();
                start = r.end;
                r
            })
            .collect()
    }

    /// Per-channel labels, e.g. `velocity_x`, `strain_xy`.
    pub fn channel_labels(&self) -> Vec<String> {
        const AXES: [&str; 2] = ["x", "y"];
        let mut out = Vec::new();
        for f in &self.fields {
            match f.rank {
                FieldRank::Scalar => out.push(f.name.clone()),
                FieldRank::Vector => out.extend(AXES.iter().map(|a| format!("{}_{a}", f.name))),
                FieldRank::Tensor => {
                    for a in AXES {
                        for b in AXES {
                            out.push(format!("{}_{a}{b}", f.name));
                        }
                    }
                }
            }
        }
        out
    }

    /// Channel indices of `self`'s fields inside a wider `union` schema.
    pub fn channels_within(&self, union: &FieldSchema) -> Result<Vec<usize>> {
        let groups = union.channel_groups();
        let mut out = Vec::new();
        for f in &self.fields {
            let (i, uf) = union
                .fields
                .iter()
                .enumerate()
                .find(|(_, u)| u.name == f.name)
                .ok_or_else(|| Error::SchemaMismatch { field: f.name.clone(), detail: "absent from union schema".into() })?;
            if uf.rank != f.rank {
                return Err(Error::SchemaMismatch {
                    field: f.name.clone(),
                    detail: format!("rank {:?} vs {:?} in union schema", f.rank, uf.rank),
                });
            }
            out.extend(groups[i].clone());
        }
        Ok(out)
    }

    /// First field at which `self` and `other` disagree, if any.
    pub fn first_mismatch(&self, other: &FieldSchema) -> Option<(String, String)> {
        for i in 0..self.fields.len().max(other.fields.len()) {
            match (self.fields.get(i), other.fields.get(i)) {
                (Some(a), Some(b)) if a == b => continue,
                (Some(a), Some(b)) => {
                    return Some((a.name.clone(), format!("expected {:?} `{}`, found {:?} `{}`", a.rank, a.name, b.rank, b.name)))
                }
                (Some(a), None) => return Some((a.name.clone(), "missing".into())),
                (None, Some(b)) => return Some((b.name.clone(), "unexpected extra field".into())),
                (None, None) => unreachable!(),
            }
        }
        None
    }
}

/// Descriptive metadata for a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub grid: (usize, usize),
    pub trajectory_len: usize,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}
