//! UNF1 checkpoint codec.
//!
//! Layout (little-endian): magic `UNF1`, format version `u32`, tensor count
//! `u32`, then per tensor: name length `u16`, UTF-8 name, rank `u8`, each
//! dimension as `u64`, `f32` payload in row-major order.
//!
//! Training checkpoints also carry `optim.m.<name>` / `optim.v.<name>`
//! moments and `state.*` entries. Integers in `state.*` are split into four
//! 16-bit limbs (least significant first) so they survive the `f32` payload
//! exactly.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{ParamKind, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"UNF1";
pub const VERSION: u32 = 1;

pub const STEP: &str = "state.step";
pub const SEED: &str = "state.seed";
pub const BEST_MIOU: &str = "state.best_miou";
const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a UNF1 checkpoint (magic {found:?})")]
    Magic { found: Vec<u8> },
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: String },
    #[error("tensor name at byte {offset} is not UTF-8")]
    Name { offset: usize },
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("duplicate tensor {0}")]
    Duplicate(String),
    #[error("unknown tensor {0} (use --partial to skip)")]
    Unknown(String),
    #[error("checkpoint lacks tensor {0}")]
    Missing(String),
    #[error("tensor {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

type PendingMoments<T> = (usize, Option<Tensor<T>>, Option<Tensor<T>>);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                what: what.to_string(),
            }),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn u64_to_limbs(v: u64) -> Tensor<f32> {
    Tensor::from_fn(&[4], |i| ((v >> (16 * i)) & 0xffff) as f32)
}

pub fn limbs_to_u64(t: &Tensor<f32>) -> Option<u64> {
    if t.shape() != [4] {
        return None;
    }
    let mut v = 0u64;
    for (i, &limb) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&limb) || limb.fract() != 0.0 {
            return None;
        }
        v |= (limb as u64) << (16 * i);
    }
    Some(v)
}

/// Outcome of applying a checkpoint to a parameter store.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    /// File tensors with no matching model entry (partial loads only).
    pub skipped: usize,
    /// Model entries absent from the file (partial loads only).
    pub missing: usize,
    pub moments_loaded: bool,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    /// Parameters and running statistics of `store`, plus optimizer moments
    /// when `with_moments` is set.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, with_moments: bool) -> Self {
        let mut ck = Checkpoint::default();
        for (_, p) in store.iter() {
            ck.push(p.name.clone(), p.value().cast());
        }
        if with_moments {
            for (_, p) in store.iter() {
                if let Some((m, v)) = p.moments() {
                    ck.push(format!("{MOMENT_M}{}", p.name), m.cast());
                    ck.push(format!("{MOMENT_V}{}", p.name), v.cast());
                }
            }
        }
        ck
    }

    /// Copies matching tensors into `store`. Outside partial mode every
    /// non-`state.*` file tensor must match a model entry, and every model
    /// entry must be present.
    pub fn apply_to<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        partial: bool,
    ) -> Result<LoadReport, CheckpointError> {
        let mut report = LoadReport::default();
        let mut seen = vec![false; store.len()];
        let mut moments: Vec<PendingMoments<T>> = Vec::new();
        // Validate everything before touching the store.
        let mut updates = Vec::new();
        for (name, t) in &self.tensors {
            if name.starts_with("state.") {
                continue;
            }
            let (target, slot) = if let Some(rest) = name.strip_prefix(MOMENT_M) {
                (rest, 1)
            } else if let Some(rest) = name.strip_prefix(MOMENT_V) {
                (rest, 2)
            } else {
                (name.as_str(), 0)
            };
            let Some(id) = store.id(target) else {
                if partial {
                    report.skipped += 1;
                    continue;
                }
                return Err(CheckpointError::Unknown(name.clone()));
            };
            let expected = store.value(id).shape();
            if t.shape() != expected {
                return Err(CheckpointError::Shape {
                    name: name.clone(),
                    expected: expected.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            if slot == 0 {
                seen[id.0] = true;
                updates.push((id, t.cast::<T>()));
            } else {
                let entry = match moments.iter_mut().find(|(i, _, _)| *i == id.0) {
                    Some(e) => e,
                    None => {
                        moments.push((id.0, None, None));
                        moments.last_mut().expect("just pushed")
                    }
                };
                if slot == 1 {
                    entry.1 = Some(t.cast());
                } else {
                    entry.2 = Some(t.cast());
                }
            }
        }
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            if !seen[i] {
                if !partial {
                    return Err(CheckpointError::Missing(name.clone()));
                }
                report.missing += 1;
            }
        }
        for (id, value) in updates {
            *store.value_mut(id) = value;
            report.loaded += 1;
        }
        for (i, m, v) in moments {
            let id = crate::tensor::ParamId(i);
            match (m, v) {
                (Some(m), Some(v)) if store.get(id).kind == ParamKind::Trainable => {
                    store
                        .get_mut(id)
                        .set_moments(m, v)
                        .map_err(|_| CheckpointError::Missing(format!("{MOMENT_V}{}", names[i])))?;
                    report.moments_loaded = true;
                }
                (m, _) => {
                    let half = if m.is_some() { MOMENT_V } else { MOMENT_M };
                    return Err(CheckpointError::Missing(format!("{half}{}", names[i])));
                }
            }
        }
        Ok(report)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic {
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32("tensor count")? as usize;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CheckpointError::Name { offset: at })?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u64("dimension")? as usize;
                numel = numel.saturating_mul(d);
                shape.push(d);
            }
            let payload = r.take(numel.saturating_mul(4), &format!("payload of {name}"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if ck.get(&name).is_some() {
                return Err(CheckpointError::Duplicate(name));
            }
            let t = Tensor::from_vec(&shape, data).expect("payload length matches shape");
            ck.tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }
}
