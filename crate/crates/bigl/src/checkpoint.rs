//! Binary checkpoint container ("BIGL-CKPT-1").
//!
//! One file holds one network's parameters (and optionally its optimizer
//! state under the reserved `opt.` prefix) as named f64 tensors, plus the
//! training position and a hash of the configuration that produced it.
//! Writes are atomic (temp file then rename); the parser enforces hard size
//! caps so corrupt files cannot trigger huge allocations.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{BiglError, Result};
use crate::nn::params::ParamSet;
use crate::nn::Scalar;

pub const MAGIC: &[u8; 12] = b"BIGL-CKPT-1\0";

const MAX_STR: usize = 256;
const MAX_ENTRIES: usize = 16_384;
const MAX_NDIM: usize = 8;
const MAX_DIM: usize = 1 << 24;
/// Total element cap across all entries (512 MiB of f64).
const MAX_TOTAL_ELEMS: usize = 1 << 26;

/// Reserved name prefix for optimizer-state entries.
pub const OPT_PREFIX: &str = "opt.";

#[derive(Clone, Debug, PartialEq)]
pub struct CkptEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Network family ("generator", "image_disc", "segnet", "disc").
    pub kind: String,
    /// Instance tag within the family ("s2t", "feat_s", ...).
    pub tag: String,
    pub iteration: u64,
    pub epoch: u64,
    /// Hex content hash of the training configuration.
    pub config_hash: String,
    pub entries: Vec<CkptEntry>,
}

fn corrupt(msg: impl Into<String>) -> BiglError {
    BiglError::IngestError(format!("checkpoint: {}", msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16()? as usize;
        if len > MAX_STR {
            return Err(corrupt(format!("{what} length {len} exceeds cap {MAX_STR}")));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| corrupt(format!("{what} is not utf-8")))
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    assert!(s.len() <= MAX_STR, "string field too long");
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_string(&mut out, &self.kind);
        put_string(&mut out, &self.tag);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        put_string(&mut out, &self.config_hash);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_string(&mut out, &e.name);
            out.push(e.shape.len() as u8);
            let mut elems = 1usize;
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
                elems *= d;
            }
            assert_eq!(elems, e.values.len(), "entry {} shape/value mismatch", e.name);
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let kind = r.string("kind")?;
        let tag = r.string("tag")?;
        let iteration = r.u64()?;
        let epoch = r.u64()?;
        let config_hash = r.string("config hash")?;
        let n_entries = r.u32()? as usize;
        if n_entries > MAX_ENTRIES {
            return Err(corrupt(format!("{n_entries} entries exceeds cap {MAX_ENTRIES}")));
        }
        let mut entries = Vec::with_capacity(n_entries.min(1024));
        let mut total = 0usize;
        for _ in 0..n_entries {
            let name = r.string("entry name")?;
            let ndim = r.u8()? as usize;
            if ndim > MAX_NDIM {
                return Err(corrupt(format!("entry {name}: {ndim} dims exceeds cap {MAX_NDIM}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut elems = 1usize;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                if d > MAX_DIM {
                    return Err(corrupt(format!("entry {name}: dim {d} exceeds cap {MAX_DIM}")));
                }
                elems = elems
                    .checked_mul(d)
                    .ok_or_else(|| corrupt(format!("entry {name}: element overflow")))?;
                shape.push(d);
            }
            total += elems;
            if total > MAX_TOTAL_ELEMS {
                return Err(corrupt(format!("total elements exceed cap {MAX_TOTAL_ELEMS}")));
            }
            let raw = r.take(elems * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(CkptEntry { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { kind, tag, iteration, epoch, config_hash, entries })
    }

    /// Write atomically: temp file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().ok_or_else(|| {
            BiglError::CheckpointWriteError(format!("{} has no parent directory", path.display()))
        })?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        let write = || -> std::io::Result<()> {
            std::fs::write(&tmp, self.encode())?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            BiglError::CheckpointWriteError(format!("{}: {e}", path.display()))
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| corrupt(format!("cannot read {}: {e}", path.display())))?;
        Self::decode(&bytes).map_err(|e| corrupt(format!("{}: {e}", path.display())))
    }

    /// Collect a parameter set into entries (appended to any already
    /// present).
    pub fn push_params<F: Scalar>(&mut self, params: &ParamSet<F>, prefix: &str) {
        for (name, value) in params.iter() {
            self.entries.push(CkptEntry {
                name: format!("{prefix}{name}"),
                shape: value.shape().to_vec(),
                values: value.iter().map(|&v| v.to_f64()).collect(),
            });
        }
    }

    /// Restore a parameter set from the non-optimizer entries under
    /// `prefix`. Every parameter must be present with a matching shape.
    pub fn restore_params<F: Scalar>(&self, params: &mut ParamSet<F>, prefix: &str) -> Result<()> {
        for (name, value) in params.iter_mut() {
            let full = format!("{prefix}{name}");
            let entry = self
                .entries
                .iter()
                .find(|e| e.name == full)
                .ok_or_else(|| corrupt(format!("missing entry {full}")))?;
            if entry.shape != value.shape() {
                return Err(corrupt(format!(
                    "entry {full}: shape {:?} does not match parameter {:?}",
                    entry.shape,
                    value.shape()
                )));
            }
            let arr = ArrayD::from_shape_vec(
                IxDyn(&entry.shape),
                entry.values.iter().map(|&v| F::from_f64(v)).collect(),
            )
            .unwrap();
            value.assign(&arr);
        }
        Ok(())
    }

    /// Append optimizer buffers in parameter order under
    /// `opt.<label>.<index>`.
    pub fn push_opt_buffers<F: Scalar>(&mut self, label: &str, buffers: &[ArrayD<F>]) {
        for (i, b) in buffers.iter().enumerate() {
            self.entries.push(CkptEntry {
                name: format!("{OPT_PREFIX}{label}.{i}"),
                shape: b.shape().to_vec(),
                values: b.iter().map(|&v| v.to_f64()).collect(),
            });
        }
    }

    /// Read back optimizer buffers stored under `opt.<label>.<index>`;
    /// an absent label yields an empty vector.
    pub fn opt_buffers<F: Scalar>(&self, label: &str) -> Result<Vec<ArrayD<F>>> {
        let mut out = Vec::new();
        loop {
            let name = format!("{OPT_PREFIX}{label}.{}", out.len());
            match self.entries.iter().find(|e| e.name == name) {
                None => break,
                Some(e) => {
                    let arr = ArrayD::from_shape_vec(
                        IxDyn(&e.shape),
                        e.values.iter().map(|&v| F::from_f64(v)).collect(),
                    )
                    .map_err(|_| corrupt(format!("entry {name}: bad shape")))?;
                    out.push(arr);
                }
            }
        }
        Ok(out)
    }

    /// Scalar metadata entry (e.g. an optimizer step counter).
    pub fn push_scalar(&mut self, name: &str, value: f64) {
        self.entries.push(CkptEntry { name: name.to_string(), shape: vec![], values: vec![value] });
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.values[0])
    }
}

/// Construct a checkpoint holding one parameter set.
pub fn checkpoint_of<F: Scalar>(
    kind: &str,
    tag: &str,
    iteration: u64,
    epoch: u64,
    config_hash: &str,
    params: &ParamSet<F>,
) -> Checkpoint {
    let mut c = Checkpoint {
        kind: kind.into(),
        tag: tag.into(),
        iteration,
        epoch,
        config_hash: config_hash.into(),
        entries: Vec::new(),
    };
    c.push_params(params, "");
    c
}
