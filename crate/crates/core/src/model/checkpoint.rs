//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//!      0     8  magic "DSRCKPT1"
//!      8     4  u32 format version (1)
//!     12     4  u32 model kind (0 = shPLRNN, 1 = LSSM)
//!     16     4  u32 latent dim M
//!     20     4  u32 hidden dim L
//!     24     4  u32 observed dim N
//!     28     4  u32 input dim K
//!     32     4  u32 rank of W (0 = dense; shPLRNN only)
//!     36     4  u32 number of MAR units
//!     40     8  f64 kappa used at initialization
//!     48     8  u64 seed
//!     56     8  u64 training-step counter
//!     64     4  u32 number of arrays
//!     68     4  u32 reserved (0)
//!     72        arrays, each: u32 name length, UTF-8 name,
//!               u32 rows, u32 cols, rows·cols f64 row-major
//! ```
//!
//! Model parameters use the names from [`Parameters::arrays`]. Additional
//! arrays (optimizer moments) are carried through as [`NamedArray`]s.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LssmDims, LssmParams, Model, ModelKind, Parameters, ShplrnnDims, ShplrnnParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSRCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 72;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub kappa: f64,
    pub seed: u64,
    pub step: u64,
    pub extra: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let (kind, m, l, n, k, rank, m_reg) = match &self.model {
            Model::Shplrnn(p) => {
                let d = p.dims();
                (0u32, d.latent, d.hidden, d.obs, d.inputs, d.rank.unwrap_or(0), d.m_reg)
            }
            Model::Lssm(p) => {
                let d = p.dims();
                (1u32, d.latent, d.hidden, d.obs, d.inputs, 0, d.m_reg)
            }
        };
        let arrays = self.model.arrays();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&kind.to_le_bytes())?;
        for d in [m, l, n, k, rank, m_reg] {
            w.write_all(&to_u32(d)?.to_le_bytes())?;
        }
        w.write_all(&self.kappa.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&to_u32(arrays.len() + self.extra.len())?.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for a in &arrays {
            write_array(w, a.name, a.rows, a.cols, a.values)?;
        }
        for a in &self.extra {
            write_array(w, &a.name, a.rows, a.cols, &a.values)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::format("checkpoint", format!("short header: {e}")))?;
        if &header[0..8] != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let kind = match u32_at(12) {
            0 => ModelKind::Shplrnn,
            1 => ModelKind::Lssm,
            other => return Err(Error::format("checkpoint", format!("unknown model kind {other}"))),
        };
        let (m, l, n, k, rank, m_reg) = (
            u32_at(16) as usize,
            u32_at(20) as usize,
            u32_at(24) as usize,
            u32_at(28) as usize,
            u32_at(32) as usize,
            u32_at(36) as usize,
        );
        let kappa = f64::from_le_bytes(header[40..48].try_into().unwrap());
        let seed = u64_at(48);
        let step = u64_at(56);
        let count = u32_at(64) as usize;

        let mut model = match kind {
            ModelKind::Shplrnn => Model::Shplrnn(ShplrnnParams::zeros(ShplrnnDims {
                latent: m,
                hidden: l,
                obs: n,
                inputs: k,
                rank: (rank > 0).then_some(rank),
                m_reg,
            })),
            ModelKind::Lssm => Model::Lssm(LssmParams::zeros(LssmDims {
                latent: m,
                hidden: l,
                obs: n,
                inputs: k,
                m_reg,
            })),
        };

        let mut extra = Vec::new();
        let mut filled = Vec::new();
        for _ in 0..count {
            let a = read_array(r)?;
            let slot = match &mut model {
                Model::Shplrnn(p) => find_slot(p, &a)?,
                Model::Lssm(p) => find_slot(p, &a)?,
            };
            if slot {
                filled.push(a.name);
            } else {
                extra.push(a);
            }
        }
        let expected: Vec<&str> = model.arrays().iter().map(|a| a.name).collect();
        for name in &expected {
            if !filled.iter().any(|f| f == name) {
                return Err(Error::format("checkpoint", format!("missing array '{name}'")));
            }
        }
        Ok(Self {
            model,
            kappa,
            seed,
            step,
            extra,
        })
    }
}

/// Copies `a` into the parameter array of the same name; `Ok(false)` when
/// no parameter has that name.
fn find_slot<P: Parameters>(p: &mut P, a: &NamedArray) -> Result<bool> {
    for (name, values) in p.arrays_mut() {
        if name == a.name {
            if values.len() != a.values.len() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "array '{name}' has {} values, expected {}",
                        a.values.len(),
                        values.len()
                    ),
                ));
            }
            values.copy_from_slice(&a.values);
            return Ok(true);
        }
    }
    Ok(false)
}

fn to_u32(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::format("checkpoint", format!("{x} exceeds u32")))
}

fn write_array<W: Write>(w: &mut W, name: &str, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    w.write_all(&to_u32(name.len())?.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&to_u32(rows)?.to_le_bytes())?;
    w.write_all(&to_u32(cols)?.to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_array<R: Read>(r: &mut R) -> Result<NamedArray> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(Error::format("checkpoint", "array name too long"));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))?;
    let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "non-UTF-8 name"))?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut values = vec![0.0; rows * cols];
    let mut b = [0u8; 8];
    for v in values.iter_mut() {
        r.read_exact(&mut b)
            .map_err(|e| Error::format("checkpoint", format!("truncated data: {e}")))?;
        *v = f64::from_le_bytes(b);
    }
    Ok(NamedArray {
        name,
        rows,
        cols,
        values,
    })
}
