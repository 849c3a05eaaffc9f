//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPNV" | u32 format version | [u8; 32] descriptor hash
//! | str config
//! | tensor table (model weights)
//! | u8 has_training_state
//!   [ u64 epochs_completed | u64 optimizer step | str metadata | tensor table ]
//!
//! str          = u32 byte length | utf-8 bytes
//! tensor table = u32 count | count * (str name | u8 dtype | u32 rank | rank * u64 dim | f64 data...)
//! ```
//!
//! The only dtype is `1` (f64).

use std::io::{Read, Write};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPNV";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSection {
    pub epochs_completed: u64,
    pub optimizer_step: u64,
    /// Free-form text owned by the trainer (e.g. loss history).
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor_hash: [u8; 32],
    /// Model configuration, serialised by the owner.
    pub config: String,
    pub tensors: Vec<NamedTensor>,
    pub training: Option<TrainingSection>,
}

impl Checkpoint {
    pub fn tensors_from_store(store: &ParamStore) -> Vec<NamedTensor> {
        store
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                tensor: t.clone(),
            })
            .collect()
    }

    /// Copies tensors into `store` by name. Every store entry must be present
    /// with a matching shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let found = self
                .tensors
                .iter()
                .find(|nt| nt.name == name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor `{name}`")))?;
            if found.tensor.shape() != store.get(id).shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    found.tensor.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = found.tensor.clone();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.descriptor_hash)?;
        write_str(&mut w, &self.config)?;
        write_table(&mut w, &self.tensors)?;
        match &self.training {
            None => w.write_all(&[0])?,
            Some(t) => {
                w.write_all(&[1])?;
                w.write_all(&t.epochs_completed.to_le_bytes())?;
                w.write_all(&t.optimizer_step.to_le_bytes())?;
                write_str(&mut w, &t.metadata)?;
                write_table(&mut w, &t.tensors)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic, not an SPNV file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut descriptor_hash = [0u8; 32];
        r.read_exact(&mut descriptor_hash)?;
        let config = read_str(&mut r)?;
        let tensors = read_table(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let training = match flag[0] {
            0 => None,
            1 => {
                let epochs_completed = read_u64(&mut r)?;
                let optimizer_step = read_u64(&mut r)?;
                let metadata = read_str(&mut r)?;
                let tensors = read_table(&mut r)?;
                Some(TrainingSection {
                    epochs_completed,
                    optimizer_step,
                    metadata,
                    tensors,
                })
            }
            other => {
                return Err(NnError::Checkpoint(format!(
                    "bad training-section flag {other}"
                )))
            }
        };
        Ok(Self {
            descriptor_hash,
            config,
            tensors,
            training,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_table<W: Write>(w: &mut W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for nt in tensors {
        write_str(w, &nt.name)?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(nt.tensor.rank() as u32).to_le_bytes())?;
        for &d in nt.tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(nt.tensor.len() * 8);
        for v in nt.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| NnError::Checkpoint(format!("invalid utf-8: {e}")))
}

fn read_table<R: Read>(r: &mut R) -> Result<Vec<NamedTensor>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(r)?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(NnError::Checkpoint(format!(
                "tensor `{name}`: unsupported dtype {}",
                dtype[0]
            )));
        }
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor {
            name,
            tensor: Tensor::from_parts(shape, data),
        });
    }
    Ok(out)
}
