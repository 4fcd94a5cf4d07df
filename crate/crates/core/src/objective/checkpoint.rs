use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{read_bytes, read_f64s, read_u32, read_u64, write_f64s, write_u32, write_u64};
use crate::nn::Params;
use crate::{Error, Result};

pub const CKPT_MAGIC: &[u8; 10] = b"DEGO-CKPT1";
pub const CKPT_VERSION: u32 = 1;

/// A named tensor as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_params<P: Params>(step: u64, params: &P) -> Self {
        let mut tensors = Vec::new();
        params.visit("", &mut |name, dims, data| {
            tensors.push(Tensor {
                name: name.to_string(),
                dims: dims.to_vec(),
                data: data.to_vec(),
            })
        });
        Checkpoint { step, tensors }
    }

    /// Appends a metadata tensor holding the bytes of `digest` (hex) as values.
    pub fn with_digest(mut self, name: &str, digest_hex: &str) -> Self {
        let bytes = hex::decode(digest_hex).unwrap_or_else(|_| digest_hex.as_bytes().to_vec());
        self.tensors.push(Tensor {
            name: name.to_string(),
            dims: vec![bytes.len()],
            data: bytes.iter().map(|&b| b as f64).collect(),
        });
        self
    }

    pub fn digest_of(&self, name: &str) -> Option<String> {
        let t = self.tensors.iter().find(|t| t.name == name)?;
        Some(hex::encode(t.data.iter().map(|&v| v as u8).collect::<Vec<_>>()))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies every parameter of `params` from the matching tensor.
    pub fn load_into<P: Params>(&self, params: &mut P) -> Result<()> {
        let mut err = None;
        params.visit_mut("", &mut |name, v| {
            if err.is_some() {
                return;
            }
            match self.tensor(name) {
                Some(t) if t.data.len() == v.len() => v.copy_from_slice(&t.data),
                Some(t) => err = Some(Error::Invalid(format!("tensor {name}: {} values, expected {}", t.data.len(), v.len()))),
                None => err = Some(Error::Invalid(format!("checkpoint lacks tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// SHA-256 over every parameter tensor (metadata names starting with
    /// `meta.` are skipped).
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors.iter().filter(|t| !t.name.starts_with("meta.")) {
            h.update(t.name.as_bytes());
            for d in &t.dims {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(CKPT_MAGIC)?;
        write_u32(&mut out, CKPT_VERSION)?;
        write_u64(&mut out, self.step)?;
        write_u32(&mut out, self.tensors.len() as u32)?;
        for t in &self.tensors {
            write_u32(&mut out, t.name.len() as u32)?;
            out.write_all(t.name.as_bytes())?;
            write_u32(&mut out, t.dims.len() as u32)?;
            for &d in &t.dims {
                write_u64(&mut out, d as u64)?;
            }
            write_f64s(&mut out, &t.data)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let magic = read_bytes(&mut input, CKPT_MAGIC.len(), "checkpoint magic")?;
        if magic != CKPT_MAGIC {
            return Err(Error::BadMagic(String::from_utf8_lossy(&magic).into_owned()));
        }
        let version = read_u32(&mut input, "checkpoint version")?;
        if version != CKPT_VERSION {
            return Err(Error::Invalid(format!("unsupported checkpoint version {version}")));
        }
        let step = read_u64(&mut input, "checkpoint step")?;
        let count = read_u32(&mut input, "checkpoint tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(&mut input, "tensor name length")? as usize;
            let name = String::from_utf8(read_bytes(&mut input, len, "tensor name")?)
                .map_err(|_| Error::Invalid("tensor name is not utf-8".into()))?;
            let rank = read_u32(&mut input, "tensor rank")? as usize;
            let dims = (0..rank)
                .map(|_| read_u64(&mut input, "tensor dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = read_f64s(&mut input, dims.iter().product(), "tensor data")?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue(format!("tensor {name}")));
            }
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Checkpoint { step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read(&bytes[..])
    }
}
