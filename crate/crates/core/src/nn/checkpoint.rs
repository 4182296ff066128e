//! Model checkpoints: `"HCKP" | u32 version | u64 header_len | JSON header |
//! f64 LE payload`, all integers little-endian. The header lists tensor names
//! and shapes in payload order plus hyperparameters, seed and step.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AttentionMil, LinearProbe, Matrix};
use crate::fsutil::atomic_write;
use crate::{Error, Result};

pub const CKPT_MAGIC: [u8; 4] = *b"HCKP";
pub const CKPT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    /// Row-major; a vector has shape `[len]`.
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn matrix(name: &str, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    fn vector(name: &str, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        match self.shape[..] {
            [r, c] => Matrix::from_vec(r, c, self.data.clone()),
            _ => Err(Error::Shape(format!("tensor {} is not 2-d: {:?}", self.name, self.shape))),
        }
    }

    fn to_vector(&self) -> Result<Vec<f64>> {
        match self.shape[..] {
            [_] => Ok(self.data.clone()),
            _ => Err(Error::Shape(format!("tensor {} is not 1-d: {:?}", self.name, self.shape))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `"linear_probe"` or `"attention_mil"`.
    pub model: String,
    pub tensors: Vec<NamedTensor>,
    pub hyper: Value,
    pub seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: String,
    tensors: Vec<TensorMeta>,
    hyper: Value,
    seed: u64,
    step: u64,
}

impl Checkpoint {
    pub fn from_linear(m: &LinearProbe, hyper: Value, seed: u64, step: u64) -> Self {
        Self {
            model: "linear_probe".into(),
            tensors: vec![NamedTensor::matrix("weight", &m.weight), NamedTensor::vector("bias", &m.bias)],
            hyper,
            seed,
            step,
        }
    }

    pub fn from_mil(m: &AttentionMil, hyper: Value, seed: u64, step: u64) -> Self {
        Self {
            model: "attention_mil".into(),
            tensors: vec![
                NamedTensor::matrix("V", &m.v),
                NamedTensor::matrix("U", &m.u),
                NamedTensor::vector("w", &m.w),
                NamedTensor::matrix("W_c", &m.wc),
                NamedTensor::vector("b_c", &m.bc),
            ],
            hyper,
            seed,
            step,
        }
    }

    fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Validation(format!("checkpoint has no tensor {name:?}")))
    }

    fn expect_model(&self, model: &str) -> Result<()> {
        if self.model == model {
            Ok(())
        } else {
            Err(Error::Validation(format!("checkpoint holds {:?}, not {model:?}", self.model)))
        }
    }

    pub fn to_linear(&self) -> Result<LinearProbe> {
        self.expect_model("linear_probe")?;
        let weight = self.tensor("weight")?.to_matrix()?;
        let bias = self.tensor("bias")?.to_vector()?;
        if bias.len() != weight.rows() {
            return Err(Error::Shape("bias length != number of classes".into()));
        }
        Ok(LinearProbe { weight, bias })
    }

    pub fn to_mil(&self) -> Result<AttentionMil> {
        self.expect_model("attention_mil")?;
        let m = AttentionMil {
            v: self.tensor("V")?.to_matrix()?,
            u: self.tensor("U")?.to_matrix()?,
            w: self.tensor("w")?.to_vector()?,
            wc: self.tensor("W_c")?.to_matrix()?,
            bc: self.tensor("b_c")?.to_vector()?,
        };
        let (h, d) = (m.v.rows(), m.v.cols());
        if m.u.rows() != h || m.u.cols() != d || m.w.len() != h || m.wc.cols() != d || m.bc.len() != m.wc.rows() {
            return Err(Error::Shape("inconsistent attention MIL tensor shapes".into()));
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!("tensor {} data does not match shape {:?}", t.name, t.shape)));
            }
        }
        let header = Header {
            model: self.model.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorMeta {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            hyper: self.hyper.clone(),
            seed: self.seed,
            step: self.step,
        };
        let header = serde_json::to_vec(&header)?;
        let n: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 8 * n);
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |expected: usize| {
            if bytes.len() < expected {
                Err(Error::TruncatedPayload {
                    expected: expected as u64,
                    found: bytes.len() as u64,
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != CKPT_MAGIC {
            return Err(Error::BadMagic {
                expected: CKPT_MAGIC,
                found: magic,
            });
        }
        need(PREFIX_LEN)?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CKPT_VERSION,
                found: version,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(PREFIX_LEN))
            .ok_or_else(|| Error::Validation("header length overflows".into()))?;
        need(header_end)?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])?;

        let mut n = 0usize;
        for t in &header.tensors {
            let len = t
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Validation(format!("tensor {} shape overflows", t.name)))?;
            n = n
                .checked_add(len)
                .ok_or_else(|| Error::Validation("payload size overflows".into()))?;
        }
        let end = n
            .checked_mul(8)
            .and_then(|b| b.checked_add(header_end))
            .ok_or_else(|| Error::Validation("payload size overflows".into()))?;
        need(end)?;
        if bytes.len() > end {
            return Err(Error::Validation(format!("{} trailing bytes after payload", bytes.len() - end)));
        }

        let mut values = bytes[header_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let tensors = header
            .tensors
            .into_iter()
            .map(|t| {
                let len = t.shape.iter().product();
                NamedTensor {
                    data: values.by_ref().take(len).collect(),
                    name: t.name,
                    shape: t.shape,
                }
            })
            .collect();
        Ok(Self {
            model: header.model,
            tensors,
            hyper: header.hyper,
            seed: header.seed,
            step: header.step,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
