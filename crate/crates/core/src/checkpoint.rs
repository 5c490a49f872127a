//! Self-describing checkpoint container.
//!
//! Layout: the magic bytes `UDALM1`, a little-endian `u64` header length, a
//! JSON header, then raw little-endian `f32` data: every parameter in header
//! order, followed by the Adam first and second moments in the same order
//! when optimizer state is present.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"UDALM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    /// Free-form experiment settings of the run that wrote the file.
    experiment: serde_json::Value,
    round: usize,
    rng: Option<ChaCha8Rng>,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub experiment: serde_json::Value,
    /// Last completed round.
    pub round: usize,
    pub rng: Option<ChaCha8Rng>,
    pub optimizer: Option<Adam<f32>>,
}

fn write_f32s(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let header = Header {
            model: self.model.config().clone(),
            experiment: self.experiment.clone(),
            round: self.round,
            rng: self.rng.clone(),
            adam_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: params.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 12 * params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in params.iter() {
            write_f32s(&mut out, t);
        }
        if let Some(opt) = &self.optimizer {
            for t in opt.m.iter().chain(&opt.v) {
                write_f32s(&mut out, t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a UDALM1 checkpoint"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[6..14]);
        let len = u64::from_le_bytes(len) as usize;
        let body = bytes.get(14..).ok_or_else(|| bad("truncated header"))?;
        let header_bytes = body.get(..len).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut data = &body[len..];
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if data.len() < 4 * n {
                return Err(bad("truncated tensor data"));
            }
            let vals = data[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            data = &data[4 * n..];
            Ok(Tensor::from_vec(shape, vals))
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            tensors.push((e.name.clone(), take(&e.shape)?));
        }
        let mut model = Model::new(header.model.clone(), 0)?;
        model.load_params(tensors)?;
        let optimizer = match header.adam_step {
            Some(step) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for e in &header.tensors {
                    m.push(take(&e.shape)?);
                }
                for e in &header.tensors {
                    v.push(take(&e.shape)?);
                }
                Some(Adam::restore(model.params(), step, m, v)?)
            }
            None => None,
        };
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { model, experiment: header.experiment, round: header.round, rng: header.rng, optimizer })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Checkpoint(format!("checkpoint {} does not exist", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
