//! Binary checkpoint: `GCFS`, u32 LE version, u64 LE header length, JSON
//! header, then little-endian f32 tensors in directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimState, TrainConfig};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::wsgraph::Graph;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GCFS";
const PREFIX: usize = 4 + 4 + 8;

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub optim: OptimState,
    /// Completed optimizer steps.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    graph: Option<Graph>,
    adam_t: u64,
    tensors: Vec<Entry>,
}

/// `offset` is in bytes from the start of the tensor payload.
#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let names: Vec<&str> = self.model.specs().iter().map(|s| s.name.as_str()).collect();
        let mut out = Vec::new();
        for (n, t) in names.iter().zip(self.model.params()) {
            out.push((n.to_string(), t));
        }
        for (n, t) in names.iter().zip(&self.optim.m) {
            out.push((format!("adam.m/{n}"), t));
        }
        for (n, t) in names.iter().zip(&self.optim.v) {
            out.push((format!("adam.v/{n}"), t));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let mut offset = 0;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel();
                e
            })
            .collect();
        let header = Header {
            model: self.model.config().clone(),
            train: self.train.clone(),
            step: self.step,
            graph: self.model.graph().cloned(),
            adam_t: self.optim.t,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREFIX + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < PREFIX || &bytes[..4] != MAGIC {
            return Err(bad("bad magic; not a GCFS checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[PREFIX..];
        let hlen = usize::try_from(hlen)
            .ok()
            .filter(|&h| h <= body.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];

        let mut expected = 0usize;
        for e in &header.tensors {
            if e.offset != expected {
                return Err(bad(format!(
                    "tensor {} at offset {}, expected {expected}",
                    e.name, e.offset
                )));
            }
            expected += 4 * e.shape.iter().product::<usize>();
        }
        if payload.len() != expected {
            return Err(bad(format!(
                "length mismatch: payload has {} bytes, directory needs {expected}",
                payload.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(
                Tensor::new(&e.shape, data).map_err(|err| bad(format!("{}: {err}", e.name)))?,
            );
        }
        if tensors.len() % 3 != 0 {
            return Err(bad(
                "tensor directory is not params + two Adam moments".into()
            ));
        }
        let graph = match header.graph {
            Some(g) => Some(Graph::from_edges(
                g.n(),
                g.params(),
                g.edges().iter().copied(),
            )?),
            None => None,
        };
        let k = tensors.len() / 3;
        let v = tensors.split_off(2 * k);
        let m = tensors.split_off(k);
        let dir = &header.tensors;
        for i in 0..k {
            let base = &dir[i].name;
            if dir[k + i].name != format!("adam.m/{base}")
                || dir[2 * k + i].name != format!("adam.v/{base}")
            {
                return Err(bad(format!(
                    "Adam moments for {base} are missing or out of order"
                )));
            }
        }
        let model =
            Model::from_parts(header.model, graph, tensors).map_err(|e| bad(e.to_string()))?;
        for (spec, e) in model.specs().iter().zip(&header.tensors) {
            if spec.name != e.name {
                return Err(bad(format!(
                    "tensor {} does not match parameter {}",
                    e.name, spec.name
                )));
            }
        }
        Ok(Self {
            model,
            train: header.train,
            optim: OptimState {
                t: header.adam_t,
                m,
                v,
            },
            step: header.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            channels: 8,
            enc_blocks: 1,
            dec_blocks: 1,
            ..ModelConfig::mini_deblur()
        };
        let model = Model::new(cfg, 4).unwrap();
        let mut optim = OptimState::zeros_like(model.params());
        optim.t = 17;
        optim.m[0].data_mut()[0] = 0.25;
        optim.v[1].data_mut()[0] = 1e-30;
        Checkpoint {
            model,
            train: TrainConfig::default(),
            optim,
            step: 17,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!(back.optim, ck.optim);
        assert_eq!(back.step, 17);
        assert_eq!(&a[..4], b"GCFS");
    }

    #[test]
    fn corrupt_files_rejected() {
        let a = sample().to_bytes().unwrap();
        for cut in [0, 3, 15, 40, a.len() - 1] {
            assert!(
                matches!(
                    Checkpoint::from_bytes(&a[..cut]),
                    Err(Error::Checkpoint(_) | Error::Json(_))
                ),
                "{cut}"
            );
        }
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bad = a.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let mut long = a;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long)
            .unwrap_err()
            .to_string()
            .contains("length"));
    }
}
