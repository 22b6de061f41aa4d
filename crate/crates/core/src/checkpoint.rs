//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "URSTCKPT"
//! version    u32
//! header_len u64
//! header     JSON (model config, train state scalars, array table)
//! payload    f64 LE values of every array, in table order
//! trailer    SHA-256 of everything before it (32 bytes)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{Anchor, AnchorSet};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{AdamW, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"URSTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const TRAILER: usize = 32;

/// Byte offset of the version field.
pub const VERSION_OFFSET: usize = 8;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub anchors: Option<AnchorSet>,
    pub train: Option<TrainState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnchorRecord {
    task: Task,
    count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainRecord {
    cfg: TrainConfig,
    step: u64,
    adam_t: Vec<u64>,
    epoch_usage: Vec<u64>,
    total_usage: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    endianness: String,
    model: ModelConfig,
    anchors: Option<Vec<AnchorRecord>>,
    train: Option<TrainRecord>,
    arrays: Vec<ArrayRecord>,
}

fn push(arrays: &mut Vec<ArrayRecord>, payload: &mut Vec<u8>, name: String, t: &Tensor) {
    arrays.push(ArrayRecord {
        name,
        shape: t.shape().to_vec(),
    });
    payload.extend(t.to_le_bytes());
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let store = ck.model.store();
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (_, p) in store.iter() {
        push(
            &mut arrays,
            &mut payload,
            format!("param/{}", p.name),
            &p.value,
        );
    }
    let anchors = ck.anchors.as_ref().map(|set| {
        set.anchors
            .iter()
            .enumerate()
            .map(|(i, a)| {
                push(
                    &mut arrays,
                    &mut payload,
                    format!("anchor/{i}/mean"),
                    &Tensor::from_parts(vec![a.mean.len()], a.mean.clone()),
                );
                push(
                    &mut arrays,
                    &mut payload,
                    format!("anchor/{i}/covariance"),
                    &a.covariance,
                );
                AnchorRecord {
                    task: a.task,
                    count: a.count,
                }
            })
            .collect()
    });
    let train = ck.train.as_ref().map(|st| {
        for ((_, p), (m, v)) in store.iter().zip(st.optimizer.m.iter().zip(&st.optimizer.v)) {
            push(&mut arrays, &mut payload, format!("adam_m/{}", p.name), m);
            push(&mut arrays, &mut payload, format!("adam_v/{}", p.name), v);
        }
        TrainRecord {
            cfg: st.cfg.clone(),
            step: st.step,
            adam_t: st.optimizer.t.clone(),
            epoch_usage: st.epoch_usage.clone(),
            total_usage: st.total_usage.clone(),
        }
    });
    let header = Header {
        endianness: "little".into(),
        model: ck.model.config().clone(),
        anchors,
        train,
        arrays,
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX + hjson.len() + payload.len() + TRAILER);
    out.extend_from_slice(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((hjson.len() as u64).to_le_bytes());
    out.extend(hjson);
    out.extend(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    if bytes.len() < PREFIX + TRAILER {
        return Err(Error::Integrity("checkpoint is truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Integrity(
            "checkpoint digest mismatch (truncated or corrupted)".into(),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if PREFIX + hlen > body.len() {
        return Err(Error::Integrity("header extends past the payload".into()));
    }
    let header: Header = serde_json::from_slice(&body[PREFIX..PREFIX + hlen])?;
    if header.endianness != "little" {
        return Err(Error::Format(format!(
            "unsupported endianness {}",
            header.endianness
        )));
    }

    let mut payload = &body[PREFIX + hlen..];
    let mut arrays = std::collections::HashMap::new();
    for rec in &header.arrays {
        let n: usize = rec.shape.iter().product();
        if payload.len() < n * 8 {
            return Err(Error::Integrity(format!("array {} is truncated", rec.name)));
        }
        let data = payload[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        payload = &payload[n * 8..];
        arrays.insert(rec.name.clone(), Tensor::new(&rec.shape, data)?);
    }
    if !payload.is_empty() {
        return Err(Error::Integrity(format!(
            "{} trailing payload bytes",
            payload.len()
        )));
    }
    let mut take = |name: String| {
        arrays
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))
    };

    let mut model = Model::new(header.model, 0)?;
    let ids: Vec<_> = model
        .store()
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (id, name, shape) in &ids {
        let t = take(format!("param/{name}"))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        *model.store_mut().value_mut(*id) = t;
    }
    let anchors = match header.anchors {
        Some(recs) => {
            let mut set = Vec::with_capacity(recs.len());
            for (i, r) in recs.into_iter().enumerate() {
                let mean = take(format!("anchor/{i}/mean"))?.into_data();
                let covariance = take(format!("anchor/{i}/covariance"))?;
                set.push(Anchor {
                    task: r.task,
                    mean,
                    covariance,
                    count: r.count,
                });
            }
            Some(AnchorSet { anchors: set })
        }
        None => None,
    };
    let train = match header.train {
        Some(r) => {
            let mut m = Vec::with_capacity(ids.len());
            let mut v = Vec::with_capacity(ids.len());
            for (_, name, _) in &ids {
                m.push(take(format!("adam_m/{name}"))?);
                v.push(take(format!("adam_v/{name}"))?);
            }
            Some(TrainState {
                cfg: r.cfg,
                step: r.step,
                optimizer: AdamW { m, v, t: r.adam_t },
                epoch_usage: r.epoch_usage,
                total_usage: r.total_usage,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        anchors,
        train,
    })
}

/// Writes through a temporary sibling and renames into place.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    fn sample() -> Checkpoint {
        let model = Model::new(tiny_config(), 3).unwrap();
        let d = model.config().daam.code_dim;
        let anchors = AnchorSet {
            anchors: vec![Anchor {
                task: Task::Rain,
                mean: (0..d).map(|i| i as f64 * 0.1 - 0.3).collect(),
                covariance: Tensor::new(&[d, d], (0..d * d).map(|i| (i as f64).sin()).collect())
                    .unwrap(),
                count: 7,
            }],
        };
        Checkpoint {
            model,
            anchors: Some(anchors),
            train: None,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(
            back.model.store().digest(&crate::autograd::ParamGroup::ALL),
            ck.model.store().digest(&crate::autograd::ParamGroup::ALL)
        );
        assert_eq!(back.anchors, ck.anchors);
    }

    #[test]
    fn version_and_truncation() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        let short = bytes[..bytes.len() - 100].to_vec();
        assert!(matches!(
            decode_checkpoint(&short),
            Err(Error::Integrity(_))
        ));
        bytes[VERSION_OFFSET] += 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
        assert!(matches!(
            decode_checkpoint(b"garbage"),
            Err(Error::Format(_))
        ));
    }
}
