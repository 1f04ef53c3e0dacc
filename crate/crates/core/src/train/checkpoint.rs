//! `CAPSCK01` checkpoints.
//!
//! Layout: magic, 32-byte SHA-256 fingerprint of the model configuration,
//! then records until end of file. A record is `name_len:u32`, UTF-8 name,
//! `dtype:u8`, `rank:u32`, `dims:u32[rank]` and the little-endian payload.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::report::EpochRecord;
use crate::error::{Error, Result};
use crate::model::AblationConfig;
use crate::nn::{AdamConfig, AdamState, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"CAPSCK01";

pub fn config_fingerprint(cfg: &AblationConfig) -> [u8; 32] {
    Sha256::digest(serde_json::to_vec(cfg).expect("config serializes")).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: AblationConfig,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub history: Vec<EpochRecord>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrainMeta {
    adam: AdamConfig,
    history: Vec<EpochRecord>,
}

struct RawRecord {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn push_record(out: &mut Vec<u8>, name: &str, dtype: DType, dims: &[usize], payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype as u8);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(payload);
}

fn push_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size());
    for &x in t.data() {
        x.write_le(&mut payload);
    }
    push_record(out, name, T::DTYPE, t.shape(), &payload);
}

fn push_u64(out: &mut Vec<u8>, name: &str, v: u64) {
    push_record(out, name, DType::U64, &[], &v.to_le_bytes());
}

fn push_bytes(out: &mut Vec<u8>, name: &str, v: &[u8]) {
    push_record(out, name, DType::U8, &[v.len()], v);
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CKPT_MAGIC.to_vec();
        out.extend_from_slice(&config_fingerprint(&self.config));
        push_bytes(&mut out, "meta/config", &serde_json::to_vec(&self.config).expect("config serializes"));
        let meta = TrainMeta { adam: self.adam.config, history: self.history.clone() };
        push_bytes(&mut out, "meta/train", &serde_json::to_vec(&meta).expect("meta serializes"));
        push_u64(&mut out, "seed", self.seed);
        push_u64(&mut out, "epoch", self.epoch);
        push_u64(&mut out, "adam/t", self.adam.t);
        for (name, t) in self.params.iter() {
            push_tensor(&mut out, &format!("param/{name}"), t);
        }
        for (i, name) in self.params.names().iter().enumerate() {
            push_tensor(&mut out, &format!("adam/m/{name}"), &self.adam.m[i]);
            push_tensor(&mut out, &format!("adam/v/{name}"), &self.adam.v[i]);
        }
        out
    }

    /// Parses a checkpoint. When `expect` is given, its fingerprint must
    /// match the stored one.
    pub fn from_bytes(bytes: &[u8], expect: Option<&AblationConfig>) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 40 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a CAPSCK01 checkpoint"));
        }
        let stored: [u8; 32] = bytes[8..40].try_into().expect("32 bytes");
        if let Some(cfg) = expect {
            if config_fingerprint(cfg) != stored {
                return Err(bad("configuration fingerprint mismatch"));
            }
        }
        let records = parse_records(&bytes[40..])?;
        let find = |name: &str| records.iter().find(|r| r.name == name).ok_or_else(|| bad(&format!("missing record {name}")));
        let u64_of = |name: &str| -> Result<u64> {
            let r = find(name)?;
            if r.dtype != DType::U64 || r.payload.len() != 8 {
                return Err(bad(&format!("record {name} is not a u64")));
            }
            Ok(u64::from_le_bytes(r.payload[..8].try_into().expect("8 bytes")))
        };
        let config: AblationConfig = serde_json::from_slice(&find("meta/config")?.payload)
            .map_err(|e| bad(&format!("meta/config: {e}")))?;
        if config_fingerprint(&config) != stored {
            return Err(bad("stored configuration does not match its fingerprint"));
        }
        let meta: TrainMeta =
            serde_json::from_slice(&find("meta/train")?.payload).map_err(|e| bad(&format!("meta/train: {e}")))?;
        let tensor = |r: &RawRecord| -> Result<Tensor<T>> {
            if r.dtype != T::DTYPE {
                return Err(bad(&format!("record {} has dtype {:?}, expected {:?}", r.name, r.dtype, T::DTYPE)));
            }
            let data = r.payload.chunks(T::DTYPE.size()).map(T::read_le).collect();
            Tensor::new(r.dims.clone(), data).map_err(|e| bad(&format!("record {}: {e}", r.name)))
        };
        let mut params = ParamStore::new();
        for r in records.iter().filter(|r| r.name.starts_with("param/")) {
            params.insert(&r.name["param/".len()..], tensor(r)?)?;
        }
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for name in params.names() {
            m.push(tensor(find(&format!("adam/m/{name}"))?)?);
            v.push(tensor(find(&format!("adam/v/{name}"))?)?);
        }
        let adam = AdamState { config: meta.adam, m, v, t: u64_of("adam/t")? };
        Ok(Checkpoint { config, params, adam, seed: u64_of("seed")?, epoch: u64_of("epoch")?, history: meta.history })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expect: Option<&AblationConfig>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expect)
    }
}

fn parse_records(mut b: &[u8]) -> Result<Vec<RawRecord>> {
    let trunc = || Error::Checkpoint("truncated record".into());
    let take = |b: &mut &[u8], n: usize| -> Result<Vec<u8>> {
        if b.len() < n {
            return Err(trunc());
        }
        let (head, rest) = b.split_at(n);
        *b = rest;
        Ok(head.to_vec())
    };
    let u32_at = |v: Vec<u8>| u32::from_le_bytes(v[..4].try_into().expect("4 bytes")) as usize;
    let mut out = Vec::new();
    while !b.is_empty() {
        let len = u32_at(take(&mut b, 4)?);
        let name = String::from_utf8(take(&mut b, len)?).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let tag = take(&mut b, 1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        let rank = u32_at(take(&mut b, 4)?);
        let dims = (0..rank).map(|_| take(&mut b, 4).map(u32_at)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let payload = take(&mut b, count * dtype.size())?;
        out.push(RawRecord { name, dtype, dims, payload });
    }
    Ok(out)
}
