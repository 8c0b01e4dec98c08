//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "GLABCKPT"
//! version   u32       1
//! hdr_len   u64       length of the JSON header in bytes
//! header    hdr_len   UTF-8 JSON: {"arch": .., "config": .., "records": [{name, shape, offset, len}]}
//! data      8 * n     f64 values of every record, concatenated in record order
//! ```
//!
//! `offset` and `len` count `f64` values from the start of the data section.
//! Values are written with `to_le_bytes`, so a save/load round trip is
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GLABCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: Architecture,
    /// Free-form run configuration stored alongside the weights.
    config: serde_json::Value,
    records: Vec<Record>,
}

pub fn to_bytes(model: &Model, config: &serde_json::Value) -> Result<Vec<u8>> {
    let mut records = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (_, name, t) in model.params.iter() {
        records.push(Record {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header {
        arch: model.arch.clone(),
        config: config.clone(),
        records,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds the model described by the header and fills in every stored
/// parameter; the record set must match the architecture exactly.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..data_start])?;
    let data = &bytes[data_start..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut model = Model::new(header.arch, 0)?;
    if header.records.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} records for {} parameters",
            header.records.len(),
            model.params.len()
        )));
    }
    for rec in &header.records {
        let id = model
            .params
            .find(&rec.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", rec.name)))?;
        let slot = model.params.get_mut(id);
        let end = rec.offset.checked_add(rec.len).filter(|&e| e <= values.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("record {} overruns the data", rec.name)));
        };
        if slot.shape() != rec.shape.as_slice() || rec.len != slot.numel() {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?}, expected {:?}",
                rec.name,
                rec.shape,
                slot.shape()
            )));
        }
        *slot = Tensor::new(rec.shape.clone(), values[rec.offset..end].to_vec())?;
    }
    Ok((model, header.config))
}

pub fn save(path: &Path, model: &Model, config: &serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(model, config)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, serde_json::Value)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture {
            d: 4,
            blocks: 2,
            heads: 1,
            lang_layers: 1,
            ffn_mult: 1,
            vocab_size: 12,
            num_classes: 3,
            bidirectional: true,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = Model::new(arch(), 9).unwrap();
        let id = model.params.ids().next().unwrap();
        model.params.get_mut(id).data_mut()[..4]
            .copy_from_slice(&[f64::MIN_POSITIVE / 3.0, -0.0, 1e300, f64::NAN]);
        let cfg = serde_json::json!({"seed": 9});
        let bytes = to_bytes(&model, &cfg).unwrap();
        let (back, cfg2) = from_bytes(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.arch, model.arch);
        for ((_, n1, a), (_, n2, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(to_bytes(&back, &cfg2).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::new(arch(), 1).unwrap();
        let bytes = to_bytes(&model, &serde_json::Value::Null).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(from_bytes(&b).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
