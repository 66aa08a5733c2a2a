//! Binary checkpoints: `ZNTH` magic, format version, a JSON header with the
//! model config and feature schema, then every parameter as raw
//! little-endian f64 in declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::FeatureSchema;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"ZNTH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    schema: FeatureSchema,
}

/// Serializes `model` into `w`.
pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    let header = serde_json::to_vec(&Header { model: model.cfg.clone(), schema: model.schema().clone() })?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let tensors = model.store.tensors();
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.numel() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Rebuilds a model from `r`, checking every tensor size against the config.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u64(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut model = Model::build(&header.model, &header.schema)?;
    let count = read_u64(r)? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!("checkpoint has {count} tensors, config expects {}", model.store.len())));
    }
    for (i, t) in model.store.tensors_mut().iter_mut().enumerate() {
        let n = read_u64(r)? as usize;
        if n != t.numel() {
            return Err(Error::Format(format!("tensor {i}: {n} values, expected {}", t.numel())));
        }
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::FeatureSchema;

    #[test]
    fn round_trip_is_bitwise() {
        let model = Model::build(&ModelConfig::small_zenith_pp(), &FeatureSchema::desk_default()).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"ZNTH");
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.cfg, model.cfg);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let model = Model::build(&ModelConfig::small_zenith(), &FeatureSchema::desk_default()).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(read_checkpoint(&mut &bytes[..bytes.len() - 3]).is_err());
    }
}
