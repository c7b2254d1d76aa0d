//! "DKV1" checkpoint container.
//!
//! Layout: the magic bytes `DKV1`, a little-endian `u32` header length, a
//! JSON header, then every tensor as little-endian `f32` in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecParams};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Matrix, Real};

pub const MAGIC: &[u8; 4] = b"DKV1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// `"model"` or `"codec"`.
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_container<T: Real>(out: &mut dyn Write, kind: &str, seed: u64, config: serde_json::Value, tensors: &[(String, Matrix<T>)]) -> Result<()> {
    let header = Header {
        kind: kind.into(),
        seed,
        config,
        tensors: tensors.iter().map(|(n, m)| TensorEntry { name: n.clone(), rows: m.rows(), cols: m.cols() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    for (_, m) in tensors {
        for x in m.data() {
            out.write_all(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<T: Real>(input: &mut dyn Read) -> Result<(Header, Vec<(String, Matrix<T>)>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| Error::Format("truncated container".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("missing DKV1 magic".into()));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len).map_err(|_| Error::Format("truncated container".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut json).map_err(|_| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let mut raw = vec![0u8; e.rows * e.cols * 4];
        input.read_exact(&mut raw).map_err(|_| Error::Format(format!("truncated tensor {}", e.name)))?;
        let data = raw.chunks_exact(4).map(|b| T::c(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect();
        tensors.push((e.name.clone(), Matrix::from_vec(e.rows, e.cols, data)?));
    }
    Ok((header, tensors))
}

pub fn save_codec<T: Real>(out: &mut dyn Write, codec: &CodecParams<T>, seed: u64) -> Result<()> {
    write_container(out, "codec", seed, serde_json::to_value(&codec.config)?, &codec.named_tensors())
}

pub fn load_codec<T: Real>(input: &mut dyn Read) -> Result<(CodecParams<T>, u64)> {
    let (h, tensors) = read_container::<T>(input)?;
    if h.kind != "codec" {
        return Err(Error::Format(format!("expected a codec checkpoint, found {}", h.kind)));
    }
    let config: CodecConfig = serde_json::from_value(h.config)?;
    let params = CodecParams::from_tensors(config, tensors.into_iter().map(|(_, m)| m).collect())?;
    Ok((params, h.seed))
}

pub fn save_model<T: Real>(out: &mut dyn Write, model: &ModelParams<T>) -> Result<()> {
    write_container(out, "model", model.seed, serde_json::to_value(&model.config)?, &model.named_tensors())
}

pub fn load_model<T: Real>(input: &mut dyn Read) -> Result<ModelParams<T>> {
    let (h, tensors) = read_container::<T>(input)?;
    if h.kind != "model" {
        return Err(Error::Format(format!("expected a model checkpoint, found {}", h.kind)));
    }
    let config: ModelConfig = serde_json::from_value(h.config)?;
    ModelParams::from_named_tensors(config, h.seed, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecVariant;

    #[test]
    fn codec_round_trip() {
        let c = CodecParams::<f32>::init(&CodecConfig::for_kv_width(CodecVariant::Heavy, 8), 5).unwrap();
        let mut buf = Vec::new();
        save_codec(&mut buf, &c, 5).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let (back, seed) = load_codec::<f32>(&mut buf.as_slice()).unwrap();
        assert_eq!(seed, 5);
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_container::<f32>(&mut &b"XXXX"[..]), Err(Error::Format(_))));
        let c = CodecParams::<f32>::init(&CodecConfig::for_kv_width(CodecVariant::Light, 8), 0).unwrap();
        let mut buf = Vec::new();
        save_codec(&mut buf, &c, 0).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(load_codec::<f32>(&mut buf.as_slice()), Err(Error::Format(_))));
        let m = crate::model::init_model::<f32>(&ModelConfig::default(), 1).unwrap();
        let mut buf = Vec::new();
        save_model(&mut buf, &m).unwrap();
        assert!(matches!(load_codec::<f32>(&mut buf.as_slice()), Err(Error::Format(_))));
        assert_eq!(load_model::<f32>(&mut buf.as_slice()).unwrap().checksum(), m.checksum());
    }
}
