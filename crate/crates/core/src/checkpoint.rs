//! Versioned checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `AUXQCKPT`                          |
//! | 8      | 4    | format version (`u32`)                    |
//! | 12     | 8    | header length `H` in bytes (`u64`)        |
//! | 20     | H    | UTF-8 JSON header                         |
//! | 20 + H | ...  | payload: raw IEEE-754 little-endian values |
//!
//! The header lists every tensor as `{name, shape, offset, len}` where
//! `offset` is a byte offset into the payload and `len` an element count,
//! together with `dtype`, `endianness: "little"` and a free-form `meta`
//! document owned by the caller.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AUXQCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: DType,
    pub endianness: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

/// Serializes `tensors` and `meta` to bytes.
pub fn encode<T: Element>(meta: &impl Serialize, tensors: &IndexMap<String, Tensor<T>>) -> Result<Vec<u8>> {
    let width = T::DTYPE.size_of() as u64;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let len = t.numel() as u64;
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len });
        offset += len * width;
    }
    let header = Header {
        version: VERSION,
        dtype: T::DTYPE,
        endianness: "little".into(),
        tensors: entries,
        meta: serde_json::to_value(meta)?,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Parses a container, converting stored values to `T`.
pub fn decode<T: Element>(path: &Path, bytes: &[u8]) -> Result<(Header, IndexMap<String, Tensor<T>>)> {
    let bad = |d: String| Error::format(path, d);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (missing AUXQCKPT magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[20..payload_start]).map_err(|e| bad(format!("header: {e}")))?;
    if header.endianness != "little" {
        return Err(bad(format!("unsupported endianness {:?}", header.endianness)));
    }
    let payload = &bytes[payload_start..];
    let width = header.dtype.size_of();
    let mut tensors = IndexMap::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.shape.iter().product::<usize>() as u64 != e.len {
            return Err(bad(format!("{}: shape {:?} does not hold {} values", e.name, e.shape, e.len)));
        }
        let start = e.offset as usize;
        let end = start + e.len as usize * width;
        let Some(raw) = payload.get(start..end) else {
            return Err(bad(format!("{}: payload truncated", e.name)));
        };
        let data: Vec<T> = match header.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c).to_f64())).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        tensors.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
    }
    Ok((header, tensors))
}

pub fn save<T: Element>(path: &Path, meta: &impl Serialize, tensors: &IndexMap<String, Tensor<T>>) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a container and deserializes its `meta` document as `M`.
pub fn load<T: Element, M: DeserializeOwned>(path: &Path) -> Result<(M, DType, IndexMap<String, Tensor<T>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) = decode(path, &bytes)?;
    let meta = serde_json::from_value(header.meta).map_err(|e| Error::format(path, format!("meta: {e}")))?;
    Ok((meta, header.dtype, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = IndexMap::new();
        m.insert("a".to_string(), Tensor::<f64>::from_f64(&[2, 2], &[1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        m.insert("b".to_string(), Tensor::<f64>::scalar(0.1));
        let bytes = encode(&serde_json::json!({"k": 1}), &m).unwrap();
        let (h, back) = decode::<f64>(Path::new("x"), &bytes).unwrap();
        assert_eq!(h.meta["k"], 1);
        assert!(back["a"].bit_eq(&m["a"]));
        assert!(back["b"].bit_eq(&m["b"]));
    }

    #[test]
    fn layout_matches_documentation() {
        let mut m = IndexMap::new();
        m.insert("w".to_string(), Tensor::<f32>::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let bytes = encode(&(), &m).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        let h = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 20 + h + 8);
        assert_eq!(&bytes[20 + h..20 + h + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let m: IndexMap<String, Tensor<f32>> = [("w".to_string(), Tensor::zeros(&[4]))].into_iter().collect();
        let bytes = encode(&(), &m).unwrap();
        let p = Path::new("c");
        assert!(matches!(decode::<f32>(p, &bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        assert!(matches!(decode::<f32>(p, b"nonsense-bytes-here-x"), Err(Error::Format { .. })));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode::<f32>(p, &v2), Err(Error::Format { .. })));
    }
}
