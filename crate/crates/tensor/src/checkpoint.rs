//! Checkpoint files: an 8-byte little-endian header length, a JSON header
//! naming every parameter with its element offset and shape, then the
//! parameter values as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::Scalar;

pub const FORMAT: &str = "tubuda-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HeaderEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub params: Vec<HeaderEntry>,
}

pub fn to_bytes<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut params = Vec::with_capacity(store.len());
    for e in store.entries() {
        params.push(HeaderEntry {
            name: e.name.clone(),
            offset,
            shape: e.shape.clone(),
            trainable: e.trainable,
        });
        offset += e.data.len();
    }
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: "f32le".to_string(),
        params,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + offset * 4);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in store.entries() {
        for &v in &e.data {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let bad = |m: &str| TensorError::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(&format!("unsupported format {} v{}", header.format, header.version)));
    }
    let data = &bytes[8 + hlen..];
    let mut store = ParamStore::new();
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let raw = data
            .get(p.offset * 4..(p.offset + n) * 4)
            .ok_or_else(|| bad(&format!("data for `{}` out of range", p.name)))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        store.insert(&p.name, &p.shape, values, p.trainable)?;
    }
    Ok(store)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(store)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    from_bytes(&fs::read(path)?)
}

/// Load a checkpoint into an existing store; every entry of `store` must be
/// present in the file with the same shape.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let loaded: ParamStore<T> = load(path)?;
    for e in store.entries() {
        match loaded.id(&e.name) {
            Some(id) if loaded.shape(id) == e.shape.as_slice() => {}
            Some(id) => {
                return Err(TensorError::Checkpoint(format!(
                    "`{}` has shape {:?} in checkpoint, expected {:?}",
                    e.name,
                    loaded.shape(id),
                    e.shape
                )))
            }
            None => return Err(TensorError::UnknownParam(e.name.clone())),
        }
    }
    store.copy_from(&loaded)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", &[2, 2], vec![1.0, -2.5, 3.25, 0.0], true).unwrap();
        s.insert("a.rm", &[3], vec![0.1, 0.2, 0.3], false).unwrap();
        let bytes = to_bytes(&s).unwrap();
        let back: ParamStore<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.get(back.id("a.w").unwrap()), s.get(s.id("a.w").unwrap()));
        assert!(!back.entry(back.id("a.rm").unwrap()).trainable);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn header_is_json_after_length_prefix() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", &[1], vec![2.0], true).unwrap();
        let bytes = to_bytes(&s).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let h: Header = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(h.params[0].offset, 0);
        assert_eq!(&bytes[8 + n..], &2.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", &[4], vec![1.0; 4], true).unwrap();
        let bytes = to_bytes(&s).unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 2]).is_err());
        assert!(from_bytes::<f32>(&bytes[..5]).is_err());
    }
}
