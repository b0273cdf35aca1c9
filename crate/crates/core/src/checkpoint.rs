//! Shared checkpoint container: magic bytes `PVCKPT1\0`, a little-endian
//! u64 length-prefixed UTF-8 JSON header describing named tensors, then
//! raw little-endian tensor payloads. Round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"PVCKPT1\0";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, String>,
}

/// Write named tensors plus string metadata.
pub fn save<T: Scalar>(
    path: &Path,
    tensors: &IndexMap<String, ArrayD<T>>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, arr) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE.to_string(),
            shape: arr.shape().to_vec(),
            offset: payload.len() as u64,
        });
        let std_arr = arr.as_standard_layout();
        for &v in std_arr.iter() {
            v.write_le(&mut payload);
        }
    }
    let header = serde_json::to_vec(&Header { tensors: entries, meta: meta.clone() })
        .expect("header serialization");
    let p = path.display().to_string();
    let mut f = fs::File::create(path).map_err(|e| Error::io(&p, e))?;
    f.write_all(MAGIC).map_err(|e| Error::io(&p, e))?;
    f.write_all(&(header.len() as u64).to_le_bytes()).map_err(|e| Error::io(&p, e))?;
    f.write_all(&header).map_err(|e| Error::io(&p, e))?;
    f.write_all(&payload).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Load a checkpoint written with the same element type.
pub fn load<T: Scalar>(path: &Path) -> Result<(IndexMap<String, ArrayD<T>>, BTreeMap<String, String>)> {
    let p = path.display().to_string();
    let mut f = fs::File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(&p, e))?;
    if buf.len() < MAGIC.len() + 8 || &buf[..8] != MAGIC {
        return Err(Error::format(&p, "bad magic bytes; not a PVCKPT1 checkpoint"));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= buf.len()).ok_or_else(|| {
        Error::format(&p, format!("header length {hlen} exceeds file size {}", buf.len()))
    })?;
    let header: Header = serde_json::from_slice(&buf[16..hend])
        .map_err(|e| Error::format(&p, format!("header parse: {e}")))?;
    let payload = &buf[hend..];
    let mut tensors = IndexMap::new();
    for e in header.tensors {
        if e.dtype != T::DTYPE {
            return Err(Error::format(
                &p,
                format!("tensor `{}` has dtype {} but {} was requested", e.name, e.dtype, T::DTYPE),
            ));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * T::BYTES;
        if end > payload.len() {
            return Err(Error::format(&p, format!("truncated payload for tensor `{}`", e.name)));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = start + i * T::BYTES;
            data.push(T::read_le(&payload[off..off + T::BYTES]));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|err| Error::format(&p, format!("tensor `{}`: {err}", e.name)))?;
        tensors.insert(e.name, arr);
    }
    Ok((tensors, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut rng = crate::rng::stage_rng(3, "ckpt");
        let mut tensors = IndexMap::new();
        tensors.insert(
            "w1".to_string(),
            ArrayD::from_shape_simple_fn(IxDyn(&[3, 4]), || rng.gen::<f32>()),
        );
        tensors.insert(
            "b".to_string(),
            ArrayD::from_shape_simple_fn(IxDyn(&[4]), || rng.gen::<f32>() - 0.5),
        );
        let mut meta = BTreeMap::new();
        meta.insert("arch".to_string(), "test".to_string());
        save(&path, &tensors, &meta).unwrap();
        let (t2, m2) = load::<f32>(&path).unwrap();
        assert_eq!(meta, m2);
        for (k, v) in &tensors {
            let w = &t2[k];
            assert_eq!(v.shape(), w.shape());
            assert!(v.iter().zip(w.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // two saves are byte-identical
        let path2 = dir.path().join("b.ckpt");
        save(&path2, &tensors, &meta).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTMAGIC________").unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut tensors = IndexMap::new();
        tensors.insert("x".to_string(), ArrayD::<f32>::zeros(IxDyn(&[2])));
        save(&path, &tensors, &BTreeMap::new()).unwrap();
        assert!(load::<f64>(&path).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut tensors = IndexMap::new();
        tensors.insert("x".to_string(), ArrayD::<f32>::zeros(IxDyn(&[8])));
        save(&path, &tensors, &BTreeMap::new()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, bytes).unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
