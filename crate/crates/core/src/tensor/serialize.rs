//! Flat little-endian f32 arrays behind a JSON manifest.
//!
//! Layout: `b"PCGCTNSR"`, manifest length as u32 LE, manifest JSON, then the
//! concatenated tensor data. Offsets in the manifest count f32 elements from
//! the start of the data block.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PCGCTNSR";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub tunable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    entries: Vec<ManifestEntry>,
}

/// A named tensor with its frozen/tunable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub tunable: bool,
    pub tensor: Tensor,
}

pub fn write_tensors(meta: serde_json::Value, records: &[(&str, bool, &Tensor)]) -> Vec<u8> {
    let mut offset = 0;
    let entries = records
        .iter()
        .map(|(name, tunable, t)| {
            let e = ManifestEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
                offset,
                tunable: *tunable,
            };
            offset += t.len();
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { meta, entries }).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + manifest.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, _, t) in records {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_tensors(bytes: &[u8]) -> Result<(serde_json::Value, Vec<TensorRecord>)> {
    let err = |m: &str| Error::ParseError(format!("tensor file: {m}"));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(err("bad magic"));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + mlen).ok_or_else(|| err("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| err(&e.to_string()))?;
    let data = &bytes[12 + mlen..];
    if !data.len().is_multiple_of(4) {
        return Err(err("data block not a whole number of f32"));
    }
    let floats: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut records = Vec::with_capacity(manifest.entries.len());
    let mut expected = 0;
    for e in manifest.entries {
        let n: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(err("non-contiguous offsets"));
        }
        let slice = floats.get(e.offset..e.offset + n).ok_or_else(|| err("entry past end of data"))?;
        expected += n;
        records.push(TensorRecord {
            name: e.name,
            tunable: e.tunable,
            tensor: Tensor {
                shape: e.shape,
                data: slice.to_vec(),
            },
        });
    }
    if expected != floats.len() {
        return Err(err("trailing data"));
    }
    Ok((manifest.meta, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let a = Tensor {
            shape: vec![2, 2],
            data: vec![1.0, -0.5, 3.25, 0.0],
        };
        let b = Tensor {
            shape: vec![3],
            data: vec![7.0, 8.0, 9.0],
        };
        let bytes = write_tensors(serde_json::json!({"channels": 4}), &[("a", false, &a), ("b", true, &b)]);
        let (meta, recs) = read_tensors(&bytes).unwrap();
        assert_eq!(meta["channels"], 4);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].tensor, a);
        assert!(recs[1].tunable && !recs[0].tunable);
        assert_eq!(recs[1].tensor, b);
        assert!(read_tensors(&bytes[..bytes.len() - 4]).is_err());
        assert!(read_tensors(&bytes[1..]).is_err());
    }
}
