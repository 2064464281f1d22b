//! Binary framing shared by checkpoint and index files:
//! 4-byte magic, little-endian `u32` version, little-endian `u64` metadata
//! length, UTF-8 JSON metadata, then a raw little-endian tensor payload laid
//! out as the metadata's tensor manifest describes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Byte offset into the payload.
    pub offset: u64,
}

const HEADER_LEN: usize = 4 + 4 + 8;

pub(crate) fn frame(magic: &[u8; 4], version: u32, meta: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(payload);
    out
}

/// Splits a framed file into `(metadata, payload)` after checking magic and version.
pub(crate) fn unframe<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Version {
            found,
            expected: version,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[HEADER_LEN..];
    if meta_len > rest.len() as u64 {
        return Err(Error::Format(format!(
            "metadata length {meta_len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    Ok(rest.split_at(meta_len as usize))
}

/// Serialises tensors back to back, returning the manifest and payload.
pub(crate) fn pack<'a>(
    tensors: impl IntoIterator<Item = (String, &'a Tensor)>,
    dtype: Dtype,
) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        manifest.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype,
            offset: payload.len() as u64,
        });
        match dtype {
            Dtype::F64 => t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => t
                .data()
                .iter()
                .for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    (manifest, payload)
}

/// Reads every manifest entry from `payload`, promoting to `f64`. The entries
/// must tile the payload exactly, in order.
pub(crate) fn unpack(manifest: &[TensorEntry], payload: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cursor = 0usize;
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest {
        if e.offset != cursor as u64 {
            return Err(Error::Format(format!(
                "tensor {} at offset {} but expected {cursor}",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let bytes = n * e.dtype.width();
        let end = cursor
            .checked_add(bytes)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::Format(format!("payload truncated in tensor {}", e.name)))?;
        let raw = &payload[cursor..end];
        let data: Vec<f64> = match e.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::Format(format!("tensor {}: {err}", e.name)))?;
        out.push((e.name.clone(), t));
        cursor = end;
    }
    if cursor != payload.len() {
        return Err(Error::Format(format!(
            "{} trailing payload bytes",
            payload.len() - cursor
        )));
    }
    Ok(out)
}

/// Writes `bytes` to a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip_and_errors() {
        let bytes = frame(b"TEST", 3, b"{}", &[1, 2, 3]);
        let (meta, payload) = unframe(&bytes, b"TEST", 3).unwrap();
        assert_eq!(meta, b"{}");
        assert_eq!(payload, &[1, 2, 3]);

        assert!(matches!(unframe(&bytes, b"NOPE", 3), Err(Error::Format(_))));
        assert!(matches!(unframe(&bytes, b"TEST", 4), Err(Error::Version { found: 3, expected: 4 })));
        assert!(matches!(unframe(&bytes[..10], b"TEST", 3), Err(Error::Format(_))));
        assert!(matches!(unframe(&bytes[..17], b"TEST", 3), Err(Error::Format(_))));
    }

    #[test]
    fn pack_unpack_promotes_f32() {
        let t = Tensor::new(vec![2, 2], vec![0.1, -2.0, 3.5, 1e-3]).unwrap();
        let (m64, p64) = pack([("a".to_string(), &t)], Dtype::F64);
        assert_eq!(unpack(&m64, &p64).unwrap()[0].1, t);
        let (m32, p32) = pack([("a".to_string(), &t)], Dtype::F32);
        assert_eq!(p32.len(), 16);
        let back = &unpack(&m32, &p32).unwrap()[0].1;
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(unpack(&m64, &p64[..20]).is_err());
        let mut longer = p64.clone();
        longer.push(0);
        assert!(unpack(&m64, &longer).is_err());
    }
}
