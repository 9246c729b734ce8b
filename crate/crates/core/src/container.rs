//! On-disk container shared by dataset files and checkpoints.
//!
//! Layout:
//!
//! ```text
//! [0..8)      magic, identifies the file kind
//! [8..16)     manifest length N, u64 little-endian
//! [16..16+N)  manifest, UTF-8 JSON
//! [16+N..)    blob: raw little-endian arrays at the offsets the manifest lists
//! ```
//!
//! The manifest carries `format_version`, an `arrays` table
//! (`name`/`shape`/`dtype`/`offset`/`length`, offsets relative to the blob)
//! and a SHA-256 `checksum` of the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

pub(crate) const DTYPE_F32: &str = "f32le";
pub(crate) const DTYPE_U8: &str = "u8";

#[derive(Default)]
pub(crate) struct BlobWriter {
    entries: Vec<ArrayEntry>,
    blob: Vec<u8>,
}

impl BlobWriter {
    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f32>) {
        let offset = self.blob.len();
        for x in data {
            self.blob.extend_from_slice(&x.to_le_bytes());
        }
        self.entries.push(ArrayEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: DTYPE_F32.to_string(),
            offset,
            length: self.blob.len() - offset,
        });
    }

    pub fn push_u8(&mut self, name: &str, shape: &[usize], data: &[u8]) {
        let offset = self.blob.len();
        self.blob.extend_from_slice(data);
        self.entries.push(ArrayEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: DTYPE_U8.to_string(),
            offset,
            length: data.len(),
        });
    }

    /// Adds `arrays` and `checksum` to `manifest` and writes the file.
    pub fn write(self, path: &Path, magic: &[u8; 8], mut manifest: Map<String, Value>) -> Result<()> {
        manifest.insert("arrays".into(), serde_json::to_value(&self.entries)?);
        manifest.insert("checksum".into(), Value::String(sha256_hex(&self.blob)));
        let json = serde_json::to_vec(&Value::Object(manifest))?;
        let mut bytes = Vec::with_capacity(HEADER_LEN + json.len() + self.blob.len());
        bytes.extend_from_slice(magic);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&self.blob);
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

pub(crate) struct BlobReader {
    pub manifest: Map<String, Value>,
    entries: Vec<ArrayEntry>,
    blob: Vec<u8>,
    base: usize,
}

impl BlobReader {
    pub fn open(path: &Path, magic: &[u8; 8], expected_version: u32) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?, magic, expected_version)
    }

    pub fn from_bytes(bytes: Vec<u8>, magic: &[u8; 8], expected_version: u32) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(parse_err(bytes.len(), "file shorter than the 16-byte header"));
        }
        if &bytes[..8] != magic {
            return Err(parse_err(0, "bad magic bytes"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let base = HEADER_LEN
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| parse_err(8, format!("manifest length {len} runs past end of file")))?;
        let manifest: Value = serde_json::from_slice(&bytes[HEADER_LEN..base]).map_err(|e| {
            parse_err(HEADER_LEN, format!("manifest is not valid JSON: {e}"))
        })?;
        let Value::Object(manifest) = manifest else {
            return Err(parse_err(HEADER_LEN, "manifest is not a JSON object"));
        };

        let found = manifest
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| parse_err(HEADER_LEN, "manifest lacks format_version"))?;
        if found != expected_version as u64 {
            return Err(Error::Version {
                found: found.min(u32::MAX as u64) as u32,
                expected: expected_version,
            });
        }

        let entries: Vec<ArrayEntry> = manifest
            .get("arrays")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| parse_err(HEADER_LEN, format!("bad array table: {e}")))?
            .ok_or_else(|| parse_err(HEADER_LEN, "manifest lacks an array table"))?;

        let blob = bytes[base..].to_vec();
        for e in &entries {
            let width = match e.dtype.as_str() {
                DTYPE_F32 => 4,
                DTYPE_U8 => 1,
                other => return Err(parse_err(HEADER_LEN, format!("array {} has unknown dtype {other}", e.name))),
            };
            let numel: usize = e.shape.iter().product();
            if numel * width != e.length {
                return Err(parse_err(
                    base + e.offset,
                    format!("array {} length {} does not match shape {:?}", e.name, e.length, e.shape),
                ));
            }
            if e.offset.checked_add(e.length).is_none_or(|end| end > blob.len()) {
                return Err(parse_err(
                    base + e.offset,
                    format!("array {} runs past end of file (truncated?)", e.name),
                ));
            }
        }

        let recorded = manifest
            .get("checksum")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(HEADER_LEN, "manifest lacks checksum"))?
            .to_string();
        let actual = sha256_hex(&blob);
        if recorded != actual {
            return Err(Error::Checksum { recorded, actual });
        }

        Ok(Self {
            manifest,
            entries,
            blob,
            base,
        })
    }

    fn entry(&self, name: &str) -> Result<&ArrayEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| parse_err(HEADER_LEN, format!("array {name} missing from manifest")))
    }

    pub fn shape(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.entry(name)?.shape.clone())
    }

    pub fn f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let e = self.entry(name)?;
        if e.dtype != DTYPE_F32 {
            return Err(parse_err(self.base + e.offset, format!("array {name} is not {DTYPE_F32}")));
        }
        let bytes = &self.blob[e.offset..e.offset + e.length];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((e.shape.clone(), data))
    }

    pub fn u8(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let e = self.entry(name)?;
        if e.dtype != DTYPE_U8 {
            return Err(parse_err(self.base + e.offset, format!("array {name} is not {DTYPE_U8}")));
        }
        Ok((e.shape.clone(), self.blob[e.offset..e.offset + e.length].to_vec()))
    }

    /// Deserializes a manifest field.
    pub fn field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .manifest
            .get(key)
            .cloned()
            .ok_or_else(|| parse_err(HEADER_LEN, format!("manifest lacks {key}")))?;
        serde_json::from_value(v).map_err(|e| parse_err(HEADER_LEN, format!("manifest field {key}: {e}")))
    }
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTFILE";

    fn sample(dir: &Path) -> std::path::PathBuf {
        let path = dir.join("c.bin");
        let mut w = BlobWriter::default();
        w.push_f32("a", &[2, 2], [1.0, -2.5, 3.0, f32::MIN_POSITIVE]);
        w.push_u8("b", &[3], &[0, 1, 255]);
        let mut m = Map::new();
        m.insert("format_version".into(), 1.into());
        w.write(&path, MAGIC, m).unwrap();
        path
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = BlobReader::open(&sample(dir.path()), MAGIC, 1).unwrap();
        assert_eq!(r.f32("a").unwrap().1, vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE]);
        assert_eq!(r.u8("b").unwrap(), (vec![3], vec![0, 1, 255]));
        assert!(r.f32("b").is_err());
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = std::fs::read(sample(dir.path())).unwrap();
        for cut in [4, 20, bytes.len() - 1] {
            let err = BlobReader::from_bytes(bytes[..cut].to_vec(), MAGIC, 1).err().unwrap();
            assert!(matches!(err, Error::Parse { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_and_checksum_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path());
        assert!(matches!(
            BlobReader::open(&path, MAGIC, 2).err().unwrap(),
            Error::Version { found: 1, expected: 2 }
        ));
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(
            BlobReader::from_bytes(bytes, MAGIC, 1).err().unwrap(),
            Error::Checksum { .. }
        ));
    }
}
