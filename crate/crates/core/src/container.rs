//! Tagged binary container used for shape models and trained regressors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic  b"EXPFITC1"
//!            u32       metadata length in bytes
//!            ...       metadata, UTF-8, one `key=value` per line
//!            u32       array count
//! per array: u16       name length
//!            ...       name, UTF-8
//!            u64       rows
//!            u64       cols
//!            ...       rows*cols f64 values, row-major
//! ```
//!
//! Metadata always carries `version` and `endianness=little`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EXPFITC1";
pub const VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<(String, DMatrix<f64>)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("kind".to_string(), kind.to_string());
        metadata.insert("version".to_string(), VERSION.to_string());
        metadata.insert("endianness".to_string(), "little".to_string());
        Container {
            metadata,
            arrays: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: &str, array: DMatrix<f64>) {
        self.arrays.push((name.to_string(), array));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format {
                offset: 8,
                message: format!("metadata key `{key}` missing"),
            })
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::Format {
            offset: 8,
            message: format!("metadata `{key}={raw}` is not an unsigned integer"),
        })
    }

    pub fn array(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("array `{name}` missing"),
            })
    }

    /// Checks the `kind` tag.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let found = self.meta("kind")?;
        if found != kind {
            return Err(Error::Format {
                offset: 8,
                message: format!("expected container kind `{kind}`, found `{found}`"),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    out.extend_from_slice(&a[(i, j)].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic header")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic header {magic:?}"),
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_start = r.pos;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta = std::str::from_utf8(meta_bytes).map_err(|e| Error::Format {
            offset: meta_start + e.valid_up_to(),
            message: "metadata is not UTF-8".to_string(),
        })?;
        let mut metadata = BTreeMap::new();
        let mut line_offset = meta_start;
        for line in meta.lines() {
            if !line.is_empty() {
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                    offset: line_offset,
                    message: format!("metadata line `{line}` lacks `=`"),
                })?;
                metadata.insert(k.to_string(), v.to_string());
            }
            line_offset += line.len() + 1;
        }
        match metadata.get("endianness").map(String::as_str) {
            Some("little") => {}
            other => {
                return Err(Error::Format {
                    offset: meta_start,
                    message: format!("unsupported endianness {other:?}"),
                })
            }
        }
        if metadata.get("version").map(String::as_str) != Some(VERSION) {
            return Err(Error::Format {
                offset: meta_start,
                message: format!("unsupported version {:?}", metadata.get("version")),
            });
        }
        let count = r.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16("array name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "array name")?)
                .map_err(|_| Error::Format {
                    offset: name_at,
                    message: "array name is not UTF-8".to_string(),
                })?
                .to_string();
            let rows = r.u64("row count")? as usize;
            let cols = r.u64("column count")? as usize;
            let values_at = r.pos;
            let n = rows.checked_mul(cols).filter(|n| n.checked_mul(8).is_some());
            let n = n.ok_or(Error::Format {
                offset: values_at,
                message: format!("array `{name}` shape {rows}x{cols} overflows"),
            })?;
            let raw = r.take(n * 8, "array values")?;
            let mut data = Vec::with_capacity(n);
            for chunk in raw.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
            }
            arrays.push((name, DMatrix::from_row_slice(rows, cols, &data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Container { metadata, arrays })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format {
            offset: self.pos,
            message: format!("truncated while reading {what}"),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.set("rows", 2);
        c.push("a", DMatrix::from_row_slice(2, 3, &[1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]));
        c.push("b", DMatrix::zeros(0, 4));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let a = back.array("a").unwrap();
        assert_eq!(a[(0, 1)].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.meta_usize("rows").unwrap(), 2);
    }

    #[test]
    fn bad_magic_names_offset_zero() {
        let mut bytes = sample().to_bytes();
        bytes[3] ^= 0xff;
        match Container::from_bytes(&bytes).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 5];
        match Container::from_bytes(cut).unwrap_err() {
            Error::Format { offset, message } => {
                assert!(offset > 8);
                assert!(message.contains("truncated"));
            }
            e => panic!("unexpected {e}"),
        }
    }
}
