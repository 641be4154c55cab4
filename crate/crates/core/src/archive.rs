//! Single-file archive of named text blobs and dense little-endian arrays.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "DPARCH01"
//! count      u32 LE
//! entries    count × { name_len u16 LE, name utf-8, kind u8, payload }
//!   kind 0   text:  len u64 LE, utf-8 bytes
//!   kind 1   array: dtype u8 (0 = f32, 1 = f64), ndim u32 LE (= 2),
//!                   dims ndim × u64 LE, data rows·cols little-endian floats
//! trailer    32 bytes  SHA-256 over every preceding byte
//! ```
//!
//! Entries are written in name order so identical contents give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, Matrix, Real};

const MAGIC: &[u8; 8] = b"DPARCH01";

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Text(String),
    Array {
        dtype: DType,
        rows: usize,
        cols: usize,
        // widened to f64; f32 → f64 → f32 is exact
        data: Vec<f64>,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn put_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.entries.insert(name.into(), Entry::Text(text.into()));
    }

    pub fn put_matrix<T: Real>(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        self.entries.insert(
            name.into(),
            Entry::Array {
                dtype: T::DTYPE,
                rows: m.rows(),
                cols: m.cols(),
                data: m.as_slice().iter().map(|x| x.f64()).collect(),
            },
        );
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            Some(_) => Err(Error::Input(format!("archive entry {name} is not text"))),
            None => Err(Error::Input(format!("archive has no entry {name}"))),
        }
    }

    pub fn matrix<T: Real>(&self, name: &str) -> Result<Matrix<T>> {
        match self.entries.get(name) {
            Some(Entry::Array {
                rows, cols, data, ..
            }) => Ok(Matrix::from_vec(
                *rows,
                *cols,
                data.iter().map(|&x| T::lit(x)).collect(),
            )),
            Some(_) => Err(Error::Input(format!("archive entry {name} is not an array"))),
            None => Err(Error::Input(format!("archive has no entry {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Text(s) => {
                    out.push(0);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
                Entry::Array {
                    dtype,
                    rows,
                    cols,
                    data,
                } => {
                    out.push(1);
                    out.push(match dtype {
                        DType::F32 => 0,
                        DType::F64 => 1,
                    });
                    out.extend_from_slice(&2u32.to_le_bytes());
                    out.extend_from_slice(&(*rows as u64).to_le_bytes());
                    out.extend_from_slice(&(*cols as u64).to_le_bytes());
                    for &x in data {
                        match dtype {
                            DType::F32 => (x as f32).write_le(&mut out),
                            DType::F64 => x.write_le(&mut out),
                        }
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fmt = |message: &str| Error::Format {
            path: origin.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(fmt("not an archive (bad magic or truncated)"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Checksum(origin.to_path_buf()));
        }
        let mut cur = Cursor { buf: body, pos: 8 };
        let count = cur.u32().ok_or_else(|| fmt("truncated header"))?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u16().ok_or_else(|| fmt("truncated name"))? as usize;
            let name = std::str::from_utf8(cur.take(name_len).ok_or_else(|| fmt("truncated name"))?)
                .map_err(|_| fmt("entry name is not utf-8"))?
                .to_string();
            let kind = cur.u8().ok_or_else(|| fmt("truncated entry"))?;
            let entry = match kind {
                0 => {
                    let len = cur.u64().ok_or_else(|| fmt("truncated text"))? as usize;
                    let raw = cur.take(len).ok_or_else(|| fmt("truncated text"))?;
                    Entry::Text(
                        String::from_utf8(raw.to_vec()).map_err(|_| fmt("text is not utf-8"))?,
                    )
                }
                1 => {
                    let dtype = match cur.u8().ok_or_else(|| fmt("truncated array"))? {
                        0 => DType::F32,
                        1 => DType::F64,
                        _ => return Err(fmt("unknown dtype")),
                    };
                    let ndim = cur.u32().ok_or_else(|| fmt("truncated array"))?;
                    if ndim != 2 {
                        return Err(fmt("only 2-d arrays are supported"));
                    }
                    let rows = cur.u64().ok_or_else(|| fmt("truncated shape"))? as usize;
                    let cols = cur.u64().ok_or_else(|| fmt("truncated shape"))? as usize;
                    let width = dtype.width();
                    let raw = cur
                        .take(rows * cols * width)
                        .ok_or_else(|| fmt("truncated array data"))?;
                    let data = raw
                        .chunks_exact(width)
                        .map(|c| match dtype {
                            DType::F32 => f32::read_le(c) as f64,
                            DType::F64 => f64::read_le(c),
                        })
                        .collect();
                    Entry::Array {
                        dtype,
                        rows,
                        cols,
                        data,
                    }
                }
                _ => return Err(fmt("unknown entry kind")),
            };
            entries.insert(name, entry);
        }
        if cur.pos != body.len() {
            return Err(fmt("trailing bytes after last entry"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized archive.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 0usize..5,
            cols in 1usize..5,
            seed in proptest::collection::vec(-1e6f32..1e6f32, 25),
            text in ".{0,40}",
        ) {
            let m32 = Matrix::from_vec(rows, cols, seed[..rows * cols].to_vec());
            let m64 = m32.map(|x| x * 1.5).cast::<f64>().map(|x| x + 1e-12);
            let mut a = Archive::new();
            a.put_matrix("a32", &m32);
            a.put_matrix("a64", &m64);
            a.put_text("meta", text.clone());
            let back = Archive::from_bytes(&a.to_bytes(), Path::new("mem")).unwrap();
            let r32: Matrix<f32> = back.matrix("a32").unwrap();
            let r64: Matrix<f64> = back.matrix("a64").unwrap();
            let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&r32), bits(&m32));
            let bits64 = |m: &Matrix<f64>| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits64(&r64), bits64(&m64));
            prop_assert_eq!(back.text("meta").unwrap(), text.as_str());
        }
    }

    #[test]
    fn corruption_is_a_checksum_error() {
        let mut a = Archive::new();
        a.put_matrix("w", &Matrix::<f32>::filled(2, 2, 0.5));
        let mut bytes = a.to_bytes();
        bytes[20] ^= 0x40;
        assert!(matches!(
            Archive::from_bytes(&bytes, Path::new("x")),
            Err(Error::Checksum(_))
        ));
        assert!(matches!(
            Archive::from_bytes(b"garbage", Path::new("x")),
            Err(Error::Format { .. })
        ));
    }
}
