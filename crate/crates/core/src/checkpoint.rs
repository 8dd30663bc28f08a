//! Named-array archive: a text manifest followed by row-major 32-bit
//! little-endian floats.
//!
//! ```text
//! cpfs3d-archive 1
//! meta epoch 3
//! entry backbone.sa1.0.fc.w 3 16
//! data
//! <binary payload, entries in manifest order>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::Mat;

const MAGIC: &str = "cpfs3d-archive 1";

/// Round every value to the nearest `f32`.
pub fn quantize_f32(m: &mut Mat) {
    m.mapv_inplace(|v| v as f32 as f64);
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub entries: BTreeMap<String, Mat>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(bad(format!(
            "{kind} {s:?} must be non-empty without whitespace"
        )));
    }
    Ok(())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing metadata key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| bad(format!("metadata {key:?} has malformed value {v:?}")))
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.entries
            .get(name)
            .ok_or_else(|| bad(format!("missing entry {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            check_token("metadata key", k)?;
            if v.contains('\n') {
                return Err(bad(format!("metadata {k:?} contains a newline")));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, m) in &self.entries {
            check_token("entry name", name)?;
            head.push_str(&format!("entry {name} {} {}\n", m.nrows(), m.ncols()));
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for m in self.entries.values() {
            for &v in m.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("manifest is not UTF-8"))?;
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(bad("not a cpfs3d archive"));
        }
        let mut meta = BTreeMap::new();
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "data" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("entry ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, r, c] = parts[..] else {
                    return Err(bad(format!("malformed entry line {line:?}")));
                };
                let r: usize = r
                    .parse()
                    .map_err(|_| bad(format!("bad row count in {line:?}")))?;
                let c: usize = c
                    .parse()
                    .map_err(|_| bad(format!("bad column count in {line:?}")))?;
                shapes.push((name.to_string(), r, c));
            } else {
                return Err(bad(format!("unexpected manifest line {line:?}")));
            }
        }
        let mut entries = BTreeMap::new();
        for (name, r, c) in shapes {
            let n = r * c * 4;
            if pos + n > bytes.len() {
                return Err(bad(format!("payload of {name:?} is truncated")));
            }
            let values: Vec<f64> = bytes[pos..pos + n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            pos += n;
            entries.insert(
                name,
                Array2::from_shape_vec((r, c), values).expect("shape matches length"),
            );
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut a = Archive::new();
        a.set_meta("epoch", 3);
        a.set_meta("rng", "12:34");
        a.insert("w", array![[0.1, -2.5, 3.0], [1e-7, 0.0, 7.25]]);
        a.insert("empty", Array2::zeros((0, 4)));
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(b.to_bytes().unwrap(), bytes);
        assert_eq!(b.meta_parse::<usize>("epoch").unwrap(), 3);
        assert_eq!(b.get("w").unwrap()[[0, 1]], -2.5);
    }

    #[test]
    fn quantized_values_survive_exactly() {
        let mut m = array![[0.1, 1.0 / 3.0]];
        quantize_f32(&mut m);
        let mut a = Archive::new();
        a.insert("m", m.clone());
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(b.get("m").unwrap(), &m);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let mut a = Archive::new();
        a.insert("w", array![[1.0, 2.0]]);
        let bytes = a.to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Archive::from_bytes(b"hello\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_bytes(&extra).is_err());
        assert!(a.get("missing").is_err());
    }
}
