//! Slice records and the JSON-lines manifest.
//!
//! Each manifest line is one object:
//!
//! ```text
//! {"volume_id":3,"slice_index":7,"data_path":"slices/v0003_s007.msvd",
//!  "annotation":"full","subclass_presence":[true,false,true]}
//! ```
//!
//! `annotation` is one of `full`, `negative`, `weak`. `subclass_presence`
//! holds one flag per tumor class 1, 2, 3. Lines end with `\n`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotation {
    /// Tumor slice with a pixel mask.
    Full,
    /// Slice without tumor; its mask is the zero matrix.
    Negative,
    /// Tumor slice with slice-level labels only.
    Weak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub volume_id: u32,
    pub slice_index: u32,
    pub data_path: String,
    pub annotation: Annotation,
    pub subclass_presence: Vec<bool>,
}

impl SliceRecord {
    pub fn has_tumor(&self) -> bool {
        self.subclass_presence.iter().any(|&p| p)
    }

    pub fn check(&self) -> Result<()> {
        if self.annotation == Annotation::Negative && self.has_tumor() {
            return Err(Error::format(
                "manifest",
                format!("negative slice {} carries tumor flags", self.data_path),
            ));
        }
        if self.annotation == Annotation::Weak && !self.has_tumor() {
            return Err(Error::format(
                "manifest",
                format!("weak slice {} has no tumor flag", self.data_path),
            ));
        }
        Ok(())
    }
}

pub fn write_manifest<W: Write>(mut out: W, records: &[SliceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<manifest>", e))?;
    }
    Ok(())
}

pub fn read_manifest<R: std::io::Read>(input: R) -> Result<Vec<SliceRecord>> {
    let mut out = Vec::new();
    for (no, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<manifest>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SliceRecord =
            serde_json::from_str(&line).map_err(|e| Error::format("manifest", format!("line {}: {e}", no + 1)))?;
        r.check()?;
        out.push(r);
    }
    Ok(out)
}

pub fn save_manifest(path: &Path, records: &[SliceRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_manifest(&mut buf, records)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<SliceRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<SliceRecord> {
        vec![
            SliceRecord {
                volume_id: 3,
                slice_index: 7,
                data_path: "slices/v0003_s007.msvd".into(),
                annotation: Annotation::Full,
                subclass_presence: vec![true, false, true],
            },
            SliceRecord {
                volume_id: 4,
                slice_index: 0,
                data_path: "slices/v0004_s000.msvd".into(),
                annotation: Annotation::Negative,
                subclass_presence: vec![false; 3],
            },
        ]
    }

    #[test]
    fn manifest_round_trip_is_bit_exact() {
        let recs = sample();
        let mut a = Vec::new();
        write_manifest(&mut a, &recs).unwrap();
        let back = read_manifest(&a[..]).unwrap();
        assert_eq!(back, recs);
        let mut b = Vec::new();
        write_manifest(&mut b, &back).unwrap();
        assert_eq!(a, b);
        let first = std::str::from_utf8(&a).unwrap().lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"volume_id":3,"slice_index":7,"data_path":"slices/v0003_s007.msvd","annotation":"full","subclass_presence":[true,false,true]}"#
        );
    }

    #[test]
    fn rejects_inconsistent_records() {
        let bad = r#"{"volume_id":1,"slice_index":0,"data_path":"x","annotation":"negative","subclass_presence":[false,true,false]}"#;
        assert!(read_manifest(bad.as_bytes()).is_err());
        assert!(read_manifest("{not json}".as_bytes()).is_err());
    }
}
