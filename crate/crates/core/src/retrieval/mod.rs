//! Geotagged image records, descriptor index, Recall@N and a synthetic
//! dataset generator.

mod image_io;
mod index;
mod synth;

pub use image_io::{
    image_to_tensor, load_batch, read_ppm, resize_bilinear, write_ppm, CHANNEL_MEAN, CHANNEL_STD,
};
pub use index::{
    build_index, describe_records, evaluate, first_hit_ranks, recall_at_n, recall_from_first_hits,
    Hit, IndexFile, RecallTable, DescriptorIndex, DEFAULT_RECALL_AT, DEFAULT_TOLERANCE_M,
};
pub use synth::{synth_dataset, SynthConfig, SynthDataset};

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Db,
    Query,
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "db" => Ok(Split::Db),
            "query" => Ok(Split::Query),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Path relative to the manifest's directory.
    pub image: String,
    pub x_m: f64,
    pub y_m: f64,
    pub split: Split,
}

impl ImageRecord {
    pub fn position(&self) -> (f64, f64) {
        (self.x_m, self.y_m)
    }

    pub fn distance_to(&self, p: (f64, f64)) -> f64 {
        (self.x_m - p.0).hypot(self.y_m - p.1)
    }

    pub fn path(&self, root: &Path) -> PathBuf {
        root.join(&self.image)
    }
}

fn validate_records(records: &[ImageRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Data(format!("duplicate id {}", r.id)));
        }
        if !r.x_m.is_finite() || !r.y_m.is_finite() {
            return Err(Error::Data(format!("non-finite position for {}", r.id)));
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    validate_records(&out)?;
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    validate_records(records)?;
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Records of one split, sorted by id.
pub fn split_records(records: &[ImageRecord], split: Split) -> Vec<ImageRecord> {
    let mut out: Vec<ImageRecord> = records.iter().filter(|r| r.split == split).cloned().collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, x: f64, split: Split) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            image: format!("images/{id}.ppm"),
            x_m: x,
            y_m: 0.0,
            split,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![rec("a", 1.5, Split::Db), rec("b", -2.0, Split::Query)];
        write_manifest(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"split\":\"db\""));
        assert_eq!(read_manifest(&path).unwrap(), recs);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        assert!(write_manifest(&path, &[rec("a", 0.0, Split::Db), rec("a", 1.0, Split::Db)]).is_err());
        assert!(write_manifest(&path, &[rec("a", f64::NAN, Split::Db)]).is_err());
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"id\":\"a\"}\n").unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }
}
