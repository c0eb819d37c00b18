//! Line-delimited JSON annotation store.
//!
//! One record per line with `schema_version` as the first field. Full
//! writes go through a temporary file and an atomic rename.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::lift::OrientedBox3D;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt: String,
    pub iterations: u32,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub schema_version: u64,
    pub frame_id: u32,
    pub instance_id: u32,
    pub class_text: String,
    pub point_indices: Vec<usize>,
    #[serde(rename = "box")]
    pub bbox: OrientedBox3D,
    pub provenance: Provenance,
    pub created_at: DateTime<Utc>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.class_text.trim().is_empty() {
            return Err(DatasetError::Data(format!(
                "frame {} instance {}: empty class text",
                self.frame_id, self.instance_id
            )));
        }
        Ok(())
    }

    /// Checks indices against the point count of the record's frame.
    pub fn validate_indices(&self, point_count: usize) -> Result<(), DatasetError> {
        match self.point_indices.iter().find(|&&i| i >= point_count) {
            Some(bad) => Err(DatasetError::Data(format!(
                "frame {} instance {}: point index {bad} out of range for {point_count} points",
                self.frame_id, self.instance_id
            ))),
            None => Ok(()),
        }
    }
}

fn write_lines(out: &mut impl Write, records: &[AnnotationRecord]) -> Result<(), DatasetError> {
    for r in records {
        r.validate()?;
        let line = serde_json::to_string(r).map_err(|e| DatasetError::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| DatasetError::io("<annotations>", e))?;
    }
    Ok(())
}

/// Replaces the file at `path` atomically.
pub fn save_annotations(records: &[AnnotationRecord], path: &Path) -> Result<(), DatasetError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let file = File::create(&tmp).map_err(|e| DatasetError::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        write_lines(&mut w, records)?;
        let file = w.into_inner().map_err(|e| DatasetError::io(&tmp, e.into_error()))?;
        file.sync_all().map_err(|e| DatasetError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| DatasetError::io(path, e))
}

/// Appends records to the end of `path`, creating it if needed.
pub fn append_annotations(records: &[AnnotationRecord], path: &Path) -> Result<(), DatasetError> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| DatasetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_lines(&mut w, records)?;
    w.flush().map_err(|e| DatasetError::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| DatasetError::parse(path, line_no, e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| DatasetError::parse(path, line_no, "missing schema_version"))?;
        if version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersion {
                found: version,
                expected: SCHEMA_VERSION,
                line: line_no,
            });
        }
        let record: AnnotationRecord =
            serde_json::from_value(value).map_err(|e| DatasetError::parse(path, line_no, e.to_string()))?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(frame: u32, instance: u32) -> AnnotationRecord {
        AnnotationRecord {
            schema_version: SCHEMA_VERSION,
            frame_id: frame,
            instance_id: instance,
            class_text: "balloon".into(),
            point_indices: vec![1, 5, 9],
            bbox: OrientedBox3D { cx: 1.0, cy: 2.0, cz: 3.0, dx: 0.5, dy: 0.6, dz: 0.7, yaw: 0.1 },
            provenance: Provenance { prompt: "label the balloon".into(), iterations: 2, backend: "mock".into() },
            created_at: DateTime::from_timestamp(1_700_000_000, 123_000_000).unwrap(),
        }
    }

    #[test]
    fn round_trip_three() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        let recs = vec![record(0, 0), record(0, 1), record(1, 0)];
        save_annotations(&recs, &path).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), recs);
        let first_line = fs::read_to_string(&path).unwrap();
        assert!(first_line.starts_with("{\"schema_version\":1,"));
        assert!(first_line.contains("\"box\":{\"cx\":1.0"));
    }

    #[test]
    fn empty_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        save_annotations(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(load_annotations(&path).unwrap().is_empty());
    }

    #[test]
    fn unknown_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let mut v = serde_json::to_value(record(0, 0)).unwrap();
        v["schema_version"] = 99.into();
        fs::write(&path, format!("{v}\n")).unwrap();
        assert!(matches!(
            load_annotations(&path),
            Err(DatasetError::SchemaVersion { found: 99, line: 1, .. })
        ));
    }

    #[test]
    fn append_extends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        append_annotations(&[record(0, 0)], &path).unwrap();
        append_annotations(&[record(1, 0)], &path).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), vec![record(0, 0), record(1, 0)]);
    }

    #[test]
    fn rejects_empty_class_and_unwritable_path() {
        let mut r = record(0, 0);
        r.class_text = " ".into();
        let dir = tempfile::tempdir().unwrap();
        assert!(save_annotations(&[r], &dir.path().join("a.jsonl")).is_err());
        assert!(save_annotations(&[record(0, 0)], &dir.path().join("missing/dir/a.jsonl")).is_err());
        assert!(record(0, 0).validate_indices(9).is_err());
        assert!(record(0, 0).validate_indices(10).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn arbitrary_records_round_trip(
            recs in prop::collection::vec(
                (any::<u32>(), any::<u32>(), "[a-z ]{0,12}[a-z]", prop::collection::vec(any::<usize>(), 0..20),
                 prop::array::uniform7(-1e6..1e6f64), any::<u32>(), 0i64..4_000_000_000),
                0..8)
        ) {
            let recs: Vec<AnnotationRecord> = recs
                .into_iter()
                .map(|(f, i, class_text, point_indices, b, it, ts)| AnnotationRecord {
                    schema_version: SCHEMA_VERSION,
                    frame_id: f,
                    instance_id: i,
                    class_text,
                    point_indices,
                    bbox: OrientedBox3D { cx: b[0], cy: b[1], cz: b[2], dx: b[3], dy: b[4], dz: b[5], yaw: b[6] },
                    provenance: Provenance { prompt: "p".into(), iterations: it, backend: "b".into() },
                    created_at: DateTime::from_timestamp(ts, 0).unwrap(),
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.jsonl");
            save_annotations(&recs, &path).unwrap();
            prop_assert_eq!(load_annotations(&path).unwrap(), recs);
        }
    }
}
