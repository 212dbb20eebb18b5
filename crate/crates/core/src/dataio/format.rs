//! On-disk formats: annotation JSONL and the binary feature sidecar.
//!
//! Annotation JSONL holds one JSON object per line:
//!
//! ```text
//! {"id":"u0001","feat":[0.1,-0.3],"scores":{"accuracy":[8,8,9,8,8],"fluency":[7,8,8,7,8]}}
//! {"id":"u0002","feat_ref":1,"scores":{"accuracy":[6,7,7,7,8]}}
//! ```
//!
//! `feat` carries the vector inline; `feat_ref` is a 0-based row index into
//! the sidecar. A record with neither has an empty feature vector, which is
//! enough for agreement analysis. Score keys are lowercase aspect names;
//! `completeness` and `total` are accepted and dropped.
//!
//! The sidecar is a little-endian matrix of `f32`:
//!
//! ```text
//! offset 0  : b"FEAT"
//! offset 4  : d as u32 LE
//! offset 8  : rows × d f32 LE, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{validate_dataset, Aspect, DataError, UtteranceRecord};

pub const FEATURE_MAGIC: [u8; 4] = *b"FEAT";

/// How feature vectors are resolved when loading an annotation file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Features inline in each line (`feat`).
    AnnotationJsonl,
    /// Features referenced by row (`feat_ref`) in a binary sidecar.
    FeaturesBinary { sidecar: PathBuf },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feat_ref: Option<u64>,
    scores: BTreeMap<String, Vec<i64>>,
}

const IGNORED_KEYS: [&str; 2] = ["completeness", "total"];

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads records from an annotation JSONL file, preserving file order.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<UtteranceRecord>, DataError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let matrix = match &format {
        DatasetFormat::AnnotationJsonl => None,
        DatasetFormat::FeaturesBinary { sidecar } => Some(read_feature_matrix(sidecar)?),
    };

    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnnotationLine =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;

        let features = match (parsed.feat, parsed.feat_ref) {
            (Some(_), Some(_)) => {
                return Err(DataError::Parse {
                    line: line_no,
                    message: "both `feat` and `feat_ref` given".into(),
                })
            }
            (Some(f), None) => f,
            (None, Some(row)) => {
                let Some((d, data)) = &matrix else {
                    return Err(DataError::Parse {
                        line: line_no,
                        message: "`feat_ref` requires a features sidecar".into(),
                    });
                };
                let row = row as usize;
                let rows = if *d == 0 { 0 } else { data.len() / d };
                if row >= rows {
                    return Err(DataError::Sidecar(format!(
                        "line {line_no}: feat_ref {row} beyond {rows} rows"
                    )));
                }
                data[row * d..(row + 1) * d]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect()
            }
            (None, None) => Vec::new(),
        };

        let mut scores = BTreeMap::new();
        for (key, list) in parsed.scores {
            if IGNORED_KEYS.contains(&key.to_ascii_lowercase().as_str()) {
                continue;
            }
            let aspect: Aspect = key.parse().map_err(|message| DataError::Parse {
                line: line_no,
                message,
            })?;
            scores.insert(aspect, list);
        }
        records.push(UtteranceRecord::new(parsed.id, features, scores)?);
    }
    validate_dataset(&records)?;
    Ok(records)
}

/// Writes records as annotation JSONL. With `by_reference`, each line gets
/// `feat_ref = <record index>` instead of inline features.
pub fn write_annotations(
    path: &Path,
    records: &[UtteranceRecord],
    by_reference: bool,
) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    for (i, r) in records.iter().enumerate() {
        let line = AnnotationLine {
            id: r.id.clone(),
            feat: (!by_reference).then(|| r.features.clone()),
            feat_ref: by_reference.then_some(i as u64),
            scores: r
                .scores
                .iter()
                .map(|(a, s)| (a.name().to_string(), s.iter().map(|&v| i64::from(v)).collect()))
                .collect(),
        };
        let json = serde_json::to_string(&line).expect("annotation line serializes");
        writeln!(out, "{json}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Writes a row-major `f32` feature matrix with the 8-byte header.
pub fn write_feature_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<(), DataError> {
    let d = rows.first().map_or(0, Vec::len);
    let mut bytes = Vec::with_capacity(8 + rows.len() * d * 4);
    bytes.extend_from_slice(&FEATURE_MAGIC);
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    for row in rows {
        if row.len() != d {
            return Err(DataError::Sidecar(format!(
                "row length {} differs from {d}",
                row.len()
            )));
        }
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads a feature sidecar, returning `(d, flat row-major data)`.
pub fn read_feature_matrix(path: &Path) -> Result<(usize, Vec<f32>), DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 8 || bytes[..4] != FEATURE_MAGIC {
        return Err(DataError::Sidecar(format!(
            "{}: missing FEAT header",
            path.display()
        )));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() % 4 != 0 || (d > 0 && (body.len() / 4) % d != 0) {
        return Err(DataError::Sidecar(format!(
            "{}: body of {} bytes is not a whole number of {d}-wide f32 rows",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((d, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        path
    }

    #[test]
    fn loads_single_inline_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "a.jsonl",
            &[r#"{"id":"u1","feat":[0.5,1.0],"scores":{"accuracy":[8,8,9,8,8]}}"#],
        );
        let recs = load_dataset(&p, DatasetFormat::AnnotationJsonl).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].rater_count(), 5);
        assert_eq!(recs[0].features, vec![0.5, 1.0]);
    }

    #[test]
    fn out_of_range_score_cites_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "a.jsonl",
            &[
                r#"{"id":"ok","feat":[0.0],"scores":{"accuracy":[8]}}"#,
                r#"{"id":"bad-07","feat":[0.0],"scores":{"accuracy":[11]}}"#,
            ],
        );
        let err = load_dataset(&p, DatasetFormat::AnnotationJsonl).unwrap_err();
        assert!(err.to_string().contains("bad-07"), "{err}");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "a.jsonl",
            &[
                r#"{"id":"a","feat":[0.0],"scores":{"accuracy":[8]}}"#,
                "",
                r#"{"id":"b","feat":[0.0],"scores":{"accuracy":[8]"#,
            ],
        );
        match load_dataset(&p, DatasetFormat::AnnotationJsonl).unwrap_err() {
            DataError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_feature_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "a.jsonl",
            &[
                r#"{"id":"a","feat":[0.0,1.0],"scores":{"accuracy":[8]}}"#,
                r#"{"id":"b","feat":[0.0],"scores":{"accuracy":[8]}}"#,
            ],
        );
        assert!(matches!(
            load_dataset(&p, DatasetFormat::AnnotationJsonl),
            Err(DataError::FeatureDim { .. })
        ));
    }

    #[test]
    fn ignores_completeness_and_rejects_unknown_aspects() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "a.jsonl",
            &[r#"{"id":"a","scores":{"accuracy":[8,7],"completeness":[10,10],"total":[8,8]}}"#],
        );
        let recs = load_dataset(&p, DatasetFormat::AnnotationJsonl).unwrap();
        assert_eq!(recs[0].scores.len(), 1);
        assert!(recs[0].features.is_empty());

        let p = write_lines(
            dir.path(),
            "b.jsonl",
            &[r#"{"id":"a","scores":{"rhythm":[8]}}"#],
        );
        assert!(load_dataset(&p, DatasetFormat::AnnotationJsonl).is_err());
    }

    #[test]
    fn feat_ref_without_sidecar_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "a.jsonl",
            &[r#"{"id":"a","feat_ref":0,"scores":{"accuracy":[8]}}"#],
        );
        assert!(load_dataset(&p, DatasetFormat::AnnotationJsonl).is_err());
    }

    #[test]
    fn sidecar_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_feature_matrix(&p, &[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"FEAT");
        assert_eq!(&bytes[4..8], &[2, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[12..16], &(-2.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 8 + 4 * 4);
        let (d, data) = read_feature_matrix(&p).unwrap();
        assert_eq!(d, 2);
        assert_eq!(data, vec![1.0, -2.0, 0.5, 0.25]);
    }

    #[test]
    fn truncated_sidecar_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let mut bytes = b"FEAT".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        fs::write(&p, bytes).unwrap();
        assert!(read_feature_matrix(&p).is_err());
    }

    #[test]
    fn roundtrip_through_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<UtteranceRecord> = (0..4)
            .map(|i| {
                UtteranceRecord::new(
                    format!("u{i}"),
                    vec![i as f64 * 0.5, -1.25],
                    [(Aspect::Accuracy, vec![5, 6, 7]), (Aspect::Prosody, vec![3, 3, 4])]
                        .into_iter()
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let ann = dir.path().join("a.jsonl");
        let bin = dir.path().join("features.bin");
        write_annotations(&ann, &recs, true).unwrap();
        write_feature_matrix(&bin, &recs.iter().map(|r| r.features.clone()).collect::<Vec<_>>())
            .unwrap();
        let back = load_dataset(&ann, DatasetFormat::FeaturesBinary { sidecar: bin }).unwrap();
        assert_eq!(back, recs);

        let inline = dir.path().join("b.jsonl");
        write_annotations(&inline, &recs, false).unwrap();
        assert_eq!(load_dataset(&inline, DatasetFormat::AnnotationJsonl).unwrap(), recs);
    }
}
