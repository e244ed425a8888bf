//! On-disk formats: feature sequences, annotations, proposals, detections
//! and metric reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{AnnotationSet, MapReport, VideoAnnotations};
use crate::postprocess::{Detection, ProposalSet, VideoClassScores};
use crate::cascade::Proposal;
use crate::tensor::Tensor;

pub const TALF_MAGIC: &[u8; 4] = b"TALF";
pub const TALF_VERSION: u32 = 1;
pub const SUBMISSION_VERSION: &str = "VERSION 1.3";

fn json_err(path: &Path, source: serde_json::Error) -> Error {
    Error::Json {
        path: path.into(),
        source,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| json_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

// -------------------------------------------------------------------
// features
// -------------------------------------------------------------------

/// Binary encoding: magic, version, `T`, `D`, then `T·D` little-endian f32.
pub fn features_to_bytes(x: &Tensor) -> Result<Vec<u8>> {
    let (t, d) = x.dims2()?;
    let mut out = Vec::with_capacity(16 + 4 * t * d);
    out.extend_from_slice(TALF_MAGIC);
    for v in [TALF_VERSION, t as u32, d as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in x.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != TALF_MAGIC {
        return Err(Error::format(path, "bad magic, expected \"TALF\""));
    }
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(path, format!("truncated header at offset {off}")))
    };
    let version = u32_at(4)?;
    if version != TALF_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (t, d) = (u32_at(8)? as usize, u32_at(12)? as usize);
    let need = 16 + 4 * t * d;
    if bytes.len() < need {
        // offset of the first missing value
        let off = 16 + (bytes.len() - 16) / 4 * 4;
        return Err(Error::format(path, format!("truncated payload at offset {off}")));
    }
    if bytes.len() > need {
        return Err(Error::format(path, format!("{} trailing bytes after payload", bytes.len() - need)));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, format!("non-finite value at row {}, column {}", i / d, i % d)));
    }
    Tensor::matrix(t, d, data)
}

fn features_from_csv(text: &str, path: &Path) -> Result<Tensor> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(path, format!("line {}: bad value {s:?}", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    Tensor::from_rows(&rows).map_err(|e| Error::format(path, e.to_string()))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads a `T × D` feature matrix; `.csv` files are parsed as text.
pub fn load_features(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_csv(path) {
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
        features_from_csv(&text, path)
    } else {
        features_from_bytes(&bytes, path)
    }
}

pub fn save_features(path: &Path, x: &Tensor) -> Result<()> {
    if is_csv(path) {
        let (_, d) = x.dims2()?;
        let mut s = String::new();
        for row in x.data().chunks(d.max(1)) {
            let cells: Vec<String> = row.iter().map(|v| format!("{}", *v as f32)).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        write_text(path, &s)
    } else {
        let bytes = features_to_bytes(x)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// `<dir>/<video_id>.talf`, or `.csv` when only that exists.
pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    let bin = dir.join(format!("{video_id}.talf"));
    let csv = dir.join(format!("{video_id}.csv"));
    if !bin.exists() && csv.exists() {
        csv
    } else {
        bin
    }
}

// -------------------------------------------------------------------
// annotations
// -------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    database: BTreeMap<String, VideoAnnotations>,
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let f: AnnotationFile = read_json(path)?;
    let set = AnnotationSet { videos: f.database };
    set.validate()?;
    Ok(set)
}

pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    write_json(
        path,
        &AnnotationFile {
            database: set.videos.clone(),
        },
    )
}

// -------------------------------------------------------------------
// class scores and proposals
// -------------------------------------------------------------------

/// `{video_id: {class: score}}`.
pub fn load_class_scores(path: &Path) -> Result<BTreeMap<String, VideoClassScores>> {
    let raw: BTreeMap<String, BTreeMap<String, f64>> = read_json(path)?;
    let out: BTreeMap<String, VideoClassScores> = raw
        .into_iter()
        .map(|(vid, scores)| {
            (
                vid.clone(),
                VideoClassScores {
                    video_id: vid,
                    scores,
                },
            )
        })
        .collect();
    for v in out.values() {
        v.validate()?;
    }
    Ok(out)
}

pub fn save_class_scores(path: &Path, scores: &BTreeMap<String, VideoClassScores>) -> Result<()> {
    let raw: BTreeMap<&String, &BTreeMap<String, f64>> = scores.iter().map(|(k, v)| (k, &v.scores)).collect();
    write_json(path, &raw)
}

#[derive(Serialize, Deserialize)]
struct ProposalFile {
    proposals: ProposalSet,
}

pub fn load_proposals(path: &Path) -> Result<ProposalSet> {
    let f: ProposalFile = read_json(path)?;
    for (vid, props) in &f.proposals {
        if let Some((i, p)) = props
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.t_start < p.t_end && p.score.is_finite()))
        {
            return Err(Error::format(
                path,
                format!("video {vid}, proposal {i}: invalid [{}, {}] score {}", p.t_start, p.t_end, p.score),
            ));
        }
    }
    Ok(f.proposals)
}

pub fn save_proposals(path: &Path, proposals: &ProposalSet) -> Result<()> {
    write_json(
        path,
        &ProposalFile {
            proposals: proposals.clone(),
        },
    )
}

// -------------------------------------------------------------------
// detections
// -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SubmissionEntry {
    label: String,
    score: f64,
    segment: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct Submission {
    version: String,
    results: BTreeMap<String, Vec<SubmissionEntry>>,
    external_data: Value,
}

/// ActivityNet submission JSON. Scores are written in shortest round-trip
/// form, so they reload exactly.
pub fn write_results(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut results: BTreeMap<String, Vec<SubmissionEntry>> = BTreeMap::new();
    for d in detections {
        results.entry(d.video_id.clone()).or_default().push(SubmissionEntry {
            label: d.label.clone(),
            score: d.score,
            segment: [d.proposal.t_start, d.proposal.t_end],
        });
    }
    write_json(
        path,
        &Submission {
            version: SUBMISSION_VERSION.into(),
            results,
            external_data: serde_json::json!({
                "used": false,
                "details": "synthetic or precomputed features; no external training data"
            }),
        },
    )
}

/// Detections of a submission file; each proposal carries the detection score.
pub fn read_results(path: &Path) -> Result<Vec<Detection>> {
    let s: Submission = read_json(path)?;
    let mut out = Vec::new();
    for (vid, entries) in s.results {
        for (i, e) in entries.into_iter().enumerate() {
            let [a, b] = e.segment;
            if !(a < b && e.score.is_finite()) {
                return Err(Error::format(path, format!("video {vid}, result {i}: invalid entry")));
            }
            out.push(Detection {
                video_id: vid.clone(),
                proposal: Proposal::new(a, b, e.score, "submission"),
                label: e.label,
                score: e.score,
            });
        }
    }
    Ok(out)
}

// -------------------------------------------------------------------
// metrics
// -------------------------------------------------------------------

pub fn save_metrics(path: &Path, report: &MapReport) -> Result<()> {
    write_json(path, report)
}

pub fn load_metrics(path: &Path) -> Result<MapReport> {
    read_json(path)
}

/// `recall,precision` rows with a header line.
pub fn save_pr_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut s = String::from("recall,precision\n");
    for (r, p) in curve {
        let _ = writeln!(s, "{r},{p}");
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{Annotation, Subset};

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn binary_features_round_trip_bytes() {
        let d = dir();
        let p = d.path().join("a.talf");
        let x = Tensor::matrix(3, 2, vec![0.1, -2.5, 3.0, 1e-7, 4.25, 6.0]).unwrap();
        save_features(&p, &x).unwrap();
        let first = std::fs::read(&p).unwrap();
        let y = load_features(&p).unwrap();
        save_features(&p, &y).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        assert!(x.max_abs_diff(&y) < 1e-6);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let x = Tensor::zeros(&[2, 2]);
        let mut bytes = features_to_bytes(&x).unwrap();
        bytes.truncate(16 + 9);
        let err = features_from_bytes(&bytes, Path::new("x.talf")).unwrap_err();
        assert!(err.to_string().contains("truncated payload at offset 24"), "{err}");
        let err = features_from_bytes(b"NOPE\x01\0\0\0", Path::new("x.talf")).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn non_finite_rejected() {
        let mut bytes = features_to_bytes(&Tensor::zeros(&[1, 2])).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(features_from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn csv_matches_binary() {
        let d = dir();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 1.0 / 3.0, 7.0]).unwrap();
        save_features(&d.path().join("a.csv"), &x).unwrap();
        save_features(&d.path().join("a.talf"), &x).unwrap();
        let a = load_features(&d.path().join("a.csv")).unwrap();
        let b = load_features(&d.path().join("a.talf")).unwrap();
        // both go through f32
        assert!(a.max_abs_diff(&b) <= f64::from(f32::EPSILON) * 8.0);
    }

    #[test]
    fn annotations_round_trip_and_validate() {
        let d = dir();
        let p = d.path().join("gt.json");
        let mut set = AnnotationSet::default();
        save_annotations(&p, &set).unwrap();
        assert_eq!(load_annotations(&p).unwrap(), set);
        set.videos.insert(
            "v1".into(),
            VideoAnnotations {
                duration: 30.0,
                subset: Subset::Validation,
                annotations: vec![Annotation {
                    label: "jump".into(),
                    segment: [1.5, 7.25],
                }],
            },
        );
        save_annotations(&p, &set).unwrap();
        let back = load_annotations(&p).unwrap();
        assert_eq!(back, set);
        save_annotations(&p, &back).unwrap();
        assert_eq!(load_annotations(&p).unwrap(), set);

        set.videos.get_mut("v1").unwrap().annotations[0].segment = [5.0, 3.0];
        save_annotations(&p, &set).unwrap();
        let err = load_annotations(&p).unwrap_err().to_string();
        assert!(err.contains("end before start") && err.contains("v1"), "{err}");
    }

    #[test]
    fn results_round_trip() {
        let d = dir();
        let p = d.path().join("res.json");
        write_results(&p, &[]).unwrap();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["results"], serde_json::json!({}));
        assert_eq!(v["version"], "VERSION 1.3");

        // grid cells 3..7 of T=10 over 50 s → [15, 35] s
        let map = crate::bmn::BmConfidenceMap::filled(10, 10, 1.0, 1.0);
        let cand = crate::postprocess::Candidate {
            s_idx: 3,
            e_idx: 7,
            p_start: 0.9,
            p_end: 0.8,
        };
        let props = crate::postprocess::fuse_scores(&[cand], &map, 50.0, "t").unwrap();
        let dets = vec![Detection {
            video_id: "v".into(),
            proposal: props[0].clone(),
            label: "a".into(),
            score: 0.123456789012345,
        }];
        write_results(&p, &dets).unwrap();
        let back = read_results(&p).unwrap();
        assert_eq!(back[0].score, dets[0].score);
        assert_eq!((back[0].proposal.t_start, back[0].proposal.t_end), (15.0, 35.0));
    }
}
