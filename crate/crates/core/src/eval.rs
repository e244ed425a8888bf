//! ActivityNet-style detection scoring.
//!
//! Detections of one class are ranked by score (ties keep input order) and
//! greedily matched, each to the highest-IoU ground truth of the same video
//! that is still unmatched and clears the threshold. AP is the area under the
//! non-increasing envelope of the precision/recall curve. Classes without
//! ground truth are left out of the class mean.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::postprocess::Detection;
use crate::cascade::Proposal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) {
            return Err(Error::NonFinite(format!("segment [{start}, {end}]")));
        }
        if end <= start {
            return Err(invalid!("degenerate segment [{start}, {end}]: end before start"));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

/// Temporal intersection-over-union of two valid segments.
pub fn iou(a: Segment, b: Segment) -> Result<f64> {
    Segment::new(a.start, a.end)?;
    Segment::new(b.start, b.end)?;
    Ok(tiou(a.start, a.end, b.start, b.end))
}

/// Unchecked IoU; 0 when disjoint or when either segment is empty.
pub fn tiou(s1: f64, e1: f64, s2: f64, e2: f64) -> f64 {
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = (e1 - s1) + (e2 - s2) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Training,
    Validation,
    Testing,
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Subset::Training => "training",
            Subset::Validation => "validation",
            Subset::Testing => "testing",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: String,
    pub segment: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotations {
    pub duration: f64,
    pub subset: Subset,
    pub annotations: Vec<Annotation>,
}

/// Ground truth per video, keyed by video id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub videos: BTreeMap<String, VideoAnnotations>,
}

impl AnnotationSet {
    /// Checks `0 ≤ s < e ≤ duration` and nonempty labels; errors name the
    /// video and annotation index.
    pub fn validate(&self) -> Result<()> {
        for (vid, v) in &self.videos {
            if !(v.duration.is_finite() && v.duration > 0.0) {
                return Err(Error::Validation(format!("video {vid}: duration {} must be positive", v.duration)));
            }
            for (i, a) in v.annotations.iter().enumerate() {
                let [s, e] = a.segment;
                if a.label.is_empty() {
                    return Err(Error::Validation(format!("video {vid}, annotation {i}: empty label")));
                }
                if !(s.is_finite() && e.is_finite()) {
                    return Err(Error::Validation(format!("video {vid}, annotation {i}: non-finite segment")));
                }
                if e <= s {
                    return Err(Error::Validation(format!(
                        "video {vid}, annotation {i}: end before start in segment [{s}, {e}]"
                    )));
                }
                if s < 0.0 || e > v.duration {
                    return Err(Error::Validation(format!(
                        "video {vid}, annotation {i}: segment [{s}, {e}] outside [0, {}]",
                        v.duration
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, subset: Subset) -> AnnotationSet {
        AnnotationSet {
            videos: self
                .videos
                .iter()
                .filter(|(_, v)| v.subset == subset)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn video_ids(&self, subset: Subset) -> Vec<String> {
        self.videos
            .iter()
            .filter(|(_, v)| v.subset == subset)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn classes(&self) -> BTreeSet<String> {
        self.videos
            .values()
            .flat_map(|v| v.annotations.iter().map(|a| a.label.clone()))
            .collect()
    }

    pub fn num_instances(&self) -> usize {
        self.videos.values().map(|v| v.annotations.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: activitynet_thresholds(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Validation("iou_thresholds is empty".into()));
        }
        for w in self.iou_thresholds.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Validation(format!(
                    "iou_thresholds must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(t) = self.iou_thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Validation(format!("iou threshold {t} outside (0, 1]")));
        }
        Ok(())
    }
}

/// `0.50, 0.55, …, 0.95`.
pub fn activitynet_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// One ground-truth instance of a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub video_id: String,
    pub segment: [f64; 2],
}

/// Ground truth of `label` in every video of `gts`.
pub fn class_ground_truth(gts: &AnnotationSet, label: &str) -> Vec<GtInstance> {
    gts.videos
        .iter()
        .flat_map(|(vid, v)| {
            v.annotations
                .iter()
                .filter(move |a| a.label == label)
                .map(move |a| GtInstance {
                    video_id: vid.clone(),
                    segment: a.segment,
                })
        })
        .collect()
}

/// Detections of one class, ranked, with their per-GT IoUs precomputed.
struct RankedClass {
    /// for each ranked detection: (gt index, iou) sorted by iou descending
    candidates: Vec<Vec<(usize, f64)>>,
    n_gt: usize,
}

fn rank_class(dets: &[&Detection], gts: &[GtInstance]) -> RankedClass {
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let candidates = order
        .iter()
        .map(|&d| {
            let det = dets[d];
            let mut c: Vec<(usize, f64)> = by_video
                .get(det.video_id.as_str())
                .map(|idx| {
                    idx.iter()
                        .map(|&gi| {
                            let [s, e] = gts[gi].segment;
                            (gi, tiou(det.proposal.t_start, det.proposal.t_end, s, e))
                        })
                        .collect()
                })
                .unwrap_or_default();
            // stable: equal IoUs keep ground-truth order
            c.sort_by(|a, b| b.1.total_cmp(&a.1));
            c
        })
        .collect();
    RankedClass {
        candidates,
        n_gt: gts.len(),
    }
}

/// True-positive flags of the ranked detections at one threshold.
fn match_ranked(rc: &RankedClass, iou_thr: f64) -> Vec<bool> {
    let mut taken = vec![false; rc.n_gt];
    rc.candidates
        .iter()
        .map(|cands| {
            for &(gi, v) in cands {
                if v < iou_thr {
                    break;
                }
                if !taken[gi] {
                    taken[gi] = true;
                    return true;
                }
            }
            false
        })
        .collect()
}

/// Precision/recall sequence for ranked TP flags.
pub fn precision_recall(tp: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tps = 0usize;
    tp.iter()
        .enumerate()
        .map(|(k, &hit)| {
            tps += usize::from(hit);
            (tps as f64 / n_gt as f64, tps as f64 / (k + 1) as f64)
        })
        .collect()
}

/// Area under the non-increasing precision envelope, given `(recall, precision)` points.
pub fn interpolated_ap(pr: &[(f64, f64)]) -> f64 {
    let mut rec = Vec::with_capacity(pr.len() + 2);
    let mut prec = Vec::with_capacity(pr.len() + 2);
    rec.push(0.0);
    prec.push(0.0);
    for &(r, p) in pr {
        rec.push(r);
        prec.push(p);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}

/// AP of one class at one threshold; `None` when the class has no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GtInstance], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let refs: Vec<&Detection> = dets.iter().collect();
    let rc = rank_class(&refs, gts);
    let tp = match_ranked(&rc, iou_thr);
    Some(interpolated_ap(&precision_recall(&tp, gts.len())))
}

/// Recall/precision points of one class at one threshold, for plotting.
pub fn pr_curve(dets: &[Detection], gts: &[GtInstance], iou_thr: f64) -> Vec<(f64, f64)> {
    if gts.is_empty() {
        return Vec::new();
    }
    let refs: Vec<&Detection> = dets.iter().collect();
    let rc = rank_class(&refs, gts);
    precision_recall(&match_ranked(&rc, iou_thr), gts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// AP at each threshold, in ladder order
    pub ap: Vec<f64>,
    pub average_ap: f64,
    pub num_ground_truth: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// mAP per threshold, in ladder order
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
    pub per_class: BTreeMap<String, ClassReport>,
}

impl MapReport {
    pub fn map_at(&self, thr: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - thr).abs() < 1e-12)
            .map(|i| self.map_per_threshold[i])
    }
}

/// mAP at every threshold of `cfg` plus their mean. Detections from videos
/// absent from `gts` count as false positives of their class.
pub fn mean_map(dets: &[Detection], gts: &AnnotationSet, cfg: &EvalConfig, exec: Exec) -> Result<MapReport> {
    cfg.validate()?;
    let classes: Vec<String> = gts.classes().into_iter().collect();
    if classes.is_empty() {
        return Err(invalid!("mean_map: ground truth has no instances"));
    }
    let mut by_class: HashMap<&str, Vec<&Detection>> = HashMap::new();
    for d in dets {
        by_class.entry(d.label.as_str()).or_default().push(d);
    }
    let reports: Vec<ClassReport> = exec.map(&classes, |label| {
        let gt = class_ground_truth(gts, label);
        let cls_dets = by_class.get(label.as_str()).cloned().unwrap_or_default();
        let rc = rank_class(&cls_dets, &gt);
        let ap: Vec<f64> = cfg
            .iou_thresholds
            .iter()
            .map(|&thr| interpolated_ap(&precision_recall(&match_ranked(&rc, thr), gt.len())))
            .collect();
        ClassReport {
            average_ap: ap.iter().sum::<f64>() / ap.len() as f64,
            ap,
            num_ground_truth: gt.len(),
            num_detections: cls_dets.len(),
        }
    });
    let n_cls = classes.len() as f64;
    let map_per_threshold: Vec<f64> = (0..cfg.iou_thresholds.len())
        .map(|i| reports.iter().map(|r| r.ap[i]).sum::<f64>() / n_cls)
        .collect();
    let average_map = map_per_threshold.iter().sum::<f64>() / map_per_threshold.len() as f64;
    Ok(MapReport {
        thresholds: cfg.iou_thresholds.clone(),
        map_per_threshold,
        average_map,
        per_class: classes.into_iter().zip(reports).collect(),
    })
}

/// Fraction of ground-truth instances hit (IoU ≥ `iou_thr`) by one of the
/// top-`k` proposals of their video. Labels are ignored.
pub fn average_recall_at_k(
    proposals: &BTreeMap<String, Vec<Proposal>>,
    gts: &AnnotationSet,
    k: usize,
    iou_thr: f64,
) -> Result<f64> {
    if k == 0 {
        return Err(invalid!("average_recall_at_k: k must be ≥ 1"));
    }
    let total = gts.num_instances();
    if total == 0 {
        return Ok(0.0);
    }
    let mut hit = 0usize;
    for (vid, v) in &gts.videos {
        let Some(props) = proposals.get(vid) else { continue };
        let mut order: Vec<usize> = (0..props.len()).collect();
        order.sort_by(|&a, &b| props[b].score.total_cmp(&props[a].score));
        let top: Vec<&Proposal> = order.iter().take(k).map(|&i| &props[i]).collect();
        for a in &v.annotations {
            let [s, e] = a.segment;
            if top.iter().any(|p| tiou(p.t_start, p.t_end, s, e) >= iou_thr) {
                hit += 1;
            }
        }
    }
    Ok(hit as f64 / total as f64)
}
