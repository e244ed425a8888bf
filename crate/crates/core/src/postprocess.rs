//! From network outputs to ranked detections: candidate generation, score
//! fusion with the confidence map, Soft-NMS, ensembling and class assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bmn::{BmConfidenceMap, BoundaryProbabilityPair};
use crate::cascade::Proposal;
use crate::error::{invalid, Error, Result};
use crate::eval::tiou;

/// Proposals per video id.
pub type ProposalSet = BTreeMap<String, Vec<Proposal>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub proposal: Proposal,
    pub label: String,
    pub score: f64,
}

/// Video-level classifier output: class name → score in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClassScores {
    pub video_id: String,
    pub scores: BTreeMap<String, f64>,
}

impl VideoClassScores {
    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(invalid!("video {}: empty class score map", self.video_id));
        }
        if let Some((c, s)) = self.scores.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::NonFinite(format!("video {}: class {c} score {s}", self.video_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub s_idx: usize,
    pub e_idx: usize,
    pub p_start: f64,
    pub p_end: f64,
}

fn boundary_candidates(p: &[f64]) -> Vec<usize> {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..p.len())
        .filter(|&t| {
            let left = t == 0 || p[t] > p[t - 1];
            let right = t + 1 == p.len() || p[t] > p[t + 1];
            (left && right) || p[t] > 0.5 * max
        })
        .collect()
}

/// Pairs every start candidate with every later end candidate at most
/// `max_duration` cells away. A cell is a candidate when it is a strict local
/// maximum or exceeds half of the sequence maximum.
pub fn generate_candidates(probs: &BoundaryProbabilityPair, max_duration: usize) -> Result<Vec<Candidate>> {
    let t = probs.start.len();
    if t < 2 || probs.end.len() != t {
        return Err(invalid!(
            "generate_candidates: need two sequences of equal length ≥ 2, got {} and {}",
            t,
            probs.end.len()
        ));
    }
    let starts = boundary_candidates(&probs.start);
    let ends = boundary_candidates(&probs.end);
    let mut out = Vec::new();
    for &s in &starts {
        for &e in &ends {
            if e > s && e - s <= max_duration {
                out.push(Candidate {
                    s_idx: s,
                    e_idx: e,
                    p_start: probs.start[s],
                    p_end: probs.end[e],
                });
            }
        }
    }
    Ok(out)
}

/// Scores candidates as `p_start · p_end · cls(d, t) · reg(d, t)` with
/// `d = e − s − 1`, `t = s`, and converts grid indices to seconds
/// (cell `t` spans `[tΔ, (t+1)Δ]`, `Δ = duration / T`).
pub fn fuse_scores(
    candidates: &[Candidate],
    map: &BmConfidenceMap,
    duration: f64,
    provenance: &str,
) -> Result<Vec<Proposal>> {
    let t_len = map.temporal_scale();
    let delta = duration / t_len as f64;
    candidates
        .iter()
        .map(|c| {
            if c.e_idx <= c.s_idx {
                return Err(invalid!("candidate ({}, {}) has no extent", c.s_idx, c.e_idx));
            }
            let d = c.e_idx - c.s_idx - 1;
            if !map.is_valid(d, c.s_idx) {
                return Err(invalid!("candidate ({}, {}) maps to invalid cell", c.s_idx, c.e_idx));
            }
            let score = c.p_start * c.p_end * map.cls(d, c.s_idx) * map.reg(d, c.s_idx);
            Ok(Proposal::new(
                c.s_idx as f64 * delta,
                c.e_idx as f64 * delta,
                score.clamp(0.0, 1.0),
                provenance,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftNmsMethod {
    Gaussian,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftNmsConfig {
    pub method: SoftNmsMethod,
    pub sigma: f64,
    pub linear_thr: f64,
    pub keep_top: usize,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            method: SoftNmsMethod::Gaussian,
            sigma: 0.4,
            linear_thr: 0.5,
            keep_top: 100,
        }
    }
}

impl SoftNmsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == SoftNmsMethod::Gaussian && !(self.sigma > 0.0) {
            return Err(Error::Validation(format!("soft-nms sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.linear_thr) {
            return Err(Error::Validation(format!(
                "soft-nms linear_thr must be in [0, 1], got {}",
                self.linear_thr
            )));
        }
        if self.keep_top == 0 {
            return Err(Error::Validation("soft-nms keep_top must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Repeatedly freezes the highest-scored remaining proposal (earliest input
/// index on ties) and decays the rest by their overlap with it.
pub fn soft_nms(proposals: &[Proposal], cfg: &SoftNmsConfig) -> Vec<Proposal> {
    let mut remaining: Vec<(usize, Proposal)> = proposals.iter().cloned().enumerate().collect();
    let mut kept = Vec::with_capacity(cfg.keep_top.min(proposals.len()));
    while !remaining.is_empty() && kept.len() < cfg.keep_top {
        let mut best = 0;
        for (i, (idx, p)) in remaining.iter().enumerate() {
            let (bidx, bp) = &remaining[best];
            if p.score > bp.score || (p.score == bp.score && idx < bidx) {
                best = i;
            }
        }
        let (_, top) = remaining.swap_remove(best);
        for (_, p) in remaining.iter_mut() {
            let o = tiou(top.t_start, top.t_end, p.t_start, p.t_end);
            let decay = match cfg.method {
                SoftNmsMethod::Gaussian => (-(o * o) / cfg.sigma).exp(),
                SoftNmsMethod::Linear if o > cfg.linear_thr => 1.0 - o,
                SoftNmsMethod::Linear => 1.0,
            };
            p.score *= decay;
        }
        kept.push(top);
    }
    kept
}

/// Weighted union of several result sets followed by per-video Soft-NMS.
///
/// Weights are divided by the largest weight before scaling, so relative
/// weighting is kept and scores stay in `[0, 1]`.
pub fn ensemble(sets: &[(f64, &ProposalSet)], nms: &SoftNmsConfig) -> Result<ProposalSet> {
    if sets.is_empty() {
        return Err(invalid!("ensemble: no result sets"));
    }
    if let Some((w, _)) = sets.iter().find(|(w, _)| !(*w > 0.0 && w.is_finite())) {
        return Err(invalid!("ensemble: weights must be positive, got {w}"));
    }
    let w_max = sets.iter().map(|(w, _)| *w).fold(0.0, f64::max);
    let mut pooled: ProposalSet = BTreeMap::new();
    for (w, set) in sets {
        let scale = w / w_max;
        for (vid, props) in set.iter() {
            pooled.entry(vid.clone()).or_default().extend(props.iter().map(|p| {
                let mut p = p.clone();
                p.score *= scale;
                p
            }));
        }
    }
    Ok(pooled
        .into_iter()
        .map(|(vid, props)| (vid, soft_nms(&props, nms)))
        .collect())
}

/// One detection per (proposal, top-k class) with multiplied scores.
pub fn assign_classes(
    video_id: &str,
    proposals: &[Proposal],
    cls: &VideoClassScores,
    top_k: usize,
) -> Result<Vec<Detection>> {
    cls.validate()?;
    if top_k == 0 {
        return Err(invalid!("assign_classes: top_k must be ≥ 1"));
    }
    let mut ranked: Vec<(&String, f64)> = cls.scores.iter().map(|(c, &s)| (c, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.truncate(top_k);
    let mut out = Vec::with_capacity(proposals.len() * ranked.len());
    for p in proposals {
        for &(label, s) in &ranked {
            out.push(Detection {
                video_id: video_id.to_string(),
                proposal: p.clone(),
                label: label.clone(),
                score: (p.score * s).clamp(0.0, 1.0),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bmn::BmConfidenceMap;

    fn prop(s: f64, e: f64, score: f64) -> Proposal {
        Proposal::new(s, e, score, "t")
    }

    fn pair(start: Vec<f64>, end: Vec<f64>) -> BoundaryProbabilityPair {
        BoundaryProbabilityPair { start, end }
    }

    #[test]
    fn spikes_produce_their_pair() {
        let mut s = vec![0.1; 10];
        let mut e = vec![0.1; 10];
        s[3] = 0.9;
        e[7] = 0.9;
        let c = generate_candidates(&pair(s, e), 10).unwrap();
        assert!(c.iter().any(|c| c.s_idx == 3 && c.e_idx == 7));
        assert!(c.iter().all(|c| c.s_idx == 3 && c.e_idx == 7));
    }

    #[test]
    fn doubling_sequence_keeps_only_last_start() {
        let s: Vec<f64> = (0..7).map(|i| 0.01 * 2f64.powi(i)).collect();
        assert_eq!(boundary_candidates(&s), vec![6]);
    }

    #[test]
    fn flat_sequence_keeps_everything() {
        let t = 6;
        let c = generate_candidates(&pair(vec![0.3; t], vec![0.3; t]), 3).unwrap();
        let expected = (0..t)
            .flat_map(|s| (0..t).map(move |e| (s, e)))
            .filter(|&(s, e)| e > s && e - s <= 3)
            .count();
        assert_eq!(c.len(), expected);
    }

    #[test]
    fn short_sequences_rejected() {
        assert!(generate_candidates(&pair(vec![0.5], vec![0.5]), 1).is_err());
    }

    #[test]
    fn fuse_products_and_seconds() {
        let t = 4;
        let map = BmConfidenceMap::filled(t, t, 1.0, 1.0);
        let c = Candidate { s_idx: 1, e_idx: 3, p_start: 1.0, p_end: 1.0 };
        let p = fuse_scores(&[c], &map, 40.0, "x").unwrap();
        assert_eq!(p[0].score, 1.0);
        assert_eq!((p[0].t_start, p[0].t_end), (10.0, 30.0));

        let c0 = Candidate { p_end: 0.0, ..c };
        assert_eq!(fuse_scores(&[c0], &map, 40.0, "x").unwrap()[0].score, 0.0);
        let bad = Candidate { s_idx: 3, e_idx: 5, ..c };
        assert!(fuse_scores(&[bad], &map, 40.0, "x").is_err());
    }

    #[test]
    fn gaussian_decay_hand_case() {
        // [0,10] vs [0,8]: IoU 0.8
        let ps = [prop(0., 10., 0.9), prop(0., 8., 0.8)];
        let cfg = SoftNmsConfig { sigma: 0.5, ..Default::default() };
        let out = soft_nms(&ps, &cfg);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-1.28f64).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.2225).abs() < 1e-4);
    }

    #[test]
    fn linear_decay_only_above_threshold() {
        let ps = [prop(0., 10., 0.9), prop(0., 8., 0.8), prop(5., 15., 0.7)];
        let cfg = SoftNmsConfig { method: SoftNmsMethod::Linear, linear_thr: 0.5, ..Default::default() };
        let out = soft_nms(&ps, &cfg);
        assert_eq!(out[0], ps[0]);
        // [5,15] overlaps [0,10] with IoU 1/3, below the threshold.
        assert_eq!(out[1].score, 0.7);
        // [0,8] decayed once by 1 − 0.8; its IoU with [5,15] is 0.2.
        assert!((out[2].score - 0.16).abs() < 1e-12);
    }

    #[test]
    fn disjoint_and_single_unchanged() {
        let ps = [prop(0., 1., 0.3), prop(2., 3., 0.9), prop(4., 5., 0.5)];
        let out = soft_nms(&ps, &SoftNmsConfig::default());
        assert_eq!(out, vec![ps[1].clone(), ps[2].clone(), ps[0].clone()]);
        let one = [prop(0., 1., 0.3)];
        assert_eq!(soft_nms(&one, &SoftNmsConfig::default()), one.to_vec());
    }

    #[test]
    fn ties_follow_input_order() {
        let ps = [prop(0., 1., 0.5), prop(2., 3., 0.5)];
        let out = soft_nms(&ps, &SoftNmsConfig::default());
        assert_eq!(out[0], ps[0]);
    }

    #[test]
    fn ensemble_duplicate_sets() {
        let mut set = ProposalSet::new();
        set.insert("v".into(), vec![prop(0., 10., 0.9), prop(20., 30., 0.6)]);
        let nms = SoftNmsConfig::default();
        let single = ensemble(&[(1.0, &set)], &nms).unwrap();
        assert_eq!(single["v"], soft_nms(&set["v"], &nms));
        let double = ensemble(&[(1.0, &set), (1.0, &set)], &nms).unwrap();
        assert_eq!(double["v"].len(), 4);
        assert_eq!(double["v"][0], single["v"][0]);
        assert!(ensemble(&[(0.0, &set)], &nms).is_err());
    }

    #[test]
    fn class_assignment_arithmetic() {
        let cls = VideoClassScores {
            video_id: "v".into(),
            scores: [("A".to_string(), 0.6), ("B".to_string(), 0.3)].into_iter().collect(),
        };
        let d = assign_classes("v", &[prop(0., 1., 0.8)], &cls, 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].label, "A");
        assert!((d[0].score - 0.48).abs() < 1e-15);
        assert_eq!(d[1].label, "B");
        assert!((d[1].score - 0.24).abs() < 1e-15);
        assert_eq!(assign_classes("v", &[prop(0., 1., 0.8)], &cls, 1).unwrap().len(), 1);

        let empty = VideoClassScores { video_id: "v".into(), scores: BTreeMap::new() };
        assert!(assign_classes("v", &[], &empty, 1).is_err());
    }
}
