//! End-to-end orchestration shared by the command line and the test suites.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::bmn::{make_labels, FeatureSequence, ProposalNet, TrainSample};
use crate::cascade::{Cascade, CascadeVideo, Proposal};
use crate::config::PipelineConfig;
use crate::error::{invalid, Error, Result};
use crate::eval::{mean_map, tiou, AnnotationSet, MapReport, Subset};
use crate::exec::Exec;
use crate::io;
use crate::params::ParamSet;
use crate::postprocess::{
    assign_classes, ensemble, fuse_scores, generate_candidates, soft_nms, Detection, ProposalSet, VideoClassScores,
};
use crate::synthetic::SyntheticDataset;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const CLASS_SCORES_FILE: &str = "class_scores.json";
pub const FEATURES_DIR: &str = "features";

/// Features, ground truth and video-level class scores of one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub annotations: AnnotationSet,
    pub class_scores: BTreeMap<String, VideoClassScores>,
    pub features: BTreeMap<String, FeatureSequence>,
}

impl From<SyntheticDataset> for Dataset {
    fn from(s: SyntheticDataset) -> Self {
        Self {
            annotations: s.annotations,
            class_scores: s.class_scores,
            features: s.features,
        }
    }
}

impl Dataset {
    /// Layout: `annotations.json`, `class_scores.json` and
    /// `features/<video_id>.talf` (or `.csv`). Durations come from the
    /// annotation file; class scores are optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let annotations = io::load_annotations(&dir.join(ANNOTATIONS_FILE))?;
        let cs_path = dir.join(CLASS_SCORES_FILE);
        let class_scores = if cs_path.exists() {
            io::load_class_scores(&cs_path)?
        } else {
            BTreeMap::new()
        };
        let fdir = dir.join(FEATURES_DIR);
        let mut features = BTreeMap::new();
        for (vid, v) in &annotations.videos {
            let path = io::feature_path(&fdir, vid);
            let x = io::load_features(&path)?;
            features.insert(vid.clone(), FeatureSequence::new(vid.clone(), v.duration, x)?);
        }
        Ok(Self {
            annotations,
            class_scores,
            features,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::save_annotations(&dir.join(ANNOTATIONS_FILE), &self.annotations)?;
        io::save_class_scores(&dir.join(CLASS_SCORES_FILE), &self.class_scores)?;
        let fdir = dir.join(FEATURES_DIR);
        for (vid, f) in &self.features {
            io::save_features(&fdir.join(format!("{vid}.talf")), &f.features)?;
        }
        Ok(())
    }

    pub fn video_ids(&self, subset: Subset) -> Vec<String> {
        self.annotations
            .video_ids(subset)
            .into_iter()
            .filter(|v| self.features.contains_key(v))
            .collect()
    }

    fn feature(&self, vid: &str) -> Result<&FeatureSequence> {
        self.features
            .get(vid)
            .ok_or_else(|| invalid!("no features for video {vid}"))
    }
}

/// The two trainable models of the pipeline.
#[derive(Debug, Clone)]
pub struct Models {
    pub net: ProposalNet,
    pub cascade: Cascade,
}

impl Models {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            net: ProposalNet::new(&cfg.model)?,
            cascade: Cascade::new(&cfg.cascade, cfg.model.conv_width)?,
        })
    }

    /// Untrained weights for both models, seeded from the config.
    pub fn init(&self, cfg: &PipelineConfig) -> ParamSet {
        let mut p = self.net.init(cfg.train.seed);
        p.extend(self.cascade.init(cfg.cascade.train.seed));
        p
    }

    pub fn check(&self, params: &ParamSet) -> Result<()> {
        self.net.check_params(&params.with_prefix("pnet."))?;
        self.cascade.check_params(&params.with_prefix("cbr."))?;
        let expected = self.net.init(0).len() + self.cascade.init(0).len();
        if params.len() != expected {
            return Err(invalid!("checkpoint has {} tensors, expected {expected}", params.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ParamSet,
    pub proposal_losses: Vec<f64>,
    /// per stage, per epoch
    pub cascade_losses: Vec<Vec<f64>>,
}

/// Training samples for every video of `subset`.
pub fn training_samples(cfg: &PipelineConfig, ds: &Dataset, subset: Subset) -> Result<Vec<TrainSample>> {
    let (t, dmax) = (cfg.model.temporal_scale, cfg.model.max_duration);
    ds.video_ids(subset)
        .into_iter()
        .map(|vid| {
            let f = ds.feature(&vid)?;
            Ok(TrainSample {
                features: f.rescaled(t)?.features,
                labels: make_labels(&ds.annotations.videos[&vid], t, dmax)?,
                video_id: vid,
            })
        })
        .collect()
}

/// Trains the proposal net, then the cascade on its training-set proposals.
pub fn train(cfg: &PipelineConfig, ds: &Dataset, exec: Exec, log: &mut dyn FnMut(&str)) -> Result<TrainReport> {
    cfg.validate()?;
    let models = Models::new(cfg)?;
    let samples = training_samples(cfg, ds, Subset::Training)?;
    if samples.is_empty() {
        return Err(invalid!("no training videos with features"));
    }
    log(&format!("proposal net: {} videos, {} epochs", samples.len(), cfg.train.epochs));
    let out = crate::bmn::train(
        &models.net,
        models.net.init(cfg.train.seed),
        &samples,
        &cfg.train,
        &cfg.loss,
        exec,
        |e, l| log(&format!("  epoch {:>3}  loss {l:.6}", e + 1)),
    )?;
    let mut params = out.params;
    params.extend(models.cascade.init(cfg.cascade.train.seed));

    let ids = ds.video_ids(Subset::Training);
    let videos = exec.map(&ids, |vid| -> Result<CascadeVideo> {
        let (mut props, encoded) = video_proposals(cfg, &models, &params, ds.feature(vid)?)?;
        props.truncate(cfg.cascade.pool_per_video);
        Ok(CascadeVideo {
            video_id: vid.clone(),
            duration: ds.feature(vid)?.duration_seconds,
            encoded,
            proposals: props,
            ground_truth: ds.annotations.videos[vid].annotations.iter().map(|a| a.segment).collect(),
        })
    });
    let videos = videos.into_iter().collect::<Result<Vec<_>>>()?;
    log(&format!("cascade: {} stages", cfg.cascade.n_stages));
    let mut cascade_losses = vec![Vec::new(); cfg.cascade.n_stages];
    let cbr = models.cascade.train(params.with_prefix("cbr."), &videos, exec, |k, e, l| {
        cascade_losses[k].push(l);
        log(&format!("  stage {} epoch {:>3}  loss {l:.6}", k + 1, e + 1));
    })?;
    params.extend(cbr);
    Ok(TrainReport {
        params,
        proposal_losses: out.epoch_losses,
        cascade_losses,
    })
}

/// Fused-score proposals of one video, best first and capped at
/// `post.pre_nms_top`, together with the encoder output.
fn video_proposals(
    cfg: &PipelineConfig,
    models: &Models,
    params: &ParamSet,
    f: &FeatureSequence,
) -> Result<(Vec<Proposal>, crate::tensor::Tensor)> {
    let x = f.rescaled(cfg.model.temporal_scale)?;
    let inf = models.net.infer(params, &x.features)?;
    let cands = generate_candidates(&inf.probs, cfg.model.max_duration)?;
    let mut props = fuse_scores(&cands, &inf.map, f.duration_seconds, "bmn")?;
    // stable: equal scores keep candidate order
    props.sort_by(|a, b| b.score.total_cmp(&a.score));
    props.truncate(cfg.post.pre_nms_top);
    Ok((props, inf.encoded))
}

pub fn infer(cfg: &PipelineConfig, params: &ParamSet, ds: &Dataset, subset: Subset, exec: Exec) -> Result<ProposalSet> {
    let models = Models::new(cfg)?;
    models.check(params)?;
    let ids = ds.video_ids(subset);
    let out = exec.map(&ids, |vid| video_proposals(cfg, &models, params, ds.feature(vid)?).map(|(p, _)| p));
    ids.into_iter().zip(out).map(|(v, p)| Ok((v, p?))).collect()
}

pub fn refine(cfg: &PipelineConfig, params: &ParamSet, ds: &Dataset, proposals: &ProposalSet, exec: Exec) -> Result<ProposalSet> {
    let models = Models::new(cfg)?;
    models.check(params)?;
    let items: Vec<(&String, &Vec<Proposal>)> = proposals.iter().collect();
    let out = exec.map(&items, |(vid, props)| -> Result<Vec<Proposal>> {
        let f = ds.feature(vid)?;
        let x = f.rescaled(cfg.model.temporal_scale)?;
        let encoded = models.net.infer(params, &x.features)?.encoded;
        models.cascade.refine(params, &encoded, f.duration_seconds, props)
    });
    items.into_iter().zip(out).map(|((v, _), p)| Ok((v.clone(), p?))).collect()
}

fn classify(
    cfg: &PipelineConfig,
    proposals: &ProposalSet,
    class_scores: &BTreeMap<String, VideoClassScores>,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (vid, props) in proposals {
        let cls = class_scores
            .get(vid)
            .ok_or_else(|| invalid!("no class scores for video {vid}"))?;
        out.extend(assign_classes(vid, props, cls, cfg.post.top_k)?);
    }
    Ok(out)
}

/// Per-video Soft-NMS followed by class assignment.
pub fn postprocess(
    cfg: &PipelineConfig,
    proposals: &ProposalSet,
    class_scores: &BTreeMap<String, VideoClassScores>,
) -> Result<Vec<Detection>> {
    cfg.post.soft_nms.validate()?;
    let kept: ProposalSet = proposals
        .iter()
        .map(|(v, p)| (v.clone(), soft_nms(p, &cfg.post.soft_nms)))
        .collect();
    classify(cfg, &kept, class_scores)
}

/// Weighted union of several proposal sets, Soft-NMS, class assignment.
/// Weights come from `post.ensemble_weights` (uniform when empty).
pub fn ensemble_detections(
    cfg: &PipelineConfig,
    sets: &[ProposalSet],
    class_scores: &BTreeMap<String, VideoClassScores>,
) -> Result<Vec<Detection>> {
    let weights = if cfg.post.ensemble_weights.is_empty() {
        vec![1.0; sets.len()]
    } else if cfg.post.ensemble_weights.len() == sets.len() {
        cfg.post.ensemble_weights.clone()
    } else {
        return Err(Error::Validation(format!(
            "post.ensemble_weights has {} entries for {} result sets",
            cfg.post.ensemble_weights.len(),
            sets.len()
        )));
    };
    let pairs: Vec<(f64, &ProposalSet)> = weights.into_iter().zip(sets).collect();
    let merged = ensemble(&pairs, &cfg.post.soft_nms)?;
    classify(cfg, &merged, class_scores)
}

pub fn evaluate(cfg: &PipelineConfig, dets: &[Detection], gts: &AnnotationSet, exec: Exec) -> Result<MapReport> {
    mean_map(dets, &gts.subset(cfg.eval.subset), &cfg.eval.ladder(), exec)
}

/// Mean over proposals of the IoU with the best-overlapping ground truth of
/// the same video.
pub fn mean_best_iou(proposals: &ProposalSet, gts: &AnnotationSet) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (vid, props) in proposals {
        let segs: Vec<[f64; 2]> = gts
            .videos
            .get(vid)
            .map(|v| v.annotations.iter().map(|a| a.segment).collect())
            .unwrap_or_default();
        for p in props {
            total += segs
                .iter()
                .map(|&[s, e]| tiou(p.t_start, p.t_end, s, e))
                .fold(0.0, f64::max);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Every intermediate product of one run of the whole pipeline.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub params: ParamSet,
    pub proposals: ProposalSet,
    pub refined: ProposalSet,
    pub detections: Vec<Detection>,
    pub metrics: MapReport,
}

/// Inference through evaluation with the given weights.
pub fn run_with_params(cfg: &PipelineConfig, params: ParamSet, ds: &Dataset, exec: Exec) -> Result<PipelineRun> {
    let proposals = infer(cfg, &params, ds, cfg.eval.subset, exec)?;
    let refined = refine(cfg, &params, ds, &proposals, exec)?;
    let detections = postprocess(cfg, &refined, &ds.class_scores)?;
    let metrics = evaluate(cfg, &detections, &ds.annotations, exec)?;
    Ok(PipelineRun {
        params,
        proposals,
        refined,
        detections,
        metrics,
    })
}

/// Train, infer, refine, post-process and evaluate.
pub fn run(cfg: &PipelineConfig, ds: &Dataset, exec: Exec, log: &mut dyn FnMut(&str)) -> Result<PipelineRun> {
    let report = train(cfg, ds, exec, log)?;
    run_with_params(cfg, report.params, ds, exec)
}

/// Published validation / test mAP (%) of the reference systems. Shown by
/// [`render_report`] for orientation only; they need pretrained backbones
/// and full-corpus training and are not reproduced here.
pub const REFERENCE_RESULTS: &[(&str, f64, Option<f64>)] = &[
    ("BSN (baseline)", 30.03, Some(32.84)),
    ("BSN", 32.8, None),
    ("BMN (baseline)", 33.85, Some(36.42)),
    ("BMN", 36.5, None),
    ("CBR-Net", 38.0, None),
    ("Ensemble", 40.1, Some(42.788)),
];

/// Comparison table of measured runs plus the reference figures.
pub fn render_report(runs: &[(String, MapReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Measured (this run)");
    let _ = writeln!(s, "{:<28} {:>9} {:>9} {:>9} {:>11}", "run", "mAP@0.5", "mAP@0.75", "mAP@0.95", "average mAP");
    for (name, r) in runs {
        let at = |t: f64| r.map_at(t).map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let _ = writeln!(
            s,
            "{:<28} {:>9} {:>9} {:>9} {:>11.2}",
            name,
            at(0.5),
            at(0.75),
            at(0.95),
            100.0 * r.average_map
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Reference (published, ActivityNet-1.3; not reproduced, documentation only)");
    let _ = writeln!(s, "{:<28} {:>16} {:>14}", "method", "validation mAP", "testing mAP");
    for (name, val, test) in REFERENCE_RESULTS {
        let t = test.map_or("-".to_string(), |v| format!("{v}"));
        let _ = writeln!(s, "{:<28} {:>16} {:>14}", name, val, t);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{gen_synthetic, SyntheticSpec};

    fn tiny_cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::toy();
        cfg.model.temporal_scale = 16;
        cfg.model.max_duration = 12;
        cfg.model.lstm_hidden = 4;
        cfg.model.conv_width = 8;
        cfg.model.map_hidden = 8;
        cfg.model.num_samples = 4;
        cfg.train.epochs = 2;
        cfg.cascade.train.epochs = 2;
        cfg.cascade.hidden = 8;
        cfg.cascade.n_bins = 4;
        cfg.synthetic = SyntheticSpec {
            n_videos: 6,
            n_eval: 3,
            ..SyntheticSpec::toy()
        };
        cfg
    }

    #[test]
    fn end_to_end_smoke_and_determinism() {
        let cfg = tiny_cfg();
        let ds: Dataset = gen_synthetic(&cfg.synthetic).unwrap().into();
        let a = run(&cfg, &ds, Exec::Parallel, &mut |_| {}).unwrap();
        let b = run(&cfg, &ds, Exec::Sequential, &mut |_| {}).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.thresholds.len(), 10);
        assert!(a.proposals.values().all(|p| p.len() <= cfg.post.pre_nms_top));
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = tiny_cfg();
        let ds: Dataset = gen_synthetic(&cfg.synthetic).unwrap().into();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.annotations, ds.annotations);
        assert_eq!(back.class_scores, ds.class_scores);
        for (vid, f) in &ds.features {
            assert!(back.features[vid].features.max_abs_diff(&f.features) < 1e-5);
        }
    }

    #[test]
    fn checkpoint_mismatch_rejected() {
        let cfg = tiny_cfg();
        let ds: Dataset = gen_synthetic(&cfg.synthetic).unwrap().into();
        let mut wrong = cfg.clone();
        wrong.model.conv_width = 6;
        let params = Models::new(&wrong).unwrap().init(&wrong);
        assert!(infer(&cfg, &params, &ds, Subset::Validation, Exec::Sequential).is_err());
    }

    #[test]
    fn report_lists_reference_rows() {
        let r = render_report(&[]);
        assert!(r.contains("CBR-Net") && r.contains("42.788") && r.contains("not reproduced"));
    }

    #[test]
    fn ensemble_weight_count_checked() {
        let mut cfg = tiny_cfg();
        cfg.post.ensemble_weights = vec![1.0];
        let sets = vec![ProposalSet::new(), ProposalSet::new()];
        assert!(ensemble_detections(&cfg, &sets, &BTreeMap::new()).is_err());
    }
}
