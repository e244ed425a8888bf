//! Synthetic localization datasets with known ground truth.
//!
//! Each video gets non-overlapping action instances. Feature channels:
//! `0..n_classes` are class indicators (1 inside an instance of that class),
//! the next two are Gaussian bumps at instance starts and ends, and any
//! remaining channels carry noise only. Gaussian noise of standard deviation
//! `noise` is added everywhere.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bmn::FeatureSequence;
use crate::error::{Error, Result};
use crate::eval::{Annotation, AnnotationSet, Subset, VideoAnnotations};
use crate::postprocess::VideoClassScores;
use crate::tensor::Tensor;

/// Score given to classes absent from a video.
pub const CLASS_SCORE_FLOOR: f64 = 0.05;

const PACKING_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// training videos
    pub n_videos: usize,
    /// validation videos
    pub n_eval: usize,
    /// seconds, inclusive range
    pub duration: [f64; 2],
    pub instances: [usize; 2],
    /// instance length as a fraction of the video duration
    pub instance_frac: [f64; 2],
    pub n_classes: usize,
    pub feature_dim: usize,
    pub noise: f64,
    /// raw snippets per second of video
    pub snippet_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn toy() -> Self {
        Self {
            n_videos: 200,
            n_eval: 50,
            duration: [30.0, 120.0],
            instances: [1, 3],
            instance_frac: [0.1, 0.3],
            n_classes: 4,
            feature_dim: 16,
            noise: 0.25,
            snippet_rate: 0.5,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_videos + self.n_eval == 0 {
            return bad("synthetic: no videos requested".into());
        }
        let [d0, d1] = self.duration;
        if !(d0 > 0.0 && d0 <= d1 && d1.is_finite()) {
            return bad(format!("synthetic.duration must be a nonempty positive range, got [{d0}, {d1}]"));
        }
        let [i0, i1] = self.instances;
        if i0 > i1 {
            return bad(format!("synthetic.instances range is empty: [{i0}, {i1}]"));
        }
        let [f0, f1] = self.instance_frac;
        if !(f0 > 0.0 && f0 <= f1 && f1 <= 1.0) {
            return bad(format!("synthetic.instance_frac must satisfy 0 < lo ≤ hi ≤ 1, got [{f0}, {f1}]"));
        }
        if self.n_classes == 0 {
            return bad("synthetic.n_classes must be ≥ 1".into());
        }
        if self.feature_dim < self.n_classes + 2 {
            return bad(format!(
                "synthetic.feature_dim must be ≥ n_classes + 2 = {}, got {}",
                self.n_classes + 2,
                self.feature_dim
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("synthetic.noise must be ≥ 0, got {}", self.noise));
        }
        if !(self.snippet_rate > 0.0 && self.snippet_rate.is_finite()) {
            return bad(format!("synthetic.snippet_rate must be > 0, got {}", self.snippet_rate));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("action_{c:02}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub features: BTreeMap<String, FeatureSequence>,
    pub annotations: AnnotationSet,
    pub class_scores: BTreeMap<String, VideoClassScores>,
}

fn place_instances<R: Rng>(rng: &mut R, spec: &SyntheticSpec, duration: f64, count: usize) -> Result<Vec<[f64; 2]>> {
    let [f0, f1] = spec.instance_frac;
    for _ in 0..PACKING_RETRIES {
        let lens: Vec<f64> = (0..count).map(|_| duration * rng.gen_range(f0..=f1)).collect();
        let free = duration - lens.iter().sum::<f64>();
        if free <= 0.0 {
            continue;
        }
        // split the free time into count + 1 random gaps
        let w: Vec<f64> = (0..=count).map(|_| rng.gen_range(0.05..1.0)).collect();
        let w_sum: f64 = w.iter().sum();
        let mut t = 0.0;
        let mut segs = Vec::with_capacity(count);
        for (len, gap) in lens.iter().zip(&w) {
            t += free * gap / w_sum;
            segs.push([t, (t + len).min(duration)]);
            t += len;
        }
        return Ok(segs);
    }
    Err(Error::InvalidArgument(format!(
        "synthetic: could not pack {count} instances into {duration:.1}s after {PACKING_RETRIES} retries"
    )))
}

fn render<R: Rng>(
    rng: &mut R,
    spec: &SyntheticSpec,
    duration: f64,
    instances: &[([f64; 2], usize)],
) -> Result<Tensor> {
    let len = ((duration * spec.snippet_rate).round() as usize).max(2);
    let d = spec.feature_dim;
    let step = duration / len as f64;
    let mut data = vec![0.0; len * d];
    for (i, row) in data.chunks_mut(d).enumerate() {
        // snippet i covers [i·step, (i+1)·step]; its centre decides membership
        let centre = (i as f64 + 0.5) * step;
        for &([s, e], c) in instances {
            if centre >= s && centre < e {
                row[c] = 1.0;
            }
            let bump = |b: f64| (-((centre - b) / step).powi(2) / 2.0).exp();
            row[spec.n_classes] += bump(s);
            row[spec.n_classes + 1] += bump(e);
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        data.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Tensor::matrix(len, d, data)
}

/// Generates `spec.n_videos` training and `spec.n_eval` validation videos.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let names = spec.class_names();
    let mut out = SyntheticDataset {
        features: BTreeMap::new(),
        annotations: AnnotationSet::default(),
        class_scores: BTreeMap::new(),
    };
    let videos = (0..spec.n_videos)
        .map(|i| (format!("syn_train_{i:04}"), Subset::Training))
        .chain((0..spec.n_eval).map(|i| (format!("syn_val_{i:04}"), Subset::Validation)));
    for (vid, subset) in videos {
        let [d0, d1] = spec.duration;
        let duration = if d0 == d1 { d0 } else { rng.gen_range(d0..=d1) };
        let count = rng.gen_range(spec.instances[0]..=spec.instances[1]);
        let segs = place_instances(&mut rng, spec, duration, count)?;
        let instances: Vec<([f64; 2], usize)> = segs
            .into_iter()
            .map(|s| (s, rng.gen_range(0..spec.n_classes)))
            .collect();
        let feats = render(&mut rng, spec, duration, &instances)?;
        let scores = names
            .iter()
            .enumerate()
            .map(|(c, n)| {
                let present = instances.iter().any(|&(_, k)| k == c);
                (n.clone(), if present { 1.0 } else { CLASS_SCORE_FLOOR })
            })
            .collect();
        out.class_scores.insert(
            vid.clone(),
            VideoClassScores {
                video_id: vid.clone(),
                scores,
            },
        );
        out.annotations.videos.insert(
            vid.clone(),
            VideoAnnotations {
                duration,
                subset,
                annotations: instances
                    .iter()
                    .map(|&(segment, c)| Annotation {
                        label: names[c].clone(),
                        segment,
                    })
                    .collect(),
            },
        );
        out.features.insert(vid.clone(), FeatureSequence::new(vid, duration, feats)?);
    }
    out.annotations.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_videos: 6,
            n_eval: 3,
            ..SyntheticSpec::toy()
        }
    }

    #[test]
    fn deterministic() {
        let a = gen_synthetic(&small()).unwrap();
        let b = gen_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 8;
        assert_ne!(gen_synthetic(&other).unwrap().annotations, a.annotations);
    }

    #[test]
    fn noiseless_indicator_channels() {
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let ds = gen_synthetic(&spec).unwrap();
        let names = spec.class_names();
        for (vid, v) in &ds.annotations.videos {
            let f = &ds.features[vid].features;
            let (len, _) = f.dims2().unwrap();
            let step = v.duration / len as f64;
            for i in 0..len {
                let centre = (i as f64 + 0.5) * step;
                for (c, name) in names.iter().enumerate() {
                    let inside = v
                        .annotations
                        .iter()
                        .any(|a| &a.label == name && centre >= a.segment[0] && centre < a.segment[1]);
                    assert_eq!(f.at2(i, c), if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn instance_counts_within_range() {
        let spec = SyntheticSpec {
            n_videos: 1000,
            n_eval: 0,
            instances: [2, 4],
            snippet_rate: 0.1,
            ..SyntheticSpec::toy()
        };
        let ds = gen_synthetic(&spec).unwrap();
        let mut seen = [0usize; 5];
        for v in ds.annotations.videos.values() {
            let n = v.annotations.len();
            assert!((2..=4).contains(&n));
            seen[n] += 1;
        }
        // every count in the range actually occurs
        assert!(seen[2] > 0 && seen[3] > 0 && seen[4] > 0);
    }

    #[test]
    fn class_scores_follow_labels() {
        let ds = gen_synthetic(&small()).unwrap();
        for (vid, v) in &ds.annotations.videos {
            for (c, &s) in &ds.class_scores[vid].scores {
                let present = v.annotations.iter().any(|a| &a.label == c);
                assert_eq!(s, if present { 1.0 } else { CLASS_SCORE_FLOOR });
            }
        }
    }

    #[test]
    fn infeasible_packing_fails() {
        let spec = SyntheticSpec {
            instances: [5, 5],
            instance_frac: [0.5, 0.6],
            ..small()
        };
        let err = gen_synthetic(&spec).unwrap_err();
        assert!(err.to_string().contains("could not pack"), "{err}");
    }

    #[test]
    fn validation() {
        assert!(SyntheticSpec { noise: -1.0, ..small() }.validate().is_err());
        assert!(SyntheticSpec { instances: [3, 1], ..small() }.validate().is_err());
        assert!(SyntheticSpec { feature_dim: 3, ..small() }.validate().is_err());
    }
}
