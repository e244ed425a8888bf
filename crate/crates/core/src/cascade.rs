//! Cascade boundary refinement: a stack of small heads that each nudge
//! proposal boundaries and rescale confidence, trained stage by stage with
//! increasing IoU floors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bmn::interpolation_weights;
use crate::config::CascadeConfig;
use crate::error::{invalid, Error, Result};
use crate::eval::tiou;
use crate::exec::Exec;
use crate::graph::{sigmoid, Graph, Var};
use crate::layers::{Activation, LinearLayer};
use crate::optim::run_epochs;
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// A scored temporal segment in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub t_start: f64,
    pub t_end: f64,
    pub score: f64,
    /// which stage or model produced it
    #[serde(default)]
    pub provenance: String,
}

impl Proposal {
    pub fn new(t_start: f64, t_end: f64, score: f64, provenance: impl Into<String>) -> Self {
        Self {
            t_start,
            t_end,
            score,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 0.0
    }
}

/// Fixed-size descriptor of a proposal: encoder features interpolated at
/// `n_bins` evenly spaced grid positions over the proposal widened by
/// `context_ratio · len` on both sides. Returns `1 × (n_bins·E)`.
pub fn sample_proposal_feature(
    encoded: &Tensor,
    p: &Proposal,
    duration: f64,
    context_ratio: f64,
    n_bins: usize,
) -> Result<Tensor> {
    let (t, e) = encoded.dims2()?;
    if n_bins < 2 {
        return Err(invalid!("sample_proposal_feature: n_bins must be ≥ 2"));
    }
    if !(duration > 0.0) || !(p.t_end > p.t_start) {
        return Err(invalid!(
            "sample_proposal_feature: bad proposal [{}, {}] in {duration}s video",
            p.t_start,
            p.t_end
        ));
    }
    let delta = duration / t as f64;
    let (gs, ge) = (p.t_start / delta, p.t_end / delta);
    let pad = context_ratio * (ge - gs);
    let (a, b) = (gs - pad, ge + pad);
    let mut out = vec![0.0; n_bins * e];
    for i in 0..n_bins {
        let pos = a + (b - a) * i as f64 / (n_bins - 1) as f64;
        let dst = &mut out[i * e..(i + 1) * e];
        for (idx, w) in interpolation_weights(pos, t) {
            dst.iter_mut().zip(encoded.row(idx)).for_each(|(o, v)| *o += w * v);
        }
    }
    Tensor::matrix(1, n_bins * e, out)
}

/// Applies one stage's raw outputs: boundaries move by `δ · len`, are
/// clamped to `[0, duration]` and reverted if they cross; the score is
/// multiplied by `2σ(c)` and clamped to `[0, 1]`.
pub fn apply_deltas(p: &Proposal, ds: f64, de: f64, c: f64, duration: f64) -> Proposal {
    let len = p.len();
    let s = (p.t_start + ds * len).clamp(0.0, duration);
    let e = (p.t_end + de * len).clamp(0.0, duration);
    let (s, e) = if s < e { (s, e) } else { (p.t_start, p.t_end) };
    Proposal {
        t_start: s,
        t_end: e,
        score: (p.score * 2.0 * sigmoid(c)).clamp(0.0, 1.0),
        provenance: p.provenance.clone(),
    }
}

/// Regression targets toward the best-overlapping ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeTarget {
    pub ds: f64,
    pub de: f64,
    pub iou: f64,
    pub positive: bool,
}

pub fn make_cascade_target(p: &Proposal, gts: &[[f64; 2]], iou_floor: f64) -> CascadeTarget {
    let best = gts
        .iter()
        .map(|&[s, e]| (tiou(p.t_start, p.t_end, s, e), s, e))
        .fold(None, |acc: Option<(f64, f64, f64)>, x| match acc {
            Some(a) if a.0 >= x.0 => Some(a),
            _ => Some(x),
        });
    match best {
        Some((iou, s, e)) if p.len() > 0.0 => CascadeTarget {
            ds: (s - p.t_start) / p.len(),
            de: (e - p.t_end) / p.len(),
            iou,
            positive: iou >= iou_floor,
        },
        _ => CascadeTarget {
            ds: 0.0,
            de: 0.0,
            iou: 0.0,
            positive: false,
        },
    }
}

/// Per-video inputs for cascade training.
#[derive(Debug, Clone)]
pub struct CascadeVideo {
    pub video_id: String,
    pub duration: f64,
    /// `T × E` encoder output
    pub encoded: Tensor,
    pub proposals: Vec<Proposal>,
    pub ground_truth: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct Cascade {
    cfg: CascadeConfig,
    feature_dim: usize,
    heads: Vec<[LinearLayer; 2]>,
}

struct StageSample {
    feature: Tensor,
    target: CascadeTarget,
    cls_weight: f64,
}

impl Cascade {
    /// `feature_dim` is the width `E` of the encoder output.
    pub fn new(cfg: &CascadeConfig, feature_dim: usize) -> Result<Self> {
        if cfg.n_stages == 0 || cfg.iou_floors.len() != cfg.n_stages {
            return Err(invalid!(
                "cascade: need one IoU floor per stage ({} stages, {} floors)",
                cfg.n_stages,
                cfg.iou_floors.len()
            ));
        }
        let input = cfg.n_bins * feature_dim;
        let heads = (0..cfg.n_stages)
            .map(|k| {
                [
                    LinearLayer::new(format!("cbr.stage{k}.fc1"), input, cfg.hidden, Activation::Relu),
                    LinearLayer::new(format!("cbr.stage{k}.fc2"), cfg.hidden, 3, Activation::None),
                ]
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            feature_dim,
            heads,
        })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.cfg
    }

    pub fn n_stages(&self) -> usize {
        self.heads.len()
    }

    /// Random first layers, zero output layers: an untrained cascade leaves
    /// every proposal unchanged.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for [fc1, fc2] in &self.heads {
            fc1.init(&mut rng, &mut p);
            fc2.init_zero(&mut p);
        }
        p
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        self.init(0).check_compatible(params)
    }

    fn features(&self, encoded: &Tensor, duration: f64, proposals: &[Proposal]) -> Result<Tensor> {
        let (_, e) = encoded.dims2()?;
        if e != self.feature_dim {
            return Err(invalid!("cascade expects {}-wide features, got {e}", self.feature_dim));
        }
        let f = self.cfg.n_bins * e;
        let mut data = Vec::with_capacity(proposals.len() * f);
        for p in proposals {
            let t = sample_proposal_feature(encoded, p, duration, self.cfg.context_ratio, self.cfg.n_bins)?;
            data.extend_from_slice(t.data());
        }
        Tensor::matrix(proposals.len(), f, data)
    }

    /// Raw `(δs, δe, c)` rows of stage `k` for a `P × F` feature matrix.
    fn head_outputs(&self, params: &ParamSet, k: usize, feats: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let stage = params.with_prefix(&format!("cbr.stage{k}."));
        let bound = stage.bind(&mut g, false);
        let x = g.constant(feats.clone());
        let h = self.heads[k][0].forward(&mut g, &bound, x)?;
        let y = self.heads[k][1].forward(&mut g, &bound, h)?;
        Ok(g.value(y).clone())
    }

    pub fn refine_stage(
        &self,
        params: &ParamSet,
        k: usize,
        encoded: &Tensor,
        duration: f64,
        proposals: &[Proposal],
    ) -> Result<Vec<Proposal>> {
        if k >= self.n_stages() {
            return Err(invalid!("cascade has {} stages, asked for stage {k}", self.n_stages()));
        }
        let kept: Vec<Proposal> = proposals.iter().filter(|p| !p.is_empty()).cloned().collect();
        if kept.is_empty() {
            return Ok(kept);
        }
        let out = self.head_outputs(params, k, &self.features(encoded, duration, &kept)?)?;
        Ok(kept
            .iter()
            .enumerate()
            .map(|(i, p)| apply_deltas(p, out.at2(i, 0), out.at2(i, 1), out.at2(i, 2), duration))
            .collect())
    }

    /// All stages in order.
    pub fn refine(&self, params: &ParamSet, encoded: &Tensor, duration: f64, proposals: &[Proposal]) -> Result<Vec<Proposal>> {
        let mut cur = proposals.to_vec();
        for k in 0..self.n_stages() {
            cur = self.refine_stage(params, k, encoded, duration, &cur)?;
        }
        Ok(cur)
    }

    fn stage_samples(&self, videos: &[CascadeVideo], floor: f64) -> Result<Vec<StageSample>> {
        let mut samples = Vec::new();
        for v in videos {
            let props: Vec<&Proposal> = v.proposals.iter().filter(|p| !p.is_empty()).collect();
            for p in props {
                samples.push(StageSample {
                    feature: sample_proposal_feature(&v.encoded, p, v.duration, self.cfg.context_ratio, self.cfg.n_bins)?,
                    target: make_cascade_target(p, &v.ground_truth, floor),
                    cls_weight: 0.0,
                });
            }
        }
        let n = samples.len() as f64;
        let n_pos = samples.iter().filter(|s| s.target.positive).count() as f64;
        let n_neg = n - n_pos;
        for s in &mut samples {
            // scaled so that the mean weight is one
            s.cls_weight = if n_pos == 0.0 || n_neg == 0.0 {
                1.0
            } else if s.target.positive {
                0.5 * n / n_pos
            } else {
                0.5 * n / n_neg
            };
        }
        Ok(samples)
    }

    /// Loss of stage `k` on one `1 × F` feature row: smooth-L1 on the deltas
    /// of a positive plus weighted BCE on the confidence.
    pub fn stage_loss(&self, g: &mut Graph, p: &Bound, k: usize, x: Var, target: &CascadeTarget, cls_weight: f64) -> Result<Var> {
        let h = self.heads[k][0].forward(g, p, x)?;
        let y = self.heads[k][1].forward(g, p, h)?;
        let deltas = g.slice_cols(y, 0, 2)?;
        let logit = g.slice_cols(y, 2, 1)?;
        let conf = g.sigmoid(logit);
        let w_reg = if target.positive { 1.0 } else { 0.0 };
        let reg = g.weighted_smooth_l1(deltas, &[target.ds, target.de], &[w_reg, w_reg], self.cfg.smooth_l1_beta)?;
        let cls = g.weighted_bce(conf, &[f64::from(u8::from(target.positive))], &[cls_weight])?;
        g.add(reg, cls)
    }

    fn stage_gradients(&self, k: usize, params: &ParamSet, s: &StageSample) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let x = g.constant(s.feature.clone());
        let loss = self.stage_loss(&mut g, &bound, k, x, &s.target, s.cls_weight)?;
        g.backward(loss)?;
        Ok((g.value(loss).data()[0], params.collect_grads(&g, &bound)))
    }

    /// Trains stage `k` on the output of stages `< k`. `on_epoch` receives
    /// `(stage, epoch, mean loss)`.
    pub fn train(
        &self,
        params: ParamSet,
        videos: &[CascadeVideo],
        exec: Exec,
        mut on_epoch: impl FnMut(usize, usize, f64),
    ) -> Result<ParamSet> {
        self.check_params(&params)?;
        let mut params = params;
        let mut current: Vec<CascadeVideo> = videos.to_vec();
        for k in 0..self.n_stages() {
            let samples = self.stage_samples(&current, self.cfg.iou_floors[k])?;
            if samples.is_empty() {
                return Err(Error::InvalidArgument("cascade training: no proposals".into()));
            }
            let prefix = format!("cbr.stage{k}.");
            let mut stage = params.with_prefix(&prefix);
            let mut cfg = self.cfg.train.clone();
            cfg.seed = cfg.seed.wrapping_add(k as u64);
            run_epochs(
                &mut stage,
                &samples,
                &cfg,
                exec,
                |p, s| self.stage_gradients(k, p, s),
                |e, l| on_epoch(k, e, l),
            )?;
            params.extend(stage);
            let refined = exec.map(&current, |v| self.refine_stage(&params, k, &v.encoded, v.duration, &v.proposals));
            for (v, r) in current.iter_mut().zip(refined) {
                v.proposals = r?;
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, e: usize) -> Tensor {
        Tensor::matrix(t, e, (0..t * e).map(|i| (i / e) as f64).collect()).unwrap()
    }

    #[test]
    fn feature_positions() {
        // grid value equals its index, so each bin reads its own position
        let enc = ramp(20, 1);
        let p = Proposal::new(4.0, 8.0, 1.0, "t");
        let f = sample_proposal_feature(&enc, &p, 20.0, 0.25, 5).unwrap();
        assert_eq!(f.shape(), &[1, 5]);
        let expect = [3.0, 4.5, 6.0, 7.5, 9.0];
        for (a, b) in f.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", f.data());
        }
        // positions outside the grid clamp to the ends
        let p = Proposal::new(0.0, 20.0, 1.0, "t");
        let f = sample_proposal_feature(&enc, &p, 20.0, 0.5, 3).unwrap();
        assert_eq!(f.data(), &[0.0, 10.0, 19.0]);
    }

    #[test]
    fn deltas_move_and_rescore() {
        let p = Proposal::new(10.0, 20.0, 0.4, "t");
        let q = apply_deltas(&p, 0.1, -0.2, 0.0, 100.0);
        assert!((q.t_start - 11.0).abs() < 1e-12 && (q.t_end - 18.0).abs() < 1e-12);
        assert!((q.score - 0.4).abs() < 1e-12);
        // crossing boundaries revert
        let q = apply_deltas(&p, 0.8, -0.8, 0.0, 100.0);
        assert_eq!((q.t_start, q.t_end), (10.0, 20.0));
        // clamped to the video
        let q = apply_deltas(&p, -5.0, 0.0, 10.0, 100.0);
        assert_eq!(q.t_start, 0.0);
        assert!(q.score <= 1.0);
    }

    #[test]
    fn target_toward_best_gt() {
        let p = Proposal::new(10.0, 20.0, 0.5, "t");
        let t = make_cascade_target(&p, &[[50.0, 60.0], [12.0, 20.0]], 0.7);
        assert!((t.ds - 0.2).abs() < 1e-12 && t.de == 0.0);
        assert!((t.iou - 0.8).abs() < 1e-12 && t.positive);
        assert!(!make_cascade_target(&p, &[], 0.5).positive);
    }

    fn cfg() -> CascadeConfig {
        CascadeConfig {
            n_stages: 2,
            iou_floors: vec![0.3, 0.5],
            n_bins: 4,
            hidden: 8,
            ..CascadeConfig::default()
        }
    }

    #[test]
    fn untrained_is_identity() {
        let c = Cascade::new(&cfg(), 3).unwrap();
        let params = c.init(1);
        let props = vec![Proposal::new(1.0, 5.0, 0.3, "bmn"), Proposal::new(2.0, 9.0, 0.8, "bmn")];
        let out = c.refine(&params, &ramp(10, 3), 10.0, &props).unwrap();
        assert_eq!(out, props);
    }

    #[test]
    fn training_improves_overlap() {
        // features mark the true boundaries; proposals are shifted copies
        let mut videos = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        for i in 0..20 {
            let (s, e) = (5.0 + (i % 5) as f64 * 2.0, 15.0 + (i % 3) as f64 * 3.0);
            let enc = Tensor::matrix(
                32,
                2,
                (0..32)
                    .flat_map(|t| {
                        let t = t as f64;
                        [(-(t - s).powi(2) / 2.0).exp(), (-(t - e).powi(2) / 2.0).exp()]
                    })
                    .collect(),
            )
            .unwrap();
            let proposals = (0..6)
                .map(|_| {
                    let j = rng.gen_range(-2.0..2.0);
                    let k = rng.gen_range(-2.0..2.0);
                    Proposal::new(s + j, e + k, 0.5, "bmn")
                })
                .collect();
            videos.push(CascadeVideo {
                video_id: format!("v{i}"),
                duration: 32.0,
                encoded: enc,
                proposals,
                ground_truth: vec![[s, e]],
            });
        }
        let mut c = cfg();
        c.n_bins = 8;
        c.train.epochs = 60;
        c.train.lr = 0.05;
        let cas = Cascade::new(&c, 2).unwrap();
        let params = cas.train(cas.init(3), &videos, Exec::Parallel, |_, _, _| {}).unwrap();
        let mean_iou = |use_cascade: bool| {
            let mut total = 0.0;
            let mut n = 0.0;
            for v in &videos {
                let props = if use_cascade {
                    cas.refine(&params, &v.encoded, v.duration, &v.proposals).unwrap()
                } else {
                    v.proposals.clone()
                };
                for p in props {
                    let [s, e] = v.ground_truth[0];
                    total += tiou(p.t_start, p.t_end, s, e);
                    n += 1.0;
                }
            }
            total / n
        };
        let (before, after) = (mean_iou(false), mean_iou(true));
        assert!(after > before, "{before} → {after}");
    }
}
