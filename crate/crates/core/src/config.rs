//! Pipeline configuration.
//!
//! Every free parameter of the pipeline lives here. Configs are JSON; any
//! field can be overridden with `key.path=value` strings (see
//! [`PipelineConfig::apply_override`]). [`PipelineConfig::validate`] checks
//! every numeric field before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Subset};
use crate::postprocess::SoftNmsConfig;
use crate::synthetic::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// rescaled temporal length `T`
    pub temporal_scale: usize,
    /// longest proposal, in cells (`D_max`)
    pub max_duration: usize,
    /// sample points per confidence-map cell
    pub num_samples: usize,
    /// input feature width `D`
    pub feature_dim: usize,
    pub lstm_hidden: usize,
    pub conv_width: usize,
    pub map_hidden: usize,
    /// kernel of the temporal convolutions (odd)
    pub kernel: usize,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            temporal_scale: 32,
            max_duration: 32,
            num_samples: 8,
            feature_dim: 16,
            lstm_hidden: 16,
            conv_width: 32,
            map_hidden: 32,
            kernel: 3,
        }
    }

    pub fn full() -> Self {
        Self {
            temporal_scale: 100,
            max_duration: 100,
            num_samples: 32,
            feature_dim: 400,
            lstm_hidden: 64,
            conv_width: 128,
            map_hidden: 128,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_reg: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// global gradient-norm clip; 0 disables
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 8,
            seed: 1,
            grad_clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub n_stages: usize,
    /// IoU needed for a positive assignment, one per stage
    pub iou_floors: Vec<f64>,
    pub context_ratio: f64,
    pub n_bins: usize,
    pub hidden: usize,
    pub smooth_l1_beta: f64,
    /// proposals per training video fed to the cascade
    pub pool_per_video: usize,
    pub train: TrainConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            n_stages: 3,
            iou_floors: vec![0.5, 0.6, 0.7],
            context_ratio: 0.25,
            n_bins: 16,
            hidden: 32,
            smooth_l1_beta: 0.1,
            pool_per_video: 32,
            train: TrainConfig {
                lr: 0.05,
                momentum: 0.9,
                epochs: 20,
                batch_size: 64,
                seed: 2,
                grad_clip: 5.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostConfig {
    /// candidates kept per video (by fused score) before refinement
    pub pre_nms_top: usize,
    pub soft_nms: SoftNmsConfig,
    /// classes assigned per proposal
    pub top_k: usize,
    /// per-set ensemble weights; empty means uniform
    pub ensemble_weights: Vec<f64>,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            pre_nms_top: 100,
            soft_nms: SoftNmsConfig::default(),
            top_k: 2,
            ensemble_weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub iou_thresholds: Vec<f64>,
    /// subset used by `infer`/`eval`
    pub subset: Subset,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_thresholds: EvalConfig::default().iou_thresholds,
            subset: Subset::Validation,
        }
    }
}

impl EvalSection {
    pub fn ladder(&self) -> EvalConfig {
        EvalConfig {
            iou_thresholds: self.iou_thresholds.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub cascade: CascadeConfig,
    pub post: PostConfig,
    pub eval: EvalSection,
    pub synthetic: SyntheticSpec,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl PipelineConfig {
    /// Desk-scale defaults matching the synthetic suite.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            cascade: CascadeConfig::default(),
            post: PostConfig::default(),
            eval: EvalSection::default(),
            synthetic: SyntheticSpec::toy(),
            paths: PathsConfig::default(),
        }
    }

    /// Widths for real feature sequences; training parameters unchanged.
    pub fn full() -> Self {
        Self {
            model: ModelConfig::full(),
            ..Self::toy()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        Self::from_value(value, path)
    }

    pub fn from_value(value: Value, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Json {
            path: origin.into(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides (value parsed as JSON, falling
    /// back to a plain string) and re-validates.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(&self).expect("config serializes");
        for o in overrides {
            apply_override(&mut value, o.as_ref())?;
        }
        Self::from_value(value, Path::new("<overrides>"))
    }

    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        *self = self.clone().with_overrides(&[spec])?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        let m = &self.model;
        if m.temporal_scale < 2 {
            return bad(format!("model.temporal_scale must be ≥ 2, got {}", m.temporal_scale));
        }
        if m.max_duration < 1 || m.max_duration > m.temporal_scale {
            return bad(format!(
                "model.max_duration must be in [1, temporal_scale={}], got {}",
                m.temporal_scale, m.max_duration
            ));
        }
        if m.num_samples < 2 {
            return bad(format!("model.num_samples must be ≥ 2, got {}", m.num_samples));
        }
        for (name, v) in [
            ("model.feature_dim", m.feature_dim),
            ("model.lstm_hidden", m.lstm_hidden),
            ("model.conv_width", m.conv_width),
            ("model.map_hidden", m.map_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        if m.kernel % 2 == 0 {
            return bad(format!("model.kernel must be odd, got {}", m.kernel));
        }
        if !(self.loss.lambda_cls >= 0.0 && self.loss.lambda_reg >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        validate_train("train", &self.train)?;

        let c = &self.cascade;
        if c.n_stages < 1 {
            return bad("cascade.n_stages must be ≥ 1".into());
        }
        if c.iou_floors.len() != c.n_stages {
            return bad(format!(
                "cascade.iou_floors needs {} entries, got {}",
                c.n_stages,
                c.iou_floors.len()
            ));
        }
        if c.iou_floors.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("cascade.iou_floors must lie in [0, 1]".into());
        }
        if c.iou_floors.windows(2).any(|w| w[1] < w[0]) {
            return bad("cascade.iou_floors must be non-decreasing".into());
        }
        if !(c.context_ratio >= 0.0) {
            return bad(format!("cascade.context_ratio must be ≥ 0, got {}", c.context_ratio));
        }
        if c.n_bins < 2 {
            return bad(format!("cascade.n_bins must be ≥ 2, got {}", c.n_bins));
        }
        if c.hidden == 0 || c.pool_per_video == 0 {
            return bad("cascade.hidden and cascade.pool_per_video must be ≥ 1".into());
        }
        if !(c.smooth_l1_beta > 0.0) {
            return bad("cascade.smooth_l1_beta must be > 0".into());
        }
        validate_train("cascade.train", &c.train)?;

        let p = &self.post;
        if p.pre_nms_top == 0 || p.top_k == 0 {
            return bad("post.pre_nms_top and post.top_k must be ≥ 1".into());
        }
        p.soft_nms.validate()?;
        if p.ensemble_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("post.ensemble_weights must be positive".into());
        }
        self.eval.ladder().validate()?;
        self.synthetic.validate()?;
        Ok(())
    }
}

fn validate_train(section: &str, t: &TrainConfig) -> Result<()> {
    let bad = |msg: String| Err(Error::Validation(msg));
    if !(t.lr >= 0.0 && t.lr.is_finite()) {
        return bad(format!("{section}.lr must be ≥ 0, got {}", t.lr));
    }
    if !(0.0..1.0).contains(&t.momentum) {
        return bad(format!("{section}.momentum must be in [0, 1), got {}", t.momentum));
    }
    if t.batch_size == 0 {
        return bad(format!("{section}.batch_size must be ≥ 1"));
    }
    if !(t.grad_clip >= 0.0) {
        return bad(format!("{section}.grad_clip must be ≥ 0"));
    }
    Ok(())
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override `{spec}` is not key=value")))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Validation(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Validation(format!("override `{key}`: unknown key `{part}`")));
            }
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Validation(format!("override `{key}`: unknown key `{part}`")))?;
    }
    unreachable!("split always yields at least one part")
}
