//! Proposal subnet: boundary probabilities and boundary-matching confidence
//! maps over a fixed-length temporal grid.
//!
//! Grid convention: with `T` cells over a video of `duration` seconds, cell
//! `t` spans `[tΔ, (t+1)Δ]`, `Δ = duration / T`. Confidence-map cell
//! `(d, t)` scores the segment `[t, t+d+1]` in grid units and is valid iff
//! `t + d + 1 ≤ T`.

mod features;
mod labels;
mod loss;
mod mask;
mod model;
mod train;

pub use features::{rescale_features, FeatureSequence};
pub use labels::{make_labels, Labels};
pub use loss::{balanced_weights, joint_loss, reg_weights, LossTerms};
pub use mask::{build_sampling_mask, interpolation_weights, SamplingMask};
pub use model::{Inference, NetOutputs, ProposalNet};
pub use train::{sample_gradients, train, TrainOutcome, TrainSample};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryProbabilityPair {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Two-channel map over `(duration d, start t)`, row-major in `d`.
/// Invalid cells hold 0 and are never read by scoring code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmConfidenceMap {
    max_duration: usize,
    temporal_scale: usize,
    cls: Vec<f64>,
    reg: Vec<f64>,
}

pub fn cell_is_valid(d: usize, t: usize, max_duration: usize, temporal_scale: usize) -> bool {
    d < max_duration && t < temporal_scale && t + d < temporal_scale
}

impl BmConfidenceMap {
    pub fn new(max_duration: usize, temporal_scale: usize, cls: Vec<f64>, reg: Vec<f64>) -> Result<Self> {
        let n = max_duration * temporal_scale;
        if cls.len() != n || reg.len() != n {
            return Err(invalid!(
                "confidence map needs {n} cells per channel, got {} and {}",
                cls.len(),
                reg.len()
            ));
        }
        let mut m = Self {
            max_duration,
            temporal_scale,
            cls,
            reg,
        };
        m.clear_invalid();
        Ok(m)
    }

    /// Every valid cell set to the given channel values.
    pub fn filled(max_duration: usize, temporal_scale: usize, cls: f64, reg: f64) -> Self {
        let n = max_duration * temporal_scale;
        Self::new(max_duration, temporal_scale, vec![cls; n], vec![reg; n]).expect("sizes match")
    }

    fn clear_invalid(&mut self) {
        for d in 0..self.max_duration {
            for t in 0..self.temporal_scale {
                if !self.is_valid(d, t) {
                    let i = d * self.temporal_scale + t;
                    self.cls[i] = 0.0;
                    self.reg[i] = 0.0;
                }
            }
        }
    }

    pub fn max_duration(&self) -> usize {
        self.max_duration
    }

    pub fn temporal_scale(&self) -> usize {
        self.temporal_scale
    }

    pub fn is_valid(&self, d: usize, t: usize) -> bool {
        cell_is_valid(d, t, self.max_duration, self.temporal_scale)
    }

    pub fn cls(&self, d: usize, t: usize) -> f64 {
        debug_assert!(self.is_valid(d, t));
        self.cls[d * self.temporal_scale + t]
    }

    pub fn reg(&self, d: usize, t: usize) -> f64 {
        debug_assert!(self.is_valid(d, t));
        self.reg[d * self.temporal_scale + t]
    }

    pub fn cls_channel(&self) -> &[f64] {
        &self.cls
    }

    pub fn reg_channel(&self) -> &[f64] {
        &self.reg
    }

    /// Multiplies each channel by a positive constant, keeping values in `[0, 1]`.
    pub fn scaled(&self, cls_factor: f64, reg_factor: f64) -> Self {
        Self {
            cls: self.cls.iter().map(|v| (v * cls_factor).min(1.0)).collect(),
            reg: self.reg.iter().map(|v| (v * reg_factor).min(1.0)).collect(),
            ..self.clone()
        }
    }
}

/// Valid `(d, t)` cells in row-major order.
pub fn valid_cells(max_duration: usize, temporal_scale: usize) -> Vec<(usize, usize)> {
    (0..max_duration)
        .flat_map(|d| (0..temporal_scale).map(move |t| (d, t)))
        .filter(|&(d, t)| cell_is_valid(d, t, max_duration, temporal_scale))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validity_rule() {
        let m = BmConfidenceMap::filled(4, 4, 0.5, 0.5);
        assert!(m.is_valid(0, 3));
        assert!(!m.is_valid(1, 3));
        assert!(m.is_valid(3, 0));
        assert!(!m.is_valid(4, 0));
        assert_eq!(valid_cells(4, 4).len(), 4 + 3 + 2 + 1);
        // invalid cells were zeroed
        assert_eq!(m.cls_channel()[4 + 3], 0.0);
    }
}
