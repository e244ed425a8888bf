use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::sparse::Csr;
use crate::tensor::Tensor;

use super::{cell_is_valid, valid_cells};

/// Interpolation weights mapping grid features to per-cell sample points.
///
/// Row `(d·T + t)·N + n` holds the weights of sample `n` of cell `(d, t)`:
/// sample positions are `t + n·(d+1)/(N−1)`, clamped to `[0, T−1]`, each
/// spread over its two neighbouring grid indices. Rows of invalid cells are
/// empty.
#[derive(Debug, Clone)]
pub struct SamplingMask {
    temporal_scale: usize,
    max_duration: usize,
    num_samples: usize,
    weights: Arc<Csr>,
    valid: Vec<(usize, usize)>,
    valid_weights: Arc<Csr>,
}

/// Two-point interpolation weights of position `pos` on a grid of `len` points.
pub fn interpolation_weights(pos: f64, len: usize) -> Vec<(usize, f64)> {
    let pos = pos.clamp(0.0, (len - 1) as f64);
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo + 1 >= len {
        vec![(lo, 1.0)]
    } else {
        vec![(lo, 1.0 - frac), (lo + 1, frac)]
    }
}

pub(crate) fn sample_positions(d: usize, t: usize, num_samples: usize) -> impl Iterator<Item = f64> {
    let span = (d + 1) as f64;
    let steps = (num_samples - 1) as f64;
    (0..num_samples).map(move |n| t as f64 + n as f64 * span / steps)
}

pub fn build_sampling_mask(temporal_scale: usize, max_duration: usize, num_samples: usize) -> Result<SamplingMask> {
    if max_duration < 1 || temporal_scale < 1 {
        return Err(invalid!("sampling mask needs T ≥ 1 and D_max ≥ 1"));
    }
    if max_duration > temporal_scale {
        return Err(invalid!("sampling mask: D_max={max_duration} exceeds T={temporal_scale}"));
    }
    if num_samples < 2 {
        return Err(invalid!("sampling mask: N_sample must be ≥ 2, got {num_samples}"));
    }
    let mut rows = Vec::with_capacity(max_duration * temporal_scale * num_samples);
    for d in 0..max_duration {
        for t in 0..temporal_scale {
            if cell_is_valid(d, t, max_duration, temporal_scale) {
                rows.extend(sample_positions(d, t, num_samples).map(|p| interpolation_weights(p, temporal_scale)));
            } else {
                rows.extend((0..num_samples).map(|_| Vec::new()));
            }
        }
    }
    let weights = Csr::from_rows(temporal_scale, &rows);
    let valid = valid_cells(max_duration, temporal_scale);
    let keep: Vec<usize> = valid
        .iter()
        .flat_map(|&(d, t)| {
            let base = (d * temporal_scale + t) * num_samples;
            base..base + num_samples
        })
        .collect();
    let valid_weights = Arc::new(weights.select_rows(&keep));
    Ok(SamplingMask {
        temporal_scale,
        max_duration,
        num_samples,
        weights: Arc::new(weights),
        valid,
        valid_weights,
    })
}

impl SamplingMask {
    pub fn temporal_scale(&self) -> usize {
        self.temporal_scale
    }

    pub fn max_duration(&self) -> usize {
        self.max_duration
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    /// Full `(D_max·T·N) × T` weight matrix.
    pub fn weights(&self) -> &Csr {
        &self.weights
    }

    pub fn row_index(&self, d: usize, t: usize, n: usize) -> usize {
        (d * self.temporal_scale + t) * self.num_samples + n
    }

    /// Valid cells in the order used by [`SamplingMask::valid_weights`].
    pub fn valid_cells(&self) -> &[(usize, usize)] {
        &self.valid
    }

    /// Rows of valid cells only: `(V·N) × T`.
    pub fn valid_weights(&self) -> Arc<Csr> {
        Arc::clone(&self.valid_weights)
    }

    /// Sample-point features for every row: `(D_max·T·N) × E`.
    pub fn gather(&self, encoded: &Tensor) -> Result<Tensor> {
        let (t, e) = encoded.dims2()?;
        if t != self.temporal_scale {
            return Err(invalid!("mask built for T={}, features have T={t}", self.temporal_scale));
        }
        Tensor::matrix(self.weights.rows(), e, self.weights.matmul_dense(encoded.data(), e))
    }
}
