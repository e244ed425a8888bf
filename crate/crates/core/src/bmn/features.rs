use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Snippet features of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub duration_seconds: f64,
    /// `T × D`
    pub features: Tensor,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, duration_seconds: f64, features: Tensor) -> Result<Self> {
        let video_id = video_id.into();
        if !(duration_seconds > 0.0 && duration_seconds.is_finite()) {
            return Err(invalid!("video {video_id}: duration must be positive, got {duration_seconds}"));
        }
        features.dims2()?;
        if !features.is_finite() {
            return Err(Error::NonFinite(format!("video {video_id}: features")));
        }
        Ok(Self {
            video_id,
            duration_seconds,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same video resampled to `target_t` rows.
    pub fn rescaled(&self, target_t: usize) -> Result<Self> {
        Ok(Self {
            video_id: self.video_id.clone(),
            duration_seconds: self.duration_seconds,
            features: rescale_features(&self.features, target_t)?,
        })
    }
}

/// Linear interpolation along time, mapping source positions `[0, L−1]`
/// onto `[0, target_t − 1]`.
pub fn rescale_features(raw: &Tensor, target_t: usize) -> Result<Tensor> {
    let (l, d) = raw.dims2()?;
    if l == 0 {
        return Err(invalid!("rescale_features: empty input"));
    }
    if target_t < 2 {
        return Err(invalid!("rescale_features: target length must be ≥ 2, got {target_t}"));
    }
    let mut out = Vec::with_capacity(target_t * d);
    for i in 0..target_t {
        // integer product first keeps exact grid points exact
        let pos = (i * (l - 1)) as f64 / (target_t - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let row_lo = raw.row(lo);
        if frac == 0.0 || lo + 1 >= l {
            out.extend_from_slice(row_lo);
        } else {
            let row_hi = raw.row(lo + 1);
            out.extend(row_lo.iter().zip(row_hi).map(|(a, b)| a + frac * (b - a)));
        }
    }
    Tensor::matrix(target_t, d, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_length_is_identity() {
        let x = Tensor::matrix(5, 2, (0..10).map(|v| f64::from(v).sin()).collect()).unwrap();
        assert_eq!(rescale_features(&x, 5).unwrap(), x);
    }

    #[test]
    fn constant_stays_constant() {
        for l in [1, 3, 17, 64] {
            let x = Tensor::full(&[l, 3], 0.25);
            let y = rescale_features(&x, 32).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.25), "L={l}");
        }
    }

    #[test]
    fn ramp_upsampled() {
        let x = Tensor::matrix(50, 1, (0..50).map(f64::from).collect()).unwrap();
        let y = rescale_features(&x, 100).unwrap();
        // independent oracle: value at i is i·49/99
        for i in 0..100 {
            let expect = i as f64 * 49.0 / 99.0;
            assert!((y.data()[i] - expect).abs() < 1e-12, "{i}");
        }
        assert_eq!(y.data()[99], 49.0);
    }

    #[test]
    fn errors() {
        assert!(rescale_features(&Tensor::zeros(&[0, 3]), 4).is_err());
        assert!(rescale_features(&Tensor::zeros(&[4, 3]), 1).is_err());
        assert!(FeatureSequence::new("v", 0.0, Tensor::zeros(&[2, 2])).is_err());
        assert!(FeatureSequence::new("v", 1.0, Tensor::full(&[2, 2], f64::NAN)).is_err());
    }
}
