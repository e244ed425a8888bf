use crate::error::{invalid, Result};
use crate::eval::{tiou, VideoAnnotations};

use super::cell_is_valid;

/// Training targets on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// `D_max × T`, row-major in `d`: best IoU of cell `(d, t)` with any
    /// ground-truth instance, 0 on invalid cells
    pub map: Vec<f64>,
    pub temporal_scale: usize,
    pub max_duration: usize,
}

impl Labels {
    pub fn map_at(&self, d: usize, t: usize) -> f64 {
        self.map[d * self.temporal_scale + t]
    }

    /// Map targets gathered at the given cells.
    pub fn map_cells(&self, cells: &[(usize, usize)]) -> Vec<f64> {
        cells.iter().map(|&(d, t)| self.map_at(d, t)).collect()
    }
}

/// Boundary targets mark every cell within `max(1, 0.1·len)` cells of an
/// instance boundary (`len` in cells); the map holds grid-unit IoU.
pub fn make_labels(video: &VideoAnnotations, temporal_scale: usize, max_duration: usize) -> Result<Labels> {
    if temporal_scale < 2 || max_duration < 1 || max_duration > temporal_scale {
        return Err(invalid!(
            "make_labels: bad grid T={temporal_scale}, D_max={max_duration}"
        ));
    }
    if !(video.duration > 0.0 && video.duration.is_finite()) {
        return Err(invalid!("make_labels: duration must be positive, got {}", video.duration));
    }
    let delta = video.duration / temporal_scale as f64;
    let mut start = vec![0.0; temporal_scale];
    let mut end = vec![0.0; temporal_scale];
    let mut segs = Vec::with_capacity(video.annotations.len());
    for (i, a) in video.annotations.iter().enumerate() {
        let [s, e] = a.segment;
        if !(s < e) {
            return Err(invalid!("make_labels: annotation {i} has empty segment [{s}, {e}]"));
        }
        let (gs, ge) = (s / delta, e / delta);
        let radius = (0.1 * (ge - gs)).max(1.0);
        for t in 0..temporal_scale {
            let tf = t as f64;
            if (tf - gs).abs() <= radius {
                start[t] = 1.0;
            }
            if (tf - ge).abs() <= radius {
                end[t] = 1.0;
            }
        }
        segs.push((gs, ge));
    }
    let mut map = vec![0.0; max_duration * temporal_scale];
    for d in 0..max_duration {
        for t in 0..temporal_scale {
            if cell_is_valid(d, t, max_duration, temporal_scale) {
                let (cs, ce) = (t as f64, (t + d + 1) as f64);
                map[d * temporal_scale + t] = segs.iter().map(|&(s, e)| tiou(cs, ce, s, e)).fold(0.0, f64::max);
            }
        }
    }
    Ok(Labels {
        start,
        end,
        map,
        temporal_scale,
        max_duration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{Annotation, Subset};

    fn video(duration: f64, segs: &[[f64; 2]]) -> VideoAnnotations {
        VideoAnnotations {
            duration,
            subset: Subset::Training,
            annotations: segs
                .iter()
                .map(|&segment| Annotation {
                    label: "a".into(),
                    segment,
                })
                .collect(),
        }
    }

    fn ones(v: &[f64]) -> Vec<usize> {
        (0..v.len()).filter(|&i| v[i] == 1.0).collect()
    }

    #[test]
    fn boundary_neighbourhood() {
        let l = make_labels(&video(100.0, &[[10.0, 20.0]]), 100, 100).unwrap();
        assert_eq!(ones(&l.start), vec![9, 10, 11]);
        assert_eq!(ones(&l.end), vec![19, 20, 21]);
    }

    #[test]
    fn long_instance_widens_neighbourhood() {
        let l = make_labels(&video(100.0, &[[10.0, 50.0]]), 100, 100).unwrap();
        assert_eq!(ones(&l.start), (6..=14).collect::<Vec<_>>());
    }

    #[test]
    fn exact_cell_has_unit_iou() {
        let l = make_labels(&video(50.0, &[[10.0, 20.0]]), 10, 10).unwrap();
        // grid units: [2, 4] → d = 1, t = 2
        assert_eq!(l.map_at(1, 2), 1.0);
        // [2, 3] overlaps half
        assert!((l.map_at(0, 2) - 0.5).abs() < 1e-12);
        // invalid cell stays zero
        assert_eq!(l.map_at(9, 5), 0.0);
    }

    #[test]
    fn no_instances_all_zero() {
        let l = make_labels(&video(10.0, &[]), 8, 4).unwrap();
        assert!(l.start.iter().chain(&l.end).chain(&l.map).all(|&v| v == 0.0));
    }

    #[test]
    fn errors() {
        assert!(make_labels(&video(0.0, &[]), 8, 4).is_err());
        assert!(make_labels(&video(10.0, &[]), 8, 9).is_err());
        assert!(make_labels(&video(10.0, &[[3.0, 3.0]]), 8, 4).is_err());
    }
}
