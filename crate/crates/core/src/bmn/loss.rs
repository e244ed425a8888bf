use crate::config::LossConfig;
use crate::error::Result;
use crate::graph::{Graph, Var};

use super::{Labels, NetOutputs};

/// IoU above which a map cell counts as positive for the classification channel.
pub const CLS_POSITIVE_IOU: f64 = 0.9;

/// Per-term values of one evaluation of [`joint_loss`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub start: f64,
    pub end: f64,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

/// Weights for binary targets that give positives and negatives equal total
/// mass and sum to one. Single-class inputs get uniform weights.
pub fn balanced_weights(targets: &[f64]) -> Vec<f64> {
    let n = targets.len();
    if n == 0 {
        return Vec::new();
    }
    let n_pos = targets.iter().filter(|&&t| t > 0.5).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return vec![1.0 / n as f64; n];
    }
    let (wp, wn) = (0.5 / n_pos as f64, 0.5 / n_neg as f64);
    targets.iter().map(|&t| if t > 0.5 { wp } else { wn }).collect()
}

/// Regression weights: cells are split into high (> 0.7), medium
/// (0.3, 0.7] and low (≤ 0.3) IoU bands; every nonempty band gets equal
/// total weight and the weights sum to one.
pub fn reg_weights(targets: &[f64]) -> Vec<f64> {
    let band = |t: f64| {
        if t > 0.7 {
            0
        } else if t > 0.3 {
            1
        } else {
            2
        }
    };
    let mut counts = [0usize; 3];
    for &t in targets {
        counts[band(t)] += 1;
    }
    let nonempty = counts.iter().filter(|&&c| c > 0).count() as f64;
    targets
        .iter()
        .map(|&t| 1.0 / (nonempty * counts[band(t)] as f64))
        .collect()
}

/// `L_start + L_end + λ_cls·L_cls + λ_reg·L_reg`, each term a weighted mean.
pub fn joint_loss(
    g: &mut Graph,
    out: &NetOutputs,
    labels: &Labels,
    cells: &[(usize, usize)],
    cfg: &LossConfig,
) -> Result<(Var, LossTerms)> {
    let ls = g.weighted_bce(out.start, &labels.start, &balanced_weights(&labels.start))?;
    let le = g.weighted_bce(out.end, &labels.end, &balanced_weights(&labels.end))?;

    let iou = labels.map_cells(cells);
    let cls_t: Vec<f64> = iou.iter().map(|&v| f64::from(u8::from(v > CLS_POSITIVE_IOU))).collect();
    let cls = g.slice_cols(out.map, 0, 1)?;
    let reg = g.slice_cols(out.map, 1, 1)?;
    let lc = g.weighted_bce(cls, &cls_t, &balanced_weights(&cls_t))?;
    let lr = g.weighted_sq_err(reg, &iou, &reg_weights(&iou))?;

    let boundary = g.add(ls, le)?;
    let lc_s = g.scale(lc, cfg.lambda_cls);
    let lr_s = g.scale(lr, cfg.lambda_reg);
    let map = g.add(lc_s, lr_s)?;
    let total = g.add(boundary, map)?;
    let v = |g: &Graph, x: Var| g.value(x).data()[0];
    let terms = LossTerms {
        start: v(g, ls),
        end: v(g, le),
        cls: v(g, lc),
        reg: v(g, lr),
        total: v(g, total),
    };
    Ok((total, terms))
}
