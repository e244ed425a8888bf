//! Momentum SGD over a [`ParamSet`] with deterministic mini-batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `grads` must be in the name order of `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for (((_, p), g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm ≤ 0` disables clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch SGD.
///
/// `grad_fn` returns one sample's loss and gradients (name order). Per-sample
/// work runs under `exec`; gradients are summed in sample order, so results
/// do not depend on the thread count. Returns the mean loss of every epoch.
pub fn run_epochs<S, F, L>(
    params: &mut ParamSet,
    samples: &[S],
    cfg: &TrainConfig,
    exec: Exec,
    grad_fn: F,
    mut on_epoch: L,
) -> Result<Vec<f64>>
where
    S: Sync,
    F: Fn(&ParamSet, &S) -> Result<(f64, Vec<Tensor>)> + Sync + Send,
    L: FnMut(usize, f64),
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let p: &ParamSet = params;
            let results = exec.map(batch, |&i| grad_fn(p, &samples[i]));
            let mut sum: Option<Vec<Tensor>> = None;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged { epoch, loss });
                }
                epoch_loss += loss;
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = sum.expect("nonempty batch");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            clip_global_norm(&mut grads, cfg.grad_clip);
            sgd.step(params, &grads);
        }
        let mean = epoch_loss / samples.len() as f64;
        if !mean.is_finite() || params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok(losses)
}
