use crate::config::{LossConfig, TrainConfig};
use crate::error::Result;
use crate::exec::Exec;
use crate::graph::Graph;
use crate::optim::run_epochs;
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::{joint_loss, Labels, LossTerms, ProposalNet};

/// Rescaled features of one video with its targets.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub video_id: String,
    /// `T × D`
    pub features: Tensor,
    pub labels: Labels,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub epoch_losses: Vec<f64>,
}

/// Loss terms and parameter gradients (name order) for one sample.
pub fn sample_gradients(
    net: &ProposalNet,
    params: &ParamSet,
    sample: &TrainSample,
    loss_cfg: &LossConfig,
) -> Result<(LossTerms, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(sample.features.clone());
    let out = net.forward(&mut g, &bound, x)?;
    let (loss, terms) = joint_loss(&mut g, &out, &sample.labels, net.mask().valid_cells(), loss_cfg)?;
    g.backward(loss)?;
    Ok((terms, params.collect_grads(&g, &bound)))
}

/// Trains `params` in place order-deterministically; `on_epoch` sees each
/// epoch's mean loss.
pub fn train(
    net: &ProposalNet,
    params: ParamSet,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    exec: Exec,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    net.check_params(&params)?;
    let mut params = params;
    let epoch_losses = run_epochs(
        &mut params,
        samples,
        cfg,
        exec,
        |p, s| sample_gradients(net, p, s, loss_cfg).map(|(t, g)| (t.total, g)),
        on_epoch,
    )?;
    Ok(TrainOutcome { params, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bmn::make_labels;
    use crate::config::ModelConfig;
    use crate::eval::{Annotation, Subset, VideoAnnotations};
    use rand::SeedableRng;

    fn setup() -> (ProposalNet, Vec<TrainSample>) {
        let cfg = ModelConfig {
            temporal_scale: 8,
            max_duration: 6,
            num_samples: 3,
            feature_dim: 2,
            lstm_hidden: 2,
            conv_width: 4,
            map_hidden: 4,
            kernel: 3,
        };
        let net = ProposalNet::new(&cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let samples = (0..4)
            .map(|i| {
                let v = VideoAnnotations {
                    duration: 8.0,
                    subset: Subset::Training,
                    annotations: vec![Annotation {
                        label: "a".into(),
                        segment: [i as f64, i as f64 + 3.0],
                    }],
                };
                TrainSample {
                    video_id: format!("v{i}"),
                    features: Tensor::uniform(&[8, 2], 1.0, &mut rng),
                    labels: make_labels(&v, 8, 6).unwrap(),
                }
            })
            .collect();
        (net, samples)
    }

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            momentum: 0.9,
            epochs: 15,
            batch_size: 2,
            seed: 3,
            grad_clip: 5.0,
        }
    }

    #[test]
    fn loss_decreases() {
        let (net, samples) = setup();
        let out = train(&net, net.init(1), &samples, &cfg(0.1), &LossConfig::default(), Exec::Sequential, |_, _| {})
            .unwrap();
        let l = &out.epoch_losses;
        assert!(l.last().unwrap() < &l[0], "{l:?}");
    }

    #[test]
    fn zero_lr_is_identity() {
        let (net, samples) = setup();
        let init = net.init(1);
        let out = train(&net, init.clone(), &samples, &cfg(0.0), &LossConfig::default(), Exec::Parallel, |_, _| {})
            .unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let (net, samples) = setup();
        let run = |exec| {
            train(&net, net.init(1), &samples, &cfg(0.1), &LossConfig::default(), exec, |_, _| {})
                .unwrap()
                .params
                .to_bytes()
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }

    #[test]
    fn rejects_foreign_params() {
        let (net, samples) = setup();
        let mut p = net.init(1);
        p.insert("pnet.extra", Tensor::zeros(&[1]));
        assert!(train(&net, p, &samples, &cfg(0.1), &LossConfig::default(), Exec::Sequential, |_, _| {}).is_err());
    }
}
