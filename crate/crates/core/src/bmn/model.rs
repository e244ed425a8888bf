use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Activation, BiLstmLayer, Conv1dLayer, LinearLayer};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

use super::{build_sampling_mask, BmConfidenceMap, BoundaryProbabilityPair, SamplingMask};

/// Architecture of the proposal subnet.
///
/// ```text
/// x[T×D] ─ BiLSTM ─┐
///    └─────────────┴ concat[T×(D+2H)] ─ conv ─ conv ─ encoded[T×W]
/// encoded ─ conv ─ conv(k=1, sigmoid) ─ start/end[T]
/// encoded ─ mask gather[V×(N·W)] ─ linear ─ linear(sigmoid) ─ cls/reg[V]
/// ```
#[derive(Debug, Clone)]
pub struct ProposalNet {
    cfg: ModelConfig,
    mask: SamplingMask,
    lstm: BiLstmLayer,
    base: [Conv1dLayer; 2],
    tem: [Conv1dLayer; 2],
    pem: [LinearLayer; 2],
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct NetOutputs {
    /// `T × W`
    pub encoded: Var,
    /// `1 × T`
    pub start: Var,
    /// `1 × T`
    pub end: Var,
    /// `V × 2` over valid cells: column 0 cls, column 1 reg
    pub map: Var,
}

/// Plain-value outputs for one video.
#[derive(Debug, Clone)]
pub struct Inference {
    pub probs: BoundaryProbabilityPair,
    pub map: BmConfidenceMap,
    pub encoded: Tensor,
}

impl ProposalNet {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mask = build_sampling_mask(cfg.temporal_scale, cfg.max_duration, cfg.num_samples)?;
        let w = cfg.conv_width;
        let enc_in = cfg.feature_dim + 2 * cfg.lstm_hidden;
        let k = cfg.kernel;
        Ok(Self {
            cfg: cfg.clone(),
            mask,
            lstm: BiLstmLayer::new("pnet.lstm", cfg.feature_dim, cfg.lstm_hidden),
            base: [
                Conv1dLayer::same("pnet.base1", enc_in, w, k, Activation::Relu),
                Conv1dLayer::same("pnet.base2", w, w, k, Activation::Relu),
            ],
            tem: [
                Conv1dLayer::same("pnet.tem1", w, w, k, Activation::Relu),
                Conv1dLayer::same("pnet.tem2", w, 2, 1, Activation::Sigmoid),
            ],
            pem: [
                LinearLayer::new("pnet.pem1", cfg.num_samples * w, cfg.map_hidden, Activation::Relu),
                LinearLayer::new("pnet.pem2", cfg.map_hidden, 2, Activation::Sigmoid),
            ],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        self.lstm.init(&mut rng, &mut p);
        for l in self.base.iter().chain(&self.tem) {
            l.init(&mut rng, &mut p);
        }
        for l in &self.pem {
            l.init(&mut rng, &mut p);
        }
        p
    }

    /// Zeroes the last layer of both heads, so every probability is 0.5.
    pub fn zero_heads(&self, params: &mut ParamSet) {
        for name in ["pnet.tem2.weight", "pnet.tem2.bias", "pnet.pem2.weight", "pnet.pem2.bias"] {
            if let Some(t) = params.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Checks that `params` has exactly this architecture's names and shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        self.init(0).check_compatible(params)
    }

    /// `x[T×D] → encoded[T×W]`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (t, d) = g.value(x).dims2()?;
        if t != self.cfg.temporal_scale || d != self.cfg.feature_dim {
            return Err(invalid!(
                "proposal net expects {}×{} features, got {t}×{d}",
                self.cfg.temporal_scale,
                self.cfg.feature_dim
            ));
        }
        let h = self.lstm.forward(g, p, x)?;
        let cat = g.concat_cols(&[x, h])?;
        let mut y = g.transpose(cat)?;
        for l in &self.base {
            y = l.forward(g, p, y)?;
        }
        g.transpose(y)
    }

    /// Start and end probabilities, each `1 × T`.
    pub fn temporal_eval(&self, g: &mut Graph, p: &Bound, encoded: Var) -> Result<(Var, Var)> {
        let mut y = g.transpose(encoded)?;
        for l in &self.tem {
            y = l.forward(g, p, y)?;
        }
        Ok((g.row(y, 0)?, g.row(y, 1)?))
    }

    /// Confidence channels over valid cells, `V × 2`.
    pub fn bm_confidence_map(&self, g: &mut Graph, p: &Bound, encoded: Var) -> Result<Var> {
        let (t, w) = g.value(encoded).dims2()?;
        if t != self.mask.temporal_scale() {
            return Err(invalid!("mask built for T={}, encoder gave T={t}", self.mask.temporal_scale()));
        }
        let v = self.mask.valid_cells().len();
        let gathered = g.sparse_matmul(self.mask.valid_weights(), encoded)?;
        let mut y = g.reshape(gathered, &[v, self.cfg.num_samples * w])?;
        for l in &self.pem {
            y = l.forward(g, p, y)?;
        }
        Ok(y)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<NetOutputs> {
        let encoded = self.encode(g, p, x)?;
        let (start, end) = self.temporal_eval(g, p, encoded)?;
        let map = self.bm_confidence_map(g, p, encoded)?;
        Ok(NetOutputs {
            encoded,
            start,
            end,
            map,
        })
    }

    /// Expands `V × 2` valid-cell outputs to a full confidence map.
    pub fn to_map(&self, valid_values: &Tensor) -> Result<BmConfidenceMap> {
        let (dm, t) = (self.cfg.max_duration, self.cfg.temporal_scale);
        let mut cls = vec![0.0; dm * t];
        let mut reg = vec![0.0; dm * t];
        for (i, &(d, s)) in self.mask.valid_cells().iter().enumerate() {
            cls[d * t + s] = valid_values.at2(i, 0);
            reg[d * t + s] = valid_values.at2(i, 1);
        }
        BmConfidenceMap::new(dm, t, cls, reg)
    }

    /// Runs the network on rescaled features `x[T×D]`.
    pub fn infer(&self, params: &ParamSet, x: &Tensor) -> Result<Inference> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv)?;
        Ok(Inference {
            probs: BoundaryProbabilityPair {
                start: g.value(out.start).data().to_vec(),
                end: g.value(out.end).data().to_vec(),
            },
            map: self.to_map(g.value(out.map))?,
            encoded: g.value(out.encoded).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;

    fn tiny() -> ModelConfig {
        ModelConfig {
            temporal_scale: 6,
            max_duration: 4,
            num_samples: 3,
            feature_dim: 3,
            lstm_hidden: 2,
            conv_width: 4,
            map_hidden: 3,
            kernel: 3,
        }
    }

    #[test]
    fn probabilities_in_open_unit_interval() {
        let net = ProposalNet::new(&ModelConfig::toy()).unwrap();
        let params = net.init(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[32, 16], 1.0, &mut rng);
        let inf = net.infer(&params, &x).unwrap();
        assert_eq!(inf.probs.start.len(), 32);
        assert!(inf.probs.start.iter().chain(&inf.probs.end).all(|&p| p > 0.0 && p < 1.0));
        for d in 0..32 {
            for t in 0..32 {
                if inf.map.is_valid(d, t) {
                    let (c, r) = (inf.map.cls(d, t), inf.map.reg(d, t));
                    assert!(c > 0.0 && c < 1.0 && r > 0.0 && r < 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_heads_give_one_half() {
        let net = ProposalNet::new(&tiny()).unwrap();
        let mut params = net.init(1);
        net.zero_heads(&mut params);
        let x = Tensor::full(&[6, 3], 0.3);
        let inf = net.infer(&params, &x).unwrap();
        assert!(inf.probs.start.iter().chain(&inf.probs.end).all(|&p| p == 0.5));
        for &(d, t) in net.mask().valid_cells() {
            assert_eq!(inf.map.cls(d, t), 0.5);
            assert_eq!(inf.map.reg(d, t), 0.5);
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let net = ProposalNet::new(&tiny()).unwrap();
        let params = net.init(1);
        assert!(net.infer(&params, &Tensor::zeros(&[5, 3])).is_err());
        assert!(net.infer(&params, &Tensor::zeros(&[6, 4])).is_err());
    }

    #[test]
    fn whole_network_gradcheck() {
        let net = ProposalNet::new(&tiny()).unwrap();
        let params = net.init(2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let names: Vec<String> = params.names().map(String::from).collect();
        let tensors: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
        let err = grad_check_many(
            |g, vars| {
                let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                let xv = g.constant(x.clone());
                let out = net.forward(g, &bound, xv)?;
                let a = g.sum(out.start);
                let b = g.sum(out.map);
                let c = g.add(a, b)?;
                let e = g.sum(out.end);
                g.add(c, e)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
