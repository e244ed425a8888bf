//! Differentiable layers: 1D convolution, linear, bidirectional LSTM.
//!
//! Each layer comes in two forms: a free function over graph variables, used
//! when building a network, and a descriptor (`*Layer`) that knows its
//! parameter names inside a [`ParamSet`] and how to initialize them.
//!
//! LSTM gate blocks are stacked in the order input, forget, cell, output
//! along the `4H` axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Initialization bound `1/√fan_in`.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

// -------------------------------------------------------------------
// conv1d
// -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dParams {
    /// `C_out × C_in × k`
    pub weight: Tensor,
    /// `C_out`
    pub bias: Tensor,
    pub padding: usize,
    pub activation: Activation,
}

impl Conv1dParams {
    pub fn new(weight: Tensor, bias: Tensor, padding: usize, activation: Activation) -> Result<Self> {
        let [c_out, c_in, k] = weight.shape()[..] else {
            return Err(invalid!("conv1d weight must be C_out×C_in×k, got {:?}", weight.shape()));
        };
        if c_out == 0 || c_in == 0 || k == 0 {
            return Err(invalid!("conv1d extents must be ≥ 1, got {:?}", weight.shape()));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape("conv1d bias", weight.shape(), bias.shape()));
        }
        Ok(Self {
            weight,
            bias,
            padding,
            activation,
        })
    }

    /// Length-preserving padding; requires an odd kernel.
    pub fn same(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let k = *weight.shape().last().unwrap_or(&0);
        if k % 2 == 0 {
            return Err(invalid!("\"same\" padding needs an odd kernel, got k={k}"));
        }
        Self::new(weight, bias, (k - 1) / 2, activation)
    }
}

pub fn conv1d_var(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Var,
    padding: usize,
    activation: Activation,
) -> Result<Var> {
    let y = g.conv1d(x, weight, bias, padding)?;
    Ok(activation.apply(g, y))
}

/// Evaluates `conv1d` on `x[C_in×T]` outside of any training graph.
pub fn conv1d(x: &Tensor, p: &Conv1dParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(p.weight.clone());
    let b = g.constant(p.bias.clone());
    let y = conv1d_var(&mut g, xv, w, b, p.padding, p.activation)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv1dLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub padding: usize,
    pub activation: Activation,
}

impl Conv1dLayer {
    pub fn same(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            padding: kernel.saturating_sub(1) / 2,
            activation,
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R, params: &mut ParamSet) {
        let s = init_bound(self.c_in * self.kernel);
        params.insert(
            format!("{}.weight", self.name),
            Tensor::uniform(&[self.c_out, self.c_in, self.kernel], s, rng),
        );
        params.insert(format!("{}.bias", self.name), Tensor::uniform(&[self.c_out], s, rng));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        conv1d_var(g, x, w, b, self.padding, self.activation)
    }
}

// -------------------------------------------------------------------
// linear
// -------------------------------------------------------------------

/// Affine map over the trailing axis: `x[…×D] · weight[D×E] + bias[E]`.
pub fn linear_var(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let (d, e) = g.value(weight).dims2()?;
    let Some(&last) = xs.last() else {
        return Err(Error::shape("linear", &xs, &[d, e]));
    };
    if last != d {
        return Err(Error::shape("linear", &xs, &[d, e]));
    }
    if g.shape(bias) != [e] {
        return Err(Error::shape("linear bias", &[d, e], g.shape(bias)));
    }
    let rows = xs.iter().product::<usize>() / d.max(1);
    let flat = if xs.len() == 2 { x } else { g.reshape(x, &[rows, d])? };
    let y = g.matmul(flat, weight)?;
    let y = g.add(y, bias)?;
    if xs.len() == 2 {
        Ok(y)
    } else {
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = e;
        g.reshape(y, &out_shape)
    }
}

pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = linear_var(&mut g, xv, w, b)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearLayer {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, input: usize, output: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            activation,
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R, params: &mut ParamSet) {
        let s = init_bound(self.input);
        params.insert(
            format!("{}.weight", self.name),
            Tensor::uniform(&[self.input, self.output], s, rng),
        );
        params.insert(format!("{}.bias", self.name), Tensor::uniform(&[self.output], s, rng));
    }

    /// Same shapes as [`LinearLayer::init`], all zeros.
    pub fn init_zero(&self, params: &mut ParamSet) {
        params.insert(format!("{}.weight", self.name), Tensor::zeros(&[self.input, self.output]));
        params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.output]));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        let y = linear_var(g, x, w, b)?;
        Ok(self.activation.apply(g, y))
    }
}

// -------------------------------------------------------------------
// bidirectional LSTM
// -------------------------------------------------------------------

/// Weights of one LSTM direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    /// `4H × D`
    pub w: Tensor,
    /// `4H × H`
    pub u: Tensor,
    /// `4H`
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub hidden: usize,
}

impl BiLstmParams {
    pub fn new(forward: LstmDirection, backward: LstmDirection) -> Result<Self> {
        let (h4, _) = forward.w.dims2()?;
        if h4 == 0 || h4 % 4 != 0 {
            return Err(invalid!("LSTM gate weights need 4H rows, got {h4}"));
        }
        let hidden = h4 / 4;
        for dir in [&forward, &backward] {
            if dir.w.shape() != forward.w.shape()
                || dir.u.shape() != [h4, hidden]
                || dir.b.shape() != [h4]
            {
                return Err(Error::shape("bilstm params", forward.w.shape(), dir.u.shape()));
            }
        }
        Ok(Self {
            forward,
            backward,
            hidden,
        })
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let dir = || LstmDirection {
            w: Tensor::zeros(&[4 * hidden, input]),
            u: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        };
        Self {
            forward: dir(),
            backward: dir(),
            hidden,
        }
    }

    pub fn random<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut dir = || LstmDirection {
            w: Tensor::uniform(&[4 * hidden, input], init_bound(input), rng),
            u: Tensor::uniform(&[4 * hidden, hidden], init_bound(hidden), rng),
            b: Tensor::uniform(&[4 * hidden], init_bound(hidden), rng),
        };
        let forward = dir();
        let backward = dir();
        Self {
            forward,
            backward,
            hidden,
        }
    }
}

/// Graph handles for one LSTM direction.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

fn lstm_direction(g: &mut Graph, x: Var, p: LstmVars, reverse: bool) -> Result<Vec<Var>> {
    let (t_len, d) = g.value(x).dims2()?;
    let (h4, wd) = g.value(p.w).dims2()?;
    if wd != d {
        return Err(Error::shape("bilstm", g.shape(x), g.shape(p.w)));
    }
    let h = h4 / 4;
    // Input projections for every step at once: X · Wᵀ → T×4H.
    let wt = g.transpose(p.w)?;
    let xw = g.matmul(x, wt)?;
    let ut = g.transpose(p.u)?;

    let mut h_prev = g.constant(Tensor::zeros(&[1, h]));
    let mut c_prev = g.constant(Tensor::zeros(&[1, h]));
    let mut out = vec![h_prev; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let xt = g.row(xw, t)?;
        let rec = g.matmul(h_prev, ut)?;
        let z = g.add(xt, rec)?;
        let z = g.add(z, p.b)?;
        let i = g.slice_cols(z, 0, h)?;
        let f = g.slice_cols(z, h, h)?;
        let c_hat = g.slice_cols(z, 2 * h, h)?;
        let o = g.slice_cols(z, 3 * h, h)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let c_hat = g.tanh(c_hat);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, c_hat)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let hcur = g.mul(o, tc)?;
        out[t] = hcur;
        h_prev = hcur;
        c_prev = c;
    }
    Ok(out)
}

/// `x[T×D] → [T×2H]`; row `t` is `[h_fwd(t), h_bwd(t)]`.
pub fn bilstm_var(g: &mut Graph, x: Var, fwd: LstmVars, bwd: LstmVars) -> Result<Var> {
    let (t_len, _) = g.value(x).dims2()?;
    if t_len == 0 {
        return Err(invalid!("bilstm: empty sequence"));
    }
    if g.shape(fwd.w) != g.shape(bwd.w) || g.shape(fwd.u) != g.shape(bwd.u) {
        return Err(Error::shape("bilstm directions", g.shape(fwd.w), g.shape(bwd.w)));
    }
    let hf = lstm_direction(g, x, fwd, false)?;
    let hb = lstm_direction(g, x, bwd, true)?;
    let f = g.stack_rows(&hf)?;
    let b = g.stack_rows(&hb)?;
    g.concat_cols(&[f, b])
}

pub fn bilstm(x: &Tensor, p: &BiLstmParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut bind = |d: &LstmDirection| LstmVars {
        w: g.constant(d.w.clone()),
        u: g.constant(d.u.clone()),
        b: g.constant(d.b.clone()),
    };
    let fwd = bind(&p.forward);
    let bwd = bind(&p.backward);
    let y = bilstm_var(&mut g, xv, fwd, bwd)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiLstmLayer {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl BiLstmLayer {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R, params: &mut ParamSet) {
        let p = BiLstmParams::random(self.input, self.hidden, rng);
        for (dir, d) in [("fwd", p.forward), ("bwd", p.backward)] {
            params.insert(format!("{}.{dir}.w", self.name), d.w);
            params.insert(format!("{}.{dir}.u", self.name), d.u);
            params.insert(format!("{}.{dir}.b", self.name), d.b);
        }
    }

    fn vars(&self, p: &Bound, dir: &str) -> Result<LstmVars> {
        Ok(LstmVars {
            w: p.get(&format!("{}.{dir}.w", self.name))?,
            u: p.get(&format!("{}.{dir}.u", self.name))?,
            b: p.get(&format!("{}.{dir}.b", self.name))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let fwd = self.vars(p, "fwd")?;
        let bwd = self.vars(p, "bwd")?;
        bilstm_var(g, x, fwd, bwd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::matrix(2, 4, vec![1., 2., 3., 4., -1., 0., 0.5, 9.]).unwrap();
        let w = Tensor::new(vec![2, 2, 1], vec![1., 0., 0., 1.]).unwrap();
        let p = Conv1dParams::new(w, Tensor::zeros(&[2]), 0, Activation::None).unwrap();
        assert_eq!(conv1d(&x, &p).unwrap(), x);
    }

    #[test]
    fn conv_zero_weights_gives_bias() {
        let x = Tensor::matrix(3, 5, (0..15).map(f64::from).collect()).unwrap();
        let p = Conv1dParams::same(Tensor::zeros(&[1, 3, 3]), Tensor::vector(vec![0.7]), Activation::None).unwrap();
        let y = conv1d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 5]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn conv_hand_example_and_errors() {
        let x = Tensor::matrix(1, 3, vec![1., 2., 3.]).unwrap();
        let p = Conv1dParams::new(
            Tensor::new(vec![1, 1, 3], vec![1., 1., 1.]).unwrap(),
            Tensor::vector(vec![0.]),
            1,
            Activation::None,
        )
        .unwrap();
        assert_eq!(conv1d(&x, &p).unwrap().data(), &[3., 6., 5.]);

        let x2 = Tensor::zeros(&[2, 3]);
        assert!(matches!(conv1d(&x2, &p), Err(Error::Shape { .. })));
        assert!(Conv1dParams::same(Tensor::zeros(&[1, 1, 2]), Tensor::zeros(&[1]), Activation::None).is_err());
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let eye = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);

        let x = Tensor::vector(vec![1., 1.]);
        let w = Tensor::matrix(2, 1, vec![1., -1.]).unwrap();
        let y = linear(&x.reshape(&[1, 2]).unwrap(), &w, &Tensor::vector(vec![0.5])).unwrap();
        assert_eq!(y.data(), &[0.5]);

        assert!(linear(&Tensor::zeros(&[2, 3]), &w, &Tensor::vector(vec![0.5])).is_err());
    }

    #[test]
    fn linear_rank3_keeps_leading_axes() {
        let x = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let w = Tensor::matrix(2, 4, vec![1.; 8]).unwrap();
        let y = linear(&x, &w, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4]);
        assert_eq!(y.data()[..4], [1., 1., 1., 1.]);
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let b = Tensor::uniform(&[2], 1.0, &mut rng);
        let err = grad_check_many(
            |g, v| {
                let y = linear_var(g, v[0], v[1], v[2])?;
                let y = g.tanh(y);
                Ok(g.sum(y))
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bilstm_zero_params_gives_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let y = bilstm(&x, &BiLstmParams::zeros(3, 4)).unwrap();
        assert_eq!(y.shape(), &[5, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_rejects_wrong_input_width() {
        let x = Tensor::zeros(&[5, 2]);
        assert!(bilstm(&x, &BiLstmParams::zeros(3, 4)).is_err());
    }

    #[test]
    fn bilstm_direction_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, d, h) = (7, 3, 2);
        let x = Tensor::uniform(&[t, d], 1.0, &mut rng);
        let p = BiLstmParams::random(d, h, &mut rng);
        let y = bilstm(&x, &p).unwrap();

        let rev_rows: Vec<Vec<f64>> = (0..t).rev().map(|r| x.row(r).to_vec()).collect();
        let x_rev = Tensor::from_rows(&rev_rows).unwrap();
        let swapped = BiLstmParams::new(p.backward.clone(), p.forward.clone()).unwrap();
        let y_rev = bilstm(&x_rev, &swapped).unwrap();

        for r in 0..t {
            let a = y.row(r);
            let b = y_rev.row(t - 1 - r);
            assert_eq!(&a[..h], &b[h..]);
            assert_eq!(&a[h..], &b[..h]);
        }
    }

    #[test]
    fn bilstm_gradcheck_all_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t, d, h) = (6, 3, 2);
        let x = Tensor::uniform(&[t, d], 1.0, &mut rng);
        let p = BiLstmParams::random(d, h, &mut rng);
        let inputs = [
            x,
            p.forward.w,
            p.forward.u,
            p.forward.b,
            p.backward.w,
            p.backward.u,
            p.backward.b,
        ];
        let err = grad_check_many(
            |g, v| {
                let fwd = LstmVars { w: v[1], u: v[2], b: v[3] };
                let bwd = LstmVars { w: v[4], u: v[5], b: v[6] };
                let y = bilstm_var(g, v[0], fwd, bwd)?;
                Ok(g.sum(y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn layer_descriptors_init_expected_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        Conv1dLayer::same("c", 4, 6, 3, Activation::Relu).init(&mut rng, &mut ps);
        LinearLayer::new("l", 6, 2, Activation::None).init(&mut rng, &mut ps);
        BiLstmLayer::new("r", 4, 5).init(&mut rng, &mut ps);
        assert_eq!(ps.get("c.weight").unwrap().shape(), &[6, 4, 3]);
        assert_eq!(ps.get("l.weight").unwrap().shape(), &[6, 2]);
        assert_eq!(ps.get("r.bwd.u").unwrap().shape(), &[20, 5]);
        let bound = init_bound(12);
        assert!(ps.get("c.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    }
}
