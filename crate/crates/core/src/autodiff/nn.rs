//! Parameterised layers built from graph primitives.
//!
//! Layers only hold [`ParamId`]s, so one layout can be evaluated against
//! stores of either float width.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::{Error, Result};

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform values.
    pub fn xavier<F: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of(self.rng.random_range(-limit..limit)))
            .collect();
        Tensor::new(shape, data).expect("initialiser shape")
    }

    pub fn normal<F: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("initialiser shape")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

fn constant<F: Real>(shape: &[usize], v: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, alloc::vec![F::of(v); n]).expect("constant shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), init.xavier(&[din, dout], din, dout))?,
            b: store.add(format!("{name}.b"), constant(&[dout], 0.0))?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.affine(x, w, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: convolution kernel must be odd, got {kernel}")));
        }
        Ok(Self {
            w: store.add(format!("{name}.w"), init.xavier(&[kernel, cin, cout], kernel * cin, kernel * cout))?,
            b: store.add(format!("{name}.b"), constant(&[cout], 0.0))?,
            kernel,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv1d(x, w, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), constant(&[d], 1.0))?,
            beta: store.add(format!("{name}.beta"), constant(&[d], 0.0))?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Scaled dot-product attention over `heads` column groups.
///
/// The key projection has no bias: a key bias shifts every score in a row by
/// the same amount, which the softmax cancels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: ParamId,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: model width {d} is not divisible by {heads} heads")));
        }
        let q = Linear::new(store, init, &format!("{name}.wq"), d, d)?;
        let k = store.add(format!("{name}.wk.w"), init.xavier(&[d, d], d, d))?;
        let mut lin = |suffix: &str| Linear::new(store, init, &format!("{name}.w{suffix}"), d, d);
        Ok(Self {
            q,
            k,
            v: lin("v")?,
            out: lin("o")?,
            heads,
            d,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        self.forward_with_weights(g, x).map(|(y, _)| y)
    }

    /// Output plus the T×T attention weights of every head.
    pub fn forward_with_weights<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<(Var, Vec<Var>)> {
        let (t, d) = (g.value(x).rows(), g.value(x).cols());
        if d != self.d {
            return Err(Error::shape(
                "multi_head_attention",
                format!("input width {d}, layer width {}", self.d),
            ));
        }
        let q = self.q.forward(g, x)?;
        let wk = g.param(self.k);
        let k = g.matmul(x, wk)?;
        let v = self.v.forward(g, x)?;
        let dh = d / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 0, t, h * dh, dh)?;
            let kh = g.slice(k, 0, t, h * dh, dh)?;
            let vh = g.slice(v, 0, t, h * dh, dh)?;
            let scores = g.matmul_t(qh, kh, false, true)?;
            let scores = g.scale(scores, scale);
            let a = g.softmax(scores);
            outs.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.out.forward(g, cat)?, weights))
    }
}

/// Initial update-gate bias. With sigmoid(4) ~ 0.98 of the state kept per
/// step, early tokens still reach the final state of a long sequence.
pub const UPDATE_GATE_BIAS: f64 = 4.0;

/// Gated recurrent unit with gate order (reset, update, candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let h3 = 3 * hidden;
        Ok(Self {
            w_ih: store.add(format!("{name}.w_ih"), init.xavier(&[input, h3], input, hidden))?,
            b_ih: store.add(format!("{name}.b_ih"), {
                let mut t = constant::<F>(&[h3], 0.0);
                for v in &mut t.data_mut()[hidden..2 * hidden] {
                    *v = F::of(UPDATE_GATE_BIAS);
                }
                t
            })?,
            w_hh: store.add(format!("{name}.w_hh"), init.xavier(&[hidden, h3], hidden, hidden))?,
            b_hh: store.add(format!("{name}.b_hh"), constant(&[h3], 0.0))?,
            input,
            hidden,
        })
    }

    /// One step from precomputed input projections `xw` (1×3H) and state `h` (1×H).
    fn step<F: Real>(&self, g: &mut Graph<'_, F>, xw: Var, xw_row: usize, h: Var, w_hh: Var, b_hh: Var) -> Result<Var> {
        let n = self.hidden;
        let hw = g.affine(h, w_hh, b_hh)?;
        let xr = g.slice(xw, xw_row, 1, 0, n)?;
        let xz = g.slice(xw, xw_row, 1, n, n)?;
        let xn = g.slice(xw, xw_row, 1, 2 * n, n)?;
        let hr = g.slice(hw, 0, 1, 0, n)?;
        let hz = g.slice(hw, 0, 1, n, n)?;
        let hn = g.slice(hw, 0, 1, 2 * n, n)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn)?;
        let cand = g.add(xn, rh)?;
        let cand = g.tanh(cand);
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = g.sub(h, cand)?;
        let zd = g.mul(z, diff)?;
        g.add(cand, zd)
    }

    /// Single cell application to one input row `x` (1×input) and state `h`.
    pub fn cell<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, h: Var) -> Result<Var> {
        let w_ih = g.param(self.w_ih);
        let b_ih = g.param(self.b_ih);
        let w_hh = g.param(self.w_hh);
        let b_hh = g.param(self.b_hh);
        let xw = g.affine(x, w_ih, b_ih)?;
        self.step(g, xw, 0, h, w_hh, b_hh)
    }

    /// Runs the sequence `x` (T×input) from a zero state and returns the final
    /// state (1×hidden).
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let t = g.value(x).rows();
        self.forward_steps(g, x, t)
    }

    /// Like [`Gru::forward`] but stops after the first `steps` rows.
    pub fn forward_steps<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, steps: usize) -> Result<Var> {
        let (rows, din) = (g.value(x).rows(), g.value(x).cols());
        if din != self.input || steps == 0 || steps > rows {
            return Err(Error::shape(
                "gru",
                format!("input {rows}x{din}, {steps} steps, expected width {}", self.input),
            ));
        }
        let t = steps;
        let w_ih = g.param(self.w_ih);
        let b_ih = g.param(self.b_ih);
        let w_hh = g.param(self.w_hh);
        let b_hh = g.param(self.b_hh);
        let xw = g.affine(x, w_ih, b_ih)?;
        let mut h = g.input(Tensor::zeros(&[1, self.hidden]));
        for row in 0..t {
            h = self.step(g, xw, row, h, w_hh, b_hh)?;
        }
        Ok(h)
    }
}

/// Names of every parameter created under `prefix`.
pub fn names_with_prefix<F: Real>(store: &ParamStore<F>, prefix: &str) -> Vec<String> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| p.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;

    #[test]
    fn attention_width_must_divide() {
        let mut s = ParamStore::<f64>::new();
        let e = MultiHeadAttention::new(&mut s, &mut Init::new(0), "a", 10, 4).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let mut s = ParamStore::<f64>::new();
        let mut init = Init::new(1);
        let attn = MultiHeadAttention::new(&mut s, &mut init, "a", 8, 2).unwrap();
        for id in [attn.q.b, attn.v.b, attn.out.b] {
            let t = init.normal(&[8], 0.5);
            s.set_value(id, t).unwrap();
        }
        let x = init.normal::<f64>(&[1, 8], 1.0);
        let mut g = Graph::new(&s, Mode::Eval);
        let xv = g.input(x);
        let y = attn.forward(&mut g, xv).unwrap();
        let v = attn.v.forward(&mut g, xv).unwrap();
        let expect = attn.out.forward(&mut g, v).unwrap();
        assert_eq!(g.value(y).data(), g.value(expect).data());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut s = ParamStore::<f64>::new();
        let mut init = Init::new(2);
        let attn = MultiHeadAttention::new(&mut s, &mut init, "a", 8, 2).unwrap();
        let x = init.normal::<f64>(&[16, 8], 1.0);
        let mut g = Graph::new(&s, Mode::Eval);
        let xv = g.input(x);
        let (_, weights) = attn.forward_with_weights(&mut g, xv).unwrap();
        for w in weights {
            for r in 0..16 {
                let sum: f64 = g.value(w).row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gru_zero_fixed_point() {
        let mut s = ParamStore::<f64>::new();
        let gru = Gru::new(&mut s, &mut Init::new(0), "rnn", 3, 5).unwrap();
        for id in [gru.w_ih, gru.b_ih, gru.w_hh, gru.b_hh] {
            let shape = s.value(id).shape().to_vec();
            s.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.input(Tensor::zeros(&[7, 3]));
        let h = gru.forward(&mut g, x).unwrap();
        assert_eq!(g.value(h).data(), &[0.0; 5]);
    }

    #[test]
    fn gru_single_step_equals_cell() {
        let mut s = ParamStore::<f64>::new();
        let mut init = Init::new(4);
        let gru = Gru::new(&mut s, &mut init, "rnn", 3, 5).unwrap();
        let x = init.normal::<f64>(&[1, 3], 1.0);
        let mut g = Graph::new(&s, Mode::Eval);
        let xv = g.input(x);
        let seq = gru.forward(&mut g, xv).unwrap();
        let h0 = g.input(Tensor::zeros(&[1, 5]));
        let one = gru.cell(&mut g, xv, h0).unwrap();
        assert_eq!(g.value(seq).data(), g.value(one).data());
    }
}
