use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Real, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout disabled.
    Eval,
    /// Dropout enabled, masks drawn from a generator seeded with `seed`.
    Train { seed: u64 },
}

enum Op<F> {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale(Var, F),
    OneMinus(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        cols: Vec<F>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Slice {
        x: Var,
        r0: usize,
        c0: usize,
    },
    Concat(Vec<Var>),
    Transpose(Var),
    MeanRows(Var),
    GreWeights {
        mu: Var,
        rho: Var,
    },
    Bce {
        p: Var,
        target: Vec<F>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Gradients of a scalar with respect to every parameter reached by it.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    params: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.params.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn per_param(&self) -> impl Iterator<Item = Option<&[F]>> {
        self.params.iter().map(|g| g.as_deref())
    }
}

const BCE_CLAMP: f64 = 1e-7;
const LN_EPS: f64 = 1e-5;

fn softplus<F: Real>(x: F) -> F {
    if x > F::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Inverse of the softplus used to keep GRE widths positive.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        libm::log(libm::expm1(y))
    }
}

/// Row-major strides of a logical matrix stored either as is or transposed.
fn strides(stored_cols: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (1, stored_cols)
    } else {
        (stored_cols, 1)
    }
}

pub struct Graph<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    rng: Option<ChaCha8Rng>,
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>, mode: Mode) -> Self {
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self {
            params,
            nodes: Vec::new(),
            rng,
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.value(id).clone();
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                alloc::format!(
                    "{:?}{} x {:?}{}",
                    self.shape(a),
                    if ta { "^T" } else { "" },
                    self.shape(b),
                    if tb { "^T" } else { "" }
                ),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.data(a),
            strides(ca, ta),
            self.data(b),
            strides(cb, tb),
            F::zero(),
            &mut out,
            (n, 1),
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb, m, k, n }))
    }

    /// `x·w + b` with `x` N×in, `w` in×out and `b` of length out.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = self.dims(x);
        let (wr, dout) = self.dims(w);
        let blen = self.value(b).len();
        if wr != din || blen != dout || self.shape(w).len() != 2 {
            return Err(Error::shape(
                "affine",
                alloc::format!("x {:?}, w {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(self.data(b));
        }
        F::gemm(n, din, dout, self.data(x), (din, 1), self.data(w), (dout, 1), F::one(), &mut out, (dout, 1));
        let value = Tensor::new(&[n, dout], out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                alloc::format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let data: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op))
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let data: Vec<F> = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape as input");
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(row).len() != c {
            return Err(Error::shape(
                "add_row",
                alloc::format!("{:?} + row {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let rv = self.data(row).to_vec();
        let mut data = self.data(x).to_vec();
        for i in 0..r {
            for (d, v) in data[i * c..(i + 1) * c].iter_mut().zip(&rv) {
                *d += *v;
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::AddRow { x, row }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::of(s);
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.map(x, |v| F::one() - v, Op::OneMinus(x))
    }

    /// Subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut data = self.data(x).to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(value, Op::Softmax(x))
    }

    /// Layer normalisation over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "layer_norm",
                alloc::format!("x {:?}, gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = F::of(LN_EPS);
        let n = F::of(c as f64);
        let xs = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut out = vec![F::zero(); r * c];
        let mut xhat = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + bt[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = F::of(1.0 / (1.0 - rate));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data: Vec<F> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask })
    }

    /// Stride-1 convolution along rows with zero "same" padding.
    ///
    /// `x` is T×C_in, `w` is K×C_in×C_out (K odd) and `b` has C_out entries.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, cin) = self.dims(x);
        let ws = self.shape(w).to_vec();
        let bad = || {
            Error::shape(
                "conv1d",
                alloc::format!("x {:?}, w {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b)),
            )
        };
        if ws.len() != 3 || ws[1] != cin || ws[0].is_multiple_of(2) {
            return Err(bad());
        }
        let (kernel, cout) = (ws[0], ws[2]);
        if self.value(b).len() != cout {
            return Err(bad());
        }
        let pad = kernel / 2;
        let kc = kernel * cin;
        let xs = self.data(x);
        let mut cols = vec![F::zero(); t * kc];
        for ti in 0..t {
            for k in 0..kernel {
                let src = ti + k;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = src - pad;
                cols[ti * kc + k * cin..ti * kc + (k + 1) * cin].copy_from_slice(&xs[s * cin..(s + 1) * cin]);
            }
        }
        let mut out = Vec::with_capacity(t * cout);
        for _ in 0..t {
            out.extend_from_slice(self.data(b));
        }
        F::gemm(t, kc, cout, &cols, (kc, 1), self.data(w), (cout, 1), F::one(), &mut out, (cout, 1));
        let value = Tensor::new(&[t, cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, kernel, cols }))
    }

    /// Max-pool along rows with window 2 and stride 2; a trailing odd row is dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (t, c) = self.dims(x);
        let to = t / 2;
        if to == 0 {
            return Err(Error::shape("max_pool2", alloc::format!("{:?}", self.shape(x))));
        }
        let xs = self.data(x);
        let mut out = vec![F::zero(); to * c];
        let mut argmax = vec![0usize; to * c];
        for i in 0..to {
            for j in 0..c {
                let (p, q) = ((2 * i) * c + j, (2 * i + 1) * c + j);
                let idx = if xs[q] > xs[p] { q } else { p };
                out[i * c + j] = xs[idx];
                argmax[i * c + j] = idx;
            }
        }
        let value = Tensor::new(&[to, c], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Sub-matrix `x[r0..r0+nr, c0..c0+nc]`.
    pub fn slice(&mut self, x: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if nr == 0 || nc == 0 || r0 + nr > r || c0 + nc > c {
            return Err(Error::shape(
                "slice",
                alloc::format!("[{r0}+{nr}, {c0}+{nc}] of {:?}", self.shape(x)),
            ));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            out.extend_from_slice(&xs[i * c + c0..i * c + c0 + nc]);
        }
        let value = Tensor::new(&[nr, nc], out)?;
        Ok(self.push(value, Op::Slice { x, r0, c0 }))
    }

    /// Concatenation along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let r = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
            return Err(Error::shape("concat_cols", alloc::format!("{shapes:?}")));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(&[r, total], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xs = self.data(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out).expect("non-empty");
        self.push(value, Op::Transpose(x))
    }

    /// Mean over rows: R×C -> 1×C.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xs = self.data(x);
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xs[i * c + j];
            }
        }
        let inv = F::of(1.0 / r as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[1, c], out).expect("non-empty");
        self.push(value, Op::MeanRows(x))
    }

    /// Normalised Gaussian range weights, positions×K.
    ///
    /// Row `i` is `softmax_k(log N(i; mu_k, sigma_k))` with
    /// `sigma_k = softplus(rho_k)`, i.e. each Gaussian density divided by the
    /// sum over all ranges.
    pub fn gre_weights(&mut self, mu: Var, rho: Var, positions: usize) -> Result<Var> {
        let k = self.value(mu).len();
        if self.value(rho).len() != k || k == 0 || positions == 0 {
            return Err(Error::shape(
                "gre_weights",
                alloc::format!("mu {:?}, rho {:?}, positions {positions}", self.shape(mu), self.shape(rho)),
            ));
        }
        let mus = self.data(mu);
        let sig: Vec<F> = self.data(rho).iter().map(|&r| softplus(r)).collect();
        let half = F::of(0.5);
        let mut out = vec![F::zero(); positions * k];
        for i in 0..positions {
            let p = F::of(i as f64);
            let row = &mut out[i * k..(i + 1) * k];
            for j in 0..k {
                let z = (p - mus[j]) / sig[j];
                row[j] = -half * z * z - sig[j].ln();
            }
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(&[positions, k], out)?;
        Ok(self.push(value, Op::GreWeights { mu, rho }))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`.
    pub fn bce(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let n = self.value(p).len();
        if target.len() != n {
            return Err(Error::shape(
                "bce",
                alloc::format!("p {:?} vs {} targets", self.shape(p), target.len()),
            ));
        }
        let lo = F::of(BCE_CLAMP);
        let hi = F::one() - lo;
        let target: Vec<F> = target.iter().map(|&t| F::of(t)).collect();
        let mut loss = F::zero();
        for (&pv, &y) in self.data(p).iter().zip(&target) {
            let pc = pv.max(lo).min(hi);
            loss -= y * pc.ln() + (F::one() - y) * (F::one() - pc).ln();
        }
        loss /= F::of(n as f64);
        let value = Tensor::new(&[1], vec![loss])?;
        Ok(self.push(value, Op::Bce { p, target }))
    }

    /// `sum(x * weights)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[F]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape(
                "weighted_sum",
                alloc::format!("{:?} vs {} weights", self.shape(x), weights.len()),
            ));
        }
        let s = self.data(x).iter().zip(weights).map(|(&a, &b)| a * b).sum::<F>();
        let value = Tensor::new(&[1], vec![s])?;
        Ok(self.push(value, Op::WeightedSum { x, weights: weights.to_vec() }))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", alloc::format!("loss shape {:?}", self.shape(loss))));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Vec<F>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        fn slot<'g, F: Real>(grads: &'g mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'g mut [F] {
            grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()])
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            let y = node.value.data();
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let acc = out[id.index()].get_or_insert_with(|| vec![F::zero(); gy.len()]);
                    for (a, g) in acc.iter_mut().zip(&gy) {
                        *a += *g;
                    }
                }
                &Op::MatMul { a, b, ta, tb, m, k, n } => {
                    let ca = nodes[a.0].value.cols();
                    let cb = nodes[b.0].value.cols();
                    let (sa, sb) = (strides(ca, ta), strides(cb, tb));
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    // dA = gy · B^T
                    let ga = slot(&mut grads, nodes, a);
                    F::gemm(m, n, k, &gy, (n, 1), bv, (sb.1, sb.0), F::one(), ga, sa);
                    // dB = A^T · gy
                    let gb = slot(&mut grads, nodes, b);
                    F::gemm(k, m, n, av, (sa.1, sa.0), &gy, (n, 1), F::one(), gb, sb);
                }
                &Op::Affine { x, w, b } => {
                    let (n, din) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                    let dout = nodes[w.0].value.cols();
                    let xv = nodes[x.0].value.data();
                    let wv = nodes[w.0].value.data();
                    let gx = slot(&mut grads, nodes, x);
                    F::gemm(n, dout, din, &gy, (dout, 1), wv, (1, dout), F::one(), gx, (din, 1));
                    let gw = slot(&mut grads, nodes, w);
                    F::gemm(din, n, dout, xv, (1, din), &gy, (dout, 1), F::one(), gw, (dout, 1));
                    let gb = slot(&mut grads, nodes, b);
                    for r in 0..n {
                        for (acc, g) in gb.iter_mut().zip(&gy[r * dout..(r + 1) * dout]) {
                            *acc += *g;
                        }
                    }
                }
                &Op::Add(a, b) => {
                    add_into(slot(&mut grads, nodes, a), &gy);
                    add_into(slot(&mut grads, nodes, b), &gy);
                }
                &Op::Sub(a, b) => {
                    add_into(slot(&mut grads, nodes, a), &gy);
                    for (acc, g) in slot(&mut grads, nodes, b).iter_mut().zip(&gy) {
                        *acc -= *g;
                    }
                }
                &Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    for ((acc, g), o) in slot(&mut grads, nodes, a).iter_mut().zip(&gy).zip(bv) {
                        *acc += *g * *o;
                    }
                    for ((acc, g), o) in slot(&mut grads, nodes, b).iter_mut().zip(&gy).zip(av) {
                        *acc += *g * *o;
                    }
                }
                &Op::AddRow { x, row } => {
                    add_into(slot(&mut grads, nodes, x), &gy);
                    let c = nodes[row.0].value.len();
                    let gr = slot(&mut grads, nodes, row);
                    for chunk in gy.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
                &Op::Scale(x, s) => {
                    for (acc, g) in slot(&mut grads, nodes, x).iter_mut().zip(&gy) {
                        *acc += *g * s;
                    }
                }
                &Op::OneMinus(x) => {
                    for (acc, g) in slot(&mut grads, nodes, x).iter_mut().zip(&gy) {
                        *acc -= *g;
                    }
                }
                &Op::Relu(x) => {
                    for ((acc, g), o) in slot(&mut grads, nodes, x).iter_mut().zip(&gy).zip(y) {
                        if *o > F::zero() {
                            *acc += *g;
                        }
                    }
                }
                &Op::Tanh(x) => {
                    for ((acc, g), o) in slot(&mut grads, nodes, x).iter_mut().zip(&gy).zip(y) {
                        *acc += *g * (F::one() - *o * *o);
                    }
                }
                &Op::Sigmoid(x) => {
                    for ((acc, g), o) in slot(&mut grads, nodes, x).iter_mut().zip(&gy).zip(y) {
                        *acc += *g * *o * (F::one() - *o);
                    }
                }
                &Op::Softmax(x) => {
                    let c = node.value.cols();
                    let gx = slot(&mut grads, nodes, x);
                    for ((gxr, gyr), yr) in gx.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)) {
                        let dot = gyr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gyr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let c = node.value.cols();
                    let n = F::of(c as f64);
                    let gv = nodes[gamma.0].value.data();
                    let mut dgamma = vec![F::zero(); c];
                    let mut dbeta = vec![F::zero(); c];
                    let gx = slot(&mut grads, nodes, *x);
                    let mut dxhat = vec![F::zero(); c];
                    for (r, (gyr, xh)) in gy.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..c {
                            dgamma[j] += gyr[j] * xh[j];
                            dbeta[j] += gyr[j];
                            dxhat[j] = gyr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xh[j];
                        }
                        let scale = rstd[r] / n;
                        for j in 0..c {
                            gx[r * c + j] += scale * (n * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                    add_into(slot(&mut grads, nodes, *gamma), &dgamma);
                    add_into(slot(&mut grads, nodes, *beta), &dbeta);
                }
                Op::Dropout { x, mask } => {
                    for ((acc, g), m) in slot(&mut grads, nodes, *x).iter_mut().zip(&gy).zip(mask) {
                        *acc += *g * *m;
                    }
                }
                Op::Conv1d { x, w, b, kernel, cols } => {
                    let (t, cin) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                    let cout = node.value.cols();
                    let kc = kernel * cin;
                    let pad = kernel / 2;
                    let wv = nodes[w.0].value.data();
                    let gw = slot(&mut grads, nodes, *w);
                    F::gemm(kc, t, cout, cols, (1, kc), &gy, (cout, 1), F::one(), gw, (cout, 1));
                    let gb = slot(&mut grads, nodes, *b);
                    for chunk in gy.chunks(cout) {
                        add_into(gb, chunk);
                    }
                    let mut dcols = vec![F::zero(); t * kc];
                    F::gemm(t, cout, kc, &gy, (cout, 1), wv, (1, cout), F::zero(), &mut dcols, (kc, 1));
                    let gx = slot(&mut grads, nodes, *x);
                    for ti in 0..t {
                        for k in 0..*kernel {
                            let src = ti + k;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = src - pad;
                            add_into(
                                &mut gx[s * cin..(s + 1) * cin],
                                &dcols[ti * kc + k * cin..ti * kc + (k + 1) * cin],
                            );
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let gx = slot(&mut grads, nodes, *x);
                    for (g, &idx) in gy.iter().zip(argmax) {
                        gx[idx] += *g;
                    }
                }
                &Op::Slice { x, r0, c0 } => {
                    let c = nodes[x.0].value.cols();
                    let (nr, nc) = (node.value.rows(), node.value.cols());
                    let gx = slot(&mut grads, nodes, x);
                    for r in 0..nr {
                        let dst = (r0 + r) * c + c0;
                        add_into(&mut gx[dst..dst + nc], &gy[r * nc..(r + 1) * nc]);
                    }
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let c = nodes[p.0].value.cols();
                        let gp = slot(&mut grads, nodes, p);
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &gy[r * total + off..r * total + off + c]);
                        }
                        off += c;
                    }
                }
                &Op::Transpose(x) => {
                    let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                    let gx = slot(&mut grads, nodes, x);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gy[j * r + i];
                        }
                    }
                }
                &Op::MeanRows(x) => {
                    let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                    let inv = F::of(1.0 / r as f64);
                    let gx = slot(&mut grads, nodes, x);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gy[j] * inv;
                        }
                    }
                }
                &Op::GreWeights { mu, rho } => {
                    let k = node.value.cols();
                    let positions = node.value.rows();
                    let mus = nodes[mu.0].value.data();
                    let rhos = nodes[rho.0].value.data();
                    let sig: Vec<F> = rhos.iter().map(|&r| softplus(r)).collect();
                    let mut dmu = vec![F::zero(); k];
                    let mut dsig = vec![F::zero(); k];
                    for i in 0..positions {
                        let p = F::of(i as f64);
                        let yr = &y[i * k..(i + 1) * k];
                        let gr = &gy[i * k..(i + 1) * k];
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>();
                        for j in 0..k {
                            let dl = yr[j] * (gr[j] - dot);
                            let diff = p - mus[j];
                            let s = sig[j];
                            dmu[j] += dl * diff / (s * s);
                            dsig[j] += dl * (diff * diff / (s * s * s) - F::one() / s);
                        }
                    }
                    add_into(slot(&mut grads, nodes, mu), &dmu);
                    let grho = slot(&mut grads, nodes, rho);
                    for j in 0..k {
                        grho[j] += dsig[j] * sigmoid(rhos[j]);
                    }
                }
                Op::Bce { p, target } => {
                    let lo = F::of(BCE_CLAMP);
                    let hi = F::one() - lo;
                    let n = F::of(target.len() as f64);
                    let pv = nodes[p.0].value.data();
                    let gp = slot(&mut grads, nodes, *p);
                    for ((acc, &pr), &t) in gp.iter_mut().zip(pv).zip(target) {
                        let pc = pr.max(lo).min(hi);
                        *acc += gy[0] * (pc - t) / (pc * (F::one() - pc)) / n;
                    }
                }
                Op::WeightedSum { x, weights } => {
                    for (acc, w) in slot(&mut grads, nodes, *x).iter_mut().zip(weights) {
                        *acc += gy[0] * *w;
                    }
                }
            }
        }
        Ok(Gradients { params: out })
    }
}

fn add_into<F: Real>(acc: &mut [F], g: &[F]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += *v;
    }
}
