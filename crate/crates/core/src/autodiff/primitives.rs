//! Finite-difference checks of every graph primitive on small random inputs.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckReport, Graph, LossFn, ParamId, ParamStore, Precision, Real, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Matmul,
    MatmulTransposed,
    Affine,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    OneMinus,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    LayerNorm,
    Dropout,
    Conv1d,
    MaxPool,
    Slice,
    Concat,
    Transpose,
    MeanRows,
    GreWeights,
    Bce,
}

impl Primitive {
    pub const ALL: [Primitive; 23] = [
        Primitive::Matmul,
        Primitive::MatmulTransposed,
        Primitive::Affine,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::AddRow,
        Primitive::Scale,
        Primitive::OneMinus,
        Primitive::Relu,
        Primitive::Tanh,
        Primitive::Sigmoid,
        Primitive::Softmax,
        Primitive::LayerNorm,
        Primitive::Dropout,
        Primitive::Conv1d,
        Primitive::MaxPool,
        Primitive::Slice,
        Primitive::Concat,
        Primitive::Transpose,
        Primitive::MeanRows,
        Primitive::GreWeights,
        Primitive::Bce,
    ];

    /// Shapes of the inputs, all of which are treated as parameters.
    pub fn input_shapes(self) -> &'static [&'static [usize]] {
        match self {
            Primitive::Matmul => &[&[3, 4], &[4, 2]],
            Primitive::MatmulTransposed => &[&[4, 3], &[2, 4]],
            Primitive::Affine => &[&[3, 4], &[4, 5], &[5]],
            Primitive::Add | Primitive::Sub | Primitive::Mul => &[&[3, 4], &[3, 4]],
            Primitive::AddRow => &[&[3, 4], &[4]],
            Primitive::Scale
            | Primitive::OneMinus
            | Primitive::Relu
            | Primitive::Tanh
            | Primitive::Sigmoid
            | Primitive::Dropout => &[&[3, 4]],
            Primitive::Softmax | Primitive::Transpose => &[&[3, 5]],
            Primitive::LayerNorm => &[&[3, 6], &[6], &[6]],
            Primitive::Conv1d => &[&[7, 3], &[3, 3, 4], &[4]],
            Primitive::MaxPool => &[&[8, 3]],
            Primitive::Slice => &[&[4, 5]],
            Primitive::Concat => &[&[3, 2], &[3, 4]],
            Primitive::MeanRows => &[&[4, 3]],
            Primitive::GreWeights => &[&[4], &[4]],
            Primitive::Bce => &[&[1, 4]],
        }
    }
}

/// One primitive reduced to a scalar with fixed random weights.
struct Probe {
    primitive: Primitive,
    ids: Vec<ParamId>,
    weights: Vec<f64>,
}

impl LossFn for Probe {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let p: Vec<Var> = self.ids.iter().map(|&id| g.param(id)).collect();
        let y = match self.primitive {
            Primitive::Matmul => g.matmul(p[0], p[1])?,
            Primitive::MatmulTransposed => g.matmul_t(p[0], p[1], true, true)?,
            Primitive::Affine => g.affine(p[0], p[1], p[2])?,
            Primitive::Add => g.add(p[0], p[1])?,
            Primitive::Sub => g.sub(p[0], p[1])?,
            Primitive::Mul => g.mul(p[0], p[1])?,
            Primitive::AddRow => g.add_row(p[0], p[1])?,
            Primitive::Scale => g.scale(p[0], -1.7),
            Primitive::OneMinus => g.one_minus(p[0]),
            Primitive::Relu => g.relu(p[0]),
            Primitive::Tanh => g.tanh(p[0]),
            Primitive::Sigmoid => g.sigmoid(p[0]),
            Primitive::Softmax => g.softmax(p[0]),
            Primitive::LayerNorm => g.layer_norm(p[0], p[1], p[2])?,
            Primitive::Dropout => g.dropout(p[0], 0.3),
            Primitive::Conv1d => g.conv1d(p[0], p[1], p[2])?,
            Primitive::MaxPool => g.max_pool2(p[0])?,
            Primitive::Slice => g.slice(p[0], 1, 2, 1, 3)?,
            Primitive::Concat => g.concat_cols(&[p[0], p[1]])?,
            Primitive::Transpose => g.transpose(p[0]),
            Primitive::MeanRows => g.mean_rows(p[0]),
            Primitive::GreWeights => g.gre_weights(p[0], p[1], 9)?,
            Primitive::Bce => {
                let s = g.sigmoid(p[0]);
                return g.bce(s, &[1.0, 0.0, 1.0, 0.0]);
            }
        };
        let w: Vec<F> = self.weights[..g.value(y).len()].iter().map(|&v| F::of(v)).collect();
        g.weighted_sum(y, &w)
    }
}

/// [`grad_check`] of `primitive` at inputs drawn from U(-1.5, 1.5).
pub fn check_primitive(primitive: Primitive, seed: u64, precision: Precision) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let mut ids = Vec::new();
    for (i, shape) in primitive.input_shapes().iter().enumerate() {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        ids.push(store.add(format!("in{i}"), Tensor::new(shape, values)?)?);
    }
    let weights = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    grad_check(&store, &Probe { primitive, ids, weights }, precision)
}

/// Every primitive in [`Primitive::ALL`] order, primitive `i` seeded with `seed + i`.
pub fn check_all_primitives(seed: u64, precision: Precision) -> Result<Vec<(Primitive, GradCheckReport)>> {
    Primitive::ALL
        .iter()
        .enumerate()
        .map(|(i, &p)| Ok((p, check_primitive(p, seed + i as u64, precision)?)))
        .collect()
}
