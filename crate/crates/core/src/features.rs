//! The 23 local time functions.
//!
//! All derivatives use a unit time step on the 100 Hz grid; absolute scale is
//! removed later by per-channel z-normalisation.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::signature::UniformSignature;
use crate::{Error, Result};

pub const NUM_CHANNELS: usize = 23;

/// Guard used in every division and logarithm.
pub const EPS: f64 = 1e-8;

/// Minimum length accepted by [`extract_time_functions`] (largest window).
pub const MIN_LENGTH: usize = 7;

/// Channel order of every [`FeatureSequence`].
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = [
    "x",
    "y",
    "pressure",
    "path_tangent_angle",
    "path_velocity",
    "log_curvature_radius",
    "total_acceleration",
    "dx",
    "dy",
    "dpressure",
    "dpath_tangent_angle",
    "dpath_velocity",
    "dlog_curvature_radius",
    "dtotal_acceleration",
    "ddx",
    "ddy",
    "velocity_ratio_w5",
    "segment_angle",
    "dsegment_angle",
    "sin_segment_angle",
    "cos_segment_angle",
    "length_width_ratio_w5",
    "length_width_ratio_w7",
];

/// T x 23 matrix of time functions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    values: Vec<f64>,
    len: usize,
}

impl FeatureSequence {
    pub fn from_rows(values: Vec<f64>) -> Result<Self> {
        if !values.len().is_multiple_of(NUM_CHANNELS) {
            return Err(Error::shape(
                "feature_sequence",
                alloc::format!("{} values is not a multiple of {NUM_CHANNELS}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature sequence contains NaN/Inf".into()));
        }
        let len = values.len() / NUM_CHANNELS;
        Ok(Self { values, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        NUM_CHANNELS
    }

    pub fn channel_names(&self) -> &'static [&'static str; NUM_CHANNELS] {
        &CHANNEL_NAMES
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * NUM_CHANNELS..(t + 1) * NUM_CHANNELS]
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * NUM_CHANNELS + c]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(t, c)).collect()
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a - two_pi * libm::floor((a + PI) / two_pi);
    if r <= -PI {
        r += two_pi;
    } else if r > PI {
        r -= two_pi;
    }
    r
}

fn derivative(f: &[f64]) -> Vec<f64> {
    derivative_with(f, |d| d)
}

fn angular_derivative(f: &[f64]) -> Vec<f64> {
    derivative_with(f, wrap_angle)
}

fn derivative_with(f: &[f64], diff: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    d[0] = diff(f[1] - f[0]);
    d[n - 1] = diff(f[n - 1] - f[n - 2]);
    for i in 1..n - 1 {
        d[i] = diff(f[i + 1] - f[i - 1]) / 2.0;
    }
    d
}

fn window(n: usize, len: usize, width: usize) -> core::ops::RangeInclusive<usize> {
    let half = width / 2;
    n.saturating_sub(half)..=(n + half).min(len - 1)
}

fn velocity_ratio(v: &[f64], width: usize) -> Vec<f64> {
    (0..v.len())
        .map(|n| {
            let w = &v[window(n, v.len(), width)];
            let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            lo / (hi + EPS)
        })
        .collect()
}

/// Path length inside the window over the window's diameter (largest
/// point-to-point distance).
fn length_width_ratio(x: &[f64], y: &[f64], width: usize) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            let r = window(n, x.len(), width);
            let (a, b) = (*r.start(), *r.end());
            let mut length = 0.0;
            for i in a + 1..=b {
                length += libm::hypot(x[i] - x[i - 1], y[i] - y[i - 1]);
            }
            let mut diameter: f64 = 0.0;
            for i in a..=b {
                for j in i + 1..=b {
                    diameter = diameter.max(libm::hypot(x[j] - x[i], y[j] - y[i]));
                }
            }
            length / (diameter + EPS)
        })
        .collect()
}

pub fn extract_time_functions(sig: &UniformSignature) -> Result<FeatureSequence> {
    let n = sig.len();
    if n < MIN_LENGTH {
        return Err(Error::TooShort {
            len: n,
            min: MIN_LENGTH,
        });
    }
    let (x, y, p) = (&sig.x, &sig.y, &sig.pressure);

    let dx = derivative(x);
    let dy = derivative(y);
    let dp = derivative(p);
    let theta: Vec<f64> = dx.iter().zip(&dy).map(|(&a, &b)| libm::atan2(b, a)).collect();
    let v: Vec<f64> = dx.iter().zip(&dy).map(|(&a, &b)| libm::hypot(a, b)).collect();
    let dtheta = angular_derivative(&theta);
    let rho: Vec<f64> = v
        .iter()
        .zip(&dtheta)
        .map(|(&vi, &ti)| libm::log(vi / (ti.abs() + EPS) + EPS))
        .collect();
    let dv = derivative(&v);
    let acc: Vec<f64> = (0..n)
        .map(|i| libm::hypot(dv[i], v[i] * dtheta[i]))
        .collect();
    let drho = derivative(&rho);
    let dacc = derivative(&acc);
    let ddx = derivative(&dx);
    let ddy = derivative(&dy);
    let vratio = velocity_ratio(&v, 5);

    let mut alpha = vec![0.0; n];
    for i in 1..n {
        alpha[i] = libm::atan2(y[i] - y[i - 1], x[i] - x[i - 1]);
    }
    alpha[0] = alpha[1];
    let dalpha = angular_derivative(&alpha);
    let lw5 = length_width_ratio(x, y, 5);
    let lw7 = length_width_ratio(x, y, 7);

    let columns: [&[f64]; NUM_CHANNELS] = [
        x, y, p, &theta, &v, &rho, &acc, &dx, &dy, &dp, &dtheta, &dv, &drho, &dacc, &ddx, &ddy,
        &vratio, &alpha, &dalpha, &[], &[], &lw5, &lw7,
    ];
    let mut values = Vec::with_capacity(n * NUM_CHANNELS);
    for t in 0..n {
        for (c, col) in columns.iter().enumerate() {
            let val = match c {
                19 => libm::sin(alpha[t]),
                20 => libm::cos(alpha[t]),
                _ => col[t],
            };
            values.push(val);
        }
    }
    FeatureSequence::from_rows(values)
}

/// Per-channel z-score with population standard deviation. Channels whose
/// deviation is below 1e-8 become all zeros.
pub fn znormalize_channels(fs: &FeatureSequence) -> FeatureSequence {
    let n = fs.len();
    let mut values = fs.values.clone();
    if n == 0 {
        return fs.clone();
    }
    for c in 0..NUM_CHANNELS {
        let mean = (0..n).map(|t| fs.get(t, c)).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|t| {
                let d = fs.get(t, c) - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let std = libm::sqrt(var);
        for t in 0..n {
            values[t * NUM_CHANNELS + c] = if std < 1e-8 {
                0.0
            } else {
                (fs.get(t, c) - mean) / std
            };
        }
    }
    FeatureSequence { values, len: n }
}
