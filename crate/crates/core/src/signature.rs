//! Raw pen-tablet signatures and uniform resampling.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Resampling rate applied before feature extraction.
pub const DEFAULT_RATE_HZ: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureLabel {
    Genuine,
    SkilledForgery,
}

impl SignatureLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SignatureLabel::Genuine => "genuine",
            SignatureLabel::SkilledForgery => "skilled_forgery",
        }
    }
}

impl fmt::Display for SignatureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignatureLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genuine" => Ok(SignatureLabel::Genuine),
            "skilled_forgery" | "skilled" | "forgery" => Ok(SignatureLabel::SkilledForgery),
            other => Err(Error::Validation(alloc::format!(
                "unknown signature label {other:?}"
            ))),
        }
    }
}

/// One acquired signature. Construct through [`RawSignature::new`], which
/// enforces the sequence invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSignature {
    subject_id: String,
    sample_id: String,
    label: SignatureLabel,
    x: Vec<f64>,
    y: Vec<f64>,
    pressure: Vec<f64>,
    timestamp: Vec<f64>,
}

impl RawSignature {
    pub fn new(
        subject_id: impl Into<String>,
        sample_id: impl Into<String>,
        label: SignatureLabel,
        x: Vec<f64>,
        y: Vec<f64>,
        pressure: Vec<f64>,
        timestamp: Vec<f64>,
    ) -> Result<Self> {
        let n = x.len();
        if y.len() != n || pressure.len() != n || timestamp.len() != n {
            return Err(Error::Validation(alloc::format!(
                "sequence lengths differ: x={}, y={}, pressure={}, timestamp={}",
                n,
                y.len(),
                pressure.len(),
                timestamp.len()
            )));
        }
        if n < 2 {
            return Err(Error::TooShort { len: n, min: 2 });
        }
        for (i, v) in x.iter().chain(&y).chain(&pressure).chain(&timestamp).enumerate() {
            if !v.is_finite() {
                return Err(Error::Validation(alloc::format!(
                    "non-finite value at sample {}",
                    i % n
                )));
            }
        }
        for i in 1..n {
            if timestamp[i] < timestamp[i - 1] {
                return Err(Error::NonMonotonicTimestamp { index: i });
            }
        }
        if let Some(i) = pressure.iter().position(|&p| p < 0.0) {
            return Err(Error::Validation(alloc::format!(
                "negative pressure at sample {i}"
            )));
        }
        if timestamp[n - 1] == timestamp[0] {
            return Err(Error::ZeroDuration);
        }
        Ok(Self {
            subject_id: subject_id.into(),
            sample_id: sample_id.into(),
            label,
            x,
            y,
            pressure,
            timestamp,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn label(&self) -> SignatureLabel {
        self.label
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn pressure(&self) -> &[f64] {
        &self.pressure
    }

    pub fn timestamp(&self) -> &[f64] {
        &self.timestamp
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Duration in milliseconds.
    pub fn duration_ms(&self) -> f64 {
        self.timestamp[self.len() - 1] - self.timestamp[0]
    }
}

/// A signature on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformSignature {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub pressure: Vec<f64>,
    pub rate_hz: f64,
}

impl UniformSignature {
    pub fn new(x: Vec<f64>, y: Vec<f64>, pressure: Vec<f64>, rate_hz: f64) -> Result<Self> {
        if rate_hz.is_nan() || rate_hz <= 0.0 {
            return Err(Error::Validation(alloc::format!("rate must be positive, got {rate_hz}")));
        }
        if y.len() != x.len() || pressure.len() != x.len() {
            return Err(Error::Validation("uniform sequences differ in length".into()));
        }
        if x.len() < 2 {
            return Err(Error::TooShort { len: x.len(), min: 2 });
        }
        Ok(Self {
            x,
            y,
            pressure,
            rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Linearly interpolates x, y and pressure onto a grid starting at the first
/// timestamp with step `1000 / rate_hz` ms.
pub fn resample_uniform(sig: &RawSignature, rate_hz: f64) -> Result<UniformSignature> {
    if !rate_hz.is_finite() || rate_hz <= 0.0 {
        return Err(Error::Validation(alloc::format!("rate must be positive, got {rate_hz}")));
    }
    let t = sig.timestamp();
    let t0 = t[0];
    let span = sig.duration_ms();
    if span <= 0.0 {
        return Err(Error::ZeroDuration);
    }
    // span * rate / 1000 keeps integral sample counts exact for millisecond grids
    let len = libm::floor(span * rate_hz / 1000.0 + 1e-9) as usize + 1;
    let step = 1000.0 / rate_hz;

    let mut x = Vec::with_capacity(len);
    let mut y = Vec::with_capacity(len);
    let mut p = Vec::with_capacity(len);
    let mut seg = 0usize;
    let last = t.len() - 1;
    for k in 0..len {
        let tk = t0 + k as f64 * step;
        while seg + 1 < last && t[seg + 1] <= tk {
            seg += 1;
        }
        // zero-width segments come from repeated timestamps
        while seg + 1 < last && t[seg + 1] == t[seg] {
            seg += 1;
        }
        let (ta, tb) = (t[seg], t[seg + 1]);
        let frac = if tb > ta {
            ((tk - ta) / (tb - ta)).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let lerp = |v: &[f64]| {
            let (a, b) = (v[seg], v[seg + 1]);
            if frac == 0.0 {
                a
            } else if frac == 1.0 {
                b
            } else {
                a + frac * (b - a)
            }
        };
        x.push(lerp(sig.x()));
        y.push(lerp(sig.y()));
        p.push(lerp(sig.pressure()));
    }
    UniformSignature::new(x, y, p, rate_hz)
}
