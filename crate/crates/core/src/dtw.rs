//! Unconstrained DTW over multichannel frames and fixed-length pair expansion.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::features::{FeatureSequence, NUM_CHANNELS};
use crate::{Error, Result};

/// Frame count of every aligned half fed to the encoders.
pub const ALIGNED_LENGTH: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct WarpingPath {
    pub steps: Vec<(usize, usize)>,
    pub cost: f64,
}

impl WarpingPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Match,
    NonmatchRandom,
    NonmatchSkilled,
}

impl PairLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PairLabel::Match => "match",
            PairLabel::NonmatchRandom => "nonmatch_random",
            PairLabel::NonmatchSkilled => "nonmatch_skilled",
        }
    }

    /// Code stored in the binary aligned-pair header.
    pub fn code(self) -> u32 {
        match self {
            PairLabel::Match => 0,
            PairLabel::NonmatchRandom => 1,
            PairLabel::NonmatchSkilled => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(PairLabel::Match),
            1 => Some(PairLabel::NonmatchRandom),
            2 => Some(PairLabel::NonmatchSkilled),
            _ => None,
        }
    }

    pub fn is_match(self) -> bool {
        self == PairLabel::Match
    }
}

impl fmt::Display for PairLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" | "genuine" => Ok(PairLabel::Match),
            "nonmatch_random" | "random" => Ok(PairLabel::NonmatchRandom),
            "nonmatch_skilled" | "skilled" => Ok(PairLabel::NonmatchSkilled),
            other => Err(Error::Validation(alloc::format!("unknown pair label {other:?}"))),
        }
    }
}

/// Two aligned halves of `length` frames each; rows at or beyond
/// `valid_length` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub length: usize,
    pub channels: usize,
    pub valid_length: usize,
    pub label: Option<PairLabel>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
}

/// DTW over row-major frame matrices with `channels` columns.
///
/// Backtracking prefers the diagonal predecessor, then `(i-1, j)`, then
/// `(i, j-1)` when cumulative costs tie.
pub fn dtw_frames(a: &[f64], b: &[f64], channels: usize) -> Result<WarpingPath> {
    if channels == 0 || !a.len().is_multiple_of(channels) || !b.len().is_multiple_of(channels) {
        return Err(Error::shape(
            "dtw",
            alloc::format!("{} / {} values with {channels} channels", a.len(), b.len()),
        ));
    }
    let (n, m) = (a.len() / channels, b.len() / channels);
    if n == 0 || m == 0 {
        return Err(Error::Validation("dtw needs non-empty sequences".into()));
    }
    let frame_a = |i: usize| &a[i * channels..(i + 1) * channels];
    let frame_b = |j: usize| &b[j * channels..(j + 1) * channels];

    let mut acc = vec![0.0f64; n * m];
    for i in 0..n {
        let fa = frame_a(i);
        for j in 0..m {
            let d = euclidean(fa, frame_b(j));
            let prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => acc[j - 1],
                (_, 0) => acc[(i - 1) * m],
                _ => {
                    let diag = acc[(i - 1) * m + j - 1];
                    let up = acc[(i - 1) * m + j];
                    let left = acc[i * m + j - 1];
                    diag.min(up).min(left)
                }
            };
            acc[i * m + j] = prev + d;
        }
    }

    let mut steps = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n - 1, m - 1);
    steps.push((i, j));
    while (i, j) != (0, 0) {
        if i == 0 {
            j -= 1;
        } else if j == 0 {
            i -= 1;
        } else {
            let diag = acc[(i - 1) * m + j - 1];
            let up = acc[(i - 1) * m + j];
            let left = acc[i * m + j - 1];
            if diag <= up && diag <= left {
                i -= 1;
                j -= 1;
            } else if up <= left {
                i -= 1;
            } else {
                j -= 1;
            }
        }
        steps.push((i, j));
    }
    steps.reverse();
    Ok(WarpingPath {
        steps,
        cost: acc[n * m - 1],
    })
}

pub fn dtw(a: &FeatureSequence, b: &FeatureSequence) -> Result<WarpingPath> {
    if a.channels() != b.channels() {
        return Err(Error::shape(
            "dtw",
            alloc::format!("channel counts {} vs {}", a.channels(), b.channels()),
        ));
    }
    dtw_frames(a.values(), b.values(), a.channels())
}

/// Expands both sequences along `path` into `length` frames, truncating the
/// path tail when it is longer.
pub fn expand_along_path(
    a: &FeatureSequence,
    b: &FeatureSequence,
    path: &WarpingPath,
    length: usize,
    label: Option<PairLabel>,
) -> Result<AlignedPair> {
    if length == 0 {
        return Err(Error::Config("aligned length must be positive".into()));
    }
    let c = NUM_CHANNELS;
    let valid = path.len().min(length);
    let mut out_a = vec![0.0; length * c];
    let mut out_b = vec![0.0; length * c];
    for (k, &(i, j)) in path.steps.iter().take(valid).enumerate() {
        if i >= a.len() || j >= b.len() {
            return Err(Error::shape(
                "expand_along_path",
                alloc::format!("step ({i}, {j}) outside {}x{}", a.len(), b.len()),
            ));
        }
        out_a[k * c..(k + 1) * c].copy_from_slice(a.row(i));
        out_b[k * c..(k + 1) * c].copy_from_slice(b.row(j));
    }
    Ok(AlignedPair {
        a: out_a,
        b: out_b,
        length,
        channels: c,
        valid_length: valid,
        label,
    })
}

pub fn prepare_pair(a: &FeatureSequence, b: &FeatureSequence) -> Result<AlignedPair> {
    prepare_pair_with_length(a, b, ALIGNED_LENGTH)
}

pub fn prepare_pair_with_length(
    a: &FeatureSequence,
    b: &FeatureSequence,
    length: usize,
) -> Result<AlignedPair> {
    let path = dtw(a, b)?;
    expand_along_path(a, b, &path, length, None)
}
