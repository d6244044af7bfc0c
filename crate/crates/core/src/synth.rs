//! Sum-of-sinusoids signature generator used in place of restricted corpora.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::signature::{RawSignature, SignatureLabel};
use crate::{Error, Result};

/// Nominal sampling period of generated signatures.
pub const SAMPLE_PERIOD_MS: f64 = 10.0;

const DURATION_RANGE_S: (f64, f64) = (2.0, 6.0);
const GENUINE_JITTER: f64 = 0.05;
const FORGERY_JITTER: (f64, f64) = (0.15, 0.30);
const NOISE_FRACTION: f64 = 0.003;

/// Per-subject generator parameters. Frequencies are in cycles per
/// signature, so the shape does not depend on the duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSubjectSpec {
    pub seed: u64,
    pub num_harmonics: usize,
    pub amplitude_x: Vec<f64>,
    pub amplitude_y: Vec<f64>,
    pub frequency_x: Vec<f64>,
    pub frequency_y: Vec<f64>,
    pub phase_x: Vec<f64>,
    pub phase_y: Vec<f64>,
    /// Horizontal drift over the whole signature.
    pub drift: f64,
    pub duration_s: f64,
    pub pressure_base: f64,
    pub pressure_frequency: f64,
    /// Pen-up gaps as (start, width) fractions of the duration.
    pub pen_up: Vec<(f64, f64)>,
}

impl SyntheticSubjectSpec {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rng.random_range(2..=5);
        let amp = |rng: &mut ChaCha8Rng, k: usize| rng.random_range(200.0..900.0) / (k as f64 + 1.0);
        let amplitude_x = (0..h).map(|k| amp(&mut rng, k)).collect();
        let amplitude_y = (0..h).map(|k| amp(&mut rng, k)).collect();
        let frequency_x = (0..h).map(|k| (k + 1) as f64 * rng.random_range(0.8..2.2)).collect();
        let frequency_y = (0..h).map(|k| (k + 1) as f64 * rng.random_range(0.8..2.2)).collect();
        let phase_x = (0..h).map(|_| rng.random_range(-PI..PI)).collect();
        let phase_y = (0..h).map(|_| rng.random_range(-PI..PI)).collect();
        let gaps = rng.random_range(1..=3);
        let pen_up = (0..gaps)
            .map(|g| {
                let slot = 0.8 / gaps as f64;
                let start = 0.1 + g as f64 * slot + rng.random_range(0.0..slot * 0.5);
                (start, rng.random_range(0.03..0.07))
            })
            .collect();
        Self {
            seed,
            num_harmonics: h,
            amplitude_x,
            amplitude_y,
            frequency_x,
            frequency_y,
            phase_x,
            phase_y,
            drift: rng.random_range(500.0..2500.0),
            duration_s: rng.random_range(DURATION_RANGE_S.0..DURATION_RANGE_S.1),
            pressure_base: rng.random_range(300.0..900.0),
            pressure_frequency: rng.random_range(1.0..4.0),
            pen_up,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.num_harmonics;
        if !(2..=5).contains(&h) {
            return Err(Error::Validation(format!("{h} harmonics, expected 2..=5")));
        }
        let vecs = [
            &self.amplitude_x,
            &self.amplitude_y,
            &self.frequency_x,
            &self.frequency_y,
            &self.phase_x,
            &self.phase_y,
        ];
        if vecs.iter().any(|v| v.len() != h) {
            return Err(Error::Validation("harmonic parameter lengths differ".into()));
        }
        if !(2.0..=10.0).contains(&self.duration_s) {
            return Err(Error::Validation(format!("duration {} s outside [2, 10]", self.duration_s)));
        }
        Ok(())
    }

    /// Copy with every parameter perturbed by a relative factor drawn from
    /// `±[lo, hi]`; phases move by the same fraction of π.
    fn jittered(&self, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self {
        let draw = |rng: &mut ChaCha8Rng| {
            let m = if lo == 0.0 { rng.random_range(0.0..=hi) } else { rng.random_range(lo..=hi) };
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        };
        let rel = |v: &[f64], rng: &mut ChaCha8Rng| v.iter().map(|a| a * (1.0 + draw(rng))).collect::<Vec<_>>();
        let amplitude_x = rel(&self.amplitude_x, rng);
        let amplitude_y = rel(&self.amplitude_y, rng);
        let frequency_x = rel(&self.frequency_x, rng);
        let frequency_y = rel(&self.frequency_y, rng);
        let phase_x = self.phase_x.iter().map(|p| p + PI * draw(rng)).collect();
        let phase_y = self.phase_y.iter().map(|p| p + PI * draw(rng)).collect();
        let drift = self.drift * (1.0 + draw(rng));
        let duration_s = (self.duration_s * (1.0 + draw(rng))).clamp(DURATION_RANGE_S.0, 10.0);
        let pressure_base = self.pressure_base * (1.0 + draw(rng));
        let pressure_frequency = self.pressure_frequency * (1.0 + draw(rng));
        let pen_up = self
            .pen_up
            .iter()
            .map(|&(s, w)| ((s + 0.1 * draw(rng)).clamp(0.02, 0.9), w * (1.0 + draw(rng))))
            .collect();
        Self {
            seed: self.seed,
            num_harmonics: self.num_harmonics,
            amplitude_x,
            amplitude_y,
            frequency_x,
            frequency_y,
            phase_x,
            phase_y,
            drift,
            duration_s,
            pressure_base,
            pressure_frequency,
            pen_up,
        }
    }

    /// Renders the trajectory at normalised times `u` in [0, 1], optionally
    /// warped by `warp(u)`.
    fn render(&self, rng: &mut ChaCha8Rng, warp: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = (self.duration_s * 1000.0 / SAMPLE_PERIOD_MS) as usize + 1;
        let scale = self.amplitude_x.iter().chain(&self.amplitude_y).fold(0.0f64, |a, b| a.max(*b));
        let noise = Normal::new(0.0, NOISE_FRACTION * scale).expect("finite noise");
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut p = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        for i in 0..n {
            let u = warp(i as f64 / (n - 1) as f64);
            let wave = |amp: &[f64], freq: &[f64], phase: &[f64]| -> f64 {
                (0..self.num_harmonics)
                    .map(|k| amp[k] * libm::sin(2.0 * PI * freq[k] * u + phase[k]))
                    .sum()
            };
            x.push(self.drift * u + wave(&self.amplitude_x, &self.frequency_x, &self.phase_x) + noise.sample(rng));
            y.push(wave(&self.amplitude_y, &self.frequency_y, &self.phase_y) + noise.sample(rng));
            let up = self.pen_up.iter().any(|&(s, w)| u >= s && u < s + w);
            let pressure = if up {
                0.0
            } else {
                self.pressure_base * (0.7 + 0.3 * libm::sin(2.0 * PI * self.pressure_frequency * u))
            };
            p.push(pressure);
            let jitter = if i == 0 { 0.0 } else { rng.random_range(0.0..2.0) };
            t.push(i as f64 * SAMPLE_PERIOD_MS + jitter);
        }
        (x, y, p, t)
    }
}

fn sample_rng(spec_seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec_seed);
    rng.set_stream(kind << 32 | index);
    rng
}

/// A monotone time warp `u + a sin(2πu) / 2π` with `|a| < 1`.
fn velocity_warp(a: f64) -> impl Fn(f64) -> f64 {
    move |u| u + a * libm::sin(2.0 * PI * u) / (2.0 * PI)
}

pub fn generate_genuine(spec: &SyntheticSubjectSpec, subject_id: &str, index: usize) -> Result<RawSignature> {
    let mut rng = sample_rng(spec.seed, 1, index as u64);
    let s = spec.jittered(&mut rng, 0.0, GENUINE_JITTER);
    let (x, y, p, t) = s.render(&mut rng, |u| u);
    RawSignature::new(subject_id, format!("{subject_id}_g{index:02}"), SignatureLabel::Genuine, x, y, p, t)
}

pub fn generate_forgery(spec: &SyntheticSubjectSpec, subject_id: &str, index: usize) -> Result<RawSignature> {
    let mut rng = sample_rng(spec.seed, 2, index as u64);
    let s = spec.jittered(&mut rng, FORGERY_JITTER.0, FORGERY_JITTER.1);
    let a = rng.random_range(0.3..0.7) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (x, y, p, t) = s.render(&mut rng, velocity_warp(a));
    RawSignature::new(subject_id, format!("{subject_id}_f{index:02}"), SignatureLabel::SkilledForgery, x, y, p, t)
}

pub fn subject_id(index: usize) -> alloc::string::String {
    format!("s{index:03}")
}

/// Per subject: `genuine_per_subject` genuine samples then
/// `forgeries_per_subject` skilled forgeries, subjects in order.
pub fn generate_synthetic_dataset(
    num_subjects: usize,
    genuine_per_subject: usize,
    forgeries_per_subject: usize,
    seed: u64,
) -> Result<Vec<RawSignature>> {
    if num_subjects == 0 || genuine_per_subject == 0 || forgeries_per_subject == 0 {
        return Err(Error::Validation(format!(
            "counts must be >= 1, got {num_subjects} subjects, {genuine_per_subject} genuine, {forgeries_per_subject} forgeries"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_subjects * (genuine_per_subject + forgeries_per_subject));
    for s in 0..num_subjects {
        let spec = SyntheticSubjectSpec::random(master.random());
        let id = subject_id(s);
        for g in 0..genuine_per_subject {
            out.push(generate_genuine(&spec, &id, g)?);
        }
        for f in 0..forgeries_per_subject {
            out.push(generate_forgery(&spec, &id, f)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let d = generate_synthetic_dataset(2, 3, 2, 7).unwrap();
        assert_eq!(d.len(), 10);
        let g = d.iter().filter(|s| s.label() == SignatureLabel::Genuine).count();
        assert_eq!(g, 6);
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_synthetic_dataset(2, 3, 2, 7).unwrap(),
            generate_synthetic_dataset(2, 3, 2, 7).unwrap()
        );
        assert_ne!(
            generate_synthetic_dataset(2, 3, 2, 7).unwrap(),
            generate_synthetic_dataset(2, 3, 2, 8).unwrap()
        );
    }

    #[test]
    fn specs_are_valid_and_have_pen_ups() {
        for seed in 0..50 {
            let spec = SyntheticSubjectSpec::random(seed);
            spec.validate().unwrap();
            let sig = generate_genuine(&spec, "s", 0).unwrap();
            assert!(sig.pressure().contains(&0.0));
            assert!(sig.pressure().iter().any(|&p| p > 0.0));
            let secs = sig.duration_ms() / 1000.0;
            assert!((2.0..=10.0).contains(&secs), "{secs}");
        }
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(generate_synthetic_dataset(0, 1, 1, 0).is_err());
        assert!(generate_synthetic_dataset(1, 0, 1, 0).is_err());
    }

    #[test]
    fn warp_is_monotone() {
        let w = velocity_warp(0.69);
        let mut prev = w(0.0);
        for i in 1..=1000 {
            let v = w(i as f64 / 1000.0);
            assert!(v > prev);
            prev = v;
        }
        assert!((w(1.0) - 1.0).abs() < 1e-12);
    }
}
