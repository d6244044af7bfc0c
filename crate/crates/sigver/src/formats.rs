//! Signature and feature text formats.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sigver_core::features::{FeatureSequence, CHANNEL_NAMES, NUM_CHANNELS};
use sigver_core::signature::{RawSignature, SignatureLabel};

use crate::error::{AppError, AppResult};
use crate::fsutil::{read_to_string, write_atomic};

pub const CANONICAL_HEADER: &str = "x\ty\ttimestamp_ms\tpressure";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureFormat {
    #[default]
    CanonicalTsv,
    Legacy7,
}

impl FromStr for SignatureFormat {
    type Err = AppError;

    fn from_str(s: &str) -> AppResult<Self> {
        match s {
            "canonical_tsv" | "canonical" | "tsv" => Ok(SignatureFormat::CanonicalTsv),
            "legacy7" => Ok(SignatureFormat::Legacy7),
            other => Err(AppError::Usage(format!("unknown signature format {other:?}"))),
        }
    }
}

/// Identity attached to a parsed signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureMeta {
    pub subject_id: String,
    pub sample_id: String,
    pub label: SignatureLabel,
}

impl SignatureMeta {
    /// Genuine, with subject and sample named after the file stem.
    pub fn from_path(path: &Path) -> Self {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self {
            subject_id: stem.clone(),
            sample_id: stem,
            label: SignatureLabel::Genuine,
        }
    }
}

struct Columns {
    x: Vec<f64>,
    y: Vec<f64>,
    t: Vec<f64>,
    p: Vec<f64>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> AppError {
    AppError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_fields(path: &Path, line: usize, fields: &[&str]) -> AppResult<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("cannot parse {f:?} as a number")))
        })
        .collect()
}

fn build(path: &Path, meta: &SignatureMeta, c: Columns) -> AppResult<RawSignature> {
    RawSignature::new(
        meta.subject_id.clone(),
        meta.sample_id.clone(),
        meta.label,
        c.x,
        c.y,
        c.p,
        c.t,
    )
    .map_err(|e| match e {
        sigver_core::Error::NonMonotonicTimestamp { index } => {
            parse_err(path, index + 1, "non-monotonic timestamp")
        }
        other => AppError::format(path, other.to_string()),
    })
}

/// Parses canonical TSV text. `path` is used for diagnostics only.
pub fn parse_canonical(text: &str, path: &Path, meta: &SignatureMeta) -> AppResult<RawSignature> {
    let mut lines = text.lines();
    match lines.next().map(|l| l.trim_end_matches('\r')) {
        Some(CANONICAL_HEADER) => {}
        Some(other) => {
            return Err(AppError::format(
                path,
                format!("expected header {CANONICAL_HEADER:?}, found {other:?}"),
            ))
        }
        None => return Err(AppError::format(path, "empty file")),
    }
    let mut c = Columns {
        x: Vec::new(),
        y: Vec::new(),
        t: Vec::new(),
        p: Vec::new(),
    };
    for (i, raw) in lines.enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(path, i + 1, format!("expected 4 fields, found {}", fields.len())));
        }
        let v = parse_fields(path, i + 1, &fields)?;
        c.x.push(v[0]);
        c.y.push(v[1]);
        c.t.push(v[2]);
        c.p.push(v[3]);
    }
    build(path, meta, c)
}

/// Parses `X Y TIMESTAMP BUTTON_STATUS AZIMUTH ALTITUDE PRESSURE` rows after
/// a point-count line. Button status 0 forces zero pressure.
pub fn parse_legacy7(text: &str, path: &Path, meta: &SignatureMeta) -> AppResult<RawSignature> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let count: usize = lines
        .next()
        .ok_or_else(|| AppError::format(path, "empty file"))?
        .trim()
        .parse()
        .map_err(|_| AppError::format(path, "first line must be the point count"))?;
    let mut c = Columns {
        x: Vec::with_capacity(count),
        y: Vec::with_capacity(count),
        t: Vec::with_capacity(count),
        p: Vec::with_capacity(count),
    };
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(parse_err(path, i + 1, format!("expected 7 fields, found {}", fields.len())));
        }
        let v = parse_fields(path, i + 1, &fields)?;
        c.x.push(v[0]);
        c.y.push(v[1]);
        c.t.push(v[2]);
        c.p.push(if v[3] == 0.0 { 0.0 } else { v[6] });
    }
    if c.x.len() != count {
        return Err(AppError::format(
            path,
            format!("header announces {count} points, found {}", c.x.len()),
        ));
    }
    build(path, meta, c)
}

pub fn parse_signature(path: &Path, format: SignatureFormat, meta: &SignatureMeta) -> AppResult<RawSignature> {
    let text = read_to_string(path)?;
    match format {
        SignatureFormat::CanonicalTsv => parse_canonical(&text, path, meta),
        SignatureFormat::Legacy7 => parse_legacy7(&text, path, meta),
    }
}

/// Canonical TSV with shortest round-trip number formatting.
pub fn format_canonical(sig: &RawSignature) -> String {
    let mut s = String::with_capacity(32 * sig.len());
    s.push_str(CANONICAL_HEADER);
    s.push('\n');
    for i in 0..sig.len() {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}",
            sig.x()[i],
            sig.y()[i],
            sig.timestamp()[i],
            sig.pressure()[i]
        );
    }
    s
}

pub fn write_signature(path: &Path, sig: &RawSignature) -> AppResult<()> {
    write_atomic(path, format_canonical(sig).as_bytes())
}

/// Feature dump: one header row of channel names, then T rows of 23 values.
pub fn format_features(fs: &FeatureSequence) -> String {
    let mut s = CHANNEL_NAMES.join("\t");
    s.push('\n');
    for t in 0..fs.len() {
        let row: Vec<String> = fs.row(t).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join("\t"));
        s.push('\n');
    }
    s
}

pub fn parse_features(text: &str, path: &Path) -> AppResult<FeatureSequence> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    if header != CHANNEL_NAMES {
        return Err(AppError::format(path, "feature header does not match the channel order"));
    }
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != NUM_CHANNELS {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected {NUM_CHANNELS} fields, found {}", fields.len()),
            ));
        }
        values.extend(parse_fields(path, i + 1, &fields)?);
    }
    FeatureSequence::from_rows(values).map_err(AppError::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> SignatureMeta {
        SignatureMeta {
            subject_id: "u1".into(),
            sample_id: "u1_g0".into(),
            label: SignatureLabel::Genuine,
        }
    }

    #[test]
    fn three_line_canonical() {
        let text = "x\ty\ttimestamp_ms\tpressure\n0\t0\t0\t1\n1\t0\t10\t1\n2\t0\t20\t1\n";
        let s = parse_canonical(text, Path::new("a.tsv"), &meta()).unwrap();
        assert_eq!(s.x(), &[0.0, 1.0, 2.0]);
        assert_eq!(s.y(), &[0.0, 0.0, 0.0]);
        assert_eq!(s.timestamp(), &[0.0, 10.0, 20.0]);
        assert_eq!(s.pressure(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_monotonic_names_line() {
        let text = "x\ty\ttimestamp_ms\tpressure\n0\t0\t0\t1\n1\t0\t10\t1\n2\t0\t5\t1\n";
        let e = parse_canonical(text, Path::new("a.tsv"), &meta()).unwrap_err();
        assert!(e.to_string().contains("non-monotonic timestamp at line 3"), "{e}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn malformed_line_is_reported() {
        let text = "x\ty\ttimestamp_ms\tpressure\n0\t0\t0\t1\n1\t0\t10\n";
        let e = parse_canonical(text, Path::new("a.tsv"), &meta()).unwrap_err();
        assert!(e.to_string().contains("at line 2"), "{e}");
        let text = "x\ty\ttimestamp_ms\tpressure\n0\t0\tzero\t1\n";
        let e = parse_canonical(text, Path::new("a.tsv"), &meta()).unwrap_err();
        assert!(e.to_string().contains("at line 1"), "{e}");
    }

    #[test]
    fn single_point_rejected() {
        let text = "x\ty\ttimestamp_ms\tpressure\n0\t0\t0\t1\n";
        assert!(parse_canonical(text, Path::new("a.tsv"), &meta()).is_err());
    }

    #[test]
    fn legacy_button_up_zeroes_pressure() {
        let text = "3\n10 20 0 1 0 0 500\n11 21 10 0 0 0 480\n12 22 20 1 0 0 460\n";
        let s = parse_legacy7(text, Path::new("a.txt"), &meta()).unwrap();
        assert_eq!(s.pressure(), &[500.0, 0.0, 460.0]);
        assert_eq!(s.x(), &[10.0, 11.0, 12.0]);
    }

    #[test]
    fn legacy_count_mismatch() {
        let text = "4\n10 20 0 1 0 0 500\n11 21 10 0 0 0 480\n";
        assert!(parse_legacy7(text, Path::new("a.txt"), &meta()).is_err());
    }
}
