//! Dataset and comparison manifests.
//!
//! Relative paths inside a manifest are resolved against the manifest's
//! own directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sigver_core::dtw::PairLabel;
use sigver_core::signature::{RawSignature, SignatureLabel};
use sigver_core::training::{signature_features, FeatureBank, PairSpec, SignatureRecord};

use crate::error::{AppError, AppResult};
use crate::formats::{parse_signature, SignatureFormat, SignatureMeta};
use crate::fsutil::{read_json, write_json};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub subject_id: String,
    pub sample_id: String,
    pub label: SignatureLabel,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<SignatureFormat>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub enrolled_path: String,
    pub questioned_path: String,
    pub label: PairLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enrolled_subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub questioned_subject: Option<String>,
}

pub fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest.parent().unwrap_or(Path::new("")).join(p)
}

pub fn read_dataset_manifest(path: &Path) -> AppResult<Vec<DatasetEntry>> {
    read_json(path)
}

pub fn write_dataset_manifest(path: &Path, entries: &[DatasetEntry]) -> AppResult<()> {
    write_json(path, &entries)
}

pub fn read_comparison_manifest(path: &Path) -> AppResult<Vec<ComparisonEntry>> {
    read_json(path)
}

pub fn write_comparison_manifest(path: &Path, entries: &[ComparisonEntry]) -> AppResult<()> {
    write_json(path, &entries)
}

/// Parses every signature listed in a dataset manifest.
pub fn load_signatures(manifest: &Path) -> AppResult<Vec<(DatasetEntry, RawSignature)>> {
    let entries = read_dataset_manifest(manifest)?;
    entries
        .into_par_iter()
        .map(|e| {
            let meta = SignatureMeta {
                subject_id: e.subject_id.clone(),
                sample_id: e.sample_id.clone(),
                label: e.label,
            };
            let sig = parse_signature(&resolve(manifest, &e.path), e.format.unwrap_or_default(), &meta)?;
            Ok((e, sig))
        })
        .collect()
}

fn record(id: String, sig: &RawSignature) -> AppResult<SignatureRecord> {
    Ok(SignatureRecord {
        id,
        subject_id: sig.subject_id().to_string(),
        label: sig.label(),
        features: signature_features(sig)?,
    })
}

/// Feature bank of a dataset manifest; records are keyed by resolved path.
pub fn load_bank(manifest: &Path) -> AppResult<FeatureBank> {
    let sigs = load_signatures(manifest)?;
    let records: Vec<SignatureRecord> = sigs
        .par_iter()
        .map(|(e, s)| record(resolve(manifest, &e.path).to_string_lossy().into_owned(), s))
        .collect::<AppResult<_>>()?;
    let mut bank = FeatureBank::new();
    for r in records {
        bank.push(r);
    }
    Ok(bank)
}

/// Bank of all signatures referenced by a comparison manifest plus the
/// comparisons as pair references into it.
pub struct ComparisonSet {
    pub bank: FeatureBank,
    pub pairs: Vec<PairSpec>,
    /// Subject ids named by the manifest.
    pub subjects: Vec<String>,
    /// Entries lacking a subject id on either side.
    pub missing_subjects: usize,
}

pub fn load_comparisons(manifest: &Path, format: SignatureFormat) -> AppResult<ComparisonSet> {
    let entries = read_comparison_manifest(manifest)?;
    let mut index: BTreeMap<String, (usize, SignatureMeta)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut refs = Vec::with_capacity(entries.len());
    let mut subjects = Vec::new();
    let mut missing_subjects = 0;
    for e in &entries {
        if e.enrolled_subject.is_none() || e.questioned_subject.is_none() {
            missing_subjects += 1;
        }
        subjects.extend(e.enrolled_subject.iter().cloned());
        subjects.extend(e.questioned_subject.iter().cloned());
        let questioned_label = if e.label == PairLabel::NonmatchSkilled {
            SignatureLabel::SkilledForgery
        } else {
            SignatureLabel::Genuine
        };
        let mut slot = |p: &str, subject: &Option<String>, label| -> usize {
            let key = resolve(manifest, p).to_string_lossy().into_owned();
            let next = index.len();
            let entry = index.entry(key.clone()).or_insert_with(|| {
                order.push(key.clone());
                let stem = Path::new(&key)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                (
                    next,
                    SignatureMeta {
                        subject_id: subject.clone().unwrap_or_default(),
                        sample_id: stem,
                        label,
                    },
                )
            });
            entry.0
        };
        let a = slot(&e.enrolled_path, &e.enrolled_subject, SignatureLabel::Genuine);
        let b = slot(&e.questioned_path, &e.questioned_subject, questioned_label);
        refs.push(PairSpec {
            enrolled: a,
            questioned: b,
            label: e.label,
        });
    }
    let records: Vec<SignatureRecord> = order
        .par_iter()
        .map(|key| {
            let meta = &index[key].1;
            let sig = parse_signature(Path::new(key), format, meta)?;
            record(key.clone(), &sig)
        })
        .collect::<AppResult<_>>()?;
    let mut bank = FeatureBank::new();
    for r in records {
        bank.push(r);
    }
    subjects.sort();
    subjects.dedup();
    Ok(ComparisonSet {
        bank,
        pairs: refs,
        subjects,
        missing_subjects,
    })
}

/// Comparison entries for sampled pairs of a bank loaded with [`load_bank`].
pub fn comparison_entries(bank: &FeatureBank, pairs: &[PairSpec]) -> AppResult<Vec<ComparisonEntry>> {
    let absolute = |id: &str| -> AppResult<String> {
        let p = Path::new(id);
        let abs = p.canonicalize().map_err(|e| AppError::io(p, e))?;
        Ok(abs.to_string_lossy().into_owned())
    };
    pairs
        .iter()
        .map(|p| {
            let (e, q) = (bank.get(p.enrolled), bank.get(p.questioned));
            Ok(ComparisonEntry {
                enrolled_path: absolute(&e.id)?,
                questioned_path: absolute(&q.id)?,
                label: p.label,
                enrolled_subject: Some(e.subject_id.clone()),
                questioned_subject: Some(q.subject_id.clone()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_manifest() {
        assert_eq!(resolve(Path::new("d/m.json"), "s/a.tsv"), PathBuf::from("d/s/a.tsv"));
        assert_eq!(resolve(Path::new("m.json"), "a.tsv"), PathBuf::from("a.tsv"));
        assert_eq!(resolve(Path::new("d/m.json"), "/x/a.tsv"), PathBuf::from("/x/a.tsv"));
    }

    #[test]
    fn comparison_entry_json_shape() {
        let e: ComparisonEntry =
            serde_json::from_str(r#"{"enrolled_path":"a","questioned_path":"b","label":"nonmatch_skilled"}"#).unwrap();
        assert_eq!(e.label, PairLabel::NonmatchSkilled);
        assert!(e.enrolled_subject.is_none());
        assert!(serde_json::from_str::<ComparisonEntry>(r#"{"enrolled_path":"a","questioned_path":"b","label":"maybe"}"#).is_err());
    }
}
