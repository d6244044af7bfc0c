//! Thread-pool backed alignment and scoring, and the file-level protocol runs.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use sigver_core::autodiff::Real;
use sigver_core::dtw::AlignedPair;
use sigver_core::evaluation::{evaluate_scores, EvaluationReport, ScoreSet};
use sigver_core::model::SiameseModel;
use sigver_core::training::{
    align_pair, check_subject_disjoint, expand_pair, path_key, FeatureBank, PairSource, PairSpec, PathCache,
};

use crate::checkpoint;
use crate::error::{AppError, AppResult};
use crate::formats::SignatureFormat;
use crate::manifest::load_comparisons;
use crate::report::write_report;

pub const THREADS_ENV: &str = "SIGVER_THREADS";

/// Worker count from `SIGVER_THREADS`, else the number of processors.
pub fn thread_count() -> AppResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(AppError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Sizes rayon's global pool. Only the first call in a process has effect.
pub fn init_thread_pool() -> AppResult<usize> {
    let n = thread_count()?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}

/// Computes uncached warping paths concurrently. Output order follows the
/// input order, so results do not depend on the worker count.
#[derive(Debug, Clone)]
pub struct ParallelAligner {
    pub cache: PathCache,
}

impl ParallelAligner {
    pub fn new(capacity: usize) -> Self {
        Self {
            cache: PathCache::new(capacity),
        }
    }
}

impl Default for ParallelAligner {
    fn default() -> Self {
        Self::new(8192)
    }
}

impl PairSource for ParallelAligner {
    fn prepare(&mut self, bank: &FeatureBank, pairs: &[PairSpec], length: usize) -> sigver_core::Result<Vec<AlignedPair>> {
        let mut queued = BTreeSet::new();
        let mut missing: Vec<&PairSpec> = Vec::new();
        for p in pairs {
            let key = path_key(bank, p);
            if !self.cache.contains(&key) && queued.insert(key) {
                missing.push(p);
            }
        }
        let paths = missing
            .par_iter()
            .map(|p| align_pair(bank, p))
            .collect::<sigver_core::Result<Vec<_>>>()?;
        for (p, path) in missing.iter().zip(paths) {
            self.cache.insert(path_key(bank, p), path);
        }
        let paths: Vec<_> = pairs
            .iter()
            .map(|p| self.cache.get(&path_key(bank, p)).cloned().expect("path cached above"))
            .collect();
        pairs
            .par_iter()
            .zip(paths.par_iter())
            .map(|(p, path)| expand_pair(bank, p, path, length))
            .collect()
    }
}

/// Symmetrised scores of `pairs` in input order, aligned and scored in
/// chunks to bound memory.
pub fn score_comparisons<F: Real>(
    model: &SiameseModel<F>,
    bank: &FeatureBank,
    pairs: &[PairSpec],
    source: &mut dyn PairSource,
) -> AppResult<Vec<f64>> {
    let length = model.config().input_length;
    let mut scores = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let aligned = source.prepare(bank, chunk, length)?;
        let s = aligned
            .par_iter()
            .map(|a| model.score_pair(a))
            .collect::<sigver_core::Result<Vec<_>>>()?;
        scores.extend(s);
    }
    Ok(scores)
}

pub fn score_set(pairs: &[PairSpec], scores: &[f64]) -> ScoreSet {
    let mut set = ScoreSet::new();
    for (p, s) in pairs.iter().zip(scores) {
        set.push(p.label, *s);
    }
    set
}

pub struct ProtocolRun {
    pub report: EvaluationReport,
    /// Entries whose subject ids were absent, so excluded from the overlap check.
    pub unchecked_entries: usize,
}

/// Scores a comparison manifest with a checkpoint and writes the report files.
pub fn run_protocol(
    checkpoint_path: &Path,
    manifest: &Path,
    format: SignatureFormat,
    out_dir: &Path,
    svg: bool,
) -> AppResult<ProtocolRun> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let set = load_comparisons(manifest, format)?;
    check_subject_disjoint(
        ckpt.meta.training_subjects.iter().map(String::as_str),
        set.subjects.iter().map(String::as_str),
    )?;
    let scores = score_comparisons(&ckpt.model, &set.bank, &set.pairs, &mut ParallelAligner::default())?;
    let report = evaluate_scores(&score_set(&set.pairs, &scores))?;
    write_report(out_dir, &report, svg)?;
    Ok(ProtocolRun {
        report,
        unchecked_entries: set.missing_subjects,
    })
}
