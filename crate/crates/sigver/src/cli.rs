//! `sigver` command line.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sigver_core::autodiff::primitives::check_all_primitives;
use sigver_core::autodiff::Precision;
use sigver_core::dtw::{prepare_pair, PairLabel};
use sigver_core::model::{ModelConfig, Variant};
use sigver_core::signature::SignatureLabel;
use sigver_core::synth::generate_synthetic_dataset;
use sigver_core::training::{grad_check_model, sample_pairs, signature_features, train, TrainHyper};

use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{AppError, AppResult};
use crate::formats::{format_features, parse_signature, write_signature, SignatureFormat, SignatureMeta};
use crate::fsutil::write_atomic;
use crate::manifest::{comparison_entries, load_bank, write_comparison_manifest, write_dataset_manifest, DatasetEntry};
use crate::pipeline::{init_thread_pool, run_protocol, ParallelAligner};

#[derive(Debug, Parser)]
#[command(name = "sigver", version, about = "On-line signature verification pipeline")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Print results as JSON.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Write the 23 z-normalised time functions of one signature.
    Extract(ExtractArgs),
    /// DTW-align two signatures into a binary aligned-pair record.
    Align(AlignArgs),
    /// Compare analytic and finite-difference gradients at reduced size.
    Gradcheck(GradcheckArgs),
    /// Train a model on a training and a validation manifest.
    Train(TrainArgs),
    /// Score a comparison manifest and write EER/DET reports.
    Evaluate(EvaluateArgs),
    /// Sample labelled comparisons from a dataset manifest.
    Pairs(PairsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub subjects: usize,
    #[arg(long)]
    pub genuine: usize,
    #[arg(long)]
    pub forgeries: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also split into train_manifest.json and val_manifest.json, with the
    /// last N subjects held out.
    #[arg(long)]
    pub val_subjects: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "canonical_tsv")]
    pub format: SignatureFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub enrolled: PathBuf,
    #[arg(long)]
    pub questioned: PathBuf,
    #[arg(long, default_value = "canonical_tsv")]
    pub format: SignatureFormat,
    /// match, nonmatch_random or nonmatch_skilled.
    #[arg(long)]
    pub label: Option<PairLabel>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "vanilla")]
    pub variant: Variant,
    /// Analytic gradients in f64 (threshold 1e-4) instead of f32 (1e-3).
    #[arg(long = "f64")]
    pub f64: bool,
    /// Input rows; must be a multiple of 8.
    #[arg(long, default_value_t = 128)]
    pub input_length: usize,
    /// Check every graph primitive instead of a model (f64 threshold 1e-5).
    #[arg(long)]
    pub primitives: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "vanilla")]
    pub variant: Variant,
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub val_manifest: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 256)]
    pub pairs_per_epoch: usize,
    #[arg(long, default_value_t = 128)]
    pub val_pairs: usize,
    /// Checkpoint path; the config sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-epoch JSON lines to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "canonical_tsv")]
    pub format: SignatureFormat,
    /// Also write det.svg.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn say(json: bool, human: String, value: serde_json::Value) {
    if json {
        println!("{value}");
    } else {
        println!("{human}");
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> AppResult<()> {
    let sigs = generate_synthetic_dataset(a.subjects, a.genuine, a.forgeries, cli.seed)?;
    let held_out = a.val_subjects.unwrap_or(0);
    if held_out >= a.subjects && a.val_subjects.is_some() {
        return Err(AppError::Usage(format!(
            "--val-subjects {held_out} leaves no training subjects out of {}",
            a.subjects
        )));
    }
    let mut all = Vec::with_capacity(sigs.len());
    for s in &sigs {
        let rel = format!("signatures/{}.tsv", s.sample_id());
        write_signature(&a.out.join(&rel), s)?;
        all.push(DatasetEntry {
            subject_id: s.subject_id().into(),
            sample_id: s.sample_id().into(),
            label: s.label(),
            path: rel,
            format: None,
        });
    }
    write_dataset_manifest(&a.out.join("manifest.json"), &all)?;
    if a.val_subjects.is_some() {
        let cut = sigver_core::synth::subject_id(a.subjects - held_out);
        let (val, train): (Vec<_>, Vec<_>) = all.iter().cloned().partition(|e| e.subject_id >= cut);
        write_dataset_manifest(&a.out.join("train_manifest.json"), &train)?;
        write_dataset_manifest(&a.out.join("val_manifest.json"), &val)?;
    }
    let genuine = sigs.iter().filter(|s| s.label() == SignatureLabel::Genuine).count();
    say(
        cli.json,
        format!(
            "wrote {} signatures ({genuine} genuine, {} skilled forgeries) to {}",
            sigs.len(),
            sigs.len() - genuine,
            a.out.display()
        ),
        json!({"signatures": sigs.len(), "genuine": genuine, "skilled_forgeries": sigs.len() - genuine,
               "manifest": a.out.join("manifest.json")}),
    );
    Ok(())
}

fn extract(cli: &Cli, a: &ExtractArgs) -> AppResult<()> {
    let sig = parse_signature(&a.input, a.format, &SignatureMeta::from_path(&a.input))?;
    let fs = signature_features(&sig)?;
    write_atomic(&a.out, format_features(&fs).as_bytes())?;
    say(
        cli.json,
        format!("wrote {} x 23 features to {}", fs.len(), a.out.display()),
        json!({"rows": fs.len(), "channels": fs.channels(), "out": a.out}),
    );
    Ok(())
}

fn align(cli: &Cli, a: &AlignArgs) -> AppResult<()> {
    let load = |p: &Path| -> AppResult<_> {
        let sig = parse_signature(p, a.format, &SignatureMeta::from_path(p))?;
        Ok(signature_features(&sig)?)
    };
    let mut pair = prepare_pair(&load(&a.enrolled)?, &load(&a.questioned)?)?;
    pair.label = a.label;
    write_atomic(&a.out, &crate::aligned::encode(&pair))?;
    say(
        cli.json,
        format!("aligned pair with {} valid rows written to {}", pair.valid_length, a.out.display()),
        json!({"valid_length": pair.valid_length, "out": a.out}),
    );
    Ok(())
}

fn gradcheck_primitives(cli: &Cli, a: &GradcheckArgs) -> AppResult<()> {
    let (precision, threshold) = if a.f64 {
        (Precision::F64, 1e-5)
    } else {
        (Precision::F32, 1e-3)
    };
    let mut worst = 0.0f64;
    for (p, r) in check_all_primitives(cli.seed, precision)? {
        worst = worst.max(r.max_relative_error);
        say(
            cli.json,
            format!("{p:?}: max relative error {:.3e}", r.max_relative_error),
            json!({"primitive": format!("{p:?}"), "max_relative_error": r.max_relative_error}),
        );
    }
    if worst <= threshold {
        Ok(())
    } else {
        Err(sigver_core::Error::Validation(format!("gradient check failed: {worst:.3e} > {threshold:e}")).into())
    }
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> AppResult<()> {
    if a.primitives {
        return gradcheck_primitives(cli, a);
    }
    let (precision, threshold) = if a.f64 {
        (Precision::F64, 1e-4)
    } else {
        (Precision::F32, 1e-3)
    };
    let r = grad_check_model(a.variant, a.input_length, cli.seed, precision)?;
    let pass = r.max_relative_error <= threshold;
    say(
        cli.json,
        format!(
            "{}: max relative error {:.3e} over {} entries (worst {}[{}]); threshold {threshold:e}: {}",
            a.variant,
            r.max_relative_error,
            r.entries_checked,
            r.worst_parameter,
            r.worst_index,
            if pass { "pass" } else { "FAIL" }
        ),
        json!({"variant": a.variant, "max_relative_error": r.max_relative_error, "entries": r.entries_checked,
               "worst_parameter": r.worst_parameter, "threshold": threshold, "pass": pass}),
    );
    if pass {
        Ok(())
    } else {
        Err(sigver_core::Error::Validation(format!(
            "gradient check failed: {:.3e} > {threshold:e}",
            r.max_relative_error
        ))
        .into())
    }
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> AppResult<()> {
    let train_bank = load_bank(&a.train_manifest)?;
    let val_bank = load_bank(&a.val_manifest)?;
    let hyper = TrainHyper {
        adam: sigver_core::autodiff::AdamConfig {
            lr: a.lr,
            ..Default::default()
        },
        batch_size: a.batch,
        max_epochs: a.epochs,
        patience: a.patience,
        pairs_per_epoch: a.pairs_per_epoch,
        validation_pairs: a.val_pairs,
        seed: cli.seed,
    };
    let config = ModelConfig::new(a.variant).with_seed(cli.seed);
    let mut lines = String::new();
    let mut on_epoch = |l: &sigver_core::training::EpochLog| {
        let line = serde_json::to_string(l).expect("log line serialises");
        println!("{line}");
        let _ = std::io::stdout().flush();
        lines.push_str(&line);
        lines.push('\n');
    };
    let out = train::<f32>(config.clone(), &train_bank, &val_bank, &hyper, &mut ParallelAligner::default(), &mut on_epoch)?;
    if out.skilled_reallocated {
        eprintln!("warning: no skilled forgeries available; skilled pairs were replaced by random pairs");
    }
    let meta = CheckpointMeta {
        model: config,
        training_subjects: train_bank.subjects().into_iter().map(String::from).collect(),
        optimizer: Some(hyper.adam),
        optimizer_step: out.optimizer.t(),
        train_state: Some(out.state),
    };
    checkpoint::save(&a.out, &out.model, Some(&out.optimizer), &meta)?;
    if let Some(log) = &a.log {
        write_atomic(log, lines.as_bytes())?;
    }
    if !cli.json {
        eprintln!(
            "best validation EER {:.4} at epoch {}; checkpoint {}",
            out.state.best_validation_eer,
            out.state.best_epoch,
            a.out.display()
        );
    }
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> AppResult<()> {
    let run = run_protocol(&a.model, &a.manifest, a.format, &a.out_dir, a.svg)?;
    if run.unchecked_entries > 0 {
        eprintln!(
            "warning: {} comparisons lack subject ids and were not checked for training overlap",
            run.unchecked_entries
        );
    }
    let r = &run.report;
    let fmt = |e: Option<f64>| e.map_or("n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
    say(
        cli.json,
        format!(
            "EER random {} skilled {} overall {} ({} genuine, {} random, {} skilled)",
            fmt(r.eer_random.map(|e| e.eer)),
            fmt(r.eer_skilled.map(|e| e.eer)),
            fmt(Some(r.eer_overall.eer)),
            r.num_genuine,
            r.num_impostor_random,
            r.num_impostor_skilled
        ),
        json!({"eer_random": r.eer_random.map(|e| e.eer), "eer_skilled": r.eer_skilled.map(|e| e.eer),
               "eer_overall": r.eer_overall.eer, "out_dir": a.out_dir}),
    );
    Ok(())
}

fn pairs(cli: &Cli, a: &PairsArgs) -> AppResult<()> {
    let bank = load_bank(&a.manifest)?;
    let sample = sample_pairs(&bank, a.count, cli.seed)?;
    if sample.skilled_reallocated {
        eprintln!("warning: no skilled forgeries available; skilled pairs were replaced by random pairs");
    }
    let entries = comparison_entries(&bank, &sample.pairs)?;
    write_comparison_manifest(&a.out, &entries)?;
    say(
        cli.json,
        format!("wrote {} comparisons to {}", entries.len(), a.out.display()),
        json!({"comparisons": entries.len(), "skilled_reallocated": sample.skilled_reallocated, "out": a.out}),
    );
    Ok(())
}

pub fn execute(cli: &Cli) -> AppResult<()> {
    init_thread_pool()?;
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Extract(a) => extract(cli, a),
        Command::Align(a) => align(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Pairs(a) => pairs(cli, a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
