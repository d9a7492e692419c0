//! Command-line front end: `generate`, `run`, `diagnose` and `report`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::continual_engine::{
    load_checkpoint, run_protocol, save_checkpoint, ExperimentReport, InitStrategy, RunOptions,
};
use crate::error::{Error, Result};
use crate::numerics::{format_f64, Matrix};
use crate::synthbench::{
    export_embeddings, generate_dataset, load_dataset, query_correlation, save_dataset, FrIndicator,
};

#[derive(Debug, Parser)]
#[command(name = "crisp", version, about = "Continual video instance segmentation workbench")]
pub struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Disable adaptive residual semantic prompts.
    NoArsp,
    /// Disable the instance semantic consistency loss.
    NoIsc,
    /// Disable the instance correlation loss.
    NoIc,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the per-step synthetic datasets `step{t}.json`.
    Generate {
        /// Overwrite existing dataset files.
        #[arg(long)]
        force: bool,
    },
    /// Train the class-incremental protocol; writes report.json,
    /// checkpoints/step{t}.ckpt and train_log.jsonl.
    Run {
        /// Switch off a component; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// Initialization of incremental queries (overrides the config).
        #[arg(long, value_enum)]
        init: Option<InitStrategy>,
        /// Indicator used by the forgetting ratio.
        #[arg(long, value_enum, default_value = "corrected")]
        fr_indicator: FrIndicator,
        /// Threads for validation predictions; never changes results.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overwrite an existing report and checkpoints.
        #[arg(long)]
        force: bool,
    },
    /// Query correlation, distances and embeddings of a checkpoint.
    Diagnose {
        checkpoint: PathBuf,
        /// Overwrite existing diagnostics.
        #[arg(long)]
        force: bool,
    },
    /// Validate a report.json and print its summary.
    Report {
        /// Defaults to report.json in the output directory.
        path: Option<PathBuf>,
    },
}

/// Runs a parsed command line and returns what should be printed.
pub fn execute(cli: &Cli) -> Result<String> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let out = config.resolved_output_dir();
    match &cli.command {
        Command::Generate { force } => cmd_generate(&config, &out, *force),
        Command::Run {
            ablate,
            init,
            fr_indicator,
            workers,
            force,
        } => {
            let mut config = config;
            for a in ablate {
                match a {
                    Ablation::NoArsp => config.ablation.use_arsp = false,
                    Ablation::NoIsc => config.ablation.use_isc = false,
                    Ablation::NoIc => config.ablation.use_ic = false,
                }
            }
            if let Some(init) = init {
                config.ablation.init_strategy = *init;
            }
            if *workers == 0 {
                return Err(Error::Parameter("--workers must be at least 1".into()));
            }
            let options = RunOptions {
                fr_indicator: *fr_indicator,
                workers: *workers,
            };
            cmd_run(&config, &out, options, *force)
        }
        Command::Diagnose { checkpoint, force } => cmd_diagnose(checkpoint, &out, *force),
        Command::Report { path } => cmd_report(&path.clone().unwrap_or_else(|| out.join("report.json"))),
    }
}

pub fn dataset_path(out: &Path, t: usize) -> PathBuf {
    out.join(format!("step{t}.json"))
}

pub fn checkpoint_path(out: &Path, t: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step{t}.ckpt"))
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::Contract(format!(
            "{} exists; pass --force to overwrite",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_generate(config: &ExperimentConfig, out: &Path, force: bool) -> Result<String> {
    let protocol = config.protocol()?;
    let paths: Vec<PathBuf> = (0..protocol.steps).map(|t| dataset_path(out, t)).collect();
    refuse_existing(&paths, force)?;
    create_dir(out)?;
    let mut summary = String::new();
    for (t, path) in paths.iter().enumerate() {
        let (train, val) = generate_dataset(&config.generator_config(&protocol, t), &protocol.class_sets[t])?;
        let videos: Vec<_> = train.into_iter().chain(val).collect();
        save_dataset(path, &videos)?;
        summary.push_str(&format!("wrote {} ({} videos)\n", path.display(), videos.len()));
    }
    Ok(summary)
}

pub fn cmd_run(config: &ExperimentConfig, out: &Path, options: RunOptions, force: bool) -> Result<String> {
    let protocol = config.protocol()?;
    let train_config = config.train_config();
    let report_path = out.join("report.json");
    let log_path = out.join("train_log.jsonl");
    let mut outputs = vec![report_path.clone(), log_path.clone()];
    outputs.extend((0..protocol.steps).map(|t| checkpoint_path(out, t)));
    refuse_existing(&outputs, force)?;

    let mut datasets = Vec::with_capacity(protocol.steps);
    for t in 0..protocol.steps {
        let path = dataset_path(out, t);
        if !path.exists() {
            let reason = format!("missing dataset for step {t}; run `crisp generate` first");
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, reason),
            ));
        }
        let videos = load_dataset(&path)?;
        let (train, val) = videos
            .into_iter()
            .partition(|v| v.split == crate::synthbench::Split::Train);
        datasets.push((train, val));
    }

    create_dir(&out.join("checkpoints"))?;
    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(log_file);
    let run = run_protocol(&protocol, &datasets, &train_config, options, |t, state, logs| {
        save_checkpoint(&checkpoint_path(out, t), state)?;
        for entry in logs {
            let line = serde_json::to_string(entry).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let json = serde_json::to_string_pretty(&run.report).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(&report_path, format!("{json}\n").as_bytes())?;
    Ok(summarize(&run.report))
}

pub fn cmd_diagnose(checkpoint: &Path, out: &Path, force: bool) -> Result<String> {
    let state = load_checkpoint(checkpoint)?;
    let q = &state.queries.matrix;
    let stem = checkpoint
        .file_stem()
        .map_or_else(|| "checkpoint".to_string(), |s| s.to_string_lossy().into_owned());
    let dir = out.join("diagnostics");
    let corr_path = dir.join(format!("{stem}.correlation.txt"));
    let dist_path = dir.join(format!("{stem}.distances.txt"));
    let emb_path = dir.join(format!("{stem}.embeddings.csv"));
    refuse_existing(&[corr_path.clone(), dist_path.clone(), emb_path.clone()], force)?;
    create_dir(&dir)?;

    let corr = query_correlation(q)?;
    write_file(&corr_path, corr.to_text().as_bytes())?;
    write_file(&dist_path, pairwise_distances(q).to_text().as_bytes())?;
    let mut labels = Vec::with_capacity(q.rows());
    for seg in &state.queries.segments {
        labels.extend(seg.range().map(|i| format!("task{}-q{i}", seg.task)));
    }
    export_embeddings(q, &labels, &emb_path)?;

    let mut summary = format!("{} queries from {}\n", q.rows(), checkpoint.display());
    for seg in &state.queries.segments {
        let block = seg.range().collect::<Vec<_>>();
        summary.push_str(&format!(
            "task {} rows {}..{}: mean |off-diagonal correlation| {}\n",
            seg.task,
            seg.start,
            seg.start + seg.len,
            format_f64(mean_abs_off_diagonal(&corr, &block))
        ));
    }
    for p in [&corr_path, &dist_path, &emb_path] {
        summary.push_str(&format!("wrote {}\n", p.display()));
    }
    Ok(summary)
}

pub fn cmd_report(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report = validate_report(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(summarize(&report))
}

/// Parses a report and checks the invariants every successful run satisfies.
pub fn validate_report(text: &str) -> Result<ExperimentReport> {
    let report: ExperimentReport = serde_json::from_str(text).map_err(|e| Error::Parse(format!("report.json: {e}")))?;
    report.protocol.validate()?;
    if report.steps.len() != report.protocol.steps {
        return Err(Error::Parse(format!(
            "report has {} steps for a {}-step protocol",
            report.steps.len(),
            report.protocol.steps
        )));
    }
    let unit = |name: &str, v: f64| {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(Error::Parse(format!("{name} = {v} outside [0, 1]")))
        }
    };
    for (t, s) in report.steps.iter().enumerate() {
        if s.step != t || s.classes != report.protocol.class_sets[t] {
            return Err(Error::Parse(format!("step entry {t} does not match the protocol")));
        }
        for (name, v) in [
            ("mAP", s.map),
            ("AP50", s.ap50),
            ("AP75", s.ap75),
            ("AR1", s.ar1),
            ("AR10", s.ar10),
        ] {
            unit(name, v)?;
        }
        for (c, ap) in &s.per_category_ap {
            unit(&format!("AP of category {c}"), *ap)?;
        }
    }
    if !report.fr.is_finite() {
        return Err(Error::Parse("FR is not finite".into()));
    }
    Ok(report)
}

fn summarize(report: &ExperimentReport) -> String {
    let mut s = String::from("step classes mAP AP50 AP75 AR1 AR10\n");
    for step in &report.steps {
        let classes = step
            .classes
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        s.push_str(&format!(
            "{} {classes} {:.4} {:.4} {:.4} {:.4} {:.4}\n",
            step.step, step.map, step.ap50, step.ap75, step.ar1, step.ar10
        ));
    }
    s.push_str(&format!("FR {:.6} ({:?} indicator)\n", report.fr, report.fr_indicator));
    s
}

/// Euclidean distances between all rows.
pub fn pairwise_distances(q: &Matrix) -> Matrix {
    let n = q.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out.set(i, j, d.sqrt());
        }
    }
    out
}

/// Mean |entry| over distinct pairs within `block`; 0 when it has one row.
pub fn mean_abs_off_diagonal(corr: &Matrix, block: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for &i in block {
        for &j in block {
            if i != j {
                total += corr.get(i, j).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
