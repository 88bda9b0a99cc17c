//! Operator CLI: dataset generation, training, evaluation, and report
//! emission. Exit codes: 0 ok, 2 config error, 3 diverged, 4 I/O.

mod config;
mod plot;

// The training loop rebuilds its tape every step; the default glibc
// allocator trims those buffers back to the OS each time, which dominates
// small-batch step times.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunConfigFile, SystemSection};
use dyslim::dataio::{self, DataIoError};
use dyslim::eval::{evaluate, EvalError, EvalOptions, EvalReport};
use dyslim::systems::ks::generate_ks_dataset;
use dyslim::systems::lorenz::generate_lorenz_dataset;
use dyslim::systems::GenError;
use dyslim::training::{self, Checkpoint, LogRow, RunStatus, TrainError, TrainOutcome};

#[derive(Parser)]
#[command(name = "dyslim", version, about = "Surrogate training for chaotic dynamics with invariant-measure regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ground-truth trajectory dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        /// Overrides every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a surrogate on a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for the run log and checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Roll out a checkpoint against held-out data and write metrics.csv.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run label in the metrics CSV; defaults to the checkpoint stem.
        #[arg(long)]
        label: Option<String>,
    },
    /// Merge metrics files and render comparison plots.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// metrics.csv files produced by `eval`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

enum CliError {
    Config(String),
    Diverged(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Diverged(m) | CliError::Io(m) => m,
        }
    }
}

impl From<DataIoError> for CliError {
    fn from(e: DataIoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::InvalidConfig(_) => CliError::Config(e.to_string()),
            GenError::Blowup { .. } => CliError::Diverged(e.to_string()),
            GenError::DataIo(inner) => inner.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DataIo(inner) => inner.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<(RunConfigFile, String), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut file: RunConfigFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed {
        file.override_seed(seed);
    }
    let hash = dataio::config_hash(&file);
    Ok((file, hash))
}

fn cmd_generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let (file, hash) = load_config(config, seed)?;
    let mut dataset = match &file.system {
        SystemSection::Lorenz { generation } => generate_lorenz_dataset(generation)?,
        SystemSection::Ks { generation } => generate_ks_dataset(
            &generation.config,
            generation.n_trajectories,
            generation.record_steps,
            generation.seed,
        )?,
    };
    dataset.header.config_hash = Some(hash);
    dataio::write_dataset(&dataset, out)?;
    println!(
        "wrote {}: system={} n={} T={} D={} dt={}",
        out.display(),
        dataset.header.system,
        dataset.header.n_trajectories,
        dataset.header.steps_per_trajectory,
        dataset.header.state_dim,
        dataset.header.dt
    );
    Ok(())
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn newest_checkpoint(dir: &Path) -> Result<Option<(PathBuf, Checkpoint)>, CliError> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(PathBuf, Checkpoint)> = None;
    for entry in fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))? {
        let entry = entry.map_err(|e| CliError::Io(e.to_string()))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("dysl") {
            continue;
        }
        let ck = Checkpoint::load(&path)?;
        if best.as_ref().map_or(true, |(_, b)| ck.step > b.step) {
            best = Some((path, ck));
        }
    }
    Ok(best)
}

fn write_run_log(
    path: &Path,
    hash: &str,
    prefix: &[String],
    rows: &[LogRow],
) -> Result<(), CliError> {
    let mut text = format!("# config_hash={hash}\n{}\n", LogRow::CSV_HEADER);
    for line in prefix {
        text.push_str(line);
        text.push('\n');
    }
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Data rows of an existing run log with step below `before_step`.
fn log_prefix(path: &Path, before_step: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .filter(|line| {
            if line.starts_with('#') || line.starts_with("step,") {
                return false;
            }
            line.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|step| step < before_step)
        })
        .map(str::to_string)
        .collect()
}

fn save_outcome(out: &Path, hash: &str, outcome: &TrainOutcome, prefix: &[String]) -> Result<(), CliError> {
    let ck_dir = checkpoint_dir(out);
    fs::create_dir_all(&ck_dir).map_err(|e| CliError::Io(format!("{}: {e}", ck_dir.display())))?;
    for ck in &outcome.interval_checkpoints {
        ck.save(&ck_dir.join(format!("step_{:010}.dysl", ck.step)))?;
    }
    outcome.checkpoint.save(&ck_dir.join("final.dysl"))?;
    write_run_log(&out.join("run_log.csv"), hash, prefix, &outcome.log)?;
    for failure in &outcome.failures {
        eprintln!("failure at step {}: {}", failure.step, failure.detail);
    }
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    dataset_path: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: bool,
) -> Result<(), CliError> {
    let (file, hash) = load_config(config_path, seed)?;
    let model = file
        .model
        .clone()
        .ok_or_else(|| CliError::Config("config has no model section".into()))?;
    let train_config = file
        .train_config()
        .ok_or_else(|| CliError::Config("config needs objective and training sections".into()))?;
    let dataset = dataio::read_dataset(dataset_path)?;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;

    let (outcome, prefix) = if resume {
        let (path, checkpoint) = newest_checkpoint(&checkpoint_dir(out))?
            .ok_or_else(|| CliError::Config("no checkpoint to resume from".into()))?;
        if checkpoint.step >= train_config.total_steps {
            println!(
                "checkpoint {} already at step {}, nothing to do",
                path.display(),
                checkpoint.step
            );
            return Ok(());
        }
        let resume_step = checkpoint.step;
        println!("resuming from {} at step {resume_step}", path.display());
        let outcome = training::resume(checkpoint, &train_config, &dataset, &hash)?;
        let prefix = log_prefix(&out.join("run_log.csv"), resume_step);
        (outcome, prefix)
    } else {
        (
            training::train(&model, &train_config, &dataset, &hash)?,
            Vec::new(),
        )
    };

    save_outcome(out, &hash, &outcome, &prefix)?;
    println!(
        "status={:?} steps={} final_loss={}",
        outcome.status,
        outcome.checkpoint.step,
        outcome.log.last().map_or(f64::NAN, |r| r.total)
    );
    if outcome.status == RunStatus::Diverged {
        return Err(CliError::Diverged(format!(
            "run diverged at step {}",
            outcome.checkpoint.step
        )));
    }
    Ok(())
}

fn metrics_csv(label: &str, hash: &str, report: &EvalReport) -> String {
    let sanitize = |s: &str| s.replace([',', '\n'], "_");
    let run = sanitize(label);
    let mut text = format!("# config_hash={hash}\nrun,metric,t,value,flag\n");
    let m = &report.metrics;
    for (t, v) in m.cosine_similarity.iter().enumerate() {
        text.push_str(&format!("{run},cosine_similarity,{t},{v},\n"));
    }
    for (t, v, converged) in &m.sinkhorn_divergence {
        let flag = if *converged { "converged" } else { "nonconverged" };
        text.push_str(&format!("{run},sinkhorn_divergence,{t},{v},{flag}\n"));
    }
    for failure in &report.failures {
        text.push_str(&format!(
            "{run},trajectory_failure,{},{},\n",
            failure.step, failure.trajectory
        ));
    }
    if let Some(v) = m.melr {
        text.push_str(&format!("{run},melr,,{v},\n"));
    }
    if let Some(v) = m.melr_weighted {
        text.push_str(&format!("{run},melr_weighted,,{v},\n"));
    }
    text.push_str(&format!("{run},cov_rmse,,{},\n", m.cov_rmse));
    for (name, v) in &m.w1_features {
        text.push_str(&format!("{run},w1:{},,{v},\n", sanitize(name)));
    }
    text.push_str(&format!("{run},tcm,,{},\n", m.tcm));
    text.push_str(&format!("{run},survivors,,{},\n", m.survivors));
    text.push_str(&format!(
        "{run},total_trajectories,,{},\n",
        m.total_trajectories
    ));
    text
}

fn cmd_eval(
    config_path: &Path,
    checkpoint_path: &Path,
    dataset_path: &Path,
    out: &Path,
    label: Option<String>,
) -> Result<(), CliError> {
    let (file, hash) = load_config(config_path, None)?;
    let section = file
        .evaluation
        .clone()
        .ok_or_else(|| CliError::Config("config has no evaluation section".into()))?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let dataset = dataio::read_dataset(dataset_path)?;
    if dataset.header.system != checkpoint.system {
        return Err(CliError::Config(format!(
            "checkpoint is for {} but dataset holds {}",
            checkpoint.system, dataset.header.system
        )));
    }

    let mut opts = match &file.system {
        SystemSection::Lorenz { .. } => EvalOptions::lorenz(section.rollout_steps),
        SystemSection::Ks { generation } => EvalOptions::ks(
            section.rollout_steps,
            generation.config.length / generation.config.n_grid as f64,
        ),
    };
    opts.sd_every = section.sd_every;
    opts.sinkhorn = section.sinkhorn;
    opts.max_snapshots = section.max_snapshots;
    if let Some(features) = section.features {
        opts.features = features;
    }

    let label = label.unwrap_or_else(|| {
        checkpoint_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    });

    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let csv_path = out.join("metrics.csv");
    let surrogate = checkpoint.surrogate();
    match evaluate(&surrogate, &dataset, &checkpoint.normalizer, &opts) {
        Ok(report) => {
            fs::write(&csv_path, metrics_csv(&label, &hash, &report))
                .map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;
            println!(
                "wrote {}: survivors={}/{} cov_rmse={:.4} tcm={:.4}",
                csv_path.display(),
                report.metrics.survivors,
                report.metrics.total_trajectories,
                report.metrics.cov_rmse,
                report.metrics.tcm
            );
            Ok(())
        }
        Err(EvalError::NoSurvivors { failures }) => {
            let sanitize = |s: &str| s.replace([',', '\n'], "_");
            let mut text = format!("# config_hash={hash}\nrun,metric,t,value,flag\n");
            for f in &failures {
                text.push_str(&format!(
                    "{},trajectory_failure,{},{},\n",
                    sanitize(&label),
                    f.step,
                    f.trajectory
                ));
            }
            fs::write(&csv_path, text)
                .map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;
            Err(CliError::Diverged(
                "every evaluation trajectory blew up".into(),
            ))
        }
        Err(EvalError::DatasetTooShort { needed, got }) => Err(CliError::Config(format!(
            "dataset too short: rollout needs {needed} steps, trajectories hold {got}"
        ))),
        Err(EvalError::Metric(e)) => Err(CliError::Config(e.to_string())),
    }
}

struct MetricsRow {
    run: String,
    metric: String,
    t: Option<usize>,
    value: f64,
    flag: String,
}

fn parse_metrics_file(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let human_line = lineno + 1;
        if line.starts_with('#') || line == "run,metric,t,value,flag" || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CliError::Config(format!(
                "{}:{human_line}: expected 5 columns, got {}",
                path.display(),
                fields.len()
            )));
        }
        let t = if fields[2].is_empty() {
            None
        } else {
            Some(fields[2].parse().map_err(|_| {
                CliError::Config(format!(
                    "{}:{human_line}: unparseable time index {:?}",
                    path.display(),
                    fields[2]
                ))
            })?)
        };
        let value: f64 = fields[3].parse().map_err(|_| {
            CliError::Config(format!(
                "{}:{human_line}: unparseable value {:?}",
                path.display(),
                fields[3]
            ))
        })?;
        rows.push(MetricsRow {
            run: fields[0].to_string(),
            metric: fields[1].to_string(),
            t,
            value,
            flag: fields[4].to_string(),
        });
    }
    Ok(rows)
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut all = Vec::new();
    for path in inputs {
        all.extend(parse_metrics_file(path)?);
    }
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;

    let mut text = String::from("run,metric,t,value,flag\n");
    for row in &all {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.run,
            row.metric,
            row.t.map_or(String::new(), |t| t.to_string()),
            row.value,
            row.flag
        ));
    }
    let merged = out.join("comparison.csv");
    fs::write(&merged, text).map_err(|e| CliError::Io(format!("{}: {e}", merged.display())))?;

    for (metric, nicer) in [
        ("cosine_similarity", "Cosine similarity"),
        ("sinkhorn_divergence", "Sinkhorn divergence"),
    ] {
        let mut runs: Vec<String> = Vec::new();
        for row in &all {
            if row.metric == metric && !runs.contains(&row.run) {
                runs.push(row.run.clone());
            }
        }
        let series: Vec<plot::Series> = runs
            .iter()
            .map(|run| plot::Series {
                label: run.clone(),
                points: all
                    .iter()
                    .filter(|r| r.metric == metric && &r.run == run && r.t.is_some())
                    .map(|r| (r.t.unwrap() as f64, r.value))
                    .collect(),
            })
            .collect();
        let svg = plot::line_plot(nicer, "rollout step", nicer, &series);
        let path = out.join(format!("{metric}.svg"));
        fs::write(&path, svg).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    println!("wrote {} and plots for {} rows", merged.display(), all.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config, out, *seed),
        Command::Train {
            config,
            dataset,
            out,
            seed,
            resume,
        } => cmd_train(config, dataset, out, *seed, *resume),
        Command::Eval {
            config,
            checkpoint,
            dataset,
            out,
            label,
        } => cmd_eval(config, checkpoint, dataset, out, label.clone()),
        Command::Report { out, inputs } => cmd_report(inputs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
