//! Command-line front end: training, grids, checkpoint evaluation, reports
//! and the tabular theory checks.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use invgan::eval::{read_records, EvalRecord};
use invgan::harness::{
    evaluate_saved, expand_grid, read_runs, run_grid, selection_report, stability_rows, train_from, write_scatter,
    write_selection, write_stability, GridSpec, RunConfig, RunRow,
};
use invgan::oracle::run_suite;

#[derive(Parser)]
#[command(name = "invgan", version, about = "Encoder-equipped GANs: training, grids, evaluation and reports")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Expand a template into a hyperparameter grid and train every run.
    Grid {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; runs are independent.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Print the expanded run ids and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint and print one record as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Samples per distribution.
        #[arg(long)]
        n: usize,
        /// Take features from this checkpoint's discriminator body.
        #[arg(long)]
        features_from: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Selection or stability CSV from evaluation records.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Run settings; defaults to runs.csv next to the records.
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Checkpoints kept per metric in selection mode.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Selection mode: also write the metric-pair scatter points here.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Check the optimal-discriminator identities and fixed-point theorems
    /// on random and exhaustive tabular games.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        games: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Selection,
    Stability,
}

fn output(path: Option<&Path>) -> Result<Box<dyn io::Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn train_cmd(config: &Path, resume: Option<&Path>) -> Result<ExitCode> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = RunConfig::parse(&text)?;
    let summary = train_from(&cfg, resume)?;
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    for r in summary.records() {
        w.serialize(r)?;
    }
    w.flush()?;
    if summary.diverged {
        eprintln!("run {} diverged at step {}", summary.run_id, summary.final_step);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn grid_cmd(template: &Path, out: &Path, parallel: usize, dry_run: bool) -> Result<ExitCode> {
    let text = fs::read_to_string(template).with_context(|| format!("reading {}", template.display()))?;
    let mut configs = expand_grid(&GridSpec::parse(&text)?)?;
    if dry_run {
        for c in &configs {
            println!("{}", c.run_id());
        }
        return Ok(ExitCode::SUCCESS);
    }
    for c in &mut configs {
        c.out_dir = Some(out.join(c.run_id()));
    }
    let rows = run_grid(&configs, out, parallel)?;
    let diverged = rows.iter().filter(|r| r.diverged).count();
    eprintln!("{} runs, {diverged} diverged; records in {}", rows.len(), out.join("records.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn report_cmd(records: &Path, mode: Mode, runs: Option<&Path>, k: usize, out: Option<&Path>, scatter: Option<&Path>) -> Result<ExitCode> {
    if k == 0 {
        bail!("k must be at least 1");
    }
    let recs: Vec<EvalRecord> = read_records(records)?;
    if recs.is_empty() {
        bail!("{} holds no records", records.display());
    }
    let default_runs = records.with_file_name("runs.csv");
    let runs_path = runs.map(Path::to_path_buf).or_else(|| default_runs.exists().then_some(default_runs));
    let rows: Vec<RunRow> = match &runs_path {
        Some(p) => read_runs(p)?,
        None => Vec::new(),
    };
    match mode {
        Mode::Selection => {
            let groups = selection_report(&recs, &rows, k);
            write_selection(output(out)?, &groups)?;
            if let Some(p) = scatter {
                write_scatter(output(Some(p))?, &groups)?;
            }
        }
        Mode::Stability => write_stability(output(out)?, &stability_rows(&recs, &rows))?,
    }
    Ok(ExitCode::SUCCESS)
}

fn oracle_cmd(seed: u64, games: usize) -> ExitCode {
    let mut ok = true;
    for c in run_suite(seed, games, 1000) {
        println!("{c}");
        ok &= c.pass;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train { config, resume } => train_cmd(&config, resume.as_deref()),
        Command::Grid { template, out, parallel, dry_run } => grid_cmd(&template, &out, parallel, dry_run),
        Command::Eval { checkpoint, n, features_from, seed } => (|| {
            let (record, ev) = evaluate_saved(&checkpoint, n, features_from.as_deref(), seed)?;
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.serialize(&record)?;
            w.flush()?;
            eprintln!("same-distribution floor: {:.6e}", ev.estimator_floor);
            Ok(ExitCode::SUCCESS)
        })(),
        Command::Report { records, mode, runs, k, out, scatter } => {
            report_cmd(&records, mode, runs.as_deref(), k, out.as_deref(), scatter.as_deref())
        }
        Command::Oracle { seed, games } => Ok(oracle_cmd(seed, games)),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
