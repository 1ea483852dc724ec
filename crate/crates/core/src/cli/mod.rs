//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 numeric
//! failure, 4 I/O failure.

pub mod config;
pub mod report;
pub mod toy;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricSummary;
use crate::regularizers::RegWeights;
use crate::trainer::{run_continual, RunArtifacts, StrategyName};
use config::{RunConfig, OUTPUT_DIR_ENV};
use report::{render_csv, render_markdown, RunReport};
use toy::{run_toy, trajectory_csv, PairConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "orthocl",
    version,
    about = "Continual-learning lab for LoRA adapters"
)]
pub struct Cli {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one strategy and write its report.
    Run {
        config: PathBuf,
        /// Report path; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several strategies on the same stream and tabulate them.
    Compare {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Grid over the two regularizer weights.
    Sweep {
        config: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_negative_numbers = true
        )]
        lambda1: Vec<f64>,
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_negative_numbers = true
        )]
        lambda2: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// CSV path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-task linear-regression demo with plot-ready trajectories.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        lambda1: Option<f64>,
    },
    /// Tabulate existing reports.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Md,
    Csv,
}

/// Exit code for an error, looking through task context.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { config, out } => {
            let cfg = load(config, cli.seed)?;
            let path = out.clone().unwrap_or_else(|| cfg.output_path());
            let report = cmd_run(&cfg)?;
            stdout(&format!("{}\n", report.metric_block()));
            report.write(&path)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Compare {
            config,
            strategies,
            out_dir,
            jobs,
        } => {
            let cfg = load(config, cli.seed)?;
            let names = parse_strategies(strategies)?;
            let dir = out_dir.clone().unwrap_or_else(|| default_dir(&cfg));
            let reports = cmd_compare(&cfg, &names, *jobs)?;
            let rows: Vec<(String, &RunReport)> =
                reports.iter().map(|r| (r.strategy.clone(), r)).collect();
            let table = render_markdown(&rows);
            std::fs::create_dir_all(&dir)?;
            for r in &reports {
                r.clone().write(&dir.join(format!("{}.json", r.strategy)))?;
            }
            std::fs::write(dir.join("compare.md"), &table)?;
            stdout(&table);
            Ok(())
        }
        Command::Sweep {
            config,
            lambda1,
            lambda2,
            jobs,
            out,
        } => {
            let cfg = load(config, cli.seed)?;
            let points = cmd_sweep(&cfg, lambda1, lambda2, *jobs)?;
            let csv = sweep_csv(&points)?;
            let summary = monotonicity_summary(&points);
            match out {
                Some(p) => {
                    write_file(p, &csv)?;
                    stdout(&summary);
                }
                None => {
                    stdout(&csv);
                    eprint!("{summary}");
                }
            }
            Ok(())
        }
        Command::Toy { out, lambda1 } => {
            let mut pc = PairConfig::default();
            if let Some(l) = lambda1 {
                pc.lambda1 = *l;
            }
            if let Some(s) = cli.seed {
                pc.seed = s;
            }
            cmd_toy(&pc, out)
        }
        Command::Report { files, format, out } => {
            let text = cmd_report(files, *format)?;
            match out {
                Some(p) => write_file(p, &text),
                None => {
                    stdout(&text);
                    Ok(())
                }
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn default_dir(cfg: &RunConfig) -> PathBuf {
    match &cfg.output {
        Some(p) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
        None => std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_default(),
    }
}

/// Loads a config and applies a seed override.
pub fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn parse_strategies(names: &[String]) -> Result<Vec<StrategyName>> {
    let parsed = names
        .iter()
        .map(|n| n.trim().parse())
        .collect::<Result<Vec<StrategyName>>>()?;
    if parsed.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least 2 strategies, got {}",
            parsed.len()
        )));
    }
    Ok(parsed)
}

pub fn run_config(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let stream = cfg.build_stream()?;
    run_continual(
        &cfg.setup(),
        &stream,
        &cfg.strategy(),
        &cfg.optim,
        &cfg.subset_plan(),
        cfg.seed,
    )
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunReport> {
    Ok(RunReport::new(cfg, &run_config(cfg)?))
}

/// A closed pipe on stdout (e.g. `| head`) is not an error.
fn stdout(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::Config("jobs: must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("jobs: {e}")))
}

/// One report per strategy, all on the config's stream and seed.
pub fn cmd_compare(cfg: &RunConfig, names: &[StrategyName], jobs: usize) -> Result<Vec<RunReport>> {
    if names.len() < 2 {
        return Err(Error::Config("compare needs at least 2 strategies".into()));
    }
    let configs: Vec<RunConfig> = names
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.strategy.name = n;
            c
        })
        .collect();
    pool(jobs)?.install(|| configs.par_iter().map(cmd_run).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    pub metrics: MetricSummary,
}

/// Runs every `(λ1, λ2)` pair, λ1-major. Every point uses the config's seed,
/// so points differ only in the weights.
pub fn cmd_sweep(
    cfg: &RunConfig,
    lambda1: &[f64],
    lambda2: &[f64],
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    if lambda1.is_empty() || lambda2.is_empty() {
        return Err(Error::Config("sweep: empty grid".into()));
    }
    let mut grid = Vec::with_capacity(lambda1.len() * lambda2.len());
    for &l1 in lambda1 {
        for &l2 in lambda2 {
            let reg = RegWeights {
                lambda1: l1,
                lambda2: l2,
            };
            reg.validate()
                .map_err(|e| Error::Config(format!("sweep: {e}")))?;
            grid.push(reg);
        }
    }
    pool(jobs)?.install(|| {
        grid.par_iter()
            .map(|reg| {
                let mut c = cfg.clone();
                c.reg = *reg;
                let artifacts = run_config(&c)?;
                Ok(SweepPoint {
                    lambda1: reg.lambda1,
                    lambda2: reg.lambda2,
                    metrics: MetricSummary::from_matrix(&artifacts.perf),
                })
            })
            .collect()
    })
}

pub fn sweep_csv(points: &[SweepPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Input(e.to_string());
    w.write_record(["lambda1", "lambda2", "last", "avg", "bwt", "mean_imd"])
        .map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in points {
        let m = &p.metrics;
        w.write_record([
            p.lambda1.to_string(),
            p.lambda2.to_string(),
            opt(m.last),
            opt(m.avg),
            opt(m.bwt),
            opt(m.mean_imd()),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn weakly_monotone(values: &[Option<f64>], increasing: bool) -> Option<bool> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    let v = v?;
    Some(v.windows(2).all(|w| {
        if increasing {
            w[1] >= w[0]
        } else {
            w[1] <= w[0]
        }
    }))
}

/// Per λ1: whether BWT rises and mean Imd falls as λ2 grows.
pub fn monotonicity_summary(points: &[SweepPoint]) -> String {
    let mut lambda1s: Vec<f64> = Vec::new();
    for p in points {
        if !lambda1s.contains(&p.lambda1) {
            lambda1s.push(p.lambda1);
        }
    }
    let yn = |b: Option<bool>| match b {
        Some(true) => "yes",
        Some(false) => "no",
        None => "n/a",
    };
    let mut out =
        String::from("lambda1,lambda2_values,bwt_non_decreasing,mean_imd_non_increasing\n");
    for l1 in lambda1s {
        let mut row: Vec<&SweepPoint> = points.iter().filter(|p| p.lambda1 == l1).collect();
        row.sort_by(|a, b| a.lambda2.total_cmp(&b.lambda2));
        let bwt: Vec<Option<f64>> = row.iter().map(|p| p.metrics.bwt).collect();
        let imd: Vec<Option<f64>> = row.iter().map(|p| p.metrics.mean_imd()).collect();
        let _ = writeln!(
            out,
            "{l1},{},{},{}",
            row.len(),
            yn(weakly_monotone(&bwt, true)),
            yn(weakly_monotone(&imd, false))
        );
    }
    out
}

#[derive(Serialize)]
struct ToySummary<'a> {
    identity: &'a crate::metrics::IdentityCheck,
    lambda1: f64,
    seq_ft_final: &'a [f64],
    hifgo_final: &'a [f64],
    seq_ft_excess: [f64; 2],
    hifgo_excess: [f64; 2],
}

/// Writes `trajectories.csv` and `identity.json` under `dir`.
pub fn cmd_toy(cfg: &PairConfig, dir: &Path) -> Result<()> {
    let out = run_toy(cfg)?;
    let csv = trajectory_csv(&[
        (StrategyName::SeqFt.as_str(), &out.seq_ft),
        (StrategyName::HifgoProxy.as_str(), &out.hifgo),
    ])?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trajectories.csv"), csv)?;
    let summary = ToySummary {
        identity: &out.identity,
        lambda1: cfg.lambda1,
        seq_ft_final: &out.seq_ft.after_b,
        hifgo_final: &out.hifgo.after_b,
        seq_ft_excess: [out.seq_ft.excess_a, out.seq_ft.excess_b],
        hifgo_excess: [out.hifgo.excess_a, out.hifgo.excess_b],
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("toy summary serializes");
    text.push('\n');
    std::fs::write(dir.join("identity.json"), text)?;
    Ok(())
}

/// Renders reports as markdown tables or metric CSV.
pub fn cmd_report(files: &[PathBuf], format: Format) -> Result<String> {
    if files.is_empty() {
        return Err(Error::Config("report needs at least one file".into()));
    }
    let reports = files
        .iter()
        .map(|f| RunReport::read(f))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(String, &RunReport)> = files
        .iter()
        .zip(&reports)
        .map(|(f, r)| {
            let stem = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            (stem, r)
        })
        .collect();
    match format {
        Format::Md => Ok(render_markdown(&rows)),
        Format::Csv => render_csv(&rows),
    }
}
