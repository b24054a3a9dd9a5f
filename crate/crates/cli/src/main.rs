use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use vscreen::screening::{
    batch_runs, read_trace, run_screening, summarize, BatchSummary, ErrorStats, RunRecord,
    RunStatus, RunSummary, ScenarioConfig, Thresholds,
};

#[derive(Parser)]
#[command(
    name = "screen",
    version,
    about = "Autonomous vessel screening simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one screening session and write its trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also dump the final buffer as PLY clouds.
        #[arg(long)]
        ply: bool,
    },
    /// Repeat sessions over initial orientation offsets and tabulate.
    Batch {
        #[arg(long)]
        config: PathBuf,
        /// Initial orientation offsets in degrees.
        #[arg(long, value_delimiter = ',', default_value = "0,15,30,45")]
        offsets: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute convergence times and statistics from a trace CSV.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Print the default scenario as TOML.
    DefaultConfig,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn fmt_stats(name: &str, s: &Option<ErrorStats>) -> String {
    match s {
        Some(s) => format!(
            "{name:<9} mean {:.3}  sd {:.3}  median {:.3}  max {:.3}",
            s.mean, s.sd, s.median, s.max
        ),
        None => format!("{name:<9} -"),
    }
}

fn print_summary(out: &mut impl Write, s: &RunSummary) -> io::Result<()> {
    writeln!(out, "status    {}", s.status)?;
    writeln!(
        out,
        "t_or {} s  t_ce {} s  t_ra {} s",
        fmt_opt(s.times.t_or),
        fmt_opt(s.times.t_ce),
        fmt_opt(s.times.t_ra)
    )?;
    writeln!(
        out,
        "window    from {} s (motion time)",
        fmt_opt(s.window_start_s)
    )?;
    writeln!(out, "{}", fmt_stats("e_or_rea", &s.stats.e_or_rea))?;
    writeln!(out, "{}", fmt_stats("e_or_com", &s.stats.e_or_com))?;
    writeln!(out, "{}", fmt_stats("e_ce", &s.stats.e_ce))?;
    writeln!(out, "{}", fmt_stats("|e_ra|", &s.stats.e_ra))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Run {
            config,
            seed,
            out: dir,
            ply,
        } => {
            let mut cfg = ScenarioConfig::from_file(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let trace = run_screening(&cfg)?;
            fs::create_dir_all(&dir)?;
            trace.write_csv(dir.join("trace.csv"))?;
            trace.write_metadata(dir.join("run.json"))?;
            let table = BatchSummary {
                runs: vec![RunRecord {
                    offset_deg: cfg.initial_offset_deg,
                    repeat: 0,
                    seed: cfg.seed,
                    summary: trace.summary.clone(),
                }],
                aggregates: Vec::new(),
            };
            table.write_csv_file(dir.join("summary.csv"))?;
            if ply {
                trace.write_ply(dir.join("buffer_raw.ply"), dir.join("buffer_spread.ply"))?;
            }
            print_summary(&mut out, &trace.summary)?;
            writeln!(out, "wrote {}", dir.display())?;
        }
        Command::Batch {
            config,
            offsets,
            repeats,
            out: dest,
        } => {
            let cfg = ScenarioConfig::from_file(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let batch = batch_runs(&cfg, &offsets, repeats)?;
            match dest {
                Some(path) => batch.write_csv_file(&path)?,
                None => batch.write_csv(&mut out)?,
            }
            let mut err = io::stderr().lock();
            for a in &batch.aggregates {
                let m = |s: &Option<ErrorStats>| fmt_opt(s.map(|s| s.mean));
                writeln!(
                    err,
                    "offset {:>5.1}°  completed {}/{}  e_or_rea {}  e_or_com {}  e_ce {}  |e_ra| {}  t_or {}  t_ra {}",
                    a.offset_deg,
                    a.completed,
                    a.completed + a.aborted,
                    m(&a.stats.e_or_rea),
                    m(&a.stats.e_or_com),
                    m(&a.stats.e_ce),
                    m(&a.stats.e_ra),
                    fmt_opt(a.times.t_or),
                    fmt_opt(a.times.t_ra),
                )?;
            }
        }
        Command::Replay { trace } => {
            let (comments, rows) =
                read_trace(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let status = comments
                .iter()
                .find_map(|c| c.strip_prefix("status = "))
                .map(|s| match s.trim() {
                    "lost_target" => RunStatus::LostTarget,
                    "halted" => RunStatus::Halted,
                    _ => RunStatus::Completed,
                })
                .unwrap_or(RunStatus::Completed);
            for c in &comments {
                writeln!(out, "# {c}")?;
            }
            writeln!(out, "rows      {}", rows.len())?;
            print_summary(&mut out, &summarize(&rows, &Thresholds::default(), status))?;
        }
        Command::DefaultConfig => {
            write!(out, "{}", ScenarioConfig::default().to_toml_string()?)?;
        }
    }
    Ok(())
}
