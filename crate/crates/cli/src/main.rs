use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hierloc::experiments::{list_experiments, run, Curve, ExperimentReport, RunConfig};

#[derive(Parser)]
#[command(name = "hierloc", about = "Experiments on the hierarchical Anderson-Bernoulli operator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a key = value config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long, env = "HIERLOC_THREADS")]
        threads: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the registered experiments and what they check.
    ListExperiments,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Run(#[from] hierloc::Error),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("output: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(hierloc::Error::InvalidParams(_)) => 2,
            _ => 3,
        }
    }
}

/// Fixed-width scientific notation: 17 significant digits, locale free.
fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn write_curve(dir: &Path, c: &Curve) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", c.name)))?;
    w.write_record(&c.columns)?;
    for row in &c.rows {
        w.write_record(row.iter().map(|&x| fmt_f64(x)))?;
    }
    w.flush()?;
    Ok(())
}

fn load(config: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(config).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    let mut cfg = RunConfig::parse_kv(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn execute(cfg: &RunConfig, threads: Option<usize>, out: &Path) -> Result<ExperimentReport, CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    let rep = pool.install(|| run(cfg))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&rep).expect("report serializes") + "\n")?;
    for c in &rep.curves {
        write_curve(out, c)?;
    }
    if let Some(t) = &rep.traces {
        fs::write(out.join("traces.jsonl"), t)?;
    }
    Ok(rep)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListExperiments => {
            print!("{}", list_experiments());
            ExitCode::SUCCESS
        }
        Command::Run { config, seed, threads, out } => {
            let result = load(&config, seed).and_then(|cfg| execute(&cfg, threads, &out));
            match result {
                Ok(rep) => {
                    for r in &rep.rules {
                        let tag = match (r.asserted, r.passed) {
                            (false, _) => "info",
                            (true, true) => "pass",
                            (true, false) => "FAIL",
                        };
                        println!("{tag} {}: {}", r.name, r.detail);
                    }
                    if rep.passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("hierloc: {e}");
                    ExitCode::from(e.code())
                }
            }
        }
    }
}
