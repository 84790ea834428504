use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use great::attacks::{write_sweep_csv, AttackMode, SWEEP_COLUMNS};
use great::harness::{self, RunConfig, CONFIG_FILE};
use great::Error;

/// Gradient adversarial training experiments.
#[derive(Parser, Debug)]
#[command(name = "great", version)]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, env = "GREAT_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one pipeline from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep a checkpoint's main model over attack strengths.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ε values.
        #[arg(long, value_delimiter = ',', required = true)]
        epsilons: Vec<f64>,
        #[arg(long, default_value = "non_targeted")]
        mode: AttackMode,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Run config; defaults to the snapshot next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the sweep CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge sweep CSVs under a directory into an accuracy-vs-ε table.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run the finite-difference and invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parent(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn output_dir(cli_out: Option<PathBuf>, config: &RunConfig, config_path: &Path, root: Option<&Path>) -> PathBuf {
    let dir = cli_out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| {
        let stem = config_path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("runs").join(stem)
    });
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir,
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let dir = output_dir(out, &cfg, &config, cli.output_root.as_deref());
            info!("writing run to {}", dir.display());
            let outcome = harness::run(&cfg, &dir, &parent(&config))?;
            let m = &outcome.metrics;
            if let Some(last) = m.rows.last() {
                for (c, v) in m.columns.iter().zip(last) {
                    println!("{c}\t{v}");
                }
            }
            for r in &outcome.sweep {
                println!("{} {} k={} eps={}\t{}", r.attack, r.mode, r.k, r.epsilon, r.accuracy);
            }
            println!("output\t{}", dir.display());
        }
        Command::Attack {
            checkpoint,
            epsilons,
            mode,
            k,
            config,
            out,
        } => {
            let config = config.unwrap_or_else(|| parent(&checkpoint).join(CONFIG_FILE));
            let cfg = RunConfig::from_file(&config)?;
            let rows = harness::attack_checkpoint(&checkpoint, &cfg, &parent(&config), &epsilons, k, mode)?;
            match out {
                Some(path) => write_sweep_csv(&path, &rows)?,
                None => {
                    println!("{}", SWEEP_COLUMNS.join(","));
                    for r in &rows {
                        println!("{},{},{},{},{},{},{}", r.method, r.attack, r.mode, r.epsilon, r.k, r.accuracy, r.seed);
                    }
                }
            }
        }
        Command::Report { dir } => {
            let table = harness::report(&dir)?;
            println!("method,attack,mode,k,epsilon,accuracy,runs");
            for r in &table {
                println!("{},{},{},{},{},{},{}", r.method, r.attack, r.mode, r.k, r.epsilon, r.accuracy, r.runs);
            }
            println!("wrote {}", dir.join(harness::REPORT_FILE).display());
        }
        Command::Selftest { seed } => {
            let checks = harness::selftest(seed)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(Error::Diverged(format!("{failed} self-test check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
