use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ltv_observer::ident::Staging;
use ltv_observer_cli::config::{paper_config, parse_config, ConfigErrors, ConfigIssue, ScenarioConfig};
use ltv_observer_cli::scenario::{run_scenario, verify, write_artifacts, RESIDUAL_TOLERANCE};
use ltv_observer_cli::CliError;

#[derive(Parser)]
#[command(name = "ltvobs", version, about = "Adaptive observer and sinusoidal parameter identification for LTV plants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the observer gain conditions of a scenario.
    Verify { config: PathBuf },
    /// Run a scenario and write CSV, report and plots.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the built-in second-order scenario.
    ReproducePaper {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run every `*.scenario` file in a directory, in parallel.
    Batch {
        dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Replay,
    Cascade,
}

#[derive(Args, Clone)]
struct Overrides {
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Output directory (for `batch`, the parent of one directory per file).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    decimate: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Half-width of uniform output noise.
    #[arg(long)]
    noise: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ScenarioConfig) -> Result<(), CliError> {
        let mut issues = Vec::new();
        let mut bad = |flag: &str, message: &str| {
            issues.push(ConfigIssue {
                field: format!("--{flag}"),
                line: None,
                message: message.to_string(),
            })
        };
        if let Some(dt) = self.dt {
            if dt > 0.0 && dt.is_finite() {
                cfg.dt = dt;
            } else {
                bad("dt", "must be positive");
            }
        }
        if let Some(h) = self.horizon {
            if h >= 0.0 && h.is_finite() {
                cfg.horizon = h;
            } else {
                bad("horizon", "must not be negative");
            }
        }
        if let Some(d) = self.decimate {
            if d >= 1 {
                cfg.output.decimate = d;
            } else {
                bad("decimate", "must be at least 1");
            }
        }
        if let Some(a) = self.noise {
            if a >= 0.0 && a.is_finite() {
                cfg.noise = a;
            } else {
                bad("noise", "must not be negative");
            }
        }
        if let Some(mode) = self.mode {
            cfg.ident.staging = match mode {
                Mode::Replay => Staging::Replay,
                Mode::Cascade => Staging::Cascade,
            };
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(issues).into())
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    // A missing or unreadable config is a configuration error.
    Ok(parse_config(&text)?)
}

fn run_one(mut cfg: ScenarioConfig, overrides: &Overrides, out: PathBuf) -> Result<String, CliError> {
    overrides.apply(&mut cfg)?;
    let outcome = run_scenario(&cfg)?;
    let mut text = String::new();
    if !outcome.conditions.passes(RESIDUAL_TOLERANCE) {
        text.push_str(&format!(
            "warning: observer condition residual {:.3e} exceeds {RESIDUAL_TOLERANCE:.1e}\n",
            outcome.conditions.max()
        ));
    }
    write_artifacts(&outcome, &cfg, &out)?;
    text.push_str(&outcome.report.to_string());
    text.push_str(&format!("artifacts: {}\n", out.display()));
    Ok(text)
}

fn default_out(cfg: &ScenarioConfig) -> PathBuf {
    cfg.output
        .dir
        .as_ref()
        .map_or_else(|| Path::new("out").join(&cfg.name), PathBuf::from)
}

fn code_of(err: &CliError) -> u8 {
    match err {
        CliError::Io { .. } => 2,
        other => other.exit_code(),
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Verify { config } => {
            let cfg = load(&config)?;
            let report = verify(&cfg)?;
            println!(
                "input {:.3e}\ncoupling {:.3e}\ndrift {:.3e}\ngrid {} points",
                report.input,
                report.coupling,
                report.drift,
                report.grid.len()
            );
            if report.passes(RESIDUAL_TOLERANCE) {
                println!("conditions hold");
                Ok(())
            } else {
                Err(CliError::Residuals {
                    max: report.max(),
                    tolerance: RESIDUAL_TOLERANCE,
                })
            }
        }
        Command::Run { config, overrides } => {
            let cfg = load(&config)?;
            let out = overrides.out.clone().unwrap_or_else(|| default_out(&cfg));
            print!("{}", run_one(cfg, &overrides, out)?);
            Ok(())
        }
        Command::ReproducePaper { overrides } => {
            let cfg = paper_config();
            let out = overrides.out.clone().unwrap_or_else(|| default_out(&cfg));
            print!("{}", run_one(cfg, &overrides, out)?);
            Ok(())
        }
        Command::Batch { dir, overrides } => batch(&dir, &overrides),
    }
}

fn batch(dir: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let entries = std::fs::read_dir(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "scenario"))
        .collect();
    files.sort();
    let base = overrides.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let results: Vec<Result<String, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = files
            .iter()
            .map(|file| {
                let stem = file.file_stem().unwrap_or_default().to_owned();
                let out = base.join(stem);
                s.spawn(move || run_one(load(file)?, overrides, out))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scenario thread panicked"))
            .collect()
    });
    let mut worst: Option<CliError> = None;
    for (file, result) in files.iter().zip(results) {
        println!("== {}", file.display());
        match result {
            Ok(text) => print!("{text}"),
            Err(e) => {
                println!("error: {e}");
                if worst.as_ref().is_none_or(|w| code_of(&e) > code_of(w)) {
                    worst = Some(e);
                }
            }
        }
    }
    match worst {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code_of(&e))
        }
    }
}
