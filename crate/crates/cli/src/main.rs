use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use invarcast_cli::synth::{write_oracle_csv, write_oracle_table};
use invarcast_cli::{exit_code, load_config, Invalid, OracleOptions, Overrides, EXIT_INVALID};

#[derive(Parser)]
#[command(name = "invarcast", version, about = "ERM vs IRM forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one CSV per synthetic environment plus a manifest.
    SynthGen(Common),
    /// Compare closed-form and least-squares coefficients.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = invarcast_core::semgen::DEFAULT_STATIC_LENGTH)]
        samples: usize,
        #[arg(long, default_value_t = invarcast_cli::synth::ORACLE_TOLERANCE)]
        tolerance: f64,
        /// Variances to check; defaults to 0.1, 0.5, 1 and 2.
        #[arg(long = "sigma2")]
        sigma2: Vec<f64>,
        /// Also write `oracle.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured architectures in ERM and IRM mode.
    Run(Common),
    /// Evaluate a finished run's checkpoints.
    Eval {
        /// Directory written by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Evaluate on this config's data instead of the run's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn out_dir(explicit: Option<PathBuf>, from_config: Option<&Path>) -> Result<PathBuf, Invalid> {
    explicit.or_else(|| from_config.map(Path::to_path_buf)).ok_or_else(|| Invalid("no output directory: pass --out or set out".into()))
}

fn load(common: &Common) -> anyhow::Result<invarcast_cli::ExperimentConfig> {
    let overrides = Overrides { seed: common.seed, out: common.out.clone(), set: common.set.clone() };
    load_config(common.config.as_deref(), &overrides)
}

fn execute(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::SynthGen(common) => {
            let config = load(&common)?;
            let out = out_dir(None, config.out.as_deref())?;
            for name in invarcast_cli::synth_gen(&config, &out)? {
                println!("{}", out.join(name).display());
            }
            Ok(0)
        }
        Command::OracleCheck { seed, samples, tolerance, sigma2, out } => {
            let mut opts = OracleOptions { seed, samples, tolerance, ..Default::default() };
            if !sigma2.is_empty() {
                opts.sigma2 = sigma2;
            }
            let rows = invarcast_cli::oracle_check(&opts)?;
            write_oracle_table(&rows, std::io::stdout().lock())?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                write_oracle_csv(&rows, std::fs::File::create(dir.join("oracle.csv"))?)?;
            }
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                eprintln!("{failed} coefficient(s) outside ±{tolerance}");
                return Ok(EXIT_INVALID);
            }
            Ok(0)
        }
        Command::Run(common) => {
            let config = load(&common)?;
            let out = out_dir(None, config.out.as_deref())?;
            let result = invarcast_cli::run(&config, &out)?;
            let rows = invarcast_cli::run::summary_rows(&config, &result);
            let mut stdout = std::io::stdout().lock();
            invarcast_cli::run::write_summary_table(&config, &result.test_envs, &rows, &mut stdout)?;
            writeln!(stdout, "\nreports written to {}", out.display())?;
            Ok(0)
        }
        Command::Eval { run, config, out, seed, set } => {
            let data = if config.is_some() || seed.is_some() || !set.is_empty() {
                let overrides = Overrides { seed, out: None, set };
                let base = config.clone().unwrap_or_else(|| run.join(invarcast_cli::run::CONFIG_JSON));
                Some(load_config(Some(&base), &overrides)?)
            } else {
                None
            };
            let out = out.unwrap_or_else(|| run.clone());
            let rows = invarcast_cli::eval(&run, data.as_ref(), &out)?;
            println!("{} rows written to {}", rows.len(), out.join(invarcast_cli::run::EVAL_CSV).display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID as u8 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
