//! `mfedch` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numeric
//! (including failed gradient or diagnostics checks). Every failure prints a
//! single `error kind=<kind> code=<code>: <message>` line on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfedch::{BlobSpec, Error, ErrorKind};

use mfedch_cli::commands;
use mfedch_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "mfedch",
    version,
    about = "Multi-view feature extraction with dual contrastive learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set hyper.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write Gaussian-blob views and labels as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        views: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        /// Feature count per view, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "8,8")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = BlobSpec::DEFAULT_CENTER_SCALE)]
        center_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit one model; writes the model manifest and the loss history.
    Train(Common),
    /// Run the repeated-split protocol with a trained model's settings.
    Eval {
        /// Directory (or manifest) written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck(Common),
    /// Fit, then check the scatter-matrix identities on the learned W.
    Diagnose(Common),
}

fn resolve(common: &Common, need_config: bool) -> Result<(RunConfig, PathBuf), Error> {
    if need_config && common.config.is_none() {
        return Err(Error::Usage("--config is required".into()));
    }
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

fn check_failed(what: &str) -> Error {
    Error::Numeric(format!("{what} outside its tolerance"))
}

/// Runs the command and returns its stdout text.
fn run(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::Synth {
            out,
            views,
            classes,
            per_class,
            dims,
            noise,
            center_scale,
            seed,
        } => {
            let spec = BlobSpec {
                center_scale,
                ..BlobSpec::new(views, classes, per_class, dims, noise, seed)
            };
            commands::synth(&spec, &out)
        }
        Command::Train(c) => {
            let (cfg, out) = resolve(&c, true)?;
            commands::train(&cfg, &out)
        }
        Command::Eval { model, common } => {
            let (cfg, out) = resolve(&common, true)?;
            commands::eval(&cfg, &model, &out)
        }
        Command::Gradcheck(c) => {
            let (cfg, out) = resolve(&c, false)?;
            let (csv, pass) = commands::gradcheck(&cfg, &out)?;
            print!("{csv}");
            if pass {
                Ok(String::new())
            } else {
                Err(check_failed("gradient check"))
            }
        }
        Command::Diagnose(c) => {
            let (cfg, out) = resolve(&c, true)?;
            let (csv, pass) = commands::diagnose(&cfg, &out)?;
            print!("{csv}");
            if pass {
                Ok(String::new())
            } else {
                Err(check_failed("diagnostics"))
            }
        }
    }
}

fn fail(kind: &str, code: u8, msg: &str) -> ExitCode {
    let line = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} code={code}: {line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return fail("usage", 1, first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = match e.kind() {
                ErrorKind::Usage => ("usage", 1),
                ErrorKind::Data => ("data", 2),
                ErrorKind::Numeric => ("numeric", 3),
            };
            fail(kind, code, &e.to_string())
        }
    }
}
