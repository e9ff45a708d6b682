//! Command line front end of the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffuse_cauchy::experiments::{self, ExperimentConfig, ExperimentError, Study};

#[derive(Parser)]
#[command(name = "diffuse-cauchy", version, about = "Diffuse-domain Tikhonov inversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One solve for a (delta, alpha, eps) triple; eps = 0 uses the sharp mesh.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
    },
    /// MINRES iteration table over alpha and eps.
    Table(Common),
    /// Convergence rate study.
    Rates(Common),
    /// Preconditioned spectrum with band summary.
    Spectrum(Common),
    /// Property checks of the diffuse approximation.
    Verify(Common),
    /// Prints a preset configuration.
    Preset { name: String },
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used when no file is given.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// `section.key=value` override, repeatable. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn load(common: &Common, default_preset: &str, extra: Vec<String>) -> Result<(String, ExperimentConfig), ExperimentError> {
    let text = match (&common.config, &common.preset) {
        (Some(p), _) => std::fs::read_to_string(p).map_err(|source| ExperimentError::Io { path: p.clone(), source })?,
        (None, Some(name)) => experiments::preset(name)
            .ok_or_else(|| ExperimentError::Config(format!("unknown preset `{name}`, known: {:?}", experiments::PRESETS)))?
            .to_string(),
        (None, None) => experiments::preset(default_preset).unwrap().to_string(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(extra);
    let merged = experiments::apply_overrides(&text, &overrides)?;
    let cfg = ExperimentConfig::parse(&merged)?;
    let echo = if overrides.is_empty() {
        text
    } else {
        let mut t = text;
        t.push_str("\n# command line overrides\n");
        for o in &overrides {
            t.push_str(&format!("# {o}\n"));
        }
        t
    };
    Ok((echo, cfg))
}

fn execute(common: &Common, preset: &str, extra: Vec<String>, want: fn(&Study) -> bool) -> Result<bool, ExperimentError> {
    let (echo, cfg) = load(common, preset, extra)?;
    if !want(&cfg.study) {
        return Err(ExperimentError::Config("config study kind does not match the subcommand".into()));
    }
    let results = experiments::run(&cfg)?;
    let dir = common
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    experiments::emit_outputs(&results, &dir, &echo)?;
    print!("{}", experiments::summary_text(&results));
    println!("outputs written to {}", dir.display());
    Ok(results.success())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::Solve { common, delta, alpha, epsilon } => {
            let extra = vec![
                "study.kind=\"solve\"".into(),
                format!("study.delta={delta:e}"),
                format!("study.alpha={alpha:e}"),
                format!("study.epsilon={epsilon:e}"),
            ];
            let common = Common { preset: common.preset.clone().or(Some("fig7".into())), ..common.clone() };
            execute(&common, "fig7", extra, |s| matches!(s, Study::Solve { .. }))
        }
        Command::Table(c) => execute(c, "table1", vec![], |s| matches!(s, Study::IterationTable { .. })),
        Command::Rates(c) => execute(c, "fig7", vec![], |s| matches!(s, Study::RateStudy { .. })),
        Command::Spectrum(c) => execute(c, "spectrum", vec![], |s| matches!(s, Study::Spectrum { .. })),
        Command::Verify(c) => execute(c, "verify", vec![], |s| matches!(s, Study::Verify { .. })),
        Command::Preset { name } => match experiments::preset(name) {
            Some(t) => {
                print!("{t}");
                Ok(true)
            }
            None => Err(ExperimentError::Config(format!("unknown preset `{name}`"))),
        },
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some solves did not converge or checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
