use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdalab::cli::{cmd_ablate, cmd_eval, cmd_gen, cmd_plot, cmd_theory_check, cmd_train, RunConfig};
use cdalab::error::{CdaError, Result};
use cdalab::theory::TheoryCheckOptions;
use cdalab::trainer::Variant;

const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "cdalab", version, about = "Continuous domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every grid domain and manifest.json into data_dir.
    Gen(ConfigArgs),
    /// Train on data_dir and populate run_dir.
    Train(ConfigArgs),
    /// Recompute metrics.json from the checkpoint in run_dir.
    Eval(ConfigArgs),
    /// Train several variants over several seeds and tabulate accuracies.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma separated variant names.
        #[arg(long, value_delimiter = ',', default_value = "OURS,V1,V5,V7")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Verify the divergence identities on random histograms.
    TheoryCheck {
        #[arg(long, default_value_t = 10_000)]
        resolution: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render SVG figures for a finished run.
    Plot {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Print the effective configuration as JSON.
    Config(ConfigArgs),
}

/// Config file plus overrides. Named flags are shorthands for `--set`.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    position_kind: Option<String>,
    #[arg(long)]
    segment_kind: Option<String>,
    /// Evaluation rule: `mean` of both content classifiers or `first` only.
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

fn json_str(s: &str) -> String {
    serde_json::Value::String(s.to_string()).to_string()
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut sets: Vec<(String, String)> = Vec::new();
        let mut named = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push((k.to_string(), v));
            }
        };
        named("benchmark", self.benchmark.as_deref().map(json_str));
        if let Some(v) = &self.variant {
            named("train.variant", Some(json_str(&v.parse::<Variant>()?.to_string())));
        }
        named("train.steps", self.steps.map(|v| v.to_string()));
        named("train.seed", self.seed.map(|v| v.to_string()));
        named("data_seed", self.data_seed.map(|v| v.to_string()));
        named("position_kind", self.position_kind.as_deref().map(|s| json_str(&s.to_ascii_uppercase())));
        named("segment_kind", self.segment_kind.as_deref().map(|s| json_str(&s.to_ascii_uppercase())));
        named("eval.rule", self.rule.as_deref().map(json_str));
        named("data_dir", self.data_dir.as_ref().map(|p| json_str(&p.to_string_lossy())));
        named("run_dir", self.run_dir.as_ref().map(|p| json_str(&p.to_string_lossy())));
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CdaError::InvalidConfiguration(format!("expected KEY=VALUE, got {kv:?}")))?;
            sets.push((k.trim().to_string(), v.to_string()));
        }
        for (k, v) in sets {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Gen(a) => {
            let out = cmd_gen(&a.resolve()?)?;
            println!("{}  {}", out.digest, out.data_dir.display());
        }
        Command::Train(a) => {
            let out = cmd_train(&a.resolve()?)?;
            let g = &out.metrics.subgroup_means;
            println!(
                "{}: unseen {:.4} probe {:.4} in {:.1}s",
                out.run_dir.display(),
                g.unseen.unwrap_or(f64::NAN),
                g.probe.unwrap_or(f64::NAN),
                out.log.wall_clock_secs
            );
        }
        Command::Eval(a) => {
            let m = cmd_eval(&a.resolve()?)?;
            println!("{}", serde_json::to_string_pretty(&m.subgroup_means)?);
        }
        Command::Ablate { config, variants, seeds } => {
            let variants = variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?;
            let table = cmd_ablate(&config.resolve()?, &variants, &seeds)?;
            println!("variant,seed,unseen,target_mean");
            for r in &table.rows {
                println!("{},{},{:.4},{:.4}", r.variant, r.seed, r.unseen, r.target_mean);
            }
        }
        Command::TheoryCheck { resolution, trials, tol, seed } => {
            let opts = TheoryCheckOptions { seed, trials, resolution, tol, bruteforce_trials: None };
            let report = cmd_theory_check(&opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::Plot { run_dir } => {
            for p in cmd_plot(&run_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Config(a) => println!("{}", a.resolve()?.to_json()?),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
