use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coupled_harness::commands;
use coupled_harness::error::exit;
use coupled_harness::{ExperimentConfig, HarnessError, Result};

#[derive(Parser)]
#[command(name = "coupled", version, about = "Coupled signal/logit diffusion experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a single replicate with this seed instead of the configured list.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every method on every corruption.
    Run,
    /// Train or load the bundles the configured methods need.
    Train,
    /// Accuracy against the number of reverse steps.
    AblateSteps {
        /// Comma-separated ascending step counts; defaults to ablate_steps.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
    },
    /// Clean-estimate versus noisy-sample guidance in per-step coupling.
    AblateGuidance,
    /// Ancestral versus deterministic sampling in per-step coupling.
    AblateSampler,
    /// Predictor-corrector enhancement of toy 1-D signals.
    SdeDemo,
    /// Summarise a sampling trace file.
    InspectTrace { trace: PathBuf },
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let path = cli.config.as_ref().ok_or_else(|| HarnessError::Config {
        field: "--config".into(),
        msg: "this command needs a config file".into(),
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed_override {
        cfg.override_seed(s);
    }
    let out = commands::resolve_out(&cfg, cli.out.as_deref())?;
    Ok((cfg, out))
}

fn dispatch(cli: &Cli) -> Result<String> {
    if let Command::InspectTrace { trace } = &cli.command {
        return Ok(serde_json::to_string_pretty(&commands::cmd_inspect_trace(trace)?)?);
    }
    let (cfg, out) = load(cli)?;
    let shown = out.display();
    Ok(match &cli.command {
        Command::Run => {
            let t = commands::cmd_run(&cfg, &out)?;
            let mut s = format!("wrote {shown}/results.csv\n");
            for r in &t.rows {
                s += &format!(
                    "{:>10} {:>12}  acc {:.4} ± {:.4}  nfe {}/{}/{}\n",
                    r.corruption, r.method, r.accuracy_mean, r.accuracy_se, r.nfe_signal, r.nfe_logit, r.nfe_classifier
                );
            }
            s
        }
        Command::Train => {
            let rows = commands::cmd_train(&cfg, &out)?;
            format!("{} bundles ready under {shown}/bundles", rows.len())
        }
        Command::AblateSteps { steps } => {
            let t = commands::cmd_ablate_steps(&cfg, &out, steps.as_deref())?;
            format!("wrote {shown}/ablate_steps.csv ({} rows)", t.rows.len())
        }
        Command::AblateGuidance => {
            let t = commands::cmd_ablate_guidance(&cfg, &out)?;
            format!("wrote {shown}/ablate_guidance.csv ({} rows)", t.rows.len())
        }
        Command::AblateSampler => {
            let t = commands::cmd_ablate_sampler(&cfg, &out)?;
            format!("wrote {shown}/ablate_sampler.csv ({} rows)", t.rows.len())
        }
        Command::SdeDemo => {
            let r = commands::cmd_sde_demo(&cfg, &out)?;
            format!(
                "improved {:.1}% of {} examples; mean mse {:.5} -> {:.5}",
                100.0 * r.improved_fraction,
                r.examples,
                r.mean_mse_before,
                r.mean_mse_after
            )
        }
        Command::InspectTrace { .. } => unreachable!("handled above"),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[config]: --threads: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    }
    match dispatch(&cli) {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
