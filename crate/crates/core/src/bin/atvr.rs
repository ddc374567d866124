use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atvr::error::Error;
use atvr::experiments::{
    parse_config, run_eval, run_expansion, run_gap, run_gen_data, run_hausdorff, run_predict_loss, run_train,
    run_variation, run_verify_bounds, EvalConfig, ExpansionConfig, ExperimentConfig, ExperimentManifest, GapConfig,
    GenDataConfig, HausdorffRunConfig, PredictLossConfig, TrainRunConfig, VariationConfig, VerifyConfig,
};
use clap::{Parser, Subcommand};

/// Experiments for adversarial training with variation regularization.
#[derive(Parser, Debug)]
#[command(name = "atvr", version)]
struct Cli {
    /// JSON config for the subcommand; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Sample the two-Gaussian dataset.
    GenData,
    /// Train a model with AT-VR.
    Train,
    /// Empirical adversarial risk of a model.
    Eval,
    /// Per-sample variation.
    Variation,
    /// Minimum linear expansion slope over a model family.
    Expansion,
    /// Generalization gap versus target radius for several lambdas.
    Gap,
    /// Hausdorff estimate against target variation.
    Hausdorff,
    /// Check the generalization bound and its ingredients; exits 1 on failure.
    VerifyBounds,
    /// Predict target losses from source loss and variation.
    PredictLoss,
}

fn load<C: ExperimentConfig>(cli: &Cli) -> Result<C, Error> {
    // no file means an empty document, so required fields stay required
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    let mut cfg: C = parse_config(&text)?;
    if let Some(s) = cli.seed {
        *cfg.seed_mut() = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(ExperimentManifest, bool), Error> {
    let out: &Path = &cli.out_dir;
    let ok = |m| Ok((m, true));
    match cli.command {
        Command::GenData => ok(run_gen_data(&load::<GenDataConfig>(cli)?, out)?),
        Command::Train => ok(run_train(&load::<TrainRunConfig>(cli)?, out)?),
        Command::Eval => ok(run_eval(&load::<EvalConfig>(cli)?, out)?),
        Command::Variation => ok(run_variation(&load::<VariationConfig>(cli)?, out)?),
        Command::Expansion => ok(run_expansion(&load::<ExpansionConfig>(cli)?, out)?),
        Command::Gap => ok(run_gap(&load::<GapConfig>(cli)?, out)?),
        Command::Hausdorff => ok(run_hausdorff(&load::<HausdorffRunConfig>(cli)?, out)?),
        Command::PredictLoss => ok(run_predict_loss(&load::<PredictLossConfig>(cli)?, out)?),
        Command::VerifyBounds => {
            let (m, report) = run_verify_bounds(&load::<VerifyConfig>(cli)?, out)?;
            for inv in &report.invariants {
                println!("{:<22} {} ({} checked, {} failed)", inv.name, if inv.pass { "pass" } else { "FAIL" }, inv.checked, inv.failures.len());
            }
            Ok((m, report.all_pass))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok((m, pass)) => {
            for o in &m.outputs {
                println!("wrote {}", cli.out_dir.join(o).display());
            }
            if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
