use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msop::curriculum::Regime;
use msop::{Error, Result};
use msop_cli::commands::{self, EvalOutcome, PredictRecord};
use msop_cli::config::{RoiSource, RunConfig};
use msop_cli::exit_code;

#[derive(Parser)]
#[command(
    name = "msop",
    version,
    about = "MS-SoP classifier, blur curriculum and ROI pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds the model, training order, generator and perturbations.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON Lines manifest
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// va, anti, control or none
    #[arg(long, global = true, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// Initial blur sigma
    #[arg(long, global = true)]
    sigma0: Option<u32>,
    /// Halve sigma every k epochs
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Epochs before the first halving
    #[arg(long = "k-prime", global = true)]
    k_prime: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// manifest, whole or file:<path>
    #[arg(long = "roi-source", global = true, value_parser = parse_roi)]
    roi_source: Option<RoiSource>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest and write a checkpoint and per-epoch log.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint, or run patient-grouped k-fold training.
    Eval {
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Predict image labels through the ROI pipeline.
    Predict {
        /// Images to predict in addition to those of --manifest.
        images: Vec<PathBuf>,
    },
    /// Generate the synthetic shape/texture dataset.
    Synth {
        /// Also write the perturbed twin.
        #[arg(long)]
        perturbed: bool,
    },
    /// Train every regime and compare them on clean, perturbed and blurred data.
    Ablate {
        #[arg(long = "test-manifest")]
        test_manifest: Option<PathBuf>,
    },
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_roi(s: &str) -> std::result::Result<RoiSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve(common: Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
        c.synth.seed = s;
        c.perturb.seed = s;
    }
    let t = &mut c.train;
    macro_rules! set {
        ($($src:ident => $dst:expr),*) => {$(if let Some(v) = common.$src { $dst = v; })*};
    }
    set!(regime => t.regime, sigma0 => t.sigma0, k => t.k, k_prime => t.k_prime,
         epochs => t.epochs, batch => t.batch, lr => t.lr, roi_source => c.roi_source);
    if let Some(o) = common.out {
        c.out = o;
    }
    if common.manifest.is_some() {
        c.manifest = common.manifest;
    }
    if common.checkpoint.is_some() {
        c.checkpoint = common.checkpoint;
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = resolve(cli.common)?;
    match cli.command {
        Command::Train { resume } => {
            let o = commands::cmd_train(&config, resume)?;
            if let Some(last) = o.log.last() {
                println!(
                    "epoch {} sigma {} loss {:.4} accuracy {:.3}",
                    last.epoch, last.sigma, last.loss, last.accuracy
                );
            }
            println!("checkpoint: {}", o.checkpoint.display());
        }
        Command::Eval { folds } => {
            if folds.is_some() {
                config.folds = folds;
            }
            match commands::cmd_eval(&config)? {
                EvalOutcome::Single(r) => print!("{r}"),
                EvalOutcome::Folds(reports, summary) => {
                    for (i, r) in reports.iter().enumerate() {
                        println!("fold {i}: accuracy {:.1}", r.accuracy);
                    }
                    print!("{summary}");
                }
            }
        }
        Command::Predict { images } => {
            let recs = commands::cmd_predict(&config, &images)?;
            for r in &recs {
                match r {
                    PredictRecord::Ok(p) => println!("{}\t{}", p.image_id, p.label.as_str()),
                    PredictRecord::Err { image_id, error } => {
                        eprintln!("{image_id}\terror: {error}")
                    }
                }
            }
        }
        Command::Synth { perturbed } => {
            config.perturbed_twin |= perturbed;
            let o = commands::cmd_synth(&config)?;
            println!("{} images, manifest {}", o.count, o.manifest.display());
            if let Some(p) = o.perturbed_manifest {
                println!("perturbed twin: {}", p.display());
            }
        }
        Command::Ablate { test_manifest } => {
            if test_manifest.is_some() {
                config.test_manifest = test_manifest;
            }
            print!("{}", commands::cmd_ablate(&config)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
