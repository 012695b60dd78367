use anomap_harness::config::{ExperimentConfig, ModelFamily, TrainVariant};
use anomap_harness::paths::RunPaths;
use anomap_harness::reconstruct::{reconstruct_eval, write_outputs, ReconOptions};
use anomap_harness::{data, evaluate, report, train, volumetry_cmd};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "anomap",
    about = "Synthetic brain phantoms, generative anomaly-detection models, and the experiment pipeline around them",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output (run) directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs where applicable.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom cohorts and extract MSP slices.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model family (vqvae|rae|ddim|classifier).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        family: String,
        /// base | h_trained (autoencoders only).
        #[arg(long, default_value = "base")]
        variant: String,
    },
    /// Reconstruct the evaluation split and emit anomaly maps.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        family: String,
        #[arg(long, default_value = "base")]
        variant: String,
        /// Match the output histogram to the input (HIST M).
        #[arg(long)]
        hist_m: bool,
    },
    /// SSIM/MSE fidelity table over available checkpoints.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Cap evaluated subjects per group (0 = all).
        #[arg(long)]
        max_subjects: Option<usize>,
    },
    /// Four-variant histogram ablation for one autoencoder family.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        family: String,
        #[arg(long)]
        max_subjects: Option<usize>,
    },
    /// Region volumes and the cohort volumetry report.
    Volumetry {
        #[command(flatten)]
        common: Common,
    },
    /// Per-subject panels and per-group average-map figures.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> anomap_core::Result<(ExperimentConfig, RunPaths)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    Ok((cfg, paths))
}

fn persist_config(cfg: &ExperimentConfig, paths: &RunPaths) -> anomap_core::Result<()> {
    std::fs::create_dir_all(&paths.root)?;
    let text = toml::to_string_pretty(cfg).map_err(|e| anomap_core::Error::Other(e.to_string()))?;
    std::fs::write(paths.config_copy_path(), text)?;
    Ok(())
}

fn run() -> anomap_core::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData { common } => {
            let (cfg, paths) = load_config(&common)?;
            persist_config(&cfg, &paths)?;
            data::generate_data(&cfg, &paths, common.force)?;
            println!("generated data under {}", paths.data_dir().display());
        }
        Command::Train { common, family, variant } => {
            let (cfg, paths) = load_config(&common)?;
            let family = ModelFamily::parse(&family)?;
            let variant = TrainVariant::parse(&variant)?;
            let stem = train::train(&cfg, &paths, family, variant)?;
            println!(
                "trained {} -> {}",
                stem,
                paths.checkpoints_dir().join(format!("{stem}.bin")).display()
            );
        }
        Command::Reconstruct { common, family, variant, hist_m } => {
            let (cfg, paths) = load_config(&common)?;
            let family = ModelFamily::parse(&family)?;
            let variant = TrainVariant::parse(&variant)?;
            let outputs = reconstruct_eval(
                &cfg,
                &paths,
                &ReconOptions { family, variant, hist_m },
            )?;
            write_outputs(&paths, family, &outputs)?;
            println!(
                "wrote {} reconstructions under {}",
                outputs.len(),
                paths.recon_dir(family.name()).display()
            );
        }
        Command::Evaluate { common, max_subjects } => {
            let (mut cfg, paths) = load_config(&common)?;
            if let Some(m) = max_subjects {
                cfg.eval.max_subjects = m;
            }
            let rows = evaluate::evaluate(&cfg, &paths)?;
            for row in &rows {
                println!(
                    "{:<22} SSIM {:.3} +/- {:.3}  MSE {:.5} +/- {:.5}  (n={})",
                    row.method, row.ssim_mean, row.ssim_sd, row.mse_mean, row.mse_sd, row.n
                );
            }
        }
        Command::Ablation { common, family, max_subjects } => {
            let (mut cfg, paths) = load_config(&common)?;
            if let Some(m) = max_subjects {
                cfg.eval.max_subjects = m;
            }
            let family = ModelFamily::parse(&family)?;
            let rep = evaluate::ablation(&cfg, &paths, family)?;
            for row in &rep.rows {
                println!(
                    "{:<22} SSIM {:.3}  MSE {:.5}  (n={})",
                    row.method, row.ssim_mean, row.mse_mean, row.n
                );
            }
            println!(
                "HIST M improves SSIM: {}; improves MSE: {}",
                rep.hist_m_improves_ssim, rep.hist_m_improves_mse
            );
        }
        Command::Volumetry { common } => {
            let (cfg, paths) = load_config(&common)?;
            let report = volumetry_cmd::run_volumetry(&cfg, &paths)?;
            println!(
                "volumetry over {:?} subjects -> {}",
                report.subjects_per_group,
                paths.tables_dir().join("volumetry.csv").display()
            );
        }
        Command::Report { common } => {
            let (cfg, paths) = load_config(&common)?;
            let written = report::run_report(&cfg, &paths)?;
            println!("wrote {} figures under {}", written.len(), paths.figures_dir().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Machine-readable error envelope on stderr.
            let kind = match &err {
                anomap_core::Error::Validation { .. } => "validation",
                anomap_core::Error::DimMismatch { .. } => "dim_mismatch",
                anomap_core::Error::Degenerate(_) => "degenerate",
                anomap_core::Error::Guard(_) => "guard",
                anomap_core::Error::NonFinite(_) => "non_finite",
                anomap_core::Error::ModelMismatch(_) => "model_mismatch",
                anomap_core::Error::Io(_) => "io",
                anomap_core::Error::Serde(_) => "serde",
                anomap_core::Error::Other(_) => "other",
            };
            let payload = serde_json::json!({ "error": err.to_string(), "kind": kind });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
