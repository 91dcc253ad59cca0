use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use palmbridge::config::{ExperimentConfig, Variant};
use palmbridge::error::{CliError, Result};
use palmbridge::formats::{self, Checkpoint};
use palmbridge::runner::{self, SweepAxis};
use palmbridge_core::bridge::BlendingCoefficients;
use palmbridge_core::trainer::{attach_codebook, checksum};

#[derive(Parser)]
#[command(name = "palmbridge", version, about = "Codebook feature alignment experiments on synthetic identities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed and variant of an experiment config.
    Run { config: PathBuf },
    /// Vary one setting over a grid, everything else fixed.
    Sweep {
        config: PathBuf,
        /// blend, cardinality or losses
        #[arg(long)]
        axis: String,
        /// Comma list or start:end:step; loss rows are bak, bak+con, bak+orth, bak+con+orth.
        #[arg(long)]
        grid: String,
    },
    /// Recompute metrics and diagnostics for a saved checkpoint.
    Diagnose { checkpoint: PathBuf, config: PathBuf },
    /// Write the codebook of a checkpoint as a standalone file.
    ExportCodebook { checkpoint: PathBuf, out: PathBuf },
    /// Pair a frozen backbone with an external codebook.
    Attach {
        backbone_checkpoint: PathBuf,
        codebook: PathBuf,
        /// Blend weight w_map; w_ori = 1 - alpha.
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        /// Where to write the combined checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate the attached model on this config's split for the checkpoint seed.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn print(line: &str) {
    println!("{line}");
}

fn run(config_path: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    runner::run_experiment(&config, true, print)?;
    println!("results in {}", runner::experiment_dir(&config).display());
    Ok(())
}

fn sweep(config_path: &Path, axis: &str, grid: &str) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let axis: SweepAxis = axis.parse()?;
    let grid = runner::parse_grid(axis, grid)?;
    runner::sweep(&config, axis, &grid, true, print)?;
    let table = runner::experiment_dir(&config).join(format!("sweep-{}", axis.name())).join("table.csv");
    println!("table in {}", table.display());
    Ok(())
}

fn diagnose(checkpoint: &Path, config_path: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let (ckpt, model) = formats::read_checkpoint(checkpoint)?;
    if ckpt.config_hash != config.hash() {
        eprintln!("warning: checkpoint was produced by a different config (hash {})", ckpt.config_hash);
    }
    let variant = match model.mode {
        palmbridge_core::ModelMode::Naive => Variant::Naive,
        palmbridge_core::ModelMode::Joint => Variant::Bridge,
        palmbridge_core::ModelMode::PlugAndPlay => Variant::PlugAndPlay,
    };
    let split = runner::make_split(&config, ckpt.seed)?;
    let run = runner::evaluate(&config, variant, ckpt.seed, &split, model, None)?;
    let dir = runner::experiment_dir(&config).join(format!("diagnose-seed-{}", ckpt.seed)).join(variant.name());
    formats::write_json(&dir.join("metrics.json"), &run.metrics)?;
    if let Some(d) = &run.diagnostics {
        formats::write_json(&dir.join("diagnostics.json"), d)?;
        println!(
            "contraction over {} same-cell pairs: exact dev {:e}, stated dev {:e}; dead codewords {:.1}%",
            d.contraction.n_pairs,
            d.contraction.exact_dev.unwrap_or(f64::NAN),
            d.contraction.stated_dev.unwrap_or(f64::NAN),
            100.0 * d.dead_fraction
        );
    }
    println!("{}", run.summary_line());
    println!("results in {}", dir.display());
    Ok(())
}

fn export_codebook(checkpoint: &Path, out: &Path) -> Result<()> {
    let (_, model) = formats::read_checkpoint(checkpoint)?;
    let codebook = model.codebook.ok_or_else(|| CliError::format(checkpoint, "checkpoint has no codebook"))?;
    formats::write_codebook(out, &codebook)?;
    println!("wrote {} codewords of dimension {} to {}", codebook.len(), codebook.dim(), out.display());
    Ok(())
}

fn attach(backbone_path: &Path, codebook_path: &Path, alpha: f64, out: Option<&Path>, config_path: Option<&Path>) -> Result<()> {
    let (ckpt, base) = formats::read_checkpoint(backbone_path)?;
    let codebook = formats::read_codebook(codebook_path)?;
    let coeffs = BlendingCoefficients::from_alpha(alpha).map_err(|e| CliError::Config(format!("alpha: {e}")))?;
    let before = (checksum(&base.backbone.to_flat()), checksum(codebook.vectors.as_slice()));
    let model = attach_codebook(&base.backbone, &codebook, coeffs)?;

    let config = config_path.map(ExperimentConfig::load).transpose()?;
    let out = match (out, &config) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(c)) => runner::experiment_dir(c).join(format!("attach-seed-{}", ckpt.seed)).join("checkpoint.json"),
        (None, None) => PathBuf::from("attached_checkpoint.json"),
    };
    if let Some(config) = &config {
        let split = runner::make_split(config, ckpt.seed)?;
        let run = runner::evaluate(config, Variant::PlugAndPlay, ckpt.seed, &split, model.clone(), None)?;
        let dir = out.parent().unwrap_or(Path::new("."));
        formats::write_json(&dir.join("metrics.json"), &run.metrics)?;
        if let Some(d) = &run.diagnostics {
            formats::write_json(&dir.join("diagnostics.json"), d)?;
        }
        println!("{}", run.summary_line());
    }
    let after = (checksum(&model.backbone.to_flat()), checksum(model.codebook.as_ref().expect("attached").vectors.as_slice()));
    if before != after {
        return Err(CliError::format(backbone_path, "attached parameters differ from their sources"));
    }
    formats::write_json(&out, &Checkpoint::new(&model, ckpt.seed, ckpt.config_hash))?;
    println!("parameters unchanged (backbone {:016x}, codebook {:016x}); wrote {}", after.0, after.1, out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => run(config),
        Command::Sweep { config, axis, grid } => sweep(config, axis, grid),
        Command::Diagnose { checkpoint, config } => diagnose(checkpoint, config),
        Command::ExportCodebook { checkpoint, out } => export_codebook(checkpoint, out),
        Command::Attach { backbone_checkpoint, codebook, alpha, out, config } => {
            attach(backbone_checkpoint, codebook, *alpha, out.as_deref(), config.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
