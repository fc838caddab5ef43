use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dbsam::checkpoint::{self, CHECKPOINT_FILE, CONFIG_FILE, LOSS_FILE};
use dbsam::report::{self, AblationRow};
use dbsam::{config_file, dataset, dbsm, Error, Result};
use dbsam_core::config::Ablation;
use dbsam_core::gradcheck::{grad_check_suite, BLOCKS, SUITE_TOLERANCE};
use dbsam_core::train::{evaluate, prepare, Trainer};
use dbsam_core::{data, ModelConfig};

#[derive(Parser)]
#[command(name = "dbsam", version, about = "Dual-branch adapted promptable segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shape dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a volume file (tensors `volume` and `mask`, [Dz,H,W]) into axial slices.
    SliceVolume {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_fg: usize,
        /// Side of the square output slices.
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write model.dbsm, config.txt and loss.csv into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint; its config is read from config.txt beside it unless given.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// NSD tolerance in pixels of the decoder mask.
        #[arg(long, default_value_t = 1.0)]
        tolerance: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of every differentiable block.
    GradCheck {
        /// Double the analytic gradient of this block.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(BLOCKS))]
        inject_fault: Option<String>,
    },
    /// Train and score the four component-ablation rows with identical seeds and data.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Directory for one run per row plus ablation.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the frozen (pseudo-pretrained) tensors of a freshly built model.
    ExportFrozen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => config_file::load(p),
        None => Ok(ModelConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::at(dir, e))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { n, size, seed, out } => {
            if size < 16 {
                return Err(Error::Format(format!("--size {size} is too small (minimum 16)")));
            }
            dataset::write(&out, &data::synth_dataset(n, size, seed))?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::SliceVolume { input, min_fg, size, out } => {
            let (volume, mask) = dataset::read_volume(&input)?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("vol");
            let prefix: String = stem.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
            let samples = data::volume_slice_axial(&volume, &mask, min_fg, size, &format!("{prefix}_z"))
                .map_err(|e| Error::at(&input, e))?;
            dataset::write(&out, &samples)?;
            println!("wrote {} of {} slices to {}", samples.len(), volume.shape()[0], out.display());
        }
        Command::Train { config, data, out } => {
            let config = load_config(config.as_deref())?;
            train(&config, &data, &out)?;
        }
        Command::Eval { ckpt, config, data, tolerance, report } => {
            let model = match config {
                Some(c) => checkpoint::load(&ckpt, &config_file::load(&c)?)?,
                None => checkpoint::load_with_config(&ckpt)?,
            };
            let samples = prepare(&dataset::read(&data)?, &model)?;
            let r = evaluate(&model, &samples, tolerance)?;
            report::write_text(&report, &report::metrics_csv(&r)?)?;
            println!("mean DSC {:.4}  mean NSD {:.4}  ({} samples)", r.mean_dsc, r.mean_nsd, r.per_sample.len());
        }
        Command::GradCheck { inject_fault } => {
            let results = grad_check_suite(inject_fault.as_deref())?;
            println!("{:<22} {:>12}  result", "block", "max rel-err");
            for r in &results {
                println!("{:<22} {:>12.3e}  {}", r.name, r.check.max_rel_err, if r.passed { "pass" } else { "FAIL" });
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if !failed.is_empty() {
                return Err(Error::Format(format!(
                    "gradient check above {SUITE_TOLERANCE:e} in: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Ablate { config, data, out } => {
            let base = load_config(config.as_deref())?;
            let mut rows = Vec::new();
            for a in Ablation::ALL {
                let dir = out.join(a.name().trim_start_matches('+'));
                let (model, log) = train(&a.apply(&base), &data, &dir)?;
                let samples = prepare(&dataset::read(&data)?, &model)?;
                let r = evaluate(&model, &samples, base.tolerance)?;
                report::write_text(&dir.join("metrics.csv"), &report::metrics_csv(&r)?)?;
                rows.push(AblationRow {
                    config: a.name().into(),
                    dsc: r.mean_dsc,
                    nsd: r.mean_nsd,
                    final_loss: log.last().map_or(f64::NAN, |l| l.loss),
                });
            }
            report::write_text(&out.join("ablation.csv"), &report::ablation_csv(&rows)?)?;
            print!("{}", report::ablation_table(&rows));
        }
        Command::ExportFrozen { config, out } => {
            let model = checkpoint::build_model(&load_config(config.as_deref())?)?;
            let records = checkpoint::frozen_records(&model);
            dbsm::save(&out, &records)?;
            println!("wrote {} frozen tensors to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn train(config: &ModelConfig, data: &Path, out: &Path) -> Result<(dbsam_core::DbSamModel, Vec<dbsam_core::train::StepLog>)> {
    let model = checkpoint::build_model(config)?;
    let samples = prepare(&dataset::read(data)?, &model)?;
    if samples.is_empty() {
        return Err(Error::Format(format!("{}: dataset is empty", data.display())));
    }
    create_dir(out)?;
    let mut trainer = Trainer::new(model);
    let total = trainer.total_steps(samples.len());
    let every = (total / 20).max(1);
    let log = trainer.fit(&samples, |l| {
        if l.step % every == 0 || l.step + 1 == total {
            eprintln!("step {:>5}/{total}  epoch {:>3}  lr {:.3e}  loss {:.5}", l.step + 1, l.epoch, l.lr, l.loss);
        }
    })?;
    report::write_text(&out.join(LOSS_FILE), &report::loss_csv(&log)?)?;
    config_file::save(&out.join(CONFIG_FILE), config)?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &trainer.model)?;
    println!("{} steps, final loss {:.5}, checkpoint {}", log.len(), log.last().map_or(f64::NAN, |l| l.loss), out.join(CHECKPOINT_FILE).display());
    Ok((trainer.model, log))
}
