//! Command-line surface: dataset generation, training, evaluation,
//! inference, the ablation harness, and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure (including
//! failed gradient checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use dabdunet::config::RunConfig;
use dabdunet::data::{self, Split};
use dabdunet::error::Result;
use dabdunet::gradcheck;
use dabdunet::model::{Model, Variant};
use dabdunet::train::{
    ablation_table, binarize, mean_std, run_ablation, train, validation_dice,
};

#[derive(Parser)]
#[command(
    name = "dabdunet",
    version,
    about = "Dense-block U-Net with attention-gated, LSTM-fused skips on synthetic lesion data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply for anything unset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset under a directory.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; samples land in `<out>/{train,val}/`.
        #[arg(long)]
        out: PathBuf,
        /// Also write human-viewable PGM mirrors next to the tensors.
        #[arg(long)]
        emit_pgm: bool,
    },
    /// Train one variant; writes weights, schema manifest, and report.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for `weights.dtf`, `model.schema.json`, `report.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "DA-BDense-UNet")]
        variant: String,
    },
    /// Print the Dice score of saved weights over a dataset split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "DA-BDense-UNet")]
        variant: String,
    },
    /// Write predicted masks (and overlays) for a dataset split.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "DA-BDense-UNet")]
        variant: String,
        /// Also write prediction-boundary overlays as PGM.
        #[arg(long)]
        emit_pgm: bool,
    },
    /// Train several variants with one seed and emit the comparison table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `all` or a comma-separated list of variant names.
        #[arg(long, default_value = "all")]
        variants: String,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds_per_check: u64,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(dabdunet::Error::Config(format!("unknown split {other:?}; use train or val"))),
    }
}

fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    if s == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',').map(|name| Variant::from_name(name.trim())).collect()
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<data::Dataset> {
    Ok(data::Dataset {
        spec: cfg.dataset_spec(),
        train: data::read_split(dir, Split::Train)?,
        val: data::read_split(dir, Split::Val)?,
    })
}

fn write_json(path: &Path, json: &str) -> Result<()> {
    std::fs::write(path, format!("{json}\n"))?;
    Ok(())
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Gen { config, out, emit_pgm } => {
            let cfg = config.load()?;
            let dataset = data::generate_dataset(&cfg.dataset_spec())?;
            data::write_dataset(&out, &dataset, emit_pgm)?;
            println!(
                "{}",
                serde_json::json!({
                    "seed": cfg.seed,
                    "n_train": dataset.train.len(),
                    "n_val": dataset.val.len(),
                    "size": cfg.data.size,
                })
            );
            Ok(0)
        }
        Command::Train { config, data: data_dir, out, variant } => {
            let cfg = config.load()?;
            let variant = Variant::from_name(&variant)?;
            let dataset = load_dataset(&data_dir, &cfg)?;
            let mut model = Model::build_variant(variant, &cfg.model_config())?;
            let report = train(&mut model, &dataset, &cfg.train_params())?;
            std::fs::create_dir_all(&out)?;
            model.save_weights(out.join("weights.dtf"))?;
            write_json(&out.join("model.schema.json"), &model.schema_json())?;
            let json = serde_json::to_string_pretty(&report)?;
            write_json(&out.join("report.json"), &json)?;
            eprintln!(
                "trained {} for {} epochs in {:.1}s",
                report.variant,
                report.epochs.len(),
                report.wall_clock_secs
            );
            println!("{json}");
            Ok(0)
        }
        Command::Eval { config, weights, data: data_dir, split, variant } => {
            let cfg = config.load()?;
            let variant = Variant::from_name(&variant)?;
            let split = parse_split(&split)?;
            let model = Model::load_weights(&variant.apply(&cfg.model_config()), &weights)?;
            let samples = data::read_split(&data_dir, split)?;
            let dcs = validation_dice(&model, &samples, cfg.train.threshold)?;
            let (mean, std) = mean_std(&dcs);
            println!(
                "{}",
                serde_json::json!({
                    "split": split.dir_name(),
                    "n": dcs.len(),
                    "threshold": cfg.train.threshold,
                    "dc_mean": mean,
                    "dc_std": std,
                })
            );
            Ok(0)
        }
        Command::Infer { config, weights, data: data_dir, split, out, variant, emit_pgm } => {
            let cfg = config.load()?;
            let variant = Variant::from_name(&variant)?;
            let split = parse_split(&split)?;
            let model = Model::load_weights(&variant.apply(&cfg.model_config()), &weights)?;
            let samples = data::read_split(&data_dir, split)?;
            std::fs::create_dir_all(&out)?;
            for (i, sample) in samples.iter().enumerate() {
                let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
                let batch =
                    dabdunet::Tensor::from_vec(sample.image.data().to_vec(), &[1, 1, h, w])?;
                let prob = model.predict(&batch)?;
                let mask = binarize(&prob, cfg.train.threshold);
                let flat = dabdunet::Tensor::from_vec(mask.data().to_vec(), &[1, h, w])?;
                dabdunet::dtf::write_tensor(out.join(format!("{i}.pred.dtf")), &flat)?;
                if emit_pgm {
                    let overlay = data::overlay(&sample.image, &flat);
                    data::write_pgm(&out.join(format!("{i}.overlay.pgm")), &overlay, w, h)?;
                    data::write_pgm(&out.join(format!("{i}.pred.pgm")), flat.data(), w, h)?;
                }
            }
            println!("{}", serde_json::json!({ "split": split.dir_name(), "n": samples.len() }));
            Ok(0)
        }
        Command::Ablate { config, data: data_dir, out, variants } => {
            let cfg = config.load()?;
            let variants = parse_variants(&variants)?;
            let dataset = load_dataset(&data_dir, &cfg)?;
            let report = run_ablation(&cfg.model_config(), &dataset, &variants, &cfg.train_params())?;
            std::fs::create_dir_all(&out)?;
            let json = serde_json::to_string_pretty(&report)?;
            write_json(&out.join("ablation.json"), &json)?;
            let table = ablation_table(&report);
            std::fs::write(out.join("ablation.txt"), &table)?;
            print!("{table}");
            Ok(if report.rows.iter().any(|r| r.failed) { 2 } else { 0 })
        }
        Command::Gradcheck { seed, seeds_per_check } => {
            let report = gradcheck::run_suite(seed, seeds_per_check)?;
            for o in &report.outcomes {
                println!(
                    "{} {} (seed {}): max rel err {:.3e}, tolerance {:.0e}",
                    if o.passed() { "PASS" } else { "FAIL" },
                    o.name,
                    o.seed,
                    o.max_rel_err,
                    o.tolerance
                );
            }
            let failed = report.outcomes.iter().filter(|o| !o.passed()).count();
            println!(
                "{} checks, {} failed",
                report.outcomes.len(),
                failed
            );
            Ok(if report.all_passed() { 0 } else { 2 })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
