//! Command-line front end for the data, training, sampling, evaluation and
//! experiment stages.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dhvae_core::config::{parse_override, Config};
use dhvae_core::data_io::{
    build_slice_dataset, list_volumes, load_volume, make_blob_corpus, save_mask, save_volume, MaskVolume3D, SliceDataset, Split, Volume3D,
};
use dhvae_core::features::FeatureExtractor;
use dhvae_core::pipeline::{
    emit_report, evaluate_image_quality, evaluate_mask_quality, generate_pairs, load_generator, plot_losses, read_cells_csv,
    run_augmentation_experiment, train_generator, ExperimentSettings, PsnrSource,
};
use dhvae_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dhvae", version, about = "Hamiltonian VAE image/mask synthesis and augmentation experiments")]
struct Cli {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed key in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dotted-key override, e.g. `--set train.iterations=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic blob corpus (volume plus mask per subject).
    MakeBlobs,
    /// Turn a directory of volumes and masks into a slice dataset.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train the generator and discriminator on a slice dataset.
    TrainGen {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw synthetic image/mask pairs from a trained generator.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `sample.count`.
        #[arg(short = 'n', long)]
        count: Option<usize>,
    },
    /// PSNR, FID and LPIPS between real and synthetic images.
    EvalImages {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        /// Compute PSNR on this generator's reconstructions of the real set
        /// instead of pairing images by index.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// JSD and KLD between real and synthetic per-pixel mask distributions.
    EvalMasks {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
    },
    /// Run the augmentation sweep on a directory of volumes and write the report.
    AugmentExp {
        /// Volume directory; a blob corpus is generated when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Rebuild summary tables and plots from a cells.csv.
    Report {
        #[arg(long)]
        cells: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let overrides = cli.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p, &overrides)?,
        None => Config::with_overrides(&overrides)?,
    };
    if let Some(s) = cli.seed {
        cfg.data.blob_seed = s;
        cfg.train.seed = s;
        cfg.segmenter.seed = s;
        cfg.experiment.seeds = vec![s];
        cfg.experiment.split_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_corpus(dir: &Path) -> Result<Vec<(Volume3D, MaskVolume3D)>> {
    let paths = list_volumes(dir)?;
    if paths.is_empty() {
        return Err(Error::Ingestion(format!("{}: no volumes found", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let (v, m) = load_volume(p)?;
            let m = m.ok_or_else(|| Error::Pairing(format!("{}: no matching mask", p.display())))?;
            Ok((v, m))
        })
        .collect()
}

fn blob_corpus(cfg: &Config) -> Result<Vec<(Volume3D, MaskVolume3D)>> {
    let [h, w, d] = cfg.data.volume_shape;
    make_blob_corpus(cfg.data.blob_subjects, (h, w, d), cfg.data.blob_seed)
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    mkdir(out)?;
    let hash = cfg.hash();
    match &cli.cmd {
        Command::MakeBlobs => {
            let mut written = Vec::new();
            for (v, m) in blob_corpus(&cfg)? {
                let p = out.join(format!("{}.rawvol", v.subject_id()));
                let mp = out.join(format!("{}_mask.rawvol", v.subject_id()));
                save_volume(&v, &p)?;
                save_mask(&m, &mp)?;
                written.extend([p, mp]);
            }
            Ok(written)
        }
        Command::Prepare { input, split } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Config(format!("unknown split {other:?} (train or test)"))),
            };
            let ds = build_slice_dataset(&load_corpus(input)?, cfg.data.min_fg_pixels, split)?;
            let p = out.join("dataset.bin");
            ds.save(&p)?;
            Ok(vec![p])
        }
        Command::TrainGen { data, resume } => {
            let ds = SliceDataset::load(data)?;
            let outcome = train_generator(&ds, &cfg.train, Some(out), resume.as_deref())?;
            let plot = out.join("losses.svg");
            let all = dhvae_core::pipeline::read_loss_csv(out.join(dhvae_core::pipeline::LOSS_CSV))?;
            plot_losses(&all, &plot)?;
            let cfg_path = out.join("config.toml");
            fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
            Ok(outcome.checkpoint.into_iter().chain([out.join(dhvae_core::pipeline::LOSS_CSV), plot, cfg_path]).collect())
        }
        Command::Sample { checkpoint, count } => {
            let gen = load_generator(checkpoint)?;
            let n = count.unwrap_or(cfg.sample.count);
            let pairs = generate_pairs(&gen, n, cfg.train.seed, cfg.data.min_fg_pixels, cfg.sample.attempts_per_pair)?;
            let p = out.join("synthetic.bin");
            SliceDataset::from_pairs(pairs, Split::Train)?.save(&p)?;
            Ok(vec![p])
        }
        Command::EvalImages { real, synth, checkpoint } => {
            let real = SliceDataset::load(real)?;
            let synth = SliceDataset::load(synth)?;
            let fx = FeatureExtractor::from_env(&cfg.train.features)?;
            let gen = checkpoint.as_ref().map(load_generator).transpose()?;
            let source = gen.as_ref().map_or(PsnrSource::IndexMatched, PsnrSource::Reconstructions);
            let r = evaluate_image_quality(real.pairs(), synth.pairs(), source, &fx, cfg.eval.max_val, cfg.train.seed, &hash)?;
            let p = out.join("image_metrics.csv");
            r.write(&p)?;
            Ok(vec![p])
        }
        Command::EvalMasks { real, synth } => {
            let masks = |p: &Path| -> Result<Vec<_>> { Ok(SliceDataset::load(p)?.pairs().iter().map(|s| s.mask().clone()).collect()) };
            let r = evaluate_mask_quality(&masks(real)?, &masks(synth)?, cfg.eval.divergence_eps, cfg.train.seed, &hash)?;
            let p = out.join("mask_metrics.csv");
            r.write(&p)?;
            Ok(vec![p])
        }
        Command::AugmentExp { input } => {
            let corpus = match input {
                Some(dir) => load_corpus(dir)?,
                None => blob_corpus(&cfg)?,
            };
            let settings = ExperimentSettings {
                plan: cfg.experiment.clone(),
                train: cfg.train.clone(),
                segmenter: cfg.segmenter.clone(),
                min_fg_pixels: cfg.data.min_fg_pixels,
                attempts_per_pair: cfg.sample.attempts_per_pair,
            };
            let results = run_augmentation_experiment(&settings, &corpus)?;
            emit_report(&results, out)
        }
        Command::Report { cells } => emit_report(&read_cells_csv(cells)?, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
