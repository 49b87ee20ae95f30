use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use petalgan::data::{build_manifest, parse_overrides, Augmentation, DatasetManifest, LesionType};
use petalgan::eval::{
    feature_stats, frechet_distance, load_questionnaire, table_path, write_report, EvalReport, FeatureExtractor,
    InceptionV3, ToyExtractor,
};
use petalgan::losses::DomainTag;
use petalgan::serve::{transfer_image, ModelChoice, ModelRegistry, Resolution, TransferRequest};
use petalgan::training::{train, TrainConfig, TrainOptions};
use petalgan::{GeneratorVariant, ImageTensor};
use petalgan_cli::server::{self, AppState};

#[derive(Parser)]
#[command(name = "petalgan", version, about = "Melanoma-to-flower style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index melanoma and flower images into a manifest file.
    Manifest {
        #[arg(long)]
        melanoma: PathBuf,
        #[arg(long)]
        flowers: PathBuf,
        /// `file_name,lesion_type` lines that override the coverage heuristic.
        #[arg(long)]
        overrides: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one generator variant on one lesion type.
    Train {
        #[arg(long)]
        variant: GeneratorVariant,
        #[arg(long = "lesion-type")]
        lesion_type: LesionType,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Epoch at which linear decay begins; defaults to half of `--epochs`.
        #[arg(long = "decay-start")]
        decay_start: Option<usize>,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Working size (square side, multiple of 4).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        flip: bool,
        #[arg(long = "checkpoint-every", default_value_t = 10)]
        checkpoint_every: usize,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Aggregate questionnaire results and optionally compute FID.
    Evaluate {
        #[arg(long)]
        questionnaire: PathBuf,
        #[arg(long, requires = "reference")]
        generated: Option<PathBuf>,
        #[arg(long, requires = "generated")]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Extractor::Standard)]
        extractor: Extractor,
        /// Inception-v3 weights (safetensors, torchvision names) for the standard extractor.
        #[arg(long = "inception-weights")]
        inception_weights: Option<PathBuf>,
        /// Network the generated images belong to.
        #[arg(long, default_value = "A")]
        network: String,
        /// JSON report path; a text table is written next to it.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Convert one image with a trained model.
    Transfer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_model)]
        model: ModelChoice,
        #[arg(long, value_parser = parse_resolution)]
        resolution: Resolution,
        #[arg(long = "checkpoint-dir")]
        checkpoint_dir: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long = "checkpoint-dir")]
        checkpoint_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Built studio UI to host under `/`.
        #[arg(long = "static-dir")]
        static_dir: Option<PathBuf>,
        #[arg(long = "max-concurrent", default_value_t = 2)]
        max_concurrent: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Extractor {
    Standard,
    Toy,
}

fn parse_model(s: &str) -> Result<ModelChoice, String> {
    s.parse().map_err(|e: petalgan::Error| e.to_string())
}

fn parse_resolution(s: &str) -> Result<Resolution, String> {
    s.parse().map_err(|e: petalgan::Error| e.to_string())
}

fn load_images(dir: &Path) -> anyhow::Result<Vec<ImageTensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(ImageTensor::load(p)?)).collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Manifest {
            melanoma,
            flowers,
            overrides,
            out,
        } => {
            let overrides = match overrides {
                Some(p) => parse_overrides(&std::fs::read_to_string(&p)?)?,
                None => Default::default(),
            };
            let (m, m_report) = build_manifest(&melanoma, DomainTag::Melanoma, &overrides)?;
            let (f, f_report) = build_manifest(&flowers, DomainTag::Flower, &Default::default())?;
            let manifest = m.merge(f)?;
            manifest.save(&out)?;
            println!(
                "{}: {} type I, {} type II, {} flowers; {} files skipped",
                out.display(),
                manifest.count(DomainTag::Melanoma, Some(LesionType::I)),
                manifest.count(DomainTag::Melanoma, Some(LesionType::II)),
                manifest.count(DomainTag::Flower, None),
                m_report.skipped.len() + f_report.skipped.len()
            );
        }
        Command::Train {
            variant,
            lesion_type,
            manifest,
            out,
            epochs,
            decay_start,
            lr0,
            seed,
            size,
            flip,
            checkpoint_every,
            resume,
        } => {
            let defaults = TrainConfig::default();
            let epochs = epochs.unwrap_or(defaults.epochs);
            let cfg = TrainConfig {
                variant,
                lesion_filter: lesion_type,
                epochs,
                decay_start: decay_start.unwrap_or(if epochs == defaults.epochs {
                    defaults.decay_start
                } else {
                    epochs / 2
                }),
                lr0: lr0.unwrap_or(defaults.lr0),
                seed: seed.unwrap_or(defaults.seed),
                working_size: size.unwrap_or(defaults.working_size),
                augmentation: if flip {
                    Augmentation::HorizontalFlip
                } else {
                    Augmentation::None
                },
                ..defaults
            };
            let manifest = DatasetManifest::load(&manifest)?;
            let opts = TrainOptions {
                checkpoint_every,
                resume_from: resume,
                ..Default::default()
            };
            let ckpt = train(&cfg, &manifest, &out, &opts)?;
            println!("trained {} epochs; checkpoints in {}", ckpt.epoch, out.display());
        }
        Command::Evaluate {
            questionnaire,
            generated,
            reference,
            extractor,
            inception_weights,
            network,
            out,
        } => {
            let records = load_questionnaire(&questionnaire)?;
            let mut report = EvalReport::from_questionnaire(&records)?;
            if let (Some(gen_dir), Some(ref_dir)) = (generated, reference) {
                let ext: Box<dyn FeatureExtractor> = match extractor {
                    Extractor::Toy => Box::new(ToyExtractor::default()),
                    Extractor::Standard => match inception_weights {
                        Some(p) => Box::new(InceptionV3::load(&p)?),
                        None => bail!("--extractor standard needs --inception-weights FILE (or use --extractor toy)"),
                    },
                };
                let gen_stats = feature_stats(&load_images(&gen_dir)?, ext.as_ref())?;
                let ref_stats = feature_stats(&load_images(&ref_dir)?, ext.as_ref())?;
                report.network_mut(&network).fid = Some(frechet_distance(&gen_stats, &ref_stats)?);
            }
            write_report(&report, &out)?;
            print!("{}", report.render_table());
            println!("wrote {} and {}", out.display(), table_path(&out).display());
        }
        Command::Transfer {
            input,
            out,
            model,
            resolution,
            checkpoint_dir,
        } => {
            let registry = ModelRegistry::load_dir(&checkpoint_dir)?;
            let req = TransferRequest {
                image: std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?,
                model,
                resolution,
            };
            std::fs::write(&out, transfer_image(&req, &registry)?)?;
            println!("wrote {}", out.display());
        }
        Command::Serve {
            checkpoint_dir,
            bind,
            static_dir,
            max_concurrent,
        } => {
            let registry = ModelRegistry::load_dir(&checkpoint_dir)?;
            for m in registry.models() {
                log::info!("loaded {} (variant {}, epoch {})", m.tag, m.variant, m.epoch);
            }
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(server::serve(
                AppState::new(registry, max_concurrent),
                static_dir,
                &bind,
            ))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
