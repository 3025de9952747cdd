use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sfc_core::bitstream::{self, FILE_EXTENSION};
use sfc_core::eval::{Layer, Metric, RateCurve};
use sfc_core::image_io;
use sfc_core::pipeline::{ExperimentConfig, Pipeline, Stage};
use sfc_core::{synth, Error};

type P = Pipeline<f32>;

#[derive(Parser)]
#[command(name = "sfc", version, about = "Scalable face codec: train, encode, decode and evaluate")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration; unknown keys are rejected.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: `toy` or `paper`.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic identity-labelled face corpus as PNG folders.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        identities: usize,
        #[arg(long, default_value_t = 50)]
        per_identity: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Scan a directory of per-identity image folders and write the manifest.
    Ingest {
        /// Defaults to `data.root` from the configuration.
        root: Option<PathBuf>,
    },
    /// Train one stage at the configured operating point.
    Train { stage: String },
    /// Train a stage over its configured sweep.
    Sweep { stage: String },
    /// Encode an image to a scalable stream.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write the base layer only.
        #[arg(long)]
        base_only: bool,
        /// Enhancement model, chosen as the one trained closest to this rate weight.
        #[arg(long, conflicts_with = "base_only")]
        rate_weight: Option<f64>,
    },
    /// Decode a stream to a feature vector or an image.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Base layer only: write the reconstructed feature as JSON.
        #[arg(long, conflicts_with = "image")]
        feature: bool,
        /// Full reconstruction as PNG (the default).
        #[arg(long)]
        image: bool,
    },
    /// Evaluate every operating point on the test split.
    Eval {
        /// Cap on test images used for the image-quality metrics.
        #[arg(long)]
        max_images: Option<usize>,
    },
    /// Render rate curves from the last evaluation as SVG.
    Curves,
    /// Print the field layout of a stream.
    Dump { input: PathBuf },
    /// Write the generator pyramid levels for one image as PNG.
    Generate {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Dependency { .. }) => 3,
        Some(Error::Decode(_)) => 5,
        Some(_) => 4,
        None => 4,
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    Ok(match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(&args.preset)?,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e).into())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn run(cli: Cli) -> Result<()> {
    let command = &cli.command;
    let name = match command {
        Command::Synth { out, identities, per_identity, size, seed } => {
            for (label, images) in synth::synth_faces::<f32>(*identities, *per_identity, *size, *seed) {
                for (i, img) in images.iter().enumerate() {
                    image_io::save_png(img, &out.join(format!("id{label:04}")).join(format!("{i:04}.png")))?;
                }
            }
            println!("wrote {identities} identities x {per_identity} images to {}", out.display());
            return Ok(());
        }
        Command::Dump { input } => {
            print!("{}", bitstream::dump(&read(input)?)?);
            return Ok(());
        }
        Command::Config => {
            print!("{}", load_config(&cli.config)?.to_toml());
            return Ok(());
        }
        Command::Ingest { .. } => "ingest".to_string(),
        Command::Train { stage } => format!("train_{}", Stage::parse(stage)?.as_str()),
        Command::Sweep { stage } => format!("sweep_{}", Stage::parse(stage)?.as_str()),
        Command::Encode { .. } => "encode".into(),
        Command::Decode { .. } => "decode".into(),
        Command::Eval { .. } => "eval".into(),
        Command::Curves => "curves".into(),
        Command::Generate { .. } => "generate".into(),
    };
    let p = P::new(load_config(&cli.config)?)?;
    match command {
        Command::Ingest { root } => {
            let m = p.ingest(root.as_deref())?;
            println!("{} images, manifest {}", m.entries.len(), p.manifest_path().display());
        }
        Command::Train { stage } | Command::Sweep { stage } => {
            let sweep = matches!(command, Command::Sweep { .. });
            let hash = p.run_stage(Stage::parse(stage)?, sweep)?;
            println!("{} checkpoint {hash}", Stage::parse(stage)?.as_str());
            return Ok(());
        }
        Command::Encode { input, output, base_only, rate_weight } => {
            let models = if *base_only { p.base_models()? } else { p.models()? };
            let x = image_io::load_square::<f32>(input, p.cfg.sizes.output)?;
            let member = if *base_only {
                None
            } else {
                let rw = rate_weight.unwrap_or(p.cfg.enhancement.model.rate_weight);
                Some(models.enhancement_for(rw).context("no enhancement models trained")?)
            };
            let bytes = models.encode_image(&x, member)?;
            let out = output.clone().unwrap_or_else(|| input.with_extension(FILE_EXTENSION));
            write(&out, &bytes)?;
            let s = bitstream::demux(&bytes)?;
            println!(
                "{}: {} bytes, base {:.4} bpp, total {:.4} bpp",
                out.display(),
                bytes.len(),
                s.bpp(Layer::Base),
                s.bpp(Layer::Total)
            );
        }
        Command::Decode { input, output, feature, .. } => {
            let bytes = read(input)?;
            if *feature {
                let models = p.base_models()?;
                let f = models.decode_feature(&bytes)?;
                write(output, serde_json::to_string(&f)?.as_bytes())?;
            } else {
                let models = p.models()?;
                let d = models.decode_image(&bytes)?;
                image_io::save_png(&d.image, output)?;
                println!("{}: {} reconstruction", output.display(), d.layer.as_str());
            }
        }
        Command::Eval { max_images } => {
            let r = p.evaluate(*max_images)?;
            r.write(&p.eval_dir())?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Curves => {
            let csv = p.eval_dir().join("rate_points.csv");
            let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e)).context("run `eval` first")?;
            let curve = RateCurve::from_csv(&text)?;
            for (metric, title) in [
                (Metric::Accuracy, "Verification accuracy vs base bpp"),
                (Metric::Auc, "Verification AUC vs base bpp"),
                (Metric::Psnr, "PSNR vs bpp"),
                (Metric::MsSsim, "MS-SSIM vs bpp"),
            ] {
                let path = p.eval_dir().join(format!("{}.svg", metric.as_str()));
                write(&path, curve.to_svg(metric, title).as_bytes())?;
                println!("{}", path.display());
            }
        }
        Command::Generate { input, out } => {
            let models = p.base_models()?;
            let x = image_io::load_square::<f32>(input, p.cfg.sizes.output)?;
            let f_rec = models.codec.f_rec(&models.feature(&x)?)?;
            let x_trans = models.codec.codec.structure_transform(&f_rec)?;
            image_io::save_png(&x_trans, &out.join("x_trans.png"))?;
            for (l, level) in models.generator.rec_base(&f_rec)?.iter().enumerate() {
                image_io::save_png(level, &out.join(format!("level{}.png", l + 1)))?;
            }
        }
        Command::Synth { .. } | Command::Dump { .. } | Command::Config => unreachable!("handled above"),
    }
    p.write_reproducibility(&name)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
