use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use semstyle::manipulation::TranslateMode;
use semstyle::pipeline::commands::{
    evaluate_checkpoint, reenact_dir, synthesize_file, translate_file, EvaluateRequest, StyleSource, TranslateRequest,
};
use semstyle::pipeline::evaluate::DEFAULT_TRANSFORMS;
use semstyle::pipeline::{exit_code, resume, train, Config, Preset, ProviderConfig, Stage};
use semstyle::{Error, Result};

#[derive(Parser)]
#[command(name = "semstyle", version, about = "Semantic mask editing and region-style face synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Manipulation,
    Synthesis,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Latent,
    Reference,
}

#[derive(Subcommand)]
enum Command {
    /// Write a preset config.
    InitConfig {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long, value_enum, default_value = "toy")]
        preset: PresetArg,
        /// Output file; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train from scratch into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue from a checkpoint or a run directory's latest checkpoint.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory; defaults to the checkpoint's.
        #[arg(long)]
        out: Option<PathBuf>,
        /// New total step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Edit a mask toward target attributes.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_enum, default_value = "latent")]
        mode: ModeArg,
        /// One bit per domain, e.g. `0,1,0,0,0,0`.
        #[arg(long)]
        target: String,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TRANSFORMS)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an RGB face for a mask.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_enum, default_value = "latent")]
        style: ModeArg,
        #[arg(long)]
        ref_image: Option<PathBuf>,
        #[arg(long)]
        ref_mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on its test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Provider table (TOML).
        #[arg(long)]
        providers: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TRANSFORMS)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Copy inputs instead of translating them.
        #[arg(long)]
        identity: bool,
        /// Also write the evaluated rasters here.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drive a synthesis model with a sequence of masks.
    Reenact {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of mask frames, taken in name order.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        style_image: Option<PathBuf>,
        #[arg(long)]
        style_mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn style_source<'a>(mode: ModeArg, image: &'a Option<PathBuf>, mask: &'a Option<PathBuf>) -> Result<StyleSource<'a>> {
    match (mode, image, mask) {
        (ModeArg::Latent, _, _) => Ok(StyleSource::Latent),
        (ModeArg::Reference, Some(image), Some(mask)) => Ok(StyleSource::Reference { image, mask }),
        (ModeArg::Reference, _, _) => Err(Error::Usage("reference style needs both an image and a mask".into())),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Format(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { stage, preset, out } => {
            let stage = match stage {
                StageArg::Manipulation => Stage::Manipulation,
                StageArg::Synthesis => Stage::Synthesis,
            };
            let preset = match preset {
                PresetArg::Paper => Preset::Paper,
                PresetArg::Toy => Preset::Toy,
            };
            write_or_print(out.as_deref(), &Config::preset(stage, preset).to_toml_string())
        }
        Command::Train { config, out } => {
            let cfg = Config::load(&config)?;
            let done = train(&cfg, &out)?;
            eprintln!("trained to step {}", done.step);
            Ok(())
        }
        Command::Resume { checkpoint, out, steps } => {
            let done = resume(&checkpoint, out.as_deref(), steps)?;
            eprintln!("trained to step {}", done.step);
            Ok(())
        }
        Command::Translate {
            checkpoint,
            mask,
            mode,
            target,
            reference,
            num,
            seed,
            out,
        } => {
            let mode = match mode {
                ModeArg::Latent => TranslateMode::Latent,
                ModeArg::Reference => TranslateMode::Reference,
            };
            let files = translate_file(&TranslateRequest {
                checkpoint: &checkpoint,
                mask: &mask,
                mode,
                target: &target,
                reference: reference.as_deref(),
                num,
                seed,
                out: &out,
            })?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Synthesize {
            checkpoint,
            mask,
            style,
            ref_image,
            ref_mask,
            seed,
            out,
        } => synthesize_file(&checkpoint, &mask, &style_source(style, &ref_image, &ref_mask)?, seed, &out),
        Command::Evaluate {
            checkpoint,
            providers,
            num,
            seed,
            identity,
            dump,
            out,
        } => {
            let providers = ProviderConfig::load(&providers)?;
            let report = evaluate_checkpoint(&EvaluateRequest {
                checkpoint: &checkpoint,
                providers: &providers,
                transforms: num,
                seed,
                identity,
                dump: dump.as_deref(),
            })?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            write_or_print(out.as_deref(), &String::from_utf8_lossy(&buf))
        }
        Command::Reenact {
            checkpoint,
            masks,
            style_image,
            style_mask,
            seed,
            out,
        } => {
            let mode = if style_image.is_some() || style_mask.is_some() {
                ModeArg::Reference
            } else {
                ModeArg::Latent
            };
            let files = reenact_dir(&checkpoint, &masks, &style_source(mode, &style_image, &style_mask)?, seed, &out)?;
            eprintln!("wrote {} frames", files.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
