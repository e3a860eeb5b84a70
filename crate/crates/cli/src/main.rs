use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nearbypatch_cli::commands::{self, EncoderSource};
use nearbypatch_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "nearbypatch", version, about = "Nearby-patch contrastive pretraining experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed, overriding the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to a subdirectory of the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EncoderArgs {
    /// Pretrained checkpoint to evaluate.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Evaluate an untrained encoder instead (`random-init`).
    #[arg(long, value_parser = ["random-init"])]
    baseline: Option<String>,
}

impl EncoderArgs {
    fn source(&self) -> EncoderSource {
        match &self.checkpoint {
            Some(p) => EncoderSource::Checkpoint(p.clone()),
            None => EncoderSource::RandomInit,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic slides, unlabeled and labeled manifests and patch files.
    GenerateCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive pretraining on the unlabeled set for the configured N.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; defaults to `<out_dir>/corpus`.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Linear evaluation of a frozen encoder at every configured label fraction.
    Lineval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// Classify the patch grid of a slide and render a color-coded map.
    RenderMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        encoder: EncoderArgs,
        /// Fold classifiers written by `lineval` (classifiers-<pct>.json).
        #[arg(long)]
        classifiers: PathBuf,
        /// Slide id, e.g. test-00.
        #[arg(long)]
        slide: String,
    },
    /// Pretrain and evaluate every (N, variant) cell of the ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn load(common: &Common) -> Result<(RunConfig, String), CliError> {
    let (cfg, raw) = RunConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok((cfg, raw))
}

fn out_dir(common: &Common, cfg: &RunConfig, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.out_dir.join(default))
}

fn corpus_dir(corpus: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    corpus.clone().unwrap_or_else(|| cfg.out_dir.join("corpus"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateCorpus { common } => {
            let (cfg, raw) = load(&common)?;
            let out = out_dir(&common, &cfg, "corpus");
            print!("{}", commands::generate_corpus(&cfg, &raw, &out)?);
            println!("corpus written to {}", out.display());
        }
        Command::Pretrain { common, corpus } => {
            let (cfg, raw) = load(&common)?;
            let default = format!("pretrain-n{}-{}", cfg.trainer.nearby, cfg.trainer.variant);
            let out = out_dir(&common, &cfg, &default);
            let result = commands::pretrain(&cfg, &raw, &corpus_dir(&corpus, &cfg), &out)?;
            let last = result.trace.last().map_or(f64::NAN, |r| r.loss);
            println!("{} steps, final loss {last:.5}", result.trace.len());
            println!("checkpoint {}", result.final_checkpoint.display());
        }
        Command::Lineval { common, corpus, encoder } => {
            let (cfg, raw) = load(&common)?;
            let out = out_dir(&common, &cfg, "lineval");
            commands::lineval(&cfg, &raw, &corpus_dir(&corpus, &cfg), &encoder.source(), &out)?;
            print_file(&out.join("report.txt"))?;
        }
        Command::RenderMap { common, corpus, encoder, classifiers, slide } => {
            let (cfg, _) = load(&common)?;
            let out = out_dir(&common, &cfg, "map");
            let m = commands::render_map(&cfg, &corpus_dir(&corpus, &cfg), &encoder.source(), &classifiers, &slide, &out)?;
            println!(
                "{}x{} tiles, pixel accuracy {:.2}%, tile accuracy {:.2}%",
                m.grid.0,
                m.grid.1,
                100.0 * m.pixel_accuracy,
                100.0 * m.tile_accuracy
            );
        }
        Command::Ablate { common, jobs } => {
            let (cfg, raw) = load(&common)?;
            let out = out_dir(&common, &cfg, "ablation");
            let rows = commands::ablate(&cfg, &raw, &out, jobs)?;
            print_file(&out.join("ablation.txt"))?;
            if rows.iter().any(|r| r.cells.is_none()) {
                eprintln!("some ablation cells failed; see the log above");
            }
        }
    }
    Ok(())
}

fn print_file(path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors count as config errors (exit 1), not clap's default 2.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
