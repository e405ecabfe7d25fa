use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use freqsplat::pipeline::{
    init_gaussians, parse_orbit, run_analyze_spectrum, run_eval, run_generate, run_render, Config,
    PipelineError,
};
use freqsplat::scene::ply;

/// Gaussian splatting reconstruction with frequency-filtered score distillation.
///
/// Any config key can be overridden with FREQSPLAT__<SECTION>__<KEY>, e.g.
/// FREQSPLAT__RUN__ITERATIONS=200.
#[derive(Debug, Parser)]
#[command(name = "freqsplat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Initialize, optimize and export a scene.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a Gaussian PLY along an orbit.
    Render {
        #[arg(long)]
        ply: PathBuf,
        /// `n_azimuth,elev1,elev2,...` in degrees.
        #[arg(long)]
        orbit: String,
        #[arg(long, default_value = "renders")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare predicted renders or PLY against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Amplitude spectra and cumulative energy profiles of an image folder.
    AnalyzeSpectrum {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated energy fractions; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write an initial Gaussian cloud from a point PLY or at random.
    Init {
        /// `random` or a PLY path.
        #[arg(long)]
        source: String,
        #[arg(long, default_value = "init.ply")]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn config(path: Option<&Path>) -> Result<Config, PipelineError> {
    match path {
        Some(p) => Config::load(p),
        None => Config::from_env(),
    }
}

fn run(cmd: Command) -> Result<serde_json::Value, PipelineError> {
    Ok(match cmd {
        Command::Generate { config: path } => json!(run_generate(&Config::load(&path)?)?),
        Command::Render {
            ply,
            orbit,
            out,
            config: path,
        } => {
            let mut cfg = config(path.as_deref())?;
            (cfg.orbit.n_azimuth, cfg.orbit.elevations) = parse_orbit(&orbit)?;
            let paths = run_render(&ply, &cfg.orbit, &cfg.views, &out)?;
            json!({ "views": paths.len(), "out": out })
        }
        Command::Eval {
            pred,
            gt,
            out,
            config: path,
        } => json!(run_eval(&pred, &gt, &out, &config(path.as_deref())?)?),
        Command::AnalyzeSpectrum {
            input,
            out,
            fractions,
            config: path,
        } => {
            let cfg = config(path.as_deref())?;
            let fractions = fractions.unwrap_or(cfg.frequency.analysis_fractions);
            if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
                return Err(PipelineError::Input("fractions must lie in [0, 1]".into()));
            }
            json!(run_analyze_spectrum(&input, &out, &fractions)?)
        }
        Command::Init {
            source,
            out,
            count,
            seed,
            config: path,
        } => {
            let mut cfg = config(path.as_deref())?;
            cfg.init.source = source;
            if let Some(n) = count {
                cfg.init.count = n;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.run.seed));
            let cloud = init_gaussians(&cfg.init, &mut rng)?;
            ply::write_cloud(&out, &cloud)?;
            json!({ "gaussians": cloud.len(), "out": out })
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = PipelineError::Config(
                e.render()
                    .to_string()
                    .lines()
                    .next()
                    .unwrap_or("")
                    .to_string(),
            );
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
