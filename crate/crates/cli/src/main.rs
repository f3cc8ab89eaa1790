use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxtrack::pipeline;
use voxtrack::synth::Script;
use voxtrack::{Error, ErrorCategory, PipelineConfig};

/// Volumetric nuclei segmentation, tracking and evaluation on CTC directories.
#[derive(Debug, Parser)]
#[command(name = "voxtrack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment `tNNN.tif` frames into `maskNNN.tif`.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write probability maps, seeds, watershed, supervoxels and correlation tables.
        #[arg(long)]
        keep_intermediates: bool,
    },
    /// Track `maskNNN.tif` frames, writing relabeled masks and `res_track.txt`.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a result directory against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Result directory with `maskNNN.tif` and `res_track.txt`.
        #[arg(long)]
        input: PathBuf,
        /// Truth directory with `TRA/` and optionally `SEG/`.
        #[arg(long)]
        truth: PathBuf,
        /// Directory for `scores.txt` and `scores.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic CTC sequence from a script.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Script file (TOML).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(common: &Common) -> voxtrack::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn init_threads(common: &Common) -> voxtrack::Result<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Segment { common, .. }
        | Command::Track { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Synth { common, .. } => common,
    }
}

fn run(cmd: &Command) -> voxtrack::Result<()> {
    let c = common(cmd);
    init_threads(c)?;
    let cfg = load_config(c)?;
    match cmd {
        Command::Segment {
            input,
            output,
            keep_intermediates,
            ..
        } => {
            let masks = pipeline::run_segment(input, output, &cfg, *keep_intermediates)?;
            log::info!("wrote {} masks to {}", masks.len(), output.display());
        }
        Command::Track { input, output, .. } => {
            let lineage = pipeline::run_track(input, output, &cfg)?;
            log::info!("wrote {} tracks to {}", lineage.len(), output.display());
        }
        Command::Evaluate {
            input,
            truth,
            output,
            ..
        } => {
            let report = pipeline::evaluate(input, truth, &cfg)?;
            print!("{}", report.to_key_value());
            if let Some(dir) = output {
                pipeline::write_report(&report, dir)?;
                cfg.write_resolved(dir)?;
            }
        }
        Command::Synth { input, output, .. } => {
            let mut script = Script::load(input)?;
            if let Some(s) = c.seed {
                script.seed = s;
            }
            let seq = pipeline::run_synth(&script, output)?;
            log::info!(
                "wrote {} frames, {} tracks to {}",
                seq.truth.len(),
                seq.lineage.len(),
                output.display()
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Algorithm => 4,
    }
}

/// Error messages already embed their causes.
fn report_error(e: &Error, config: Option<&Path>) {
    eprintln!("error: {e}");
    if let Some(p) = config {
        eprintln!("  (config: {})", p.display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let hint = match e.category() {
                ErrorCategory::Config => common(&cli.command).config.as_deref(),
                _ => None,
            };
            report_error(&e, hint);
            ExitCode::from(exit_code(&e))
        }
    }
}
