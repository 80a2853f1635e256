//! The `erm` command line. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.

use crate::config::{ExperimentConfig, PipelineKind};
use crate::gradcheck;
use crate::image::{self, ImageFormat};
use crate::train::{self, CameraRef};
use clap::{Args, Parser, Subcommand};
use erm_core::par;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "erm", version, about = "Train, render and check evolutive rendering models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a volume pipeline on a synthetic scene.
    TrainVolume(RunArgs),
    /// Fit Gaussian splats to a target image.
    TrainSplat(RunArgs),
    /// Render a camera (`test:K` or `train:K`) from a checkpoint.
    Render {
        checkpoint: PathBuf,
        camera: String,
        /// Output image; `.png` for PNG, anything else for PPM.
        out: PathBuf,
    },
    /// Run the finite-difference suites and print a pass/fail table.
    Gradcheck {
        /// Only suites whose name starts with this.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time a run of the given config without writing outputs.
    Bench(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let mut cfg = ExperimentConfig::parse(&text).map_err(|e| format!("{}: {e}", args.config.display()))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = &args.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    if let Some(n) = args.iters {
        cfg.iters = n;
    }
    cfg.validate().map_err(|e| format!("{}: {e}", args.config.display()))?;
    Ok(cfg)
}

fn train_cmd(args: &RunArgs, pipeline: PipelineKind, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cfg = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    if cfg.pipeline != pipeline {
        let _ = writeln!(err, "error: config describes a {:?} pipeline", cfg.pipeline);
        return EXIT_USAGE;
    }
    let dir = cfg.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(&cfg.id));
    let result = train::train(&cfg).and_then(|o| train::write_outputs(&dir, &cfg, &o).map(|_| o));
    match result {
        Ok(o) => {
            let r = o.final_row();
            let _ = writeln!(
                out,
                "{}: iter {} loss {:.6e} psnr {:.3} dB count {} -> {}",
                cfg.id,
                r.iter,
                r.loss,
                r.psnr,
                r.count,
                dir.display()
            );
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn bench_cmd(args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut cfg = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    cfg.record_time = true;
    let start = Instant::now();
    match train::train(&cfg) {
        Ok(o) => {
            let secs = start.elapsed().as_secs_f64();
            let _ = writeln!(
                out,
                "{}: {} iterations in {:.3} s ({:.2} it/s) on {} worker(s), final psnr {:.3} dB",
                cfg.id,
                cfg.iters,
                secs,
                cfg.iters as f64 / secs.max(1e-9),
                par::workers(),
                o.final_row().psnr
            );
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn render_cmd(checkpoint: &Path, camera: &str, dest: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cam: CameraRef = match camera.parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let result = train::render_checkpoint(checkpoint, cam)
        .and_then(|img| image::write_image(&img, dest, ImageFormat::from_path(dest)).map_err(Into::into));
    match result {
        Ok(()) => {
            let _ = writeln!(out, "wrote {}", dest.display());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn gradcheck_cmd(module: Option<&str>, seed: u64, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let names = gradcheck::select_suites(module);
    if names.is_empty() {
        let _ = writeln!(err, "error: no suite matches `{}`; suites: {}", module.unwrap_or(""), gradcheck::SUITES.join(", "));
        return EXIT_USAGE;
    }
    let results: Vec<_> = names
        .iter()
        .map(|n| gradcheck::run_suite(n, seed).expect("listed suite").map_err(|e| (n.to_string(), e)))
        .collect();
    let _ = write!(out, "{}", gradcheck::table(&results));
    if results.iter().all(|r| r.as_ref().is_ok_and(|s| s.passed())) {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    }
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match &cli.command {
        Command::TrainVolume(a) => train_cmd(a, PipelineKind::Volume, out, err),
        Command::TrainSplat(a) => train_cmd(a, PipelineKind::Splat, out, err),
        Command::Render {
            checkpoint,
            camera,
            out: dest,
        } => render_cmd(checkpoint, camera, dest, out, err),
        Command::Gradcheck { module, seed } => gradcheck_cmd(module.as_deref(), *seed, out, err),
        Command::Bench(a) => bench_cmd(a, out, err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("erm").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        let (code, _, err) = run_args(&["frobnicate"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"));
        assert_eq!(run_args(&["train-volume", "/nonexistent/missing.cfg"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["gradcheck", "--module", "nope"]).0, EXIT_USAGE);
        assert_eq!(run_args(&[]).0, EXIT_USAGE);
    }

    #[test]
    fn gradcheck_single_module() {
        let (code, out, _) = run_args(&["gradcheck", "--module", "bilinear"]);
        assert_eq!(code, EXIT_OK, "{out}");
        assert!(out.contains("bilinear") && out.contains("pass"));
    }
}
