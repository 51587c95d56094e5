//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::detector::load_checkpoint;
use crate::emloop::{self, expectation, load_scene, EmConfig};
use crate::evalbench::{self, heatmap_image, Method, SceneData};
use crate::maximizer::{anneal_keypoints, write_mask_pgm};
use crate::raster::{write_pgm, Plane};
use crate::scenegen::{generate_dataset, Complexity, GenConfig, POSES_FILE};
use crate::voxelrep::visibility_stats;

#[derive(Debug, Parser)]
#[command(name = "keyrep", version, about = "Voxel-repeatability EM training for keypoint detectors")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize scene datasets.
    Gen(GenArgs),
    /// Run the EM training loop.
    Train(TrainArgs),
    /// Benchmark a checkpoint against a random-keypoint baseline.
    Eval(EvalArgs),
    /// Dump heatmaps, repeatability, pseudo labels and voxel statistics.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// TOML file with generation settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    /// Square image size in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub complexity: Option<Complexity>,
}

/// Flags shared by the commands that read an EM config.
#[derive(Debug, Args)]
pub struct EmArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use every dataset directory below this one as a scene.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Iteration whose keypoint budget to use (default: the checkpoint's).
    #[arg(long)]
    pub iteration: Option<usize>,
}

/// Parse and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("event=threads_ignored reason=\"{e}\"");
        }
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("event=failed error=\"{e:#}\"");
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "{} {}", record.level(), record.args()))
        .try_init();
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn print_config(kind: &str, text: &str) {
    println!("# resolved {kind} configuration\n{text}");
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => GenConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.scenes {
        cfg.scenes = n;
    }
    if let Some(n) = a.views {
        cfg.views = n;
    }
    if let Some(s) = a.size {
        cfg.trajectory.width = s;
        cfg.trajectory.height = s;
    }
    if let Some(c) = a.complexity {
        cfg.complexity = c;
    }
    let text = toml::to_string(&cfg)?;
    print_config("gen", &text);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("gen.toml"), &text)?;
    let dirs = generate_dataset(&a.out, &cfg)?;
    info!("event=gen_done scenes={} out={}", dirs.len(), a.out.display());
    Ok(())
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

/// Dataset directories directly below `root` (or `root` itself).
pub fn discover_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(POSES_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(POSES_FILE).is_file())
        .collect();
    dirs.sort();
    anyhow::ensure!(!dirs.is_empty(), "no dataset directories under {}", root.display());
    Ok(dirs)
}

fn em_config(a: &EmArgs) -> Result<EmConfig> {
    let mut cfg = match &a.config {
        Some(p) => EmConfig::from_toml(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => EmConfig::default(),
    };
    if let Some(p) = &a.config {
        // relative scene paths are relative to the config file
        let base = p.parent().unwrap_or(Path::new(""));
        for s in &mut cfg.scenes {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &a.data {
        cfg.scenes = discover_scenes(d)?;
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = em_config(&a.em)?;
    if let Some(n) = a.iterations {
        cfg.n_iterations = n;
    }
    if let Some(n) = a.epochs {
        cfg.train.epochs = n;
    }
    print_config("train", &cfg.to_toml());
    let state = emloop::run(&cfg, a.resume)?;
    info!("event=train_done iterations={} out={}", state.iteration, cfg.out_dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = em_config(&a.em)?;
    print_config("eval", &cfg.to_toml());
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let scenes: Vec<SceneData> = emloop::load_scenes(&cfg)?.into_iter().map(|s| s.data).collect();
    let ecfg = evalbench::EvalConfig {
        extent: cfg.extent,
        seed: cfg.seed,
        ..cfg.eval.clone()
    };
    let results = evalbench::evaluate(&scenes, &ckpt.params, &ecfg)?;
    evalbench::report(&results, &cfg.out_dir)?;
    for m in Method::ALL {
        let mma = |kind| results.mean_mma(kind, m).map(|v| v[0]);
        println!(
            "{m:?}: repeatability@{}px={:?} loc3d_m={:?} mma_illumination@1px={:?} mma_rotation@1px={:?}",
            ecfg.eps_px,
            results.mean_repeatability(m),
            results.mean_loc3d(m),
            mma("illumination"),
            mma("rotation"),
        );
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let cfg = em_config(&a.em)?;
    print_config("inspect", &cfg.to_toml());
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let it = a.iteration.unwrap_or(ckpt.iteration as usize);
    let l = anneal_keypoints(it, &cfg.schedule, cfg.period);
    cfg.check_paths()?;
    for dir in &cfg.scenes {
        let scene = load_scene(dir, cfg.extent)?;
        let e = expectation(&scene, &ckpt.params, cfg.min_views, &cfg.maximizer, l)?;
        let out = cfg.out_dir.join(&scene.data.name);
        fs::create_dir_all(&out)?;
        for (i, ((h, r), m)) in e.heatmaps.iter().zip(&e.repeatability).zip(&e.masks).enumerate() {
            write_pgm(&out.join(format!("heatmap_{i:05}.pgm")), &heatmap_image(h))?;
            let rep = Plane::from_fn(r.width(), r.height(), |x, y| r.value(x, y).unwrap_or(0.0));
            write_pgm(&out.join(format!("repeatability_{i:05}.pgm")), &heatmap_image(&rep))?;
            write_mask_pgm(&out.join(format!("pseudo_gt_{i:05}.pgm")), m)?;
        }
        let mut stats = String::from("min_views,fraction\n");
        for (k, f) in visibility_stats(&e.grid).iter().enumerate() {
            stats.push_str(&format!("{},{f}\n", k + 1));
        }
        fs::write(out.join("voxel_stats.csv"), stats)?;
        e.grid.write_dump(&out.join("voxels.txt"))?;
        info!(
            "event=inspect scene={} L={l} voxels={} out={}",
            scene.data.name,
            e.grid.occupied(),
            out.display()
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["keyrep"]), 1);
        assert_eq!(main_with_args(["keyrep", "train", "--bogus"]), 1);
        assert_eq!(main_with_args(["keyrep", "frobnicate"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(main_with_args(["keyrep", "--help"]), 0);
    }

    #[test]
    fn missing_checkpoint_is_runtime_failure() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("none.ckpt");
        assert_eq!(
            main_with_args(["keyrep", "eval", "--checkpoint", ck.to_str().unwrap()]),
            2
        );
    }
}
