//! The EM loop: run the detector on every view, pool its scores in a voxel
//! grid, render the pooled repeatability back, pick pseudo labels, train,
//! and repeat. Each completed iteration leaves `iter_%03d.ckpt` and one
//! more row in `metrics.csv` under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camgeom::{CameraView, GridSpec};
use crate::detector::{
    forward, load_checkpoint, save_checkpoint, train, AdamState, Checkpoint, DetectorParams, TrainConfig,
};
use crate::error::{Error, Result};
use crate::evalbench::{evaluate_repeatability, EvalConfig, Method, SceneData};
use crate::maximizer::{anneal_keypoints, build_pseudo_gt, MaximizerConfig, PseudoLabelMask};
use crate::raster::Heatmap;
use crate::scenegen::{load_dataset, load_scene_record};
use crate::seeding;
use crate::voxelrep::{accumulate, render_repeatability, RepeatabilityMap, VoxelGrid};

pub const METRICS_FILE: &str = "metrics.csv";
pub const GRID_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Dataset directories, one scene each.
    pub scenes: Vec<PathBuf>,
    pub extent: f64,
    pub min_views: u32,
    pub n_iterations: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Keypoint budget per image by iteration block; overrides
    /// `maximizer.max_keypoints`.
    pub schedule: Vec<usize>,
    pub period: usize,
    /// Continue from the previous iteration's weights instead of
    /// re-initializing every iteration.
    pub warm_start: bool,
    pub maximizer: MaximizerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            scenes: Vec::new(),
            extent: GridSpec::DEFAULT_EXTENT,
            min_views: 3,
            n_iterations: 3,
            seed: 0,
            out_dir: PathBuf::from("run"),
            schedule: vec![107, 91, 64],
            period: 3,
            warm_start: true,
            maximizer: MaximizerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks values only; see [`EmConfig::check_paths`] for the inputs.
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations < 1 {
            return Err(Error::Config("n_iterations must be at least 1".into()));
        }
        if self.schedule.is_empty() || self.schedule.contains(&0) || self.period < 1 {
            return Err(Error::Config("schedule must be non-empty and positive, period ≥ 1".into()));
        }
        if !(self.extent > 0.0) || self.min_views < 1 {
            return Err(Error::Config("extent must be positive and min_views ≥ 1".into()));
        }
        self.maximizer.validate()?;
        self.train.validate()
    }

    pub fn check_paths(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::Config("no scenes configured".into()));
        }
        for s in &self.scenes {
            if !s.is_dir() {
                return Err(Error::Config(format!("scene directory {} does not exist", s.display())));
            }
        }
        Ok(())
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub mean_pgt_repeatability: f64,
    pub mean_pgt_count: f64,
    pub final_train_loss: f64,
    pub eval_repeatability_3px: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmState {
    /// Completed iterations.
    pub iteration: usize,
    pub params: DetectorParams,
    pub adam: AdamState,
    pub metrics: Vec<MetricsRow>,
}

/// A loaded scene with its voxel grid placement.
pub struct Scene {
    pub data: SceneData,
    pub grid: GridSpec,
}

/// Grid over the bounding box of all depth-backprojected points, padded by
/// [`GRID_MARGIN`] of the box size on every side.
pub fn scene_grid(views: &[CameraView], extent: f64) -> Result<GridSpec> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in views {
        for y in 0..v.height() {
            for x in 0..v.width() {
                if let Some(p) = v.surface_point(x, y) {
                    lo = lo.inf(&p);
                    hi = hi.sup(&p);
                }
            }
        }
    }
    if !lo.x.is_finite() {
        return Err(Error::Precondition("no view has any valid depth".into()));
    }
    GridSpec::covering(lo, hi, extent, GRID_MARGIN)
}

pub fn load_scene(dir: &Path, extent: f64) -> Result<Scene> {
    let views = load_dataset(dir)?;
    let record = load_scene_record(dir)?;
    let grid = scene_grid(&views, extent)?;
    let name = dir
        .file_name()
        .map_or_else(|| "scene".to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Scene {
        data: SceneData { name, views, record },
        grid,
    })
}

pub fn load_scenes(cfg: &EmConfig) -> Result<Vec<Scene>> {
    cfg.check_paths()?;
    cfg.scenes.iter().map(|d| load_scene(d, cfg.extent)).collect()
}

/// Fresh state from the seeded initialization.
pub fn init(cfg: &EmConfig) -> Result<EmState> {
    cfg.validate()?;
    let params = DetectorParams::init(cfg.seed);
    let adam = AdamState::new(params.weights.len());
    Ok(EmState {
        iteration: 0,
        params,
        adam,
        metrics: Vec::new(),
    })
}

/// Everything the expectation step produces for one scene.
pub struct Expectation {
    pub heatmaps: Vec<Heatmap>,
    pub grid: VoxelGrid,
    pub repeatability: Vec<RepeatabilityMap>,
    pub masks: Vec<PseudoLabelMask>,
}

/// Inference, voxel pooling, repeatability rendering and pseudo labels
/// with a budget of `l` keypoints per view.
pub fn expectation(
    scene: &Scene,
    params: &DetectorParams,
    min_views: u32,
    maximizer: &MaximizerConfig,
    l: usize,
) -> Result<Expectation> {
    let views = &scene.data.views;
    let heatmaps: Vec<Heatmap> = views
        .par_iter()
        .map(|v| forward(&v.image, params))
        .collect::<Result<_>>()
        .map_err(Error::stage("inference"))?;
    let grid = accumulate(views, &heatmaps, &scene.grid).map_err(Error::stage("accumulate"))?;
    let repeatability: Vec<RepeatabilityMap> = views
        .par_iter()
        .map(|v| render_repeatability(&grid, v, min_views))
        .collect();
    let mcfg = MaximizerConfig {
        max_keypoints: l,
        ..maximizer.clone()
    };
    let masks = repeatability.par_iter().map(|r| build_pseudo_gt(r, &mcfg)).collect();
    Ok(Expectation {
        heatmaps,
        grid,
        repeatability,
        masks,
    })
}

/// One full EM iteration; on error the state is left untouched.
pub fn em_iteration(state: &EmState, scenes: &[Scene], cfg: &EmConfig) -> Result<EmState> {
    let it = state.iteration;
    let l = anneal_keypoints(it, &cfg.schedule, cfg.period);
    let mut dataset = Vec::new();
    let (mut score_sum, mut kp_total) = (0.0, 0usize);
    for scene in scenes {
        let e = expectation(scene, &state.params, cfg.min_views, &cfg.maximizer, l)?;
        for (view, mask) in scene.data.views.iter().zip(e.masks) {
            score_sum += mask.keypoints.iter().map(|k| k.score).sum::<f64>();
            kp_total += mask.count();
            dataset.push((view.image.clone(), mask));
        }
        info!(
            "event=expectation iteration={} scene={} voxels={} L={l}",
            it + 1,
            scene.data.name,
            e.grid.occupied()
        );
    }
    let n_images = dataset.len();
    let (mut params, mut adam) = if cfg.warm_start || it == 0 {
        (state.params.clone(), state.adam.clone())
    } else {
        let p = DetectorParams::init(seeding::derive(cfg.seed, "reinit", it as u64));
        let a = AdamState::new(p.weights.len());
        (p, a)
    };
    let report = train(&dataset, &mut params, &mut adam, &cfg.train, seeding::derive(cfg.seed, "train", it as u64))
        .map_err(Error::stage("train"))?;
    Checkpoint::quantize(&mut params, &mut adam);

    let eval_data: Vec<SceneData> = scenes
        .iter()
        .map(|s| SceneData {
            name: s.data.name.clone(),
            views: s.data.views.clone(),
            record: None,
        })
        .collect();
    let eval_cfg = EvalConfig {
        extent: cfg.extent,
        seed: cfg.seed,
        ..cfg.eval.clone()
    };
    let eval = evaluate_repeatability(&eval_data, &params, &eval_cfg).map_err(Error::stage("eval"))?;

    let row = MetricsRow {
        iteration: it + 1,
        l,
        mean_pgt_repeatability: if kp_total > 0 { score_sum / kp_total as f64 } else { 0.0 },
        mean_pgt_count: kp_total as f64 / n_images.max(1) as f64,
        final_train_loss: report.final_loss().unwrap_or(f64::NAN),
        eval_repeatability_3px: eval.mean_repeatability(Method::Detector).unwrap_or(0.0),
    };
    info!(
        "event=iteration_done iteration={} L={} mean_pgt_repeatability={} mean_pgt_count={} final_train_loss={} eval_repeatability_3px={} random_repeatability_3px={}",
        row.iteration,
        row.l,
        row.mean_pgt_repeatability,
        row.mean_pgt_count,
        row.final_train_loss,
        row.eval_repeatability_3px,
        eval.mean_repeatability(Method::Random).unwrap_or(0.0)
    );
    let mut metrics = state.metrics.clone();
    metrics.push(row);
    Ok(EmState {
        iteration: it + 1,
        params,
        adam,
        metrics,
    })
}

pub fn checkpoint_path(out_dir: &Path, iteration: usize) -> PathBuf {
    out_dir.join(format!("iter_{iteration:03}.ckpt"))
}

/// Highest-numbered `iter_NNN.ckpt` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(num) = name.strip_prefix("iter_").and_then(|n| n.strip_suffix(".ckpt")) else {
            continue;
        };
        if let Ok(k) = num.parse::<usize>() {
            if best.as_ref().is_none_or(|(b, _)| k > *b) {
                best = Some((k, path));
            }
        }
    }
    Ok(best)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| Error::malformed(&tmp, e.to_string()))?;
        if rows.is_empty() {
            w.write_record([
                "iteration",
                "L",
                "mean_pgt_repeatability",
                "mean_pgt_count",
                "final_train_loss",
                "eval_repeatability_3px",
            ])
            .map_err(|e| Error::malformed(&tmp, e.to_string()))?;
        }
        for r in rows {
            w.serialize(r).map_err(|e| Error::malformed(&tmp, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::malformed(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::malformed(path, e.to_string())))
        .collect()
}

/// State recovered from the newest checkpoint in `cfg.out_dir`, with the
/// metrics rows it had written.
pub fn resume_state(cfg: &EmConfig) -> Result<Option<EmState>> {
    let Some((k, path)) = latest_checkpoint(&cfg.out_dir)? else {
        return Ok(None);
    };
    let ckpt = load_checkpoint(&path)?;
    if ckpt.iteration as usize != k {
        return Err(Error::malformed(&path, format!("holds iteration {}", ckpt.iteration)));
    }
    let mut metrics = read_metrics(&cfg.out_dir.join(METRICS_FILE))?;
    if metrics.len() < k {
        return Err(Error::Precondition(format!(
            "metrics.csv has {} rows but checkpoint is at iteration {k}",
            metrics.len()
        )));
    }
    metrics.truncate(k);
    Ok(Some(EmState {
        iteration: k,
        params: ckpt.params,
        adam: ckpt.adam,
        metrics,
    }))
}

/// Initialize (or resume) and iterate until `n_iterations` are complete,
/// checkpointing after every iteration.
pub fn run(cfg: &EmConfig, resume: bool) -> Result<EmState> {
    cfg.validate()?;
    let scenes = load_scenes(cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut state = match resume.then(|| resume_state(cfg)).transpose()?.flatten() {
        Some(s) => {
            info!("event=resume iteration={}", s.iteration);
            s
        }
        None => init(cfg)?,
    };
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    if state.iteration == 0 {
        write_metrics(&metrics_path, &[])?;
    }
    while state.iteration < cfg.n_iterations {
        state = em_iteration(&state, &scenes, cfg)?;
        let ckpt = Checkpoint {
            params: state.params.clone(),
            adam: state.adam.clone(),
            iteration: state.iteration as u32,
        };
        save_checkpoint(&checkpoint_path(&cfg.out_dir, state.iteration), &ckpt)?;
        write_metrics(&metrics_path, &state.metrics)?;
    }
    Ok(state)
}
