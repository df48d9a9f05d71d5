//! Continual-learning experiment harness: task streams, the four training
//! strategies, per-step evaluation into R matrices and a synthetic stream
//! generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{
    read_feature_file, write_feature_file, FeatureFile, FeatureGrid, ImageGeometry, Label, StreamManifest, TaskFiles,
    VectorSet,
};
use crate::memory::{build_single_bank, task_seed, MemoryBank, MemoryBankSet};
use crate::metrics::{self, MemoryReport, RMatrix, ScoreMap};
use crate::scoring::{route_and_score, score_with_bank, AnomalyResult, ScoringParams};

/// BMAD categories in stream order.
pub const BMAD_CATEGORIES: [&str; 6] = [
    "Brain_AD",
    "Liver_AD",
    "Retina_RESC_AD",
    "Chest_AD",
    "Histopathology_AD",
    "Retina_OCT2017_AD",
];

pub const DEFAULT_MAX_TRAIN_SAMPLES: usize = 2000;

pub const METRIC_IMAGE_AUROC: &str = "image_auroc";
pub const METRIC_IMAGE_F1: &str = "image_f1";
pub const METRIC_PIXEL_AUROC: &str = "pixel_auroc";
pub const METRIC_PIXEL_F1: &str = "pixel_f1";
pub const METRIC_PIXEL_PR: &str = "pixel_pr";
pub const METRIC_PIXEL_AUPRO: &str = "pixel_aupro";
pub const METRIC_ROUTING: &str = "routing_accuracy";

pub const METRICS: [&str; 7] = [
    METRIC_IMAGE_AUROC,
    METRIC_IMAGE_F1,
    METRIC_PIXEL_AUROC,
    METRIC_PIXEL_F1,
    METRIC_PIXEL_PR,
    METRIC_PIXEL_AUPRO,
    METRIC_ROUTING,
];

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub train: Vec<FeatureGrid>,
    pub test: Vec<FeatureGrid>,
}

impl Task {
    /// Pixel evaluation needs at least one anomalous test grid and a mask on every one of them.
    pub fn has_pixel_labels(&self) -> bool {
        let mut anomalous = self.test.iter().filter(|g| g.label.is_anomalous()).peekable();
        anomalous.peek().is_some() && anomalous.all(|g| g.mask.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub geometry: ImageGeometry,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn new(geometry: ImageGeometry, tasks: Vec<Task>) -> Result<Self> {
        let first = tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.test))
            .next()
            .ok_or(Error::Empty("task stream"))?;
        let (grid_h, grid_w, dim) = (first.grid_h, first.grid_w, first.dim());
        let mut names = HashSet::new();
        for task in &tasks {
            if !names.insert(task.name.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate task name `{}`", task.name)));
            }
            if task.train.is_empty() {
                return Err(Error::Empty("task training set"));
            }
            if let Some(bad) = task.train.iter().find(|g| g.label.is_anomalous()) {
                return Err(Error::LabelLeakage { task: task.name.clone(), image_id: bad.image_id });
            }
            // reuses the file-level shape checks
            FeatureFile::new(geometry, grid_h, grid_w, dim, task.train.clone())?;
            FeatureFile::new(geometry, grid_h, grid_w, dim, task.test.clone())?;
        }
        Ok(Self { geometry, grid_h, grid_w, dim, tasks })
    }

    /// Loads a stream from a JSON manifest; list order is stream order.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = StreamManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut geometry = None;
        let mut tasks = Vec::with_capacity(manifest.tasks.len());
        for entry in &manifest.tasks {
            tasks.push(load_task(root, entry, &mut geometry)?);
        }
        Self::new(geometry.ok_or(Error::Empty("task stream"))?, tasks)
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    pub fn pixel_tasks(&self) -> Vec<usize> {
        self.tasks.iter().enumerate().filter(|(_, t)| t.has_pixel_labels()).map(|(i, _)| i).collect()
    }
}

fn load_task(root: &Path, entry: &TaskFiles, geometry: &mut Option<ImageGeometry>) -> Result<Task> {
    let mut read = |paths: &[PathBuf]| -> Result<Vec<FeatureGrid>> {
        let mut grids = Vec::new();
        for p in paths {
            let path = root.join(p);
            if !path.is_file() {
                return Err(Error::MissingCategory(format!("{} (file {} not found)", entry.name, path.display())));
            }
            let file = read_feature_file(&path)?;
            match geometry {
                Some(g) if *g != file.geometry => {
                    return Err(Error::Shape(format!("{} has a different image geometry", path.display())))
                }
                _ => *geometry = Some(file.geometry),
            }
            grids.extend(file.grids);
        }
        Ok(grids)
    };
    let train = read(&entry.train)?;
    let test = read(&entry.test)?;
    Ok(Task { name: entry.name.clone(), train, test })
}

/// Reads a BMAD-style layout: the manifest (paths relative to `root_dir`)
/// must name every category in [`BMAD_CATEGORIES`]; the stream is returned in
/// that fixed order with each training set cut to `max_train` grids.
pub fn ingest_bmad_layout(root_dir: impl AsRef<Path>, manifest: &StreamManifest, max_train: usize) -> Result<TaskStream> {
    let root = root_dir.as_ref();
    if let Some(unknown) = manifest.tasks.iter().find(|t| !BMAD_CATEGORIES.contains(&t.name.as_str())) {
        return Err(Error::InvalidParameter(format!("unknown category `{}`", unknown.name)));
    }
    let mut geometry = None;
    let mut tasks = Vec::with_capacity(BMAD_CATEGORIES.len());
    for name in BMAD_CATEGORIES {
        let entry = manifest
            .tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MissingCategory(name.to_string()))?;
        let mut task = load_task(root, entry, &mut geometry)?;
        if let Some(bad) = task.train.iter().find(|g| g.label.is_anomalous()) {
            return Err(Error::LabelLeakage { task: task.name, image_id: bad.image_id });
        }
        task.train.truncate(max_train);
        tasks.push(task);
    }
    TaskStream::new(geometry.expect("six categories were read"), tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MultiModel,
    JointTrain,
    FineTuning,
    PatchCoreCl,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::MultiModel, Strategy::JointTrain, Strategy::FineTuning, Strategy::PatchCoreCl];

    /// Short name used on the command line and for directories.
    pub fn slug(self) -> &'static str {
        match self {
            Strategy::MultiModel => "multi",
            Strategy::JointTrain => "joint",
            Strategy::FineTuning => "finetune",
            Strategy::PatchCoreCl => "cl",
        }
    }

    pub fn is_continual(self) -> bool {
        matches!(self, Strategy::FineTuning | Strategy::PatchCoreCl)
    }

    /// Column label, e.g. `PatchCoreCL-30k`.
    pub fn label(self, memory_size: usize) -> String {
        match self {
            Strategy::MultiModel => "Multi-Model".into(),
            Strategy::JointTrain => "Joint-Train".into(),
            Strategy::FineTuning => "Fine-Tuning".into(),
            Strategy::PatchCoreCl if memory_size.is_multiple_of(1000) => format!("PatchCoreCL-{}k", memory_size / 1000),
            Strategy::PatchCoreCl => format!("PatchCoreCL-{memory_size}"),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Strategy::MultiModel),
            "joint" => Ok(Strategy::JointTrain),
            "finetune" => Ok(Strategy::FineTuning),
            "cl" => Ok(Strategy::PatchCoreCl),
            other => Err(Error::InvalidParameter(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub memory_size: usize,
    pub seed: u64,
    pub scoring: ScoringParams,
    pub max_train_samples_per_task: usize,
    pub fpr_limit: f64,
    pub backbone_params: u64,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy, memory_size: usize, seed: u64) -> Self {
        Self {
            strategy,
            memory_size,
            seed,
            scoring: ScoringParams::default(),
            max_train_samples_per_task: DEFAULT_MAX_TRAIN_SAMPLES,
            fpr_limit: metrics::DEFAULT_FPR_LIMIT,
            backbone_params: metrics::WIDE_RESNET50_PARAMS,
        }
    }

    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if self.memory_size < num_tasks.max(1) {
            return Err(Error::InvalidParameter(format!(
                "memory size {} is smaller than the {num_tasks} tasks of the stream (per-task quota would be 0)",
                self.memory_size
            )));
        }
        if self.max_train_samples_per_task == 0 {
            return Err(Error::InvalidParameter("max train samples per task must be positive".into()));
        }
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(Error::InvalidParameter(format!("fpr limit {} not in (0, 1]", self.fpr_limit)));
        }
        self.scoring.validate()
    }
}

/// Per-task evaluation at one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub image_auroc: f64,
    pub image_f1: f64,
    pub pixel: Option<PixelEvaluation>,
    /// Fraction of test images routed to this task's bank (routed inference only).
    pub routing_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelEvaluation {
    pub auroc: f64,
    pub f1: f64,
    pub pr: f64,
    pub aupro: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub config: StrategyConfig,
    pub task_names: Vec<String>,
    pub pixel_tasks: Vec<usize>,
    /// Keyed by metric name (see [`METRICS`]).
    pub r: BTreeMap<String, RMatrix>,
    pub memory: MemoryReport,
    pub banks: MemoryBankSet,
}

impl RunOutcome {
    pub fn matrix(&self, metric: &str) -> &RMatrix {
        &self.r[metric]
    }
}

enum Model<'a> {
    Single(&'a MemoryBank),
    Routed(&'a MemoryBankSet),
}

fn evaluate(task: &Task, task_index: usize, model: Model<'_>, stream: &TaskStream, config: &StrategyConfig) -> Result<TaskEvaluation> {
    let results: Vec<AnomalyResult> = task
        .test
        .par_iter()
        .map(|g| match model {
            Model::Single(bank) => score_with_bank(g, bank, stream.geometry, &config.scoring),
            Model::Routed(set) => route_and_score(g, set, stream.geometry, &config.scoring),
        })
        .collect::<Result<_>>()?;

    let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    let labels: Vec<bool> = task.test.iter().map(|g| g.label.is_anomalous()).collect();
    let image_auroc = metrics::auroc(&scores, &labels)?;
    let (image_f1, _) = metrics::best_f1(&scores, &labels)?;

    let routing_accuracy = match model {
        Model::Routed(_) => {
            let hits = results.iter().filter(|r| r.routed_task == task_index).count();
            Some(hits as f64 / results.len() as f64)
        }
        Model::Single(_) => None,
    };

    let pixel = if task.has_pixel_labels() {
        Some(evaluate_pixels(task, &results, stream.geometry, config.fpr_limit)?)
    } else {
        None
    };
    Ok(TaskEvaluation { image_auroc, image_f1, pixel, routing_accuracy })
}

fn evaluate_pixels(task: &Task, results: &[AnomalyResult], geometry: ImageGeometry, fpr_limit: f64) -> Result<PixelEvaluation> {
    let zeros = vec![0u8; geometry.pixels()];
    let masks: Vec<&[u8]> = task.test.iter().map(|g| g.mask.as_deref().unwrap_or(&zeros)).collect();
    let mut scores = Vec::with_capacity(results.len() * geometry.pixels());
    let mut labels = Vec::with_capacity(scores.capacity());
    for (r, mask) in results.iter().zip(&masks) {
        scores.extend(r.heatmap.values.iter().map(|&v| v as f64));
        labels.extend(mask.iter().map(|&m| m != 0));
    }
    let maps: Vec<ScoreMap<'_>> = results
        .iter()
        .zip(&masks)
        .map(|(r, mask)| ScoreMap { height: geometry.img_h, width: geometry.img_w, scores: &r.heatmap.values, mask })
        .collect();
    Ok(PixelEvaluation {
        auroc: metrics::auroc(&scores, &labels)?,
        f1: metrics::best_f1(&scores, &labels)?.0,
        pr: metrics::average_precision(&scores, &labels)?,
        aupro: metrics::aupro(&maps, fpr_limit)?,
    })
}

fn pooled_patches(task: &Task, dim: usize, max_train: usize) -> Result<VectorSet> {
    let mut pool = VectorSet::empty(dim)?;
    for g in task.train.iter().take(max_train) {
        pool.extend(&g.patches)?;
    }
    Ok(pool)
}

struct Recorder {
    r: BTreeMap<String, RMatrix>,
}

impl Recorder {
    fn new(tasks: usize) -> Self {
        Self { r: METRICS.iter().map(|m| (m.to_string(), RMatrix::new(*m, tasks))).collect() }
    }

    fn record(&mut self, k: usize, t: usize, e: &TaskEvaluation) {
        let mut put = |m: &str, v: f64| self.r.get_mut(m).expect("known metric").set(k, t, v);
        put(METRIC_IMAGE_AUROC, e.image_auroc);
        put(METRIC_IMAGE_F1, e.image_f1);
        if let Some(p) = e.pixel {
            put(METRIC_PIXEL_AUROC, p.auroc);
            put(METRIC_PIXEL_F1, p.f1);
            put(METRIC_PIXEL_PR, p.pr);
            put(METRIC_PIXEL_AUPRO, p.aupro);
        }
        if let Some(acc) = e.routing_accuracy {
            put(METRIC_ROUTING, acc);
        }
    }
}

/// Trains `config.strategy` over the stream one task at a time and, after
/// each step `k`, evaluates every task `t <= k` into `R[k][t]`.
pub fn run_stream(stream: &TaskStream, config: &StrategyConfig) -> Result<RunOutcome> {
    let n = stream.tasks.len();
    if n == 0 {
        return Err(Error::Empty("task stream"));
    }
    config.validate(n)?;
    let max_train = config.max_train_samples_per_task;
    let dim = stream.dim;
    let mut rec = Recorder::new(n);

    let banks = match config.strategy {
        Strategy::MultiModel => {
            let mut banks = Vec::with_capacity(n);
            for (k, task) in stream.tasks.iter().enumerate() {
                let patches = pooled_patches(task, dim, max_train)?;
                let bank = build_single_bank(k, &task.name, &patches, config.memory_size, task_seed(config.seed, k))?;
                // each task keeps its own model, so its column never changes
                let e = evaluate(task, k, Model::Single(&bank), stream, config)?;
                for row in k..n {
                    rec.record(row, k, &e);
                }
                banks.push(bank);
            }
            MemoryBankSet::from_banks(config.memory_size * n, dim, banks)?
        }
        Strategy::JointTrain => {
            let mut pool = VectorSet::empty(dim)?;
            for task in &stream.tasks {
                pool.extend(&pooled_patches(task, dim, max_train)?)?;
            }
            let bank = build_single_bank(0, "joint", &pool, config.memory_size, task_seed(config.seed, 0))?;
            for (t, task) in stream.tasks.iter().enumerate() {
                let e = evaluate(task, t, Model::Single(&bank), stream, config)?;
                for row in t..n {
                    rec.record(row, t, &e);
                }
            }
            MemoryBankSet::from_banks(config.memory_size, dim, vec![bank])?
        }
        Strategy::FineTuning => {
            let mut last = None;
            for (k, task) in stream.tasks.iter().enumerate() {
                let patches = pooled_patches(task, dim, max_train)?;
                let bank = build_single_bank(k, &task.name, &patches, config.memory_size, task_seed(config.seed, k))?;
                for (t, seen) in stream.tasks.iter().enumerate().take(k + 1) {
                    let e = evaluate(seen, t, Model::Single(&bank), stream, config)?;
                    rec.record(k, t, &e);
                }
                last = Some(bank);
            }
            MemoryBankSet::from_banks(config.memory_size, dim, vec![last.expect("stream is non-empty")])?
        }
        Strategy::PatchCoreCl => {
            let mut set = MemoryBankSet::new(config.memory_size, dim)?;
            for (k, task) in stream.tasks.iter().enumerate() {
                let patches = pooled_patches(task, dim, max_train)?;
                set.continual_update(&task.name, &patches, k, config.seed)?;
                debug_assert!(set.total_vectors() <= config.memory_size);
                for (t, seen) in stream.tasks.iter().enumerate().take(k + 1) {
                    let e = evaluate(seen, t, Model::Routed(&set), stream, config)?;
                    rec.record(k, t, &e);
                }
            }
            set
        }
    };

    let memory = metrics::memory_report_for(&banks, config.backbone_params);
    Ok(RunOutcome {
        config: config.clone(),
        task_names: stream.task_names(),
        pixel_tasks: stream.pixel_tasks(),
        r: rec.r,
        memory,
        banks,
    })
}

/// Parameters of the synthetic desk-scale stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_tasks: usize,
    pub train_per_task: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub geometry: ImageGeometry,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// Distance between any two task cluster centers.
    pub separation: f64,
    /// Length of the offset applied to the anomalous block.
    pub anomaly_shift: f64,
    /// Per-component std-dev of normal patches around their task center.
    pub spread: f64,
    /// The first `masked_tasks` tasks carry pixel ground truth.
    pub masked_tasks: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tasks: 3,
            train_per_task: 10,
            test_normal: 10,
            test_anomalous: 10,
            geometry: ImageGeometry { img_h: 32, img_w: 32 },
            grid_h: 8,
            grid_w: 8,
            dim: 16,
            separation: 400.0,
            anomaly_shift: 12.0,
            spread: 1.0,
            masked_tasks: 3,
            seed: 42,
        }
    }
}

/// Task names: the BMAD categories while they last, then `Task_<i>`.
pub fn synthetic_task_name(i: usize) -> String {
    BMAD_CATEGORIES.get(i).map_or_else(|| format!("Task_{i}"), |s| s.to_string())
}

/// Generates a stream where task `t`'s normal patches are drawn from
/// `N(c_t, spread² I)` with centers on scaled coordinate axes (pairwise
/// distance `separation`). Anomalous test grids get a contiguous block of
/// patches offset by `anomaly_shift` along a task-specific direction that is
/// orthogonal to every center, with the block's pixel footprint as mask.
pub fn generate_synthetic_stream(config: &SynthConfig) -> Result<TaskStream> {
    let c = config;
    if !(c.separation > 0.0 && c.separation.is_finite()) {
        return Err(Error::InvalidParameter(format!("separation must be > 0, got {}", c.separation)));
    }
    if !(c.anomaly_shift >= 0.0 && c.spread >= 0.0 && c.anomaly_shift.is_finite() && c.spread.is_finite()) {
        return Err(Error::InvalidParameter("anomaly shift and spread must be finite and >= 0".into()));
    }
    if c.n_tasks == 0 || c.train_per_task == 0 {
        return Err(Error::InvalidParameter("need at least one task and one training grid".into()));
    }
    if c.dim <= c.n_tasks {
        return Err(Error::InvalidParameter(format!(
            "dim {} must exceed the number of tasks {} (one axis per center plus anomaly directions)",
            c.dim, c.n_tasks
        )));
    }
    if c.grid_h == 0 || c.grid_w == 0 || c.grid_h > c.geometry.img_h || c.grid_w > c.geometry.img_w {
        return Err(Error::InvalidParameter("patch grid must be non-empty and no larger than the image".into()));
    }

    let noise = Normal::new(0.0, c.spread).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let axis = c.separation / std::f64::consts::SQRT_2;
    let patches_per_grid = c.grid_h * c.grid_w;
    let (block_h, block_w) = ((c.grid_h / 4).max(1), (c.grid_w / 4).max(1));

    let tasks = (0..c.n_tasks)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed(c.seed, t));
            let mut center = vec![0f64; c.dim];
            center[t] = axis;

            let mut direction = vec![0f64; c.dim];
            loop {
                for v in &mut direction[c.n_tasks..] {
                    *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    direction.iter_mut().for_each(|v| *v /= norm);
                    break;
                }
            }

            let normal_patches = |rng: &mut ChaCha8Rng| -> Vec<f32> {
                (0..patches_per_grid)
                    .flat_map(|_| center.iter().map(|&m| (m + noise.sample(rng)) as f32).collect::<Vec<_>>())
                    .collect()
            };
            let masked = t < c.masked_tasks;
            let mut next_id = 0u64;
            let mut id = || {
                next_id += 1;
                ((t as u64) << 32) | next_id
            };

            let mut train = Vec::with_capacity(c.train_per_task);
            for _ in 0..c.train_per_task {
                let data = normal_patches(&mut rng);
                train.push(FeatureGrid::new(id(), c.grid_h, c.grid_w, Label::Normal, VectorSet::new(c.dim, data)?)?);
            }

            let mut test = Vec::with_capacity(c.test_normal + c.test_anomalous);
            for _ in 0..c.test_normal {
                let data = normal_patches(&mut rng);
                let g = FeatureGrid::new(id(), c.grid_h, c.grid_w, Label::Normal, VectorSet::new(c.dim, data)?)?;
                test.push(if masked { g.with_mask(vec![0; c.geometry.pixels()], c.geometry)? } else { g });
            }
            for _ in 0..c.test_anomalous {
                let mut data = normal_patches(&mut rng);
                let r0 = rng.random_range(0..=c.grid_h - block_h);
                let c0 = rng.random_range(0..=c.grid_w - block_w);
                for r in r0..r0 + block_h {
                    for col in c0..c0 + block_w {
                        let base = (r * c.grid_w + col) * c.dim;
                        for (v, d) in data[base..base + c.dim].iter_mut().zip(&direction) {
                            *v = (*v as f64 + c.anomaly_shift * d) as f32;
                        }
                    }
                }
                let g = FeatureGrid::new(id(), c.grid_h, c.grid_w, Label::Anomalous, VectorSet::new(c.dim, data)?)?;
                test.push(if masked {
                    g.with_mask(block_mask(c, r0, c0, block_h, block_w), c.geometry)?
                } else {
                    g
                });
            }
            Ok(Task { name: synthetic_task_name(t), train, test })
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(c.geometry, tasks)
}

/// Pixel footprint of patch rows `r0..r0+bh` and columns `c0..c0+bw`.
pub fn block_mask(c: &SynthConfig, r0: usize, c0: usize, bh: usize, bw: usize) -> Vec<u8> {
    let g = c.geometry;
    let (y0, y1) = (r0 * g.img_h / c.grid_h, (r0 + bh) * g.img_h / c.grid_h);
    let (x0, x1) = (c0 * g.img_w / c.grid_w, (c0 + bw) * g.img_w / c.grid_w);
    let mut mask = vec![0u8; g.pixels()];
    for y in y0..y1 {
        mask[y * g.img_w + x0..y * g.img_w + x1].fill(1);
    }
    mask
}

/// Writes a stream as one train and one test `CLVF` file per task plus a
/// `stream.json` manifest. Returns the manifest path.
pub fn write_stream(stream: &TaskStream, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(stream.tasks.len());
    for task in &stream.tasks {
        let train_name = PathBuf::from(format!("{}_train.clvf", task.name));
        let test_name = PathBuf::from(format!("{}_test.clvf", task.name));
        for (name, grids) in [(&train_name, &task.train), (&test_name, &task.test)] {
            let file = FeatureFile::new(stream.geometry, stream.grid_h, stream.grid_w, stream.dim, grids.clone())?;
            write_feature_file(dir.join(name), &file)?;
        }
        entries.push(TaskFiles { name: task.name.clone(), train: vec![train_name], test: vec![test_name] });
    }
    let manifest_path = dir.join("stream.json");
    StreamManifest { tasks: entries }.save(&manifest_path)?;
    Ok(manifest_path)
}
