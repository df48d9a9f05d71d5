//! Command-line front end. Each subcommand is also callable as a function so
//! tests can drive it without spawning a process.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::feature::{read_feature_file, ImageGeometry, StreamManifest};
use crate::harness::{
    generate_synthetic_stream, ingest_bmad_layout, run_stream, write_stream, Strategy, StrategyConfig, SynthConfig,
    TaskStream, DEFAULT_MAX_TRAIN_SAMPLES,
};
use crate::memory::load_banks;
use crate::metrics::{self, MemoryReport};
use crate::report::{self, write_json, Summary};
use crate::scoring::{route_and_score, ScoringParams};

#[derive(Debug, Parser)]
#[command(name = "patchcore-cl", version, about = "Continual PatchCore memory banks and evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task stream (CLVF files + stream.json).
    Synth(SynthArgs),
    /// Run one strategy over a stream and write a run directory.
    Run(RunArgs),
    /// Run all four strategies and write a comparison table.
    Compare(CompareArgs),
    /// Print bank sizes, budget usage and memory figures of a bank file.
    Inspect(InspectArgs),
    /// Score a feature file against saved banks.
    Score(ScoreArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub tasks: usize,
    #[arg(long, default_value_t = 10)]
    pub train_per_task: usize,
    #[arg(long, default_value_t = 10)]
    pub test_normal: usize,
    #[arg(long, default_value_t = 10)]
    pub test_anomalous: usize,
    /// Patch feature dimension.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Patch grid side length.
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub img: usize,
    #[arg(long, default_value_t = 400.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 12.0)]
    pub anomaly_shift: f64,
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    /// Number of leading tasks that carry pixel masks.
    #[arg(long, default_value_t = 3)]
    pub masked_tasks: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            n_tasks: self.tasks,
            train_per_task: self.train_per_task,
            test_normal: self.test_normal,
            test_anomalous: self.test_anomalous,
            geometry: ImageGeometry { img_h: self.img, img_w: self.img },
            grid_h: self.grid,
            grid_w: self.grid,
            dim: self.dim,
            separation: self.separation,
            anomaly_shift: self.anomaly_shift,
            spread: self.spread,
            masked_tasks: self.masked_tasks,
            seed: self.seed,
        }
    }
}

/// Flags shared by `run` and `compare`.
#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// Stream manifest (JSON). Without it a synthetic stream of `--tasks`
    /// tasks is generated under `<out>/stream`.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    /// Treat `--stream` as a BMAD layout manifest: all six categories, fixed order.
    #[arg(long)]
    pub bmad: bool,
    /// Task count of the generated stream when `--stream` is absent.
    #[arg(long, default_value_t = 3)]
    pub tasks: usize,
    #[arg(long, default_value_t = 30_000)]
    pub memory_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = metrics::DEFAULT_FPR_LIMIT)]
    pub fpr_limit: f64,
    /// Softmax reweighting neighbourhood (0 = plain nearest neighbour).
    #[arg(long, default_value_t = 0)]
    pub reweight_b: usize,
    /// Heatmap Gaussian sigma in pixels.
    #[arg(long, default_value_t = 4.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_TRAIN_SAMPLES)]
    pub max_train: usize,
    #[arg(long, default_value_t = metrics::WIDE_RESNET50_PARAMS)]
    pub backbone_params: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: bool,
}

impl ExperimentArgs {
    fn config(&self, strategy: Strategy) -> StrategyConfig {
        StrategyConfig {
            strategy,
            memory_size: self.memory_size,
            seed: self.seed,
            scoring: ScoringParams { reweight_neighbors: self.reweight_b, smoothing_sigma: self.sigma },
            max_train_samples_per_task: self.max_train,
            fpr_limit: self.fpr_limit,
            backbone_params: self.backbone_params,
        }
    }

    fn load_stream(&self) -> Result<TaskStream> {
        match &self.stream {
            Some(path) if self.bmad => {
                let manifest = StreamManifest::load(path).with_context(|| format!("reading manifest {}", path.display()))?;
                let root = path.parent().unwrap_or(Path::new("."));
                ingest_bmad_layout(root, &manifest, self.max_train).context("ingesting BMAD layout")
            }
            Some(path) => TaskStream::load(path).with_context(|| format!("loading stream {}", path.display())),
            None => {
                if self.bmad {
                    bail!("--bmad needs --stream");
                }
                let config = SynthConfig { n_tasks: self.tasks, seed: self.seed, ..SynthConfig::default() };
                let stream = generate_synthetic_stream(&config).context("generating synthetic stream")?;
                write_stream(&stream, self.out.join("stream")).context("writing synthetic stream")?;
                Ok(stream)
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// One of multi, joint, finetune, cl.
    #[arg(long, default_value = "cl")]
    pub strategy: Strategy,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub banks: PathBuf,
    #[arg(long, default_value_t = metrics::WIDE_RESNET50_PARAMS)]
    pub backbone_params: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub banks: PathBuf,
    /// CLVF file with the grids to score.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub reweight_b: usize,
    #[arg(long, default_value_t = 4.0)]
    pub sigma: f64,
    #[arg(long)]
    pub json: bool,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let stream = generate_synthetic_stream(&args.config()).context("generating synthetic stream")?;
    let manifest = write_stream(&stream, &args.out).context("writing stream files")?;
    if args.json {
        println!("{}", json!({ "manifest": manifest, "tasks": stream.task_names() }));
    } else {
        println!("wrote {} tasks to {}", stream.tasks.len(), manifest.display());
    }
    Ok(manifest)
}

pub fn cmd_run(args: &RunArgs) -> Result<Summary> {
    let exp = &args.experiment;
    let stream = exp.load_stream()?;
    let config = exp.config(args.strategy);
    config.validate(stream.tasks.len()).context("validating strategy config")?;
    let outcome = run_stream(&stream, &config).with_context(|| format!("running strategy {}", args.strategy))?;
    let summary = report::write_run_dir(&exp.out, &outcome).context("writing run directory")?;
    print_summaries(std::slice::from_ref(&summary), exp.json)?;
    Ok(summary)
}

/// Runs every strategy on one stream. Per-strategy run directories go under
/// `<out>/<strategy>`; the combined `report.csv` and `curve_f1_image.csv` go in `<out>`.
pub fn cmd_compare(args: &CompareArgs) -> Result<Vec<Summary>> {
    let exp = &args.experiment;
    let stream = exp.load_stream()?;
    let mut summaries = Vec::with_capacity(Strategy::ALL.len());
    let mut curves = Vec::with_capacity(Strategy::ALL.len());
    for strategy in Strategy::ALL {
        let config = exp.config(strategy);
        config.validate(stream.tasks.len()).context("validating strategy config")?;
        let outcome = run_stream(&stream, &config).with_context(|| format!("running strategy {strategy}"))?;
        let summary = report::write_run_dir(exp.out.join(strategy.slug()), &outcome)
            .with_context(|| format!("writing run directory for {strategy}"))?;
        curves.push((summary.label.clone(), report::f1_curve(&outcome)?));
        summaries.push(summary);
    }
    report::write_report_csv(exp.out.join("report.csv"), &summaries).context("writing report.csv")?;
    report::write_curve_csv(exp.out.join("curve_f1_image.csv"), &stream.task_names(), &curves)
        .context("writing curve_f1_image.csv")?;
    print_summaries(&summaries, exp.json)?;
    Ok(summaries)
}

fn print_summaries(summaries: &[Summary], as_json: bool) -> Result<()> {
    if as_json {
        println!("{}", serde_json::to_string(summaries)?);
        return Ok(());
    }
    for s in summaries {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<18} image AUROC {:.4}  image F1 {:.4}  pixel F1 {}  forget(img F1) {}%  add mem {:.2} MB",
            s.label,
            s.image_auroc,
            s.image_f1,
            opt(s.pixel_f1),
            opt(s.forgetting_image_f1_pct),
            s.memory.additional_mb
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BankInfo {
    pub task_index: usize,
    pub name: String,
    pub vectors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inspection {
    pub dim: usize,
    pub memory_size: usize,
    pub total_vectors: usize,
    pub budget_used: f64,
    pub banks: Vec<BankInfo>,
    pub memory: MemoryReport,
}

pub fn inspect(path: &Path, backbone_params: u64) -> Result<Inspection> {
    let set = load_banks(path).with_context(|| format!("loading banks {}", path.display()))?;
    Ok(Inspection {
        dim: set.dim(),
        memory_size: set.memory_size(),
        total_vectors: set.total_vectors(),
        budget_used: set.total_vectors() as f64 / set.memory_size() as f64,
        banks: set
            .banks()
            .iter()
            .map(|b| BankInfo { task_index: b.task_index, name: b.name.clone(), vectors: b.len() })
            .collect(),
        memory: metrics::memory_report_for(&set, backbone_params),
    })
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<Inspection> {
    let info = inspect(&args.banks, args.backbone_params)?;
    if args.json {
        println!("{}", serde_json::to_string(&info)?);
    } else {
        println!(
            "dim {}  budget {}  stored {} ({:.1}%)",
            info.dim,
            info.memory_size,
            info.total_vectors,
            100.0 * info.budget_used
        );
        for b in &info.banks {
            println!("  bank {:>2} {:<20} {} vectors", b.task_index, b.name, b.vectors);
        }
        println!("arch mem {:.2} MB  add mem {:.2} MB", info.memory.architecture_mb, info.memory.additional_mb);
    }
    Ok(info)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredImage {
    pub image_id: u64,
    pub label: crate::feature::Label,
    pub image_score: f64,
    pub routed_task: usize,
    pub bank_scores: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_scores: Vec<f32>,
    pub heatmap_f32: PathBuf,
    pub heatmap_png: PathBuf,
}

/// Writes `results.json` plus, per image, `<id>.f32` (raw little-endian
/// heatmap, row-major, `img_h * img_w` values) and `<id>.png` (min-max
/// normalized 8-bit, visualization only).
pub fn cmd_score(args: &ScoreArgs) -> Result<Vec<ScoredImage>> {
    let set = load_banks(&args.banks).with_context(|| format!("loading banks {}", args.banks.display()))?;
    let file = read_feature_file(&args.features).with_context(|| format!("reading features {}", args.features.display()))?;
    let params = ScoringParams { reweight_neighbors: args.reweight_b, smoothing_sigma: args.sigma };
    params.validate().context("validating scoring params")?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut scored = Vec::with_capacity(file.grids.len());
    for grid in &file.grids {
        let result = route_and_score(grid, &set, file.geometry, &params)
            .with_context(|| format!("scoring image {}", grid.image_id))?;
        let raw = args.out.join(format!("{}.f32", grid.image_id));
        let png = args.out.join(format!("{}.png", grid.image_id));
        let bytes: Vec<u8> = result.heatmap.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&raw, bytes).with_context(|| format!("writing {}", raw.display()))?;
        image::GrayImage::from_raw(file.geometry.img_w as u32, file.geometry.img_h as u32, result.heatmap.to_u8())
            .expect("buffer matches geometry")
            .save(&png)
            .with_context(|| format!("writing {}", png.display()))?;
        scored.push(ScoredImage {
            image_id: grid.image_id,
            label: grid.label,
            image_score: result.image_score,
            routed_task: result.routed_task,
            bank_scores: result.bank_scores,
            grid_h: result.grid_h,
            grid_w: result.grid_w,
            patch_scores: result.patch_scores,
            heatmap_f32: raw,
            heatmap_png: png,
        });
    }
    write_json(args.out.join("results.json"), &scored).context("writing results.json")?;
    if args.json {
        println!("{}", serde_json::to_string(&scored)?);
    } else {
        for s in &scored {
            println!("image {:>12}  score {:.4}  routed to task {}", s.image_id, s.image_score, s.routed_task);
        }
    }
    Ok(scored)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(drop),
        Command::Run(a) => cmd_run(&a).map(drop),
        Command::Compare(a) => cmd_compare(&a).map(drop),
        Command::Inspect(a) => cmd_inspect(&a).map(drop),
        Command::Score(a) => cmd_score(&a).map(drop),
    }
}
