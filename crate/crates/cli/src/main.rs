use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use maskpoint::contour::{make_labels, LabelConfig};
use maskpoint::model::{load_checkpoint, save_checkpoint};
use maskpoint::synth::{generate_dataset, read_dataset, read_png, write_annotations, write_dataset, GeneratorConfig};
use maskpoint::train::{build_model, evaluate, export_heatmaps, run_ablation, train, AblationGrid, InferenceConfig};
use maskpoint::{Sampling, SceneRecord, TrainConfig};

#[derive(Parser)]
#[command(
    name = "maskpoint",
    version,
    about = "Contour-point supervised instance segmentation"
)]
struct Cli {
    /// Run everything on the calling thread. Training and evaluation always
    /// do; this also serializes ablation cells.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Keypoint loss weight of the COCO setting (alpha = 0.1).
    #[arg(long, global = true)]
    coco_preset: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: `index.json` plus `images/*.png`.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        overlap: Switch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Id of the first scene; use disjoint ranges for train and test.
        #[arg(long, default_value_t = 0)]
        first_id: u64,
    },
    /// Add contour point labels to a dataset's annotations.
    MakeLabels {
        /// Index file or dataset directory.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, value_enum, default_value_t = SamplingArg::Uniform)]
        sampling: SamplingArg,
        /// Corner detection tolerance in pixels.
        #[arg(long, default_value_t = 2.0)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        center: Switch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON; defaults to overwriting the input index.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write `checkpoint.bin` and `train_log.jsonl`.
    Train {
        /// JSON with TrainConfig fields; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print mask AP, keypoint PCK and contour-only AP as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate every cell of a grid file.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Directory for `ablation.json` and `ablation.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write per-detection keypoint and mask heatmaps as grayscale PNGs.
    ExportHeatmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "heatmaps")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplingArg {
    Uniform,
    Corner,
}

impl From<SamplingArg> for Sampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::Uniform => Sampling::Uniform,
            SamplingArg::Corner => Sampling::Corner,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_scenes(path: &Path) -> Result<Vec<SceneRecord>> {
    let scenes = read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    info!("{} scenes from {}", scenes.len(), path.display());
    Ok(scenes)
}

fn gen_data(
    out: &Path,
    scenes: usize,
    size: usize,
    classes: usize,
    overlap: bool,
    seed: u64,
    first_id: u64,
) -> Result<()> {
    let config = GeneratorConfig {
        num_classes: classes,
        allow_overlap: overlap,
        ..GeneratorConfig::square(size)
    };
    let records = generate_dataset(&config, first_id, scenes, seed)?;
    write_dataset(&records, out)?;
    let instances: usize = records.iter().map(|r| r.instances.len()).sum();
    println!("wrote {scenes} scenes with {instances} instances to {}", out.display());
    Ok(())
}

fn make_labels_cmd(annotations: &Path, labels: &LabelConfig, out: Option<&Path>) -> Result<()> {
    let index = maskpoint::synth::resolve_index(annotations);
    let mut records = load_scenes(&index)?;
    for rec in &mut records {
        for (i, inst) in rec.instances.iter_mut().enumerate() {
            let set = make_labels(&inst.mask, labels)
                .with_context(|| format!("labeling instance {i} of image {}", rec.scene_id))?;
            inst.contour_points = Some(set);
        }
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| index.clone());
    let root = index.parent().unwrap_or(Path::new("."));
    write_annotations(&records, &out, root)?;
    let padded: usize = records
        .iter()
        .flat_map(|r| &r.instances)
        .filter_map(|a| a.contour_points.as_ref())
        .map(|p| p.pad_count)
        .sum();
    println!(
        "labeled {} images, {padded} padded points, wrote {}",
        records.len(),
        out.display()
    );
    Ok(())
}

fn check_labels(scenes: &[SceneRecord], config: &TrainConfig) -> Result<()> {
    if !(config.keypoint_loss_active() || config.fusion.enabled) {
        return Ok(());
    }
    for scene in scenes {
        for inst in &scene.instances {
            match &inst.contour_points {
                None => bail!(
                    "image {} has instances without contour points; run make-labels first",
                    scene.scene_id
                ),
                Some(p) if p.k != config.fusion.k || p.center.is_some() != config.fusion.use_center => bail!(
                    "labels of image {} have k = {} (center {}) but the config wants k = {} (center {}); rerun make-labels",
                    scene.scene_id,
                    p.k,
                    p.center.is_some(),
                    config.fusion.k,
                    config.fusion.use_center
                ),
                Some(_) => {}
            }
        }
    }
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path, coco_preset: bool) -> Result<()> {
    let mut config: TrainConfig = match config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if coco_preset {
        config.fusion.alpha = TrainConfig::COCO_ALPHA;
    }
    config.validate()?;
    let scenes = load_scenes(data)?;
    check_labels(&scenes, &config)?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);

    let mut model = build_model(&config)?;
    let start = Instant::now();
    let mut write_error = None;
    let result = train(&mut model, &scenes, &config, |entry| {
        if write_error.is_none() {
            if let Err(e) = serde_json::to_writer(&mut log, entry)
                .map_err(std::io::Error::from)
                .and_then(|_| log.write_all(b"\n"))
            {
                write_error = Some(e);
            }
        }
        if (entry.iteration + 1) % 50 == 0 {
            info!(
                "iteration {} total {:.4} ({:.0}s)",
                entry.iteration + 1,
                entry.loss.total,
                start.elapsed().as_secs_f64()
            );
        }
    });
    log.flush()?;
    if let Some(e) = write_error {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    let history = result?;
    let checkpoint = out.join("checkpoint.bin");
    save_checkpoint(&model, &checkpoint)?;
    if let Some(last) = history.last() {
        println!(
            "trained {} iterations in {:.1}s, final total loss {:.4}, checkpoint {}",
            history.len(),
            start.elapsed().as_secs_f64(),
            last.total,
            checkpoint.display()
        );
    }
    Ok(())
}

fn eval_cmd(checkpoint: &Path, data: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let scenes = load_scenes(data)?;
    if scenes
        .iter()
        .flat_map(|s| &s.instances)
        .any(|a| a.contour_points.is_none())
    {
        warn!("some instances have no contour points; they do not count towards keypoint PCK");
    }
    let report = evaluate(&model, &scenes, &InferenceConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn ablate_cmd(grid_path: &Path, out: Option<&Path>, jobs: usize, coco_preset: bool) -> Result<()> {
    let mut grid: AblationGrid = read_json(grid_path)?;
    if coco_preset {
        grid.base.fusion.alpha = TrainConfig::COCO_ALPHA;
    }
    let base_dir = grid_path.parent().unwrap_or(Path::new("."));
    let data = |field: &Option<String>, name: &str| -> Result<Vec<SceneRecord>> {
        let rel = field.as_deref().with_context(|| format!("grid file has no {name}"))?;
        load_scenes(&base_dir.join(rel))
    };
    let train_scenes = data(&grid.train_data, "train_data")?;
    let eval_scenes = data(&grid.eval_data, "eval_data")?;
    info!("{} cells on {jobs} worker(s)", grid.cells().len());
    let table = run_ablation(&grid, &train_scenes, &eval_scenes, jobs, |row| match &row.error {
        Some(e) => warn!("{}: failed: {e}", row.setting),
        None => info!(
            "{}: AP {:.4} AP50 {:.4}",
            row.setting,
            row.ap.unwrap_or(0.0),
            row.ap50.unwrap_or(0.0)
        ),
    });
    let text = table.to_text();
    print!("{text}");
    if let Some(out) = out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
        std::fs::write(out.join("ablation.txt"), &text)?;
    }
    Ok(())
}

fn export_cmd(checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let image = read_png(image)?;
    let written = export_heatmaps(&model, &image, out, &InferenceConfig::default())?;
    for (kp, mask) in &written {
        println!("{} {}", kp.display(), mask.display());
    }
    if written.is_empty() {
        println!("no detections");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            out,
            scenes,
            size,
            classes,
            overlap,
            seed,
            first_id,
        } => gen_data(&out, scenes, size, classes, overlap.on(), seed, first_id),
        Command::MakeLabels {
            annotations,
            k,
            sampling,
            epsilon,
            center,
            seed,
            out,
        } => {
            let labels = LabelConfig {
                k,
                sampling: sampling.into(),
                epsilon,
                use_center: center.on(),
                seed,
            };
            make_labels_cmd(&annotations, &labels, out.as_deref())
        }
        Command::Train { config, data, out } => train_cmd(config.as_deref(), &data, &out, cli.coco_preset),
        Command::Eval { checkpoint, data } => eval_cmd(&checkpoint, &data),
        Command::Ablate { grid, out, jobs } => {
            let jobs = if cli.deterministic {
                1
            } else {
                jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            };
            ablate_cmd(&grid, out.as_deref(), jobs, cli.coco_preset)
        }
        Command::ExportHeatmaps { checkpoint, image, out } => export_cmd(&checkpoint, &image, &out),
    }
}
