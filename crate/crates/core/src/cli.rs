//! Command-line front end: `train`, `predict`, `evaluate`, `select-samples`, `toy`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma};

use crate::config::RunConfig;
use crate::data::{self, DatasetManifest, Entry, ManifestKind, MiningConfig};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::ops::host;
use crate::toy;
use crate::trainer::{self, FitOptions, Manifests, Task, TrainState};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "jointseg", version, about = "Joint salient and camouflaged object detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    SeparateTasks,
    NoSimilarity,
    NoAdversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Sod,
    Cod,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Sod => Task::Sod,
            TaskArg::Cod => Task::Cod,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file; flags override file values.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_iters: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        ablation: Vec<Ablation>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Write 8-bit prediction maps (and optionally uncertainty maps) for a folder of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        with_uncertainty: bool,
    },
    /// Score a prediction folder against a ground-truth folder.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON report path; a CSV with per-image rows is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Move the easiest camouflaged samples into the salient training manifest.
    SelectSamples {
        #[arg(long)]
        cod: PathBuf,
        #[arg(long)]
        sod: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 400)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Mining report path (defaults to `<out>.report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render the synthetic square dataset.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Config { .. } | Error::Argument(_))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Train {
            config,
            max_iters,
            batch_size,
            lr,
            seed,
            ablation,
            out,
            resume,
            pretrained,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::read(p)?,
                None => RunConfig::default(),
            };
            let t = &mut cfg.train;
            if let Some(v) = max_iters {
                t.max_iters = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = lr {
                t.base_lr = v;
            }
            if let Some(v) = seed {
                t.seed = v;
            }
            for a in ablation {
                match a {
                    Ablation::SeparateTasks => t.separate_tasks = true,
                    Ablation::NoSimilarity => t.disable_similarity = true,
                    Ablation::NoAdversarial => t.disable_adversarial = true,
                }
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if resume.is_some() {
                cfg.resume = resume;
            }
            if pretrained.is_some() {
                cfg.pretrained = pretrained;
            }
            cfg.validate()?;
            train(&cfg)
        }
        Command::Predict {
            checkpoint,
            images,
            task,
            out,
            with_uncertainty,
        } => predict(&checkpoint, &images, task.into(), &out, with_uncertainty),
        Command::Evaluate { pred, gt, out } => evaluate(&pred, &gt, &out),
        Command::SelectSamples {
            cod,
            sod,
            checkpoint,
            count,
            seed,
            out,
            report,
        } => select_samples(&cod, &sod, &checkpoint, count, seed, &out, report.as_deref()),
        Command::Toy { out, seed } => {
            let ds = toy::generate(
                &out,
                &toy::ToySpec {
                    seed,
                    ..toy::ToySpec::default()
                },
            )?;
            println!("wrote toy dataset to {}", ds.root.display());
            Ok(0)
        }
    }
}

fn required(path: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config {
        field: name.into(),
        message: "required for training".into(),
    })
}

fn train(cfg: &RunConfig) -> Result<i32> {
    let sod = DatasetManifest::read(&required(&cfg.sod_manifest, "sod_manifest")?, ManifestKind::Sod)?;
    let cod = DatasetManifest::read(&required(&cfg.cod_manifest, "cod_manifest")?, ManifestKind::Cod)?;
    let connection = cfg
        .connection_manifest
        .as_deref()
        .map(|p| DatasetManifest::read(p, ManifestKind::Connection))
        .transpose()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let snapshot = cfg.out_dir.join("resolved_config.toml");
    fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    let options = FitOptions {
        out_dir: cfg.out_dir.clone(),
        pretrained: cfg.pretrained.clone(),
        resume: cfg.resume.clone(),
    };
    let runs = trainer::fit(&Manifests { sod, cod, connection }, &cfg.train, &options)?;
    for r in &runs {
        println!(
            "run {}: {} iterations, checkpoint {}",
            r.name,
            r.state.iteration,
            r.out_dir.join(trainer::FINAL_CHECKPOINT).display()
        );
    }
    Ok(0)
}

fn save_gray(values: &[f32], (h, w): (usize, usize), size: (u32, u32), path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, values.to_vec()).expect("buffer matches its dimensions");
    let buf = if size == (w as u32, h as u32) {
        buf
    } else {
        image::imageops::resize(&buf, size.0, size.1, FilterType::Triangle)
    };
    let gray = GrayImage::from_fn(size.0, size.1, |x, y| {
        Luma([(buf.get_pixel(x, y).0[0].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    gray.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn predict(checkpoint: &Path, images: &Path, task: Task, out: &Path, with_uncertainty: bool) -> Result<i32> {
    let state = TrainState::load(checkpoint)?;
    let size = state.config.image_size;
    let norm = state.config.normalization();
    let mut files: Vec<PathBuf> = fs::read_dir(images)
        .map_err(|e| Error::io(images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let unc_dir = out.join("uncertainty");
    fs::create_dir_all(if with_uncertainty { &unc_dir } else { out }).map_err(|e| Error::io(out, e))?;
    let mut written = 0;
    for path in files {
        if !data::is_raster(&path) {
            log::warn!("skipping non-image file {}", path.display());
            continue;
        }
        let original = match image::image_dimensions(&path) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", path.display());
                continue;
            }
        };
        let entry = Entry {
            image: path.clone(),
            mask: None,
        };
        let sample = data::load_sample(&entry, (size, size), &norm)?;
        let batch = data::stack(&[sample], vec![0])?;
        let probs = state.model.predict_probs(&batch.images, task)?;
        let name = format!("{}.png", path.file_stem().unwrap_or_default().to_string_lossy());
        save_gray(&host(&probs)?, (size, size), original, &out.join(&name))?;
        if with_uncertainty {
            let u = state.model.discriminator.uncertainty(&probs)?;
            save_gray(&host(&u)?, (size, size), original, &unc_dir.join(&name))?;
        }
        written += 1;
    }
    println!("wrote {written} prediction maps to {}", out.display());
    Ok(0)
}

fn evaluate(pred: &Path, gt: &Path, out: &Path) -> Result<i32> {
    for dir in [pred, gt] {
        if !dir.is_dir() {
            return Err(Error::argument(format!("{} is not a directory", dir.display())));
        }
    }
    let report = metrics::evaluate_dirs(pred, gt)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    report.write_json(out)?;
    report.write_csv(&out.with_extension("csv"))?;
    let m = report.means;
    println!(
        "{} images: MAE {:.4}  meanF {:.4}  E {:.4}  S {:.4}",
        report.records.len(),
        m.mae,
        m.mean_f,
        m.e_measure,
        m.s_measure
    );
    for e in &report.errors {
        eprintln!("unmatched or unreadable: {e}");
    }
    Ok(if report.errors.is_empty() { 0 } else { EXIT_FAILURE })
}

fn select_samples(
    cod: &Path,
    sod: &Path,
    checkpoint: &Path,
    count: usize,
    seed: u64,
    out: &Path,
    report: Option<&Path>,
) -> Result<i32> {
    let cod = DatasetManifest::read(cod, ManifestKind::Cod)?;
    let sod = DatasetManifest::read(sod, ManifestKind::Sod)?;
    let mut state = TrainState::load(checkpoint)?;
    let config = MiningConfig {
        count,
        seed,
        image_size: state.config.image_size,
        batch_size: state.config.batch_size,
        normalization: state.config.normalization(),
    };
    let (augmented, mining) = data::mine_easy_cod_samples(&cod, &sod, &mut state.model, &config)?;
    augmented.write(out)?;
    let report_path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("report.json"));
    mining.write_json(&report_path)?;
    println!(
        "swapped {} entries; manifest {}",
        mining.selected_ids.len(),
        out.display()
    );
    Ok(0)
}
