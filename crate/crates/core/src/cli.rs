//! Command-line front end: data synthesis, training, evaluation, inference,
//! plotting and parameter audit. Every artifact is written atomically.

use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use crate::data::{
    generate_synthetic_sequence, load_depth_png, load_rgb_png, save_depth_png, write_atomic,
    write_synthetic_dataset, SampleTriplet, SceneSpec, SequenceDataset,
};
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::metrics::DEFAULT_BOUNDARY_THRESHOLD;
use crate::trainer::{
    evaluate, prepare_teacher, stage1_trainer, stage2_trainer, Checkpoint, DepthModel, ExperimentConfig, Teacher,
    TeacherSource, TrainOutcome, Trainer,
};
use crate::viz;

#[derive(Debug, Parser)]
#[command(name = "edge-depth", version, about = "Self-supervised monocular depth with boundary-aware training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sequence with depth and object-id masks.
    SynthData(SynthArgs),
    /// Train stage 1 or stage 2 as selected by the config.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset with ground-truth depth.
    Eval(EvalArgs),
    /// Predict 16-bit depth PNGs (and optionally point clouds) for images.
    Infer(InferArgs),
    /// Colormap a depth PNG and overlay its boundaries.
    Plot(PlotArgs),
    /// Per-module parameter counts of a configuration.
    ParamCount(ParamCountArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (JSON); defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. `--set loss.gamma=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene description (JSON). Without it a preset is rendered.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_parser = ["corner", "corner-box"], default_value = "corner-box")]
    pub preset: String,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training manifest (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train a toy teacher on the segmentation masks of `--teacher-data`
    /// (or `--data`) instead of loading `teacher_checkpoint`.
    #[arg(long)]
    pub prepare_teacher: bool,
    #[arg(long)]
    pub teacher_data: Option<PathBuf>,
    /// Continue a run from one of its checkpoints.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving `eval.json` and `eval.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub boundary_threshold: Option<f64>,
    #[arg(long)]
    pub no_median_scaling: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an ASCII PLY point cloud per image.
    #[arg(long, requires = "intrinsics")]
    pub ply: bool,
    /// Camera intrinsics `fx,fy,cx,cy` in pixels of the input image.
    #[arg(long, value_parser = parse_intrinsics)]
    pub intrinsics: Option<Intrinsics>,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Predicted depth PNG (16-bit millimeters).
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BOUNDARY_THRESHOLD)]
    pub boundary_threshold: f64,
}

#[derive(Debug, Args)]
pub struct ParamCountArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

fn parse_intrinsics(s: &str) -> std::result::Result<Intrinsics, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [fx, fy, cx, cy] = v[..] else {
        return Err("expected fx,fy,cx,cy".into());
    };
    let k = Intrinsics::new(fx, fy, cx, cy);
    k.validate().map_err(|e| e.to_string())?;
    Ok(k)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Infer(a) => infer(&a),
        Command::Plot(a) => plot(&a),
        Command::ParamCount(a) => param_count(&a),
    }
}

fn synth_data(a: &SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => SceneSpec::from_json_file(p)?,
        None if a.preset == "corner" => SceneSpec::corner(a.width, a.height, a.frames, a.seed),
        None => SceneSpec::corner_with_box(a.width, a.height, a.frames, a.seed),
    };
    // Render fully before touching the output directory.
    let seq = generate_synthetic_sequence(&spec)?;
    let manifest = write_synthetic_dataset(&seq, &a.out)?;
    println!("wrote {} frames, manifest {}", seq.frames.len(), manifest.display());
    Ok(())
}

fn load_data(manifest: &Path) -> Result<Vec<SampleTriplet>> {
    SequenceDataset::open(manifest)?.load_all()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn save_outcome(out: &Path, stage: u8, outcome: &TrainOutcome) -> Result<()> {
    outcome.last.save(&out.join(format!("stage{stage}_last.safetensors")))?;
    outcome.best.save(&out.join(format!("stage{stage}_best.safetensors")))?;
    if let Some(v) = outcome.best_val_abs_rel {
        println!("best validation Abs.Rel {v:.4}");
    }
    println!("stage {stage} finished after {} steps; checkpoints in {}", outcome.last.meta.step, out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let data = load_data(&a.data)?;
    let log_path = a.out.join("train_log.jsonl");
    if let Some(p) = &a.resume {
        let ck = Checkpoint::load(p)?;
        let cfg = ck.meta.config.clone();
        let teacher = if cfg.uses_semantic_loss() && !cfg.ablation.joint_semantic_decoder {
            Some(teacher_for(&cfg, a)?)
        } else {
            None
        };
        let mut t = Trainer::resume(&ck, &data, teacher)?.with_log_file(&log_path)?;
        return save_outcome(&a.out, cfg.stage, &t.run()?);
    }
    let cfg = a.config.load()?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let needs_teacher = cfg.uses_semantic_loss() && !cfg.ablation.joint_semantic_decoder;
    let teacher = if needs_teacher || a.prepare_teacher { Some(teacher_for(&cfg, a)?) } else { None };
    let trainer = if cfg.stage == 2 {
        let s1 = cfg
            .stage1_checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("stage 2 requires stage1_checkpoint".into()))?;
        let teacher = teacher.ok_or_else(|| Error::Config("stage 2 requires a teacher".into()))?;
        stage2_trainer(&cfg, &Checkpoint::load(s1)?, teacher, &data)?
    } else {
        stage1_trainer(&cfg, &data, teacher.filter(|_| needs_teacher))?
    };
    let outcome = trainer.with_log_file(&log_path)?.run()?;
    save_outcome(&a.out, cfg.stage, &outcome)
}

fn teacher_for(cfg: &ExperimentConfig, a: &TrainArgs) -> Result<Teacher> {
    if a.prepare_teacher {
        let frames = load_data(a.teacher_data.as_deref().unwrap_or(&a.data))?;
        let t = prepare_teacher(cfg, TeacherSource::Segmentation(&frames))?;
        let path = a.out.join("teacher.safetensors");
        t.save(cfg, &path)?;
        println!(
            "teacher pixel accuracy {:.3}, saved to {}",
            t.pixel_accuracy.unwrap_or(f64::NAN),
            path.display()
        );
        return Ok(t);
    }
    match &cfg.teacher_checkpoint {
        Some(p) => prepare_teacher(cfg, TeacherSource::Checkpoint(p)),
        None => Err(Error::Config(
            "a teacher is required: set teacher_checkpoint or pass --prepare-teacher".into(),
        )),
    }
}

fn model_from(path: &Path) -> Result<(ExperimentConfig, DepthModel)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.meta.config.clone();
    let model = DepthModel::with_weights(&cfg, &ck.weights, DType::F32)?;
    Ok((cfg, model))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (cfg, model) = model_from(&a.checkpoint)?;
    let mut ds = SequenceDataset::open(&a.data)?;
    if let Some([w, h]) = cfg.image_size {
        ds = ds.with_resize(w, h);
    }
    let mut opts = cfg.metrics;
    if let Some(t) = a.boundary_threshold {
        opts.boundary_threshold = t;
    }
    if a.no_median_scaling {
        opts.median_scaling = false;
    }
    let report = evaluate(&model, &ds.load_all()?, &opts)?;
    std::fs::create_dir_all(&a.out)?;
    report.write_json(&a.out.join("eval.json"))?;
    report.write_csv(&a.out.join("eval.csv"))?;
    let m = &report.mean;
    println!(
        "{} frames: abs_rel {:.4} rmse {:.4} delta1 {:.4} delta2 {:.4} delta3 {:.4} dbe_acc {}",
        report.frames.len(),
        m.abs_rel,
        m.rmse,
        m.delta1,
        m.delta2,
        m.delta3,
        m.dbe_acc.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let (_, model) = model_from(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out)?;
    for img_path in &a.images {
        let img = load_rgb_png(img_path)?;
        let depth = model.predict(&img)?;
        let stem = img_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let out = a.out.join(format!("{stem}_depth.png"));
        save_depth_png(&out, &depth)?;
        if a.ply {
            let k = a.intrinsics.expect("clap enforces --intrinsics with --ply");
            write_atomic(&a.out.join(format!("{stem}.ply")), viz::point_cloud_ply(&depth, &k).as_bytes())?;
        }
        println!("{} -> {}", img_path.display(), out.display());
    }
    Ok(())
}

fn plot(a: &PlotArgs) -> Result<()> {
    let pred = load_depth_png(&a.pred)?;
    let gt = a.gt.as_deref().map(load_depth_png).transpose()?;
    let p = viz::plot(&pred, gt.as_ref(), a.boundary_threshold)?;
    std::fs::create_dir_all(&a.out)?;
    let stem = a.pred.file_stem().and_then(|s| s.to_str()).unwrap_or("depth");
    let png = |img: &image::RgbImage| -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    };
    write_atomic(&a.out.join(format!("{stem}_color.png")), &png(&p.depth)?)?;
    write_atomic(&a.out.join(format!("{stem}_boundaries.png")), &png(&p.overlay)?)?;
    write_json(&a.out.join(format!("{stem}_plot.json")), &p.summary)?;
    println!(
        "depth range {:?}..{:?}, {} boundary pixels",
        p.summary.min_depth, p.summary.max_depth, p.summary.boundary_pixels
    );
    Ok(())
}

fn param_count(a: &ParamCountArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let table = DepthModel::new(&cfg, DType::F32)?.param_table();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&table)?);
    } else {
        for (name, n) in table.rows() {
            println!("{name:<10} {n:>10} ({:.3}M)", n as f64 / 1e6);
        }
    }
    Ok(())
}
