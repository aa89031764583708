//! Command-line surface: train/eval runs, the ablation grids, gradient
//! checking, data generation, and artifact export.

use crate::config::{Factors, FactorizationTag, RunConfig, TaskKind};
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::metrics::{marching_cubes, sdf_grid, write_obj};
use crate::models::{build_model, grad_check, Arch, FieldModel};
use crate::resfield::ResFieldMode;
use crate::runner::{evaluate, model_mesh, render_frame, run};
use crate::seed::substream;
use crate::tasks::{
    frame_t_norm, gen_flow, gen_video, pulsating_scene, sdf_eval, write_ppm,
};
use crate::checkpoint::{load_checkpoint, restore_model};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Parser)]
#[command(name = "resfields", version, about = "Residual field layers for temporal neural fields")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a model per a JSON run config
    Train(TrainArgs),
    /// Recompute task metrics for a saved checkpoint
    Eval(EvalArgs),
    /// Run the factorization and layers-vs-rank grids, emitting a CSV
    Ablate(AblateArgs),
    /// Finite-difference check of analytic gradients for every variant
    GradCheck(GradCheckArgs),
    /// Write a procedural dataset to disk
    GenData(GenDataArgs),
    /// Render a checkpoint: video frames to PPM, surfaces to OBJ
    Export(ExportArgs),
    /// Print the parameter-count table for a model shape
    Params(ParamsArgs),
}

#[derive(Debug, Args, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Row count for time-indexed factors; absolute ("300") or a
    /// percentage of the frame count ("95%")
    #[arg(long)]
    pub factors: Option<String>,
    #[arg(long, value_enum)]
    pub factorization: Option<TagArg>,
    /// Layers that carry residual weights, e.g. "1,2,3"
    #[arg(long, value_delimiter = ',')]
    pub resfields: Option<Vec<usize>>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub chunks: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.optim.steps = v;
        }
        if let Some(v) = &self.out {
            cfg.out_dir = Some(v.clone());
        }
        if let Some(v) = self.width {
            cfg.model.width = v;
        }
        if let Some(v) = self.depth {
            cfg.model.depth = v;
        }
        if let Some(v) = self.rank {
            cfg.model.rank = v;
        }
        if let Some(v) = &self.factors {
            cfg.model.factors = Some(Factors::parse(v)?);
        }
        if let Some(v) = self.factorization {
            cfg.model.factorization = v.into();
        }
        if let Some(v) = &self.resfields {
            cfg.model.resfield_layers = v.clone();
        }
        if let Some(v) = self.frames {
            cfg.data.frames = v;
        }
        if let Some(v) = self.batch {
            cfg.data.batch = v;
        }
        if let Some(v) = self.chunks {
            cfg.model.chunks = Some(v);
        }
        Ok(())
    }
}

/// Clap-facing mirror of the factorization tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TagArg {
    None,
    LowRank,
    Dictionary,
    MatrixMatrix,
    Cp,
    Tucker,
    Loe,
    HyperNet,
    OutputResidual,
}

impl From<TagArg> for FactorizationTag {
    fn from(t: TagArg) -> FactorizationTag {
        match t {
            TagArg::None => FactorizationTag::None,
            TagArg::LowRank => FactorizationTag::LowRank,
            TagArg::Dictionary => FactorizationTag::Dictionary,
            TagArg::MatrixMatrix => FactorizationTag::MatrixMatrix,
            TagArg::Cp => FactorizationTag::Cp,
            TagArg::Tucker => FactorizationTag::Tucker,
            TagArg::Loe => FactorizationTag::Loe,
            TagArg::HyperNet => FactorizationTag::HyperNet,
            TagArg::OutputResidual => FactorizationTag::OutputResidual,
        }
    }
}

fn tag_name(tag: FactorizationTag) -> &'static str {
    match tag {
        FactorizationTag::None => "none",
        FactorizationTag::LowRank => "low_rank",
        FactorizationTag::Dictionary => "dictionary",
        FactorizationTag::MatrixMatrix => "matrix_matrix",
        FactorizationTag::Cp => "cp",
        FactorizationTag::Tucker => "tucker",
        FactorizationTag::Loe => "loe",
        FactorizationTag::HyperNet => "hyper_net",
        FactorizationTag::OutputResidual => "output_residual",
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Check every factorization variant
    #[arg(long)]
    pub all: bool,
    #[arg(long, value_enum)]
    pub factorization: Option<TagArg>,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub segments: usize,
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    /// Sample grid resolution for surface extraction
    #[arg(long, default_value_t = 48)]
    pub grid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TaskArg {
    Video,
    Sdf,
    Flow,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> TaskKind {
        match t {
            TaskArg::Video => TaskKind::Video,
            TaskArg::Sdf => TaskKind::Sdf,
            TaskArg::Flow => TaskKind::Flow,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, value_enum, default_value_t = ArchArg::Siren)]
    pub arch: ArchArg,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    #[arg(long, default_value_t = 3)]
    pub in_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub out_dim: usize,
    /// Layers that carry residual weights, e.g. "1,2,3"
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub resfields: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    #[arg(long, default_value = "300")]
    pub factors: String,
    #[arg(long, value_enum)]
    pub factorization: Option<TagArg>,
    #[arg(long, default_value_t = 300)]
    pub frames: usize,
}

/// Usage-level failures (bad flags, unreadable config) exit with status 2;
/// failed runs exit 1.
pub fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Export(a) => cmd_export(a),
        Cmd::Params(a) => cmd_params(a),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn metric_names(task: TaskKind) -> (&'static str, &'static str) {
    match task {
        TaskKind::Video => ("train psnr (dB)", "test psnr (dB)"),
        TaskKind::Sdf => ("chamfer x1e3", "chamfer x1e3"),
        TaskKind::Flow => ("train flow l1", "held-out flow l1"),
    }
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg = load_config(&a.config)?;
    a.overrides.apply(&mut cfg)?;
    cfg.apply_env()?;
    let mut log_file = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(Path::new(dir).join("metrics.csv"))?)
        }
        None => None,
    };
    let started = Instant::now();
    let out = run(
        &cfg,
        log_file.as_mut().map(|f| f as &mut dyn Write),
    )?;
    let (tn, en) = metric_names(cfg.task);
    println!("params: {}", out.model.total_params());
    println!("final loss: {:.6e}", out.final_loss);
    println!("{tn}: {:.4}", out.train_metric);
    println!("{en}: {:.4}", out.test_metric);
    println!("wall seconds: {:.1}", started.elapsed().as_secs_f64());
    Ok(0)
}

/// Rebuilds the model recorded in a checkpoint's config echo and restores
/// its tensors.
pub fn model_from_checkpoint(path: &Path) -> Result<(RunConfig, FieldModel)> {
    let ckpt = load_checkpoint(path)?;
    let cfg: RunConfig = serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Config(format!("checkpoint config echo: {e}")))?;
    let spec = cfg.model_spec()?;
    let mut rng = substream(cfg.seed, "init");
    let mut model = build_model(&spec, &mut rng)?;
    restore_model(&mut model, &ckpt.tensors)?;
    Ok((cfg, model))
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let (cfg, model) = model_from_checkpoint(&a.checkpoint)?;
    let (train_m, test_m) = evaluate(&cfg, &model)?;
    let (tn, en) = metric_names(cfg.task);
    println!("params: {}", model.total_params());
    println!("{tn}: {:.4}", train_m);
    println!("{en}: {:.4}", test_m);
    Ok(0)
}

fn ablate_row(
    out: &mut dyn Write,
    cfg: &RunConfig,
    variant: &str,
    rank: usize,
) -> Result<()> {
    let spec = cfg.model_spec()?;
    let params = spec.param_count();
    let started = Instant::now();
    let outcome = run(cfg, None)?;
    writeln!(
        out,
        "{variant},{rank},{params},{:.4},{:.4},{:.1}",
        outcome.train_metric,
        outcome.test_metric,
        started.elapsed().as_secs_f64()
    )?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<i32> {
    let mut base = load_config(&a.config)?;
    if let Some(s) = a.steps {
        base.optim.steps = s;
    }
    base.apply_env()?;
    base.out_dir = None;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    writeln!(out, "variant,rank,params,train_metric,test_metric,wall_seconds")?;
    // factorization grid at the configured rank and layer set
    let grid = [
        FactorizationTag::None,
        FactorizationTag::LowRank,
        FactorizationTag::Dictionary,
        FactorizationTag::MatrixMatrix,
        FactorizationTag::Cp,
        FactorizationTag::Tucker,
        FactorizationTag::Loe,
        FactorizationTag::HyperNet,
    ];
    for tag in grid {
        let mut cfg = base.clone();
        cfg.model.factorization = tag;
        if tag == FactorizationTag::None {
            cfg.model.resfield_layers.clear();
        } else if cfg.model.resfield_layers.is_empty() {
            cfg.model.resfield_layers = vec![1, 2, 3];
        }
        ablate_row(&mut out, &cfg, tag_name(tag), cfg.model.rank)?;
        out.flush()?;
    }
    // layer-set x rank grid on the low-rank variant
    for layers in [vec![1], vec![1, 2], vec![1, 2, 3]] {
        for rank in [5, 10, 20] {
            let mut cfg = base.clone();
            cfg.model.factorization = FactorizationTag::LowRank;
            cfg.model.resfield_layers = layers.clone();
            cfg.model.rank = rank;
            let label: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
            let variant = format!("low_rank[{}]", label.join("+"));
            ablate_row(&mut out, &cfg, &variant, rank)?;
            out.flush()?;
        }
    }
    Ok(0)
}

/// Builds a small model carrying the given residual variant and checks
/// every parameter gradient against central finite differences.
pub fn grad_check_variant(tag: FactorizationTag, seed: u64) -> Result<f64> {
    let mut cfg = RunConfig::for_task(TaskKind::Video);
    cfg.model.width = 8;
    cfg.model.depth = 3;
    cfg.model.factorization = tag;
    cfg.model.rank = 2;
    cfg.model.tucker_ranks = [2, 3, 3];
    cfg.model.loe_levels = vec![2, 3];
    cfg.model.hyper_hidden = 4;
    cfg.model.resfield_layers = vec![1];
    cfg.data.frames = 5;
    if tag == FactorizationTag::OutputResidual {
        cfg.model.mode = ResFieldMode::OutputResidual;
    }
    let spec = cfg.model_spec()?;
    let mut rng = substream(seed, "gradcheck.init");
    let mut model = build_model(&spec, &mut rng)?;
    let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let t: f64 = rng.gen_range(0.0..1.0);
    let report = grad_check(&mut model, t, &x, 1e-6)?;
    Ok(report.max_rel_err)
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<i32> {
    let tags: Vec<FactorizationTag> = match (a.all, a.factorization) {
        (false, Some(t)) => vec![t.into()],
        _ => vec![
            FactorizationTag::LowRank,
            FactorizationTag::Dictionary,
            FactorizationTag::MatrixMatrix,
            FactorizationTag::Cp,
            FactorizationTag::Tucker,
            FactorizationTag::Loe,
            FactorizationTag::HyperNet,
            FactorizationTag::OutputResidual,
            FactorizationTag::None,
        ],
    };
    let mut failed = false;
    for tag in tags {
        let mut worst = 0.0f64;
        for seed in 0..a.seeds {
            worst = worst.max(grad_check_variant(tag, seed)?);
        }
        let ok = worst < 1e-4;
        failed |= !ok;
        println!(
            "{:<16} max rel err {:.3e}  {}",
            tag_name(tag),
            worst,
            if ok { "pass" } else { "FAIL" }
        );
    }
    Ok(if failed { 1 } else { 0 })
}

fn cmd_gen_data(a: GenDataArgs) -> Result<i32> {
    std::fs::create_dir_all(&a.out)?;
    match a.task {
        TaskArg::Video => {
            let ds = gen_video(a.seed, a.frames, a.size, a.size, a.segments)?;
            let (f, h, w) = ds.dims();
            let stride = h * w * 3;
            for frame in 0..f {
                let rgb = &ds.frames.data()[frame * stride..(frame + 1) * stride];
                write_ppm(&a.out.join(format!("frame_{frame:05}.ppm")), w, h, rgb)?;
            }
            println!("wrote {f} frames to {}", a.out.display());
        }
        TaskArg::Sdf => {
            let scene = pulsating_scene(a.frames);
            for frame in 0..a.frames {
                let t = frame_t_norm(frame, a.frames);
                let grid =
                    sdf_grid(a.grid, [-1.0; 3], [1.0; 3], |p| sdf_eval(&scene, p, t));
                let mesh = marching_cubes(&grid, 0.0, [-1.0; 3], [1.0; 3])?;
                write_obj(&a.out.join(format!("surface_{frame:03}.obj")), &mesh)?;
            }
            println!("wrote {} surfaces to {}", a.frames, a.out.display());
        }
        TaskArg::Flow => {
            let ds = gen_flow(a.seed, a.frames, a.points)?;
            let mut f = std::io::BufWriter::new(
                std::fs::File::create(a.out.join("flow.csv"))?,
            );
            writeln!(f, "frame,point,x,y,z,fx,fy,fz,bx,by,bz")?;
            // both flow directions exist only at interior frames
            for frame in 1..ds.frames() - 1 {
                for p in 0..a.points {
                    let pos = ds.pos(frame, p);
                    let fw = ds.flow_fwd(frame, p);
                    let bw = ds.flow_bwd(frame, p);
                    writeln!(
                        f,
                        "{frame},{p},{},{},{},{},{},{},{},{},{}",
                        pos[0], pos[1], pos[2], fw[0], fw[1], fw[2], bw[0], bw[1],
                        bw[2]
                    )?;
                }
            }
            println!("wrote flow.csv to {}", a.out.display());
        }
    }
    Ok(0)
}

fn cmd_export(a: ExportArgs) -> Result<i32> {
    let (cfg, model) = model_from_checkpoint(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out)?;
    match cfg.task {
        TaskKind::Video => {
            let ds = gen_video(
                cfg.seed,
                cfg.data.frames,
                cfg.data.height,
                cfg.data.width,
                cfg.data.segments,
            )?;
            let (f, h, w) = ds.dims();
            for frame in 0..f {
                let rgb = render_frame(&model, &ds, frame)?;
                write_ppm(&a.out.join(format!("frame_{frame:05}.ppm")), w, h, &rgb)?;
            }
            println!("wrote {f} frames to {}", a.out.display());
        }
        TaskKind::Sdf => {
            for frame in 0..cfg.data.frames {
                let t = frame_t_norm(frame, cfg.data.frames);
                let mesh = model_mesh(&model, t, a.grid)?;
                write_obj(&a.out.join(format!("surface_{frame:03}.obj")), &mesh)?;
            }
            println!("wrote {} surfaces to {}", cfg.data.frames, a.out.display());
        }
        TaskKind::Flow => {
            return Err(Error::InvalidArgument(
                "export supports video and sdf checkpoints".into(),
            ));
        }
    }
    Ok(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ArchArg {
    Siren,
    ReluPe,
}

fn cmd_params(a: ParamsArgs) -> Result<i32> {
    let arch = match a.arch {
        ArchArg::Siren => Arch::Siren,
        ArchArg::ReluPe => Arch::ReluPe,
    };
    let tags: Vec<FactorizationTag> = match a.factorization {
        Some(t) => vec![t.into()],
        None => vec![
            FactorizationTag::None,
            FactorizationTag::LowRank,
            FactorizationTag::Dictionary,
            FactorizationTag::MatrixMatrix,
            FactorizationTag::Cp,
            FactorizationTag::Tucker,
            FactorizationTag::Loe,
            FactorizationTag::HyperNet,
        ],
    };
    println!("{:<16} {:>12} {:>9}", "variant", "params", "millions");
    for tag in tags {
        let mut mc = crate::config::ModelConfig::baseline(arch);
        mc.width = a.width;
        mc.depth = a.depth;
        mc.rank = a.rank;
        mc.factors = Some(Factors::parse(&a.factors)?);
        mc.factorization = tag;
        mc.resfield_layers = if tag == FactorizationTag::None {
            Vec::new()
        } else {
            a.resfields.clone()
        };
        if tag == FactorizationTag::OutputResidual {
            mc.mode = ResFieldMode::OutputResidual;
        }
        let spec = mc.model_spec(a.in_dim, a.out_dim, a.frames)?;
        let n = spec.param_count();
        println!("{:<16} {:>12} {:>8.1}M", tag_name(tag), n, n as f64 / 1e6);
    }
    Ok(0)
}
