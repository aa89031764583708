//! Task orchestration: wiring datasets, models, losses, and the optimizer
//! into end-to-end training runs with final train/test metrics.

use crate::checkpoint::{save_checkpoint, state_tensors};
use crate::config::{RunConfig, TaskKind};
use crate::error::{Error, Result};
use crate::layers::GradBuffer;
use crate::linalg::Tensor;
use crate::metrics::{chamfer_l1, marching_cubes, sample_mesh_points, sdf_grid, TriMesh};
use crate::models::{build_model, FieldModel, FlowHead};
use crate::optim::{train, AdamState, TrainParams};
use crate::seed::substream;
use crate::tasks::{
    frame_t_norm, gen_flow_with, gen_video, load_video_dir, loss_mape, loss_mse,
    sample_frame_batch, sample_sdf_batch, sdf_eval, pulsating_scene, FlowDataset,
    FlowGenParams, Split, TemporalSdfScene, VideoDataset,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

const EVAL_CHUNK: usize = 4096;

/// Appends a constant time column to an [n x 3] point batch.
fn with_time(points: &Tensor, t_norm: f64) -> Result<Tensor> {
    let n = points.shape()[0];
    let mut data = Vec::with_capacity(n * 4);
    for i in 0..n {
        data.extend_from_slice(points.row(i));
        data.push(t_norm);
    }
    Tensor::new(vec![n, 4], data)
}

// ---------------------------------------------------------------------------
// video

/// One frame-coherent training step: a pixel batch from a single frame so
/// the whole batch shares the residual time.
pub fn video_train_step(
    model: &FieldModel,
    ds: &VideoDataset,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradBuffer)> {
    let (f, _, _) = ds.dims();
    let frame = rng.gen_range(0..f);
    let (coords, rgb) = sample_frame_batch(ds, frame, batch, Split::Train, rng)?;
    let t = frame_t_norm(frame, f);
    let (out, ctxs) = model.forward(t, &coords, true)?;
    let (loss, d_out) = loss_mse(&out, &rgb)?;
    let (_, grads) = model.backward(&ctxs, &d_out)?;
    Ok((loss, grads))
}

/// PSNR of the model over every pixel of a split, evaluated frame by frame.
pub fn video_psnr(model: &FieldModel, ds: &VideoDataset, split: Split) -> Result<f64> {
    let (f, _, _) = ds.dims();
    let mut se = 0.0;
    let mut count = 0usize;
    for frame in 0..f {
        let ids = ds.frame_split_ids(frame, split);
        let t = frame_t_norm(frame, f);
        for chunk in ids.chunks(EVAL_CHUNK) {
            let mut coords = Vec::with_capacity(chunk.len() * 3);
            let mut rgb = Vec::with_capacity(chunk.len() * 3);
            for &id in chunk {
                coords.extend_from_slice(&ds.coord(id));
                rgb.extend_from_slice(&ds.rgb(id));
            }
            let x = Tensor::new(vec![chunk.len(), 3], coords)?;
            let (out, _) = model.forward(t, &x, true)?;
            se += out
                .data()
                .iter()
                .zip(&rgb)
                .map(|(&p, &g)| (p - g) * (p - g))
                .sum::<f64>();
            count += chunk.len() * 3;
        }
    }
    if count == 0 {
        return Err(Error::Sampling("empty split".into()));
    }
    let mse = se / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Renders one frame of the model as [H x W x 3] rgb.
pub fn render_frame(model: &FieldModel, ds: &VideoDataset, frame: usize) -> Result<Vec<f64>> {
    let (f, h, w) = ds.dims();
    let t = frame_t_norm(frame, f);
    let mut out = Vec::with_capacity(h * w * 3);
    let base = (frame * h * w) as u32;
    let all: Vec<u32> = (0..(h * w) as u32).map(|i| base + i).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let mut coords = Vec::with_capacity(chunk.len() * 3);
        for &id in chunk {
            coords.extend_from_slice(&ds.coord(id));
        }
        let x = Tensor::new(vec![chunk.len(), 3], coords)?;
        let (pred, _) = model.forward(t, &x, true)?;
        out.extend_from_slice(pred.data());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// sdf

pub fn sdf_train_step(
    model: &FieldModel,
    scene: &TemporalSdfScene,
    batch: usize,
    sigma: f64,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradBuffer)> {
    let frame = rng.gen_range(0..scene.frames);
    let t = frame_t_norm(frame, scene.frames);
    let (points, targets) = sample_sdf_batch(scene, batch, t, sigma, rng)?;
    let xt = with_time(&points, t)?;
    let (out, ctxs) = model.forward(t, &xt, true)?;
    let (loss, d_out) = loss_mape(&out, &targets, eps)?;
    let (_, grads) = model.backward(&ctxs, &d_out)?;
    Ok((loss, grads))
}

/// Samples the learned field on a G^3 grid over [-1,1]^3 at one time.
pub fn model_sdf_grid(model: &FieldModel, t_norm: f64, g: usize) -> Result<Tensor> {
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (g - 1) as f64;
    let mut data = Vec::with_capacity(g * g * g);
    // one x-slab per forward pass
    for x in 0..g {
        let mut pts = Vec::with_capacity(g * g * 4);
        for y in 0..g {
            for z in 0..g {
                pts.extend_from_slice(&[coord(x), coord(y), coord(z), t_norm]);
            }
        }
        let xs = Tensor::new(vec![g * g, 4], pts)?;
        let (out, _) = model.forward(t_norm, &xs, true)?;
        data.extend_from_slice(out.data());
    }
    Tensor::new(vec![g, g, g], data)
}

/// Extracts the learned zero level set at one time.
pub fn model_mesh(model: &FieldModel, t_norm: f64, g: usize) -> Result<TriMesh> {
    let grid = model_sdf_grid(model, t_norm, g)?;
    marching_cubes(&grid, 0.0, [-1.0; 3], [1.0; 3])
}

/// Chamfer distance (raw scale; multiply by 10^3 for table units) between
/// the learned and analytic surfaces at one time.
pub fn sdf_chamfer(
    model: &FieldModel,
    scene: &TemporalSdfScene,
    t_norm: f64,
    g: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let learned = model_mesh(model, t_norm, g)?;
    if learned.is_empty() {
        return Err(Error::Sampling("learned surface is empty".into()));
    }
    let truth = marching_cubes(
        &sdf_grid(g, [-1.0; 3], [1.0; 3], |p| sdf_eval(scene, p, t_norm)),
        0.0,
        [-1.0; 3],
        [1.0; 3],
    )?;
    let mut rng = substream(seed, "chamfer.sample");
    let a: Vec<[f64; 3]> = sample_mesh_points(&learned, n_samples, &mut rng)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let b: Vec<[f64; 3]> = sample_mesh_points(&truth, n_samples, &mut rng)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    chamfer_l1(&a, &b)
}

// ---------------------------------------------------------------------------
// flow

pub fn flow_train_step(
    model: &FieldModel,
    head: FlowHead,
    ds: &FlowDataset,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradBuffer)> {
    let frames = ds.frames();
    let frame = rng.gen_range(1..frames - 1);
    let t = frame_t_norm(frame, frames);
    let points: Vec<usize> = (0..batch)
        .map(|_| ds.train_idx[rng.gen_range(0..ds.train_idx.len())])
        .collect();
    let mut coords = Vec::with_capacity(batch * 4);
    for &p in &points {
        coords.extend_from_slice(&ds.pos(frame, p));
        coords.push(t);
    }
    let x = Tensor::new(vec![batch, 4], coords)?;
    let (out, ctxs) = model.forward(t, &x, true)?;
    let width = head.out_width();
    let norm = (batch * 6) as f64;
    let mut loss = 0.0;
    let mut d_out = Tensor::zeros(out.shape());
    for (i, &p) in points.iter().enumerate() {
        let raw = out.row(i);
        let pos = ds.pos(frame, p);
        let (fwd, bwd) = head.decode(raw, pos, frames, frame);
        let gt_f = ds.flow_fwd(frame, p);
        let gt_b = ds.flow_bwd(frame, p);
        let mut d_fwd = [0.0; 3];
        let mut d_bwd = [0.0; 3];
        for c in 0..3 {
            loss += (fwd[c] - gt_f[c]).abs() + (bwd[c] - gt_b[c]).abs();
            d_fwd[c] = (fwd[c] - gt_f[c]).signum() / norm;
            d_bwd[c] = (bwd[c] - gt_b[c]).signum() / norm;
        }
        let d_raw = head.backward(raw, pos, frames, frame, d_fwd, d_bwd);
        d_out.data_mut()[i * width..(i + 1) * width].copy_from_slice(&d_raw);
    }
    loss /= norm;
    let (_, grads) = model.backward(&ctxs, &d_out)?;
    Ok((loss, grads))
}

/// Mean per-component L1 of forward and backward flow over a point subset
/// across all interior frames.
pub fn flow_eval(
    model: &FieldModel,
    head: FlowHead,
    ds: &FlowDataset,
    idx: &[usize],
) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Err(Error::Sampling("empty point subset".into()));
    }
    let frames = ds.frames();
    let mut err_f = 0.0;
    let mut err_b = 0.0;
    let mut count = 0usize;
    for frame in 1..frames - 1 {
        let t = frame_t_norm(frame, frames);
        let mut coords = Vec::with_capacity(idx.len() * 4);
        for &p in idx {
            coords.extend_from_slice(&ds.pos(frame, p));
            coords.push(t);
        }
        let x = Tensor::new(vec![idx.len(), 4], coords)?;
        let (out, _) = model.forward(t, &x, true)?;
        for (i, &p) in idx.iter().enumerate() {
            let pos = ds.pos(frame, p);
            let (fwd, bwd) = head.decode(out.row(i), pos, frames, frame);
            let gt_f = ds.flow_fwd(frame, p);
            let gt_b = ds.flow_bwd(frame, p);
            for c in 0..3 {
                err_f += (fwd[c] - gt_f[c]).abs();
                err_b += (bwd[c] - gt_b[c]).abs();
            }
            count += 3;
        }
    }
    Ok((err_f / count as f64, err_b / count as f64))
}

// ---------------------------------------------------------------------------
// end-to-end runs

#[derive(Debug)]
pub struct RunOutcome {
    pub model: FieldModel,
    pub opt: AdamState,
    pub final_loss: f64,
    /// Task metric on training data (PSNR dB / Chamfer x10^3 / L1).
    pub train_metric: f64,
    /// Task metric on held-out data.
    pub test_metric: f64,
}

fn flow_dataset(cfg: &RunConfig) -> Result<FlowDataset> {
    let params = FlowGenParams {
        wiggle_amp: cfg.data.flow_wiggle,
        ..FlowGenParams::default()
    };
    gen_flow_with(cfg.seed, cfg.data.frames, cfg.data.points, params)
}

/// Task metrics (train, held-out) for an already-built model: video PSNR
/// per split, signed-distance Chamfer x10^3 averaged over three probe
/// times (reported for both), flow L1 per point subset.
pub fn evaluate(cfg: &RunConfig, model: &FieldModel) -> Result<(f64, f64)> {
    match cfg.task {
        TaskKind::Video => {
            let mut ds = match &cfg.data.frame_dir {
                Some(dir) => load_video_dir(Path::new(dir))?,
                None => gen_video(
                    cfg.seed,
                    cfg.data.frames,
                    cfg.data.height,
                    cfg.data.width,
                    cfg.data.segments,
                )?,
            };
            ds.assign_holdout(cfg.data.holdout, cfg.seed)?;
            Ok((
                video_psnr(model, &ds, Split::Train)?,
                video_psnr(model, &ds, Split::Test)?,
            ))
        }
        TaskKind::Sdf => {
            let scene = pulsating_scene(cfg.data.frames);
            let mut cd = 0.0;
            for &t in &[0.0, 0.5, 1.0] {
                cd += 1e3 * sdf_chamfer(model, &scene, t, 48, 10_000, cfg.seed)?;
            }
            cd /= 3.0;
            Ok((cd, cd))
        }
        TaskKind::Flow => {
            let head = cfg.flow_head.unwrap_or(FlowHead::Offset);
            let ds = flow_dataset(cfg)?;
            let (tr_f, tr_b) = flow_eval(model, head, &ds, &ds.train_idx)?;
            let (ev_f, ev_b) = flow_eval(model, head, &ds, &ds.eval_idx)?;
            Ok((0.5 * (tr_f + tr_b), 0.5 * (ev_f + ev_b)))
        }
    }
}

/// Trains per config and reports final metrics. `log` receives the step
/// CSV. Checkpoint and config echo are written to `out_dir` when set.
pub fn run(cfg: &RunConfig, mut log: Option<&mut dyn Write>) -> Result<RunOutcome> {
    let spec = cfg.model_spec()?;
    let mut init_rng = substream(cfg.seed, "init");
    let mut model = build_model(&spec, &mut init_rng)?;
    let mut opt = AdamState::new();
    let params = TrainParams {
        steps: cfg.optim.steps,
        lr0: cfg.optim.lr0,
        lr_min: cfg.optim.lr_min,
        log_every: cfg.optim.log_every,
    };
    let mut batch_rng = substream(cfg.seed, "batch");
    let final_loss = match cfg.task {
        TaskKind::Video => {
            let mut ds = match &cfg.data.frame_dir {
                Some(dir) => load_video_dir(Path::new(dir))?,
                None => gen_video(
                    cfg.seed,
                    cfg.data.frames,
                    cfg.data.height,
                    cfg.data.width,
                    cfg.data.segments,
                )?,
            };
            ds.assign_holdout(cfg.data.holdout, cfg.seed)?;
            train(
                &mut model,
                &mut opt,
                &params,
                |m, _| video_train_step(m, &ds, cfg.data.batch, &mut batch_rng),
                log.take(),
            )?
            .final_loss
        }
        TaskKind::Sdf => {
            let scene = pulsating_scene(cfg.data.frames);
            let sigma = cfg.data.sdf_sigma;
            let eps = cfg.data.sdf_eps;
            train(
                &mut model,
                &mut opt,
                &params,
                |m, _| sdf_train_step(m, &scene, cfg.data.batch, sigma, eps, &mut batch_rng),
                log.take(),
            )?
            .final_loss
        }
        TaskKind::Flow => {
            let head = cfg.flow_head.unwrap_or(FlowHead::Offset);
            let ds = flow_dataset(cfg)?;
            train(
                &mut model,
                &mut opt,
                &params,
                |m, _| flow_train_step(m, head, &ds, cfg.data.batch, &mut batch_rng),
                log.take(),
            )?
            .final_loss
        }
    };
    let (train_metric, test_metric) = evaluate(cfg, &model)?;
    if let Some(dir) = &cfg.out_dir {
        let dir = Path::new(dir);
        std::fs::create_dir_all(dir)?;
        let echo = serde_json::to_string_pretty(cfg)?;
        save_checkpoint(
            &dir.join("model.rfck"),
            &echo,
            &state_tensors(&model, Some(&opt)),
        )?;
    }
    Ok(RunOutcome {
        model,
        opt,
        final_loss,
        train_metric,
        test_metric,
    })
}
