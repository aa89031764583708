//! Deterministic synthetic datasets for the three tasks (video fitting,
//! temporal signed distance, scene flow), train/test splits, batch samplers,
//! the task losses, and a binary-PPM frame-directory loader.

use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::seed::substream;
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{PI, TAU};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

// ---------------------------------------------------------------------------
// video

#[derive(Debug, Clone)]
pub struct VideoDataset {
    /// [F x H x W x 3], values in [0,1].
    pub frames: Tensor,
    /// true = held out for evaluation; linear index ((f*H)+y)*W + x.
    pub test_mask: Vec<bool>,
    pub segments: usize,
    train_ids: Vec<u32>,
    test_ids: Vec<u32>,
}

struct Blob {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    sigma: f64,
    amp: f64,
    color: [f64; 3],
}

struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
    speed: f64,
    amp: f64,
    color: [f64; 3],
}

/// Procedural video: moving Gaussian blobs over drifting sinusoidal
/// gratings. Content re-seeds at each segment boundary, so segments = F
/// produces temporally incoherent frames and segments = 1 a smooth clip.
pub fn gen_video(seed: u64, f: usize, h: usize, w: usize, segments: usize) -> Result<VideoDataset> {
    if f == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("empty video dimensions".into()));
    }
    if segments == 0 || segments > f {
        return Err(Error::InvalidArgument(format!(
            "segments must be in 1..={f}, got {segments}"
        )));
    }
    let mut data = vec![0.0; f * h * w * 3];
    for g in 0..segments {
        let start = g * f / segments;
        let end = (g + 1) * f / segments;
        let len = end - start;
        let mut rng = substream(seed, &format!("video.seg{g}"));
        let blobs: Vec<Blob> = (0..3)
            .map(|_| Blob {
                cx: rng.gen_range(0.15..0.85),
                cy: rng.gen_range(0.15..0.85),
                vx: rng.gen_range(-0.35..0.35),
                vy: rng.gen_range(-0.35..0.35),
                sigma: rng.gen_range(0.06..0.18),
                amp: rng.gen_range(0.5..0.9),
                color: [
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                ],
            })
            .collect();
        let gratings: Vec<Grating> = (0..2)
            .map(|_| {
                let freq = rng.gen_range(1..4) as f64;
                let angle = rng.gen_range(0.0..PI);
                Grating {
                    kx: TAU * freq * angle.cos(),
                    ky: TAU * freq * angle.sin(),
                    phase: rng.gen_range(0.0..TAU),
                    speed: rng.gen_range(-3.0..3.0),
                    amp: rng.gen_range(0.08..0.2),
                    color: [
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                    ],
                }
            })
            .collect();
        for frame in start..end {
            let tl = if len > 1 {
                (frame - start) as f64 / (len - 1) as f64
            } else {
                0.0
            };
            for y in 0..h {
                let yn = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.5 };
                for x in 0..w {
                    let xn = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.5 };
                    let mut px = [0.05; 3];
                    for b in &blobs {
                        let dx = xn - (b.cx + b.vx * tl);
                        let dy = yn - (b.cy + b.vy * tl);
                        let e = (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
                        for c in 0..3 {
                            px[c] += b.amp * b.color[c] * e;
                        }
                    }
                    for gr in &gratings {
                        let s =
                            0.5 + 0.5 * (gr.kx * xn + gr.ky * yn + gr.phase + gr.speed * tl).sin();
                        for c in 0..3 {
                            px[c] += gr.amp * gr.color[c] * s;
                        }
                    }
                    let base = ((frame * h + y) * w + x) * 3;
                    for c in 0..3 {
                        data[base + c] = px[c].clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    let total = f * h * w;
    Ok(VideoDataset {
        frames: Tensor::new(vec![f, h, w, 3], data)?,
        test_mask: vec![false; total],
        segments,
        train_ids: (0..total as u32).collect(),
        test_ids: Vec::new(),
    })
}

impl VideoDataset {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2])
    }

    /// Marks round(total * fraction) pixels, chosen uniformly, as held out.
    /// The split partitions the pixel set exactly.
    pub fn assign_holdout(&mut self, fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction {fraction} outside [0,1)"
            )));
        }
        let total = self.test_mask.len();
        let k = (total as f64 * fraction).round() as usize;
        let mut rng = substream(seed, "holdout");
        self.test_mask.iter_mut().for_each(|m| *m = false);
        for idx in index_sample(&mut rng, total, k) {
            self.test_mask[idx] = true;
        }
        self.train_ids = (0..total as u32)
            .filter(|&i| !self.test_mask[i as usize])
            .collect();
        self.test_ids = (0..total as u32)
            .filter(|&i| self.test_mask[i as usize])
            .collect();
        Ok(())
    }

    pub fn split_ids(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train_ids,
            Split::Test => &self.test_ids,
        }
    }

    /// (t, y, x) scaled to [-1,1] for network input.
    pub fn coord(&self, id: u32) -> [f64; 3] {
        let (f, h, w) = self.dims();
        let id = id as usize;
        let x = id % w;
        let y = (id / w) % h;
        let fr = id / (w * h);
        let norm = |v: usize, n: usize| {
            if n > 1 {
                2.0 * v as f64 / (n - 1) as f64 - 1.0
            } else {
                0.0
            }
        };
        [norm(fr, f), norm(y, h), norm(x, w)]
    }

    pub fn rgb(&self, id: u32) -> [f64; 3] {
        let d = &self.frames.data()[id as usize * 3..id as usize * 3 + 3];
        [d[0], d[1], d[2]]
    }

    pub fn frame_of(&self, id: u32) -> usize {
        let (_, h, w) = self.dims();
        id as usize / (w * h)
    }

    /// Ids of one frame within a split (ids are sorted by construction).
    pub fn frame_split_ids(&self, frame: usize, split: Split) -> &[u32] {
        let (_, h, w) = self.dims();
        let lo = (frame * h * w) as u32;
        let hi = ((frame + 1) * h * w) as u32;
        let ids = self.split_ids(split);
        let a = ids.partition_point(|&i| i < lo);
        let b = ids.partition_point(|&i| i < hi);
        &ids[a..b]
    }
}

/// Normalized time of a frame index for residual evaluation.
pub fn frame_t_norm(frame: usize, frames: usize) -> f64 {
    if frames > 1 {
        frame as f64 / (frames - 1) as f64
    } else {
        0.0
    }
}

/// Uniform pixel batch over a split as (coords [n x 3], rgb [n x 3]).
/// Without replacement, n must not exceed the split size; n equal to the
/// split size yields an exact permutation.
pub fn sample_video_batch(
    ds: &VideoDataset,
    n: usize,
    split: Split,
    replace: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let ids = ds.split_ids(split);
    if ids.is_empty() {
        return Err(Error::Sampling("empty split".into()));
    }
    let chosen: Vec<u32> = if replace {
        (0..n).map(|_| ids[rng.gen_range(0..ids.len())]).collect()
    } else {
        if n > ids.len() {
            return Err(Error::Sampling(format!(
                "batch of {n} without replacement from split of {}",
                ids.len()
            )));
        }
        index_sample(rng, ids.len(), n)
            .into_iter()
            .map(|i| ids[i])
            .collect()
    };
    ids_to_batch(ds, &chosen)
}

/// Frame-coherent batch: pixels drawn with replacement from one frame of a
/// split, so the whole batch shares a single residual time.
pub fn sample_frame_batch(
    ds: &VideoDataset,
    frame: usize,
    n: usize,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let ids = ds.frame_split_ids(frame, split);
    if ids.is_empty() {
        return Err(Error::Sampling(format!("frame {frame}: empty split")));
    }
    let chosen: Vec<u32> = (0..n).map(|_| ids[rng.gen_range(0..ids.len())]).collect();
    ids_to_batch(ds, &chosen)
}

fn ids_to_batch(ds: &VideoDataset, ids: &[u32]) -> Result<(Tensor, Tensor)> {
    let mut coords = Vec::with_capacity(ids.len() * 3);
    let mut rgb = Vec::with_capacity(ids.len() * 3);
    for &id in ids {
        coords.extend_from_slice(&ds.coord(id));
        rgb.extend_from_slice(&ds.rgb(id));
    }
    Ok((
        Tensor::new(vec![ids.len(), 3], coords)?,
        Tensor::new(vec![ids.len(), 3], rgb)?,
    ))
}

// ---------------------------------------------------------------------------
// temporal SDF

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Radius r0 + pulse_amp * sin(2 pi pulse_freq t).
    Sphere {
        center: [f64; 3],
        radius: f64,
        pulse_amp: f64,
        pulse_freq: f64,
    },
    /// Axis-z torus whose center orbits in the xy-plane.
    Torus {
        center: [f64; 3],
        major: f64,
        minor: f64,
        orbit_radius: f64,
        orbit_freq: f64,
    },
    /// Segment a-b with radius; endpoints sway along x over time.
    Capsule {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
        sway_amp: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSdfScene {
    pub primitives: Vec<Primitive>,
    pub frames: usize,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl Primitive {
    fn sdf(&self, x: [f64; 3], t: f64) -> f64 {
        match *self {
            Primitive::Sphere {
                center,
                radius,
                pulse_amp,
                pulse_freq,
            } => norm(sub(x, center)) - (radius + pulse_amp * (TAU * pulse_freq * t).sin()),
            Primitive::Torus {
                center,
                major,
                minor,
                orbit_radius,
                orbit_freq,
            } => {
                let c = torus_center(center, orbit_radius, orbit_freq, t);
                let p = sub(x, c);
                let q = ((p[0] * p[0] + p[1] * p[1]).sqrt() - major, p[2]);
                (q.0 * q.0 + q.1 * q.1).sqrt() - minor
            }
            Primitive::Capsule {
                a,
                b,
                radius,
                sway_amp,
            } => {
                let shift = sway_amp * (TAU * t).sin();
                let a = [a[0] + shift, a[1], a[2]];
                let b = [b[0] + shift, b[1], b[2]];
                let ab = sub(b, a);
                let ap = sub(x, a);
                let denom = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
                let h = if denom > 0.0 {
                    ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / denom).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                norm([ap[0] - ab[0] * h, ap[1] - ab[1] * h, ap[2] - ab[2] * h]) - radius
            }
        }
    }

    fn area(&self, t: f64) -> f64 {
        match *self {
            Primitive::Sphere {
                radius,
                pulse_amp,
                pulse_freq,
                ..
            } => {
                let r = radius + pulse_amp * (TAU * pulse_freq * t).sin();
                4.0 * PI * r * r
            }
            Primitive::Torus { major, minor, .. } => 4.0 * PI * PI * major * minor,
            Primitive::Capsule { a, b, radius, .. } => {
                TAU * radius * norm(sub(b, a)) + 4.0 * PI * radius * radius
            }
        }
    }

    fn surface_point<R: Rng>(&self, t: f64, rng: &mut R) -> [f64; 3] {
        match *self {
            Primitive::Sphere {
                center,
                radius,
                pulse_amp,
                pulse_freq,
            } => {
                let r = radius + pulse_amp * (TAU * pulse_freq * t).sin();
                let d = unit_vector(rng);
                [
                    center[0] + r * d[0],
                    center[1] + r * d[1],
                    center[2] + r * d[2],
                ]
            }
            Primitive::Torus {
                center,
                major,
                minor,
                orbit_radius,
                orbit_freq,
            } => {
                let c = torus_center(center, orbit_radius, orbit_freq, t);
                let u = rng.gen_range(0.0..TAU);
                let v = rng.gen_range(0.0..TAU);
                [
                    c[0] + (major + minor * v.cos()) * u.cos(),
                    c[1] + (major + minor * v.cos()) * u.sin(),
                    c[2] + minor * v.sin(),
                ]
            }
            Primitive::Capsule {
                a,
                b,
                radius,
                sway_amp,
            } => {
                let shift = sway_amp * (TAU * t).sin();
                let a = [a[0] + shift, a[1], a[2]];
                let b = [b[0] + shift, b[1], b[2]];
                let ab = sub(b, a);
                let len = norm(ab);
                let side_area = TAU * radius * len;
                let cap_area = 4.0 * PI * radius * radius;
                if rng.gen_range(0.0..side_area + cap_area) < side_area && len > 0.0 {
                    // cylindrical side: frame (ab, n1, n2)
                    let axis = [ab[0] / len, ab[1] / len, ab[2] / len];
                    let (n1, n2) = orthonormal_pair(axis);
                    let h = rng.gen_range(0.0..1.0);
                    let phi = rng.gen_range(0.0..TAU);
                    let mut p = [0.0; 3];
                    for i in 0..3 {
                        p[i] = a[i]
                            + ab[i] * h
                            + radius * (phi.cos() * n1[i] + phi.sin() * n2[i]);
                    }
                    p
                } else {
                    // hemispherical caps: full-sphere point snapped to the
                    // outward hemisphere of a random endpoint
                    let d = unit_vector(rng);
                    let (end, sign) = if rng.gen_bool(0.5) { (b, 1.0) } else { (a, -1.0) };
                    let axis = if len > 0.0 {
                        [ab[0] / len, ab[1] / len, ab[2] / len]
                    } else {
                        [0.0, 0.0, 1.0]
                    };
                    let dot = d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2];
                    let mut d = d;
                    if dot * sign < 0.0 {
                        d = [-d[0], -d[1], -d[2]];
                    }
                    [
                        end[0] + radius * d[0],
                        end[1] + radius * d[1],
                        end[2] + radius * d[2],
                    ]
                }
            }
        }
    }
}

fn torus_center(center: [f64; 3], orbit_radius: f64, orbit_freq: f64, t: f64) -> [f64; 3] {
    let ang = TAU * orbit_freq * t;
    [
        center[0] + orbit_radius * ang.cos(),
        center[1] + orbit_radius * ang.sin(),
        center[2],
    ]
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = norm(v);
        if n > 1e-6 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn orthonormal_pair(axis: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if axis[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let mut n1 = [
        axis[1] * helper[2] - axis[2] * helper[1],
        axis[2] * helper[0] - axis[0] * helper[2],
        axis[0] * helper[1] - axis[1] * helper[0],
    ];
    let l = norm(n1);
    n1 = [n1[0] / l, n1[1] / l, n1[2] / l];
    let n2 = [
        axis[1] * n1[2] - axis[2] * n1[1],
        axis[2] * n1[0] - axis[0] * n1[2],
        axis[0] * n1[1] - axis[1] * n1[0],
    ];
    (n1, n2)
}

/// Exact union SDF: min over primitives.
pub fn sdf_eval(scene: &TemporalSdfScene, x: [f64; 3], t_norm: f64) -> f64 {
    scene
        .primitives
        .iter()
        .map(|p| p.sdf(x, t_norm))
        .fold(f64::INFINITY, f64::min)
}

/// The benchmark scene: a pulsating sphere on the left, an orbiting torus
/// on the right, kept apart so each keeps its own surface basin.
pub fn pulsating_scene(frames: usize) -> TemporalSdfScene {
    TemporalSdfScene {
        primitives: vec![
            Primitive::Sphere {
                center: [-0.4, 0.0, 0.0],
                radius: 0.3,
                pulse_amp: 0.08,
                pulse_freq: 1.0,
            },
            Primitive::Torus {
                center: [0.45, 0.0, 0.0],
                major: 0.22,
                minor: 0.07,
                orbit_radius: 0.08,
                orbit_freq: 1.0,
            },
        ],
        frames,
    }
}

/// Batch for SDF training at one time: 50% on-surface, 37.5% near-surface
/// (Gaussian offsets, sigma), 12.5% uniform in [-1,1]^3. Counts use integer
/// division so n=8 gives 4/3/1. Surface draws are rejected while strictly
/// inside another primitive.
pub fn sample_sdf_batch(
    scene: &TemporalSdfScene,
    n: usize,
    t_norm: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    if n < 8 {
        return Err(Error::Sampling(format!("sdf batch needs n >= 8, got {n}")));
    }
    let n_surface = n / 2;
    let n_near = 3 * n / 8;
    let n_free = n - n_surface - n_near;
    let areas: Vec<f64> = scene.primitives.iter().map(|p| p.area(t_norm)).collect();
    let total_area: f64 = areas.iter().sum();
    if total_area <= 0.0 {
        return Err(Error::Sampling("scene has no surface area".into()));
    }
    let mut points = Vec::with_capacity(n * 3);
    let mut targets = Vec::with_capacity(n);
    let mut surface_pts = Vec::with_capacity(n_surface);
    let mut draws = 0usize;
    while surface_pts.len() < n_surface + n_near {
        draws += 1;
        if draws > 200 * (n_surface + n_near) {
            return Err(Error::Sampling(
                "surface rejection failed: primitives overlap almost everywhere".into(),
            ));
        }
        let mut pick = rng.gen_range(0.0..total_area);
        let mut k = 0;
        for (i, &a) in areas.iter().enumerate() {
            if pick < a {
                k = i;
                break;
            }
            pick -= a;
        }
        let p = scene.primitives[k].surface_point(t_norm, rng);
        // keep only points on the union surface
        if sdf_eval(scene, p, t_norm) > -1e-9 {
            surface_pts.push(p);
        }
    }
    for (i, p) in surface_pts.iter().enumerate() {
        if i < n_surface {
            points.extend_from_slice(p);
            targets.push(0.0);
        } else {
            let q = [
                p[0] + sigma * gauss(rng),
                p[1] + sigma * gauss(rng),
                p[2] + sigma * gauss(rng),
            ];
            points.extend_from_slice(&q);
            targets.push(sdf_eval(scene, q, t_norm));
        }
    }
    for _ in 0..n_free {
        let q = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        points.extend_from_slice(&q);
        targets.push(sdf_eval(scene, q, t_norm));
    }
    Ok((
        Tensor::new(vec![n, 3], points)?,
        Tensor::new(vec![n, 1], targets.clone())?,
    ))
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// scene flow

#[derive(Debug, Clone)]
pub struct FlowDataset {
    /// [F x P x 3] tracked positions.
    pub positions: Tensor,
    pub train_idx: Vec<usize>,
    pub eval_idx: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct FlowGenParams {
    /// Total rotation about z over the sequence, in turns.
    pub rot_turns: f64,
    /// Per-axis sinusoidal scaling amplitude.
    pub scale_amp: [f64; 3],
    /// Sinusoidal bending along x driven by z.
    pub bend_amp: f64,
    /// Per-frame random rigid translation amplitude. Frame-granular motion
    /// that no smooth function of t can follow.
    pub wiggle_amp: f64,
}

impl Default for FlowGenParams {
    fn default() -> Self {
        FlowGenParams {
            rot_turns: 0.25,
            scale_amp: [0.2, 0.12, 0.05],
            bend_amp: 0.15,
            wiggle_amp: 0.0,
        }
    }
}

/// Points tracked on a deforming sphere: rotation about z, anisotropic
/// pulsating scale, and a z-driven bend along x. 80% of points train, 20%
/// evaluate.
pub fn gen_flow(seed: u64, frames: usize, points: usize) -> Result<FlowDataset> {
    gen_flow_with(seed, frames, points, FlowGenParams::default())
}

pub fn gen_flow_with(
    seed: u64,
    frames: usize,
    points: usize,
    params: FlowGenParams,
) -> Result<FlowDataset> {
    if frames < 3 || points < 10 {
        return Err(Error::InvalidArgument(format!(
            "flow needs frames >= 3 and points >= 10, got {frames}/{points}"
        )));
    }
    let mut rng = substream(seed, "flow.points");
    let base: Vec<[f64; 3]> = (0..points)
        .map(|_| {
            let d = unit_vector(&mut rng);
            [0.5 * d[0], 0.5 * d[1], 0.5 * d[2]]
        })
        .collect();
    let mut wiggle_rng = substream(seed, "flow.wiggle");
    let wiggles: Vec<[f64; 3]> = (0..frames)
        .map(|_| {
            let d = unit_vector(&mut wiggle_rng);
            [
                params.wiggle_amp * d[0],
                params.wiggle_amp * d[1],
                params.wiggle_amp * d[2],
            ]
        })
        .collect();
    let mut data = vec![0.0; frames * points * 3];
    for f in 0..frames {
        let t = frame_t_norm(f, frames);
        let ang = TAU * params.rot_turns * t;
        let (s, c) = ang.sin_cos();
        for (p, b) in base.iter().enumerate() {
            let rx = c * b[0] - s * b[1];
            let ry = s * b[0] + c * b[1];
            let rz = b[2];
            let sx = 1.0 + params.scale_amp[0] * (TAU * t).sin();
            let sy = 1.0 + params.scale_amp[1] * (TAU * t).sin();
            let sz = 1.0 + params.scale_amp[2] * (TAU * t).sin();
            let mut q = [rx * sx, ry * sy, rz * sz];
            q[0] += params.bend_amp * (PI * q[2] + TAU * t).sin() * 0.5;
            q[0] += wiggles[f][0];
            q[1] += wiggles[f][1];
            q[2] += wiggles[f][2];
            let off = (f * points + p) * 3;
            data[off..off + 3].copy_from_slice(&q);
        }
    }
    let mut split_rng = substream(seed, "flow.split");
    let n_eval = points / 5;
    let mut eval_idx: Vec<usize> = index_sample(&mut split_rng, points, n_eval).into_vec();
    eval_idx.sort_unstable();
    let train_idx: Vec<usize> = (0..points).filter(|i| !eval_idx.contains(i)).collect();
    Ok(FlowDataset {
        positions: Tensor::new(vec![frames, points, 3], data)?,
        train_idx,
        eval_idx,
    })
}

impl FlowDataset {
    pub fn frames(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn pos(&self, frame: usize, point: usize) -> [f64; 3] {
        let off = (frame * self.points() + point) * 3;
        let d = &self.positions.data()[off..off + 3];
        [d[0], d[1], d[2]]
    }

    /// pos[t+1] - pos[t]; defined for t < F-1.
    pub fn flow_fwd(&self, frame: usize, point: usize) -> [f64; 3] {
        let a = self.pos(frame, point);
        let b = self.pos(frame + 1, point);
        sub(b, a)
    }

    /// pos[t-1] - pos[t]; defined for t > 0.
    pub fn flow_bwd(&self, frame: usize, point: usize) -> [f64; 3] {
        let a = self.pos(frame, point);
        let b = self.pos(frame - 1, point);
        sub(b, a)
    }
}

// ---------------------------------------------------------------------------
// losses

/// Mean squared difference and its gradient with respect to pred.
pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same(pred, target, "loss_mse")?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for (i, (&p, &g)) in pred.data().iter().zip(target.data()).enumerate() {
        let e = p - g;
        loss += e * e;
        grad.data_mut()[i] = 2.0 * e / n;
    }
    Ok((loss / n, grad))
}

/// Mean absolute percentage error with additive epsilon in the denominator.
pub fn loss_mape(pred: &Tensor, target: &Tensor, eps: f64) -> Result<(f64, Tensor)> {
    check_same(pred, target, "loss_mape")?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for (i, (&p, &g)) in pred.data().iter().zip(target.data()).enumerate() {
        let denom = g.abs() + eps;
        loss += (p - g).abs() / denom;
        grad.data_mut()[i] = (p - g).signum() / (denom * n);
    }
    Ok((loss / n, grad))
}

/// Mean absolute difference.
pub fn loss_l1(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same(pred, target, "loss_l1")?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for (i, (&p, &g)) in pred.data().iter().zip(target.data()).enumerate() {
        loss += (p - g).abs();
        grad.data_mut()[i] = (p - g).signum() / n;
    }
    Ok((loss / n, grad))
}

fn check_same(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PPM frames

/// Writes an 8-bit binary PPM (P6). `rgb` is row-major [h x w x 3] in [0,1].
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::InvalidArgument(format!(
            "ppm buffer {} != {}x{}x3",
            rgb.len(),
            w,
            h
        )));
    }
    let mut out = std::fs::File::create(path)?;
    write!(out, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = rgb
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads an 8-bit binary PPM (P6) into (w, h, [0,1] rgb).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let magic = read_token(&mut r)?;
    if magic != "P6" {
        return Err(Error::InvalidArgument(format!(
            "{}: not a P6 ppm (magic {magic:?})",
            path.display()
        )));
    }
    let w: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::InvalidArgument("bad ppm width".into()))?;
    let h: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::InvalidArgument("bad ppm height".into()))?;
    let maxval: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::InvalidArgument("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(Error::InvalidArgument(format!(
            "only 8-bit ppm supported, maxval {maxval}"
        )));
    }
    let mut buf = vec![0u8; w * h * 3];
    r.read_exact(&mut buf)?;
    Ok((w, h, buf.iter().map(|&b| b as f64 / 255.0).collect()))
}

/// One whitespace-delimited header token, skipping `#` comments; consumes
/// exactly one trailing whitespace byte so binary data stays aligned.
fn read_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        match byte[0] {
            b'#' => {
                let mut line = String::new();
                r.read_line(&mut line)?;
            }
            b' ' | b'\t' | b'\n' | b'\r' => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            c => tok.push(c as char),
        }
    }
}

/// Loads `frame_%05d.ppm` files (starting at 0) from a directory into a
/// video dataset with a single segment and no held-out pixels yet.
pub fn load_video_dir(dir: &Path) -> Result<VideoDataset> {
    let mut frames = Vec::new();
    let mut dims = None;
    loop {
        let path = dir.join(format!("frame_{:05}.ppm", frames.len()));
        if !path.exists() {
            break;
        }
        let (w, h, rgb) = read_ppm(&path)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::InvalidArgument(format!(
                    "{}: frame size {w}x{h} differs from {}x{}",
                    path.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        frames.push(rgb);
    }
    let Some((w, h)) = dims else {
        return Err(Error::InvalidArgument(format!(
            "{}: no frame_00000.ppm found",
            dir.display()
        )));
    };
    let f = frames.len();
    let data: Vec<f64> = frames.into_iter().flatten().collect();
    let total = f * h * w;
    Ok(VideoDataset {
        frames: Tensor::new(vec![f, h, w, 3], data)?,
        test_mask: vec![false; total],
        segments: 1,
        train_ids: (0..total as u32).collect(),
        test_ids: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn video_deterministic_and_bounded() {
        let a = gen_video(7, 4, 8, 8, 2).unwrap();
        let b = gen_video(7, 4, 8, 8, 2).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
        assert!(a
            .frames
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn segment_reseed_breaks_coherence() {
        let smooth = gen_video(11, 16, 16, 16, 1).unwrap();
        let random = gen_video(11, 16, 16, 16, 16).unwrap();
        let mad = |ds: &VideoDataset| {
            let (f, h, w) = ds.dims();
            let d = ds.frames.data();
            let mut acc = 0.0;
            for fr in 1..f {
                for i in 0..h * w * 3 {
                    acc += (d[fr * h * w * 3 + i] - d[(fr - 1) * h * w * 3 + i]).abs();
                }
            }
            acc / ((f - 1) * h * w * 3) as f64
        };
        assert!(mad(&random) > mad(&smooth));
    }

    #[test]
    fn holdout_partitions_exactly() {
        let mut ds = gen_video(3, 5, 10, 10, 1).unwrap();
        ds.assign_holdout(0.1, 99).unwrap();
        let total = 5 * 10 * 10;
        assert_eq!(ds.split_ids(Split::Test).len(), total / 10);
        assert_eq!(
            ds.split_ids(Split::Train).len() + ds.split_ids(Split::Test).len(),
            total
        );
        for &id in ds.split_ids(Split::Test) {
            assert!(ds.test_mask[id as usize]);
        }
        for &id in ds.split_ids(Split::Train) {
            assert!(!ds.test_mask[id as usize]);
        }
    }

    #[test]
    fn full_batch_without_replacement_is_permutation() {
        let mut ds = gen_video(5, 2, 4, 4, 1).unwrap();
        ds.assign_holdout(0.25, 1).unwrap();
        let mut rng = substream(1, "batch");
        let n = ds.split_ids(Split::Test).len();
        let (coords, _) = sample_video_batch(&ds, n, Split::Test, false, &mut rng).unwrap();
        assert_eq!(coords.shape()[0], n);
        let err = sample_video_batch(&ds, n + 1, Split::Test, false, &mut rng);
        assert!(err.is_err());
        // every drawn coordinate belongs to a held-out pixel
        let mut seen = std::collections::HashSet::new();
        for row in 0..n {
            let c = coords.row(row);
            seen.insert(format!("{:?}", c));
        }
        assert_eq!(seen.len(), n, "permutation must not repeat pixels");
    }

    #[test]
    fn frame_batch_stays_in_frame_and_split() {
        let mut ds = gen_video(17, 4, 6, 6, 1).unwrap();
        ds.assign_holdout(0.3, 2).unwrap();
        let mut rng = substream(3, "batch");
        let (coords, _) = sample_frame_batch(&ds, 2, 32, Split::Train, &mut rng).unwrap();
        let expect_t = 2.0 * (2.0 / 3.0) - 1.0;
        for row in 0..32 {
            assert!((coords.row(row)[0] - expect_t).abs() < 1e-15);
        }
    }

    #[test]
    fn sdf_sphere_values() {
        let scene = TemporalSdfScene {
            primitives: vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.5,
                pulse_amp: 0.0,
                pulse_freq: 0.0,
            }],
            frames: 2,
        };
        assert!((sdf_eval(&scene, [0.0; 3], 0.0) + 0.5).abs() < 1e-12);
        assert!(sdf_eval(&scene, [0.5, 0.0, 0.0], 0.0).abs() < 1e-12);
        assert!(sdf_eval(&scene, [1.0, 0.0, 0.0], 0.0) > 0.0);
    }

    #[test]
    fn sdf_union_negative_inside_either() {
        let scene = TemporalSdfScene {
            primitives: vec![
                Primitive::Sphere {
                    center: [-0.5, 0.0, 0.0],
                    radius: 0.3,
                    pulse_amp: 0.0,
                    pulse_freq: 0.0,
                },
                Primitive::Sphere {
                    center: [0.5, 0.0, 0.0],
                    radius: 0.3,
                    pulse_amp: 0.0,
                    pulse_freq: 0.0,
                },
            ],
            frames: 2,
        };
        assert!(sdf_eval(&scene, [-0.5, 0.0, 0.0], 0.0) < 0.0);
        assert!(sdf_eval(&scene, [0.5, 0.0, 0.0], 0.0) < 0.0);
        assert!(sdf_eval(&scene, [0.0, 0.0, 0.0], 0.0) > 0.0);
    }

    #[test]
    fn sdf_lipschitz_property() {
        let scene = pulsating_scene(10);
        let mut rng = substream(5, "lipschitz");
        for _ in 0..10_000 {
            let a = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let b = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let t = rng.gen_range(0.0..1.0);
            let lhs = (sdf_eval(&scene, a, t) - sdf_eval(&scene, b, t)).abs();
            assert!(lhs <= norm(sub(a, b)) + 1e-9);
        }
    }

    #[test]
    fn sdf_batch_mixture_and_surface_accuracy() {
        let scene = pulsating_scene(10);
        let mut rng = substream(6, "sdf.batch");
        let (points, targets) = sample_sdf_batch(&scene, 8, 0.3, 0.1, &mut rng).unwrap();
        assert_eq!(points.shape(), &[8, 3]);
        // first 4 are on-surface
        for i in 0..4 {
            let p = points.row(i);
            assert!(
                sdf_eval(&scene, [p[0], p[1], p[2]], 0.3).abs() < 1e-9,
                "surface point {i}"
            );
            assert_eq!(targets.data()[i], 0.0);
        }
        // remaining targets match direct evaluation
        for i in 4..8 {
            let p = points.row(i);
            let want = sdf_eval(&scene, [p[0], p[1], p[2]], 0.3);
            assert_eq!(targets.data()[i], want);
        }
    }

    #[test]
    fn sdf_free_points_cover_octants() {
        let scene = pulsating_scene(4);
        let mut rng = substream(7, "sdf.cover");
        let n = 4096;
        let (points, _) = sample_sdf_batch(&scene, n, 0.5, 0.1, &mut rng).unwrap();
        let n_free = n - n / 2 - 3 * n / 8;
        let mut counts = [0usize; 8];
        for i in (n - n_free)..n {
            let p = points.row(i);
            let oct = (p[0] > 0.0) as usize | ((p[1] > 0.0) as usize) << 1
                | ((p[2] > 0.0) as usize) << 2;
            counts[oct] += 1;
        }
        let expect = n_free as f64 / 8.0;
        let sigma = (expect * (1.0 - 1.0 / 8.0)).sqrt();
        for (o, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() < 4.0 * sigma,
                "octant {o}: {c} vs {expect}"
            );
        }
    }

    #[test]
    fn flow_deterministic_and_consistent() {
        let a = gen_flow(13, 8, 20).unwrap();
        let b = gen_flow(13, 8, 20).unwrap();
        assert_eq!(a.positions.data(), b.positions.data());
        for p in 0..20 {
            for t in 0..7 {
                let f = a.flow_fwd(t, p);
                let bwd = a.flow_bwd(t + 1, p);
                for c in 0..3 {
                    assert_eq!(bwd[c], -f[c]);
                }
            }
        }
        assert_eq!(a.train_idx.len() + a.eval_idx.len(), 20);
        assert_eq!(a.eval_idx.len(), 4);
        for i in &a.eval_idx {
            assert!(!a.train_idx.contains(i));
        }
    }

    #[test]
    fn rigid_rotation_flow_magnitude_uniform_at_equal_radius() {
        let params = FlowGenParams {
            rot_turns: 0.25,
            scale_amp: [0.0; 3],
            bend_amp: 0.0,
            wiggle_amp: 0.0,
        };
        let ds = gen_flow_with(21, 6, 30, params).unwrap();
        // flow magnitude of a z-rotation depends only on xy-radius
        let mag = |v: [f64; 3]| norm(v);
        for t in 0..5 {
            let mut samples: Vec<(f64, f64)> = Vec::new();
            for p in 0..30 {
                let pos = ds.pos(t, p);
                let r_xy = (pos[0] * pos[0] + pos[1] * pos[1]).sqrt();
                samples.push((r_xy, mag(ds.flow_fwd(t, p))));
            }
            for w in samples.windows(2) {
                let (r0, m0) = w[0];
                let (r1, m1) = w[1];
                if (r0 - r1).abs() < 1e-12 {
                    assert!((m0 - m1).abs() < 1e-12);
                }
                // magnitude proportional to radius
                if r0 > 1e-9 && r1 > 1e-9 {
                    assert!((m0 / r0 - m1 / r1).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn loss_values() {
        let p = Tensor::from_vec(vec![0.0]);
        let t = Tensor::from_vec(vec![1.0]);
        assert_eq!(loss_mse(&p, &t).unwrap().0, 1.0);
        assert_eq!(loss_l1(&p, &t).unwrap().0, 1.0);
        let p = Tensor::from_vec(vec![0.2]);
        let t = Tensor::from_vec(vec![0.1]);
        let (mape, _) = loss_mape(&p, &t, 1e-2).unwrap();
        assert!((mape - 0.1 / 0.11).abs() < 1e-12);
        let same = loss_mse(&t, &t).unwrap().0
            + loss_l1(&t, &t).unwrap().0
            + loss_mape(&t, &t, 1e-2).unwrap().0;
        assert_eq!(same, 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_difference() {
        let mut rng = substream(8, "loss.fd");
        let p = Tensor::rand_uniform(&[6], -1.0, 1.0, &mut rng);
        let t = Tensor::rand_uniform(&[6], -1.0, 1.0, &mut rng);
        let h = 1e-7;
        type LossFn = fn(&Tensor, &Tensor) -> Result<(f64, Tensor)>;
        let cases: Vec<(&str, LossFn)> = vec![
            ("mse", |a, b| loss_mse(a, b)),
            ("l1", |a, b| loss_l1(a, b)),
            ("mape", |a, b| loss_mape(a, b, 1e-2)),
        ];
        for (name, f) in cases {
            let (_, grad) = f(&p, &t).unwrap();
            for i in 0..6 {
                let mut pp = p.clone();
                pp.data_mut()[i] += h;
                let (lp, _) = f(&pp, &t).unwrap();
                pp.data_mut()[i] -= 2.0 * h;
                let (lm, _) = f(&pp, &t).unwrap();
                let num = (lp - lm) / (2.0 * h);
                assert!(
                    (grad.data()[i] - num).abs() < 1e-5,
                    "{name} component {i}: {} vs {num}",
                    grad.data()[i]
                );
            }
        }
    }

    #[test]
    fn ppm_roundtrip_and_frame_dir() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_video(31, 3, 4, 5, 1).unwrap();
        let (f, h, w) = ds.dims();
        for fr in 0..f {
            let off = fr * h * w * 3;
            write_ppm(
                &dir.path().join(format!("frame_{:05}.ppm", fr)),
                w,
                h,
                &ds.frames.data()[off..off + h * w * 3],
            )
            .unwrap();
        }
        let loaded = load_video_dir(dir.path()).unwrap();
        assert_eq!(loaded.dims(), (f, h, w));
        // quantization to 8 bits bounds the round-trip error
        for (a, b) in ds.frames.data().iter().zip(loaded.frames.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(load_video_dir(&dir.path().join("missing")).is_err());
    }

    proptest! {
        #[test]
        fn mixture_counts_exact(n in 8usize..2000) {
            let s = n / 2;
            let near = 3 * n / 8;
            let free = n - s - near;
            prop_assert!(s + near + free == n);
            prop_assert!(free >= 1);
            // ratios within one count of nominal
            prop_assert!((s as f64 - n as f64 * 0.5).abs() <= 1.0);
            prop_assert!((near as f64 - n as f64 * 0.375).abs() <= 1.0);
        }

        #[test]
        fn holdout_fraction_rounds(total_frac in 0.05f64..0.7) {
            let mut ds = gen_video(1, 2, 8, 8, 1).unwrap();
            ds.assign_holdout(total_frac, 3).unwrap();
            let total = 2 * 8 * 8;
            let want = (total as f64 * total_frac).round() as usize;
            prop_assert_eq!(ds.split_ids(Split::Test).len(), want);
        }
    }
}
