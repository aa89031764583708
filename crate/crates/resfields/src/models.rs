//! Field models: sequential stacks of linear / residual-field / activation /
//! encoding layers evaluated at (t, x), plus builders, a finite-difference
//! gradient checker, and motion heads for flow prediction.

use crate::error::{Error, Result};
use crate::layers::{
    linear_backward, linear_forward, posenc_backward, posenc_forward, relu_backward, relu_forward,
    sine_backward, sine_forward, GradBuffer, LinearCtx,
};
use crate::linalg::Tensor;
use crate::resfield::{
    ChunkedSchedule, Factorization, FactorizationSpec, ResFieldCtx, ResFieldLayer, ResFieldMode,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub enum Layer {
    Linear {
        weights: Vec<Tensor>, // one per base chunk
        biases: Vec<Tensor>,
    },
    ResField(ResFieldLayer),
    Sine {
        omega0: f64,
    },
    Relu,
    PosEnc {
        levels: Vec<usize>,
        include_input: bool,
    },
}

#[derive(Debug)]
pub enum LayerCtx {
    Linear { ctx: LinearCtx, chunk: usize },
    ResField(ResFieldCtx),
    Sine { input: Tensor },
    Relu { input: Tensor },
    PosEnc { input: Tensor },
}

/// Architecture family for the builder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Siren,
    ReluPe,
}

/// Residual-field attachment: which linear layers (0-based ordinal among
/// linear layers) get a time-conditioned residual, and how.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResFieldAttach {
    pub layers: Vec<usize>,
    pub factorization: FactorizationSpec,
    pub mode: ResFieldMode,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.01
}

/// Full model description; serializable so runs can be reproduced from a
/// config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// Number of hidden linear layers between the first and last.
    pub hidden_layers: usize,
    #[serde(default = "default_omega0")]
    pub omega0: f64,
    /// Encoding levels per input dimension (relu_pe only).
    #[serde(default = "default_pe_levels")]
    pub pe_levels: usize,
    #[serde(default)]
    pub resfield: Option<ResFieldAttach>,
    #[serde(default)]
    pub chunking: Option<ChunkedSchedule>,
}

fn default_omega0() -> f64 {
    30.0
}

fn default_pe_levels() -> usize {
    6
}

impl ModelSpec {
    /// Closed-form total trainable-parameter count, independent of any
    /// allocation; cross-checked against the built model in tests.
    pub fn param_count(&self) -> usize {
        let enc_dim = match self.arch {
            Arch::Siren => self.in_dim,
            Arch::ReluPe => self.in_dim * (2 * self.pe_levels + 1),
        };
        let mut dims = vec![(self.hidden, enc_dim)];
        for _ in 0..self.hidden_layers {
            dims.push((self.hidden, self.hidden));
        }
        dims.push((self.out_dim, self.hidden));
        let base_copies = self.chunking.map_or(1, |s| s.base_copies());
        let res_copies = self.chunking.map_or(1, |s| s.residual_copies());
        let mut total = 0;
        for (ordinal, &(n, m)) in dims.iter().enumerate() {
            total += base_copies * (n * m + n);
            if let Some(rf) = &self.resfield {
                if let Some(pos) = rf.layers.iter().position(|&l| l == ordinal) {
                    total += res_copies * layer_factorization(rf, pos).param_count(n, m);
                }
            }
        }
        total
    }
}

/// Expert-bank specs with one bank size per converted layer distribute one
/// size to each layer; every other spec is used as-is for every layer.
fn layer_factorization(rf: &ResFieldAttach, pos: usize) -> FactorizationSpec {
    if let FactorizationSpec::Loe { levels } = &rf.factorization {
        if levels.len() == rf.layers.len() && rf.layers.len() > 1 {
            return FactorizationSpec::Loe {
                levels: vec![levels[pos]],
            };
        }
    }
    rf.factorization.clone()
}

#[derive(Debug, Clone)]
pub struct FieldModel {
    pub layers: Vec<Layer>,
    pub schedule: Option<ChunkedSchedule>,
}

/// Builds a model per spec. Sine nets use the standard frequency-aware
/// uniform init; ReLU nets use fan-in uniform init. Residual parameters are
/// N(0, init_std) so every model starts close to its base network.
pub fn build_model<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<FieldModel> {
    if spec.in_dim == 0 || spec.hidden == 0 || spec.out_dim == 0 {
        return Err(Error::InvalidArgument("zero model dimension".into()));
    }
    if let Some(s) = spec.chunking {
        if s.chunks == 0 {
            return Err(Error::InvalidArgument("zero chunk count".into()));
        }
    }
    let base_copies = spec.chunking.map_or(1, |s| s.base_copies());
    let res_copies = spec.chunking.map_or(1, |s| s.residual_copies());
    let mut layers = Vec::new();
    let enc_dim = match spec.arch {
        Arch::Siren => spec.in_dim,
        Arch::ReluPe => {
            layers.push(Layer::PosEnc {
                levels: vec![spec.pe_levels; spec.in_dim],
                include_input: true,
            });
            spec.in_dim * (2 * spec.pe_levels + 1)
        }
    };
    let mut dims = vec![(spec.hidden, enc_dim)];
    for _ in 0..spec.hidden_layers {
        dims.push((spec.hidden, spec.hidden));
    }
    dims.push((spec.out_dim, spec.hidden));
    let last = dims.len() - 1;
    for (ordinal, &(n, m)) in dims.iter().enumerate() {
        let init = |rng: &mut R| -> Tensor {
            let lim = match spec.arch {
                Arch::Siren if ordinal == 0 => 1.0 / m as f64,
                Arch::Siren => (6.0 / m as f64).sqrt() / spec.omega0,
                Arch::ReluPe => (6.0 / m as f64).sqrt(),
            };
            Tensor::rand_uniform(&[n, m], -lim, lim, rng)
        };
        let weights: Vec<Tensor> = (0..base_copies).map(|_| init(rng)).collect();
        let biases: Vec<Tensor> = (0..base_copies).map(|_| Tensor::zeros(&[n])).collect();
        let attach = spec
            .resfield
            .as_ref()
            .and_then(|rf| rf.layers.iter().position(|&l| l == ordinal).map(|p| (rf, p)));
        if let Some((rf, pos)) = attach {
            let fspec = layer_factorization(rf, pos);
            let facts: Vec<Factorization> = (0..res_copies)
                .map(|_| fspec.build(n, m, rf.init_std, rng))
                .collect();
            layers.push(Layer::ResField(ResFieldLayer {
                weights,
                biases,
                facts,
                mode: rf.mode,
            }));
        } else {
            layers.push(Layer::Linear { weights, biases });
        }
        if ordinal != last {
            match spec.arch {
                Arch::Siren => layers.push(Layer::Sine {
                    omega0: spec.omega0,
                }),
                Arch::ReluPe => layers.push(Layer::Relu),
            }
        }
    }
    Ok(FieldModel {
        layers,
        schedule: spec.chunking,
    })
}

impl FieldModel {
    /// Evaluates the field at normalized time t for a batch of inputs
    /// [B x in_dim]. `use_residual = false` evaluates base weights only.
    pub fn forward(
        &self,
        t_norm: f64,
        x: &Tensor,
        use_residual: bool,
    ) -> Result<(Tensor, Vec<LayerCtx>)> {
        let (chunk, t_local) = match self.schedule {
            Some(s) => s.chunk_select(t_norm),
            None => (0, t_norm),
        };
        let mut cur = x.clone();
        let mut ctxs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, ctx) = match layer {
                Layer::Linear { weights, biases } => {
                    let k = chunk.min(weights.len() - 1);
                    let (out, c) = linear_forward(&weights[k], &biases[k], &cur)?;
                    (out, LayerCtx::Linear { ctx: c, chunk: k })
                }
                Layer::ResField(rf) => {
                    let (out, c) = rf.forward(chunk, t_local, &cur, use_residual)?;
                    (out, LayerCtx::ResField(c))
                }
                Layer::Sine { omega0 } => (
                    sine_forward(&cur, *omega0),
                    LayerCtx::Sine { input: cur.clone() },
                ),
                Layer::Relu => (relu_forward(&cur), LayerCtx::Relu { input: cur.clone() }),
                Layer::PosEnc {
                    levels,
                    include_input,
                } => (
                    posenc_forward(&cur, levels, *include_input)?,
                    LayerCtx::PosEnc { input: cur.clone() },
                ),
            };
            ctxs.push(ctx);
            cur = next;
        }
        Ok((cur, ctxs))
    }

    /// Back-propagates d_out through the cached forward pass; returns the
    /// input gradient and per-parameter gradients keyed by name.
    pub fn backward(&self, ctxs: &[LayerCtx], d_out: &Tensor) -> Result<(Tensor, GradBuffer)> {
        if ctxs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(
                "context/layer count mismatch".into(),
            ));
        }
        let mut grads = GradBuffer::new();
        let mut d = d_out.clone();
        for (i, (layer, ctx)) in self.layers.iter().zip(ctxs).enumerate().rev() {
            d = match (layer, ctx) {
                (Layer::Linear { weights, .. }, LayerCtx::Linear { ctx, chunk }) => {
                    let (dx, dw, db) = linear_backward(&weights[*chunk], ctx, &d)?;
                    grads.accumulate(&format!("layer{i}.w.c{chunk}"), dw);
                    grads.accumulate(&format!("layer{i}.b.c{chunk}"), db);
                    dx
                }
                (Layer::ResField(rf), LayerCtx::ResField(ctx)) => {
                    rf.backward(ctx, &d, &format!("layer{i}"), &mut grads)?
                }
                (Layer::Sine { omega0 }, LayerCtx::Sine { input }) => {
                    sine_backward(input, *omega0, &d)
                }
                (Layer::Relu, LayerCtx::Relu { input }) => relu_backward(input, &d),
                (
                    Layer::PosEnc {
                        levels,
                        include_input,
                    },
                    LayerCtx::PosEnc { input },
                ) => posenc_backward(input, levels, *include_input, &d)?,
                _ => {
                    return Err(Error::InvalidArgument(
                        "context kind does not match layer kind".into(),
                    ))
                }
            };
        }
        Ok((d, grads))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear { weights, biases } => {
                    for (k, (w, b)) in weights.iter().zip(biases).enumerate() {
                        f(&format!("layer{i}.w.c{k}"), w);
                        f(&format!("layer{i}.b.c{k}"), b);
                    }
                }
                Layer::ResField(rf) => rf.visit(&format!("layer{i}"), f),
                _ => {}
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear { weights, biases } => {
                    for (k, (w, b)) in weights.iter_mut().zip(biases.iter_mut()).enumerate() {
                        f(&format!("layer{i}.w.c{k}"), w);
                        f(&format!("layer{i}.b.c{k}"), b);
                    }
                }
                Layer::ResField(rf) => rf.visit_mut(&format!("layer{i}"), f),
                _ => {}
            }
        }
    }

    pub fn total_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Linear { weights, .. } => Some(weights[0].shape()[1]),
            Layer::ResField(rf) => Some(rf.in_dim()),
            Layer::PosEnc { levels, .. } => Some(levels.len()),
            _ => None,
        })
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Linear { weights, .. } => Some(weights[0].shape()[0]),
            Layer::ResField(rf) => Some(rf.out_dim()),
            _ => None,
        })
    }

    fn perturb(&mut self, name: &str, idx: usize, delta: f64) {
        self.visit_params_mut(&mut |n, t| {
            if n == name {
                t.data_mut()[idx] += delta;
            }
        });
    }
}

/// Per-parameter result of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub scalars: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

/// Checks analytic gradients of the loss 0.5*|f(t,x)|^2 against central
/// finite differences with step h, parameter by parameter. Relative error
/// uses max(|analytic| + |numeric|, floor) in the denominator so zero
/// gradients compare cleanly.
pub fn grad_check(
    model: &mut FieldModel,
    t_norm: f64,
    x: &Tensor,
    h: f64,
) -> Result<GradCheckReport> {
    let loss = |m: &FieldModel| -> Result<f64> {
        let (out, _) = m.forward(t_norm, x, true)?;
        Ok(0.5 * out.data().iter().map(|v| v * v).sum::<f64>())
    };
    let (out, ctxs) = model.forward(t_norm, x, true)?;
    let (_, grads) = model.backward(&ctxs, &out)?;
    let mut names = Vec::new();
    model.visit_params(&mut |n, t| names.push((n.to_string(), t.len())));
    let mut entries = Vec::new();
    let mut max_rel = 0.0f64;
    for (name, len) in names {
        let mut worst = 0.0f64;
        for idx in 0..len {
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
            model.perturb(&name, idx, h);
            let lp = loss(model)?;
            model.perturb(&name, idx, -2.0 * h);
            let lm = loss(model)?;
            model.perturb(&name, idx, h);
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        max_rel = max_rel.max(worst);
        entries.push(GradCheckEntry {
            name,
            max_rel_err: worst,
            scalars: len,
        });
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err: max_rel,
    })
}

/// Motion representation decoded from the network output at a 3D point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowHead {
    /// Raw forward and backward displacement vectors.
    Offset,
    /// Forward and backward rigid transforms in exponential coordinates.
    Se3,
    /// Cosine-series point trajectory; flow by differencing adjacent frames.
    Dct { coeffs: usize },
}

impl FlowHead {
    pub fn out_width(&self) -> usize {
        match self {
            FlowHead::Offset => 6,
            FlowHead::Se3 => 12,
            FlowHead::Dct { coeffs } => 3 * coeffs,
        }
    }

    /// Decodes the raw network output at point p into (forward, backward)
    /// displacements between frame and frame±1 of `frames` total.
    pub fn decode(
        &self,
        raw: &[f64],
        p: [f64; 3],
        frames: usize,
        frame: usize,
    ) -> ([f64; 3], [f64; 3]) {
        assert_eq!(raw.len(), self.out_width());
        match self {
            FlowHead::Offset => (
                [raw[0], raw[1], raw[2]],
                [raw[3], raw[4], raw[5]],
            ),
            FlowHead::Se3 => {
                let fwd = se3_displace(&raw[0..6], p);
                let bwd = se3_displace(&raw[6..12], p);
                (fwd, bwd)
            }
            FlowHead::Dct { coeffs } => {
                let k = *coeffs;
                let here = dct_point(raw, k, frames, frame as i64);
                let next = dct_point(raw, k, frames, frame as i64 + 1);
                let prev = dct_point(raw, k, frames, frame as i64 - 1);
                (
                    [next[0] - here[0], next[1] - here[1], next[2] - here[2]],
                    [prev[0] - here[0], prev[1] - here[1], prev[2] - here[2]],
                )
            }
        }
    }

    /// Gradient of sum(d_fwd . fwd + d_bwd . bwd) with respect to the raw
    /// output. Offset and the cosine head are linear so this is exact; the
    /// rigid head uses central differences on the 12 raw coordinates.
    pub fn backward(
        &self,
        raw: &[f64],
        p: [f64; 3],
        frames: usize,
        frame: usize,
        d_fwd: [f64; 3],
        d_bwd: [f64; 3],
    ) -> Vec<f64> {
        match self {
            FlowHead::Offset => vec![d_fwd[0], d_fwd[1], d_fwd[2], d_bwd[0], d_bwd[1], d_bwd[2]],
            FlowHead::Se3 => {
                let h = 1e-5;
                let mut d_raw = vec![0.0; 12];
                let mut pert = raw.to_vec();
                for i in 0..12 {
                    pert[i] = raw[i] + h;
                    let (fp, bp) = self.decode(&pert, p, frames, frame);
                    pert[i] = raw[i] - h;
                    let (fm, bm) = self.decode(&pert, p, frames, frame);
                    pert[i] = raw[i];
                    let mut g = 0.0;
                    for a in 0..3 {
                        g += d_fwd[a] * (fp[a] - fm[a]) / (2.0 * h);
                        g += d_bwd[a] * (bp[a] - bm[a]) / (2.0 * h);
                    }
                    d_raw[i] = g;
                }
                d_raw
            }
            FlowHead::Dct { coeffs } => {
                let k = *coeffs;
                let mut d_raw = vec![0.0; 3 * k];
                let wh = dct_weights(k, frames, frame as i64);
                let wn = dct_weights(k, frames, frame as i64 + 1);
                let wp = dct_weights(k, frames, frame as i64 - 1);
                for axis in 0..3 {
                    for j in 0..k {
                        d_raw[axis * k + j] = d_fwd[axis] * (wn[j] - wh[j])
                            + d_bwd[axis] * (wp[j] - wh[j]);
                    }
                }
                d_raw
            }
        }
    }
}

/// Rigid displacement exp([w, u]) p - p with w = raw[0..3], u = raw[3..6].
fn se3_displace(raw: &[f64], p: [f64; 3]) -> [f64; 3] {
    let w = [raw[0], raw[1], raw[2]];
    let u = [raw[3], raw[4], raw[5]];
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    // [w]x p and [w]x ([w]x p)
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let (s1, s2, v1, v2) = if theta < 1e-8 {
        // Leading-order series; keeps the map smooth through theta = 0.
        (1.0, 0.5, 0.5, 1.0 / 6.0)
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    let wp = cross(w, p);
    let wwp = cross(w, wp);
    let wu = cross(w, u);
    let wwu = cross(w, wu);
    let mut out = [0.0; 3];
    for a in 0..3 {
        let rot = s1 * wp[a] + s2 * wwp[a];
        let trans = u[a] + v1 * wu[a] + v2 * wwu[a];
        out[a] = rot + trans;
    }
    out
}

fn dct_weights(k: usize, frames: usize, frame: i64) -> Vec<f64> {
    let f = frames as f64;
    (0..k)
        .map(|j| (std::f64::consts::PI * (2.0 * frame as f64 + 1.0) * j as f64 / (2.0 * f)).cos())
        .collect()
}

fn dct_point(raw: &[f64], k: usize, frames: usize, frame: i64) -> [f64; 3] {
    let w = dct_weights(k, frames, frame);
    let mut out = [0.0; 3];
    for axis in 0..3 {
        for j in 0..k {
            out[axis] += raw[axis * k + j] * w[j];
        }
    }
    out
}
