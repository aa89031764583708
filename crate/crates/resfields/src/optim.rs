//! Adam with cosine learning-rate decay, plus a generic training loop that
//! logs step metrics and aborts on non-finite values without corrupting
//! parameters.

use crate::error::{Error, Result};
use crate::layers::GradBuffer;
use crate::linalg::Tensor;
use crate::models::FieldModel;
use std::collections::BTreeMap;
use std::io::Write;

/// Adam moment state, keyed by parameter name. Moments for a parameter are
/// created lazily on its first gradient.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Moment tensors for checkpointing.
    pub fn export(&self) -> (u64, &BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(step: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Self {
        AdamState {
            step,
            m,
            v,
            ..AdamState::new()
        }
    }

    /// One bias-corrected update. Validates every gradient before touching
    /// any parameter so a non-finite gradient leaves the model unchanged.
    pub fn step(&mut self, model: &mut FieldModel, grads: &GradBuffer, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.data().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let m = m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        Ok(())
    }
}

/// Half-cosine decay from lr0 at step 0 to lr_min at step total, endpoints
/// exact.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let s = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * s).cos())
}

#[derive(Debug, Clone)]
pub struct TrainParams {
    pub steps: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub log_every: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub final_loss: f64,
    pub steps_run: usize,
}

/// Runs `steps` optimizer steps. `step_fn` produces (loss, gradients) for
/// one batch; a non-finite loss or gradient aborts with an error and the
/// model keeps the parameters from the last good step. When `log` is given,
/// one `step,loss,lr` CSV row is written every `log_every` steps and at the
/// final step.
pub fn train(
    model: &mut FieldModel,
    opt: &mut AdamState,
    params: &TrainParams,
    mut step_fn: impl FnMut(&FieldModel, usize) -> Result<(f64, GradBuffer)>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainStats> {
    let mut stats = TrainStats::default();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "step,loss,lr")?;
    }
    for step in 0..params.steps {
        let lr = cosine_lr(step, params.steps, params.lr0, params.lr_min);
        let (loss, grads) = step_fn(model, step)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        opt.step(model, &grads, lr)?;
        stats.final_loss = loss;
        stats.steps_run = step + 1;
        if let Some(w) = log.as_deref_mut() {
            let every = params.log_every.max(1);
            if step % every == 0 || step + 1 == params.steps {
                writeln!(w, "{step},{loss},{lr}")?;
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Arch, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_model() -> FieldModel {
        // single 1x1 linear layer, no activation
        let spec = ModelSpec {
            arch: Arch::Siren,
            in_dim: 1,
            hidden: 1,
            out_dim: 1,
            hidden_layers: 0,
            omega0: 30.0,
            pe_levels: 0,
            resfield: None,
            chunking: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_model(&spec, &mut rng).unwrap()
    }

    fn set_all(model: &mut FieldModel, val: f64) {
        model.visit_params_mut(&mut |_, t| t.data_mut().fill(val));
    }

    #[test]
    fn first_step_is_bias_corrected_sign_step() {
        // With fresh moments, mhat = g and vhat = g^2, so the first update
        // is lr * g / (|g| + eps) regardless of gradient magnitude.
        let mut model = scalar_model();
        set_all(&mut model, 1.0);
        let mut opt = AdamState::new();
        let mut grads = GradBuffer::new();
        let g = 7.3;
        grads.accumulate("layer0.w.c0", Tensor::new(vec![1, 1], vec![g]).unwrap());
        opt.step(&mut model, &grads, 0.1).unwrap();
        let mut w = 0.0;
        model.visit_params(&mut |n, t| {
            if n == "layer0.w.c0" {
                w = t.data()[0];
            }
        });
        let expect = 1.0 - 0.1 * g / (g.abs() + 1e-8);
        assert!((w - expect).abs() < 1e-12);
    }

    #[test]
    fn second_step_matches_hand_computation() {
        let mut model = scalar_model();
        set_all(&mut model, 0.0);
        let mut opt = AdamState::new();
        let (g1, g2, lr) = (2.0, -1.0, 0.01);
        let mut grads = GradBuffer::new();
        grads.accumulate("layer0.w.c0", Tensor::new(vec![1, 1], vec![g1]).unwrap());
        opt.step(&mut model, &grads, lr).unwrap();
        let mut grads = GradBuffer::new();
        grads.accumulate("layer0.w.c0", Tensor::new(vec![1, 1], vec![g2]).unwrap());
        opt.step(&mut model, &grads, lr).unwrap();
        // hand-rolled two-step Adam
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut w = 0.0;
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w -= lr * mhat / (vhat.sqrt() + eps);
        }
        let mut got = 0.0;
        model.visit_params(&mut |n, t| {
            if n == "layer0.w.c0" {
                got = t.data()[0];
            }
        });
        assert!((got - w).abs() < 1e-15, "{got} vs {w}");
    }

    #[test]
    fn params_without_grads_are_untouched() {
        let mut model = scalar_model();
        set_all(&mut model, 0.5);
        let mut opt = AdamState::new();
        let mut grads = GradBuffer::new();
        grads.accumulate("layer0.w.c0", Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        opt.step(&mut model, &grads, 0.1).unwrap();
        let mut b = f64::NAN;
        model.visit_params(&mut |n, t| {
            if n == "layer0.b.c0" {
                b = t.data()[0];
            }
        });
        assert_eq!(b, 0.5);
    }

    #[test]
    fn non_finite_gradient_rejected_with_name() {
        let mut model = scalar_model();
        set_all(&mut model, 0.25);
        let mut opt = AdamState::new();
        let mut grads = GradBuffer::new();
        grads.accumulate(
            "layer0.w.c0",
            Tensor::new(vec![1, 1], vec![f64::NAN]).unwrap(),
        );
        let err = opt.step(&mut model, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("layer0.w.c0"));
        let mut w = 0.0;
        model.visit_params(&mut |n, t| {
            if n == "layer0.w.c0" {
                w = t.data()[0];
            }
        });
        assert_eq!(w, 0.25, "rejected step must not move parameters");
    }

    #[test]
    fn cosine_endpoints_exact_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 5e-4, 5e-5), 5e-4);
        assert_eq!(cosine_lr(100, 100, 5e-4, 5e-5), 5e-5);
        let mid = cosine_lr(50, 100, 5e-4, 5e-5);
        assert!((mid - (5e-5 + 0.5 * (5e-4 - 5e-5))).abs() < 1e-18);
        // monotone non-increasing
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 5e-4, 5e-5);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn adam_fits_a_linear_map() {
        let mut model = scalar_model();
        let mut opt = AdamState::new();
        let params = TrainParams {
            steps: 3000,
            lr0: 0.05,
            lr_min: 1e-3,
            log_every: 500,
        };
        // fit two points; the tiny net has 4 scalars and 2 constraints
        let xs = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let ys = [3.0, 6.0];
        let stats = train(
            &mut model,
            &mut opt,
            &params,
            |m, _| {
                let (out, ctxs) = m.forward(0.0, &xs, true)?;
                let mut loss = 0.0;
                let mut d = Tensor::zeros(out.shape());
                for i in 0..2 {
                    let e = out.data()[i] - ys[i];
                    loss += e * e / 2.0;
                    d.data_mut()[i] = e;
                }
                let (_, grads) = m.backward(&ctxs, &d)?;
                Ok((loss, grads))
            },
            None,
        )
        .unwrap();
        assert!(stats.final_loss < 1e-6, "loss {}", stats.final_loss);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut model = scalar_model();
        let mut opt = AdamState::new();
        let params = TrainParams {
            steps: 10,
            lr0: 0.1,
            lr_min: 0.01,
            log_every: 1,
        };
        let err = train(
            &mut model,
            &mut opt,
            &params,
            |_, step| {
                if step == 3 {
                    Ok((f64::INFINITY, GradBuffer::new()))
                } else {
                    Ok((1.0, GradBuffer::new()))
                }
            },
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("step 3"));
    }

    #[test]
    fn train_log_is_csv() {
        let mut model = scalar_model();
        let mut opt = AdamState::new();
        let params = TrainParams {
            steps: 5,
            lr0: 0.1,
            lr_min: 0.01,
            log_every: 2,
        };
        let mut buf = Vec::new();
        train(
            &mut model,
            &mut opt,
            &params,
            |_, _| Ok((1.0, GradBuffer::new())),
            Some(&mut buf),
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss,lr");
        assert!(lines[1].starts_with("0,"));
        assert!(lines.last().unwrap().starts_with("4,"));
    }
}
