//! Run configuration: JSON-serializable description of a task, model,
//! dataset, and optimizer. CLI flags override individual fields; the
//! residual coefficient count may be given as an absolute number or as a
//! percentage of the frame count, and defaults to the frame count.

use crate::error::{Error, Result};
use crate::models::{Arch, FlowHead, ModelSpec, ResFieldAttach};
use crate::resfield::{ChunkPolicy, ChunkedSchedule, FactorizationSpec, ResFieldMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Video,
    Sdf,
    Flow,
}

/// Residual coefficient rows: a count, or a percentage of the frame count
/// (e.g. "95%"). Absent means one row per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Factors {
    Count(usize),
    Text(String),
}

impl Factors {
    pub fn parse(s: &str) -> Result<Factors> {
        if let Some(pct) = s.strip_suffix('%') {
            let v: f64 = pct
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad percentage in --factors: {s}")))?;
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Config(format!("--factors percentage out of range: {s}")));
            }
            Ok(Factors::Text(format!("{v}%")))
        } else {
            let v: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad --factors value: {s}")))?;
            Ok(Factors::Count(v))
        }
    }

    pub fn resolve(&self, frames: usize) -> Result<usize> {
        match self {
            Factors::Count(n) => Ok(*n),
            Factors::Text(s) => {
                let pct = s
                    .strip_suffix('%')
                    .ok_or_else(|| Error::Config(format!("bad factors text: {s}")))?;
                let v: f64 = pct
                    .parse()
                    .map_err(|_| Error::Config(format!("bad factors text: {s}")))?;
                Ok(((frames as f64 * v / 100.0).round() as usize).max(1))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorizationTag {
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

fn default_width() -> usize {
    64
}
fn default_depth() -> usize {
    5
}
fn default_rank() -> usize {
    10
}
fn default_omega0() -> f64 {
    30.0
}
fn default_pe_levels() -> usize {
    6
}
fn default_init_std() -> f64 {
    0.01
}
fn default_tucker() -> [usize; 3] {
    [10, 64, 64]
}
fn default_loe() -> Vec<usize> {
    vec![2, 4, 8]
}
fn default_hyper_hidden() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Total number of linear layers.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_omega0")]
    pub omega0: f64,
    #[serde(default = "default_pe_levels")]
    pub pe_levels: usize,
    /// Linear-layer ordinals carrying a time residual.
    #[serde(default)]
    pub resfield_layers: Vec<usize>,
    #[serde(default = "ModelConfig::default_mode")]
    pub mode: ResFieldMode,
    #[serde(default = "ModelConfig::default_tag")]
    pub factorization: FactorizationTag,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default)]
    pub factors: Option<Factors>,
    #[serde(default = "default_tucker")]
    pub tucker_ranks: [usize; 3],
    #[serde(default = "default_loe")]
    pub loe_levels: Vec<usize>,
    #[serde(default = "default_hyper_hidden")]
    pub hyper_hidden: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub chunks: Option<usize>,
    #[serde(default)]
    pub chunk_policy: Option<ChunkPolicy>,
}

impl ModelConfig {
    fn default_mode() -> ResFieldMode {
        ResFieldMode::ResidualAdd
    }

    fn default_tag() -> FactorizationTag {
        FactorizationTag::None
    }

    pub fn baseline(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            width: default_width(),
            depth: default_depth(),
            omega0: default_omega0(),
            pe_levels: default_pe_levels(),
            resfield_layers: Vec::new(),
            mode: Self::default_mode(),
            factorization: FactorizationTag::None,
            rank: default_rank(),
            factors: None,
            tucker_ranks: default_tucker(),
            loe_levels: default_loe(),
            hyper_hidden: default_hyper_hidden(),
            init_std: default_init_std(),
            chunks: None,
            chunk_policy: None,
        }
    }

    pub fn factorization_spec(&self, frames: usize) -> Result<Option<FactorizationSpec>> {
        let t = self
            .factors
            .as_ref()
            .map(|f| f.resolve(frames))
            .transpose()?
            .unwrap_or(frames)
            .max(1);
        let spec = match self.factorization {
            FactorizationTag::None => return Ok(None),
            FactorizationTag::LowRank => FactorizationSpec::LowRank {
                rank: self.rank,
                factors: t,
            },
            FactorizationTag::Dictionary => FactorizationSpec::Dictionary { factors: t },
            FactorizationTag::MatrixMatrix => FactorizationSpec::MatrixMatrix {
                rank: self.rank,
                factors: t,
            },
            FactorizationTag::Cp => FactorizationSpec::Cp {
                rank: self.rank,
                factors: t,
            },
            FactorizationTag::Tucker => FactorizationSpec::Tucker {
                rank_t: self.tucker_ranks[0],
                rank_n: self.tucker_ranks[1],
                rank_m: self.tucker_ranks[2],
                factors: t,
            },
            FactorizationTag::Loe => FactorizationSpec::Loe {
                levels: self.loe_levels.clone(),
            },
            FactorizationTag::HyperNet => FactorizationSpec::HyperNet {
                hidden: self.hyper_hidden,
            },
            FactorizationTag::OutputResidual => FactorizationSpec::OutputResidual {
                rank: self.rank,
                factors: t,
            },
        };
        Ok(Some(spec))
    }

    /// Full model description for a task; the residual tag is validated
    /// against the application mode.
    pub fn model_spec(
        &self,
        in_dim: usize,
        out_dim: usize,
        frames: usize,
    ) -> Result<ModelSpec> {
        if self.depth < 2 {
            return Err(Error::Config("depth must be at least 2".into()));
        }
        let is_output = self.factorization == FactorizationTag::OutputResidual;
        let mode_is_output = self.mode == ResFieldMode::OutputResidual;
        if is_output != mode_is_output && self.factorization != FactorizationTag::None {
            return Err(Error::Config(
                "output-residual factorization and mode must be used together".into(),
            ));
        }
        let fact = self.factorization_spec(frames)?;
        let resfield = match fact {
            Some(factorization) if !self.resfield_layers.is_empty() => Some(ResFieldAttach {
                layers: self.resfield_layers.clone(),
                factorization,
                mode: self.mode,
                init_std: self.init_std,
            }),
            _ => None,
        };
        let chunking = match (self.chunks, self.chunk_policy) {
            (Some(c), policy) if c > 1 => Some(ChunkedSchedule {
                chunks: c,
                policy: policy.unwrap_or(ChunkPolicy::Shared),
            }),
            _ => None,
        };
        Ok(ModelSpec {
            arch: self.arch,
            in_dim,
            hidden: self.width,
            out_dim,
            hidden_layers: self.depth - 2,
            omega0: self.omega0,
            pe_levels: self.pe_levels,
            resfield,
            chunking,
        })
    }
}

fn default_frames() -> usize {
    30
}
fn default_hw() -> usize {
    64
}
fn default_segments() -> usize {
    1
}
fn default_holdout() -> f64 {
    0.1
}
fn default_points() -> usize {
    200
}
fn default_sigma() -> f64 {
    0.1
}
fn default_sdf_eps() -> f64 {
    0.05
}
fn default_wiggle() -> f64 {
    0.0
}
fn default_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_hw")]
    pub height: usize,
    #[serde(default = "default_hw")]
    pub width: usize,
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    /// Tracked points (flow task).
    #[serde(default = "default_points")]
    pub points: usize,
    /// Near-surface noise std (sdf task).
    #[serde(default = "default_sigma")]
    pub sdf_sigma: f64,
    /// Relative-error floor for the signed-distance loss; values much
    /// below ~0.05 let on-surface samples dominate and stall training.
    #[serde(default = "default_sdf_eps")]
    pub sdf_eps: f64,
    /// Per-frame random translation amplitude of the flow scene.
    #[serde(default = "default_wiggle")]
    pub flow_wiggle: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Load frames from `frame_%05d.ppm` here instead of generating.
    #[serde(default)]
    pub frame_dir: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

fn default_steps() -> usize {
    2000
}
fn default_lr0() -> f64 {
    5e-5
}
fn default_lr_min() -> f64 {
    5e-6
}
fn default_log_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    #[serde(default = "RunConfig::default_seed")]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub flow_head: Option<FlowHead>,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl RunConfig {
    fn default_seed() -> u64 {
        0
    }

    pub fn for_task(task: TaskKind) -> RunConfig {
        let arch = match task {
            TaskKind::Flow => Arch::ReluPe,
            _ => Arch::Siren,
        };
        RunConfig {
            task,
            seed: 0,
            model: ModelConfig::baseline(arch),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
            flow_head: None,
            out_dir: None,
        }
    }

    /// Applies the `RESFIELDS_SEED` environment override.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("RESFIELDS_SEED") {
            self.seed = s
                .parse()
                .map_err(|_| Error::Config(format!("RESFIELDS_SEED not an integer: {s}")))?;
        }
        if let Ok(s) = std::env::var("RESFIELDS_THREADS") {
            // compute is single-threaded; the cap is accepted for interface
            // compatibility and results do not depend on it
            let _: usize = s
                .parse()
                .map_err(|_| Error::Config(format!("RESFIELDS_THREADS not an integer: {s}")))?;
        }
        Ok(())
    }

    /// (in_dim, out_dim) of the field network for this task. Time is an
    /// input coordinate everywhere so baselines without residual layers
    /// still see it: video takes (t, y, x), the volumetric tasks take
    /// (x, y, z, t).
    pub fn io_dims(&self) -> (usize, usize) {
        match self.task {
            TaskKind::Video => (3, 3),
            TaskKind::Sdf => (4, 1),
            TaskKind::Flow => (
                4,
                self.flow_head.unwrap_or(FlowHead::Offset).out_width(),
            ),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let (i, o) = self.io_dims();
        self.model.model_spec(i, o, self.data.frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_identity() {
        let mut cfg = RunConfig::for_task(TaskKind::Video);
        cfg.model.factorization = FactorizationTag::LowRank;
        cfg.model.resfield_layers = vec![1, 2, 3];
        cfg.model.factors = Some(Factors::Text("95%".into()));
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        let json2 = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn factors_parse_and_resolve() {
        assert_eq!(Factors::parse("300").unwrap().resolve(10).unwrap(), 300);
        assert_eq!(Factors::parse("95%").unwrap().resolve(100).unwrap(), 95);
        assert_eq!(Factors::parse("10%").unwrap().resolve(30).unwrap(), 3);
        assert!(Factors::parse("abc").is_err());
        assert!(Factors::parse("120%").is_err());
        // default: one row per frame
        let cfg = ModelConfig {
            factorization: FactorizationTag::LowRank,
            ..ModelConfig::baseline(Arch::Siren)
        };
        match cfg.factorization_spec(30).unwrap().unwrap() {
            FactorizationSpec::LowRank { factors, .. } => assert_eq!(factors, 30),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn output_residual_tag_requires_matching_mode() {
        let mut cfg = ModelConfig::baseline(Arch::Siren);
        cfg.factorization = FactorizationTag::OutputResidual;
        cfg.resfield_layers = vec![1];
        assert!(cfg.model_spec(3, 3, 30).is_err());
        cfg.mode = ResFieldMode::OutputResidual;
        assert!(cfg.model_spec(3, 3, 30).is_ok());
    }

    #[test]
    fn defaults_fill_in() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"task":"video","model":{"arch":"siren"}}"#).unwrap();
        assert_eq!(cfg.data.frames, 30);
        assert_eq!(cfg.optim.steps, 2000);
        assert_eq!(cfg.model.width, 64);
        assert_eq!(cfg.io_dims(), (3, 3));
    }

    #[test]
    fn env_seed_override() {
        let mut cfg = RunConfig::for_task(TaskKind::Video);
        std::env::set_var("RESFIELDS_SEED", "42");
        cfg.apply_env().unwrap();
        assert_eq!(cfg.seed, 42);
        std::env::set_var("RESFIELDS_SEED", "not-a-number");
        assert!(cfg.apply_env().is_err());
        std::env::remove_var("RESFIELDS_SEED");
        cfg.apply_env().unwrap();
        assert_eq!(cfg.seed, 42);
    }
}
