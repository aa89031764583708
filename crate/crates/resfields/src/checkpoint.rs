//! Binary checkpoint format (.rfck): magic `RFCK`, u32 version, a
//! length-prefixed UTF-8 config echo, then named tensors with explicit
//! dtype, rank, and extents. Everything is little-endian; round-trips are
//! bitwise, and malformed files report the byte offset of the failure.

use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::models::FieldModel;
use crate::optim::AdamState;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub version: u32,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(path: &Path, config: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(config.as_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("tensor name too long: {name}")));
        }
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[1u8])?; // dtype f64
        out.write_all(&[t.rank() as u8])?;
        for &e in t.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Checkpoint {
            offset: at,
            msg: format!("{what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.take(&mut b, what)?;
        Ok(b[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut r = Cursor {
        inner: std::io::BufReader::new(std::fs::File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected RFCK"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let mut cfg = vec![0u8; cfg_len];
    let cfg_at = r.offset;
    r.take(&mut cfg, "config echo")?;
    let config = String::from_utf8(cfg).map_err(|e| Error::Checkpoint {
        offset: cfg_at,
        msg: format!("config echo not UTF-8: {e}"),
    })?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let mut name = vec![0u8; name_len];
        let name_at = r.offset;
        r.take(&mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint {
            offset: name_at,
            msg: format!("tensor {i} name not UTF-8: {e}"),
        })?;
        let dtype_at = r.offset;
        let dtype = r.u8("dtype")?;
        if dtype > 1 {
            return Err(Error::Checkpoint {
                offset: dtype_at,
                msg: format!("{name}: unknown dtype {dtype}"),
            });
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let v = if dtype == 1 {
                f64::from_le_bytes({
                    let mut b = [0u8; 8];
                    r.take(&mut b, "f64 element")?;
                    b
                })
            } else {
                f32::from_le_bytes({
                    let mut b = [0u8; 4];
                    r.take(&mut b, "f32 element")?;
                    b
                }) as f64
            };
            data.push(v);
        }
        let data_at = r.offset;
        tensors.push((
            name.clone(),
            Tensor::new(shape, data).map_err(|e| Error::Checkpoint {
                offset: data_at,
                msg: format!("{name}: {e}"),
            })?,
        ));
    }
    Ok(CheckpointData {
        version,
        config,
        tensors,
    })
}

/// Flattens model parameters (and, if given, optimizer state) into named
/// tensors: `param.*`, `opt.m.*`, `opt.v.*`, and a scalar `opt.step`.
pub fn state_tensors(model: &FieldModel, opt: Option<&AdamState>) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, t| out.push((format!("param.{name}"), t.clone())));
    if let Some(opt) = opt {
        let (step, m, v) = opt.export();
        out.push(("opt.step".to_string(), Tensor::scalar(step as f64)));
        for (name, t) in m {
            out.push((format!("opt.m.{name}"), t.clone()));
        }
        for (name, t) in v {
            out.push((format!("opt.v.{name}"), t.clone()));
        }
    }
    out
}

/// Writes checkpointed `param.*` tensors back into a freshly built model.
/// Every model parameter must be present with a matching shape.
pub fn restore_model(model: &mut FieldModel, tensors: &[(String, Tensor)]) -> Result<()> {
    let by_name: BTreeMap<&str, &Tensor> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, t| {
        match by_name.get(format!("param.{name}").as_str()) {
            Some(src) if src.shape() == t.shape() => {
                t.data_mut().copy_from_slice(src.data());
            }
            Some(src) => missing.push(format!("{name}: shape {:?} != {:?}", src.shape(), t.shape())),
            None => missing.push(format!("{name}: absent")),
        }
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "checkpoint does not match model: {}",
            missing.join("; ")
        )))
    }
}

/// Rebuilds optimizer state from `opt.*` tensors; absent state yields a
/// fresh optimizer.
pub fn restore_adam(tensors: &[(String, Tensor)]) -> AdamState {
    let mut step = 0u64;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, t) in tensors {
        if name == "opt.step" {
            step = t.data()[0] as u64;
        } else if let Some(n) = name.strip_prefix("opt.m.") {
            m.insert(n.to_string(), t.clone());
        } else if let Some(n) = name.strip_prefix("opt.v.") {
            v.insert(n.to_string(), t.clone());
        }
    }
    AdamState::restore(step, m, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Arch, ModelSpec, ResFieldAttach};
    use crate::resfield::{FactorizationSpec, ResFieldMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo_spec() -> ModelSpec {
        ModelSpec {
            arch: Arch::Siren,
            in_dim: 3,
            hidden: 8,
            out_dim: 2,
            hidden_layers: 1,
            omega0: 30.0,
            pe_levels: 6,
            resfield: Some(ResFieldAttach {
                layers: vec![1],
                factorization: FactorizationSpec::LowRank {
                    rank: 2,
                    factors: 5,
                },
                mode: ResFieldMode::ResidualAdd,
                init_std: 0.01,
            }),
            chunking: None,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = build_model(&demo_spec(), &mut rng).unwrap();
        let tensors = state_tensors(&model, None);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rfck");
        let p2 = dir.path().join("b.rfck");
        save_checkpoint(&p1, "{\"demo\":true}", &tensors).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.config, "{\"demo\":true}");
        save_checkpoint(&p2, &loaded.config, &loaded.tensors).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn eval_after_roundtrip_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = build_model(&demo_spec(), &mut rng).unwrap();
        let x = Tensor::rand_uniform(&[7, 3], -1.0, 1.0, &mut rng);
        let (want, _) = model.forward(0.41, &x, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.rfck");
        save_checkpoint(&p, "", &state_tensors(&model, None)).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(999);
        let mut rebuilt = build_model(&demo_spec(), &mut rng2).unwrap();
        restore_model(&mut rebuilt, &loaded.tensors).unwrap();
        let (got, _) = rebuilt.forward(0.41, &x, true).unwrap();
        assert_eq!(want.data(), got.data());
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = build_model(&demo_spec(), &mut rng).unwrap();
        let mut opt = AdamState::new();
        // a few steps to populate moments
        for _ in 0..3 {
            let x = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
            let (out, ctxs) = model.forward(0.2, &x, true).unwrap();
            let (_, grads) = model.backward(&ctxs, &out).unwrap();
            opt.step(&mut model, &grads, 1e-3).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("opt.rfck");
        save_checkpoint(&p, "", &state_tensors(&model, Some(&opt))).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        let restored = restore_adam(&loaded.tensors);
        assert_eq!(restored.steps_taken(), 3);
        let (_, m0, v0) = opt.export();
        let (_, m1, v1) = restored.export();
        assert_eq!(m0.len(), m1.len());
        for (k, t) in m0 {
            assert_eq!(t.data(), m1[k].data());
        }
        for (k, t) in v0 {
            assert_eq!(t.data(), v1[k].data());
        }
    }

    #[test]
    fn corrupted_magic_names_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.rfck");
        std::fs::write(&p, b"NOPE_____________").unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = build_model(&demo_spec(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.rfck");
        save_checkpoint(&p, "cfg", &state_tensors(&model, None)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let cut = bytes.len() - 11;
        std::fs::write(&p, &bytes[..cut]).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint { offset, msg }) => {
                assert!(offset <= cut as u64, "{offset} {msg}");
                assert!(offset > 0);
            }
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_model_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = build_model(&demo_spec(), &mut rng).unwrap();
        let tensors = state_tensors(&model, None);
        let mut other_spec = demo_spec();
        other_spec.hidden = 4;
        let mut other = build_model(&other_spec, &mut rng).unwrap();
        assert!(restore_model(&mut other, &tensors).is_err());
    }

    #[test]
    fn golden_fixture_parses() {
        let path = Path::new(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/tests/fixtures/golden.rfck"
        ));
        let data = load_checkpoint(path).unwrap();
        assert_eq!(data.version, 1);
        assert_eq!(data.config, "{\"fixture\":\"v1\"}");
        assert_eq!(data.tensors.len(), 2);
        assert_eq!(data.tensors[0].0, "alpha");
        assert_eq!(data.tensors[0].1.shape(), &[2, 3]);
        assert_eq!(
            data.tensors[0].1.data(),
            &[1.0, 0.5, -0.25, 3.141592653589793, -1e-9, 42.0]
        );
        assert_eq!(data.tensors[1].0, "beta");
        assert_eq!(data.tensors[1].1.data(), &[7.0]);
    }

    /// Regenerates the golden fixture; run explicitly after a format change.
    #[test]
    #[ignore]
    fn write_golden_fixture() {
        let path = Path::new(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/tests/fixtures/golden.rfck"
        ));
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let tensors = vec![
            (
                "alpha".to_string(),
                Tensor::new(
                    vec![2, 3],
                    vec![1.0, 0.5, -0.25, std::f64::consts::PI, -1e-9, 42.0],
                )
                .unwrap(),
            ),
            ("beta".to_string(), Tensor::scalar(7.0)),
        ];
        save_checkpoint(path, "{\"fixture\":\"v1\"}", &tensors).unwrap();
    }
}
