//! Plain-text parameter checkpoints.
//!
//! Format (version 1), line oriented:
//!
//! ```text
//! blurcast-checkpoint v1
//! variant DG
//! d_model 16
//! n_heads 8
//! n_layers 1
//! kappa 48
//! tau 12
//! m_inducing 4            (only when the model carries blur parameters)
//! normalizer 1.25 0.75    (only when saved with normalization statistics)
//! tensor forecaster.embed.w 5 16
//! 0.1 -0.2 ...            (row-major values, shortest round-trip decimal)
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so save/load is
//! bit-exact. Tensors are written in the canonical parameter order and
//! loaded by name against a freshly initialized skeleton, so the file stays
//! readable with standard text tools and stable across runs.

use std::fs;
use std::path::Path;

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::forecaster::ForecasterHyper;
use crate::pipeline::{ModelParams, Variant};
use crate::tensor::Tensor;

const MAGIC: &str = "blurcast-checkpoint v1";

pub fn save(
    path: &Path,
    model: &ModelParams,
    normalizer: Option<&Normalizer>,
) -> Result<()> {
    let hyper = &model.forecaster.hyper;
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("variant {}\n", model.variant));
    out.push_str(&format!("d_model {}\n", hyper.d_model));
    out.push_str(&format!("n_heads {}\n", hyper.n_heads));
    out.push_str(&format!("n_layers {}\n", hyper.n_layers));
    out.push_str(&format!("kappa {}\n", hyper.kappa));
    out.push_str(&format!("tau {}\n", hyper.tau));
    if let Some(gp) = &model.gp {
        out.push_str(&format!("m_inducing {}\n", gp.inducing_inputs.shape()[0]));
    }
    if let Some(n) = normalizer {
        out.push_str(&format!("normalizer {} {}\n", n.mean, n.std));
    }
    for (name, tensor) in model.named_tensors() {
        out.push_str("tensor ");
        out.push_str(&name);
        for d in tensor.shape() {
            out.push_str(&format!(" {}", d));
        }
        out.push('\n');
        let mut first = true;
        for v in tensor.data() {
            if !first {
                out.push(' ');
            }
            out.push_str(&format!("{}", v));
            first = false;
        }
        out.push('\n');
    }
    out.push_str("end\n");
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug)]
pub struct Loaded {
    pub model: ModelParams,
    pub normalizer: Option<Normalizer>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint(format!(
            "{}: not a {} file",
            path.display(),
            MAGIC
        )));
    }

    let mut variant: Option<Variant> = None;
    let mut fields: Vec<(String, usize)> = Vec::new();
    let mut m_inducing: Option<usize> = None;
    let mut normalizer: Option<Normalizer> = None;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut saw_end = false;

    while let Some(line) = lines.next() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("variant") => {
                let tag = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("variant line missing value".into()))?;
                variant = Some(tag.parse()?);
            }
            Some(key @ ("d_model" | "n_heads" | "n_layers" | "kappa" | "tau" | "m_inducing")) => {
                let v: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("bad {} line", key)))?;
                if key == "m_inducing" {
                    m_inducing = Some(v);
                } else {
                    fields.push((key.to_string(), v));
                }
            }
            Some("normalizer") => {
                let mean: f64 = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Checkpoint("bad normalizer line".into()))?;
                let std: f64 = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Checkpoint("bad normalizer line".into()))?;
                normalizer = Some(Normalizer { mean, std });
            }
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor line missing name".into()))?
                    .to_string();
                let shape: Vec<usize> = parts
                    .map(|s| {
                        s.parse::<usize>().map_err(|_| {
                            Error::Checkpoint(format!("bad dimension in tensor {}", name))
                        })
                    })
                    .collect::<Result<_>>()?;
                let values_line = lines
                    .next()
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {} missing values", name)))?;
                let data: Vec<f64> = values_line
                    .split_whitespace()
                    .map(|s| {
                        s.parse::<f64>().map_err(|_| {
                            Error::Checkpoint(format!("bad value in tensor {}", name))
                        })
                    })
                    .collect::<Result<_>>()?;
                let tensor = Tensor::new(shape, data).map_err(|e| {
                    Error::Checkpoint(format!("tensor {}: {}", name, e))
                })?;
                tensors.push((name, tensor));
            }
            Some("end") => {
                saw_end = true;
                break;
            }
            Some(other) => {
                return Err(Error::Checkpoint(format!("unknown checkpoint key `{}`", other)));
            }
            None => {}
        }
    }
    if !saw_end {
        return Err(Error::Checkpoint("truncated checkpoint (no end marker)".into()));
    }

    let variant =
        variant.ok_or_else(|| Error::Checkpoint("checkpoint missing variant".into()))?;
    let get = |key: &str| -> Result<usize> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing {}", key)))
    };
    let hyper = ForecasterHyper {
        d_model: get("d_model")?,
        n_heads: get("n_heads")?,
        n_layers: get("n_layers")?,
        kappa: get("kappa")?,
        tau: get("tau")?,
    };
    if variant.needs_gp() && m_inducing.is_none() {
        return Err(Error::Checkpoint("checkpoint missing m_inducing".into()));
    }

    let mut model = ModelParams::init(variant, &hyper, m_inducing.unwrap_or(1), 0)
        .map_err(|e| Error::Checkpoint(format!("cannot build skeleton: {}", e)))?;
    let mut filled = vec![false; tensors.len()];
    for (name, slot) in model.named_tensors_mut() {
        let idx = tensors
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing tensor {}", name)))?;
        let (_, loaded) = &tensors[idx];
        if loaded.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                name,
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded.clone();
        filled[idx] = true;
    }
    if let Some(pos) = filled.iter().position(|f| !f) {
        return Err(Error::Checkpoint(format!(
            "checkpoint has unexpected tensor {}",
            tensors[pos].0
        )));
    }
    Ok(Loaded { model, normalizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn toy_model(variant: Variant) -> ModelParams {
        let hyper = ForecasterHyper { d_model: 8, n_heads: 2, n_layers: 1, kappa: 6, tau: 4 };
        ModelParams::init(variant, &hyper, 3, 42).unwrap()
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        for variant in Variant::ALL {
            let model = toy_model(variant);
            let path = dir.path().join(format!("{}.txt", variant));
            let norm = Normalizer { mean: 1.25, std: std::f64::consts::FRAC_1_SQRT_2 };
            save(&path, &model, Some(&norm)).unwrap();
            let loaded = load(&path).unwrap();
            assert_eq!(loaded.model.variant, variant);
            assert_eq!(loaded.model.forecaster.hyper, model.forecaster.hyper);
            let before = model.named_tensors();
            let after = loaded.model.named_tensors();
            assert_eq!(before.len(), after.len());
            for ((n1, t1), (n2, t2)) in before.iter().zip(after.iter()) {
                assert_eq!(n1, n2);
                assert_eq!(t1.shape(), t2.shape());
                for (a, b) in t1.data().iter().zip(t2.data()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "tensor {}", n1);
                }
            }
            let n = loaded.normalizer.unwrap();
            assert_eq!(n.mean.to_bits(), norm.mean.to_bits());
            assert_eq!(n.std.to_bits(), norm.std.to_bits());
        }
    }

    #[test]
    fn normalizer_line_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.txt");
        save(&path, &toy_model(Variant::ForecastOnly), None).unwrap();
        let loaded = load(&path).unwrap();
        assert!(loaded.normalizer.is_none());
    }

    #[test]
    fn rejects_foreign_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "something else\n").unwrap();
        assert!(load(&path).is_err());

        let model = toy_model(Variant::DenoiseGp);
        let good = dir.path().join("good.txt");
        save(&good, &model, None).unwrap();
        let text = fs::read_to_string(&good).unwrap();

        let truncated = text.replace("end\n", "");
        fs::write(&path, truncated).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(m)) if m.contains("truncated")));

        let missing = text.replacen("tensor forecaster.embed.w", "tensor forecaster.embed.q", 1);
        fs::write(&path, missing).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported_with_the_tensor_name() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy_model(Variant::ForecastOnly);
        let path = dir.path().join("model.txt");
        save(&path, &model, None).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("tensor forecaster.head.b 1", "tensor forecaster.head.b 2", 1);
        fs::write(&path, tampered).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("forecaster.head.b"), "{}", err);
    }
}
