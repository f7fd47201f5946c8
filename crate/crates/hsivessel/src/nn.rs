//! Trainable parameters, layers, the Adam optimizer, and checkpoints.
//!
//! Networks are plain structs owning [`Param`]s. A forward pass binds each
//! parameter onto a [`Tape`] by name; after `backward`, the optimizer pulls
//! one accumulated gradient per name and updates in place. Checkpoints are a
//! single JSON file: tensors keyed by parameter path (base64 little-endian
//! f32) plus the originating config as an embedded JSON value.

use std::collections::HashMap;
use std::path::Path;

use base64::Engine;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
}

/// Visitor over a model's parameters, used by the optimizer and checkpoints.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }
}

/// 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialization over the receptive field.
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std > 0");
        let w = ArrayD::from_shape_fn(IxDyn(&[cout, cin, k, k]), |_| normal.sample(rng) as f32);
        let b = ArrayD::zeros(IxDyn(&[cout]));
        Self {
            w: Param { name: format!("{name}.w"), value: w },
            b: Param { name: format!("{name}.b"), value: b },
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape<f32>, x: ValueId) -> ValueId {
        let w = tape.param(&self.w.name, self.w.value.clone());
        let b = tape.param(&self.b.name, self.b.value.clone());
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl ParamSet for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Dense layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(name: &str, fin: usize, fout: usize, rng: &mut ChaCha12Rng) -> Self {
        let std = (2.0 / fin as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std > 0");
        let w = ArrayD::from_shape_fn(IxDyn(&[fin, fout]), |_| normal.sample(rng) as f32);
        let b = ArrayD::zeros(IxDyn(&[fout]));
        Self {
            w: Param { name: format!("{name}.w"), value: w },
            b: Param { name: format!("{name}.b"), value: b },
        }
    }

    pub fn forward(&self, tape: &Tape<f32>, x: ValueId) -> ValueId {
        let w = tape.param(&self.w.name, self.w.value.clone());
        let b = tape.param(&self.b.name, self.b.value.clone());
        tape.linear(x, w, b)
    }
}

impl ParamSet for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Adam with bias correction; state is keyed by parameter name.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    state: HashMap<String, (ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: HashMap::new() }
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, model: &mut dyn ParamSet, grads: &HashMap<String, ArrayD<f32>>) {
        self.t += 1;
        let t = self.t as i32;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let state = &mut self.state;
        model.visit_mut(&mut |p| {
            let Some(g) = grads.get(&p.name) else { return };
            let (m, v) = state
                .entry(p.name.clone())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: serde_json::Value,
    tensors: std::collections::BTreeMap<String, TensorRecord>,
}

/// Writes all parameters of the given models plus a config payload into one
/// JSON checkpoint file.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    models: &[&dyn ParamSet],
    config: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = std::collections::BTreeMap::new();
    for model in models {
        model.visit(&mut |p| {
            let mut bytes = Vec::with_capacity(p.value.len() * 4);
            for &v in p.value.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            tensors.insert(
                p.name.clone(),
                TensorRecord {
                    shape: p.value.shape().to_vec(),
                    data: base64::engine::general_purpose::STANDARD.encode(&bytes),
                },
            );
        });
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = CheckpointFile { config, tensors };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Restores parameters by name into the given models and returns the stored
/// config payload. Every model parameter must be present with a matching
/// shape; unknown tensor names are an error (likely a model mismatch).
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    models: &mut [&mut dyn ParamSet],
) -> Result<serde_json::Value> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;

    let mut used = 0usize;
    let mut failure: Option<String> = None;
    for model in models.iter_mut() {
        model.visit_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            let Some(record) = file.tensors.get(&p.name) else {
                failure = Some(format!("missing tensor '{}'", p.name));
                return;
            };
            if record.shape != p.value.shape() {
                failure = Some(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    p.name,
                    record.shape,
                    p.value.shape()
                ));
                return;
            }
            let bytes = match base64::engine::general_purpose::STANDARD.decode(&record.data) {
                Ok(b) => b,
                Err(e) => {
                    failure = Some(format!("tensor '{}': {e}", p.name));
                    return;
                }
            };
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            match ArrayD::from_shape_vec(IxDyn(&record.shape), values) {
                Ok(arr) => {
                    p.value = arr;
                    used += 1;
                }
                Err(e) => failure = Some(format!("tensor '{}': {e}", p.name)),
            }
        });
    }
    if let Some(msg) = failure {
        return Err(Error::Checkpoint(msg));
    }
    if used != file.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors but the models consumed {used}",
            file.tensors.len()
        )));
    }
    Ok(file.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_reduces_a_quadratic() {
        // Minimize ||w - c||^2 by feeding Adam the analytic gradient.
        struct One(Param);
        impl ParamSet for One {
            fn visit(&self, f: &mut dyn FnMut(&Param)) {
                f(&self.0)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                f(&mut self.0)
            }
        }
        let target = [3.0f32, -1.0, 0.5];
        let mut model = One(Param {
            name: "w".into(),
            value: ArrayD::zeros(IxDyn(&[3])),
        });
        let mut opt = Adam::new(0.05);
        for _ in 0..400 {
            let g: Vec<f32> = model
                .0
                .value
                .iter()
                .zip(target.iter())
                .map(|(&w, &c)| 2.0 * (w - c))
                .collect();
            let mut grads = HashMap::new();
            grads.insert("w".to_string(), ArrayD::from_shape_vec(IxDyn(&[3]), g).unwrap());
            opt.step(&mut model, &grads);
        }
        for (w, c) in model.0.value.iter().zip(target.iter()) {
            assert!((w - c).abs() < 1e-2, "{w} vs {c}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_bits() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");

        let conv = Conv2d::new("layer", 3, 4, 3, 1, 1, &mut rng);
        let lin = Linear::new("head", 4, 2, &mut rng);
        save_checkpoint(&path, &[&conv, &lin], serde_json::json!({"note": "test"})).unwrap();

        let mut conv2 = Conv2d::new("layer", 3, 4, 3, 1, 1, &mut rng);
        let mut lin2 = Linear::new("head", 4, 2, &mut rng);
        let cfg = load_checkpoint(&path, &mut [&mut conv2, &mut lin2]).unwrap();
        assert_eq!(cfg["note"], "test");
        assert!(conv
            .w
            .value
            .iter()
            .zip(conv2.w.value.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(lin
            .w
            .value
            .iter()
            .zip(lin2.w.value.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_shape_mismatch_is_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let conv = Conv2d::new("layer", 3, 4, 3, 1, 1, &mut rng);
        save_checkpoint(&path, &[&conv], serde_json::Value::Null).unwrap();
        let mut other = Conv2d::new("layer", 3, 8, 3, 1, 1, &mut rng);
        assert!(load_checkpoint(&path, &mut [&mut other]).is_err());
    }
}
