//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is define-by-run: a [`Graph`] is rebuilt for every batch,
//! operators execute eagerly, and [`Graph::backward`] walks the tape in
//! reverse creation order. Everything is single threaded and deterministic:
//! parameters live in sorted maps, reductions accumulate in a fixed order,
//! and no operator consults global state.

mod graph;

pub use graph::{Gradients, Graph, TensorId};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadShape { len: usize, shape: Vec<usize> },
    #[error("tensor contains a non-finite value")]
    NonFinite,
    #[error("backward target must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("no gradient supplied for parameter {name:?}")]
    MissingGrad { name: String },
    #[error("non-finite gradient for parameter {name:?}")]
    NonFiniteGrad { name: String },
    #[error("gradient for {name:?} has shape {got:?}, parameter has shape {want:?}")]
    GradShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("parameter {name:?} already present")]
    DuplicateParam { name: String },
    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major tensor. Data is stored and computed at 64-bit precision
/// so analytic gradients can be audited against central finite differences
/// to tight tolerances.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, GradError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(GradError::BadShape {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(GradError::NonFinite);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// 1-D tensor that borrows nothing; panics on non-finite input.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self::new(&[data.len()], data).expect("finite 1-D data")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Glorot/Xavier uniform initialization: `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`. Returned tensor requires grad.
pub fn glorot_uniform<R: Rng>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data)
        .expect("generated data matches shape")
        .with_grad()
}

/// Named gradients keyed like the parameter store.
pub type GradMap = BTreeMap<String, Tensor>;

/// Element-wise `into += from` for every entry of `from`.
pub fn grad_map_add(into: &mut GradMap, from: &GradMap) {
    for (name, g) in from {
        match into.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
}

pub fn grad_map_scale(map: &mut GradMap, factor: f64) {
    for g in map.values_mut() {
        for v in g.data.iter_mut() {
            *v *= factor;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Named trainable parameters plus Adam state. Iteration order is the
/// lexicographic order of names, which keeps updates deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    adam_m: BTreeMap<String, Vec<f64>>,
    adam_v: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), GradError> {
        if self.params.contains_key(name) {
            return Err(GradError::DuplicateParam {
                name: name.to_string(),
            });
        }
        self.params.insert(name.to_string(), tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, GradError> {
        self.params.get(name).ok_or_else(|| GradError::UnknownParam {
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, GradError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| GradError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of Adam steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// One bias-corrected Adam update. `grads` must contain a finite
    /// gradient of matching shape for every parameter.
    pub fn adam_step(&mut self, grads: &GradMap, cfg: &AdamConfig) -> Result<(), GradError> {
        for (name, p) in &self.params {
            let g = grads.get(name).ok_or_else(|| GradError::MissingGrad {
                name: name.clone(),
            })?;
            if g.shape() != p.shape() {
                return Err(GradError::GradShape {
                    name: name.clone(),
                    got: g.shape().to_vec(),
                    want: p.shape().to_vec(),
                });
            }
            if !g.data().iter().all(|v| v.is_finite()) {
                return Err(GradError::NonFiniteGrad { name: name.clone() });
            }
        }
        let t = self.step + 1;
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (name, p) in self.params.iter_mut() {
            let g = grads[name].data();
            let m = self
                .adam_m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .adam_v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let theta = p.data_mut();
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.step = t;
        Ok(())
    }

    /// Serialize to the checkpoint byte layout:
    ///
    /// ```text
    /// magic      8  bytes  "CHORUSCK"
    /// version    u32 LE    1
    /// step       u64 LE    Adam step counter
    /// n_records  u64 LE
    /// record *   kind u8 (0 = parameter, 1 = Adam m, 2 = Adam v)
    ///            dtype u8 (0 = f64)
    ///            name_len u64 LE, name bytes (UTF-8)
    ///            ndim u64 LE, dims u64 LE * ndim
    ///            values f64 LE * prod(dims)
    /// ```
    ///
    /// Records are sorted by (kind, name). Adam records appear only for
    /// parameters that have been stepped at least once.
    pub fn save_to<W: Write>(&self, mut w: W) -> Result<(), GradError> {
        w.write_all(MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        let n = self.params.len() + self.adam_m.len() + self.adam_v.len();
        w.write_all(&(n as u64).to_le_bytes())?;
        for (name, p) in &self.params {
            write_record(&mut w, 0, name, p.shape(), p.data())?;
        }
        for (name, m) in &self.adam_m {
            let shape = self.params[name].shape();
            write_record(&mut w, 1, name, shape, m)?;
        }
        for (name, v) in &self.adam_v {
            let shape = self.params[name].shape();
            write_record(&mut w, 2, name, shape, v)?;
        }
        Ok(())
    }

    pub fn load_from<R: Read>(mut r: R) -> Result<Self, GradError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(GradError::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(GradError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let step = read_u64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let mut store = Self {
            step,
            ..Self::default()
        };
        let mut moments: Vec<(u8, String, Vec<usize>, Vec<f64>)> = Vec::new();
        for _ in 0..n {
            let (kind, name, shape, data) = read_record(&mut r)?;
            match kind {
                0 => {
                    let t = Tensor::new(&shape, data)
                        .map_err(|e| GradError::Checkpoint(format!("parameter {name}: {e}")))?;
                    store.insert(&name, t)?;
                }
                1 | 2 => moments.push((kind, name, shape, data)),
                k => {
                    return Err(GradError::Checkpoint(format!(
                        "unknown record kind {k} for {name}"
                    )))
                }
            }
        }
        for (kind, name, shape, data) in moments {
            let p = store.get(&name).map_err(|_| {
                GradError::Checkpoint(format!("optimizer state for unknown parameter {name}"))
            })?;
            if p.shape() != shape.as_slice() {
                return Err(GradError::Checkpoint(format!(
                    "optimizer state for {name} has shape {shape:?}, parameter has {:?}",
                    p.shape()
                )));
            }
            let slot = if kind == 1 {
                &mut store.adam_m
            } else {
                &mut store.adam_v
            };
            slot.insert(name, data);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), GradError> {
        self.save_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, GradError> {
        Self::load_from(BufReader::new(File::open(path)?))
    }
}

const MAGIC: &[u8; 8] = b"CHORUSCK";

fn write_record<W: Write>(
    w: &mut W,
    kind: u8,
    name: &str,
    shape: &[usize],
    data: &[f64],
) -> Result<(), GradError> {
    w.write_all(&[kind, 0])?;
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u64).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 8);
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_record<R: Read>(r: &mut R) -> Result<(u8, String, Vec<usize>, Vec<f64>), GradError> {
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let (kind, dtype) = (head[0], head[1]);
    if dtype != 0 {
        return Err(GradError::Checkpoint(format!("unknown dtype {dtype}")));
    }
    let name_len = read_u64(r)? as usize;
    if name_len > 1 << 20 {
        return Err(GradError::Checkpoint(format!(
            "implausible name length {name_len}"
        )));
    }
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|e| GradError::Checkpoint(format!("name is not UTF-8: {e}")))?;
    let ndim = read_u64(r)? as usize;
    if ndim > 8 {
        return Err(GradError::Checkpoint(format!("implausible ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > 1 << 30 {
        return Err(GradError::Checkpoint(format!(
            "implausible record size {numel}"
        )));
    }
    let mut buf = vec![0u8; numel * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((kind, name, shape, data))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, GradError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, GradError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, vals: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::from_vec(vals.to_vec())).unwrap();
        s
    }

    #[test]
    fn tensor_rejects_bad_shape_and_nan() {
        assert!(matches!(
            Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0]),
            Err(GradError::BadShape { .. })
        ));
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f64::NAN]),
            Err(GradError::NonFinite)
        ));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = store_with("w", &[1.0]);
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![1.0]));
        s.adam_step(&grads, &AdamConfig::with_lr(0.01)).unwrap();
        let w = s.get("w").unwrap().data()[0];
        // bias-corrected first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let expected = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-15, "w = {w}");
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut s = store_with("w", &[3.5, -2.0]);
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![0.0, 0.0]));
        s.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[3.5, -2.0]);
    }

    #[test]
    fn missing_and_nan_gradients_are_named() {
        let mut s = store_with("w", &[1.0]);
        let err = s.adam_step(&GradMap::new(), &AdamConfig::default());
        match err {
            Err(GradError::MissingGrad { name }) => assert_eq!(name, "w"),
            other => panic!("expected MissingGrad, got {other:?}"),
        }
        let mut bad = GradMap::new();
        let mut t = Tensor::from_vec(vec![0.0]);
        t.data_mut()[0] = f64::NAN;
        bad.insert("w".to_string(), t);
        match s.adam_step(&bad, &AdamConfig::default()) {
            Err(GradError::NonFiniteGrad { name }) => assert_eq!(name, "w"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_parameters() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut s = ParameterStore::new();
            s.insert("w", glorot_uniform(&mut rng, 4, 4, &[4, 4]))
                .unwrap();
            for step in 0..25 {
                let mut grads = GradMap::new();
                let g: Vec<f64> = s.get("w").unwrap().data().iter().map(|v| v * 0.1 + step as f64 * 1e-3).collect();
                grads.insert("w".to_string(), Tensor::new(&[4, 4], g).unwrap());
                s.adam_step(&grads, &AdamConfig::default()).unwrap();
            }
            s.get("w").unwrap().data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParameterStore::new();
        s.insert("a/weight", glorot_uniform(&mut rng, 3, 5, &[5, 3]))
            .unwrap();
        s.insert("a/bias", Tensor::zeros(&[5]).with_grad()).unwrap();
        let mut grads = GradMap::new();
        for (name, p) in s.iter() {
            let g: Vec<f64> = (0..p.numel()).map(|i| (i as f64 + 1.0) * 0.01).collect();
            grads.insert(name.clone(), Tensor::new(p.shape(), g).unwrap());
        }
        s.adam_step(&grads, &AdamConfig::default()).unwrap();

        let mut bytes = Vec::new();
        s.save_to(&mut bytes).unwrap();
        let loaded = ParameterStore::load_from(bytes.as_slice()).unwrap();
        assert_eq!(loaded.step(), s.step());
        for (name, p) in s.iter() {
            let q = loaded.get(name).unwrap();
            assert_eq!(p.shape(), q.shape());
            assert!(p
                .data()
                .iter()
                .zip(q.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // a further identical step on both stores stays bit-identical,
        // which means optimizer state survived the round trip
        let mut s2 = loaded;
        let mut s1 = s;
        s1.adam_step(&grads, &AdamConfig::default()).unwrap();
        s2.adam_step(&grads, &AdamConfig::default()).unwrap();
        for (name, p) in s1.iter() {
            let q = s2.get(name).unwrap();
            assert!(p
                .data()
                .iter()
                .zip(q.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_rejects_corrupt_magic() {
        let s = store_with("w", &[1.0]);
        let mut bytes = Vec::new();
        s.save_to(&mut bytes).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(
            ParameterStore::load_from(bytes.as_slice()),
            Err(GradError::Checkpoint(_))
        ));
    }

    #[test]
    fn duplicate_parameter_is_rejected() {
        let mut s = store_with("w", &[1.0]);
        assert!(matches!(
            s.insert("w", Tensor::from_vec(vec![2.0])),
            Err(GradError::DuplicateParam { .. })
        ));
    }
}
