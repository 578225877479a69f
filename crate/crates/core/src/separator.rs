//! Masking separation model: learnable analysis/synthesis bases around a
//! small dilated-convolution mask network, with a mixture-consistency
//! projection so the sources always sum back to the input.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};
use crate::grad::{glorot_uniform, GradError, Graph, ParameterStore, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum SeparatorError {
    #[error("invalid separator config: {0}")]
    BadConfig(String),
    #[error("input of {len} samples is shorter than one analysis window ({win})")]
    TooShort { len: usize, win: usize },
    #[error("model expects {model} Hz, input is {input} Hz")]
    RateMismatch { model: u32, input: u32 },
    #[error("non-finite value in separator activations")]
    NonFiniteActivation,
    #[error("analysis basis is rank deficient, cannot build synthesis initializer")]
    RankDeficientBasis,
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparatorConfig {
    pub sample_rate_hz: u32,
    pub basis_window_ms: f64,
    pub basis_hop_ms: f64,
    pub n_basis: usize,
    pub n_sources: usize,
    pub n_repeats: usize,
    pub n_blocks: usize,
    pub hidden_channels: usize,
    pub dilations: Vec<usize>,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 8000,
            basis_window_ms: 1.0,
            basis_hop_ms: 0.5,
            n_basis: 256,
            n_sources: 4,
            n_repeats: 2,
            n_blocks: 4,
            hidden_channels: 64,
            dilations: vec![1, 2, 4, 8],
        }
    }
}

impl SeparatorConfig {
    pub fn window_samples(&self) -> usize {
        (self.basis_window_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.basis_hop_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<(), SeparatorError> {
        let bad = |msg: String| Err(SeparatorError::BadConfig(msg));
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive".into());
        }
        if self.basis_hop_ms > self.basis_window_ms {
            return bad(format!(
                "hop {} ms exceeds window {} ms",
                self.basis_hop_ms, self.basis_window_ms
            ));
        }
        let (win, hop) = (self.window_samples(), self.hop_samples());
        if win == 0 || hop == 0 {
            return bad(format!(
                "window/hop of {}/{} ms is below one sample at {} Hz",
                self.basis_window_ms, self.basis_hop_ms, self.sample_rate_hz
            ));
        }
        if hop > win {
            return bad(format!("hop {hop} samples exceeds window {win}"));
        }
        if self.n_basis == 0 {
            return bad("n_basis must be at least 1".into());
        }
        if self.n_basis < win {
            return bad(format!(
                "n_basis {} is smaller than the {win}-sample window; analysis would lose rank",
                self.n_basis
            ));
        }
        if self.n_sources < 2 {
            return bad(format!("n_sources {} must be at least 2", self.n_sources));
        }
        if self.n_repeats == 0 || self.n_blocks == 0 || self.hidden_channels == 0 {
            return bad("repeats, blocks and hidden_channels must be positive".into());
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilation schedule must be non-empty and positive".into());
        }
        Ok(())
    }
}

/// Output of [`SeparatorModel::separate`]: M sources, each the length of the
/// input, summing to the input under the consistency projection.
#[derive(Clone, Debug)]
pub struct SeparatedSources {
    pub sources: Vec<AudioBuffer>,
}

/// Graph handles from one forward pass, for training and inspection.
pub struct SeparatorForward {
    pub mixture: TensorId,
    pub sources: Vec<TensorId>,
    pub masks: TensorId,
    pub param_ids: BTreeMap<String, TensorId>,
}

pub struct SeparatorModel {
    cfg: SeparatorConfig,
    store: ParameterStore,
    win: usize,
    hop: usize,
}

impl SeparatorModel {
    /// Fresh model. Analysis basis and network weights are Glorot-uniform;
    /// the synthesis basis starts as the scaled pseudo-inverse of the
    /// analysis basis so that synthesize(analyze(x)) reconstructs x.
    pub fn new(cfg: SeparatorConfig, seed: u64) -> Result<Self, SeparatorError> {
        cfg.validate()?;
        let (win, hop) = (cfg.window_samples(), cfg.hop_samples());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();

        let analysis = glorot_uniform(&mut rng, win, cfg.n_basis, &[cfg.n_basis, win]);
        let synthesis = pseudo_inverse_scaled(analysis.data(), cfg.n_basis, win, hop)?;
        store.insert("basis/analysis", analysis)?;
        store.insert(
            "basis/synthesis",
            Tensor::new(&[win, cfg.n_basis], synthesis)?.with_grad(),
        )?;
        store.insert(
            "frontnorm/gamma",
            Tensor::new(&[cfg.n_basis], vec![1.0; cfg.n_basis])?.with_grad(),
        )?;
        store.insert("frontnorm/beta", Tensor::zeros(&[cfg.n_basis]).with_grad())?;

        let h = cfg.hidden_channels;
        store.insert(
            "proj_in/w",
            glorot_uniform(&mut rng, cfg.n_basis, h, &[h, cfg.n_basis]),
        )?;
        store.insert("proj_in/b", Tensor::zeros(&[h]).with_grad())?;

        for r in 0..cfg.n_repeats {
            for b in 0..cfg.n_blocks {
                let p = format!("block{r}_{b}");
                store.insert(&format!("{p}/pw1/w"), glorot_uniform(&mut rng, h, h, &[h, h]))?;
                store.insert(&format!("{p}/pw1/b"), Tensor::zeros(&[h]).with_grad())?;
                store.insert(
                    &format!("{p}/dw/w"),
                    glorot_uniform(&mut rng, 3, 3, &[h, 1, 3]),
                )?;
                store.insert(&format!("{p}/dw/b"), Tensor::zeros(&[h]).with_grad())?;
                store.insert(&format!("{p}/pw2/w"), glorot_uniform(&mut rng, h, h, &[h, h]))?;
                store.insert(&format!("{p}/pw2/b"), Tensor::zeros(&[h]).with_grad())?;
                store.insert(
                    &format!("{p}/scale"),
                    Tensor::new(&[1], vec![0.1])?.with_grad(),
                )?;
            }
        }

        let mask_rows = cfg.n_sources * cfg.n_basis;
        store.insert(
            "mask/w",
            glorot_uniform(&mut rng, h, mask_rows, &[mask_rows, h]),
        )?;
        store.insert("mask/b", Tensor::zeros(&[mask_rows]).with_grad())?;

        Ok(Self {
            cfg,
            store,
            win,
            hop,
        })
    }

    /// Wrap an existing parameter store (a loaded checkpoint), validating
    /// that every expected parameter is present with the right shape.
    pub fn from_store(cfg: SeparatorConfig, store: ParameterStore) -> Result<Self, SeparatorError> {
        cfg.validate()?;
        let reference = Self::new(cfg.clone(), 0)?;
        for (name, p) in reference.store.iter() {
            let q = store.get(name)?;
            if q.shape() != p.shape() {
                return Err(SeparatorError::BadConfig(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    q.shape(),
                    p.shape()
                )));
            }
        }
        let (win, hop) = (cfg.window_samples(), cfg.hop_samples());
        Ok(Self {
            cfg,
            store,
            win,
            hop,
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn window_samples(&self) -> usize {
        self.win
    }

    pub fn hop_samples(&self) -> usize {
        self.hop
    }

    /// Analysis coefficients, shape `[n_basis, n_frames]`.
    pub fn analyze(&self, audio: &AudioBuffer) -> Result<Tensor, SeparatorError> {
        self.check_input(audio)?;
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[audio.len()], audio.samples().to_vec())?);
        let c = self.analyze_graph(&mut g, x, self.store.get("basis/analysis")?.clone())?;
        Ok(g.tensor(c))
    }

    /// Overlap-add synthesis from `[n_basis, n_frames]` coefficients. The
    /// output has the full overlap-add length `(n_frames-1)*hop + window`;
    /// callers trim to their input length.
    pub fn synthesize(&self, coeffs: &Tensor) -> Result<AudioBuffer, SeparatorError> {
        let [n_basis, _] = coeffs.shape() else {
            return Err(SeparatorError::BadConfig(format!(
                "coefficients must be 2-D, got {:?}",
                coeffs.shape()
            )));
        };
        if *n_basis != self.cfg.n_basis {
            return Err(SeparatorError::BadConfig(format!(
                "coefficients have {n_basis} rows, model has {} basis vectors",
                self.cfg.n_basis
            )));
        }
        let mut g = Graph::new();
        let c = g.input(coeffs.clone());
        let s = g.input(self.store.get("basis/synthesis")?.clone());
        let frames = g.matmul(s, c)?;
        let ft = g.transpose(frames)?;
        let out = g.overlap_add(ft, self.hop)?;
        Ok(AudioBuffer::new(
            g.data(out).to_vec(),
            self.cfg.sample_rate_hz,
        )?)
    }

    fn check_input(&self, audio: &AudioBuffer) -> Result<(), SeparatorError> {
        if audio.sample_rate_hz() != self.cfg.sample_rate_hz {
            return Err(SeparatorError::RateMismatch {
                model: self.cfg.sample_rate_hz,
                input: audio.sample_rate_hz(),
            });
        }
        if audio.len() < self.win {
            return Err(SeparatorError::TooShort {
                len: audio.len(),
                win: self.win,
            });
        }
        Ok(())
    }

    fn analyze_graph(
        &self,
        g: &mut Graph,
        x: TensorId,
        analysis: Tensor,
    ) -> Result<TensorId, SeparatorError> {
        let frames = g.frame(x, self.win, self.hop)?;
        let ft = g.transpose(frames)?;
        let a = g.input(analysis);
        Ok(g.matmul(a, ft)?)
    }

    /// Build the full differentiable forward pass on `g`. Model parameters
    /// are inserted as gradient-tracked leaves and reported in `param_ids`.
    pub fn forward(&self, g: &mut Graph, mixture: &[f64]) -> Result<SeparatorForward, SeparatorError> {
        if mixture.len() < self.win {
            return Err(SeparatorError::TooShort {
                len: mixture.len(),
                win: self.win,
            });
        }
        let cfg = &self.cfg;
        let mut ids = BTreeMap::new();
        let mut p = |g: &mut Graph, name: &str| -> Result<TensorId, SeparatorError> {
            let id = g.param(self.store.get(name)?.clone());
            ids.insert(name.to_string(), id);
            Ok(id)
        };

        let x = g.input(Tensor::new(&[mixture.len()], mixture.to_vec())?);

        // analysis
        let frames = g.frame(x, self.win, self.hop)?;
        let ft = g.transpose(frames)?;
        let analysis = p(g, "basis/analysis")?;
        let coeffs = g.matmul(analysis, ft)?;

        // input normalization: global LN with a per-basis affine
        let normed = g.global_ln(coeffs, 1e-8)?;
        let gamma = p(g, "frontnorm/gamma")?;
        let beta = p(g, "frontnorm/beta")?;
        let scaled = g.row_scale(normed, gamma)?;
        let affine = g.row_add(scaled, beta)?;

        let w_in = p(g, "proj_in/w")?;
        let b_in = p(g, "proj_in/b")?;
        let mut h = g.dense(w_in, affine, Some(b_in))?;

        for r in 0..cfg.n_repeats {
            for b in 0..cfg.n_blocks {
                let prefix = format!("block{r}_{b}");
                let dilation = cfg.dilations[b % cfg.dilations.len()];
                let w1 = p(g, &format!("{prefix}/pw1/w"))?;
                let b1 = p(g, &format!("{prefix}/pw1/b"))?;
                let dw = p(g, &format!("{prefix}/dw/w"))?;
                let db = p(g, &format!("{prefix}/dw/b"))?;
                let w2 = p(g, &format!("{prefix}/pw2/w"))?;
                let b2 = p(g, &format!("{prefix}/pw2/b"))?;
                let sc = p(g, &format!("{prefix}/scale"))?;

                let h1 = g.dense(w1, h, Some(b1))?;
                let a1 = g.relu(h1);
                let d = g.conv1d(a1, dw, Some(db), 1, dilation, dilation, cfg.hidden_channels)?;
                let a2 = g.relu(d);
                let h2 = g.dense(w2, a2, Some(b2))?;
                let out = g.scale(h2, sc)?;
                h = g.add(h, out)?;
            }
        }

        let mask_w = p(g, "mask/w")?;
        let mask_b = p(g, "mask/b")?;
        let logits = g.dense(mask_w, h, Some(mask_b))?;
        let masks = g.sigmoid(logits);

        let synthesis = p(g, "basis/synthesis")?;
        let mut raw_sources = Vec::with_capacity(cfg.n_sources);
        for m in 0..cfg.n_sources {
            let mask_m = g.slice_rows(masks, m * cfg.n_basis, (m + 1) * cfg.n_basis)?;
            let cm = g.mul(mask_m, coeffs)?;
            let fr = g.matmul(synthesis, cm)?;
            let frt = g.transpose(fr)?;
            let full = g.overlap_add(frt, self.hop)?;
            let s = if g.data(full).len() == mixture.len() {
                full
            } else {
                g.slice1d(full, 0, mixture.len())?
            };
            raw_sources.push(s);
        }

        // mixture consistency, in-graph so gradients flow through it
        let mut total = raw_sources[0];
        for &s in &raw_sources[1..] {
            total = g.add(total, s)?;
        }
        let resid = g.sub(x, total)?;
        let share = g.mul_const(resid, 1.0 / cfg.n_sources as f64);
        let sources = raw_sources
            .iter()
            .map(|&s| g.add(s, share))
            .collect::<Result<Vec<_>, _>>()?;

        Ok(SeparatorForward {
            mixture: x,
            sources,
            masks,
            param_ids: ids,
        })
    }

    /// Run the model on a mixture and return M consistency-projected
    /// sources of the same length.
    pub fn separate(&self, mixture: &AudioBuffer) -> Result<SeparatedSources, SeparatorError> {
        self.check_input(mixture)?;
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, mixture.samples())?;
        if !g.data(fwd.masks).iter().all(|v| v.is_finite()) {
            return Err(SeparatorError::NonFiniteActivation);
        }
        let mut sources = Vec::with_capacity(fwd.sources.len());
        for id in fwd.sources {
            let data = g.data(id);
            if !data.iter().all(|v| v.is_finite()) {
                return Err(SeparatorError::NonFiniteActivation);
            }
            sources.push(AudioBuffer::new(data.to_vec(), mixture.sample_rate_hz())?);
        }
        Ok(SeparatedSources { sources })
    }
}

/// Uniform-weight mixture consistency projection:
/// `s'_m = s_m + (mixture - sum_k s_k) / M`. The projected sources sum to
/// the mixture exactly and the projection is idempotent.
pub fn mixture_consistency(
    sources: &[AudioBuffer],
    mixture: &AudioBuffer,
) -> Result<Vec<AudioBuffer>, SeparatorError> {
    if sources.is_empty() {
        return Err(SeparatorError::BadConfig("no sources to project".into()));
    }
    for s in sources {
        if s.len() != mixture.len() {
            return Err(SeparatorError::Audio(AudioError::LengthMismatch(
                s.len(),
                mixture.len(),
            )));
        }
    }
    let m = sources.len() as f64;
    let n = mixture.len();
    let mut resid = mixture.samples().to_vec();
    for s in sources {
        for (r, v) in resid.iter_mut().zip(s.samples()) {
            *r -= v;
        }
    }
    let mut out = Vec::with_capacity(sources.len());
    for s in sources {
        let mut data = Vec::with_capacity(n);
        for (v, r) in s.samples().iter().zip(&resid) {
            data.push(v + r / m);
        }
        out.push(AudioBuffer::new(data, mixture.sample_rate_hz())?);
    }
    Ok(out)
}

/// `(hop/win) * (A^T A)^{-1} A^T` for analysis basis `a` of shape
/// `[n_basis, win]`, via an in-place Cholesky solve of the normal equations.
fn pseudo_inverse_scaled(
    a: &[f64],
    n_basis: usize,
    win: usize,
    hop: usize,
) -> Result<Vec<f64>, SeparatorError> {
    // gram = A^T A, [win, win]
    let mut gram = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let mut acc = 0.0;
            for k in 0..n_basis {
                acc += a[k * win + i] * a[k * win + j];
            }
            gram[i * win + j] = acc;
        }
    }
    // rhs = A^T, [win, n_basis]
    let mut rhs = vec![0.0; win * n_basis];
    for i in 0..win {
        for k in 0..n_basis {
            rhs[i * n_basis + k] = a[k * win + i];
        }
    }
    cholesky_solve(&mut gram, win, &mut rhs, n_basis)?;
    let scale = hop as f64 / win as f64;
    for v in rhs.iter_mut() {
        *v *= scale;
    }
    Ok(rhs)
}

/// Solve `G X = B` for SPD `G` (n x n) in place; `b` is n x m row-major and
/// is overwritten with the solution.
fn cholesky_solve(g: &mut [f64], n: usize, b: &mut [f64], m: usize) -> Result<(), SeparatorError> {
    // factor G = L L^T, storing L in the lower triangle
    for i in 0..n {
        for j in 0..=i {
            let mut acc = g[i * n + j];
            for k in 0..j {
                acc -= g[i * n + k] * g[j * n + k];
            }
            if i == j {
                if acc <= 1e-12 {
                    return Err(SeparatorError::RankDeficientBasis);
                }
                g[i * n + i] = acc.sqrt();
            } else {
                g[i * n + j] = acc / g[j * n + j];
            }
        }
    }
    // forward substitution L Y = B
    for col in 0..m {
        for i in 0..n {
            let mut acc = b[i * m + col];
            for k in 0..i {
                acc -= g[i * n + k] * b[k * m + col];
            }
            b[i * m + col] = acc / g[i * n + i];
        }
        // back substitution L^T X = Y
        for i in (0..n).rev() {
            let mut acc = b[i * m + col];
            for k in i + 1..n {
                acc -= g[k * n + i] * b[k * m + col];
            }
            b[i * m + col] = acc / g[i * n + i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SeparatorConfig {
        SeparatorConfig {
            sample_rate_hz: 8000,
            n_basis: 16,
            n_sources: 3,
            n_repeats: 1,
            n_blocks: 2,
            hidden_channels: 8,
            dilations: vec![1, 2],
            ..SeparatorConfig::default()
        }
    }

    fn tone(n: usize, freq: f64, rate: f64) -> AudioBuffer {
        let data: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate).sin() * 0.3)
            .collect();
        AudioBuffer::new(data, rate as u32).unwrap()
    }

    #[test]
    fn config_defaults_give_8_and_4_samples_at_8khz() {
        let cfg = SeparatorConfig::default();
        assert_eq!(cfg.window_samples(), 8);
        assert_eq!(cfg.hop_samples(), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_hop_longer_than_window() {
        let cfg = SeparatorConfig {
            basis_hop_ms: 2.0,
            ..SeparatorConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(SeparatorError::BadConfig(_))));
    }

    #[test]
    fn round_trip_at_initialization_is_tight_on_interior() {
        let model = SeparatorModel::new(small_cfg(), 3).unwrap();
        let x = tone(480, 700.0, 8000.0);
        let coeffs = model.analyze(&x).unwrap();
        let recon = model.synthesize(&coeffs).unwrap();
        let (win, n) = (model.window_samples(), x.len());
        let mut num = 0.0;
        let mut den = 0.0;
        for i in win..n - win {
            let d = recon.samples()[i] - x.samples()[i];
            num += d * d;
            den += x.samples()[i] * x.samples()[i];
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-3, "interior relative error {rel}");
    }

    #[test]
    fn impulse_coefficients_are_basis_columns() {
        let model = SeparatorModel::new(small_cfg(), 5).unwrap();
        let (win, hop) = (model.window_samples(), model.hop_samples());
        let n = 64;
        let t0 = 24;
        let mut data = vec![0.0; n];
        data[t0] = 1.0;
        let x = AudioBuffer::new(data, 8000).unwrap();
        let coeffs = model.analyze(&x).unwrap();
        let [n_basis, n_frames] = coeffs.shape() else {
            panic!()
        };
        let a = model.store().get("basis/analysis").unwrap();
        for f in 0..*n_frames {
            let start = f * hop;
            if start <= t0 && t0 < start + win {
                let offset = t0 - start;
                for k in 0..*n_basis {
                    let got = coeffs.data()[k * n_frames + f];
                    let want = a.data()[k * win + offset];
                    assert!((got - want).abs() < 1e-12);
                }
            } else {
                for k in 0..*n_basis {
                    assert_eq!(coeffs.data()[k * n_frames + f], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_coefficients_and_synthesis() {
        let model = SeparatorModel::new(small_cfg(), 7).unwrap();
        let x = AudioBuffer::silence(128, 8000);
        let coeffs = model.analyze(&x).unwrap();
        assert!(coeffs.data().iter().all(|&v| v == 0.0));
        let recon = model.synthesize(&coeffs).unwrap();
        assert!(recon.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_sources_sum_to_input_within_1e5() {
        let model = SeparatorModel::new(small_cfg(), 11).unwrap();
        let x = tone(400, 450.0, 8000.0);
        let out = model.separate(&x).unwrap();
        assert_eq!(out.sources.len(), 3);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..x.len() {
            let total: f64 = out.sources.iter().map(|s| s.samples()[i]).sum();
            num += (total - x.samples()[i]).powi(2);
            den += x.samples()[i].powi(2);
        }
        assert!((num / den).sqrt() < 1e-5);
        for s in &out.sources {
            assert_eq!(s.len(), x.len());
        }
    }

    #[test]
    fn masks_live_strictly_inside_unit_interval() {
        let model = SeparatorModel::new(small_cfg(), 13).unwrap();
        let x = tone(200, 900.0, 8000.0);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, x.samples()).unwrap();
        for &v in g.data(fwd.masks) {
            assert!(v > 0.0 && v < 1.0, "mask value {v}");
        }
    }

    #[test]
    fn zero_mixture_gives_zero_sources() {
        let model = SeparatorModel::new(small_cfg(), 17).unwrap();
        let x = AudioBuffer::silence(256, 8000);
        let out = model.separate(&x).unwrap();
        for s in &out.sources {
            assert!(s.samples().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn short_input_is_rejected() {
        let model = SeparatorModel::new(small_cfg(), 19).unwrap();
        let x = AudioBuffer::new(vec![0.1; 4], 8000).unwrap();
        assert!(matches!(
            model.separate(&x),
            Err(SeparatorError::TooShort { .. })
        ));
    }

    #[test]
    fn wrong_sample_rate_is_rejected() {
        let model = SeparatorModel::new(small_cfg(), 23).unwrap();
        let x = tone(400, 450.0, 16000.0);
        assert!(matches!(
            model.separate(&x),
            Err(SeparatorError::RateMismatch { .. })
        ));
    }

    #[test]
    fn consistency_projection_exact_and_idempotent() {
        let mixture = tone(300, 500.0, 8000.0);
        let mut srcs = Vec::new();
        for seed in 0..4u64 {
            let data: Vec<f64> = (0..300)
                .map(|i| ((i as f64 * 0.37 + seed as f64 * 1.7).sin()) * 0.2)
                .collect();
            srcs.push(AudioBuffer::new(data, 8000).unwrap());
        }
        let proj = mixture_consistency(&srcs, &mixture).unwrap();
        for i in 0..mixture.len() {
            let total: f64 = proj.iter().map(|s| s.samples()[i]).sum();
            assert!((total - mixture.samples()[i]).abs() < 1e-6);
        }
        let again = mixture_consistency(&proj, &mixture).unwrap();
        for (a, b) in proj.iter().zip(&again) {
            for (x, y) in a.samples().iter().zip(b.samples()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn consistency_splits_residual_uniformly_from_zero_sources() {
        let mixture = tone(100, 800.0, 8000.0);
        let zeros = vec![AudioBuffer::silence(100, 8000); 2];
        let proj = mixture_consistency(&zeros, &mixture).unwrap();
        for s in &proj {
            for (a, b) in s.samples().iter().zip(mixture.samples()) {
                assert!((a - b / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sources_already_consistent_are_unchanged() {
        let mixture = tone(100, 800.0, 8000.0);
        let half: Vec<f64> = mixture.samples().iter().map(|v| v / 2.0).collect();
        let srcs = vec![
            AudioBuffer::new(half.clone(), 8000).unwrap(),
            AudioBuffer::new(half, 8000).unwrap(),
        ];
        let proj = mixture_consistency(&srcs, &mixture).unwrap();
        for (s, p) in srcs.iter().zip(&proj) {
            for (a, b) in s.samples().iter().zip(p.samples()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkpoint_reload_reproduces_separation_exactly() {
        let model = SeparatorModel::new(small_cfg(), 29).unwrap();
        let x = tone(320, 650.0, 8000.0);
        let before = model.separate(&x).unwrap();
        let mut bytes = Vec::new();
        model.store().save_to(&mut bytes).unwrap();
        let loaded = ParameterStore::load_from(bytes.as_slice()).unwrap();
        let model2 = SeparatorModel::from_store(small_cfg(), loaded).unwrap();
        let after = model2.separate(&x).unwrap();
        for (a, b) in before.sources.iter().zip(&after.sources) {
            for (x, y) in a.samples().iter().zip(b.samples()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn from_store_rejects_mismatched_shapes() {
        let model = SeparatorModel::new(small_cfg(), 31).unwrap();
        let mut bytes = Vec::new();
        model.store().save_to(&mut bytes).unwrap();
        let store = ParameterStore::load_from(bytes.as_slice()).unwrap();
        let mut other = small_cfg();
        other.hidden_channels = 12;
        assert!(matches!(
            SeparatorModel::from_store(other, store),
            Err(SeparatorError::BadConfig(_))
        ));
    }
}
