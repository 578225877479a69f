//! Mixture invariant training: thresholded SNR loss, exact assignment
//! search over mixtures of mixtures, and the separator training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{make_mom, peak_normalize, AudioBuffer, AudioError, MomExample};
use crate::grad::{
    grad_map_add, grad_map_scale, AdamConfig, GradError, GradMap, Graph, Tensor, TensorId,
};
use crate::separator::{SeparatorError, SeparatorModel};

/// Enumerating 2^M assignments; beyond this the search is no longer cheap.
pub const MAX_ENUMERATED_SOURCES: usize = 16;

#[derive(Debug, Error)]
pub enum MixitError {
    #[error("reference mixture has zero energy")]
    ZeroEnergyReference,
    #[error("buffer lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{m} sources would need {} assignments; the enumeration is capped at 2^{MAX_ENUMERATED_SOURCES}", 1u64 << *m as u64)]
    TooManySources { m: usize },
    #[error("no sources given")]
    NoSources,
    #[error("training needs at least 2 reference mixtures, got {0}")]
    DatasetTooSmall(usize),
    #[error("training clip of {want} samples exceeds mixture of {have}")]
    ClipTooLong { want: usize, have: usize },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("training log: {0}")]
    Log(#[from] std::io::Error),
}

/// A 2 x M binary matrix with column sums of exactly 1: column `m` selects
/// which reference mixture source `m` is assigned to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentMatrix {
    cols: Vec<u8>,
}

impl AssignmentMatrix {
    /// Assignment number `index` in enumeration order: the base-2 digits of
    /// `index`, most significant digit first, give the row of each column.
    /// Index 0 sends every source to the first mixture.
    pub fn from_index(index: usize, n_sources: usize) -> Self {
        let cols = (0..n_sources)
            .map(|m| ((index >> (n_sources - 1 - m)) & 1) as u8)
            .collect();
        Self { cols }
    }

    pub fn index(&self) -> usize {
        self.cols
            .iter()
            .fold(0usize, |acc, &c| (acc << 1) | c as usize)
    }

    pub fn n_sources(&self) -> usize {
        self.cols.len()
    }

    /// Row (0 or 1) that source `m` is assigned to.
    pub fn row_of(&self, m: usize) -> usize {
        self.cols[m] as usize
    }

    /// Dense 2 x M entries, row major.
    pub fn entries(&self) -> [Vec<u8>; 2] {
        let top = self.cols.iter().map(|&c| 1 - c).collect();
        let bottom = self.cols.to_vec();
        [top, bottom]
    }

    /// The matrix with rows swapped.
    pub fn row_swapped(&self) -> Self {
        Self {
            cols: self.cols.iter().map(|&c| 1 - c).collect(),
        }
    }
}

/// Thresholded SNR loss on raw sample slices:
/// `10*log10(|y - y_hat|^2 / |y|^2 + tau)` with `tau = 10^(-snr_max/10)`.
/// Equals `-snr_max` at perfect reconstruction and is monotone in the
/// error power. The reference must have nonzero energy.
pub fn snr_loss_samples(y: &[f64], y_hat: &[f64], snr_max_db: f64) -> Result<f64, MixitError> {
    if y.len() != y_hat.len() {
        return Err(MixitError::LengthMismatch(y.len(), y_hat.len()));
    }
    let p: f64 = y.iter().map(|v| v * v).sum();
    if p == 0.0 {
        return Err(MixitError::ZeroEnergyReference);
    }
    let err: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let tau = 10f64.powf(-snr_max_db / 10.0);
    Ok(10.0 * (err / p + tau).log10())
}

/// [`snr_loss_samples`] over audio buffers, checking sample rates.
pub fn snr_loss(
    y: &AudioBuffer,
    y_hat: &AudioBuffer,
    snr_max_db: f64,
) -> Result<f64, MixitError> {
    if y.sample_rate_hz() != y_hat.sample_rate_hz() {
        return Err(MixitError::Audio(AudioError::RateMismatch(
            y.sample_rate_hz(),
            y_hat.sample_rate_hz(),
        )));
    }
    snr_loss_samples(y.samples(), y_hat.samples(), snr_max_db)
}

/// MixIT loss: minimum over all 2^M column-sum-1 assignment matrices of the
/// summed SNR loss of each reference against its assigned source sum.
/// Ties go to the first matrix in enumeration order.
pub fn mixit_loss_samples(
    x1: &[f64],
    x2: &[f64],
    sources: &[&[f64]],
    snr_max_db: f64,
) -> Result<(f64, AssignmentMatrix), MixitError> {
    let m = sources.len();
    if m == 0 {
        return Err(MixitError::NoSources);
    }
    if m > MAX_ENUMERATED_SOURCES {
        return Err(MixitError::TooManySources { m });
    }
    if x1.len() != x2.len() {
        return Err(MixitError::LengthMismatch(x1.len(), x2.len()));
    }
    for s in sources {
        if s.len() != x1.len() {
            return Err(MixitError::LengthMismatch(s.len(), x1.len()));
        }
    }
    let n = x1.len();
    let mut best: Option<(f64, usize)> = None;
    let mut est1 = vec![0.0; n];
    let mut est2 = vec![0.0; n];
    for index in 0..(1usize << m) {
        let a = AssignmentMatrix::from_index(index, m);
        est1.iter_mut().for_each(|v| *v = 0.0);
        est2.iter_mut().for_each(|v| *v = 0.0);
        for (mi, s) in sources.iter().enumerate() {
            let dst = if a.row_of(mi) == 0 { &mut est1 } else { &mut est2 };
            for (d, v) in dst.iter_mut().zip(*s) {
                *d += v;
            }
        }
        let loss =
            snr_loss_samples(x1, &est1, snr_max_db)? + snr_loss_samples(x2, &est2, snr_max_db)?;
        if best.map(|(b, _)| loss < b).unwrap_or(true) {
            best = Some((loss, index));
        }
    }
    let (loss, index) = best.expect("at least one assignment");
    Ok((loss, AssignmentMatrix::from_index(index, m)))
}

/// [`mixit_loss_samples`] over audio buffers.
pub fn mixit_loss(
    x1: &AudioBuffer,
    x2: &AudioBuffer,
    sources: &[AudioBuffer],
    snr_max_db: f64,
) -> Result<(f64, AssignmentMatrix), MixitError> {
    let slices: Vec<&[f64]> = sources.iter().map(|s| s.samples()).collect();
    mixit_loss_samples(x1.samples(), x2.samples(), &slices, snr_max_db)
}

/// Differentiable MixIT loss at a fixed assignment. The assignment is chosen
/// outside the graph (the minimum is piecewise smooth, so the gradient of
/// the selected branch is the gradient of the loss almost everywhere).
pub fn mixit_loss_graph(
    g: &mut Graph,
    sources: &[TensorId],
    x1: &[f64],
    x2: &[f64],
    assignment: &AssignmentMatrix,
    snr_max_db: f64,
) -> Result<TensorId, MixitError> {
    assert_eq!(assignment.n_sources(), sources.len());
    let tau = 10f64.powf(-snr_max_db / 10.0);
    let mut total: Option<TensorId> = None;
    for (row, x) in [(0usize, x1), (1usize, x2)] {
        let assigned: Vec<TensorId> = sources
            .iter()
            .enumerate()
            .filter(|(mi, _)| assignment.row_of(*mi) == row)
            .map(|(_, &id)| id)
            .collect();
        let est = match assigned.split_first() {
            Some((&first, rest)) => {
                let mut acc = first;
                for &id in rest {
                    acc = g.add(acc, id)?;
                }
                acc
            }
            None => g.input(Tensor::zeros(&[x.len()])),
        };
        let p: f64 = x.iter().map(|v| v * v).sum();
        if p == 0.0 {
            return Err(MixitError::ZeroEnergyReference);
        }
        let xref = g.input(Tensor::new(&[x.len()], x.to_vec())?);
        let diff = g.sub(xref, est)?;
        let sq = g.mul(diff, diff)?;
        let err = g.sum_all(sq);
        let ratio = g.mul_const(err, 1.0 / p);
        let shifted = g.add_const(ratio, tau);
        let logged = g.log10(shifted)?;
        let term = g.mul_const(logged, 10.0);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("two terms"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub snr_max_db: f64,
    pub seed: u64,
    /// Crop sampled references to this many samples (random offset); when
    /// unset, each pair is cropped to its shorter member.
    pub clip_samples: Option<usize>,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            learning_rate: 0.01,
            snr_max_db: 30.0,
            seed: 0,
            clip_samples: None,
            checkpoint_every: 1000,
        }
    }
}

/// One line of the training log (serialized as JSON lines).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub loss: f64,
    /// Histogram of winning assignment indices within the batch.
    pub assignments: BTreeMap<u32, u32>,
    /// Silent references skipped while assembling this batch.
    pub resampled_silent: u32,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub steps: u64,
}

/// Loss, winning assignment, and parameter gradients for one MoM example.
pub fn mom_example_gradients(
    model: &SeparatorModel,
    example: &MomExample,
    snr_max_db: f64,
) -> Result<(f64, AssignmentMatrix, GradMap), MixitError> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, example.mom.samples())?;
    let source_values: Vec<&[f64]> = fwd.sources.iter().map(|&id| g.data(id)).collect();
    let (loss, assignment) = mixit_loss_samples(
        example.x1.samples(),
        example.x2.samples(),
        &source_values,
        snr_max_db,
    )?;
    let loss_id = mixit_loss_graph(
        &mut g,
        &fwd.sources,
        example.x1.samples(),
        example.x2.samples(),
        &assignment,
        snr_max_db,
    )?;
    let grads = g.backward(loss_id)?;
    let mut map = GradMap::new();
    for (name, id) in &fwd.param_ids {
        let t = grads.tensor(*id).expect("parameter leaves always have grads");
        map.insert(name.clone(), t);
    }
    Ok((loss, assignment, map))
}

struct PairSampler<'a> {
    mixtures: &'a [AudioBuffer],
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> PairSampler<'a> {
    fn new(mixtures: &'a [AudioBuffer], rng: ChaCha8Rng) -> Self {
        Self {
            mixtures,
            order: Vec::new(),
            cursor: 0,
            rng,
        }
    }

    /// Next pair of distinct recordings, reshuffling at epoch boundaries.
    fn next_pair(&mut self) -> (&'a AudioBuffer, &'a AudioBuffer) {
        if self.cursor + 2 > self.order.len() {
            self.order = (0..self.mixtures.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let a = &self.mixtures[self.order[self.cursor]];
        let b = &self.mixtures[self.order[self.cursor + 1]];
        self.cursor += 2;
        (a, b)
    }

    fn crop(&mut self, x: &AudioBuffer, len: Option<usize>) -> Result<AudioBuffer, MixitError> {
        match len {
            None => Ok(x.clone()),
            Some(want) => {
                if want > x.len() {
                    return Err(MixitError::ClipTooLong {
                        want,
                        have: x.len(),
                    });
                }
                let max_start = x.len() - want;
                let start = if max_start == 0 {
                    0
                } else {
                    self.rng.gen_range(0..=max_start)
                };
                Ok(x.segment(start, want))
            }
        }
    }
}

/// MixIT training loop: sample two reference mixtures, peak-normalize each
/// to 0.5, sum into a MoM, run the separator, take the best assignment, and
/// apply one Adam step per batch. Logs a JSON record per step; writes
/// checkpoints every `checkpoint_every` steps plus a final one.
pub fn train_separator<W: Write>(
    model: &mut SeparatorModel,
    mixtures: &[AudioBuffer],
    cfg: &TrainConfig,
    log: &mut W,
    ckpt_dir: Option<&Path>,
) -> Result<TrainReport, MixitError> {
    if mixtures.len() < 2 {
        return Err(MixitError::DatasetTooSmall(mixtures.len()));
    }
    let mut sampler = PairSampler::new(mixtures, ChaCha8Rng::seed_from_u64(cfg.seed));
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps as usize);

    for step in 1..=cfg.steps {
        let mut grad_acc = GradMap::new();
        let mut batch_loss = 0.0;
        let mut assignments: BTreeMap<u32, u32> = BTreeMap::new();
        let mut resampled = 0u32;
        let mut collected = 0usize;

        while collected < cfg.batch_size {
            let (a, b) = sampler.next_pair();
            let a = sampler.crop(a, cfg.clip_samples)?;
            let b = sampler.crop(b, cfg.clip_samples)?;
            if a.len() != b.len() {
                let n = a.len().min(b.len());
                let example = build_mom(a.segment(0, n), b.segment(0, n))?;
                match example {
                    Some(ex) => {
                        let (loss, assignment, grads) =
                            mom_example_gradients(model, &ex, cfg.snr_max_db)?;
                        batch_loss += loss;
                        *assignments.entry(assignment.index() as u32).or_insert(0) += 1;
                        grad_map_add(&mut grad_acc, &grads);
                        collected += 1;
                    }
                    None => resampled += 1,
                }
                continue;
            }
            match build_mom(a, b)? {
                Some(ex) => {
                    let (loss, assignment, grads) =
                        mom_example_gradients(model, &ex, cfg.snr_max_db)?;
                    batch_loss += loss;
                    *assignments.entry(assignment.index() as u32).or_insert(0) += 1;
                    grad_map_add(&mut grad_acc, &grads);
                    collected += 1;
                }
                None => resampled += 1,
            }
        }

        grad_map_scale(&mut grad_acc, 1.0 / cfg.batch_size as f64);
        model.store_mut().adam_step(&grad_acc, &adam)?;

        let loss = batch_loss / cfg.batch_size as f64;
        losses.push(loss);
        let record = TrainLogRecord {
            step,
            loss,
            assignments,
            resampled_silent: resampled,
        };
        serde_json::to_writer(&mut *log, &record).map_err(std::io::Error::other)?;
        log.write_all(b"\n")?;

        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                model.store().save(&dir.join(format!("ckpt_step{step}.bin")))?;
            }
        }
    }
    if let Some(dir) = ckpt_dir {
        model.store().save(&dir.join("ckpt_final.bin"))?;
    }
    Ok(TrainReport {
        losses,
        steps: cfg.steps,
    })
}

/// Peak-normalize both references to 0.5 and sum. Returns `None` when either
/// reference is silent (the caller resamples).
fn build_mom(x1: AudioBuffer, x2: AudioBuffer) -> Result<Option<MomExample>, MixitError> {
    let (n1, silent1) = peak_normalize(&x1, 0.5)?;
    let (n2, silent2) = peak_normalize(&x2, 0.5)?;
    if silent1 || silent2 {
        return Ok(None);
    }
    Ok(Some(make_mom(n1, n2)?))
}
