//! Multi-label species classifier: a small 2-D convolutional backbone over
//! PCEN mel features, AutoPool temporal reduction, taxonomic output heads
//! (species, genus, family, order, detection), label-smoothed BCE with
//! background-label masking, and logit-domain ensembling.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::augment::{augment_example, augment_mel, AugmentConfig, AugmentError};
use crate::dataset::{DataError, LabelSet, LabeledClip, Taxonomy};
use crate::frontend::{
    channel_normalize, mel_spectrogram, pcen, FrontendConfig, FrontendError, MelSpectrogram,
    PcenParams,
};
use crate::grad::{
    glorot_uniform, grad_map_add, grad_map_scale, AdamConfig, GradError, GradMap, Graph,
    ParameterStore, Tensor, TensorId,
};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("feature map [{h}x{w}] too small to pool at block {block}")]
    FeatureTooSmall { block: usize, h: usize, w: usize },
    #[error("invalid classifier config: {0}")]
    BadConfig(String),
    #[error("target/mask length {got}, head expects {want}")]
    TargetLength { got: usize, want: usize },
    #[error("ensemble is empty or members disagree on class count")]
    BadEnsemble,
    #[error("dataset has no usable clips")]
    EmptyDataset,
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub frontend: FrontendConfig,
    pub pcen: PcenParams,
    /// Output channels of each conv block; the last entry is the hidden
    /// size D fed to AutoPool and the heads.
    pub block_widths: Vec<usize>,
    pub window_s: f64,
    pub label_smoothing: f64,
    /// Weight on the genus, family, and order head losses.
    pub head_weight: f64,
    pub detection_weight: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            pcen: PcenParams::default(),
            block_widths: vec![32, 64, 128, 256],
            window_s: 5.0,
            label_smoothing: 0.1,
            head_weight: 0.1,
            detection_weight: 1.0,
        }
    }
}

impl ClassifierConfig {
    fn validate(&self) -> Result<(), ClassifierError> {
        if self.block_widths.is_empty() {
            return Err(ClassifierError::BadConfig("no conv blocks".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ClassifierError::BadConfig(format!(
                "label smoothing {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    pub fn hidden_size(&self) -> usize {
        *self.block_widths.last().unwrap()
    }
}

/// Sizes of the five output heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSizes {
    pub species: usize,
    pub genus: usize,
    pub family: usize,
    pub order: usize,
}

impl HeadSizes {
    pub fn of(taxonomy: &Taxonomy) -> Self {
        Self {
            species: taxonomy.n_species(),
            genus: taxonomy.n_genera(),
            family: taxonomy.n_families(),
            order: taxonomy.n_orders(),
        }
    }
}

const HEAD_NAMES: [&str; 4] = ["species", "genus", "family", "order"];

pub struct ClassifierModel {
    pub cfg: ClassifierConfig,
    pub heads: HeadSizes,
    pub store: ParameterStore,
}

impl ClassifierModel {
    pub fn new(
        cfg: ClassifierConfig,
        taxonomy: &Taxonomy,
        seed: u64,
    ) -> Result<Self, ClassifierError> {
        cfg.validate()?;
        let heads = HeadSizes::of(taxonomy);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let k = 3usize;
        let mut cin = 1usize;
        for (i, &cout) in cfg.block_widths.iter().enumerate() {
            let fan_in = cin * k * k;
            let fan_out = cout * k * k;
            store.insert(
                &format!("block{i}/conv/w"),
                glorot_uniform(&mut rng, fan_in, fan_out, &[cout, cin, k, k]),
            )?;
            store.insert(
                &format!("block{i}/conv/b"),
                Tensor::zeros(&[cout]).with_grad(),
            )?;
            store.insert(
                &format!("block{i}/norm/gamma"),
                Tensor::new(&[cout], vec![1.0; cout])?.with_grad(),
            )?;
            store.insert(
                &format!("block{i}/norm/beta"),
                Tensor::zeros(&[cout]).with_grad(),
            )?;
            cin = cout;
        }
        let d = cfg.hidden_size();
        store.insert("autopool/alpha", Tensor::zeros(&[d]).with_grad())?;
        let sizes = [heads.species, heads.genus, heads.family, heads.order];
        for (name, n) in HEAD_NAMES.iter().zip(sizes) {
            store.insert(
                &format!("head_{name}/w"),
                glorot_uniform(&mut rng, d, n, &[n, d]),
            )?;
            store.insert(&format!("head_{name}/b"), Tensor::zeros(&[n]).with_grad())?;
        }
        store.insert("head_detect/w", glorot_uniform(&mut rng, d, 1, &[1, d]))?;
        store.insert("head_detect/b", Tensor::zeros(&[1]).with_grad())?;
        Ok(Self { cfg, heads, store })
    }

    pub fn load(
        cfg: ClassifierConfig,
        taxonomy: &Taxonomy,
        path: &Path,
    ) -> Result<Self, ClassifierError> {
        cfg.validate()?;
        let store = ParameterStore::load(path)?;
        let heads = HeadSizes::of(taxonomy);
        let model = Self { cfg, heads, store };
        // surface shape problems at load time, not first forward
        let d = model.cfg.hidden_size();
        for (name, n) in HEAD_NAMES.iter().zip([
            heads.species,
            heads.genus,
            heads.family,
            heads.order,
        ]) {
            let w = model.store.get(&format!("head_{name}/w"))?;
            if w.shape() != [n, d] {
                return Err(ClassifierError::BadConfig(format!(
                    "checkpoint head_{name}/w is {:?}, expected [{n}, {d}]",
                    w.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        self.store.save(path)?;
        Ok(())
    }
}

/// Tensor ids of the five head logit vectors plus the pre-pool hidden
/// sequence.
pub struct ClassifierForward {
    pub species: TensorId,
    pub genus: TensorId,
    pub family: TensorId,
    pub order: TensorId,
    pub detection: TensorId,
    /// Time x D hidden sequence before AutoPool.
    pub hidden: TensorId,
    pub param_ids: BTreeMap<String, TensorId>,
}

/// Learnable softmax-weighted temporal pooling. `hidden` is `[T, D]`,
/// `alpha` is `[D]`; returns `[D, 1]`. With `alpha = 0` the weights are
/// uniform and the result is the mean over time.
pub fn autopool(
    g: &mut Graph,
    hidden: TensorId,
    alpha: TensorId,
) -> Result<TensorId, ClassifierError> {
    let ht = g.transpose(hidden)?;
    let scaled = g.row_scale(ht, alpha)?;
    let weights = g.softmax_rows(scaled)?;
    let weighted = g.mul(weights, ht)?;
    let pooled = g.sum_axis(weighted, 1)?;
    let d = g.data(pooled).len();
    Ok(g.reshape(pooled, &[d, 1])?)
}

impl ClassifierModel {
    /// Build the differentiable forward pass for one feature matrix
    /// (time x mel channels, already channel-normalized).
    pub fn forward(
        &self,
        g: &mut Graph,
        features: &MelSpectrogram,
    ) -> Result<ClassifierForward, ClassifierError> {
        let t = features.n_frames();
        let c = features.n_channels();
        let mut ids = BTreeMap::new();
        let mut p = |g: &mut Graph, name: &str| -> Result<TensorId, ClassifierError> {
            let id = g.param(self.store.get(name)?.clone());
            ids.insert(name.to_string(), id);
            Ok(id)
        };

        // image layout [1, mel, time]
        let mut image = vec![0.0; c * t];
        for ti in 0..t {
            for ci in 0..c {
                image[ci * t + ti] = features.value(ti, ci);
            }
        }
        let mut x = g.input(Tensor::new(&[1, c, t], image)?);
        let (mut h, mut w) = (c, t);

        for (i, &cout) in self.cfg.block_widths.iter().enumerate() {
            if h < 2 || w < 2 {
                return Err(ClassifierError::FeatureTooSmall { block: i, h, w });
            }
            let cw = p(g, &format!("block{i}/conv/w"))?;
            let cb = p(g, &format!("block{i}/conv/b"))?;
            let conv = g.conv2d(x, cw, Some(cb), 1, 1)?;
            let flat = g.reshape(conv, &[cout, h * w])?;
            let normed = g.global_ln(flat, 1e-6)?;
            let gamma = p(g, &format!("block{i}/norm/gamma"))?;
            let beta = p(g, &format!("block{i}/norm/beta"))?;
            let scaled = g.row_scale(normed, gamma)?;
            let affine = g.row_add(scaled, beta)?;
            let back = g.reshape(affine, &[cout, h, w])?;
            let active = g.relu(back);
            x = g.avg_pool2d(active, 2, 2, 2, 2)?;
            h /= 2;
            w /= 2;
        }

        // collapse frequency, keep time
        let d = self.cfg.hidden_size();
        let collapsed = g.avg_pool2d(x, h, 1, h, 1)?;
        let seq = g.reshape(collapsed, &[d, w])?;
        let hidden = g.transpose(seq)?;

        let alpha = p(g, "autopool/alpha")?;
        let pooled = autopool(g, hidden, alpha)?;

        let head = |g: &mut Graph,
                        ids: &mut BTreeMap<String, TensorId>,
                        name: &str,
                        n: usize|
         -> Result<TensorId, ClassifierError> {
            let wname = format!("head_{name}/w");
            let bname = format!("head_{name}/b");
            let wid = g.param(self.store.get(&wname)?.clone());
            ids.insert(wname, wid);
            let bid = g.param(self.store.get(&bname)?.clone());
            ids.insert(bname, bid);
            let out = g.dense(wid, pooled, Some(bid))?;
            Ok(g.reshape(out, &[n])?)
        };

        let species = head(g, &mut ids, "species", self.heads.species)?;
        let genus = head(g, &mut ids, "genus", self.heads.genus)?;
        let family = head(g, &mut ids, "family", self.heads.family)?;
        let order = head(g, &mut ids, "order", self.heads.order)?;
        let detection = head(g, &mut ids, "detect", 1)?;

        Ok(ClassifierForward {
            species,
            genus,
            family,
            order,
            detection,
            hidden,
            param_ids: ids,
        })
    }
}

/// Label-smoothed binary cross-entropy on logits, averaged over unmasked
/// entries. Targets are mapped to `y (1 - s) + s/2`. Returns the loss node
/// and the unmasked count; an all-masked head contributes a constant zero.
pub fn smoothed_bce(
    g: &mut Graph,
    logits: TensorId,
    targets: &[f64],
    mask: &[f64],
    smoothing: f64,
) -> Result<(TensorId, usize), ClassifierError> {
    let n = g.data(logits).len();
    if targets.len() != n || mask.len() != n {
        return Err(ClassifierError::TargetLength {
            got: targets.len().max(mask.len()),
            want: n,
        });
    }
    let unmasked = mask.iter().filter(|&&m| m != 0.0).count();
    if unmasked == 0 {
        return Ok((g.input(Tensor::scalar(0.0)), 0));
    }
    let smoothed: Vec<f64> = targets.iter().map(|y| y * (1.0 - smoothing) + smoothing / 2.0).collect();
    let complement: Vec<f64> = smoothed.iter().map(|y| 1.0 - y).collect();
    let shape = g.tensor(logits).shape().to_vec();
    let yp = g.input(Tensor::new(&shape, smoothed)?);
    let yn = g.input(Tensor::new(&shape, complement)?);
    let mask_t = g.input(Tensor::new(&shape, mask.to_vec())?);

    let neg = g.neg(logits);
    let sp_neg = g.softplus(neg)?;
    let sp_pos = g.softplus(logits)?;
    let a = g.mul(yp, sp_neg)?;
    let b = g.mul(yn, sp_pos)?;
    let term = g.add(a, b)?;
    let masked = g.mul(term, mask_t)?;
    let total = g.sum_all(masked);
    Ok((g.mul_const(total, 1.0 / unmasked as f64), unmasked))
}

/// Per-head targets and masks for one labeled clip.
///
/// Species: positives from foreground; background species are masked out
/// (their logits contribute no loss). Genus, family, and order: positives
/// rolled up from foreground and background together, since an unlabeled
/// background species still carries its lineage. Detection: positive when
/// any species (labeled or background) is present.
pub struct LossTargets {
    pub species_targets: Vec<f64>,
    pub species_mask: Vec<f64>,
    pub genus_targets: Vec<f64>,
    pub family_targets: Vec<f64>,
    pub order_targets: Vec<f64>,
    pub detection_target: f64,
}

pub fn loss_targets(labels: &LabelSet, taxonomy: &Taxonomy) -> LossTargets {
    let heads = HeadSizes::of(taxonomy);
    let mut species_targets = vec![0.0; heads.species];
    let mut species_mask = vec![1.0; heads.species];
    for &s in labels.foreground() {
        species_targets[s] = 1.0;
    }
    for &s in labels.background() {
        species_mask[s] = 0.0;
    }
    let (genera, families, orders) = labels.rollup_with_background(taxonomy);
    let mut genus_targets = vec![0.0; heads.genus];
    for g in genera {
        genus_targets[g] = 1.0;
    }
    let mut family_targets = vec![0.0; heads.family];
    for f in families {
        family_targets[f] = 1.0;
    }
    let mut order_targets = vec![0.0; heads.order];
    for o in orders {
        order_targets[o] = 1.0;
    }
    LossTargets {
        species_targets,
        species_mask,
        genus_targets,
        family_targets,
        order_targets,
        detection_target: if labels.is_empty() { 0.0 } else { 1.0 },
    }
}

/// Species-head loss plus `head_weight` times the genus/family/order head
/// losses plus `detection_weight` times the detection loss.
pub fn taxonomic_loss(
    g: &mut Graph,
    fwd: &ClassifierForward,
    labels: &LabelSet,
    taxonomy: &Taxonomy,
    cfg: &ClassifierConfig,
) -> Result<TensorId, ClassifierError> {
    let t = loss_targets(labels, taxonomy);
    let s = cfg.label_smoothing;
    let ones = |n: usize| vec![1.0; n];

    let (species, _) = smoothed_bce(g, fwd.species, &t.species_targets, &t.species_mask, s)?;
    let (genus, _) = smoothed_bce(g, fwd.genus, &t.genus_targets, &ones(t.genus_targets.len()), s)?;
    let (family, _) =
        smoothed_bce(g, fwd.family, &t.family_targets, &ones(t.family_targets.len()), s)?;
    let (order, _) =
        smoothed_bce(g, fwd.order, &t.order_targets, &ones(t.order_targets.len()), s)?;
    let (detect, _) = smoothed_bce(g, fwd.detection, &[t.detection_target], &[1.0], s)?;

    let gf = g.add(genus, family)?;
    let gfo = g.add(gf, order)?;
    let tax = g.mul_const(gfo, cfg.head_weight);
    let det = g.mul_const(detect, cfg.detection_weight);
    let sd = g.add(species, det)?;
    Ok(g.add(sd, tax)?)
}

const EPS_P: f64 = 1e-6;

/// Average per-model probabilities in the logit domain:
/// `sigmoid(mean(logit(clamp(p))))` per class.
pub fn ensemble_logit_average(per_model: &[Vec<f64>]) -> Result<Vec<f64>, ClassifierError> {
    let n = match per_model.first() {
        Some(first) if !first.is_empty() => first.len(),
        _ => return Err(ClassifierError::BadEnsemble),
    };
    if per_model.iter().any(|p| p.len() != n) {
        return Err(ClassifierError::BadEnsemble);
    }
    let mut out = vec![0.0; n];
    for (c, o) in out.iter_mut().enumerate() {
        let mean_logit = per_model
            .iter()
            .map(|p| {
                let q = p[c].clamp(EPS_P, 1.0 - EPS_P);
                (q / (1.0 - q)).ln()
            })
            .sum::<f64>()
            / per_model.len() as f64;
        *o = 1.0 / (1.0 + (-mean_logit).exp());
    }
    Ok(out)
}

/// Per-head probabilities for one clip.
#[derive(Clone, Debug)]
pub struct ClassifierProbs {
    pub species: Vec<f64>,
    pub detection: f64,
}

/// Frontend for classification: mel, PCEN, outlier-excluded channel
/// standardization.
pub fn features_for(
    audio: &AudioBuffer,
    cfg: &ClassifierConfig,
) -> Result<MelSpectrogram, ClassifierError> {
    let mel = mel_spectrogram(audio, &cfg.frontend)?;
    let energized = pcen(&mel, &cfg.pcen)?;
    Ok(channel_normalize(&energized))
}

fn sigmoid_all(v: &[f64]) -> Vec<f64> {
    v.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
}

pub fn classify(
    model: &ClassifierModel,
    audio: &AudioBuffer,
) -> Result<ClassifierProbs, ClassifierError> {
    let features = features_for(audio, &model.cfg)?;
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &features)?;
    Ok(ClassifierProbs {
        species: sigmoid_all(g.data(fwd.species)),
        detection: sigmoid_all(g.data(fwd.detection))[0],
    })
}

/// Ensemble species probabilities for one clip.
pub fn classify_ensemble(
    models: &[ClassifierModel],
    audio: &AudioBuffer,
) -> Result<Vec<f64>, ClassifierError> {
    let per_model: Vec<Vec<f64>> = models
        .iter()
        .map(|m| classify(m, audio).map(|p| p.species))
        .collect::<Result<_, _>>()?;
    ensemble_logit_average(&per_model)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_models: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub augment: AugmentConfig,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            n_models: 3,
            seed: 0,
            checkpoint_every: 500,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierTrainRecord {
    pub step: u64,
    pub loss: f64,
}

/// Train one model in place; batches are drawn uniformly with the full
/// augmentation chain applied per example. Writes a JSONL record per step.
pub fn train_classifier<W: Write>(
    model: &mut ClassifierModel,
    clips: &[LabeledClip],
    noise_pool: &[AudioBuffer],
    taxonomy: &Taxonomy,
    cfg: &ClassifierTrainConfig,
    log: &mut W,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<f64>, ClassifierError> {
    if clips.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    cfg.augment.validate(noise_pool.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps as usize);

    for step in 1..=cfg.steps {
        let mut acc: GradMap = GradMap::new();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let clip = &clips[rng.gen_range(0..clips.len())];
            let (aug, _) = augment_example(clip, clips, noise_pool, &cfg.augment, &mut rng)?;
            let mel = mel_spectrogram(&aug.audio, &model.cfg.frontend)?;
            let mel = augment_mel(&mel, &cfg.augment.lowpass, &mut rng)?;
            let energized = pcen(&mel, &model.cfg.pcen)?;
            let features = channel_normalize(&energized);

            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &features)?;
            let loss = taxonomic_loss(&mut g, &fwd, &aug.labels, taxonomy, &model.cfg)?;
            batch_loss += g.data(loss)[0];
            let grads = g.backward(loss)?;
            let mut named = GradMap::new();
            for (name, id) in &fwd.param_ids {
                let t = grads.tensor(*id).expect("parameter leaves always have grads");
                named.insert(name.clone(), t);
            }
            grad_map_add(&mut acc, &named);
        }
        grad_map_scale(&mut acc, 1.0 / cfg.batch_size as f64);
        model.store.adam_step(&acc, &adam)?;
        let loss = batch_loss / cfg.batch_size as f64;
        losses.push(loss);
        serde_json::to_writer(&mut *log, &ClassifierTrainRecord { step, loss })
            .map_err(|e| ClassifierError::Io(e.into()))?;
        log.write_all(b"\n")?;

        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                model.store.save(&dir.join(format!("ckpt_step{step}.bin")))?;
            }
        }
    }
    if let Some(dir) = ckpt_dir {
        model.store.save(&dir.join("ckpt_final.bin"))?;
    }
    Ok(losses)
}

/// Train `cfg.n_models` independent models from consecutive seeds.
pub fn train_ensemble<W: Write>(
    model_cfg: &ClassifierConfig,
    clips: &[LabeledClip],
    noise_pool: &[AudioBuffer],
    taxonomy: &Taxonomy,
    cfg: &ClassifierTrainConfig,
    log: &mut W,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<ClassifierModel>, ClassifierError> {
    let mut models = Vec::with_capacity(cfg.n_models);
    for i in 0..cfg.n_models {
        let member_seed = cfg.seed.wrapping_add(1000 * i as u64);
        let mut model = ClassifierModel::new(model_cfg.clone(), taxonomy, member_seed)?;
        let member_cfg = ClassifierTrainConfig {
            seed: member_seed.wrapping_add(1),
            ..cfg.clone()
        };
        let member_dir = ckpt_dir.map(|d| d.join(format!("model{i}")));
        if let Some(d) = &member_dir {
            std::fs::create_dir_all(d)?;
        }
        train_classifier(
            &mut model,
            clips,
            noise_pool,
            taxonomy,
            &member_cfg,
            log,
            member_dir.as_deref(),
        )?;
        models.push(model);
    }
    Ok(models)
}
