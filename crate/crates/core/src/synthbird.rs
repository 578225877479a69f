//! Synthetic soundscape generator: parametric chirp species, clip synthesis
//! with per-source stems, and seeded dataset construction (manifests,
//! taxonomy, noise pool, held-out mixture pairs).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{write_wav, AudioBuffer, AudioError, WavFormat};
use crate::dataset::{save_manifest, save_path_manifest, ClipRecord, DataError, LabelSet, Taxonomy};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("chirp reaches {freq_hz:.1} Hz, above Nyquist {nyquist_hz:.1} Hz")]
    AboveNyquist { freq_hz: f64, nyquist_hz: f64 },
    #[error("invalid chirp template: {0}")]
    BadTemplate(String),
    #[error("invalid dataset config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Linear FM sweep repeated at a fixed period, with a raised-cosine
/// envelope and a fixed harmonic amplitude profile.
#[derive(Clone, Debug)]
pub struct ChirpTemplate {
    pub base_freq_hz: f64,
    pub sweep_rate_hz_per_s: f64,
    pub duration_s: f64,
    pub repetition_period_s: f64,
    /// Relative amplitude of harmonics 1..=len.
    pub harmonics: Vec<f64>,
}

impl ChirpTemplate {
    fn validate(&self, sample_rate_hz: u32) -> Result<(), SynthError> {
        if self.duration_s <= 0.0 || self.repetition_period_s <= 0.0 {
            return Err(SynthError::BadTemplate(format!(
                "duration {} s, period {} s",
                self.duration_s, self.repetition_period_s
            )));
        }
        if self.harmonics.is_empty() {
            return Err(SynthError::BadTemplate("no harmonics".into()));
        }
        let end = self.base_freq_hz + self.sweep_rate_hz_per_s * self.duration_s;
        if self.base_freq_hz <= 0.0 || end <= 0.0 {
            return Err(SynthError::BadTemplate(format!(
                "sweep passes through zero ({:.1} to {end:.1} Hz)",
                self.base_freq_hz
            )));
        }
        let top = self.base_freq_hz.max(end) * self.harmonics.len() as f64;
        let nyquist = sample_rate_hz as f64 / 2.0;
        if top >= nyquist {
            return Err(SynthError::AboveNyquist {
                freq_hz: top,
                nyquist_hz: nyquist,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpecies {
    /// Index into the generated taxonomy.
    pub id: usize,
    pub code: String,
    pub genus: String,
    pub family: String,
    pub order: String,
    pub template: ChirpTemplate,
}

/// Evenly spaced frequency bands with mild overlap; two species per genus,
/// four per family, eight per order. Harmonic count shrinks near Nyquist.
pub fn default_species(n: usize, sample_rate_hz: u32) -> Result<Vec<SynthSpecies>, SynthError> {
    if n == 0 {
        return Err(SynthError::BadConfig("zero species".into()));
    }
    let nyquist = sample_rate_hz as f64 / 2.0;
    let lo = 400.0;
    let hi = 0.8 * nyquist;
    if hi <= lo {
        return Err(SynthError::BadConfig(format!(
            "sample rate {sample_rate_hz} Hz leaves no usable band"
        )));
    }
    let spacing = (hi - lo) / n as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base = lo + spacing * i as f64;
        let sweep_mag = 120.0 + 30.0 * i as f64;
        let sweep = if i % 2 == 0 { sweep_mag } else { -sweep_mag };
        let duration = 0.18 + 0.02 * (i % 5) as f64;
        let top = base.max(base + sweep * duration);
        let n_harm = ((0.95 * nyquist / top) as usize).clamp(1, 3);
        let harmonics: Vec<f64> = (0..n_harm).map(|h| 1.0 / (1 << h) as f64).collect();
        let template = ChirpTemplate {
            base_freq_hz: base,
            sweep_rate_hz_per_s: sweep,
            duration_s: duration,
            repetition_period_s: 0.55 + 0.08 * (i % 4) as f64,
            harmonics,
        };
        template.validate(sample_rate_hz)?;
        out.push(SynthSpecies {
            id: i,
            code: format!("sp{i:02}"),
            genus: format!("gen{:02}", i / 2),
            family: format!("fam{:02}", i / 4),
            order: format!("ord{:02}", i / 8),
            template,
        });
    }
    Ok(out)
}

pub fn taxonomy_of(species: &[SynthSpecies]) -> Result<Taxonomy, SynthError> {
    let rows: Vec<(String, String, String, String)> = species
        .iter()
        .map(|s| {
            (
                s.code.clone(),
                s.genus.clone(),
                s.family.clone(),
                s.order.clone(),
            )
        })
        .collect();
    Ok(Taxonomy::from_rows(&rows)?)
}

#[derive(Debug)]
pub struct SynthClip {
    pub mixture: AudioBuffer,
    pub labels: LabelSet,
    /// Per-species ground-truth stems, ascending id.
    pub stems: Vec<(usize, AudioBuffer)>,
    pub noise: AudioBuffer,
}

fn render_chirp(stem: &mut [f64], start_s: f64, t: &ChirpTemplate, amp: f64, sr: f64) {
    let k0 = (start_s * sr).ceil().max(0.0) as usize;
    let k1 = (((start_s + t.duration_s) * sr).floor() as usize).min(stem.len());
    let tau_of = |k: usize| k as f64 / sr - start_s;
    for (k, out) in stem.iter_mut().enumerate().take(k1).skip(k0) {
        let tau = tau_of(k);
        if tau < 0.0 || tau > t.duration_s {
            continue;
        }
        let env = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * tau / t.duration_s).cos());
        let phase = 2.0
            * std::f64::consts::PI
            * (t.base_freq_hz * tau + 0.5 * t.sweep_rate_hz_per_s * tau * tau);
        let mut s = 0.0;
        for (h, a) in t.harmonics.iter().enumerate() {
            s += a * ((h + 1) as f64 * phase).sin();
        }
        *out += amp * env * s;
    }
}

fn colored_noise(n: usize, floor_db: f64, rng: &mut impl Rng) -> Vec<f64> {
    if floor_db == f64::NEG_INFINITY || n == 0 {
        return vec![0.0; n];
    }
    let mut y = vec![0.0; n];
    let mut prev = 0.0;
    for v in y.iter_mut() {
        let white: f64 = rng.gen_range(-1.0..1.0);
        prev = 0.9 * prev + white;
        *v = prev;
    }
    let rms = (y.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let target = 10f64.powf(floor_db / 20.0);
    if rms > 0.0 {
        let scale = target / rms;
        for v in y.iter_mut() {
            *v *= scale;
        }
    }
    y
}

/// Mixture with a fixed float addition order: stems in ascending species id,
/// then noise. Callers that rescale a stem can rebuild the mixture and keep
/// the sample-wise reconstruction identity.
pub fn compose(
    stems: &[(usize, AudioBuffer)],
    noise: &AudioBuffer,
) -> Result<AudioBuffer, SynthError> {
    let n = noise.samples().len();
    let mut order: Vec<usize> = (0..stems.len()).collect();
    order.sort_by_key(|&i| stems[i].0);
    let mut mix = vec![0.0; n];
    for &i in &order {
        let s = stems[i].1.samples();
        if s.len() != n {
            return Err(SynthError::BadConfig(format!(
                "stem {} has {} samples, noise has {n}",
                stems[i].0,
                s.len()
            )));
        }
        for (m, v) in mix.iter_mut().zip(s) {
            *m += v;
        }
    }
    for (m, v) in mix.iter_mut().zip(noise.samples()) {
        *m += v;
    }
    Ok(AudioBuffer::new(mix, noise.sample_rate_hz())?)
}

/// Synthesize one clip: each species contributes a chirp train with a random
/// start offset and per-clip amplitude; a colored noise floor sits under the
/// sum. Stems are kept as separation ground truth.
pub fn synth_clip(
    species: &[SynthSpecies],
    duration_s: f64,
    sample_rate_hz: u32,
    noise_floor_db: f64,
    rng: &mut impl Rng,
) -> Result<SynthClip, SynthError> {
    if duration_s <= 0.0 {
        return Err(SynthError::BadConfig(format!("duration {duration_s} s")));
    }
    let sr = sample_rate_hz as f64;
    let n = (duration_s * sr).round() as usize;
    let mut order: Vec<&SynthSpecies> = species.iter().collect();
    order.sort_by_key(|s| s.id);

    let mut stems = Vec::with_capacity(order.len());
    for sp in &order {
        sp.template.validate(sample_rate_hz)?;
        let amp = rng.gen_range(0.3..0.8);
        let mut start = rng.gen_range(0.0..sp.template.repetition_period_s);
        let mut stem = vec![0.0; n];
        while start < duration_s {
            render_chirp(&mut stem, start, &sp.template, amp, sr);
            start += sp.template.repetition_period_s;
        }
        stems.push((sp.id, AudioBuffer::new(stem, sample_rate_hz)?));
    }

    let noise = AudioBuffer::new(colored_noise(n, noise_floor_db, rng), sample_rate_hz)?;
    let mixture = compose(&stems, &noise)?;
    let ids: Vec<usize> = order.iter().map(|s| s.id).collect();
    Ok(SynthClip {
        mixture,
        labels: LabelSet::from_foreground(&ids),
        stems,
        noise,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDatasetConfig {
    pub n_species: usize,
    pub clips_per_species: usize,
    pub clip_duration_s: f64,
    pub sample_rate_hz: u32,
    pub noise_floor_db: f64,
    /// Probability that a clip gains a quieter second species.
    pub p_background: f64,
    /// Amplitude scale of that background species.
    pub background_gain: f64,
    /// Fraction of background species left out of the manifest labels,
    /// emulating weakly labeled recordings. Audio is unaffected.
    pub weak_label_drop: f64,
    /// Number of species held out of training; their clips form the eval
    /// split. See [`eval_species_ids`] for which ids are held out.
    pub eval_species: usize,
    /// Held-out mixture pairs drawn from the eval split.
    pub mom_pairs: usize,
    pub n_noise: usize,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            n_species: 8,
            clips_per_species: 20,
            clip_duration_s: 6.0,
            sample_rate_hz: 8000,
            noise_floor_db: -30.0,
            p_background: 0.5,
            background_gain: 0.3,
            weak_label_drop: 0.0,
            eval_species: 2,
            mom_pairs: 16,
            n_noise: 8,
            seed: 0,
        }
    }
}

impl SynthDatasetConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.n_species < 2 {
            return Err(SynthError::BadConfig(
                "need at least 2 species for mixture pairing".into(),
            ));
        }
        if self.eval_species == 0 || self.eval_species >= self.n_species {
            return Err(SynthError::BadConfig(format!(
                "eval split of {} species out of {}",
                self.eval_species, self.n_species
            )));
        }
        if self.clips_per_species == 0 {
            return Err(SynthError::BadConfig("zero clips per species".into()));
        }
        for (name, p) in [
            ("p_background", self.p_background),
            ("weak_label_drop", self.weak_label_drop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::BadConfig(format!("{name} = {p}")));
            }
        }
        if self.mom_pairs > 0 && self.eval_species < 2 {
            return Err(SynthError::BadConfig(
                "mixture pairs need at least 2 eval species".into(),
            ));
        }
        Ok(())
    }
}

/// File layout produced by [`build_synth_dataset`]. Manifest paths are
/// relative to `root`.
pub struct SynthDatasetPaths {
    pub root: PathBuf,
    pub taxonomy: PathBuf,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub noise_manifest: PathBuf,
    pub mom_manifest: PathBuf,
}

pub fn save_mom_manifest(path: &Path, pairs: &[(PathBuf, PathBuf)]) -> Result<(), SynthError> {
    let mut writer = csv::Writer::from_path(path).map_err(DataError::from)?;
    writer
        .write_record(["path_a", "path_b"])
        .map_err(DataError::from)?;
    for (a, b) in pairs {
        writer
            .write_record([a.to_string_lossy().as_ref(), b.to_string_lossy().as_ref()])
            .map_err(DataError::from)?;
    }
    writer.flush().map_err(DataError::from)?;
    Ok(())
}

pub fn load_mom_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>, SynthError> {
    let mut reader = csv::Reader::from_path(path).map_err(DataError::from)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(DataError::from)?;
        if record.len() != 2 {
            return Err(SynthError::BadConfig(format!(
                "mixture pair row with {} fields",
                record.len()
            )));
        }
        out.push((PathBuf::from(&record[0]), PathBuf::from(&record[1])));
    }
    Ok(out)
}

/// Ids of the species held out for evaluation: `k` ids spread evenly across
/// the id range. Species ids map to ascending frequency bands, so spreading
/// the held-out ids keeps the eval split inside the trained frequency range
/// instead of concentrating it at the top of the band.
pub fn eval_species_ids(n_species: usize, eval_species: usize) -> Vec<usize> {
    (0..eval_species)
        .map(|j| (2 * j + 1) * n_species / (2 * eval_species))
        .collect()
}

/// Build a reproducible dataset under `out`: WAV clips with weak labels,
/// a species-disjoint train/eval split, a taxonomy file, a noise pool, and
/// held-out mixture pairs for separation scoring. The same seed yields
/// byte-identical files.
pub fn build_synth_dataset(
    cfg: &SynthDatasetConfig,
    out: &Path,
) -> Result<SynthDatasetPaths, SynthError> {
    cfg.validate()?;
    let species = default_species(cfg.n_species, cfg.sample_rate_hz)?;
    let taxonomy = taxonomy_of(&species)?;
    std::fs::create_dir_all(out.join("clips"))?;
    std::fs::create_dir_all(out.join("noise"))?;

    let paths = SynthDatasetPaths {
        root: out.to_path_buf(),
        taxonomy: out.join("taxonomy.csv"),
        train_manifest: out.join("train.csv"),
        eval_manifest: out.join("eval.csv"),
        noise_manifest: out.join("noise.csv"),
        mom_manifest: out.join("mom.csv"),
    };
    taxonomy.save_csv(&paths.taxonomy)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut noise_paths = Vec::with_capacity(cfg.n_noise);
    for i in 0..cfg.n_noise {
        let clip = synth_clip(
            &[],
            cfg.clip_duration_s,
            cfg.sample_rate_hz,
            cfg.noise_floor_db,
            &mut rng,
        )?;
        let rel = PathBuf::from(format!("noise/noise_{i:02}.wav"));
        write_wav(&out.join(&rel), &clip.mixture, WavFormat::Float32)?;
        noise_paths.push(rel);
    }
    save_path_manifest(&paths.noise_manifest, &noise_paths)?;

    let eval_ids = eval_species_ids(cfg.n_species, cfg.eval_species);
    let train_ids: Vec<usize> =
        (0..cfg.n_species).filter(|s| !eval_ids.contains(s)).collect();
    let mut train_records = Vec::new();
    let mut eval_records = Vec::new();

    for s in 0..cfg.n_species {
        let in_eval = eval_ids.contains(&s);
        let split: &[usize] = if in_eval { &eval_ids } else { &train_ids };
        for j in 0..cfg.clips_per_species {
            let partners: Vec<usize> = split.iter().copied().filter(|&p| p != s).collect();
            let background = if !partners.is_empty() && rng.gen_bool(cfg.p_background) {
                Some(partners[rng.gen_range(0..partners.len())])
            } else {
                None
            };

            let mut set = vec![species[s].clone()];
            if let Some(b) = background {
                set.push(species[b].clone());
            }
            let mut clip = synth_clip(
                &set,
                cfg.clip_duration_s,
                cfg.sample_rate_hz,
                cfg.noise_floor_db,
                &mut rng,
            )?;
            if let Some(b) = background {
                let stem = clip
                    .stems
                    .iter_mut()
                    .find(|(id, _)| *id == b)
                    .expect("background stem present");
                let scaled: Vec<f64> = stem
                    .1
                    .samples()
                    .iter()
                    .map(|v| v * cfg.background_gain)
                    .collect();
                stem.1 = AudioBuffer::new(scaled, cfg.sample_rate_hz)?;
                clip.mixture = compose(&clip.stems, &clip.noise)?;
            }

            let rel = PathBuf::from(format!("clips/sp{s:02}_{j:03}.wav"));
            write_wav(&out.join(&rel), &clip.mixture, WavFormat::Float32)?;

            let mut record = ClipRecord {
                path: rel,
                foreground: vec![species[s].code.clone()],
                background: Vec::new(),
            };
            if let Some(b) = background {
                // uniform draw, not gen_bool: the stream must not depend on
                // the drop probability, so audio is unchanged by corruption
                let dropped = rng.gen::<f64>() < cfg.weak_label_drop;
                if !dropped {
                    record.background.push(species[b].code.clone());
                }
            }
            if in_eval {
                eval_records.push(record);
            } else {
                train_records.push(record);
            }
        }
    }
    save_manifest(&paths.train_manifest, &train_records)?;
    save_manifest(&paths.eval_manifest, &eval_records)?;

    // Pairs must differ in foreground species: a mixture of two same-species
    // recordings has no recoverable reference split, so such pairs would
    // measure ambiguity rather than separation quality.
    let mut pairs = Vec::with_capacity(cfg.mom_pairs);
    for _ in 0..cfg.mom_pairs {
        let a = rng.gen_range(0..eval_records.len());
        let b = loop {
            let b = rng.gen_range(0..eval_records.len());
            if eval_records[b].foreground != eval_records[a].foreground {
                break b;
            }
        };
        pairs.push((eval_records[a].path.clone(), eval_records[b].path.clone()));
    }
    save_mom_manifest(&paths.mom_manifest, &pairs)?;

    Ok(paths)
}
