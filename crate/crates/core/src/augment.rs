//! Training-time augmentation chain: random time shift, random gain,
//! example mixing with label union, noise mixing at a random SNR, and
//! noise-only substitution. The random low-pass step runs later in the mel
//! domain via `frontend::lowpass_scale`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioBuffer, AudioError};
use crate::dataset::LabeledClip;
use crate::frontend::{lowpass_scale, FrontendError, MelSpectrogram};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("clip of {got:.2} s is shorter than the {want:.2} s window")]
    ClipTooShort { got: f64, want: f64 },
    #[error("noise pool is empty but noise probability is {p}")]
    EmptyNoisePool { p: f64 },
    #[error("example pool is empty but example-mix probability is {p}")]
    EmptyExamplePool { p: f64 },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LowpassParams {
    /// Probability of applying the mel-domain low-pass scaling.
    pub p: f64,
    /// Cutoff channel drawn uniformly from
    /// `[n_channels * lo_frac, n_channels * hi_frac)`.
    pub cutoff_frac_range: (f64, f64),
    /// Slope in dB per channel, drawn uniformly.
    pub slope_range: (f64, f64),
}

impl Default for LowpassParams {
    fn default() -> Self {
        Self {
            p: 0.25,
            cutoff_frac_range: (0.25, 1.0),
            slope_range: (0.5, 2.0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub window_s: f64,
    pub gain_range: (f64, f64),
    pub p_example_mix: f64,
    pub p_noise: f64,
    pub noise_snr_range_db: (f64, f64),
    pub p_noise_only: f64,
    /// When set, the noise-only branch fires independently of the noise
    /// branch instead of nested inside it.
    pub independent_noise_only: bool,
    pub lowpass: LowpassParams,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            window_s: 5.0,
            gain_range: (0.05, 0.75),
            p_example_mix: 0.5,
            p_noise: 0.75,
            noise_snr_range_db: (0.0, 40.0),
            p_noise_only: 0.1,
            independent_noise_only: false,
            lowpass: LowpassParams::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, noise_pool_len: usize) -> Result<(), AugmentError> {
        for (name, p) in [
            ("p_example_mix", self.p_example_mix),
            ("p_noise", self.p_noise),
            ("p_noise_only", self.p_noise_only),
            ("lowpass.p", self.lowpass.p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::BadConfig(format!("{name} = {p}")));
            }
        }
        if self.gain_range.0 <= 0.0 || self.gain_range.0 > self.gain_range.1 {
            return Err(AugmentError::BadConfig(format!(
                "gain range {:?}",
                self.gain_range
            )));
        }
        if self.noise_snr_range_db.0 > self.noise_snr_range_db.1 {
            return Err(AugmentError::BadConfig(format!(
                "snr range {:?}",
                self.noise_snr_range_db
            )));
        }
        if !(self.window_s > 0.0) {
            return Err(AugmentError::BadConfig("window_s must be positive".into()));
        }
        if noise_pool_len == 0 && (self.p_noise > 0.0 || self.p_noise_only > 0.0) {
            return Err(AugmentError::EmptyNoisePool {
                p: self.p_noise.max(self.p_noise_only),
            });
        }
        Ok(())
    }
}

/// What the chain actually did to one example; recorded for logs and tests.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub shift_offset: usize,
    pub gain: f64,
    pub mixed_example: Option<usize>,
    pub partner_gain: Option<f64>,
    pub partner_offset: Option<usize>,
    pub noise_index: Option<usize>,
    pub noise_offset: Option<usize>,
    pub noise_snr_db: Option<f64>,
    pub noise_only: bool,
    pub silent_input: bool,
}

fn uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Random `window` crop; clips shorter than the window are an error.
fn random_crop(
    audio: &AudioBuffer,
    window: usize,
    rng: &mut impl Rng,
) -> Result<(AudioBuffer, usize), AugmentError> {
    let len = audio.samples().len();
    if len < window {
        let sr = audio.sample_rate_hz() as f64;
        return Err(AugmentError::ClipTooShort {
            got: len as f64 / sr,
            want: window as f64 / sr,
        });
    }
    let offset = if len == window {
        0
    } else {
        rng.gen_range(0..=len - window)
    };
    Ok((audio.segment(offset, window), offset))
}

/// Noise clips shorter than the window are tiled; longer ones are randomly
/// cropped.
fn crop_or_loop(
    audio: &AudioBuffer,
    window: usize,
    rng: &mut impl Rng,
) -> Result<(AudioBuffer, usize), AugmentError> {
    let len = audio.samples().len();
    if len >= window {
        return random_crop(audio, window, rng);
    }
    let mut samples = Vec::with_capacity(window);
    while samples.len() < window {
        let take = (window - samples.len()).min(len);
        samples.extend_from_slice(&audio.samples()[..take]);
    }
    Ok((AudioBuffer::new(samples, audio.sample_rate_hz())?, 0))
}

fn crop_and_gain(
    clip: &LabeledClip,
    window: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(AudioBuffer, usize, f64, bool), AugmentError> {
    let (cropped, offset) = random_crop(&clip.audio, window, rng)?;
    let gain = uniform(rng, cfg.gain_range);
    let (scaled, silent) = audio::peak_normalize(&cropped, gain)?;
    Ok((scaled, offset, gain, silent))
}

/// Apply the waveform-stage augmentation chain to one labeled clip:
/// time shift, peak gain, optional second example (labels unioned), optional
/// noise at a random SNR, optional noise-only substitution (labels cleared).
pub fn augment_example(
    clip: &LabeledClip,
    example_pool: &[LabeledClip],
    noise_pool: &[AudioBuffer],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(LabeledClip, AugmentTrace), AugmentError> {
    let window = (cfg.window_s * clip.audio.sample_rate_hz() as f64).round() as usize;
    let mut trace = AugmentTrace::default();

    let (mut wave, offset, gain, silent) = crop_and_gain(clip, window, cfg, rng)?;
    trace.shift_offset = offset;
    trace.gain = gain;
    trace.silent_input = silent;
    let mut labels = clip.labels.clone();

    if cfg.p_example_mix > 0.0 && rng.gen_bool(cfg.p_example_mix) {
        if example_pool.is_empty() {
            return Err(AugmentError::EmptyExamplePool {
                p: cfg.p_example_mix,
            });
        }
        let idx = rng.gen_range(0..example_pool.len());
        let partner = &example_pool[idx];
        let (pw, po, pg, _) = crop_and_gain(partner, window, cfg, rng)?;
        let mixed: Vec<f64> = wave
            .samples()
            .iter()
            .zip(pw.samples())
            .map(|(a, b)| a + b)
            .collect();
        wave = AudioBuffer::new(mixed, wave.sample_rate_hz())?;
        labels = labels.union(&partner.labels);
        trace.mixed_example = Some(idx);
        trace.partner_gain = Some(pg);
        trace.partner_offset = Some(po);
    }

    let noise_branch = cfg.p_noise > 0.0 && rng.gen_bool(cfg.p_noise);
    if noise_branch {
        let idx = rng.gen_range(0..noise_pool.len());
        let (noise, noff) = crop_or_loop(&noise_pool[idx], window, rng)?;
        let snr_db = uniform(rng, cfg.noise_snr_range_db);
        trace.noise_index = Some(idx);
        trace.noise_offset = Some(noff);
        trace.noise_snr_db = Some(snr_db);

        let nested_noise_only = !cfg.independent_noise_only
            && cfg.p_noise_only > 0.0
            && rng.gen_bool(cfg.p_noise_only);
        if nested_noise_only {
            // suppress the labeled audio, keep the noise at the level the
            // snr draw would have given it
            let gain = audio::noise_gain_for_snr(wave.power(), noise.power(), snr_db);
            let scaled: Vec<f64> = noise.samples().iter().map(|v| v * gain).collect();
            wave = AudioBuffer::new(scaled, wave.sample_rate_hz())?;
            labels.clear();
            trace.noise_only = true;
        } else {
            wave = audio::mix_at_snr(&wave, &noise, snr_db)?;
        }
    }

    if cfg.independent_noise_only && cfg.p_noise_only > 0.0 && rng.gen_bool(cfg.p_noise_only) {
        let idx = rng.gen_range(0..noise_pool.len());
        let (noise, noff) = crop_or_loop(&noise_pool[idx], window, rng)?;
        let gain = uniform(rng, cfg.gain_range);
        let (scaled, _) = audio::peak_normalize(&noise, gain)?;
        wave = scaled;
        labels.clear();
        trace.noise_index = Some(idx);
        trace.noise_offset = Some(noff);
        trace.noise_snr_db = None;
        trace.noise_only = true;
    }

    Ok((LabeledClip { audio: wave, labels }, trace))
}

/// Mel-domain tail of the chain: with probability `lowpass.p`, attenuate
/// high channels with a random cutoff and slope.
pub fn augment_mel(
    mel: &MelSpectrogram,
    params: &LowpassParams,
    rng: &mut impl Rng,
) -> Result<MelSpectrogram, AugmentError> {
    if params.p <= 0.0 || !rng.gen_bool(params.p) {
        return Ok(mel.clone());
    }
    let n = mel.n_channels();
    let lo = ((n as f64 * params.cutoff_frac_range.0) as usize).min(n - 1);
    let hi = ((n as f64 * params.cutoff_frac_range.1) as usize).clamp(lo + 1, n);
    let cutoff = rng.gen_range(lo..hi);
    let slope = uniform(rng, params.slope_range);
    Ok(lowpass_scale(mel, cutoff, slope)?)
}
