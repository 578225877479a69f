//! Signal frontend for the classifier: mel spectrogram, per-channel energy
//! normalization (PCEN), outlier-excluded channel standardization, and the
//! low-pass band-scaling augmentation.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("audio of {len} samples is shorter than one {frame_len}-sample frame")]
    TooShort { len: usize, frame_len: usize },
    #[error("frequency range upper bound {hi} Hz exceeds Nyquist {nyquist} Hz")]
    NyquistExceeded { hi: f64, nyquist: f64 },
    #[error("invalid frontend config: {0}")]
    BadConfig(String),
    #[error("non-finite value in spectrogram input")]
    NonFinite,
    #[error("cutoff channel {cutoff} out of range for {n_channels} channels")]
    BadCutoff { cutoff: usize, n_channels: usize },
    #[error("negative slope {0} dB/channel")]
    NegativeSlope(f64),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub frame_rate_hz: f64,
    pub frame_length_s: f64,
    pub freq_lo_hz: f64,
    pub freq_hi_hz: f64,
    pub n_channels: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            frame_rate_hz: 100.0,
            frame_length_s: 0.08,
            freq_lo_hz: 60.0,
            freq_hi_hz: 10_000.0,
            n_channels: 160,
        }
    }
}

impl FrontendConfig {
    pub fn frame_samples(&self, sample_rate_hz: u32) -> usize {
        (self.frame_length_s * sample_rate_hz as f64).round() as usize
    }

    pub fn hop_samples(&self, sample_rate_hz: u32) -> usize {
        (sample_rate_hz as f64 / self.frame_rate_hz).round() as usize
    }

    fn validate(&self, sample_rate_hz: u32) -> Result<(), FrontendError> {
        if self.n_channels == 0 {
            return Err(FrontendError::BadConfig("n_channels must be positive".into()));
        }
        if !(self.frame_rate_hz > 0.0) || !(self.frame_length_s > 0.0) {
            return Err(FrontendError::BadConfig(
                "frame rate and frame length must be positive".into(),
            ));
        }
        if !(self.freq_lo_hz >= 0.0) || self.freq_lo_hz >= self.freq_hi_hz {
            return Err(FrontendError::BadConfig(format!(
                "frequency range {}..{} Hz is empty",
                self.freq_lo_hz, self.freq_hi_hz
            )));
        }
        let nyquist = sample_rate_hz as f64 / 2.0;
        if self.freq_hi_hz > nyquist {
            return Err(FrontendError::NyquistExceeded {
                hi: self.freq_hi_hz,
                nyquist,
            });
        }
        if self.frame_samples(sample_rate_hz) == 0 || self.hop_samples(sample_rate_hz) == 0 {
            return Err(FrontendError::BadConfig(
                "frame or hop rounds to zero samples".into(),
            ));
        }
        Ok(())
    }
}

/// Time x channel matrix of mel energies (or transformed values downstream).
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    n_frames: usize,
    n_channels: usize,
    pub frame_rate_hz: f64,
    pub frame_length_s: f64,
    pub freq_lo_hz: f64,
    pub freq_hi_hz: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn value(&self, frame: usize, channel: usize) -> f64 {
        self.values[frame * self.n_channels + channel]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.n_channels..(frame + 1) * self.n_channels]
    }

    /// Row-major `[n_frames, n_channels]` data.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same geometry, `ln(value + eps)` applied pointwise.
    pub fn ln_scaled(&self, eps: f64) -> MelSpectrogram {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v = (*v + eps).ln();
        }
        out
    }

    fn map_values(&self, values: Vec<f64>) -> MelSpectrogram {
        debug_assert_eq!(values.len(), self.values.len());
        MelSpectrogram {
            values,
            ..self.clone()
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters for a config.
pub fn mel_center_frequencies(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.freq_lo_hz);
    let hi = hz_to_mel(cfg.freq_hi_hz);
    let step = (hi - lo) / (cfg.n_channels + 1) as f64;
    (1..=cfg.n_channels)
        .map(|c| mel_to_hz(lo + step * c as f64))
        .collect()
}

/// Hann-windowed STFT power spectrum passed through a peak-1 triangular mel
/// filterbank. Frame count is `floor((len - frame_len)/hop) + 1`.
pub fn mel_spectrogram(
    audio: &AudioBuffer,
    cfg: &FrontendConfig,
) -> Result<MelSpectrogram, FrontendError> {
    cfg.validate(audio.sample_rate_hz())?;
    let sr = audio.sample_rate_hz();
    let frame_len = cfg.frame_samples(sr);
    let hop = cfg.hop_samples(sr);
    let samples = audio.samples();
    if samples.len() < frame_len {
        return Err(FrontendError::TooShort {
            len: samples.len(),
            frame_len,
        });
    }
    let n_frames = (samples.len() - frame_len) / hop + 1;

    let nfft = frame_len.next_power_of_two();
    let n_bins = nfft / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);

    let window: Vec<f64> = (0..frame_len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame_len as f64).cos())
        .collect();

    // triangular filters with unit peaks, on mel-spaced corner frequencies
    let lo_mel = hz_to_mel(cfg.freq_lo_hz);
    let hi_mel = hz_to_mel(cfg.freq_hi_hz);
    let step = (hi_mel - lo_mel) / (cfg.n_channels + 1) as f64;
    let corners: Vec<f64> = (0..cfg.n_channels + 2)
        .map(|i| mel_to_hz(lo_mel + step * i as f64))
        .collect();
    let bin_hz = sr as f64 / nfft as f64;
    // filters[c] = (first_bin, weights)
    let mut filters: Vec<(usize, Vec<f64>)> = Vec::with_capacity(cfg.n_channels);
    for c in 0..cfg.n_channels {
        let (l, m, r) = (corners[c], corners[c + 1], corners[c + 2]);
        let k0 = (l / bin_hz).ceil() as usize;
        let k1 = ((r / bin_hz).floor() as usize).min(n_bins - 1);
        let mut weights = Vec::new();
        for k in k0..=k1 {
            let f = k as f64 * bin_hz;
            let w = if f <= m {
                (f - l) / (m - l)
            } else {
                (r - f) / (r - m)
            };
            weights.push(w.max(0.0));
        }
        filters.push((k0, weights));
    }

    let mut values = vec![0.0; n_frames * cfg.n_channels];
    let mut buf = vec![Complex64::default(); nfft];
    let mut power = vec![0.0; n_bins];
    for t in 0..n_frames {
        let start = t * hop;
        for i in 0..nfft {
            let v = if i < frame_len {
                samples[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (c, (k0, weights)) in filters.iter().enumerate() {
            let mut acc = 0.0;
            for (j, w) in weights.iter().enumerate() {
                acc += w * power[k0 + j];
            }
            values[t * cfg.n_channels + c] = acc;
        }
    }

    Ok(MelSpectrogram {
        values,
        n_frames,
        n_channels: cfg.n_channels,
        frame_rate_hz: cfg.frame_rate_hz,
        frame_length_s: cfg.frame_length_s,
        freq_lo_hz: cfg.freq_lo_hz,
        freq_hi_hz: cfg.freq_hi_hz,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PcenParams {
    /// IIR smoothing coefficient.
    pub s: f64,
    /// Gain normalization exponent.
    pub alpha: f64,
    /// Bias.
    pub delta: f64,
    /// Root compression exponent.
    pub r: f64,
    /// Denominator guard.
    pub eps: f64,
}

impl Default for PcenParams {
    fn default() -> Self {
        Self {
            s: 0.025,
            alpha: 0.98,
            delta: 2.0,
            r: 0.5,
            eps: 1e-6,
        }
    }
}

/// Per-channel energy normalization:
/// `out = (E / (eps + M)^alpha + delta)^r - delta^r`, where `M` is the
/// first-order IIR smoothing of `E` along time, initialized to the first
/// frame.
pub fn pcen(mel: &MelSpectrogram, params: &PcenParams) -> Result<MelSpectrogram, FrontendError> {
    if !mel.values.iter().all(|v| v.is_finite()) {
        return Err(FrontendError::NonFinite);
    }
    let (nt, nc) = (mel.n_frames, mel.n_channels);
    let mut out = vec![0.0; nt * nc];
    let delta_r = params.delta.powf(params.r);
    let mut smoother = vec![0.0; nc];
    for c in 0..nc {
        smoother[c] = mel.value(0, c);
    }
    for t in 0..nt {
        for c in 0..nc {
            let e = mel.value(t, c);
            if t > 0 {
                smoother[c] = (1.0 - params.s) * smoother[c] + params.s * e;
            }
            let denom = (params.eps + smoother[c]).powf(params.alpha);
            out[t * nc + c] = (e / denom + params.delta).powf(params.r) - delta_r;
        }
    }
    Ok(mel.map_values(out))
}

/// Per-channel standardization with one-sided outlier exclusion: values more
/// than one standard deviation above the mean are dropped from the
/// statistics (but still normalized in the output).
pub fn channel_normalize(mel: &MelSpectrogram) -> MelSpectrogram {
    const EPS_NORM: f64 = 1e-6;
    let (nt, nc) = (mel.n_frames, mel.n_channels);
    let mut out = vec![0.0; nt * nc];
    for c in 0..nc {
        let mut mean = 0.0;
        for t in 0..nt {
            mean += mel.value(t, c);
        }
        mean /= nt as f64;
        let mut var = 0.0;
        for t in 0..nt {
            let d = mel.value(t, c) - mean;
            var += d * d;
        }
        var /= nt as f64;
        let threshold = mean + var.sqrt();

        let mut kept_mean = 0.0;
        let mut kept = 0usize;
        for t in 0..nt {
            let v = mel.value(t, c);
            if v <= threshold {
                kept_mean += v;
                kept += 1;
            }
        }
        kept_mean /= kept as f64;
        let mut kept_var = 0.0;
        for t in 0..nt {
            let v = mel.value(t, c);
            if v <= threshold {
                let d = v - kept_mean;
                kept_var += d * d;
            }
        }
        kept_var /= kept as f64;
        let denom = kept_var.sqrt().max(EPS_NORM);
        for t in 0..nt {
            out[t * nc + c] = (mel.value(t, c) - kept_mean) / denom;
        }
    }
    mel.map_values(out)
}

/// Attenuate channels at and above `cutoff` by `slope` dB per channel:
/// channel `k >= cutoff` is scaled by `10^(-slope*(k - cutoff)/20)`.
pub fn lowpass_scale(
    mel: &MelSpectrogram,
    cutoff_channel: usize,
    slope_db_per_channel: f64,
) -> Result<MelSpectrogram, FrontendError> {
    if cutoff_channel >= mel.n_channels {
        return Err(FrontendError::BadCutoff {
            cutoff: cutoff_channel,
            n_channels: mel.n_channels,
        });
    }
    if slope_db_per_channel < 0.0 {
        return Err(FrontendError::NegativeSlope(slope_db_per_channel));
    }
    let nc = mel.n_channels;
    let gains: Vec<f64> = (0..nc)
        .map(|k| {
            if k < cutoff_channel {
                1.0
            } else {
                10f64.powf(-slope_db_per_channel * (k - cutoff_channel) as f64 / 20.0)
            }
        })
        .collect();
    let mut out = mel.values.clone();
    for t in 0..mel.n_frames {
        for k in 0..nc {
            out[t * nc + k] *= gains[k];
        }
    }
    Ok(mel.map_values(out))
}
