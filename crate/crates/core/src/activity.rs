//! Activity detection: find energy peaks in a log-mel spectrogram with a
//! Ricker-wavelet CWT and cut fixed-length analysis windows around them.

use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::frontend::{FrontendConfig, FrontendError, MelSpectrogram};

/// A candidate analysis window around an energy peak.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakWindow {
    pub start_s: f64,
    pub duration_s: f64,
    pub peak_energy: f64,
    pub peak_frame: usize,
}

impl PeakWindow {
    /// Cut the window out of the recording it was selected from.
    pub fn extract(&self, rec: &AudioBuffer) -> AudioBuffer {
        let sr = rec.sample_rate_hz() as f64;
        let start = (self.start_s * sr).round() as usize;
        let len = (self.duration_s * sr).round() as usize;
        rec.segment(start, len)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivityConfig {
    pub frontend: FrontendConfig,
    /// CWT widths in frames.
    pub widths: Vec<usize>,
    pub window_s: f64,
    pub min_separation_s: f64,
    pub max_windows: usize,
    /// Offset inside the log applied to mel energies.
    pub log_offset: f64,
}

impl Default for ActivityConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            widths: vec![5, 10, 20, 40],
            window_s: 6.0,
            min_separation_s: 3.0,
            max_windows: 5,
            log_offset: 1e-8,
        }
    }
}

/// Total log-mel energy per frame (sum over channels).
pub fn frame_energy(mel: &MelSpectrogram) -> Vec<f64> {
    (0..mel.n_frames())
        .map(|t| mel.frame(t).iter().sum())
        .collect()
}

fn ricker(points: usize, a: f64) -> Vec<f64> {
    let norm = 2.0 / ((3.0 * a).sqrt() * std::f64::consts::PI.powf(0.25));
    let center = (points - 1) as f64 / 2.0;
    (0..points)
        .map(|i| {
            let x = i as f64 - center;
            let xa = x / a;
            norm * (1.0 - xa * xa) * (-x * x / (2.0 * a * a)).exp()
        })
        .collect()
}

/// Same-length convolution with edge replication. Replicating the edge
/// sample (instead of zero padding) keeps the response of a zero-mean
/// wavelet invariant to constant offsets all the way to the boundaries,
/// which matters for log-energy inputs with large negative baselines.
fn convolve_same(sig: &[f64], ker: &[f64]) -> Vec<f64> {
    let n = sig.len() as isize;
    let k = ker.len() as isize;
    let offset = (k - 1) / 2;
    let mut out = vec![0.0; sig.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..k {
            let idx = (i as isize + offset - j).clamp(0, n - 1) as usize;
            acc += sig[idx] * ker[j as usize];
        }
        *o = acc;
    }
    out
}

/// Strict interior local maxima of a row.
fn relative_maxima(row: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 1..row.len().saturating_sub(1) {
        if row[i] > row[i - 1] && row[i] > row[i + 1] {
            out.push(i);
        }
    }
    out
}

fn percentile(values: &mut Vec<f64>, per: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let rank = per / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < n {
        values[lo] + frac * (values[lo + 1] - values[lo])
    } else {
        values[n - 1]
    }
}

struct RidgeLine {
    rows: Vec<usize>,
    cols: Vec<usize>,
    gap: usize,
}

/// Peak frames of an energy sequence found by a continuous wavelet transform
/// over the given widths with ridge-line linking. Peaks are returned sorted
/// by frame. Sequences shorter than the largest width yield no peaks.
pub fn cwt_peaks(energy: &[f64], widths: &[usize]) -> Vec<usize> {
    let mut widths: Vec<usize> = widths.iter().copied().filter(|w| *w > 0).collect();
    widths.sort_unstable();
    widths.dedup();
    if widths.is_empty() || energy.len() < *widths.last().unwrap() {
        return Vec::new();
    }
    let n = energy.len();
    let n_rows = widths.len();

    let cwt: Vec<Vec<f64>> = widths
        .iter()
        .map(|&w| {
            let points = (10 * w).min(n);
            convolve_same(energy, &ricker(points, w as f64))
        })
        .collect();
    let maxima: Vec<Vec<usize>> = cwt.iter().map(|row| relative_maxima(row)).collect();

    let start_row = match (0..n_rows).rev().find(|r| !maxima[*r].is_empty()) {
        Some(r) => r,
        None => return Vec::new(),
    };
    let gap_thresh = widths[0];
    let max_distances: Vec<f64> = widths.iter().map(|&w| w as f64 / 4.0).collect();

    let mut active: Vec<RidgeLine> = maxima[start_row]
        .iter()
        .map(|&c| RidgeLine {
            rows: vec![start_row],
            cols: vec![c],
            gap: 0,
        })
        .collect();
    let mut finished: Vec<RidgeLine> = Vec::new();

    for row in (0..start_row).rev() {
        for line in active.iter_mut() {
            line.gap += 1;
        }
        // snapshot of each active line's latest column for this row
        let prev_cols: Vec<usize> = active.iter().map(|l| *l.cols.last().unwrap()).collect();
        for &col in &maxima[row] {
            let closest = prev_cols
                .iter()
                .enumerate()
                .min_by_key(|(_, pc)| col.abs_diff(**pc))
                .filter(|(_, pc)| col.abs_diff(**pc) as f64 <= max_distances[row]);
            match closest {
                Some((idx, _)) => {
                    active[idx].rows.push(row);
                    active[idx].cols.push(col);
                    active[idx].gap = 0;
                }
                None => active.push(RidgeLine {
                    rows: vec![row],
                    cols: vec![col],
                    gap: 0,
                }),
            }
        }
        let (kept, dropped): (Vec<_>, Vec<_>) =
            active.into_iter().partition(|l| l.gap <= gap_thresh);
        active = kept;
        finished.extend(dropped);
    }
    finished.extend(active);

    // filter by length, signal-to-noise at the smallest scale, and response
    // strength relative to the strongest response at the same scale (kills
    // the faint ridge lines that form on saddles between real peaks)
    let min_length = n_rows.div_ceil(4);
    let window_size = n.div_ceil(20).max(1);
    let half = window_size / 2;
    let row0 = &cwt[0];
    let min_snr = 1.0;
    let noise_perc = 10.0;
    let rel_thresh = 0.05;
    let row_maxes: Vec<f64> = cwt
        .iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let mut peaks: Vec<usize> = Vec::new();
    for line in &finished {
        if line.rows.len() < min_length {
            continue;
        }
        // point of the line at its smallest scale
        let (mut best_row, mut best_col) = (line.rows[0], line.cols[0]);
        for (r, c) in line.rows.iter().zip(&line.cols) {
            if *r < best_row {
                best_row = *r;
                best_col = *c;
            }
        }
        let response = cwt[best_row][best_col];
        if response <= 0.0 || response < rel_thresh * row_maxes[best_row] {
            continue;
        }
        let lo = best_col.saturating_sub(half);
        let hi = (best_col + half + 1).min(n);
        let mut window: Vec<f64> = row0[lo..hi].iter().map(|v| v.abs()).collect();
        let noise = percentile(&mut window, noise_perc).max(1e-12);
        if response / noise >= min_snr {
            peaks.push(best_col);
        }
    }
    peaks.sort_unstable();
    peaks.dedup();
    peaks
}

/// Pick up to `cfg.max_windows` analysis windows around the strongest energy
/// peaks of the recording, sorted by peak energy (descending). Peaks closer
/// than `min_separation_s` are merged, keeping the stronger one. If the CWT
/// finds no peaks the single globally strongest frame is used. Recordings
/// shorter than one window yield a single full-length window; empty
/// recordings yield none.
pub fn select_windows(
    rec: &AudioBuffer,
    cfg: &ActivityConfig,
) -> Result<Vec<PeakWindow>, FrontendError> {
    if rec.samples().is_empty() {
        return Ok(Vec::new());
    }
    let sr = rec.sample_rate_hz();
    let duration = rec.duration_s();
    if rec.samples().len() < cfg.frontend.frame_samples(sr) {
        // too short to analyze at all: one window covering everything
        return Ok(vec![PeakWindow {
            start_s: 0.0,
            duration_s: duration,
            peak_energy: 0.0,
            peak_frame: 0,
        }]);
    }

    let mel = crate::frontend::mel_spectrogram(rec, &cfg.frontend)?;
    let energy = frame_energy(&mel.ln_scaled(cfg.log_offset));

    let mut peaks = cwt_peaks(&energy, &cfg.widths);
    if peaks.is_empty() {
        let argmax = energy
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        peaks.push(argmax);
    }

    let hop = cfg.frontend.hop_samples(sr) as f64;
    let frame_len = cfg.frontend.frame_samples(sr) as f64;
    let frame_time = |f: usize| (f as f64 * hop + frame_len / 2.0) / sr as f64;

    let mut candidates: Vec<(usize, f64)> = peaks.into_iter().map(|f| (f, energy[f])).collect();
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut kept: Vec<(usize, f64)> = Vec::new();
    for (f, e) in candidates {
        let t = frame_time(f);
        if kept
            .iter()
            .all(|(kf, _)| (frame_time(*kf) - t).abs() >= cfg.min_separation_s)
        {
            kept.push((f, e));
        }
        if kept.len() == cfg.max_windows {
            break;
        }
    }

    if duration <= cfg.window_s {
        let (f, e) = kept[0];
        return Ok(vec![PeakWindow {
            start_s: 0.0,
            duration_s: duration,
            peak_energy: e,
            peak_frame: f,
        }]);
    }

    Ok(kept
        .into_iter()
        .map(|(f, e)| {
            let start = (frame_time(f) - cfg.window_s / 2.0)
                .clamp(0.0, duration - cfg.window_s);
            PeakWindow {
                start_s: start,
                duration_s: cfg.window_s,
                peak_energy: e,
                peak_frame: f,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_bump(n: usize, center: f64, width: f64, height: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let d = i as f64 - center;
                height * (-d * d / (2.0 * width * width)).exp()
            })
            .collect()
    }

    #[test]
    fn bump_is_found_within_two_frames() {
        let w = 10.0;
        let energy = gaussian_bump(400, 170.0, w, 5.0);
        let peaks = cwt_peaks(&energy, &[5, 10, 20]);
        assert_eq!(peaks.len(), 1, "peaks {peaks:?}");
        assert!((peaks[0] as f64 - 170.0).abs() <= 2.0, "peak at {}", peaks[0]);
    }

    #[test]
    fn two_separated_bumps_give_two_peaks() {
        let mut energy = gaussian_bump(500, 120.0, 8.0, 4.0);
        for (i, v) in gaussian_bump(500, 350.0, 12.0, 6.0).iter().enumerate() {
            energy[i] += v;
        }
        let peaks = cwt_peaks(&energy, &[5, 10, 20]);
        assert_eq!(peaks.len(), 2, "peaks {peaks:?}");
        assert!((peaks[0] as f64 - 120.0).abs() <= 2.0);
        assert!((peaks[1] as f64 - 350.0).abs() <= 2.0);
    }

    #[test]
    fn flat_sequence_has_no_peaks() {
        assert!(cwt_peaks(&vec![3.0; 300], &[5, 10, 20]).is_empty());
    }

    #[test]
    fn sequence_shorter_than_largest_width_has_no_peaks() {
        let energy = gaussian_bump(30, 15.0, 4.0, 5.0);
        assert!(cwt_peaks(&energy, &[5, 10, 40]).is_empty());
    }

    #[test]
    fn bump_survives_constant_offset() {
        let w = 10.0;
        let base = gaussian_bump(400, 170.0, w, 5.0);
        let shifted: Vec<f64> = base.iter().map(|v| v - 100.0).collect();
        let p1 = cwt_peaks(&base, &[5, 10, 20]);
        let p2 = cwt_peaks(&shifted, &[5, 10, 20]);
        assert_eq!(p1, p2);
    }

    fn cfg_8k() -> ActivityConfig {
        ActivityConfig {
            frontend: FrontendConfig {
                frame_rate_hz: 50.0,
                frame_length_s: 0.04,
                freq_lo_hz: 60.0,
                freq_hi_hz: 3800.0,
                n_channels: 32,
            },
            ..ActivityConfig::default()
        }
    }

    fn burst_recording(bursts: &[(f64, f64, f64)], dur_s: f64) -> AudioBuffer {
        let sr = 8000u32;
        let n = (dur_s * sr as f64) as usize;
        let mut samples = vec![0.0; n];
        for &(t0, amp, freq) in bursts {
            let start = (t0 * sr as f64) as usize;
            let len = (0.4 * sr as f64) as usize;
            for i in 0..len {
                if start + i >= n {
                    break;
                }
                let env = (std::f64::consts::PI * i as f64 / len as f64).sin();
                samples[start + i] +=
                    amp * env * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin();
            }
        }
        AudioBuffer::new(samples, sr).unwrap()
    }

    #[test]
    fn windows_center_on_bursts_sorted_by_energy() {
        // same tone frequency so log-energy ranking follows amplitude
        let rec = burst_recording(
            &[(3.0, 0.2, 1200.0), (10.0, 0.6, 1200.0), (16.0, 0.4, 1200.0)],
            20.0,
        );
        let windows = select_windows(&rec, &cfg_8k()).unwrap();
        assert_eq!(windows.len(), 3, "{windows:?}");
        for w in &windows {
            assert_eq!(w.duration_s, 6.0);
            assert!(w.start_s >= 0.0 && w.start_s + w.duration_s <= 20.0 + 1e-9);
        }
        // strongest first; burst midpoints are t0 + 0.2
        assert!((windows[0].start_s + 3.0 - 10.2).abs() < 0.5);
        assert!((windows[1].start_s + 3.0 - 16.2).abs() < 0.5);
        assert!(windows[0].peak_energy >= windows[1].peak_energy);
        assert!(windows[1].peak_energy >= windows[2].peak_energy);
    }

    #[test]
    fn early_burst_window_is_clamped_to_start() {
        let rec = burst_recording(&[(0.5, 0.5, 1000.0)], 12.0);
        let windows = select_windows(&rec, &cfg_8k()).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].start_s, 0.0);
    }

    #[test]
    fn close_peaks_are_deduplicated_keeping_the_stronger() {
        let rec = burst_recording(&[(8.0, 0.3, 900.0), (9.0, 0.6, 1500.0)], 18.0);
        let windows = select_windows(&rec, &cfg_8k()).unwrap();
        assert_eq!(windows.len(), 1, "{windows:?}");
        // kept window centers near the louder 9.2 s burst
        assert!((windows[0].start_s + 3.0 - 9.2).abs() < 0.6);
    }

    #[test]
    fn at_most_max_windows_are_returned() {
        let bursts: Vec<(f64, f64, f64)> = (0..8)
            .map(|i| (2.0 + i as f64 * 3.5, 0.3 + 0.05 * i as f64, 800.0 + 100.0 * i as f64))
            .collect();
        let rec = burst_recording(&bursts, 32.0);
        let windows = select_windows(&rec, &cfg_8k()).unwrap();
        assert!(windows.len() <= 5);
        assert!(windows.len() >= 4, "{windows:?}");
    }

    #[test]
    fn short_recording_yields_one_full_length_window() {
        let rec = burst_recording(&[(1.0, 0.5, 1000.0)], 4.0);
        let windows = select_windows(&rec, &cfg_8k()).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].start_s, 0.0);
        assert!((windows[0].duration_s - 4.0).abs() < 1e-9);
    }

    #[test]
    fn empty_recording_yields_no_windows() {
        let rec = AudioBuffer::silence(0, 8000);
        assert!(select_windows(&rec, &cfg_8k()).unwrap().is_empty());
    }

    #[test]
    fn silence_falls_back_to_single_window() {
        let rec = AudioBuffer::silence(8000 * 10, 8000);
        let windows = select_windows(&rec, &cfg_8k()).unwrap();
        assert_eq!(windows.len(), 1);
    }

    #[test]
    fn peak_time_lies_inside_its_window() {
        let rec = burst_recording(
            &[(1.0, 0.5, 900.0), (11.0, 0.4, 1400.0), (18.5, 0.3, 2100.0)],
            20.0,
        );
        let cfg = cfg_8k();
        let sr = 8000.0;
        let hop = cfg.frontend.hop_samples(8000) as f64;
        let flen = cfg.frontend.frame_samples(8000) as f64;
        for w in select_windows(&rec, &cfg).unwrap() {
            let t = (w.peak_frame as f64 * hop + flen / 2.0) / sr;
            assert!(
                t >= w.start_s - 1e-9 && t <= w.start_s + w.duration_s + 1e-9,
                "peak at {t} outside window {w:?}"
            );
        }
    }

    #[test]
    fn extract_cuts_the_right_samples() {
        let rec = burst_recording(&[(2.0, 0.5, 1000.0)], 10.0);
        let w = PeakWindow {
            start_s: 1.5,
            duration_s: 6.0,
            peak_energy: 0.0,
            peak_frame: 0,
        };
        let cut = w.extract(&rec);
        assert_eq!(cut.samples().len(), 48000);
        assert_eq!(cut.samples()[0], rec.samples()[12000]);
    }
}
