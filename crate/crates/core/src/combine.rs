//! Separate-then-classify: run the ensemble on raw audio, on separated
//! channels, or on both, taking the element-wise maximum probability per
//! species, and score whole manifests into evaluation reports.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::audio::{peak_normalize, read_wav, AudioBuffer, AudioError};
use crate::classifier::{classify_ensemble, ClassifierError, ClassifierModel};
use crate::dataset::{ClipRecord, DataError, Taxonomy};
use crate::metrics::{EvalMatrix, EvalReport, MetricsError};
use crate::separator::{SeparatorError, SeparatorModel};

#[derive(Debug, Error)]
pub enum CombineError {
    #[error("mode {mode:?} needs a separator")]
    SeparatorRequired { mode: CombineMode },
    #[error("separator expects {separator_hz} Hz, window is {window_hz} Hz")]
    SampleRateMismatch { separator_hz: u32, window_hz: u32 },
    #[error("cannot read {path}: {source}")]
    MissingAudio {
        path: PathBuf,
        #[source]
        source: AudioError,
    },
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("no full {window_s} s windows in the manifest")]
    NoWindows { window_s: f64 },
    #[error("unknown mode {0:?}; expected mix, sep, or mix+sep")]
    UnknownMode(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineMode {
    MixOnly,
    SeparationOnly,
    MixPlusSeparation,
}

impl CombineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CombineMode::MixOnly => "mix",
            CombineMode::SeparationOnly => "sep",
            CombineMode::MixPlusSeparation => "mix+sep",
        }
    }
}

impl FromStr for CombineMode {
    type Err = CombineError;

    fn from_str(s: &str) -> Result<Self, CombineError> {
        match s {
            "mix" => Ok(CombineMode::MixOnly),
            "sep" => Ok(CombineMode::SeparationOnly),
            "mix+sep" => Ok(CombineMode::MixPlusSeparation),
            other => Err(CombineError::UnknownMode(other.to_string())),
        }
    }
}

/// Source separation as the pipeline sees it; lets tests count invocations
/// and substitute fixed channel splits.
pub trait Separates {
    fn sample_rate_hz(&self) -> u32;
    fn separate(&self, mixture: &AudioBuffer) -> Result<Vec<AudioBuffer>, CombineError>;
}

impl Separates for SeparatorModel {
    fn sample_rate_hz(&self) -> u32 {
        self.config().sample_rate_hz
    }

    fn separate(&self, mixture: &AudioBuffer) -> Result<Vec<AudioBuffer>, CombineError> {
        Ok(SeparatorModel::separate(self, mixture)?.sources)
    }
}

/// Element-wise max over channel probability rows, optionally including the
/// raw-mixture row.
pub fn combine_probs(channel_probs: &[Vec<f64>], mix_probs: Option<&[f64]>) -> Vec<f64> {
    let n = mix_probs
        .map(<[f64]>::len)
        .or_else(|| channel_probs.first().map(Vec::len))
        .unwrap_or(0);
    let mut out = vec![f64::NEG_INFINITY; n];
    for row in channel_probs
        .iter()
        .map(Vec::as_slice)
        .chain(mix_probs.into_iter())
    {
        for (o, &p) in out.iter_mut().zip(row) {
            *o = o.max(p);
        }
    }
    out
}

const CHANNEL_PEAK: f64 = 0.5;

fn classify_channels(
    separator: &dyn Separates,
    ensemble: &[ClassifierModel],
    window: &AudioBuffer,
) -> Result<Vec<Vec<f64>>, CombineError> {
    if separator.sample_rate_hz() != window.sample_rate_hz() {
        return Err(CombineError::SampleRateMismatch {
            separator_hz: separator.sample_rate_hz(),
            window_hz: window.sample_rate_hz(),
        });
    }
    let mut rows = Vec::new();
    for channel in separator.separate(window)? {
        // the classifier saw gain-normalized windows in training, so feed it
        // gain-normalized channels
        let (normed, _silent) = peak_normalize(&channel, CHANNEL_PEAK)?;
        rows.push(classify_ensemble(ensemble, &normed)?);
    }
    Ok(rows)
}

/// Per-species probabilities for one window under the chosen mode.
/// `MixOnly` never touches the separator.
pub fn separate_classify(
    window: &AudioBuffer,
    separator: Option<&dyn Separates>,
    ensemble: &[ClassifierModel],
    mode: CombineMode,
) -> Result<Vec<f64>, CombineError> {
    if ensemble.is_empty() {
        return Err(CombineError::EmptyEnsemble);
    }
    match mode {
        CombineMode::MixOnly => Ok(classify_ensemble(ensemble, window)?),
        CombineMode::SeparationOnly => {
            let sep = separator.ok_or(CombineError::SeparatorRequired { mode })?;
            let rows = classify_channels(sep, ensemble, window)?;
            Ok(combine_probs(&rows, None))
        }
        CombineMode::MixPlusSeparation => {
            let sep = separator.ok_or(CombineError::SeparatorRequired { mode })?;
            let rows = classify_channels(sep, ensemble, window)?;
            let mix = classify_ensemble(ensemble, window)?;
            Ok(combine_probs(&rows, Some(&mix)))
        }
    }
}

/// Cut each manifest clip into non-overlapping `window_s` windows, classify
/// each under `mode`, and collect score/label rows. A window's positives are
/// the clip's foreground and background species.
pub fn eval_matrix(
    root: &Path,
    records: &[ClipRecord],
    taxonomy: &Taxonomy,
    separator: Option<&dyn Separates>,
    ensemble: &[ClassifierModel],
    mode: CombineMode,
    window_s: f64,
) -> Result<EvalMatrix, CombineError> {
    let mut scores = Vec::new();
    let mut labels_flat = Vec::new();
    for record in records {
        let path = root.join(&record.path);
        let audio = read_wav(&path).map_err(|source| CombineError::MissingAudio {
            path: path.clone(),
            source,
        })?;
        let labels = record.label_set(taxonomy)?;
        let mut truth = vec![false; taxonomy.n_species()];
        for &s in labels.foreground().iter().chain(labels.background()) {
            truth[s] = true;
        }
        let window_samples = (window_s * audio.sample_rate_hz() as f64).round() as usize;
        let n_windows = audio.samples().len() / window_samples.max(1);
        for w in 0..n_windows {
            let window = audio.segment(w * window_samples, window_samples);
            scores.extend(separate_classify(&window, separator, ensemble, mode)?);
            labels_flat.extend_from_slice(&truth);
        }
    }
    if scores.is_empty() {
        return Err(CombineError::NoWindows { window_s });
    }
    Ok(EvalMatrix::new(
        scores,
        labels_flat,
        taxonomy.species_codes().to_vec(),
    )?)
}

pub fn evaluate_dataset(
    root: &Path,
    records: &[ClipRecord],
    taxonomy: &Taxonomy,
    separator: Option<&dyn Separates>,
    ensemble: &[ClassifierModel],
    mode: CombineMode,
    window_s: f64,
    min_count: usize,
) -> Result<EvalReport, CombineError> {
    let m = eval_matrix(root, records, taxonomy, separator, ensemble, mode, window_s)?;
    Ok(EvalReport::from_matrix(&m, min_count)?)
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<(), CombineError> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, report).map_err(|e| CombineError::Io(e.into()))?;
    Ok(())
}

/// One row per class: name, positive count, average precision (empty when
/// the class has no positives).
pub fn write_per_class_csv(path: &Path, report: &EvalReport) -> Result<(), CombineError> {
    let mut writer = csv::Writer::from_path(path).map_err(DataError::from)?;
    writer
        .write_record(["species", "n_positives", "ap"])
        .map_err(DataError::from)?;
    for class in &report.per_class {
        let ap = class.ap.map(|v| v.to_string()).unwrap_or_default();
        writer
            .write_record([&class.name, &class.n_positives.to_string(), &ap])
            .map_err(DataError::from)?;
    }
    writer.flush().map_err(DataError::from)?;
    Ok(())
}
