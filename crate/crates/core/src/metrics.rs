//! Evaluation metrics: average precision and CMAP, lwlrap, pooled-AUC d',
//! top-1 precision, SI-SNR and its improvement, and MoMi for
//! mixture-of-mixtures separation evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError, MomExample};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores and labels disagree: {0}")]
    ShapeMismatch(String),
    #[error("no positive labels")]
    NoPositives,
    #[error("no class has at least {min_count} positives")]
    NoQualifyingClass { min_count: usize },
    #[error("pooled labels contain only one class")]
    SingleClassPool,
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("reference signal has zero energy")]
    ZeroReference,
    #[error("{m} sources exceed the enumeration guard of 16")]
    TooManySources { m: usize },
    #[error("separated source count mismatch: example {example} has {got} sources, expected {want}")]
    SourceCount { example: usize, got: usize, want: usize },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Example x class score and label matrices.
#[derive(Clone, Debug)]
pub struct EvalMatrix {
    scores: Vec<f64>,
    labels: Vec<bool>,
    class_names: Vec<String>,
    n_examples: usize,
    n_classes: usize,
}

impl EvalMatrix {
    pub fn new(
        scores: Vec<f64>,
        labels: Vec<bool>,
        class_names: Vec<String>,
    ) -> Result<Self, MetricsError> {
        let n_classes = class_names.len();
        if n_classes == 0 || scores.len() != labels.len() || scores.len() % n_classes != 0 {
            return Err(MetricsError::ShapeMismatch(format!(
                "{} scores, {} labels, {} classes",
                scores.len(),
                labels.len(),
                n_classes
            )));
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(MetricsError::NonFiniteScore);
        }
        let n_examples = scores.len() / n_classes;
        Ok(Self {
            scores,
            labels,
            class_names,
            n_examples,
            n_classes,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn score(&self, example: usize, class: usize) -> f64 {
        self.scores[example * self.n_classes + class]
    }

    pub fn label(&self, example: usize, class: usize) -> bool {
        self.labels[example * self.n_classes + class]
    }
}

/// Indices 0..n ranked by descending score, ties broken by ascending index.
fn ranked_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Mean over the positive items of precision at their rank, with scores
/// sorted descending (ties broken by ascending index).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !labels.iter().any(|&l| l) {
        return Err(MetricsError::NoPositives);
    }
    let mut positives_seen = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in ranked_indices(scores).iter().enumerate() {
        if labels[i] {
            positives_seen += 1;
            sum += positives_seen as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / positives_seen as f64)
}

/// Per-class positive count and average precision (None when a class has no
/// positives).
pub fn per_class_ap(eval: &EvalMatrix) -> Vec<(usize, Option<f64>)> {
    (0..eval.n_classes)
        .map(|c| {
            let scores: Vec<f64> = (0..eval.n_examples).map(|i| eval.score(i, c)).collect();
            let labels: Vec<bool> = (0..eval.n_examples).map(|i| eval.label(i, c)).collect();
            let n_pos = labels.iter().filter(|&&l| l).count();
            let ap = if n_pos > 0 {
                Some(average_precision(&scores, &labels).unwrap())
            } else {
                None
            };
            (n_pos, ap)
        })
        .collect()
}

/// Unweighted mean of per-class average precision over classes with at least
/// `min_count` positive examples.
pub fn cmap(eval: &EvalMatrix, min_count: usize) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (n_pos, ap) in per_class_ap(eval) {
        if n_pos >= min_count {
            sum += ap.expect("class with positives has an AP");
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoQualifyingClass { min_count });
    }
    Ok(sum / n as f64)
}

/// Label-weighted label-ranking average precision: for every positive
/// (example, class) pair, the precision of positives within that example's
/// ranking truncated at the pair; averaged over all positive pairs.
pub fn lwlrap(eval: &EvalMatrix) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut n_pairs = 0usize;
    for i in 0..eval.n_examples {
        let scores: Vec<f64> = (0..eval.n_classes).map(|c| eval.score(i, c)).collect();
        let labels: Vec<bool> = (0..eval.n_classes).map(|c| eval.label(i, c)).collect();
        let mut positives_seen = 0usize;
        for (rank0, &c) in ranked_indices(&scores).iter().enumerate() {
            if labels[c] {
                positives_seen += 1;
                sum += positives_seen as f64 / (rank0 + 1) as f64;
                n_pairs += 1;
            }
        }
    }
    if n_pairs == 0 {
        return Err(MetricsError::NoPositives);
    }
    Ok(sum / n_pairs as f64)
}

/// Mann-Whitney AUC with tie averaging over a pooled score/label list.
fn pooled_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClassPool);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks across tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Standard normal CDF.
fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF: rational initial approximation refined with
/// two Halley steps against the exact CDF.
pub fn probit(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probit domain is (0, 1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        let e = norm_cdf(x) - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
        x -= u / (1.0 + x * u / 2.0);
    }
    x
}

const AUC_CLAMP: f64 = 1e-6;

/// Sensitivity index over the pooled (example, class) score list:
/// `sqrt(2) * probit(AUC)` with the AUC clamped to `[1e-6, 1 - 1e-6]`.
pub fn d_prime(eval: &EvalMatrix) -> Result<f64, MetricsError> {
    let auc = pooled_auc(&eval.scores, &eval.labels)?;
    let clamped = auc.clamp(AUC_CLAMP, 1.0 - AUC_CLAMP);
    Ok(std::f64::consts::SQRT_2 * probit(clamped))
}

/// Fraction of labeled examples whose top-scored class is a positive label.
/// Examples without any positive label are excluded; the count of exclusions
/// is returned alongside.
pub fn top1_precision(eval: &EvalMatrix) -> Result<(f64, usize), MetricsError> {
    let mut hits = 0usize;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for i in 0..eval.n_examples {
        let any_pos = (0..eval.n_classes).any(|c| eval.label(i, c));
        if !any_pos {
            excluded += 1;
            continue;
        }
        let mut best = 0usize;
        for c in 1..eval.n_classes {
            if eval.score(i, c) > eval.score(i, best) {
                best = c;
            }
        }
        if eval.label(i, best) {
            hits += 1;
        }
        counted += 1;
    }
    if counted == 0 {
        return Err(MetricsError::NoPositives);
    }
    Ok((hits as f64 / counted as f64, excluded))
}

const EPS_SI: f64 = 1e-12;

/// Scale-invariant SNR in dB of `estimate` against `reference`: the estimate
/// is projected onto the reference and the energy ratio of the projection to
/// the residual is reported. The `1e-12` guard in both terms bounds the
/// result (ceiling near 120 dB for unit-power signals). A zero-energy
/// estimate is scored as if it missed the whole reference (floor), since
/// both projection and residual vanish and the plain ratio would
/// misleadingly report 0 dB.
pub fn si_snr(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64, MetricsError> {
    let r = reference.samples();
    let e = estimate.samples();
    if r.len() != e.len() {
        return Err(MetricsError::Audio(AudioError::LengthMismatch(
            r.len(),
            e.len(),
        )));
    }
    let ref_energy: f64 = r.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    let est_energy: f64 = e.iter().map(|v| v * v).sum();
    if est_energy == 0.0 {
        return Ok(10.0 * (EPS_SI / (ref_energy + EPS_SI)).log10());
    }
    let dot: f64 = r.iter().zip(e).map(|(a, b)| a * b).sum();
    let scale = dot / ref_energy;
    let mut target_energy = 0.0;
    let mut residual_energy = 0.0;
    for (a, b) in r.iter().zip(e) {
        let t = scale * a;
        target_energy += t * t;
        let d = b - t;
        residual_energy += d * d;
    }
    Ok(10.0 * ((target_energy + EPS_SI) / (residual_energy + EPS_SI)).log10())
}

/// SI-SNR improvement of `estimate` over using `mixture` as the estimate.
pub fn si_snri(
    reference: &AudioBuffer,
    estimate: &AudioBuffer,
    mixture: &AudioBuffer,
) -> Result<f64, MetricsError> {
    Ok(si_snr(reference, estimate)? - si_snr(reference, mixture)?)
}

/// Best-assignment mean SI-SNR of two estimated mixtures built by summing
/// separated sources, for one mixture-of-mixtures example.
fn best_assignment_si_snr(
    example: &MomExample,
    sources: &[AudioBuffer],
) -> Result<f64, MetricsError> {
    let m = sources.len();
    if m > 16 {
        return Err(MetricsError::TooManySources { m });
    }
    let n = example.mom.samples().len();
    let mut best = f64::NEG_INFINITY;
    for a in 0..(1u32 << m) {
        let mut est1 = vec![0.0; n];
        let mut est2 = vec![0.0; n];
        for (s, src) in sources.iter().enumerate() {
            let dst = if (a >> (m - 1 - s)) & 1 == 0 {
                &mut est1
            } else {
                &mut est2
            };
            for (d, v) in dst.iter_mut().zip(src.samples()) {
                *d += v;
            }
        }
        let sr = example.mom.sample_rate_hz();
        let e1 = AudioBuffer::new(est1, sr)?;
        let e2 = AudioBuffer::new(est2, sr)?;
        let score = (si_snr(&example.x1, &e1)? + si_snr(&example.x2, &e2)?) / 2.0;
        if score > best {
            best = score;
        }
    }
    Ok(best)
}

/// Mean SI-SNR improvement on mixture-of-mixtures examples: separated
/// sources are optimally assigned and summed into two estimated mixtures,
/// scored against the two references, and compared with using the input
/// mixture itself as both estimates.
pub fn momi(
    examples: &[MomExample],
    separated: &[Vec<AudioBuffer>],
) -> Result<f64, MetricsError> {
    if examples.len() != separated.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} examples vs {} separated sets",
            examples.len(),
            separated.len()
        )));
    }
    if examples.is_empty() {
        return Err(MetricsError::ShapeMismatch("empty example list".into()));
    }
    let want = separated[0].len();
    let mut total = 0.0;
    for (i, (ex, sources)) in examples.iter().zip(separated).enumerate() {
        if sources.len() != want {
            return Err(MetricsError::SourceCount {
                example: i,
                got: sources.len(),
                want,
            });
        }
        let best = best_assignment_si_snr(ex, sources)?;
        let baseline =
            (si_snr(&ex.x1, &ex.mom)? + si_snr(&ex.x2, &ex.mom)?) / 2.0;
        total += best - baseline;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassAp {
    pub name: String,
    pub n_positives: usize,
    pub ap: Option<f64>,
}

/// The four classification metrics plus the per-class table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub cmap: f64,
    pub lwlrap: f64,
    pub d_prime: f64,
    pub top1: f64,
    pub top1_excluded: usize,
    pub min_count: usize,
    pub per_class: Vec<ClassAp>,
}

impl EvalReport {
    pub fn from_matrix(eval: &EvalMatrix, min_count: usize) -> Result<Self, MetricsError> {
        let per_class = per_class_ap(eval)
            .into_iter()
            .zip(eval.class_names())
            .map(|((n_positives, ap), name)| ClassAp {
                name: name.clone(),
                n_positives,
                ap,
            })
            .collect();
        let (top1, top1_excluded) = top1_precision(eval)?;
        Ok(Self {
            cmap: cmap(eval, min_count)?,
            lwlrap: lwlrap(eval)?,
            d_prime: d_prime(eval)?,
            top1,
            top1_excluded,
            min_count,
            per_class,
        })
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Independent quadratic-time reference implementations used by tests.

    use super::EvalMatrix;

    /// Rank of item `j` (1-based): one plus the number of items strictly
    /// ahead of it under (score desc, index asc).
    fn rank_of(scores: &[f64], j: usize) -> usize {
        1 + (0..scores.len())
            .filter(|&k| scores[k] > scores[j] || (scores[k] == scores[j] && k < j))
            .count()
    }

    pub fn ap(scores: &[f64], labels: &[bool]) -> f64 {
        let positives: Vec<usize> = (0..labels.len()).filter(|&j| labels[j]).collect();
        let mut total = 0.0;
        for &j in &positives {
            let r = rank_of(scores, j);
            let hits = positives.iter().filter(|&&k| rank_of(scores, k) <= r).count();
            total += hits as f64 / r as f64;
        }
        total / positives.len() as f64
    }

    pub fn cmap(eval: &EvalMatrix, min_count: usize) -> Option<f64> {
        let mut aps = Vec::new();
        for c in 0..eval.n_classes() {
            let scores: Vec<f64> = (0..eval.n_examples()).map(|i| eval.score(i, c)).collect();
            let labels: Vec<bool> = (0..eval.n_examples()).map(|i| eval.label(i, c)).collect();
            if labels.iter().filter(|&&l| l).count() >= min_count {
                aps.push(ap(&scores, &labels));
            }
        }
        if aps.is_empty() {
            None
        } else {
            Some(aps.iter().sum::<f64>() / aps.len() as f64)
        }
    }

    pub fn lwlrap(eval: &EvalMatrix) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for i in 0..eval.n_examples() {
            let scores: Vec<f64> = (0..eval.n_classes()).map(|c| eval.score(i, c)).collect();
            let labels: Vec<bool> = (0..eval.n_classes()).map(|c| eval.label(i, c)).collect();
            for c in 0..eval.n_classes() {
                if !labels[c] {
                    continue;
                }
                let r = rank_of(&scores, c);
                let hits = (0..eval.n_classes())
                    .filter(|&k| labels[k] && rank_of(&scores, k) <= r)
                    .count();
                total += hits as f64 / r as f64;
                n += 1;
            }
        }
        total / n as f64
    }

    /// Pairwise Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg).
    pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0usize;
        for p in 0..scores.len() {
            if !labels[p] {
                continue;
            }
            for q in 0..scores.len() {
                if labels[q] {
                    continue;
                }
                pairs += 1;
                if scores[p] > scores[q] {
                    wins += 1.0;
                } else if scores[p] == scores[q] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs as f64
    }

    pub fn pooled_auc(eval: &EvalMatrix) -> f64 {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..eval.n_examples() {
            for c in 0..eval.n_classes() {
                scores.push(eval.score(i, c));
                labels.push(eval.label(i, c));
            }
        }
        auc(&scores, &labels)
    }

    pub fn top1(eval: &EvalMatrix) -> Option<f64> {
        let mut hits = 0usize;
        let mut n = 0usize;
        for i in 0..eval.n_examples() {
            let labels: Vec<bool> = (0..eval.n_classes()).map(|c| eval.label(i, c)).collect();
            if !labels.iter().any(|&l| l) {
                continue;
            }
            let mut best = 0;
            for c in 0..eval.n_classes() {
                if eval.score(i, c) > eval.score(i, best) {
                    best = c;
                }
            }
            if labels[best] {
                hits += 1;
            }
            n += 1;
        }
        if n == 0 {
            None
        } else {
            Some(hits as f64 / n as f64)
        }
    }
}
