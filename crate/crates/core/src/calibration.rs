//! Same-concept similarity cutoffs.
//!
//! A cutoff separates "same concept" similarities (pairs of references of one
//! concept) from "different concept" similarities (pairs across concepts). The
//! classifier is `same iff similarity >= cutoff`.

use serde::{Deserialize, Serialize};

use crate::embeddings::{pairwise_similarity, EmbeddingMatrix, SIMILARITY_SLACK};
use crate::error::{Error, Result};

/// Similarities of same-concept and different-concept reference pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilaritySample {
    pub same_pairs: Vec<f64>,
    pub diff_pairs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMethod {
    F1max,
    Midpoint,
}

impl std::str::FromStr for ThresholdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1max" => Ok(ThresholdMethod::F1max),
            "midpoint" => Ok(ThresholdMethod::Midpoint),
            other => Err(Error::manifest(format!(
                "unknown threshold method `{other}` (expected f1max or midpoint)"
            ))),
        }
    }
}

/// A cutoff plus the statistics it achieves on the sample it was fitted on.
///
/// Serialized as the calibration report
/// `{method, value, tpr, fpr, f1, n_same, n_diff}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedThreshold {
    pub method: ThresholdMethod,
    pub value: f64,
    /// NaN (`null` in JSON) for a [`fixed`](Self::fixed) cutoff.
    #[serde(with = "nan_as_null")]
    pub tpr: f64,
    #[serde(with = "nan_as_null")]
    pub fpr: f64,
    #[serde(with = "nan_as_null")]
    pub f1: f64,
    pub n_same: usize,
    pub n_diff: usize,
}

impl CalibratedThreshold {
    /// A bare cutoff with no calibration sample behind it, e.g. a value taken
    /// from a config file.
    pub fn fixed(value: f64) -> Self {
        CalibratedThreshold {
            method: ThresholdMethod::Midpoint,
            value,
            tpr: f64::NAN,
            fpr: f64::NAN,
            f1: f64::NAN,
            n_same: 0,
            n_diff: 0,
        }
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierStats {
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
}

impl PairSimilaritySample {
    pub fn new(same_pairs: Vec<f64>, diff_pairs: Vec<f64>) -> Result<Self> {
        let s = PairSimilaritySample { same_pairs, diff_pairs };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.same_pairs.is_empty() || self.diff_pairs.is_empty() {
            return Err(Error::domain(
                "calibration needs at least one same-concept and one different-concept similarity",
            ));
        }
        let bad = self
            .same_pairs
            .iter()
            .chain(&self.diff_pairs)
            .find(|v| !v.is_finite() || v.abs() > 1.0 + SIMILARITY_SLACK);
        match bad {
            Some(v) => Err(Error::domain(format!("similarity {v} outside [-1, 1]"))),
            None => Ok(()),
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Per-concept mean within-set similarity and per-pair mean cross-set
/// similarity.
///
/// `same_pairs[c]` averages the `i < j` pairs of concept `c`'s references;
/// concepts with a single reference contribute no same value.
/// `diff_pairs` holds one mean for every concept pair `a < b`, in
/// lexicographic `(a, b)` order.
pub fn collect_pair_similarities(reference_sets: &[EmbeddingMatrix]) -> Result<PairSimilaritySample> {
    if reference_sets.len() < 2 {
        return Err(Error::domain(format!(
            "need at least 2 concepts to calibrate, got {}",
            reference_sets.len()
        )));
    }
    if let Some(i) = reference_sets.iter().position(EmbeddingMatrix::is_empty) {
        return Err(Error::domain(format!("reference set {i} is empty")));
    }

    let mut same_pairs = Vec::new();
    for set in reference_sets.iter().filter(|s| s.len() >= 2) {
        let sim = pairwise_similarity(set, set)?;
        let n = set.len();
        same_pairs.push(mean(
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| sim.get(i, j)),
        ));
    }

    let mut diff_pairs = Vec::new();
    for (a, set_a) in reference_sets.iter().enumerate() {
        for set_b in &reference_sets[a + 1..] {
            let sim = pairwise_similarity(set_a, set_b)?;
            diff_pairs.push(mean(sim.as_slice().iter().copied()));
        }
    }
    PairSimilaritySample::new(same_pairs, diff_pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Confusion {
    fn f1(self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        (2 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

fn confusion(sample: &PairSimilaritySample, threshold: f64) -> Confusion {
    let tp = sample.same_pairs.iter().filter(|&&s| s >= threshold).count();
    let fp = sample.diff_pairs.iter().filter(|&&s| s >= threshold).count();
    Confusion {
        tp,
        fp,
        fn_: sample.same_pairs.len() - tp,
    }
}

fn stats_of(c: Confusion, n_same: usize, n_diff: usize) -> ClassifierStats {
    ClassifierStats {
        tpr: c.tp as f64 / n_same as f64,
        fpr: c.fp as f64 / n_diff as f64,
        f1: c.f1(),
    }
}

/// True/false positive rates and F1 of `same iff similarity >= threshold`.
///
/// F1 is `2 TP / (2 TP + FP + FN)`, which equals the harmonic mean of
/// precision and recall and is 0 when nothing is predicted positive.
pub fn classifier_stats(sample: &PairSimilaritySample, threshold: f64) -> Result<ClassifierStats> {
    sample.validate()?;
    Ok(stats_of(
        confusion(sample, threshold),
        sample.same_pairs.len(),
        sample.diff_pairs.len(),
    ))
}

/// Cutoff maximizing F1 over the midpoints of consecutive distinct observed
/// values.
///
/// The "everything positive" sentinel is realized as the smallest observed
/// value (with `>=` it classifies every pair as same); the "nothing positive"
/// sentinel always scores F1 = 0 and so never wins. Ties go to the lower
/// cutoff.
pub fn f1_max_threshold(sample: &PairSimilaritySample) -> Result<CalibratedThreshold> {
    sample.validate()?;
    let (n_same, n_diff) = (sample.same_pairs.len(), sample.diff_pairs.len());

    // (value, is_same), sorted ascending; sweep the cutoff upward.
    let mut all: Vec<(f64, bool)> = sample
        .same_pairs
        .iter()
        .map(|&v| (v, true))
        .chain(sample.diff_pairs.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Cutoff at the minimum: everything is positive.
    let mut c = Confusion {
        tp: n_same,
        fp: n_diff,
        fn_: 0,
    };
    let mut best = (all[0].0, c, c.f1());

    let mut i = 0;
    while i < all.len() {
        // Move the whole run of equal values below the cutoff.
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                c.tp -= 1;
                c.fn_ += 1;
            } else {
                c.fp -= 1;
            }
            i += 1;
        }
        let Some(&(next, _)) = all.get(i) else { break };
        let f1 = c.f1();
        if f1 > best.2 {
            best = ((v + next) / 2.0, c, f1);
        }
    }

    let stats = stats_of(best.1, n_same, n_diff);
    Ok(CalibratedThreshold {
        method: ThresholdMethod::F1max,
        value: best.0,
        tpr: stats.tpr,
        fpr: stats.fpr,
        f1: stats.f1,
        n_same,
        n_diff,
    })
}

/// `(min(same) + max(diff)) / 2` for a perfectly separable sample.
pub fn midpoint_threshold(sample: &PairSimilaritySample) -> Result<CalibratedThreshold> {
    sample.validate()?;
    let min_same = sample.same_pairs.iter().copied().fold(f64::INFINITY, f64::min);
    let max_diff = sample.diff_pairs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min_same <= max_diff {
        return Err(Error::domain(format!(
            "sample is not separable (min same {min_same} <= max diff {max_diff}); use the f1max method"
        )));
    }
    let value = (min_same + max_diff) / 2.0;
    let stats = classifier_stats(sample, value)?;
    Ok(CalibratedThreshold {
        method: ThresholdMethod::Midpoint,
        value,
        tpr: stats.tpr,
        fpr: stats.fpr,
        f1: stats.f1,
        n_same: sample.same_pairs.len(),
        n_diff: sample.diff_pairs.len(),
    })
}

pub fn fit_threshold(sample: &PairSimilaritySample, method: ThresholdMethod) -> Result<CalibratedThreshold> {
    match method {
        ThresholdMethod::F1max => f1_max_threshold(sample),
        ThresholdMethod::Midpoint => midpoint_threshold(sample),
    }
}
