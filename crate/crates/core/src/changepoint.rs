//! Penalized mean-shift segmentation of the frequency-sorted score series.
//!
//! The objective is `sum(segment costs) + penalty * (#change points)` with the
//! L2 cost `sum((y_i - mean)^2)` per segment. [`pelt_detect`] solves it with
//! PELT; [`optimal_partition`] is the unpruned O(n^2) recursion and
//! [`brute_force_segment`] enumerates every segmentation for short series.
//! The frequency at the first change point is the imitation threshold.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound of [`default_penalty`].
pub const PENALTY_FLOOR: f64 = 1e-12;
/// Longest series [`brute_force_segment`] enumerates exhaustively.
pub const EXHAUSTIVE_MAX_LEN: usize = 20;
/// Longest series [`brute_force_segment`] accepts at all.
pub const DP_MAX_LEN: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub concept_id: String,
    pub frequency: f64,
    pub score: f64,
}

/// Points sorted by ascending frequency, ties by concept id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    points: Vec<SeriesPoint>,
}

fn point_order(a: &SeriesPoint, b: &SeriesPoint) -> Ordering {
    a.frequency
        .total_cmp(&b.frequency)
        .then_with(|| a.concept_id.cmp(&b.concept_id))
}

impl ScoreSeries {
    /// Sorts `points` and checks that every value is finite.
    pub fn new(mut points: Vec<SeriesPoint>) -> Result<Self> {
        if let Some(p) = points
            .iter()
            .find(|p| !p.score.is_finite() || !p.frequency.is_finite() || p.frequency < 0.0)
        {
            return Err(Error::domain(format!(
                "concept `{}` has an invalid point (frequency {}, score {})",
                p.concept_id, p.frequency, p.score
            )));
        }
        points.sort_by(point_order);
        Ok(ScoreSeries { points })
    }

    /// Series of bare scores; frequencies are the positions `0, 1, ...`.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        Self::new(
            scores
                .iter()
                .enumerate()
                .map(|(i, &score)| SeriesPoint {
                    concept_id: format!("{i:08}"),
                    frequency: i as f64,
                    score,
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[SeriesPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.score).collect()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.frequency).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    L2Meanshift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePointResult {
    /// First index of every segment after the first, strictly increasing.
    pub change_indices: Vec<usize>,
    pub segment_means: Vec<f64>,
    /// Frequency at the first change index, if any.
    pub threshold_frequency: Option<f64>,
    pub penalty: f64,
    pub cost_model: CostModel,
    /// Length of the series the result was computed on.
    pub n: usize,
}

impl ChangePointResult {
    fn build(series: &ScoreSeries, change_indices: Vec<usize>, penalty: f64) -> Self {
        let scores = series.scores();
        let segment_means = segment_bounds(&change_indices, scores.len())
            .map(|(a, b)| scores[a..b].iter().sum::<f64>() / (b - a) as f64)
            .collect();
        let threshold_frequency = change_indices.first().map(|&i| series.points()[i].frequency);
        ChangePointResult {
            change_indices,
            segment_means,
            threshold_frequency,
            penalty,
            cost_model: CostModel::L2Meanshift,
            n: scores.len(),
        }
    }

    /// Result for given change indices, e.g. read back from a detection
    /// report. Indices must be strictly increasing within `(0, n)`.
    pub fn from_changes(series: &ScoreSeries, change_indices: Vec<usize>, penalty: f64) -> Result<Self> {
        let n = series.len();
        let mut prev = 0;
        for &i in &change_indices {
            if i <= prev || i >= n {
                return Err(Error::domain(format!(
                    "change indices {change_indices:?} are not strictly increasing within (0, {n})"
                )));
            }
            prev = i;
        }
        Ok(Self::build(series, change_indices, penalty))
    }

    /// `[start, end)` of every segment.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        segment_bounds(&self.change_indices, self.n)
    }
}

fn segment_bounds(cps: &[usize], n: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let starts = std::iter::once(0).chain(cps.iter().copied());
    let ends = cps.iter().copied().chain(std::iter::once(n));
    starts.zip(ends)
}

/// Segment cost from prefix sums of the mean-centred series.
///
/// Centring keeps the `S2 - S1^2 / n` form from cancelling badly when the
/// scores sit far from zero.
struct L2Cost {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl L2Cost {
    fn new(y: &[f64]) -> Self {
        let mu = y.iter().sum::<f64>() / y.len() as f64;
        let mut s1 = Vec::with_capacity(y.len() + 1);
        let mut s2 = Vec::with_capacity(y.len() + 1);
        let (mut a, mut b) = (0.0, 0.0);
        s1.push(0.0);
        s2.push(0.0);
        for &v in y {
            let c = v - mu;
            a += c;
            b += c * c;
            s1.push(a);
            s2.push(b);
        }
        L2Cost { s1, s2 }
    }

    /// Cost of `y[s..t]`.
    #[inline]
    fn cost(&self, s: usize, t: usize) -> f64 {
        let n = (t - s) as f64;
        let a = self.s1[t] - self.s1[s];
        let b = self.s2[t] - self.s2[s];
        (b - a * a / n).max(0.0)
    }
}

fn check(series: &ScoreSeries, penalty: f64) -> Result<()> {
    if series.len() < 2 {
        return Err(Error::domain(format!(
            "change detection needs at least 2 points, got {}",
            series.len()
        )));
    }
    if !(penalty.is_finite() && penalty > 0.0) {
        return Err(Error::domain(format!(
            "penalty must be positive and finite, got {penalty}"
        )));
    }
    Ok(())
}

fn backtrack(last: &[usize]) -> Vec<usize> {
    let mut cps = Vec::new();
    let mut t = last.len() - 1;
    while t > 0 {
        let s = last[t];
        if s > 0 {
            cps.push(s);
        }
        t = s;
    }
    cps.reverse();
    cps
}

/// Optimal segmentation by PELT (pruning constant 0).
///
/// Candidates are scanned in ascending order and only a strictly better
/// value replaces the incumbent, so ties resolve to the earliest last change,
/// exactly as in [`optimal_partition`].
pub fn pelt_detect(series: &ScoreSeries, penalty: f64) -> Result<ChangePointResult> {
    check(series, penalty)?;
    let y = series.scores();
    let n = y.len();
    let cost = L2Cost::new(&y);

    let mut f = vec![0.0; n + 1];
    let mut last = vec![0usize; n + 1];
    f[0] = -penalty;
    let mut candidates: Vec<usize> = vec![0];
    let mut reach = Vec::with_capacity(n);

    for t in 1..=n {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        reach.clear();
        for &s in &candidates {
            let r = f[s] + cost.cost(s, t);
            reach.push(r);
            let v = r + penalty;
            if v < best {
                best = v;
                arg = s;
            }
        }
        f[t] = best;
        last[t] = arg;

        // Drop s once F(s) + C(s, t) exceeds F(t): it can never win again.
        // The slack only makes pruning more conservative against rounding.
        let bound = best + 1e-9 * (1.0 + best.abs());
        let mut k = 0;
        candidates.retain(|_| {
            let keep = reach[k] <= bound;
            k += 1;
            keep
        });
        candidates.push(t);
    }
    Ok(ChangePointResult::build(series, backtrack(&last), penalty))
}

/// Unpruned optimal-partition recursion, O(n^2). Same cost arithmetic and
/// tie rule as [`pelt_detect`].
pub fn optimal_partition(series: &ScoreSeries, penalty: f64) -> Result<ChangePointResult> {
    check(series, penalty)?;
    if series.len() > DP_MAX_LEN {
        return Err(Error::domain(format!(
            "optimal partition is limited to {DP_MAX_LEN} points, got {}",
            series.len()
        )));
    }
    let y = series.scores();
    let n = y.len();
    let cost = L2Cost::new(&y);
    let mut f = vec![0.0; n + 1];
    let mut last = vec![0usize; n + 1];
    f[0] = -penalty;
    for t in 1..=n {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for s in 0..t {
            let v = f[s] + cost.cost(s, t) + penalty;
            if v < best {
                best = v;
                arg = s;
            }
        }
        f[t] = best;
        last[t] = arg;
    }
    Ok(ChangePointResult::build(series, backtrack(&last), penalty))
}

fn direct_segment_cost(y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - mean) * (v - mean)).sum()
}

/// Penalized objective of an arbitrary segmentation, computed directly from
/// the segment means.
pub fn segmentation_cost(scores: &[f64], change_indices: &[usize], penalty: f64) -> f64 {
    segment_bounds(change_indices, scores.len())
        .map(|(a, b)| direct_segment_cost(&scores[a..b]))
        .sum::<f64>()
        + penalty * change_indices.len() as f64
}

/// Globally optimal segmentation for verification.
///
/// Series of at most [`EXHAUSTIVE_MAX_LEN`] points are solved by enumerating
/// all `2^(n-1)` segmentations with directly computed costs; longer ones (up
/// to [`DP_MAX_LEN`]) fall back to [`optimal_partition`].
pub fn brute_force_segment(series: &ScoreSeries, penalty: f64) -> Result<ChangePointResult> {
    check(series, penalty)?;
    let n = series.len();
    if n > EXHAUSTIVE_MAX_LEN {
        return optimal_partition(series, penalty);
    }
    let y = series.scores();
    let mut best = (f64::INFINITY, Vec::new());
    let mut cps = Vec::with_capacity(n);
    for mask in 0u32..(1 << (n - 1)) {
        cps.clear();
        cps.extend((1..n).filter(|&i| mask & (1 << (i - 1)) != 0));
        let c = segmentation_cost(&y, &cps, penalty);
        if c < best.0 {
            best = (c, cps.clone());
        }
    }
    Ok(ChangePointResult::build(series, best.1, penalty))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// BIC-style penalty `2 sigma^2 ln n` with a robust noise estimate.
///
/// `sigma` is the median absolute deviation of the first differences divided
/// by `0.6745 * sqrt(2)`; differencing removes the level shifts so only the
/// noise remains. Floored at [`PENALTY_FLOOR`].
pub fn default_penalty(series: &ScoreSeries) -> Result<f64> {
    let n = series.len();
    if n < 4 {
        return Err(Error::domain(format!(
            "default penalty needs at least 4 points, got {n}; pass an explicit penalty"
        )));
    }
    let y = series.scores();
    let mut diffs: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
    let med = median(&mut diffs);
    let mut dev: Vec<f64> = diffs.iter().map(|d| (d - med).abs()).collect();
    let mad = median(&mut dev);
    let sigma = mad / (0.6745 * std::f64::consts::SQRT_2);
    Ok((2.0 * sigma * sigma * (n as f64).ln()).max(PENALTY_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdOutcome {
    Threshold(f64),
    NoThreshold,
}

impl ThresholdOutcome {
    pub fn frequency(self) -> Option<f64> {
        match self {
            ThresholdOutcome::Threshold(f) => Some(f),
            ThresholdOutcome::NoThreshold => None,
        }
    }
}

/// Frequency of the concept at the first change point.
pub fn imitation_threshold(series: &ScoreSeries, result: &ChangePointResult) -> Result<ThresholdOutcome> {
    if result.n != series.len() || result.change_indices.iter().any(|&i| i == 0 || i >= series.len()) {
        return Err(Error::domain(format!(
            "change-point result for {} points does not match a series of {}",
            result.n,
            series.len()
        )));
    }
    Ok(match result.change_indices.first() {
        Some(&i) => ThresholdOutcome::Threshold(series.points()[i].frequency),
        None => ThresholdOutcome::NoThreshold,
    })
}

/// The detection report written as `detection.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub penalty: f64,
    pub change_indices: Vec<usize>,
    pub change_frequencies: Vec<f64>,
    pub segment_means: Vec<f64>,
    pub threshold_frequency: Option<f64>,
}

impl DetectionReport {
    pub fn new(series: &ScoreSeries, result: &ChangePointResult) -> Self {
        DetectionReport {
            penalty: result.penalty,
            change_indices: result.change_indices.clone(),
            change_frequencies: result
                .change_indices
                .iter()
                .map(|&i| series.points()[i].frequency)
                .collect(),
            segment_means: result.segment_means.clone(),
            threshold_frequency: result.threshold_frequency,
        }
    }
}
