//! Validation statistics around the threshold estimate: isotonic trend,
//! rank correlation with human ratings, threshold agreement, the
//! distribution-invariance check, caption miss rates and face-embedder
//! audit rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::changepoint::ScoreSeries;
use crate::embeddings::{pairwise_similarity, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::scoring::ImitationRecord;

/// Random-sample size behind the caption miss-rate table.
pub const MISS_RATE_SAMPLE_SIZE: u64 = 100_000;

/// Least-squares non-decreasing fit by pool-adjacent-violators.
pub fn isotonic_fit(series: &ScoreSeries) -> Result<Vec<f64>> {
    isotonic_fit_values(&series.scores())
}

/// [`isotonic_fit`] over raw values in series order.
pub fn isotonic_fit_values(y: &[f64]) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::domain("isotonic fit of an empty series"));
    }
    // Blocks as (sum, count); merge backwards while the order is violated.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        let (mut sum, mut count) = (v, 1usize);
        while let Some(&(ps, pc)) = blocks.last() {
            if ps / pc as f64 > sum / count as f64 {
                sum += ps;
                count += pc;
                blocks.pop();
            } else {
                break;
            }
        }
        blocks.push((sum, count));
    }
    let mut out = Vec::with_capacity(y.len());
    for (sum, count) in blocks {
        out.extend(std::iter::repeat_n(sum / count as f64, count));
    }
    Ok(out)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::domain("correlation is undefined for a constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with mid-ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::domain(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::domain("spearman needs at least 2 observations"));
    }
    pearson(&mid_ranks(x), &mid_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRatings {
    pub ratings: BTreeMap<String, Vec<f64>>,
    /// Participants whose ratings were all equal (mapped to zeros).
    pub constant_raters: Vec<String>,
}

/// Per-participant z-scores (population standard deviation).
pub fn normalize_ratings(per_participant: &BTreeMap<String, Vec<f64>>) -> Result<NormalizedRatings> {
    if per_participant.is_empty() {
        return Err(Error::domain("no participants"));
    }
    let mut ratings = BTreeMap::new();
    let mut constant_raters = Vec::new();
    for (who, xs) in per_participant {
        if xs.len() < 2 {
            return Err(Error::domain(format!("participant `{who}` has fewer than 2 ratings")));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let z = if sd == 0.0 {
            log::warn!("participant `{who}` gave constant ratings; normalized to zeros");
            constant_raters.push(who.clone());
            vec![0.0; xs.len()]
        } else {
            xs.iter().map(|x| (x - mean) / sd).collect()
        };
        ratings.insert(who.clone(), z);
    }
    Ok(NormalizedRatings {
        ratings,
        constant_raters,
    })
}

/// Human ratings of at least this value count as "imitated".
pub const RATING_CUTOFF: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementInput {
    pub human_binary: Vec<u8>,
    pub predicted_binary: Vec<u8>,
}

impl AgreementInput {
    /// Binarizes ratings (`>= 3`) and frequencies (`>= threshold`), aligned
    /// by position.
    pub fn from_ratings(ratings: &[f64], frequencies: &[f64], threshold: f64) -> Result<Self> {
        if ratings.len() != frequencies.len() {
            return Err(Error::domain("ratings and frequencies differ in length"));
        }
        Ok(AgreementInput {
            human_binary: ratings.iter().map(|&r| u8::from(r >= RATING_CUTOFF)).collect(),
            predicted_binary: frequencies.iter().map(|&f| u8::from(f >= threshold)).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgreementMode {
    /// Fraction of positions where the labels are equal.
    #[default]
    Match,
    /// Fraction of positions where both labels are 1.
    DotProduct,
}

pub fn threshold_agreement(input: &AgreementInput, mode: AgreementMode) -> Result<f64> {
    let (h, p) = (&input.human_binary, &input.predicted_binary);
    if h.len() != p.len() {
        return Err(Error::domain(format!("length mismatch: {} vs {}", h.len(), p.len())));
    }
    if h.is_empty() {
        return Err(Error::domain("agreement of empty label sets"));
    }
    if let Some(v) = h.iter().chain(p).find(|&&v| v > 1) {
        return Err(Error::domain(format!("label {v} is not binary")));
    }
    let hits = h
        .iter()
        .zip(p)
        .filter(|(a, b)| match mode {
            AgreementMode::Match => a == b,
            AgreementMode::DotProduct => **a == 1 && **b == 1,
        })
        .count();
    Ok(hits as f64 / h.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvarianceResult {
    pub value: f64,
    pub pairs: usize,
    /// No pair of concepts was close enough in frequency.
    pub empty: bool,
}

/// Mean signed score difference over concept pairs whose frequencies differ
/// by less than `delta`, ordered low to high frequency.
pub fn invariance_check(records: &[ImitationRecord], delta: f64) -> Result<InvarianceResult> {
    if records.len() < 2 {
        return Err(Error::domain("invariance check needs at least 2 records"));
    }
    let mut sorted: Vec<&ImitationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.frequency
            .total_cmp(&b.frequency)
            .then_with(|| a.concept_id.cmp(&b.concept_id))
    });
    let (mut sum, mut pairs) = (0.0, 0usize);
    for (i, lo) in sorted.iter().enumerate() {
        for hi in &sorted[i + 1..] {
            if hi.frequency - lo.frequency >= delta {
                break;
            }
            sum += hi.mean_score - lo.mean_score;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 {
        InvarianceResult {
            value: 0.0,
            pairs: 0,
            empty: true,
        }
    } else {
        InvarianceResult {
            value: sum / pairs as f64,
            pairs,
            empty: false,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissRate {
    pub miss_fraction: f64,
    pub extrapolated_missed: f64,
}

/// Share of a random sample's detections whose caption does not name the
/// concept, and that share projected onto the whole corpus.
pub fn caption_miss_rate(
    detected_total: u64,
    detected_with_mention: u64,
    corpus_size: u64,
    sample_size: u64,
) -> Result<MissRate> {
    if detected_with_mention > detected_total {
        return Err(Error::domain(format!(
            "{detected_with_mention} mentions exceed {detected_total} detections"
        )));
    }
    if sample_size == 0 || detected_total > sample_size || corpus_size < sample_size {
        return Err(Error::domain(format!(
            "inconsistent sizes: {detected_total} detections, sample {sample_size}, corpus {corpus_size}"
        )));
    }
    let miss_fraction = (detected_total - detected_with_mention) as f64 / sample_size as f64;
    Ok(MissRate {
        miss_fraction,
        extrapolated_missed: miss_fraction * corpus_size as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemographicGroup {
    pub group_id: String,
    /// `(person id, that person's reference faces)`.
    pub members: Vec<(String, EmbeddingMatrix)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub group_id: String,
    pub fmr: f64,
    pub tmr: f64,
}

/// False-match and true-match rates of a face embedder, per group.
///
/// TMR averages each member's mean within-person pair similarity; FMR
/// averages each member's mean similarity to every face of the other members.
pub fn fmr_tmr(groups: &[DemographicGroup]) -> Result<Vec<GroupRates>> {
    groups.iter().map(group_rates).collect()
}

fn group_rates(g: &DemographicGroup) -> Result<GroupRates> {
    if g.members.len() < 2 {
        return Err(Error::domain(format!(
            "group `{}` needs at least 2 members for the false-match rate",
            g.group_id
        )));
    }
    if let Some((who, _)) = g.members.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::domain(format!(
            "member `{who}` of group `{}` needs at least 2 faces",
            g.group_id
        )));
    }
    let m = g.members.len() as f64;
    let mut tmr = 0.0;
    let mut fmr = 0.0;
    for (i, (_, faces)) in g.members.iter().enumerate() {
        let own = pairwise_similarity(faces, faces)?;
        let n = faces.len();
        let mut s = 0.0;
        for a in 0..n {
            for b in a + 1..n {
                s += own.get(a, b);
            }
        }
        tmr += s / (n * (n - 1) / 2) as f64;

        let (mut cross, mut count) = (0.0, 0usize);
        for (j, (_, other)) in g.members.iter().enumerate() {
            if i != j {
                let sim = pairwise_similarity(faces, other)?;
                cross += sim.as_slice().iter().sum::<f64>();
                count += sim.as_slice().len();
            }
        }
        fmr += cross / count as f64;
    }
    Ok(GroupRates {
        group_id: g.group_id.clone(),
        fmr: fmr / m,
        tmr: tmr / m,
    })
}

/// One entry of a validation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub name: String,
    pub value: f64,
    pub pass_threshold: f64,
    pub passed: bool,
    pub notes: String,
}
