//! Candidate filtering against reference sets and concept-frequency
//! estimation.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedThreshold;
use crate::embeddings::{cosine_similarity, pairwise_similarity, EmbeddingMatrix};
use crate::error::{Error, Result};

/// Candidate count above which only a sample of candidates is filtered and
/// the positive ratio is extrapolated to the full caption count.
pub const DEFAULT_SAMPLE_CAP: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Faces,
    Art,
    Synthetic,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Faces => "faces",
            Domain::Art => "art",
            Domain::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faces" => Ok(Domain::Faces),
            "art" => Ok(Domain::Art),
            "synthetic" => Ok(Domain::Synthetic),
            other => Err(Error::manifest(format!("unknown domain `{other}`"))),
        }
    }
}

/// A concept's counts at every stage, from caption matches to the final
/// frequency estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub concept_id: String,
    pub name: String,
    pub domain: Domain,
    /// Upper bound from caption search.
    pub caption_count: u64,
    /// Candidates whose embeddings were actually obtained.
    pub retrieved_count: u64,
    /// Candidates that passed the filters.
    pub positive_count: u64,
    pub estimated_frequency: f64,
    pub aliases: Vec<String>,
}

impl ConceptRecord {
    pub fn check(&self) -> Result<()> {
        if self.positive_count > self.retrieved_count || self.retrieved_count > self.caption_count {
            return Err(Error::domain(format!(
                "concept `{}`: counts must satisfy positive ({}) <= retrieved ({}) <= caption ({})",
                self.concept_id, self.positive_count, self.retrieved_count, self.caption_count
            )));
        }
        if self.estimated_frequency.is_nan() || self.estimated_frequency < 0.0 {
            return Err(Error::domain(format!(
                "concept `{}`: negative or NaN frequency",
                self.concept_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    /// Stage 1 of the art filter: the image is not artwork.
    NonArt,
    /// No reference is similar enough.
    BelowThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSimilarity {
    pub id: String,
    pub max_sim: f64,
}

/// Outcome of filtering one concept's candidates. All lists follow the
/// candidate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub kept_ids: Vec<String>,
    pub rejected: Vec<Rejection>,
    pub per_candidate_max_sim: Vec<CandidateSimilarity>,
}

impl FilterResult {
    pub fn rejected_ids(&self) -> impl Iterator<Item = &str> {
        self.rejected.iter().map(|r| r.id.as_str())
    }

    pub fn max_sim(&self, id: &str) -> Option<f64> {
        self.per_candidate_max_sim
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.max_sim)
    }
}

/// Per-candidate maximum similarity to any reference.
fn max_sims(candidates: &EmbeddingMatrix, refs: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if refs.is_empty() {
        return Err(Error::domain("empty reference set"));
    }
    let sim = pairwise_similarity(candidates, refs)?;
    Ok((0..sim.rows())
        .map(|i| sim.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Keeps a candidate iff its best reference similarity is `>= threshold`.
pub fn filter_candidates(
    candidates: &EmbeddingMatrix,
    refs: &EmbeddingMatrix,
    threshold: &CalibratedThreshold,
) -> Result<FilterResult> {
    let sims = max_sims(candidates, refs)?;
    let mut out = FilterResult {
        kept_ids: Vec::new(),
        rejected: Vec::new(),
        per_candidate_max_sim: Vec::with_capacity(sims.len()),
    };
    for (id, &s) in candidates.ids().iter().zip(&sims) {
        if s >= threshold.value {
            out.kept_ids.push(id.clone());
        } else {
            out.rejected.push(Rejection {
                id: id.clone(),
                reason: RejectReason::BelowThreshold,
            });
        }
        out.per_candidate_max_sim.push(CandidateSimilarity {
            id: id.clone(),
            max_sim: s,
        });
    }
    Ok(out)
}

/// Source of the stage-1 "is this artwork" scores.
#[derive(Debug, Clone, PartialEq)]
pub enum ArtnessScores {
    /// A direction in the candidates' own embedding space (e.g. the text
    /// embedding of "an artwork"); the score is the cosine to it.
    Axis(Vec<f32>),
    /// Scores computed in another embedding space, keyed by candidate id.
    Precomputed(HashMap<String, f64>),
}

/// Two-stage art filter: drop non-art images, then apply the style cutoff.
///
/// A candidate is kept iff its artness score is `>= artness_threshold` and
/// its best style-reference similarity is `>= style_threshold`. Stage-1
/// failures are rejected as [`RejectReason::NonArt`] whatever their stage-2
/// similarity, which is still recorded.
pub fn two_stage_art_filter(
    candidates: &EmbeddingMatrix,
    artness: &ArtnessScores,
    artness_threshold: f64,
    style_refs: &EmbeddingMatrix,
    style_threshold: &CalibratedThreshold,
) -> Result<FilterResult> {
    let stage1: Vec<f64> = match artness {
        ArtnessScores::Axis(axis) => candidates
            .rows()
            .map(|r| cosine_similarity(r, axis.as_slice()).map(f64::from))
            .collect::<Result<_>>()?,
        ArtnessScores::Precomputed(map) => candidates
            .ids()
            .iter()
            .map(|id| {
                map.get(id)
                    .copied()
                    .ok_or_else(|| Error::format(format!("no artness score for candidate `{id}`")))
            })
            .collect::<Result<_>>()?,
    };
    let mut out = filter_candidates(candidates, style_refs, style_threshold)?;
    let non_art: Vec<bool> = stage1.iter().map(|&s| s < artness_threshold).collect();

    let mut kept = Vec::with_capacity(out.kept_ids.len());
    let mut rejected = Vec::with_capacity(out.rejected.len());
    for (i, c) in out.per_candidate_max_sim.iter().enumerate() {
        if non_art[i] {
            rejected.push(Rejection {
                id: c.id.clone(),
                reason: RejectReason::NonArt,
            });
        } else if c.max_sim >= style_threshold.value {
            kept.push(c.id.clone());
        } else {
            rejected.push(Rejection {
                id: c.id.clone(),
                reason: RejectReason::BelowThreshold,
            });
        }
    }
    out.kept_ids = kept;
    out.rejected = rejected;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEstimate {
    pub value: f64,
    /// Whether the ratio was extrapolated from a sample.
    pub sampled: bool,
    /// Sampled regime but nothing was retrieved; the estimate is 0.
    pub nothing_retrieved: bool,
}

/// Concept frequency from filter counts.
///
/// Above `sample_cap` caption matches only a sample was filtered, so the
/// positive ratio over the retrieved candidates is scaled up to the caption
/// count. At or below the cap every candidate was filtered and the positive
/// count is the frequency.
pub fn estimate_frequency(
    caption_count: u64,
    retrieved_count: u64,
    positive_count: u64,
    sample_cap: u64,
) -> Result<FrequencyEstimate> {
    if positive_count > retrieved_count {
        return Err(Error::domain(format!(
            "positive count {positive_count} exceeds retrieved count {retrieved_count}"
        )));
    }
    if caption_count <= sample_cap {
        return Ok(FrequencyEstimate {
            value: positive_count as f64,
            sampled: false,
            nothing_retrieved: false,
        });
    }
    if retrieved_count == 0 {
        log::warn!("sampled regime with zero retrieved candidates; frequency set to 0");
        return Ok(FrequencyEstimate {
            value: 0.0,
            sampled: true,
            nothing_retrieved: true,
        });
    }
    Ok(FrequencyEstimate {
        value: caption_count as f64 * positive_count as f64 / retrieved_count as f64,
        sampled: true,
        nothing_retrieved: false,
    })
}

/// Combines records of one concept known under several names.
///
/// Counts and frequencies are summed; the first record supplies id and name
/// and every other id (and its own aliases) is listed in `aliases`.
pub fn merge_aliases(records: &[ConceptRecord]) -> Result<ConceptRecord> {
    let (first, rest) = records
        .split_first()
        .ok_or_else(|| Error::domain("no records to merge"))?;
    if let Some(r) = rest.iter().find(|r| r.domain != first.domain) {
        return Err(Error::domain(format!(
            "cannot merge `{}` ({}) into `{}` ({})",
            r.concept_id,
            r.domain.as_str(),
            first.concept_id,
            first.domain.as_str()
        )));
    }
    let mut merged = first.clone();
    for r in rest {
        merged.caption_count += r.caption_count;
        merged.retrieved_count += r.retrieved_count;
        merged.positive_count += r.positive_count;
        merged.estimated_frequency += r.estimated_frequency;
        merged.aliases.push(r.concept_id.clone());
        merged.aliases.extend(r.aliases.iter().cloned());
    }
    Ok(merged)
}

const CONCEPT_HEADER: [&str; 8] = [
    "concept_id",
    "name",
    "domain",
    "caption_count",
    "retrieved_count",
    "positive_count",
    "estimated_frequency",
    "aliases",
];

/// Writes the concept table CSV. Aliases are `;`-joined.
pub fn write_concept_table<W: Write>(records: &[ConceptRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CONCEPT_HEADER)?;
    for r in records {
        w.write_record([
            r.concept_id.clone(),
            r.name.clone(),
            r.domain.as_str().to_owned(),
            r.caption_count.to_string(),
            r.retrieved_count.to_string(),
            r.positive_count.to_string(),
            r.estimated_frequency.to_string(),
            r.aliases.join(";"),
        ])?;
    }
    w.flush().map_err(|e| Error::format(format!("csv: {e}")))?;
    Ok(())
}

pub fn read_concept_table<R: Read>(input: R) -> Result<Vec<ConceptRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(CONCEPT_HEADER) {
        return Err(Error::format(format!("unexpected concept table header {header:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<u64> {
            field(i)
                .parse()
                .map_err(|_| Error::format(format!("row {}: bad {} `{}`", line + 1, CONCEPT_HEADER[i], field(i))))
        };
        let record = ConceptRecord {
            concept_id: field(0).to_owned(),
            name: field(1).to_owned(),
            domain: field(2)
                .parse()
                .map_err(|_| Error::format(format!("row {}: bad domain `{}`", line + 1, field(2))))?,
            caption_count: num(3)?,
            retrieved_count: num(4)?,
            positive_count: num(5)?,
            estimated_frequency: field(6)
                .parse()
                .map_err(|_| Error::format(format!("row {}: bad estimated_frequency", line + 1)))?,
            aliases: field(7)
                .split(';')
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect(),
        };
        record.check()?;
        out.push(record);
    }
    Ok(out)
}
