//! Imitation scores: how similar generated images are to a concept's most
//! relevant training images.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::embeddings::{pairwise_similarity, EmbeddingMatrix, SimilarityScore};
use crate::error::{Error, Result};

/// Number of training images compared against the generated ones.
pub const DEFAULT_TOPK: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt_id: String,
    pub score: f64,
}

/// Per-prompt imitation scores of one concept with their mean and population
/// variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationRecord {
    pub concept_id: String,
    pub per_prompt_scores: Vec<PromptScore>,
    pub mean_score: f64,
    pub variance: f64,
    pub frequency: f64,
}

fn check_inputs(generated: &EmbeddingMatrix, training: &EmbeddingMatrix, k: usize) -> Result<()> {
    if generated.is_empty() {
        return Err(Error::domain("no generated embeddings"));
    }
    if training.is_empty() {
        return Err(Error::domain("no training embeddings"));
    }
    if k == 0 {
        return Err(Error::domain("top-k size must be at least 1"));
    }
    Ok(())
}

/// Indices of the `k` training rows with the highest mean similarity to the
/// generated rows, best first; ties go to the lower index.
pub fn topk_training_selection(
    generated: &EmbeddingMatrix,
    training: &EmbeddingMatrix,
    k: usize,
) -> Result<Vec<usize>> {
    check_inputs(generated, training, k)?;
    let sim = pairwise_similarity(training, generated)?;
    let mut ranked: Vec<(usize, f64)> = (0..training.len())
        .map(|t| (t, sim.row(t).iter().sum::<f64>() / generated.len() as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked.into_iter().map(|(t, _)| t).collect())
}

/// Mean cosine similarity over all (generated, selected training) pairs,
/// where the selection is [`topk_training_selection`].
pub fn imitation_score(generated: &EmbeddingMatrix, training: &EmbeddingMatrix, k: usize) -> Result<SimilarityScore> {
    let selected = topk_training_selection(generated, training, k)?;
    let mut chosen = selected.clone();
    // Index order keeps the reduction independent of the ranking order.
    chosen.sort_unstable();
    let sim = pairwise_similarity(generated, &training.select(&chosen))?;
    let mean = sim.as_slice().iter().sum::<f64>() / sim.as_slice().len() as f64;
    SimilarityScore::new(mean)
}

/// Mean and population variance of a concept's per-prompt scores.
pub fn aggregate_prompts(concept_id: &str, scores: Vec<PromptScore>, frequency: f64) -> Result<ImitationRecord> {
    if scores.is_empty() {
        return Err(Error::domain(format!("concept `{concept_id}` has no prompt scores")));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().map(|s| s.score).sum::<f64>() / n;
    let variance = scores.iter().map(|s| (s.score - mean).powi(2)).sum::<f64>() / n;
    Ok(ImitationRecord {
        concept_id: concept_id.to_owned(),
        per_prompt_scores: scores,
        mean_score: mean,
        variance,
        frequency,
    })
}

/// Writes `concept_id,frequency,prompt_id,score`, one row per prompt.
pub fn write_prompt_scores<W: Write>(records: &[ImitationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["concept_id", "frequency", "prompt_id", "score"])?;
    for r in records {
        for p in &r.per_prompt_scores {
            w.write_record([
                r.concept_id.as_str(),
                &r.frequency.to_string(),
                &p.prompt_id,
                &p.score.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::format(format!("csv: {e}")))?;
    Ok(())
}

/// Writes `concept_id,frequency,mean,variance`, one row per concept.
pub fn write_aggregate_scores<W: Write>(records: &[ImitationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["concept_id", "frequency", "mean", "variance"])?;
    for r in records {
        w.write_record([
            r.concept_id.as_str(),
            &r.frequency.to_string(),
            &r.mean_score.to_string(),
            &r.variance.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::format(format!("csv: {e}")))?;
    Ok(())
}

fn parse_f64(s: &str, what: &str, row: usize) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::format(format!("row {row}: bad {what} `{s}`")))
}

/// Reads the per-prompt CSV back into records, re-aggregating each concept.
/// Rows of one concept must be contiguous.
pub fn read_prompt_scores<R: Read>(input: R) -> Result<Vec<ImitationRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(["concept_id", "frequency", "prompt_id", "score"]) {
        return Err(Error::format(format!("unexpected score header {header:?}")));
    }
    let mut out: Vec<ImitationRecord> = Vec::new();
    let mut pending: Option<(String, f64, Vec<PromptScore>)> = None;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").to_owned();
        let freq = parse_f64(rec.get(1).unwrap_or(""), "frequency", i + 1)?;
        let score = PromptScore {
            prompt_id: rec.get(2).unwrap_or("").to_owned(),
            score: parse_f64(rec.get(3).unwrap_or(""), "score", i + 1)?,
        };
        match &mut pending {
            Some((cur, _, scores)) if *cur == id => scores.push(score),
            _ => {
                if let Some((cid, f, scores)) = pending.take() {
                    out.push(aggregate_prompts(&cid, scores, f)?);
                }
                if out.iter().any(|r| r.concept_id == id) {
                    return Err(Error::format(format!("rows of concept `{id}` are not contiguous")));
                }
                pending = Some((id, freq, vec![score]));
            }
        }
    }
    if let Some((cid, f, scores)) = pending {
        out.push(aggregate_prompts(&cid, scores, f)?);
    }
    Ok(out)
}

/// One row of the aggregated score CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub concept_id: String,
    pub frequency: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn read_aggregate_scores<R: Read>(input: R) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(["concept_id", "frequency", "mean", "variance"]) {
        return Err(Error::format(format!("unexpected aggregate header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let row: AggregateRow = rec.map_err(|e| Error::format(format!("row {}: {e}", i + 1)))?;
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[Vec<f32>], tag: &str) -> EmbeddingMatrix {
        let ids = (0..rows.len()).map(|i| format!("{tag}{i}")).collect();
        EmbeddingMatrix::from_rows(ids, rows).unwrap()
    }

    fn ps(scores: &[f64]) -> Vec<PromptScore> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| PromptScore {
                prompt_id: format!("p{i}"),
                score: s,
            })
            .collect()
    }

    #[test]
    fn topk_returns_everything_when_short() {
        let g = mat(&[vec![1.0, 0.0]], "g");
        let t = mat(&(0..6).map(|i| vec![1.0, i as f32]).collect::<Vec<_>>(), "t");
        let mut sel = topk_training_selection(&g, &t, 10).unwrap();
        sel.sort();
        assert_eq!(sel, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn topk_ranks_matching_row_first() {
        let g = mat(&[vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]], "g");
        let t = mat(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![3.0, 0.0, 0.0]], "t");
        assert_eq!(topk_training_selection(&g, &t, 1).unwrap(), vec![2]);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let g = mat(&[vec![1.0, 0.0]], "g");
        let t = mat(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]], "t");
        assert_eq!(topk_training_selection(&g, &t, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn score_examples() {
        let v = mat(&[vec![0.2, 0.4, 0.1]], "v");
        assert_eq!(imitation_score(&v, &v, 10).unwrap().value(), 1.0);
        let g = mat(&[vec![1.0, 0.0, 0.0]], "g");
        let t = mat(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]], "t");
        assert_eq!(imitation_score(&g, &t, 10).unwrap().value(), 0.0);
    }

    #[test]
    fn empty_inputs_are_domain_errors() {
        let g = mat(&[vec![1.0, 0.0]], "g");
        let e = EmbeddingMatrix::empty(2).unwrap();
        assert!(matches!(imitation_score(&g, &e, 10), Err(Error::Domain(_))));
        assert!(matches!(imitation_score(&e, &g, 10), Err(Error::Domain(_))));
        assert!(matches!(imitation_score(&g, &g, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate_prompts("c", ps(&[0.4; 5]), 12.0).unwrap();
        assert!((r.mean_score - 0.4).abs() < 1e-15);
        assert!(r.variance < 1e-30);
        assert_eq!(r.frequency, 12.0);
        let r = aggregate_prompts("c", ps(&[0.3]), 0.0).unwrap();
        assert_eq!((r.mean_score, r.variance), (0.3, 0.0));
        let r = aggregate_prompts("c", ps(&[0.1, 0.2, 0.3]), 0.0).unwrap();
        assert!((r.mean_score - 0.2).abs() < 1e-15);
        assert!((r.variance - 2.0 / 300.0).abs() < 1e-15);
        assert!(matches!(aggregate_prompts("c", vec![], 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn score_csv_round_trip() {
        let recs = vec![
            aggregate_prompts("a", ps(&[0.1, 0.25]), 3.0).unwrap(),
            aggregate_prompts("b", ps(&[0.7]), 0.1 + 0.2).unwrap(),
        ];
        let mut buf = Vec::new();
        write_prompt_scores(&recs, &mut buf).unwrap();
        assert_eq!(read_prompt_scores(buf.as_slice()).unwrap(), recs);
        let mut agg = Vec::new();
        write_aggregate_scores(&recs, &mut agg).unwrap();
        let rows = read_aggregate_scores(agg.as_slice()).unwrap();
        assert_eq!(rows[1].frequency, 0.1 + 0.2);
        assert_eq!(rows[0].mean, recs[0].mean_score);
    }

    fn arb_matrix(max_rows: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(0.05f32..1.0, 4), 1..max_rows)
    }

    proptest! {
        #[test]
        fn large_k_is_plain_mean(g in arb_matrix(5), t in arb_matrix(8)) {
            let (gm, tm) = (mat(&g, "g"), mat(&t, "t"));
            let s = imitation_score(&gm, &tm, t.len()).unwrap().value();
            let all = pairwise_similarity(&gm, &tm).unwrap();
            let mean = all.as_slice().iter().sum::<f64>() / all.as_slice().len() as f64;
            prop_assert!((s - mean).abs() < 1e-12);
        }

        #[test]
        fn score_is_permutation_invariant(g in arb_matrix(5), t in arb_matrix(15), k in 1usize..12) {
            let (gm, tm) = (mat(&g, "g"), mat(&t, "t"));
            let mut g2 = g.clone();
            g2.reverse();
            let mut t2 = t.clone();
            t2.rotate_left(t.len() / 2);
            let a = imitation_score(&gm, &tm, k).unwrap().value();
            let b = imitation_score(&mat(&g2, "g"), &mat(&t2, "t"), k).unwrap().value();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn duplicating_best_row_never_lowers_score(g in arb_matrix(5), t in arb_matrix(15), k in 1usize..12) {
            let (gm, tm) = (mat(&g, "g"), mat(&t, "t"));
            let best = topk_training_selection(&gm, &tm, 1).unwrap()[0];
            let mut t2 = t.clone();
            t2.push(t[best].clone());
            let a = imitation_score(&gm, &tm, k).unwrap().value();
            let b = imitation_score(&gm, &mat(&t2, "t"), k).unwrap().value();
            prop_assert!(b >= a - 1e-12);
        }
    }
}
