//! Synthetic domains with a planted imitation threshold.
//!
//! Every concept is a signed coordinate permutation of one template
//! geometry: an anchor direction, references at a fixed cosine to it,
//! on-concept candidates lying on the anchor ray, and generated rows at a
//! chosen cosine to the anchor. Because concepts differ only by a signed
//! permutation, their similarity statistics are identical up to summation
//! order, which makes distribution invariance hold by construction.
//!
//! Frequencies are log-spaced over the requested range. Small concepts are
//! stored in full (caption count at or below the sample cap, every candidate
//! filtered); large ones store a fixed-size sample whose positive ratio
//! extrapolates to the target frequency.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::{write_embedding_file, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::filtering::{estimate_frequency, ConceptRecord, Domain};
use crate::pipeline::manifest::{GeneratedFile, Manifest, ManifestConcept};

const MAX_ANCHOR_TRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub n_concepts: usize,
    pub dim: usize,
    pub freq_range: (f64, f64),
    pub planted_threshold: f64,
    pub low_score_mean: f64,
    pub high_score_mean: f64,
    /// Standard deviation of a concept's prompt-averaged score.
    pub noise_std: f64,
    pub refs_per_concept: usize,
    /// Candidate rows stored per concept at most; also the sample cap.
    pub candidates_per_concept: usize,
    /// Generated rows per prompt.
    pub generated_per_concept: usize,
    pub contamination_rate: f64,
    pub seed: u64,
    pub prompts: usize,
    /// Upper bound on the cosine between two concept anchors.
    pub anchor_margin: f64,
    /// Cosine between each reference and its anchor.
    pub ref_similarity: f64,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        SyntheticDomainSpec {
            n_concepts: 40,
            dim: 32,
            freq_range: (1.0, 1000.0),
            planted_threshold: 100.0,
            low_score_mean: 0.2,
            high_score_mean: 0.6,
            noise_std: 0.0,
            refs_per_concept: 5,
            candidates_per_concept: 200,
            generated_per_concept: 4,
            contamination_rate: 0.4,
            seed: 0,
            prompts: 5,
            anchor_margin: 0.5,
            ref_similarity: 0.9,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.freq_range;
        let checks: [(bool, &str); 13] = [
            (self.n_concepts >= 2, "n_concepts must be at least 2"),
            (self.dim >= 2, "dim must be at least 2"),
            (
                lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi,
                "freq_range must satisfy 0 <= min <= max",
            ),
            (
                lo <= self.planted_threshold && self.planted_threshold <= hi,
                "planted_threshold must lie within freq_range",
            ),
            (
                0.0 <= self.low_score_mean && self.low_score_mean < self.high_score_mean && self.high_score_mean <= 1.0,
                "score means must satisfy 0 <= low < high <= 1",
            ),
            (
                self.noise_std.is_finite() && self.noise_std >= 0.0,
                "noise_std must be non-negative",
            ),
            (self.refs_per_concept >= 2, "refs_per_concept must be at least 2"),
            (
                self.candidates_per_concept >= 1,
                "candidates_per_concept must be positive",
            ),
            (
                self.generated_per_concept >= 1,
                "generated_per_concept must be positive",
            ),
            (
                (0.0..1.0).contains(&self.contamination_rate),
                "contamination_rate must lie in [0, 1)",
            ),
            (self.prompts >= 1, "prompts must be positive"),
            (
                self.anchor_margin > -1.0 && self.anchor_margin < 1.0,
                "anchor_margin must lie in (-1, 1)",
            ),
            (
                self.ref_similarity > 0.0 && self.ref_similarity < 1.0,
                "ref_similarity must lie in (0, 1)",
            ),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::domain(*msg));
        }
        if self.dim < self.refs_per_concept + 2 {
            return Err(Error::domain(format!(
                "unsatisfiable geometry: dim {} cannot hold an anchor, {} reference directions and a generated direction",
                self.dim, self.refs_per_concept
            )));
        }
        Ok(())
    }

    /// Contaminant rows accompanying `on` on-concept rows.
    fn contaminants_for(&self, on: u64) -> u64 {
        let r = self.contamination_rate;
        (on as f64 * r / (1.0 - r)).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTruth {
    pub concept_id: String,
    /// The frequency the pipeline should estimate from the stored counts.
    pub frequency: f64,
    pub caption_count: u64,
    pub on_concept: u64,
    pub contaminants: u64,
    /// Noise-free score level.
    pub expected_score: f64,
    pub above_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted_threshold: f64,
    /// Position, in frequency-sorted order, of the first concept at or above
    /// the planted threshold.
    pub planted_index: Option<usize>,
    /// That concept's frequency.
    pub threshold_frequency: Option<f64>,
    pub sample_cap: u64,
    pub per_concept_truth: Vec<ConceptTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConcept {
    pub id: String,
    pub name: String,
    pub caption_count: u64,
    pub refs: EmbeddingMatrix,
    pub candidates: EmbeddingMatrix,
    /// `(prompt_id, rows)`.
    pub generated: Vec<(String, EmbeddingMatrix)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomain {
    pub spec: SyntheticDomainSpec,
    pub concepts: Vec<SyntheticConcept>,
    pub truth: GroundTruth,
}

/// Template vectors shared by every concept, in the template frame.
struct Template {
    anchor: Vec<f64>,
    /// Orthonormal, orthogonal to `anchor`.
    ref_dirs: Vec<Vec<f64>>,
    /// Unit, orthogonal to `anchor` and every reference direction.
    gen_dirs: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    if n < 1e-9 {
        return Err(Error::domain("unsatisfiable geometry: degenerate direction"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Random unit vector orthogonal to the orthonormal `basis`.
fn orthogonal_unit(rng: &mut ChaCha8Rng, dim: usize, basis: &[&[f64]]) -> Result<Vec<f64>> {
    let mut v = normal_vec(rng, dim);
    // Two passes keep the residual overlap at rounding level.
    for _ in 0..2 {
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= p * y);
        }
    }
    normalize(&mut v)?;
    Ok(v)
}

impl Template {
    fn new(rng: &mut ChaCha8Rng, spec: &SyntheticDomainSpec) -> Result<Self> {
        let mut anchor = normal_vec(rng, spec.dim);
        normalize(&mut anchor)?;
        let mut ref_dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.refs_per_concept);
        for _ in 0..spec.refs_per_concept {
            let basis: Vec<&[f64]> = std::iter::once(anchor.as_slice())
                .chain(ref_dirs.iter().map(Vec::as_slice))
                .collect();
            let v = orthogonal_unit(rng, spec.dim, &basis)?;
            ref_dirs.push(v);
        }
        let basis: Vec<&[f64]> = std::iter::once(anchor.as_slice())
            .chain(ref_dirs.iter().map(Vec::as_slice))
            .collect();
        let gen_dirs = (0..spec.generated_per_concept)
            .map(|_| orthogonal_unit(rng, spec.dim, &basis))
            .collect::<Result<Vec<_>>>()?;
        Ok(Template {
            anchor,
            ref_dirs,
            gen_dirs,
        })
    }

    fn basis(&self) -> Vec<&[f64]> {
        std::iter::once(self.anchor.as_slice())
            .chain(self.ref_dirs.iter().map(Vec::as_slice))
            .collect()
    }
}

/// `out[perm[j]] = sign[j] * x[j]`.
#[derive(Debug, Clone)]
struct SignedPerm {
    perm: Vec<usize>,
    sign: Vec<f32>,
}

impl SignedPerm {
    fn random(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        let sign = (0..dim)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        SignedPerm { perm, sign }
    }

    fn apply(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; x.len()];
        for (j, &v) in x.iter().enumerate() {
            out[self.perm[j]] = self.sign[j] * v;
        }
        out
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// `s * anchor + sqrt(1 - s^2) * dir`.
fn at_cosine(anchor: &[f64], dir: &[f64], s: f64) -> Vec<f32> {
    let s = s.clamp(-1.0, 1.0);
    let t = (1.0 - s * s).max(0.0).sqrt();
    anchor.iter().zip(dir).map(|(a, d)| (s * a + t * d) as f32).collect()
}

/// Integer frequencies spaced evenly in `ln(1 + f)`.
fn log_spaced(n: usize, (lo, hi): (f64, f64)) -> Vec<u64> {
    let (a, b) = (lo.ln_1p(), hi.ln_1p());
    let (lo_i, hi_i) = (lo.ceil(), hi.floor().max(lo.ceil()));
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            (a + t * (b - a)).exp_m1().round().clamp(lo_i, hi_i) as u64
        })
        .collect()
}

struct Counts {
    caption: u64,
    on: u64,
    contaminants: u64,
    frequency: f64,
}

/// Stored candidate counts whose frequency estimate lands on `f`.
fn counts_for(spec: &SyntheticDomainSpec, f: u64) -> Result<Counts> {
    let cap = spec.candidates_per_concept as u64;
    let c = spec.contaminants_for(f);
    let (caption, on, contaminants) = if f + c <= cap {
        (f + c, f, c)
    } else {
        let contaminants = (spec.contamination_rate * cap as f64).round() as u64;
        let on = cap - contaminants;
        if on == 0 {
            return Err(Error::domain(
                "candidates_per_concept too small for the contamination rate",
            ));
        }
        let caption = ((f as f64 * cap as f64 / on as f64).round() as u64).max(cap + 1);
        (caption, on, contaminants)
    };
    let est = estimate_frequency(caption, on + contaminants, on, cap)?;
    Ok(Counts {
        caption,
        on,
        contaminants,
        frequency: est.value,
    })
}

/// Builds a synthetic domain in memory.
pub fn generate_domain(spec: &SyntheticDomainSpec) -> Result<SyntheticDomain> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let template = Template::new(&mut rng, spec)?;
    let c = spec.ref_similarity;

    let anchor32 = to_f32(&template.anchor);
    let refs32: Vec<Vec<f32>> = template
        .ref_dirs
        .iter()
        .map(|d| at_cosine(&template.anchor, d, c))
        .collect();

    let mut freqs = log_spaced(spec.n_concepts, spec.freq_range);
    // Snap the first concept at or above the threshold onto it, so the
    // planted change sits at a known frequency.
    if let Some(f) = freqs.iter_mut().find(|f| **f as f64 >= spec.planted_threshold) {
        *f = spec.planted_threshold.ceil() as u64;
    }

    let mut perms: Vec<SignedPerm> = Vec::with_capacity(spec.n_concepts);
    let mut anchors: Vec<Vec<f32>> = Vec::with_capacity(spec.n_concepts);
    for i in 0..spec.n_concepts {
        let mut tries = 0;
        let (p, a) = loop {
            let p = SignedPerm::random(&mut rng, spec.dim);
            let a = p.apply(&anchor32);
            let ok = anchors.iter().all(|b| {
                let d: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
                d <= spec.anchor_margin
            });
            if ok {
                break (p, a);
            }
            tries += 1;
            if tries == MAX_ANCHOR_TRIES {
                return Err(Error::domain(format!(
                    "unsatisfiable geometry: no anchor for concept {i} within margin {} in dim {}",
                    spec.anchor_margin, spec.dim
                )));
            }
        };
        perms.push(p);
        anchors.push(a);
    }

    let prompt_sd = spec.noise_std * (spec.prompts as f64).sqrt();
    let mut concepts = Vec::with_capacity(spec.n_concepts);
    let mut truths = Vec::with_capacity(spec.n_concepts);
    for (i, (&f, perm)) in freqs.iter().zip(&perms).enumerate() {
        let id = format!("c{i:04}");
        let counts = counts_for(spec, f)?;
        let above = counts.frequency >= spec.planted_threshold;
        let base = if above {
            spec.high_score_mean
        } else {
            spec.low_score_mean
        };

        let ref_ids = (0..spec.refs_per_concept).map(|j| format!("{id}/ref/{j}")).collect();
        let ref_data = refs32.iter().flat_map(|r| perm.apply(r)).collect();
        let refs = EmbeddingMatrix::new(spec.dim, ref_ids, ref_data)?;

        // On-concept rows first, contaminants after; the order carries no
        // meaning to the filter.
        let n_rows = (counts.on + counts.contaminants) as usize;
        let mut cand_data = Vec::with_capacity(n_rows * spec.dim);
        for _ in 0..counts.on {
            cand_data.extend_from_slice(&anchors[i]);
        }
        let basis = template.basis();
        for _ in 0..counts.contaminants {
            let v = orthogonal_unit(&mut rng, spec.dim, &basis)?;
            cand_data.extend(perm.apply(&to_f32(&v)));
        }
        let cand_ids = (0..n_rows).map(|j| format!("{id}/cand/{j}")).collect();
        let candidates = EmbeddingMatrix::new(spec.dim, cand_ids, cand_data)?;

        // A concept with no on-concept rows is scored against its references,
        // which sit at cosine `c` to the anchor; aim the generated rows so
        // that similarity comes out at the same level.
        let scale = if counts.on == 0 { 1.0 / c } else { 1.0 };
        let mut generated = Vec::with_capacity(spec.prompts);
        for p in 0..spec.prompts {
            let noise: f64 = if prompt_sd > 0.0 {
                prompt_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let s = (base + noise).clamp(-1.0, 1.0) * scale;
            let data = template
                .gen_dirs
                .iter()
                .flat_map(|d| perm.apply(&at_cosine(&template.anchor, d, s)))
                .collect();
            let ids = (0..spec.generated_per_concept)
                .map(|j| format!("{id}/gen/p{p}/{j}"))
                .collect();
            generated.push((format!("p{p}"), EmbeddingMatrix::new(spec.dim, ids, data)?));
        }

        truths.push(ConceptTruth {
            concept_id: id.clone(),
            frequency: counts.frequency,
            caption_count: counts.caption,
            on_concept: counts.on,
            contaminants: counts.contaminants,
            expected_score: base,
            above_threshold: above,
        });
        concepts.push(SyntheticConcept {
            name: format!("synthetic concept {i}"),
            id,
            caption_count: counts.caption,
            refs,
            candidates,
            generated,
        });
    }

    let mut order: Vec<&ConceptTruth> = truths.iter().collect();
    order.sort_by(|a, b| {
        a.frequency
            .total_cmp(&b.frequency)
            .then_with(|| a.concept_id.cmp(&b.concept_id))
    });
    let planted_index = order.iter().position(|t| t.above_threshold);
    let truth = GroundTruth {
        planted_threshold: spec.planted_threshold,
        planted_index,
        threshold_frequency: planted_index.map(|i| order[i].frequency),
        sample_cap: spec.candidates_per_concept as u64,
        per_concept_truth: truths,
    };
    Ok(SyntheticDomain {
        spec: spec.clone(),
        concepts,
        truth,
    })
}

impl SyntheticDomain {
    /// Writes `manifest.json`, `ground_truth.json` and the embedding files
    /// under `emb/`. Returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let emb = dir.join("emb");
        std::fs::create_dir_all(&emb).map_err(|e| Error::io(&emb, e))?;
        let mut entries = Vec::with_capacity(self.concepts.len());
        for c in &self.concepts {
            let refs = format!("emb/{}.refs.emb", c.id);
            let cands = format!("emb/{}.cands.emb", c.id);
            write_embedding_file(&c.refs, dir.join(&refs))?;
            write_embedding_file(&c.candidates, dir.join(&cands))?;
            let mut generated = Vec::with_capacity(c.generated.len());
            for (prompt, m) in &c.generated {
                let path = format!("emb/{}.gen.{prompt}.emb", c.id);
                write_embedding_file(m, dir.join(&path))?;
                generated.push(GeneratedFile {
                    prompt_id: prompt.clone(),
                    path,
                });
            }
            entries.push(ManifestConcept {
                id: c.id.clone(),
                name: c.name.clone(),
                caption_count: c.caption_count,
                refs,
                candidates: cands,
                generated,
                artness_scores: None,
            });
        }
        let mut manifest = Manifest::new(Domain::Synthetic, entries);
        manifest.sample_cap = Some(self.truth.sample_cap);
        let manifest_path = dir.join("manifest.json");
        manifest.save(&manifest_path)?;

        let truth_path = dir.join("ground_truth.json");
        let mut text = serde_json::to_string_pretty(&self.truth)?;
        text.push('\n');
        std::fs::write(&truth_path, text).map_err(|e| Error::io(&truth_path, e))?;
        Ok(manifest_path)
    }
}

/// One concept whose candidates are split across two names.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasPair {
    /// The record the full candidate pool would produce.
    pub truth: ConceptRecord,
    pub parts: [ConceptRecord; 2],
    pub part_candidates: [EmbeddingMatrix; 2],
    pub refs: EmbeddingMatrix,
    pub generated: EmbeddingMatrix,
}

/// Splits one concept's `candidates_per_concept` rows into two records, the
/// first receiving `round(split_fraction * n)` of them. Counts are those the
/// filter would report; the pool is small enough to be filtered in full.
pub fn generate_alias_pair(spec: &SyntheticDomainSpec, split_fraction: f64) -> Result<AliasPair> {
    spec.validate()?;
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::domain(format!(
            "split fraction {split_fraction} must lie in (0, 1)"
        )));
    }
    let n = spec.candidates_per_concept;
    let first = (split_fraction * n as f64).round() as usize;
    if first == 0 || first == n {
        return Err(Error::domain(format!(
            "split fraction {split_fraction} leaves one of the {n} candidates' parts empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let template = Template::new(&mut rng, spec)?;
    let anchor = to_f32(&template.anchor);
    let basis = template.basis();

    let contaminants = (spec.contamination_rate * n as f64).round() as usize;
    let mut on_concept: Vec<bool> = (0..n).map(|j| j >= contaminants).collect();
    on_concept.shuffle(&mut rng);
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for &on in &on_concept {
        rows.push(if on {
            anchor.clone()
        } else {
            to_f32(&orthogonal_unit(&mut rng, spec.dim, &basis)?)
        });
    }

    let refs = EmbeddingMatrix::from_rows(
        (0..spec.refs_per_concept).map(|j| format!("ref/{j}")).collect(),
        &template
            .ref_dirs
            .iter()
            .map(|d| at_cosine(&template.anchor, d, spec.ref_similarity))
            .collect::<Vec<_>>(),
    )?;
    let generated = EmbeddingMatrix::from_rows(
        (0..spec.generated_per_concept).map(|j| format!("gen/{j}")).collect(),
        &template
            .gen_dirs
            .iter()
            .map(|d| at_cosine(&template.anchor, d, spec.high_score_mean))
            .collect::<Vec<_>>(),
    )?;

    let cap = n as u64;
    let record = |id: &str, range: std::ops::Range<usize>| -> Result<(ConceptRecord, EmbeddingMatrix)> {
        let count = range.len() as u64;
        let positive = on_concept[range.clone()].iter().filter(|&&o| o).count() as u64;
        let m = EmbeddingMatrix::from_rows(range.clone().map(|j| format!("cand/{j}")).collect(), &rows[range])?;
        Ok((
            ConceptRecord {
                concept_id: id.to_owned(),
                name: id.to_owned(),
                domain: Domain::Synthetic,
                caption_count: count,
                retrieved_count: count,
                positive_count: positive,
                estimated_frequency: estimate_frequency(count, count, positive, cap)?.value,
                aliases: Vec::new(),
            },
            m,
        ))
    };
    let (truth, _) = record("alias-family", 0..n)?;
    let (a, ma) = record("alias-a", 0..first)?;
    let (b, mb) = record("alias-b", first..n)?;
    Ok(AliasPair {
        truth,
        parts: [a, b],
        part_candidates: [ma, mb],
        refs,
        generated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{collect_pair_similarities, fit_threshold, ThresholdMethod};
    use crate::filtering::{filter_candidates, merge_aliases};
    use crate::scoring::imitation_score;

    fn small() -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            n_concepts: 12,
            dim: 16,
            freq_range: (0.0, 500.0),
            planted_threshold: 40.0,
            candidates_per_concept: 80,
            ..Default::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(small().validate().is_ok());
        let bad = [
            SyntheticDomainSpec {
                low_score_mean: 0.7,
                ..small()
            },
            SyntheticDomainSpec {
                planted_threshold: 501.0,
                ..small()
            },
            SyntheticDomainSpec {
                contamination_rate: 1.0,
                ..small()
            },
            SyntheticDomainSpec { dim: 6, ..small() },
            SyntheticDomainSpec {
                n_concepts: 1,
                ..small()
            },
        ];
        for s in bad {
            assert!(matches!(generate_domain(&s), Err(Error::Domain(_))), "{s:?}");
        }
    }

    #[test]
    fn crowded_anchors_are_unsatisfiable() {
        let s = SyntheticDomainSpec {
            n_concepts: 50,
            dim: 8,
            refs_per_concept: 2,
            anchor_margin: -0.05,
            ..small()
        };
        match generate_domain(&s) {
            Err(Error::Domain(m)) => assert!(m.contains("unsatisfiable geometry"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn log_spacing_and_snap() {
        let f = log_spaced(5, (0.0, 999.0));
        assert_eq!(f, vec![0, 5, 31, 177, 999]);
        let d = generate_domain(&small()).unwrap();
        assert_eq!(d.truth.threshold_frequency, Some(40.0));
        let t = &d.truth.per_concept_truth;
        assert!(t.windows(2).all(|w| w[0].frequency <= w[1].frequency));
        assert!(t.iter().all(|c| c.above_threshold == (c.frequency >= 40.0)));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_domain(&small()).unwrap();
        let b = generate_domain(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(&SyntheticDomainSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.concepts[3].refs, c.concepts[3].refs);
    }

    #[test]
    fn counts_reproduce_frequency() {
        let s = small();
        for f in [0u64, 1, 7, 36, 37, 100, 499] {
            let c = counts_for(&s, f).unwrap();
            assert!(c.on + c.contaminants <= 80);
            let exact = c.caption <= 80;
            if exact {
                assert_eq!(c.frequency, f as f64);
            } else {
                assert!(
                    (c.frequency - f as f64).abs() / (f as f64) < 0.05,
                    "{f}: {}",
                    c.frequency
                );
            }
        }
    }

    #[test]
    fn filter_recovers_on_concept_rows() {
        let d = generate_domain(&small()).unwrap();
        let refs: Vec<_> = d.concepts.iter().map(|c| c.refs.clone()).collect();
        let th = fit_threshold(&collect_pair_similarities(&refs).unwrap(), ThresholdMethod::F1max).unwrap();
        for (c, t) in d.concepts.iter().zip(&d.truth.per_concept_truth) {
            let r = filter_candidates(&c.candidates, &c.refs, &th).unwrap();
            assert_eq!(r.kept_ids.len() as u64, t.on_concept, "{}", c.id);
        }
    }

    #[test]
    fn generated_rows_hit_target_similarity() {
        let d = generate_domain(&small()).unwrap();
        for (c, t) in d.concepts.iter().zip(&d.truth.per_concept_truth) {
            let on: Vec<usize> = (0..t.on_concept as usize).collect();
            let training = if on.is_empty() {
                c.refs.clone()
            } else {
                c.candidates.select(&on)
            };
            for (_, g) in &c.generated {
                let s = imitation_score(g, &training, 10).unwrap().value();
                assert!((s - t.expected_score).abs() < 1e-6, "{}: {s}", c.id);
            }
        }
    }

    #[test]
    fn alias_pair_conserves_counts() {
        let s = SyntheticDomainSpec {
            candidates_per_concept: 200,
            contamination_rate: 0.0,
            ..small()
        };
        let p = generate_alias_pair(&s, 0.5).unwrap();
        assert_eq!(p.parts[0].positive_count, 100);
        assert_eq!(p.parts[1].positive_count, 100);
        let merged = merge_aliases(&p.parts).unwrap();
        assert_eq!(merged.estimated_frequency, 200.0);
        assert_eq!(merged.estimated_frequency, p.truth.estimated_frequency);

        for bad in [0.0, 1.0, f64::NAN, 0.001] {
            assert!(matches!(generate_alias_pair(&s, bad), Err(Error::Domain(_))), "{bad}");
        }
    }

    #[test]
    fn write_emits_loadable_manifest() {
        let d = generate_domain(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = d.write(dir.path()).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.concepts.len(), 12);
        assert_eq!(m.sample_cap, Some(80));
        let back = crate::embeddings::read_embedding_file(m.resolve(&m.concepts[5].candidates)).unwrap();
        assert_eq!(back, d.concepts[5].candidates);
        let truth: GroundTruth =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("ground_truth.json")).unwrap()).unwrap();
        assert_eq!(truth, d.truth);
    }
}
