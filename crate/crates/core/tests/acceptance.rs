//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use imitation_threshold::calibration::{
    collect_pair_similarities, f1_max_threshold, fit_threshold, midpoint_threshold, PairSimilaritySample,
    ThresholdMethod,
};
use imitation_threshold::changepoint::{brute_force_segment, default_penalty, optimal_partition, pelt_detect};
use imitation_threshold::filtering::{filter_candidates, merge_aliases};
use imitation_threshold::scoring::{aggregate_prompts, imitation_score, PromptScore};
use imitation_threshold::selection::{
    average_pairwise_similarity, facility_location_value, for_each_subset, select_dense_subset, SelectionProblem,
};
use imitation_threshold::stats::{
    caption_miss_rate, invariance_check, isotonic_fit_values, spearman, threshold_agreement, AgreementInput,
    AgreementMode,
};
use imitation_threshold::synthetic::{generate_alias_pair, generate_domain, SyntheticDomain, SyntheticDomainSpec};
use imitation_threshold::{
    CalibratedThreshold, ConceptRecord, Domain, EmbeddingMatrix, ImitationRecord, PipelineConfig, ScoreSeries,
    SeriesPoint,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn series(y: &[f64]) -> ScoreSeries {
    ScoreSeries::from_scores(y).unwrap()
}

/// Piecewise-constant means plus Gaussian noise.
fn random_series(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let segments = rng.random_range(1..=5);
    let mut cuts: Vec<usize> = (0..segments - 1).map(|_| rng.random_range(0..n)).collect();
    cuts.sort_unstable();
    let sd = rng.random_range(0.1..1.0);
    let noise = Normal::new(0.0, sd).unwrap();
    let mut level = 0.0;
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        if cuts.contains(&i) {
            level = rng.random_range(-3.0..3.0);
        }
        y.push(level + noise.sample(rng));
    }
    y
}

fn pelt_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let n = rng.random_range(2..=12);
        let y = random_series(&mut rng, n);
        let pen = rng.random_range(0.01..5.0);
        let s = series(&y);
        let a = pelt_detect(&s, pen).unwrap();
        let b = brute_force_segment(&s, pen).unwrap();
        ensure(a == b, || {
            format!("short series {trial}: {:?} vs {:?}", a.change_indices, b.change_indices)
        })?;
    }
    let mut max_n = 0;
    for trial in 0..100 {
        let n = if trial == 0 { 2000 } else { rng.random_range(2..=2000) };
        max_n = max_n.max(n);
        let y = random_series(&mut rng, n);
        let s = series(&y);
        let pen = if n >= 4 && trial % 2 == 0 {
            default_penalty(&s).unwrap()
        } else {
            rng.random_range(0.01..20.0)
        };
        let a = pelt_detect(&s, pen).unwrap();
        let b = optimal_partition(&s, pen).unwrap();
        ensure(a == b, || {
            format!(
                "long series {trial} (n={n}): {:?} vs {:?}",
                a.change_indices, b.change_indices
            )
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "1000 short + 100 long series (max n {max_n}) identical in {secs:.2}s"
    ))
}

/// Scores every concept in memory through calibrate, filter and score.
fn score_domain(d: &SyntheticDomain) -> ScoreSeries {
    let refs: Vec<EmbeddingMatrix> = d.concepts.iter().map(|c| c.refs.clone()).collect();
    let th = fit_threshold(&collect_pair_similarities(&refs).unwrap(), ThresholdMethod::F1max).unwrap();
    let points = d
        .concepts
        .iter()
        .map(|c| {
            let kept = filter_candidates(&c.candidates, &c.refs, &th).unwrap().kept_ids;
            let training = if kept.is_empty() {
                c.refs.clone()
            } else {
                let idx: Vec<usize> = kept.iter().map(|id| c.candidates.index_of(id).unwrap()).collect();
                c.candidates.select(&idx)
            };
            let prompts = c
                .generated
                .iter()
                .map(|(p, g)| PromptScore {
                    prompt_id: p.clone(),
                    score: imitation_score(g, &training, 10).unwrap().value(),
                })
                .collect();
            let truth = d.truth.per_concept_truth.iter().find(|t| t.concept_id == c.id).unwrap();
            let rec = aggregate_prompts(&c.id, prompts, truth.frequency).unwrap();
            SeriesPoint {
                concept_id: c.id.clone(),
                frequency: rec.frequency,
                score: rec.mean_score,
            }
        })
        .collect();
    ScoreSeries::new(points).unwrap()
}

fn recovery_spec(seed: u64, noise_std: f64) -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        n_concepts: 400,
        dim: 24,
        freq_range: (0.0, 20_000.0),
        planted_threshold: 300.0,
        low_score_mean: 0.2,
        high_score_mean: 0.6,
        noise_std,
        refs_per_concept: 5,
        candidates_per_concept: 150,
        generated_per_concept: 3,
        contamination_rate: 0.4,
        seed,
        ..Default::default()
    }
}

/// Offset of the detected first change from the planted one, in positions.
fn detection_offset(spec: &SyntheticDomainSpec) -> Option<i64> {
    let d = generate_domain(spec).unwrap();
    let s = score_domain(&d);
    let pen = default_penalty(&s).unwrap();
    let dp = optimal_partition(&s, pen).unwrap();
    assert_eq!(pelt_detect(&s, pen).unwrap(), dp);
    let planted = d.truth.planted_index.unwrap() as i64;
    dp.change_indices.first().map(|&i| i as i64 - planted)
}

fn planted_recovery() -> Outcome {
    let noisy: Vec<Option<i64>> = (0..50u64)
        .into_par_iter()
        .map(|seed| detection_offset(&recovery_spec(seed, 0.4 / 5.0)))
        .collect();
    let hits = noisy.iter().filter(|o| o.is_some_and(|o| o.abs() <= 2)).count();
    let clean: Vec<Option<i64>> = (0..5u64)
        .into_par_iter()
        .map(|seed| detection_offset(&recovery_spec(seed, 0.0)))
        .collect();
    let exact = clean.iter().filter(|o| **o == Some(0)).count();
    ensure(hits * 10 >= 50 * 9, || {
        format!("SNR 5: {hits}/50 within 2 positions, offsets {noisy:?}")
    })?;
    ensure(exact == clean.len(), || format!("noiseless offsets {clean:?}"))?;
    Ok(format!(
        "SNR 5: {hits}/50 seeds within 2 positions; noiseless: {exact}/{} exact",
        clean.len()
    ))
}

/// Best F1 over the sample minimum and every midpoint of consecutive
/// distinct values, counted pair by pair; ties keep the lower cutoff.
fn midpoint_scan(same: &[f64], diff: &[f64]) -> (f64, f64) {
    let mut vals: Vec<f64> = same.iter().chain(diff).copied().collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let mut cands = vec![vals[0]];
    cands.extend(vals.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    let mut best = (f64::NAN, -1.0);
    for t in cands {
        let tp = same.iter().filter(|&&v| v >= t).count() as f64;
        let fneg = same.len() as f64 - tp;
        let fp = diff.iter().filter(|&&v| v >= t).count() as f64;
        let f1 = if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        };
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    best
}

fn calibration_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..500 {
        let ns = rng.random_range(1..=100);
        let nd = rng.random_range(1..=100);
        let coarse = trial % 3 == 0;
        let mut draw = |mu: f64| -> f64 {
            let v: f64 = (mu + rng.random_range(-0.5..0.5f64)).clamp(-1.0, 1.0);
            if coarse {
                (v * 20.0).round() / 20.0
            } else {
                v
            }
        };
        let same: Vec<f64> = (0..ns).map(|_| draw(0.5)).collect();
        let diff: Vec<f64> = (0..nd).map(|_| draw(0.1)).collect();
        let got = f1_max_threshold(&PairSimilaritySample::new(same.clone(), diff.clone()).unwrap()).unwrap();
        let (t, f1) = midpoint_scan(&same, &diff);
        ensure(got.value == t && got.f1 == f1, || {
            format!("trial {trial}: got ({}, {}), scan ({t}, {f1})", got.value, got.f1)
        })?;
    }
    let sample = PairSimilaritySample::new(vec![0.56], vec![0.36]).unwrap();
    let mid = midpoint_threshold(&sample).unwrap();
    let f1 = f1_max_threshold(&sample).unwrap();
    for th in [mid, f1] {
        ensure(
            (th.value - 0.46).abs() < 1e-12 && th.tpr == 1.0 && th.fpr == 0.0,
            || format!("{th:?}"),
        )?;
    }
    Ok("500 samples match the midpoint scan; 0.56/0.36 -> 0.46, tpr 1, fpr 0".into())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize, tag: &str) -> EmbeddingMatrix {
    let data: Vec<f32> = (0..rows * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingMatrix::new(dim, (0..rows).map(|i| format!("{tag}{i}")).collect(), data).unwrap()
}

fn scalar_cos(a: &[f32], b: &[f32]) -> f64 {
    let (mut d, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        d += x * y;
        na += x * x;
        nb += y * y;
    }
    d / (na.sqrt() * nb.sqrt())
}

/// Full generated x training matrix, rank training rows by mean similarity,
/// average the block of the top k.
fn brute_imitation(gen: &EmbeddingMatrix, train: &EmbeddingMatrix, k: usize) -> f64 {
    let m: Vec<Vec<f64>> = (0..gen.len())
        .map(|g| (0..train.len()).map(|t| scalar_cos(gen.row(g), train.row(t))).collect())
        .collect();
    let mut ranked: Vec<(usize, f64)> = (0..train.len())
        .map(|t| (t, m.iter().map(|row| row[t]).sum::<f64>() / gen.len() as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top: Vec<usize> = ranked.iter().take(k).map(|r| r.0).collect();
    let total: f64 = m.iter().map(|row| top.iter().map(|&t| row[t]).sum::<f64>()).sum();
    total / (gen.len() * top.len()) as f64
}

fn imitation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let dim = rng.random_range(2..=16);
        let (ng, nt) = (rng.random_range(1..=8), rng.random_range(1..=30));
        let gen = random_matrix(&mut rng, ng, dim, "g");
        let train = random_matrix(&mut rng, nt, dim, "t");
        let k = rng.random_range(1..=train.len() + 5);
        let got = imitation_score(&gen, &train, k).unwrap().value();
        let want = brute_imitation(&gen, &train, k);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-12, || {
            format!("trial {trial}: {got} vs {want}")
        })?;
        if k >= train.len() {
            let mut all = 0.0;
            for g in 0..gen.len() {
                for t in 0..train.len() {
                    all += scalar_cos(gen.row(g), train.row(t));
                }
            }
            let mean = all / (gen.len() * train.len()) as f64;
            ensure((got - mean).abs() <= 1e-12, || {
                format!("trial {trial}: k >= |T| gives {got}, mean {mean}")
            })?;
        }
    }
    Ok(format!("200 pairs, max deviation {worst:.1e}"))
}

/// Least-squares non-decreasing fit by enumerating every split into
/// contiguous blocks.
fn exhaustive_isotonic(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut ok = true;
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let m = y[start..end].iter().sum::<f64>() / (end - start) as f64;
                if m < prev {
                    ok = false;
                    break;
                }
                prev = m;
                fit.extend(std::iter::repeat_n(m, end - start));
                start = end;
            }
        }
        if ok {
            let sse: f64 = y.iter().zip(&fit).map(|(a, b)| (a - b).powi(2)).sum();
            if sse < best.0 {
                best = (sse, fit);
            }
        }
    }
    best.1
}

fn isotonic_projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let n = rng.random_range(1..=8);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = isotonic_fit_values(&y).unwrap();
        let want = exhaustive_isotonic(&y);
        ensure(got.windows(2).all(|w| w[0] <= w[1]), || {
            format!("trial {trial}: not monotone {got:?}")
        })?;
        let dev = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(dev <= 1e-9, || format!("trial {trial}: {got:?} vs {want:?}"))?;
    }
    Ok("1000 trials match the block-partition optimum".into())
}

fn uniform_problem(rng: &mut ChaCha8Rng, n: usize, k: usize) -> SelectionProblem {
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        sim[i * n + i] = 1.0;
        for j in 0..i {
            let v: f64 = rng.random_range(0.0..1.0);
            sim[i * n + j] = v;
            sim[j * n + i] = v;
        }
    }
    SelectionProblem::new(n, sim, k).unwrap()
}

fn subset_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ratio_fl = 1.0 - (-1.0f64).exp();
    let (mut worst_avg, mut worst_fl) = (f64::INFINITY, f64::INFINITY);
    for trial in 0..200 {
        let n = rng.random_range(4..=12);
        let k = rng.random_range(2..=5.min(n));
        let p = uniform_problem(&mut rng, n, k);
        let (mut best_avg, mut best_fl) = (f64::NEG_INFINITY, 0.0f64);
        for_each_subset(n, k, |s| {
            best_avg = best_avg.max(average_pairwise_similarity(s, &p).unwrap());
            best_fl = best_fl.max(facility_location_value(s, &p).unwrap());
        });
        let got = select_dense_subset(&p).unwrap();
        worst_avg = worst_avg.min(got.average_similarity / best_avg);
        worst_fl = worst_fl.min(got.facility_location / best_fl);
        ensure(got.average_similarity >= 0.95 * best_avg, || {
            format!(
                "trial {trial} (n={n}, k={k}): average {} vs optimum {best_avg}",
                got.average_similarity
            )
        })?;
        ensure(got.facility_location >= ratio_fl * best_fl, || {
            format!(
                "trial {trial} (n={n}, k={k}): coverage {} vs optimum {best_fl}",
                got.facility_location
            )
        })?;
    }
    Ok(format!(
        "200 instances; worst ratios: average {worst_avg:.4}, coverage {worst_fl:.4}"
    ))
}

fn rec(id: &str, freq: f64, score: f64) -> ImitationRecord {
    aggregate_prompts(
        id,
        vec![PromptScore {
            prompt_id: "p0".into(),
            score,
        }],
        freq,
    )
    .unwrap()
}

fn statistics() -> Outcome {
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    ensure(rho == 0.8, || format!("spearman {rho}"))?;

    let human: Vec<u8> = (0..40).map(|i| u8::from(i >= 18)).collect();
    let mut predicted = human.clone();
    for p in predicted.iter_mut().take(21).skip(14) {
        *p = 1 - *p;
    }
    let input = AgreementInput {
        human_binary: human,
        predicted_binary: predicted,
    };
    let agree = threshold_agreement(&input, AgreementMode::Match).unwrap();
    ensure(agree == 0.825, || format!("agreement {agree}"))?;

    let lincoln = caption_miss_rate(52, 1, 2_300_000_000, 100_000).unwrap();
    ensure((lincoln.miss_fraction - 0.00051).abs() < 1e-15, || {
        format!("{lincoln:?}")
    })?;
    let middleton = caption_miss_rate(34, 1, 2_300_000_000, 100_000).unwrap();
    ensure((middleton.extrapolated_missed - 759_000.0).abs() < 1e-6, || {
        format!("{middleton:?}")
    })?;

    let values: Vec<f64> = (0..100u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.4, 0.05).unwrap();
            let records: Vec<ImitationRecord> = (0..300)
                .map(|i| {
                    rec(
                        &format!("c{i}"),
                        f64::from(rng.random_range(0u32..1000)),
                        noise.sample(&mut rng),
                    )
                })
                .collect();
            invariance_check(&records, 10.0).unwrap().value
        })
        .collect();
    let mean = values.iter().sum::<f64>() / 100.0;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
    let se = sd / 10.0;
    ensure(mean.abs() < 3.0 * se, || format!("invariance mean {mean:e}, SE {se:e}"))?;

    Ok(format!(
        "spearman {rho}, agreement {agree}, miss {:.3}%, extrapolated {:.0}, invariance {mean:.1e} (3 SE {:.1e})",
        lincoln.miss_fraction * 100.0,
        middleton.extrapolated_missed,
        3.0 * se
    ))
}

fn record(id: &str, count: u64) -> ConceptRecord {
    ConceptRecord {
        concept_id: id.into(),
        name: id.into(),
        domain: Domain::Faces,
        caption_count: count,
        retrieved_count: count,
        positive_count: count,
        estimated_frequency: count as f64,
        aliases: vec![],
    }
}

fn alias_conservation() -> Outcome {
    let merged = merge_aliases(&[record("a", 172), record("b", 12_177)]).unwrap();
    ensure(
        merged.estimated_frequency == 12_349.0 && merged.positive_count == 12_349,
        || format!("{merged:?}"),
    )?;

    let spec = SyntheticDomainSpec {
        dim: 8,
        refs_per_concept: 3,
        candidates_per_concept: 12_349,
        contamination_rate: 0.0,
        ..Default::default()
    };
    let pair = generate_alias_pair(&spec, 172.0 / 12_349.0).unwrap();
    let th = CalibratedThreshold::fixed(0.5);
    let mut parts = pair.parts.clone();
    for (rec, cands) in parts.iter_mut().zip(&pair.part_candidates) {
        let kept = filter_candidates(cands, &pair.refs, &th).unwrap().kept_ids.len() as u64;
        ensure(kept == rec.positive_count, || {
            format!("{}: filter kept {kept}", rec.concept_id)
        })?;
    }
    ensure(
        parts[0].positive_count == 172 && parts[1].positive_count == 12_177,
        || format!("{parts:?}"),
    )?;
    let merged = merge_aliases(&parts).unwrap();
    ensure(merged.estimated_frequency == pair.truth.estimated_frequency, || {
        format!("{merged:?}")
    })?;
    let pool = EmbeddingMatrix::concat(&[&pair.part_candidates[0], &pair.part_candidates[1]]).unwrap();
    let score_split = imitation_score(&pair.generated, &pool, 10).unwrap();
    let score_one = imitation_score(&pair.generated, &pair.part_candidates[1], 10).unwrap();
    ensure(score_split == score_one, || format!("{score_split:?} vs {score_one:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..200 {
        let m = rng.random_range(2..=6);
        let mut recs: Vec<ConceptRecord> = (0..m)
            .map(|i| record(&format!("n{i}"), rng.random_range(0..100_000)))
            .collect();
        let base = merge_aliases(&recs).unwrap();
        let names = |r: &ConceptRecord| -> BTreeSet<String> {
            std::iter::once(r.concept_id.clone())
                .chain(r.aliases.iter().cloned())
                .collect()
        };
        recs.shuffle(&mut rng);
        let other = merge_aliases(&recs).unwrap();
        ensure(
            other.estimated_frequency == base.estimated_frequency
                && other.caption_count == base.caption_count
                && other.positive_count == base.positive_count
                && names(&other) == names(&base),
            || format!("trial {trial}: {base:?} vs {other:?}"),
        )?;
    }
    Ok("172 + 12177 = 12349 (direct and generated); 200 permutations agree".into())
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDomainSpec {
        noise_std: 0.05,
        ..recovery_spec(11, 0.0)
    };
    let manifest = generate_domain(&spec).unwrap().write(dir.path().join("data")).unwrap();
    let mut outputs = Vec::new();
    for threads in [1, 4, 16] {
        let out = dir.path().join(format!("out{threads}"));
        let cfg = PipelineConfig {
            parallelism: threads,
            ..PipelineConfig::new(&manifest, &out)
        };
        imitation_threshold::run_pipeline(cfg).map_err(|e| e.to_string())?;
        outputs.push(snapshot(&out));
    }
    ensure(outputs[0].len() == 9, || format!("{} output files", outputs[0].len()))?;
    for (threads, o) in [4, 16].iter().zip(&outputs[1..]) {
        for ((name, a), (_, b)) in outputs[0].iter().zip(o) {
            ensure(a == b, || format!("{name} differs between 1 and {threads} workers"))?;
        }
    }
    Ok(format!(
        "{} files byte-identical at 1, 4 and 16 workers",
        outputs[0].len()
    ))
}

fn replica_spec(seed: u64) -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        n_concepts: 400,
        dim: 24,
        freq_range: (0.0, 30_000.0),
        planted_threshold: 112.0,
        low_score_mean: 0.25,
        high_score_mean: 0.55,
        noise_std: 0.03,
        refs_per_concept: 5,
        candidates_per_concept: 300,
        generated_per_concept: 3,
        contamination_rate: 0.4,
        seed,
        ..Default::default()
    }
}

fn replica_112() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_domain(&replica_spec(0)).unwrap();
    ensure(d.truth.threshold_frequency == Some(112.0), || {
        format!("{:?}", d.truth.threshold_frequency)
    })?;
    let manifest = d.write(dir.path().join("data")).unwrap();
    let cfg = PipelineConfig {
        parallelism: 4,
        ..PipelineConfig::new(manifest, dir.path().join("out"))
    };
    let report = imitation_threshold::run_pipeline(cfg).map_err(|e| e.to_string())?;
    ensure(report.threshold_frequency == Some(112.0), || {
        format!(
            "detected {:?}, changes {:?}",
            report.threshold_frequency, report.change_points.change_indices
        )
    })?;
    // Context only: how often other seeds of the same shape land exactly.
    let exact = (1..=100u64)
        .into_par_iter()
        .filter(|&seed| detection_offset(&replica_spec(seed)) == Some(0))
        .count();
    Ok(format!(
        "400 concepts, first change detected at {} images; seeds 1-100 exact in {exact}/100",
        report.threshold_frequency.unwrap()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("PELT exactness", pelt_exactness),
        ("planted-threshold recovery", planted_recovery),
        ("calibration exactness", calibration_exactness),
        ("imitation-score oracle", imitation_oracle),
        ("isotonic projection", isotonic_projection),
        ("subset selection", subset_selection),
        ("statistics", statistics),
        ("alias conservation", alias_conservation),
        ("determinism", determinism),
        ("112-image replica", replica_112),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS  {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", 10 - failed, 10);
    if failed > 0 {
        std::process::exit(1);
    }
}
