//! End-to-end orchestration: calibrate, filter, score, detect, report.
//!
//! Every stage reads its inputs from the manifest and the files earlier
//! stages left in the output directory, and writes its own results there.
//! Any stage can therefore be re-run alone, and the final report is built
//! only from persisted files.

pub mod manifest;
mod report;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{collect_pair_similarities, fit_threshold, CalibratedThreshold, ThresholdMethod};
use crate::changepoint::{default_penalty, pelt_detect, DetectionReport, ScoreSeries, SeriesPoint};
use crate::embeddings::{read_embedding_file, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::filtering::{
    estimate_frequency, filter_candidates, read_concept_table, two_stage_art_filter, write_concept_table,
    ArtnessScores, ConceptRecord, Domain, FilterResult, DEFAULT_SAMPLE_CAP,
};
use crate::scoring::{
    aggregate_prompts, imitation_score, read_aggregate_scores, read_prompt_scores, write_aggregate_scores,
    write_prompt_scores, PromptScore, DEFAULT_TOPK,
};

pub use manifest::Manifest;
pub use report::{build_report, emit_plot_data, ConceptReport, ThresholdReport};

pub const CALIBRATION_FILE: &str = "calibration.json";
pub const FILTER_FILE: &str = "filter.json";
pub const CONCEPTS_FILE: &str = "concepts.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const AGGREGATE_FILE: &str = "scores_agg.csv";
pub const DETECTION_FILE: &str = "detection.json";
pub const REPORT_FILE: &str = "report.json";
pub const PLOT_DATA_FILE: &str = "plot_data.csv";
pub const PLOT_ANNOTATIONS_FILE: &str = "plot_annotations.csv";

/// Frequency gap below which two concepts count as comparable in the
/// invariance check.
pub const DEFAULT_INVARIANCE_DELTA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub manifest_path: PathBuf,
    /// Must match the manifest's domain when set.
    pub domain: Option<Domain>,
    pub threshold_method: ThresholdMethod,
    /// Skip calibration and use this cutoff.
    pub fixed_threshold: Option<f64>,
    /// Stage-1 cutoff of the art filter; required when art concepts carry
    /// artness scores.
    pub artness_threshold: Option<f64>,
    pub topk: usize,
    /// Defaults to [`default_penalty`] of the score series.
    pub penalty: Option<f64>,
    /// Defaults to the manifest's value, then [`DEFAULT_SAMPLE_CAP`].
    pub sample_cap: Option<u64>,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    pub invariance_delta: f64,
    /// Detect on this prompt's scores instead of the prompt average.
    pub prompt: Option<String>,
}

impl PipelineConfig {
    pub fn new(manifest_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            manifest_path: manifest_path.into(),
            domain: None,
            threshold_method: ThresholdMethod::F1max,
            fixed_threshold: None,
            artness_threshold: None,
            topk: DEFAULT_TOPK,
            penalty: None,
            sample_cap: None,
            output_dir: output_dir.into(),
            parallelism: 1,
            invariance_delta: DEFAULT_INVARIANCE_DELTA,
            prompt: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.topk == 0 {
            return Err(Error::manifest("topk must be at least 1"));
        }
        if self.parallelism == 0 {
            return Err(Error::manifest("parallelism must be at least 1"));
        }
        if let Some(p) = self.penalty {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::manifest(format!("penalty must be positive and finite, got {p}")));
            }
        }
        if let Some(t) = self.fixed_threshold {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::manifest(format!("fixed threshold {t} outside [-1, 1]")));
            }
        }
        if self.invariance_delta.is_nan() || self.invariance_delta <= 0.0 {
            return Err(Error::manifest("invariance delta must be positive"));
        }
        Ok(())
    }
}

/// A loaded manifest plus the worker pool, shared by the stages.
pub struct Context {
    pub config: PipelineConfig,
    pub manifest: Manifest,
    pool: rayon::ThreadPool,
}

impl Context {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let manifest = Manifest::load(&config.manifest_path)?;
        if let Some(d) = config.domain {
            if d != manifest.domain {
                return Err(Error::manifest(format!(
                    "configured domain {} does not match manifest domain {}",
                    d.as_str(),
                    manifest.domain.as_str()
                )));
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| Error::manifest(format!("cannot build worker pool: {e}")))?;
        std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
        Ok(Context { config, manifest, pool })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn sample_cap(&self) -> u64 {
        self.config
            .sample_cap
            .or(self.manifest.sample_cap)
            .unwrap_or(DEFAULT_SAMPLE_CAP)
    }

    fn load(&self, rel: &str) -> Result<EmbeddingMatrix> {
        let path = self.manifest.resolve(rel);
        read_embedding_file(&path).map_err(|e| match e {
            Error::Format { message, offset } => Error::Format {
                message: format!("{}: {message}", path.display()),
                offset,
            },
            e => e,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// Fits the same-concept cutoff on every concept's references and writes
/// `calibration.json`.
pub fn calibrate_stage(ctx: &Context) -> Result<CalibratedThreshold> {
    let run = || -> Result<CalibratedThreshold> {
        let threshold = match ctx.config.fixed_threshold {
            Some(v) => CalibratedThreshold::fixed(v),
            None => {
                let refs = ctx.pool.install(|| {
                    ctx.manifest
                        .concepts
                        .par_iter()
                        .map(|c| ctx.load(&c.refs))
                        .collect::<Result<Vec<_>>>()
                })?;
                let sample = collect_pair_similarities(&refs)?;
                fit_threshold(&sample, ctx.config.threshold_method)?
            }
        };
        write_json(&ctx.out(CALIBRATION_FILE), &threshold)?;
        Ok(threshold)
    };
    run().map_err(|e| e.in_stage("calibrate"))
}

/// Filter outcome of one concept as stored in `filter.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptFilter {
    pub concept_id: String,
    #[serde(flatten)]
    pub result: FilterResult,
}

/// Filters every concept's candidates and estimates its frequency. Writes
/// `filter.json` and `concepts.csv`.
pub fn filter_stage(ctx: &Context) -> Result<Vec<ConceptRecord>> {
    let run = || -> Result<Vec<ConceptRecord>> {
        let threshold: CalibratedThreshold = read_json(&ctx.out(CALIBRATION_FILE))?;
        let cap = ctx.sample_cap();
        let domain = ctx.manifest.domain;
        let per_concept = ctx.pool.install(|| {
            ctx.manifest
                .concepts
                .par_iter()
                .map(|c| -> Result<(ConceptFilter, ConceptRecord)> {
                    let refs = ctx.load(&c.refs)?;
                    let cands = ctx.load(&c.candidates)?;
                    let result = match (&c.artness_scores, domain) {
                        (Some(path), Domain::Art) => {
                            let art_th = ctx.config.artness_threshold.ok_or_else(|| {
                                Error::manifest(format!(
                                    "concept `{}` has artness scores but no artness threshold is configured",
                                    c.id
                                ))
                            })?;
                            let scores = manifest::read_artness_scores(&ctx.manifest.resolve(path))?;
                            two_stage_art_filter(
                                &cands,
                                &ArtnessScores::Precomputed(scores),
                                art_th,
                                &refs,
                                &threshold,
                            )?
                        }
                        _ => filter_candidates(&cands, &refs, &threshold)?,
                    };
                    let retrieved = cands.len() as u64;
                    let positive = result.kept_ids.len() as u64;
                    let estimate = estimate_frequency(c.caption_count, retrieved, positive, cap)?;
                    let record = ConceptRecord {
                        concept_id: c.id.clone(),
                        name: c.name.clone(),
                        domain,
                        caption_count: c.caption_count,
                        retrieved_count: retrieved,
                        positive_count: positive,
                        estimated_frequency: estimate.value,
                        aliases: Vec::new(),
                    };
                    record.check()?;
                    Ok((
                        ConceptFilter {
                            concept_id: c.id.clone(),
                            result,
                        },
                        record,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let (filters, records): (Vec<_>, Vec<_>) = per_concept.into_iter().unzip();
        write_json(&ctx.out(FILTER_FILE), &filters)?;
        write_concept_table(&records, create(&ctx.out(CONCEPTS_FILE))?)?;
        Ok(records)
    };
    run().map_err(|e| e.in_stage("filter"))
}

/// Scores every prompt of every concept against its filtered training rows.
/// Writes `scores.csv` and `scores_agg.csv`.
///
/// A concept with no surviving candidates is scored against its references,
/// the only images known to show it.
pub fn score_stage(ctx: &Context) -> Result<Vec<crate::scoring::ImitationRecord>> {
    let run = || -> Result<Vec<crate::scoring::ImitationRecord>> {
        let records = read_concept_table(open(&ctx.out(CONCEPTS_FILE))?)?;
        let filters: Vec<ConceptFilter> = read_json(&ctx.out(FILTER_FILE))?;
        if records.len() != filters.len() {
            return Err(Error::format(
                "concepts.csv and filter.json disagree on the concept count",
            ));
        }
        let k = ctx.config.topk;
        let scored = ctx.pool.install(|| {
            records
                .par_iter()
                .zip(filters.par_iter())
                .map(|(rec, filt)| {
                    if rec.concept_id != filt.concept_id {
                        return Err(Error::format(format!(
                            "concept order mismatch: `{}` vs `{}`",
                            rec.concept_id, filt.concept_id
                        )));
                    }
                    let c = ctx.manifest.concept(&rec.concept_id).ok_or_else(|| {
                        Error::manifest(format!("concept `{}` is not in the manifest", rec.concept_id))
                    })?;
                    let training = if filt.result.kept_ids.is_empty() {
                        log::warn!("concept `{}` kept no candidates; scoring against references", c.id);
                        ctx.load(&c.refs)?
                    } else {
                        let cands = ctx.load(&c.candidates)?;
                        let idx = filt
                            .result
                            .kept_ids
                            .iter()
                            .map(|id| {
                                cands.index_of(id).ok_or_else(|| {
                                    Error::format(format!("kept id `{id}` missing from candidates of `{}`", c.id))
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        cands.select(&idx)
                    };
                    let mut prompts = Vec::with_capacity(c.generated.len());
                    for g in &c.generated {
                        let gen = ctx.load(&g.path)?;
                        prompts.push(PromptScore {
                            prompt_id: g.prompt_id.clone(),
                            score: imitation_score(&gen, &training, k)?.value(),
                        });
                    }
                    aggregate_prompts(&c.id, prompts, rec.estimated_frequency)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        write_prompt_scores(&scored, create(&ctx.out(SCORES_FILE))?)?;
        write_aggregate_scores(&scored, create(&ctx.out(AGGREGATE_FILE))?)?;
        Ok(scored)
    };
    run().map_err(|e| e.in_stage("score"))
}

/// The prompt-averaged score series from `scores_agg.csv`, or the series of
/// the configured prompt from `scores.csv`.
pub fn load_series(ctx: &Context) -> Result<ScoreSeries> {
    if let Some(prompt) = &ctx.config.prompt {
        let records = read_prompt_scores(open(&ctx.out(SCORES_FILE))?)?;
        let points = records
            .into_iter()
            .map(|r| {
                let s = r
                    .per_prompt_scores
                    .iter()
                    .find(|s| &s.prompt_id == prompt)
                    .ok_or_else(|| {
                        Error::manifest(format!(
                            "prompt `{prompt}` was not scored for concept `{}`",
                            r.concept_id
                        ))
                    })?;
                Ok(SeriesPoint {
                    score: s.score,
                    concept_id: r.concept_id,
                    frequency: r.frequency,
                })
            })
            .collect::<Result<_>>()?;
        return ScoreSeries::new(points);
    }
    let rows = read_aggregate_scores(open(&ctx.out(AGGREGATE_FILE))?)?;
    ScoreSeries::new(
        rows.into_iter()
            .map(|r| SeriesPoint {
                concept_id: r.concept_id,
                frequency: r.frequency,
                score: r.mean,
            })
            .collect(),
    )
}

/// PELT over [`load_series`]. Writes `detection.json`.
pub fn detect_stage(ctx: &Context) -> Result<DetectionReport> {
    let run = || -> Result<DetectionReport> {
        let series = load_series(ctx)?;
        let penalty = match ctx.config.penalty {
            Some(p) => p,
            None => default_penalty(&series)?,
        };
        let result = pelt_detect(&series, penalty)?;
        let report = DetectionReport::new(&series, &result);
        write_json(&ctx.out(DETECTION_FILE), &report)?;
        Ok(report)
    };
    run().map_err(|e| e.in_stage("detect"))
}

/// Assembles `report.json` and the plot files from persisted stage outputs.
pub fn report_stage(ctx: &Context) -> Result<ThresholdReport> {
    let run = || -> Result<ThresholdReport> {
        let report = build_report(ctx)?;
        write_json(&ctx.out(REPORT_FILE), &report)?;
        emit_plot_data(&report, &ctx.config.output_dir)?;
        Ok(report)
    };
    run().map_err(|e| e.in_stage("report"))
}

/// Runs every stage in order.
pub fn run_pipeline(config: PipelineConfig) -> Result<ThresholdReport> {
    let ctx = Context::new(config)?;
    calibrate_stage(&ctx)?;
    filter_stage(&ctx)?;
    score_stage(&ctx)?;
    detect_stage(&ctx)?;
    report_stage(&ctx)
}
