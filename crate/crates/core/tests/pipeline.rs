use std::collections::BTreeMap;
use std::path::Path;

use imitation_threshold::changepoint::ChangePointResult;
use imitation_threshold::pipeline::{
    self, calibrate_stage, detect_stage, emit_plot_data, filter_stage, report_stage, score_stage, Context,
    ThresholdReport,
};
use imitation_threshold::synthetic::{generate_domain, SyntheticDomainSpec};
use imitation_threshold::{Error, PipelineConfig, ScoreSeries, SeriesPoint};

fn spec() -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        n_concepts: 30,
        dim: 16,
        freq_range: (0.0, 2000.0),
        planted_threshold: 150.0,
        candidates_per_concept: 120,
        ..Default::default()
    }
}

fn setup(spec: &SyntheticDomainSpec, dir: &Path) -> PipelineConfig {
    let manifest = generate_domain(spec).unwrap().write(dir.join("data")).unwrap();
    PipelineConfig::new(manifest, dir.join("out"))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn noiseless_domain_recovers_planted_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_domain(&spec()).unwrap();
    let cfg = PipelineConfig::new(d.write(dir.path().join("data")).unwrap(), dir.path().join("out"));
    let report = pipeline::run_pipeline(cfg).unwrap();
    assert_eq!(report.threshold_frequency, d.truth.threshold_frequency);
    assert_eq!(report.change_points.change_indices.len(), 1);
    for c in &report.concepts {
        let t = d
            .truth
            .per_concept_truth
            .iter()
            .find(|t| t.concept_id == c.record.concept_id)
            .unwrap();
        assert_eq!(c.record.estimated_frequency, t.frequency);
        assert_eq!(c.record.positive_count, t.on_concept);
    }
    assert!(report.validation.iter().all(|v| v.passed), "{:?}", report.validation);
}

#[test]
fn rerunning_stages_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(
        &SyntheticDomainSpec {
            noise_std: 0.03,
            ..spec()
        },
        dir.path(),
    );
    let out = cfg.output_dir.clone();
    pipeline::run_pipeline(cfg.clone()).unwrap();
    let first = snapshot(&out);
    assert_eq!(first.len(), 9);

    let ctx = Context::new(cfg.clone()).unwrap();
    report_stage(&ctx).unwrap();
    assert_eq!(snapshot(&out), first);
    detect_stage(&ctx).unwrap();
    report_stage(&ctx).unwrap();
    assert_eq!(snapshot(&out), first);
    score_stage(&ctx).unwrap();
    filter_stage(&ctx).unwrap();
    calibrate_stage(&ctx).unwrap();
    report_stage(&ctx).unwrap();
    assert_eq!(snapshot(&out), first);

    // A report built from a fresh directory holding only the persisted
    // intermediates matches too.
    let copy = dir.path().join("copy");
    std::fs::create_dir(&copy).unwrap();
    for name in [
        "calibration.json",
        "concepts.csv",
        "scores.csv",
        "scores_agg.csv",
        "detection.json",
    ] {
        std::fs::copy(out.join(name), copy.join(name)).unwrap();
    }
    let ctx2 = Context::new(PipelineConfig {
        output_dir: copy.clone(),
        ..cfg
    })
    .unwrap();
    report_stage(&ctx2).unwrap();
    for name in ["report.json", "plot_data.csv", "plot_annotations.csv"] {
        assert_eq!(std::fs::read(copy.join(name)).unwrap(), first[name], "{name}");
    }
}

#[test]
fn missing_generated_file_names_concept() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(&spec(), dir.path());
    std::fs::remove_file(dir.path().join("data/emb/c0007.gen.p2.emb")).unwrap();
    let err = pipeline::run_pipeline(cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    match err {
        Error::Manifest(m) => assert!(m.contains("c0007") && m.contains("generated"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn corrupt_embedding_is_tagged_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(&spec(), dir.path());
    std::fs::write(dir.path().join("data/emb/c0003.cands.emb"), b"EMB1\x10\x00").unwrap();
    let err = pipeline::run_pipeline(cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    match &err {
        Error::Stage { stage, source } => {
            assert_eq!(*stage, "filter");
            assert!(source.to_string().contains("c0003.cands.emb"), "{source}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(&spec(), dir.path());
    for bad in [
        PipelineConfig { topk: 0, ..cfg.clone() },
        PipelineConfig {
            parallelism: 0,
            ..cfg.clone()
        },
        PipelineConfig {
            penalty: Some(-1.0),
            ..cfg.clone()
        },
        PipelineConfig {
            domain: Some(imitation_threshold::Domain::Faces),
            ..cfg.clone()
        },
    ] {
        assert!(matches!(Context::new(bad), Err(Error::Manifest(_))));
    }
}

#[test]
fn fixed_threshold_round_trips_through_calibration_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        fixed_threshold: Some(0.5),
        ..setup(&spec(), dir.path())
    };
    let report = pipeline::run_pipeline(cfg).unwrap();
    assert_eq!(report.calibration.value, 0.5);
    assert!(report.calibration.tpr.is_nan());
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

#[test]
fn plot_files_match_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(
        &SyntheticDomainSpec {
            noise_std: 0.05,
            ..spec()
        },
        dir.path(),
    );
    let out = cfg.output_dir.clone();
    let report = pipeline::run_pipeline(cfg).unwrap();
    let rows = read_rows(&out.join("plot_data.csv"));
    assert_eq!(rows.len(), 30);
    let scores: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    let fits: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(fits.windows(2).all(|w| w[0] <= w[1]));

    let ann = read_rows(&out.join("plot_annotations.csv"));
    let cp = &report.change_points;
    assert_eq!(ann.len(), cp.change_indices.len());
    let mut bounds = vec![0];
    bounds.extend(ann.iter().map(|r| r[0].parse::<usize>().unwrap()));
    bounds.push(scores.len());
    for (j, w) in bounds.windows(2).enumerate() {
        let seg = &scores[w[0]..w[1]];
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        let stated: f64 = if j < ann.len() {
            ann[j][2].parse().unwrap()
        } else {
            ann[j - 1][3].parse().unwrap()
        };
        assert!((mean - stated).abs() < 1e-12, "segment {j}: {mean} vs {stated}");
    }
}

#[test]
fn single_concept_plot_has_no_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(&spec(), dir.path());
    let full = pipeline::run_pipeline(cfg).unwrap();
    let c = full.concepts[0].clone();
    let series = ScoreSeries::new(vec![SeriesPoint {
        concept_id: c.record.concept_id.clone(),
        frequency: c.record.estimated_frequency,
        score: c.imitation.mean_score,
    }])
    .unwrap();
    let report = ThresholdReport {
        change_points: ChangePointResult::from_changes(&series, vec![], 1.0).unwrap(),
        isotonic_fit: vec![c.imitation.mean_score],
        threshold_frequency: None,
        concepts: vec![c],
        series,
        validation: vec![],
        ..full
    };
    let (data, ann) = emit_plot_data(&report, dir.path()).unwrap();
    assert_eq!(read_rows(&data).len(), 1);
    assert!(read_rows(&ann).is_empty());
}

#[test]
fn detection_on_a_single_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_domain(&spec()).unwrap();
    let base = PipelineConfig::new(d.write(dir.path().join("data")).unwrap(), dir.path().join("out"));
    let cfg = PipelineConfig {
        prompt: Some("p3".into()),
        ..base.clone()
    };
    let report = pipeline::run_pipeline(cfg.clone()).unwrap();
    assert_eq!(report.threshold_frequency, d.truth.threshold_frequency);

    let bad = Context::new(PipelineConfig {
        prompt: Some("p9".into()),
        ..base
    })
    .unwrap();
    let err = detect_stage(&bad).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("p9"), "{err}");
}
