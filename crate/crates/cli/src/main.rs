use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use imitation_threshold::calibration::ThresholdMethod;
use imitation_threshold::embeddings::{read_embedding_file, write_embedding_file};
use imitation_threshold::pipeline::{
    self, calibrate_stage, detect_stage, filter_stage, report_stage, score_stage, Context, DEFAULT_INVARIANCE_DELTA,
};
use imitation_threshold::scoring::{read_prompt_scores, DEFAULT_TOPK};
use imitation_threshold::selection::{select_dense_subset, SelectionProblem};
use imitation_threshold::stats::{
    caption_miss_rate, fmr_tmr, invariance_check, spearman, threshold_agreement, AgreementInput, AgreementMode,
    DemographicGroup, ValidationCheck,
};
use imitation_threshold::synthetic::{generate_domain, SyntheticDomainSpec};
use imitation_threshold::{Domain, Error, PipelineConfig, Result};

#[derive(Parser)]
#[command(
    name = "imthresh",
    version,
    about = "Estimate imitation thresholds from embedding files"
)]
struct Cli {
    /// Log progress (repeat for more detail). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the similarity cutoff from the reference sets.
    Calibrate(PipelineArgs),
    /// Filter candidates and estimate concept frequencies.
    Filter(PipelineArgs),
    /// Score generated images against each concept's training images.
    Score(PipelineArgs),
    /// Detect change points in the frequency-sorted score series.
    Detect(PipelineArgs),
    /// Assemble report.json and plot data from the stage outputs.
    Report(PipelineArgs),
    /// Run every stage in order.
    Pipeline(PipelineArgs),
    /// Write a synthetic domain (manifest, embeddings, ground truth).
    Synth(SynthArgs),
    /// Standalone validation statistics, printed as JSON.
    Validate {
        #[command(subcommand)]
        check: ValidateCommand,
    },
    /// Pick a mutually similar subset of reference images.
    SelectRefs(SelectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    F1max,
    Midpoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Faces,
    Art,
    Synthetic,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for stage outputs.
    #[arg(long)]
    out: PathBuf,
    /// Fail unless the manifest has this domain.
    #[arg(long, value_enum)]
    domain: Option<DomainArg>,
    #[arg(long, value_enum, default_value = "f1max")]
    threshold_method: MethodArg,
    /// Use this cutoff instead of calibrating.
    #[arg(long)]
    fixed_threshold: Option<f64>,
    #[arg(long)]
    artness_threshold: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TOPK)]
    topk: usize,
    /// Change-point penalty; estimated from the series when omitted.
    #[arg(long)]
    penalty: Option<f64>,
    #[arg(long)]
    sample_cap: Option<u64>,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[arg(long, default_value_t = DEFAULT_INVARIANCE_DELTA)]
    invariance_delta: f64,
    /// Detect on one prompt's scores instead of the prompt average.
    #[arg(long)]
    prompt: Option<String>,
}

impl PipelineArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig {
            domain: self.domain.map(|d| match d {
                DomainArg::Faces => Domain::Faces,
                DomainArg::Art => Domain::Art,
                DomainArg::Synthetic => Domain::Synthetic,
            }),
            threshold_method: match self.threshold_method {
                MethodArg::F1max => ThresholdMethod::F1max,
                MethodArg::Midpoint => ThresholdMethod::Midpoint,
            },
            fixed_threshold: self.fixed_threshold,
            artness_threshold: self.artness_threshold,
            topk: self.topk,
            penalty: self.penalty,
            sample_cap: self.sample_cap,
            parallelism: self.parallelism,
            invariance_delta: self.invariance_delta,
            prompt: self.prompt.clone(),
            ..PipelineConfig::new(&self.manifest, &self.out)
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON spec; individual flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n_concepts: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    freq_min: Option<f64>,
    #[arg(long)]
    freq_max: Option<f64>,
    #[arg(long)]
    planted_threshold: Option<f64>,
    #[arg(long)]
    low_score_mean: Option<f64>,
    #[arg(long)]
    high_score_mean: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    refs_per_concept: Option<usize>,
    #[arg(long)]
    candidates_per_concept: Option<usize>,
    #[arg(long)]
    generated_per_concept: Option<usize>,
    #[arg(long)]
    contamination_rate: Option<f64>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SynthArgs {
    fn spec(&self) -> Result<SyntheticDomainSpec> {
        let mut s = match &self.spec {
            Some(p) => {
                serde_json::from_str(&read_text(p)?).map_err(|e| Error::Manifest(format!("{}: {e}", p.display())))?
            }
            None => SyntheticDomainSpec::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        set!(
            n_concepts,
            dim,
            planted_threshold,
            low_score_mean,
            high_score_mean,
            noise_std,
            refs_per_concept,
            candidates_per_concept,
            generated_per_concept,
            contamination_rate,
            prompts,
            seed
        );
        if let Some(v) = self.freq_min {
            s.freq_range.0 = v;
        }
        if let Some(v) = self.freq_max {
            s.freq_range.1 = v;
        }
        Ok(s)
    }
}

#[derive(Subcommand)]
enum ValidateCommand {
    /// Mean signed score gap between concepts of near-equal frequency.
    Invariance {
        /// Per-prompt scores CSV (scores.csv from the score stage).
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = DEFAULT_INVARIANCE_DELTA)]
        delta: f64,
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
    },
    /// Share of sampled detections whose caption misses the concept.
    MissRate {
        #[arg(long)]
        detected: u64,
        #[arg(long)]
        with_mention: u64,
        #[arg(long)]
        corpus_size: u64,
        #[arg(long)]
        sample_size: u64,
        #[arg(long, default_value_t = 0.01)]
        max_miss_fraction: f64,
    },
    /// False- and true-match rates per demographic group.
    FmrTmr {
        /// JSON `[{"group_id", "members": [{"id", "faces": "x.emb"}]}]`;
        /// paths are relative to this file.
        #[arg(long)]
        groups: PathBuf,
        /// Smallest acceptable `tmr - fmr` per group.
        #[arg(long, default_value_t = 0.0)]
        min_gap: f64,
    },
    /// Agreement between human and predicted labels.
    Agreement {
        /// CSV with header `human,predicted` (0/1 labels), or
        /// `rating,frequency` together with --threshold.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "match")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.5)]
        min_agreement: f64,
    },
    /// Rank correlation of two columns.
    Spearman {
        /// CSV with header `x,y`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        min_rho: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Match,
    DotProduct,
}

#[derive(Args)]
struct SelectArgs {
    /// Reference embeddings.
    #[arg(long, conflicts_with = "similarity", required_unless_present = "similarity")]
    refs: Option<PathBuf>,
    /// Square similarity matrix CSV whose header row holds the item ids.
    #[arg(long)]
    similarity: Option<PathBuf>,
    #[arg(long)]
    k: usize,
    /// Also write the selected rows (needs --refs).
    #[arg(long, requires = "refs")]
    out: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format {
        message: format!("{}: {msg}", path.display()),
        offset: None,
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

/// Reads a two-column numeric CSV with the given header.
fn read_pairs(path: &Path, header: [&str; 2]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let h = r.headers().map_err(|e| format_err(path, e))?.clone();
    if h.iter().ne(header) {
        return Err(format_err(path, format!("expected header `{}`", header.join(","))));
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| format_err(path, e))?;
        let parse = |j: usize| -> Result<f64> {
            row[j]
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("row {}: `{}` is not a number", i + 1, &row[j])))
        };
        a.push(parse(0)?);
        b.push(parse(1)?);
    }
    Ok((a, b))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(|e| Error::Format {
            message: e.to_string(),
            offset: None,
        })?
    );
    Ok(())
}

fn check(name: &str, value: f64, pass_threshold: f64, passed: bool, notes: String) -> ValidationCheck {
    ValidationCheck {
        name: name.into(),
        value,
        pass_threshold,
        passed,
        notes,
    }
}

#[derive(Deserialize)]
struct GroupSpec {
    group_id: String,
    members: Vec<MemberSpec>,
}

#[derive(Deserialize)]
struct MemberSpec {
    id: String,
    faces: String,
}

fn validate(cmd: &ValidateCommand) -> Result<()> {
    match cmd {
        ValidateCommand::Invariance {
            scores,
            delta,
            tolerance,
        } => {
            let records = read_prompt_scores(open(scores)?)?;
            let r = invariance_check(&records, *delta)?;
            print_json(&check(
                "invariance",
                r.value,
                *tolerance,
                r.value.abs() < *tolerance,
                format!("{} pairs within frequency delta {delta}", r.pairs),
            ))
        }
        ValidateCommand::MissRate {
            detected,
            with_mention,
            corpus_size,
            sample_size,
            max_miss_fraction,
        } => {
            let r = caption_miss_rate(*detected, *with_mention, *corpus_size, *sample_size)?;
            print_json(&check(
                "miss-rate",
                r.miss_fraction,
                *max_miss_fraction,
                r.miss_fraction <= *max_miss_fraction,
                format!("about {:.0} images missed across the corpus", r.extrapolated_missed),
            ))
        }
        ValidateCommand::FmrTmr { groups, min_gap } => {
            let specs: Vec<GroupSpec> = serde_json::from_str(&read_text(groups)?)
                .map_err(|e| Error::Manifest(format!("{}: {e}", groups.display())))?;
            let base = groups.parent().unwrap_or(Path::new(""));
            let groups = specs
                .into_iter()
                .map(|g| {
                    let members = g
                        .members
                        .into_iter()
                        .map(|m| Ok((m.id, read_embedding_file(base.join(&m.faces))?)))
                        .collect::<Result<_>>()?;
                    Ok(DemographicGroup {
                        group_id: g.group_id,
                        members,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let checks: Vec<ValidationCheck> = fmr_tmr(&groups)?
                .into_iter()
                .map(|r| {
                    let gap = r.tmr - r.fmr;
                    check(
                        &format!("fmr-tmr:{}", r.group_id),
                        gap,
                        *min_gap,
                        gap >= *min_gap,
                        format!("fmr {} tmr {}", r.fmr, r.tmr),
                    )
                })
                .collect();
            print_json(&checks)
        }
        ValidateCommand::Agreement {
            input,
            threshold,
            mode,
            min_agreement,
        } => {
            let labels = match threshold {
                Some(t) => {
                    let (ratings, freqs) = read_pairs(input, ["rating", "frequency"])?;
                    AgreementInput::from_ratings(&ratings, &freqs, *t)?
                }
                None => {
                    let (h, p) = read_pairs(input, ["human", "predicted"])?;
                    let bin = |v: Vec<f64>| -> Result<Vec<u8>> {
                        v.into_iter()
                            .map(|x| match x {
                                0.0 => Ok(0),
                                1.0 => Ok(1),
                                _ => Err(format_err(input, format!("label {x} is not 0 or 1"))),
                            })
                            .collect()
                    };
                    AgreementInput {
                        human_binary: bin(h)?,
                        predicted_binary: bin(p)?,
                    }
                }
            };
            let mode = match mode {
                ModeArg::Match => AgreementMode::Match,
                ModeArg::DotProduct => AgreementMode::DotProduct,
            };
            let a = threshold_agreement(&labels, mode)?;
            print_json(&check(
                "agreement",
                a,
                *min_agreement,
                a >= *min_agreement,
                format!("{} items", labels.human_binary.len()),
            ))
        }
        ValidateCommand::Spearman { input, min_rho } => {
            let (x, y) = read_pairs(input, ["x", "y"])?;
            let rho = spearman(&x, &y)?;
            print_json(&check(
                "spearman",
                rho,
                *min_rho,
                rho > *min_rho,
                format!("{} pairs", x.len()),
            ))
        }
    }
}

fn read_similarity_csv(path: &Path, k: usize) -> Result<(Vec<String>, SelectionProblem)> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let ids: Vec<String> = r
        .headers()
        .map_err(|e| format_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut unique = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !unique.insert(id.as_str())) {
        return Err(format_err(path, format!("duplicate id `{dup}`")));
    }
    let n = ids.len();
    let mut sim = Vec::with_capacity(n * n);
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| format_err(path, e))?;
        for v in row.iter() {
            sim.push(
                v.parse::<f64>()
                    .map_err(|_| format_err(path, format!("row {}: `{v}` is not a number", i + 1)))?,
            );
        }
    }
    if sim.len() != n * n {
        return Err(format_err(path, format!("expected {n} rows of {n} values")));
    }
    Ok((ids, SelectionProblem::new(n, sim, k)?))
}

#[derive(serde::Serialize)]
struct SelectOutput {
    selected_ids: Vec<String>,
    indices: Vec<usize>,
    average_similarity: f64,
    facility_location: f64,
}

fn select_refs(args: &SelectArgs) -> Result<()> {
    let (ids, problem, refs) = match (&args.refs, &args.similarity) {
        (Some(p), _) => {
            let refs = read_embedding_file(p)?;
            let problem = SelectionProblem::from_embeddings(&refs, args.k)?;
            (refs.ids().to_vec(), problem, Some(refs))
        }
        (None, Some(p)) => {
            let (ids, problem) = read_similarity_csv(p, args.k)?;
            (ids, problem, None)
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    let s = select_dense_subset(&problem)?;
    if let (Some(out), Some(refs)) = (&args.out, &refs) {
        write_embedding_file(&refs.select(&s.indices), out)?;
    }
    print_json(&SelectOutput {
        selected_ids: s.indices.iter().map(|&i| ids[i].clone()).collect(),
        indices: s.indices,
        average_similarity: s.average_similarity,
        facility_location: s.facility_location,
    })
}

fn run(cli: Cli) -> Result<()> {
    let stage = |args: &PipelineArgs, f: fn(&Context) -> Result<()>| -> Result<()> {
        let ctx = Context::new(args.config())?;
        f(&ctx)?;
        println!("{}", args.out.display());
        Ok(())
    };
    match &cli.command {
        Command::Calibrate(a) => stage(a, |c| calibrate_stage(c).map(drop)),
        Command::Filter(a) => stage(a, |c| filter_stage(c).map(drop)),
        Command::Score(a) => stage(a, |c| score_stage(c).map(drop)),
        Command::Detect(a) => stage(a, |c| detect_stage(c).map(drop)),
        Command::Report(a) => stage(a, |c| report_stage(c).map(drop)),
        Command::Pipeline(a) => {
            let report = pipeline::run_pipeline(a.config())?;
            match report.threshold_frequency {
                Some(f) => println!("imitation threshold: {f}"),
                None => println!("no change point detected"),
            }
            Ok(())
        }
        Command::Synth(a) => {
            let domain = generate_domain(&a.spec()?)?;
            println!("{}", domain.write(&a.out)?.display());
            Ok(())
        }
        Command::Validate { check } => validate(check),
        Command::SelectRefs(a) => select_refs(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
