use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use spkdistill::backend::{eer_report, extract_embeddings, fit_backend, format_scores, Scoring};
use spkdistill::data::{generate_corpus, make_trials, Corpus, TrialList};
use spkdistill::objectives::DistillationConfig;
use spkdistill::training::{self, EpochLog};
use spkdistill::{FeatureSequence, ParameterSet};

use crate::config::{CorpusConfig, RunConfig};
use crate::{BackendArg, Common};

pub const SOURCE_FILE: &str = "source.spkc";
pub const TARGET_FT_FILE: &str = "target_ft.spkc";
pub const TARGET_EVAL_FILE: &str = "target_eval.spkc";
pub const TRIALS_FILE: &str = "trials.tsv";
pub const MODEL_FILE: &str = "model.spkm";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const SCORES_FILE: &str = "scores.tsv";
pub const REPORT_FILE: &str = "report.json";

pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<spkdistill::Error> for Failure {
    fn from(e: spkdistill::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

trait UsageExt<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

/// Loads and finalizes the configuration, sets up threads, and readies the
/// output directory.
fn setup(common: &Common) -> Result<RunConfig, Failure> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p).usage()?,
        None => RunConfig::default(),
    };
    let cfg = cfg.finalize(common.seed).usage()?;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure::Usage(anyhow!("--threads must be at least 1")));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    prepare_out(&common.out, common.force)?;
    fs::write(common.out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(cfg)
}

fn prepare_out(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::Usage(anyhow!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Failure::Usage(anyhow!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_corpus(data: &Path, name: &str) -> Result<Corpus, Failure> {
    let path = data.join(name);
    Ok(Corpus::load(&path).with_context(|| format!("loading corpus {}", path.display()))?)
}

fn load_model(path: &Path, what: &str) -> Result<ParameterSet, Failure> {
    Ok(ParameterSet::load_any(path).with_context(|| format!("loading {what} model {}", path.display()))?)
}

fn write_metrics(dir: &Path, history: &[EpochLog]) -> Result<(), Failure> {
    let mut text = String::new();
    for h in history {
        text.push_str(&serde_json::to_string(h).map_err(anyhow::Error::from)?);
        text.push('\n');
    }
    fs::write(dir.join(METRICS_FILE), text)?;
    Ok(())
}

fn print_last(stage: &str, history: &[EpochLog]) {
    match history.last() {
        Some(h) => {
            println!("{stage}: {} epochs, final loss {:.4}, accuracy {:.3}", history.len(), h.task_loss, h.accuracy)
        }
        None => println!("{stage}: 0 epochs"),
    }
}

fn summarize(name: &str, corpus: &Corpus) {
    let lengths: Vec<usize> = corpus.utterances.iter().map(|u| u.frames()).collect();
    let (lo, hi) = (lengths.iter().copied().min().unwrap_or(0), lengths.iter().copied().max().unwrap_or(0));
    println!("{name}: {} speakers, {} utterances, frames {lo}..={hi}", corpus.n_speakers(), corpus.len());
    if lengths.is_empty() {
        return;
    }
    let bins = 5;
    let width = ((hi - lo) / bins).max(1) + 1;
    let mut hist = vec![0usize; bins];
    for l in &lengths {
        hist[((l - lo) / width).min(bins - 1)] += 1;
    }
    for (b, count) in hist.iter().enumerate() {
        let start = lo + b * width;
        println!("  [{start:>5}, {:>5})  {count}", start + width);
    }
}

pub fn gen_data(common: &Common) -> Result<(), Failure> {
    let cfg = setup(common)?;
    let (source_spec, target_spec) = cfg.corpus.specs(cfg.seed).usage()?;
    let source = generate_corpus(&source_spec)?;
    let target = generate_corpus(&target_spec)?;
    let (ft, eval) = target.split_speakers(cfg.corpus.eval_speakers)?;
    let trials = make_trials(
        &eval,
        None,
        cfg.corpus.target_trials,
        cfg.corpus.nontarget_trials,
        &mut CorpusConfig::trial_rng(cfg.seed),
    )?;
    let out = &common.out;
    source.save(out.join(SOURCE_FILE))?;
    ft.save(out.join(TARGET_FT_FILE))?;
    eval.save(out.join(TARGET_EVAL_FILE))?;
    trials.save(out.join(TRIALS_FILE))?;
    summarize("source", &source);
    summarize("target fine-tune", &ft);
    summarize("target eval", &eval);
    println!("trials: {} target, {} nontarget", trials.n_target(), trials.n_nontarget());
    Ok(())
}

fn class_loss(cfg: &RunConfig) -> DistillationConfig {
    DistillationConfig {
        asoftmax_margin: cfg.student.loss.asoftmax_margin,
        ..DistillationConfig::class_only(cfg.student.loss.class_loss)
    }
}

pub fn train_teacher(common: &Common, data: &Path) -> Result<(), Failure> {
    let cfg = setup(common)?;
    let source = load_corpus(data, SOURCE_FILE)?;
    let encoder = spkdistill::EncoderConfig { num_classes: source.n_speakers(), ..cfg.encoder.clone() };
    let out = training::train_teacher(&source, encoder, &class_loss(&cfg), &cfg.teacher)?;
    out.params.save(common.out.join(MODEL_FILE))?;
    write_metrics(&common.out, &out.history)?;
    print_last("teacher", &out.history);
    Ok(())
}

pub fn train_student(common: &Common, data: &Path, teacher: &Path) -> Result<(), Failure> {
    let cfg = setup(common)?;
    let teacher = load_model(teacher, "teacher")?;
    let source = load_corpus(data, SOURCE_FILE)?;
    let out = training::train_student(&teacher, &source, &cfg.student.loss, &cfg.student.train)?;
    out.params.save(common.out.join(MODEL_FILE))?;
    write_metrics(&common.out, &out.history)?;
    print_last("student", &out.history);
    Ok(())
}

pub fn finetune(common: &Common, data: &Path, model: &Path) -> Result<(), Failure> {
    let cfg = setup(common)?;
    let start = load_model(model, "start-point")?;
    let target = load_corpus(data, TARGET_FT_FILE)?;
    let out = training::finetune(&start, &target, &cfg.finetune)?;
    out.params.save(common.out.join(MODEL_FILE))?;
    write_metrics(&common.out, &out.history)?;
    print_last("finetune", &out.history);
    Ok(())
}

#[derive(Serialize)]
struct Report {
    eer: f64,
    threshold: f64,
    n_target: usize,
    n_nontarget: usize,
    backend: Scoring,
    lda_dim: Option<usize>,
}

fn embeddings(params: &ParameterSet, corpus: &Corpus) -> Result<spkdistill::Matrix, Failure> {
    let xs: Vec<&FeatureSequence> = corpus.utterances.iter().map(|u| &u.features).collect();
    Ok(extract_embeddings(params, &xs)?)
}

pub fn evaluate(
    common: &Common,
    data: &Path,
    model: &Path,
    backend: Option<BackendArg>,
    skip_lda: bool,
) -> Result<(), Failure> {
    let cfg = setup(common)?;
    let params = load_model(model, "evaluated")?;
    let train = load_corpus(data, TARGET_FT_FILE)?;
    let eval = load_corpus(data, TARGET_EVAL_FILE)?;
    let trials_path: PathBuf = data.join(TRIALS_FILE);
    let trials = TrialList::load(&trials_path).with_context(|| format!("loading trials {}", trials_path.display()))?;
    trials.audit(&eval)?;

    let scoring = match backend {
        Some(BackendArg::Cosine) => Scoring::Cosine,
        Some(BackendArg::Plda) => Scoring::Plda,
        None => cfg.backend.scoring,
    };
    let lda_dim = if skip_lda { None } else { cfg.backend.lda_dim };
    let fitted = fit_backend(&embeddings(&params, &train)?, &train.labels(), lda_dim)?;
    let scores = fitted.score_trials(scoring, &embeddings(&params, &eval)?, &trials)?;
    let eer = eer_report(&scores, &trials)?;
    fs::write(common.out.join(SCORES_FILE), format_scores(&trials, &scores)?)?;
    let report = Report {
        eer: eer.eer,
        threshold: eer.threshold,
        n_target: eer.n_target,
        n_nontarget: eer.n_nontarget,
        backend: scoring,
        lda_dim,
    };
    let mut text = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    text.push('\n');
    fs::write(common.out.join(REPORT_FILE), text)?;
    println!(
        "EER {:.2}% at threshold {:.6} ({} target, {} nontarget trials)",
        100.0 * eer.eer,
        eer.threshold,
        eer.n_target,
        eer.n_nontarget
    );
    Ok(())
}
