use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::metrics::{miou, ConfusionMatrix, MiouReport};
use crate::data::{generate_corpus, ClassTaxonomy, Corpus, LabelMap, SegSample};
use crate::engine::{
    check_resume_compatible, load_checkpoint, predict_logits, save_checkpoint, PseudoLabel, StepMetrics, TrainConfig,
    Trainer, TrainerState,
};
use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::tensor::Tensor;

pub const METRICS_CSV: &str = "metrics.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const REPORT_FILE: &str = "report.toml";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

pub const METRICS_HEADER: &str = "iteration,l_ce_s,l_ce_t,l_cl_s,l_cl_m,l_fd,total,gamma,conf_frac,lr_enc,lr_dec";

pub fn metrics_row(m: &StepMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        m.iteration, m.ce_s, m.ce_t, m.cl_s, m.cl_m, m.fd, m.total, m.gamma, m.conf_frac, m.lr_enc, m.lr_dec
    )
}

pub fn eval_header(taxonomy: &ClassTaxonomy) -> String {
    let mut h = String::from("iteration");
    for name in taxonomy.names() {
        let _ = write!(h, ",iou_{name}");
    }
    h.push_str(",miou");
    h
}

/// Classes excluded from the mean get an empty field.
pub fn eval_row(e: &EvalPoint) -> String {
    let mut r = e.iteration.to_string();
    for v in &e.report.per_class {
        match v {
            Some(x) => {
                let _ = write!(r, ",{x}");
            }
            None => r.push(','),
        }
    }
    let _ = write!(r, ",{}", e.report.miou);
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub iteration: u64,
    pub report: MiouReport,
}

/// Everything a finished run produced, also written under `output_dir`.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
    pub state: TrainerState,
}

impl RunArtifacts {
    pub fn final_eval(&self) -> &EvalPoint {
        self.evals.last().expect("every run evaluates at least once")
    }

    pub fn metrics_at(&self, iteration: u64) -> Option<&StepMetrics> {
        self.metrics.iter().find(|m| m.iteration == iteration)
    }
}

#[derive(Serialize)]
struct Report<'a> {
    iteration: u64,
    miou: f64,
    classes: &'a [String],
    /// NaN marks a class excluded from the mean.
    per_class_iou: Vec<f64>,
    evaluated_images: usize,
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.data.dir {
        Some(dir) => Corpus::read(dir),
        None => generate_corpus(&cfg.data.corpus_spec()),
    }
}

/// Arg-max prediction per pixel, lowest class id on ties.
pub fn predict_labels(params: &ModelParams<f32>, image: &Tensor<f32>, cfg: &TrainConfig) -> Result<LabelMap> {
    Ok(PseudoLabel::from_logits(&predict_logits(params, image, cfg)?)?.labels)
}

pub fn evaluate(params: &ModelParams<f32>, samples: &[SegSample], cfg: &TrainConfig) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(cfg.net.num_classes);
    for s in samples {
        cm.accumulate(&predict_labels(params, &s.image, cfg)?, &s.label)?;
    }
    miou(&cm)
}

/// Existing CSV lines up to and including `iteration`, header first.
fn kept_lines(path: &Path, header: &str, iteration: u64) -> Result<String> {
    let mut out = format!("{header}\n");
    let Ok(text) = fs::read_to_string(path) else { return Ok(out) };
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Config(format!("{}: header does not match this run", path.display())));
    }
    for line in lines {
        let it: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Config(format!("{}: malformed row {line:?}", path.display())))?;
        if it <= iteration {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Train per `cfg` on `corpus`, evaluating on its held-out target split
/// and writing CSVs, checkpoints and a report to `cfg.run.output_dir`.
/// Target labels of the training split are dropped before training.
pub fn run_with_corpus(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<RunArtifacts> {
    cfg.validate()?;
    let tc = cfg.train_config(corpus.taxonomy.num_classes());
    tc.validate()?;
    if corpus.target_val.is_empty() {
        return Err(Error::Config("held-out target split is empty".into()));
    }
    let out = cfg.run.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&out, e))?;

    let state = match &cfg.run.resume {
        Some(dir) => {
            let (state, manifest) = load_checkpoint(dir)?;
            check_resume_compatible(&manifest.config, &tc)?;
            state
        }
        None => TrainerState::init(&tc.net, tc.seed)?,
    };
    let start = state.iteration;
    if start > tc.schedule.total_iters {
        return Err(Error::Checkpoint(format!(
            "checkpoint is at iteration {start}, beyond total_iters {}",
            tc.schedule.total_iters
        )));
    }
    let targets = corpus.target.iter().map(|s| s.image.clone()).collect();
    let mut trainer = Trainer::with_state(tc.clone(), corpus.taxonomy.clone(), corpus.source.clone(), targets, state)?;

    let metrics_path = out.join(METRICS_CSV);
    let eval_path = out.join(EVAL_CSV);
    let eval_head = eval_header(&corpus.taxonomy);
    let (mut metrics_csv, mut eval_csv) = if cfg.run.resume.is_some() {
        // A run resumed at its last iteration re-evaluates that iteration.
        let eval_upto = if start == tc.schedule.total_iters { start.checked_sub(1) } else { Some(start) };
        let evals = match eval_upto {
            Some(it) => kept_lines(&eval_path, &eval_head, it)?,
            None => format!("{eval_head}\n"),
        };
        (kept_lines(&metrics_path, METRICS_HEADER, start)?, evals)
    } else {
        (format!("{METRICS_HEADER}\n"), format!("{eval_head}\n"))
    };

    let total = tc.schedule.total_iters;
    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let eval_now = |it: u64| it == total || (cfg.run.eval_interval > 0 && it.is_multiple_of(cfg.run.eval_interval));
    let ckpt_now =
        |it: u64| cfg.run.checkpoint_interval > 0 && it.is_multiple_of(cfg.run.checkpoint_interval) && it < total;
    if total == 0 || start == total {
        let report = evaluate(&trainer.state().student, &corpus.target_val, &tc)?;
        evals.push(EvalPoint { iteration: start, report });
    }
    while !trainer.is_done() {
        let m = trainer.step()?;
        metrics_csv.push_str(&metrics_row(&m));
        metrics_csv.push('\n');
        metrics.push(m);
        let it = m.iteration;
        if eval_now(it) {
            let report = evaluate(&trainer.state().student, &corpus.target_val, &tc)?;
            evals.push(EvalPoint { iteration: it, report });
        }
        if ckpt_now(it) {
            save_checkpoint(&out.join(format!("checkpoint-{it:06}")), trainer.state(), &tc)?;
        }
    }
    for e in &evals {
        eval_csv.push_str(&eval_row(e));
        eval_csv.push('\n');
    }
    fs::write(&metrics_path, metrics_csv).map_err(|e| Error::io(&metrics_path, e))?;
    fs::write(&eval_path, eval_csv).map_err(|e| Error::io(&eval_path, e))?;
    save_checkpoint(&out.join(FINAL_CHECKPOINT), trainer.state(), &tc)?;

    let last = evals.last().expect("final iteration is always evaluated");
    let report = Report {
        iteration: last.iteration,
        miou: last.report.miou,
        classes: corpus.taxonomy.names(),
        per_class_iou: last.report.per_class.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
        evaluated_images: corpus.target_val.len(),
    };
    let text = toml::to_string(&report).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join(REPORT_FILE), text).map_err(|e| Error::io(&out, e))?;

    Ok(RunArtifacts { output_dir: out, metrics, evals, state: trainer.into_state() })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let corpus = load_corpus(cfg)?;
    run_with_corpus(cfg, &corpus)
}

/// Evaluate a saved checkpoint on a labelled dataset directory.
pub fn evaluate_checkpoint(checkpoint: &Path, samples: &[SegSample]) -> Result<(u64, MiouReport)> {
    let (state, manifest) = load_checkpoint(checkpoint)?;
    for s in samples {
        s.validate(manifest.config.net.num_classes)?;
    }
    let report = evaluate(&state.student, samples, &manifest.config)?;
    Ok((state.iteration, report))
}
