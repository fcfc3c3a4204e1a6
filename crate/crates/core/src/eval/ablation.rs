use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use super::config::ExperimentConfig;
use super::experiment::{run_with_corpus, EvalPoint};
use crate::data::Corpus;
use crate::engine::{MultiresMode, StepMetrics};
use crate::error::{Error, Result};
use crate::losses::PairMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// No CL, unweighted CL, confidence-weighted CL.
    Table4a,
    /// All pairs, stuff-stuff only, stuff-stuff plus thing-thing.
    Table4b,
    /// CE-only multires baseline and the three LR/HR contrastive combinations.
    Multires,
    /// Embedding width sweep.
    Embed,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Table4a, Preset::Table4b, Preset::Multires, Preset::Embed];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table4a => "table4a",
            Preset::Table4b => "table4b",
            Preset::Multires => "multires",
            Preset::Embed => "embed",
        }
    }

    /// `(worse, better, strict)` pairs of the expected ordering.
    fn expected(self) -> &'static [(&'static str, &'static str, bool)] {
        match self {
            Preset::Table4a => &[("unweighted-cl", "weighted-cl", true), ("no-cl", "weighted-cl", true)],
            Preset::Table4b => {
                &[("all-pairs", "s-s+t-t", false), ("all-pairs", "s-s", false), ("s-s", "s-s+t-t", false)]
            }
            Preset::Multires => &[
                ("lr-only", "weighted-lr-hr", false),
                ("lr-only", "lr-hr", false),
                ("lr-hr", "weighted-lr-hr", false),
                ("baseline", "weighted-lr-hr", false),
            ],
            Preset::Embed => &[("embed-256", "embed-512", false), ("embed-256", "embed-768", false)],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown ablation preset {s:?} (expected table4a, table4b, multires or embed)"))
        })
    }
}

/// Desk-scale ablation settings on top of `base`: a compact model, and
/// warmup and EMA horizon shortened in proportion to a 2000-iteration run.
pub fn ablation_profile(mut base: ExperimentConfig) -> ExperimentConfig {
    base.model.widths = [16, 32, 64, 128];
    base.model.embed_dim = 64;
    base.schedule.total_iters = 2000;
    base.schedule.warmup_iters = 75;
    base.schedule.ema_alpha = 0.98;
    base
}

/// Named configurations of `preset`, derived from `base`.
pub fn preset_runs(preset: Preset, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |name: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (name.to_string(), c)
    };
    match preset {
        Preset::Table4a => vec![
            with("no-cl", &|c| c.mode.cl_on = false),
            with("unweighted-cl", &|c| {
                c.mode.cl_on = true;
                c.mode.cl_weighted = false;
            }),
            with("weighted-cl", &|c| {
                c.mode.cl_on = true;
                c.mode.cl_weighted = true;
            }),
        ],
        Preset::Table4b => {
            [("all-pairs", PairMode::AllPairs), ("s-s", PairMode::StuffOnly), ("s-s+t-t", PairMode::Masked)]
                .into_iter()
                .map(|(name, pm)| {
                    with(name, &|c| {
                        c.mode.cl_on = true;
                        c.mode.cl_weighted = true;
                        c.cl.pair_mode = pm;
                    })
                })
                .collect()
        }
        Preset::Multires => [
            ("baseline", MultiresMode::LrHrWeighted, false),
            ("lr-only", MultiresMode::LrOnly, true),
            ("lr-hr", MultiresMode::LrHrSum, true),
            ("weighted-lr-hr", MultiresMode::LrHrWeighted, true),
        ]
        .into_iter()
        .map(|(name, mr, cl)| {
            with(name, &|c| {
                c.mode.multires = mr;
                c.mode.cl_on = cl;
                c.mode.cl_weighted = true;
            })
        })
        .collect(),
        Preset::Embed => {
            [256, 512, 768, 1024].into_iter().map(|e| with(&format!("embed-{e}"), &|c| c.model.embed_dim = e)).collect()
        }
    }
}

/// One seed of one configuration.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub miou: f64,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub runs: Vec<SeedRun>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingCheck {
    pub worse: String,
    pub better: String,
    pub strict: bool,
    pub pass: bool,
}

impl fmt::Display for OrderingCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = if self.strict { "<" } else { "<=" };
        write!(f, "{} {op} {}: {}", self.worse, self.better, if self.pass { "pass" } else { "FAIL" })
    }
}

#[derive(Clone, Debug)]
pub struct AblationSummary {
    pub preset: Preset,
    pub rows: Vec<AblationRow>,
    pub checks: Vec<OrderingCheck>,
}

impl AblationSummary {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn check(&self, worse: &str, better: &str) -> Option<&OrderingCheck> {
        self.checks.iter().find(|c| c.worse == worse && c.better == better)
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Plain-text table: one row per configuration, then the ordering checks.
    pub fn table(&self) -> String {
        let mut s = format!("preset {}\n{:<16} {:>8} {:>8}  per-seed\n", self.preset, "config", "mean", "std");
        for r in &self.rows {
            let seeds: Vec<String> = r.runs.iter().map(|x| format!("{}:{:.4}", x.seed, x.miou)).collect();
            s.push_str(&format!("{:<16} {:>8.4} {:>8.4}  {}\n", r.name, r.mean, r.std, seeds.join(" ")));
        }
        for c in &self.checks {
            s.push_str(&format!("{c}\n"));
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Worker count: `CLUDA_THREADS` if set, otherwise the available cores.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("CLUDA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("CLUDA_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Finished runs keyed by configuration, so presets that share a
/// configuration train it once.
#[derive(Debug, Default)]
pub struct RunCache {
    runs: BTreeMap<String, SeedRun>,
}

impl RunCache {
    fn key(cfg: &ExperimentConfig) -> Result<String> {
        let mut c = cfg.clone();
        c.run.output_dir = PathBuf::new();
        c.run.resume = None;
        c.to_toml()
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Run every configuration of `preset` for every seed on `corpus`, with
/// at most `threads` runs in flight. Each run writes its artifacts under
/// `out_root/<config>/seed-<seed>`.
pub fn ablate(
    preset: Preset,
    seeds: &[u64],
    base: &ExperimentConfig,
    corpus: &Corpus,
    out_root: &Path,
    threads: usize,
) -> Result<AblationSummary> {
    ablate_cached(preset, seeds, base, corpus, out_root, threads, &mut RunCache::default())
}

/// [`ablate`] reusing runs from `cache` and adding the new ones to it.
/// A reused run keeps the artifacts written when it first ran.
pub fn ablate_cached(
    preset: Preset,
    seeds: &[u64],
    base: &ExperimentConfig,
    corpus: &Corpus,
    out_root: &Path,
    threads: usize,
    cache: &mut RunCache,
) -> Result<AblationSummary> {
    let names: Vec<String> = preset_runs(preset, base).into_iter().map(|(n, _)| n).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    ablate_subset(preset, &names, seeds, base, corpus, out_root, threads, cache)
}

/// [`ablate_cached`] restricted to the named configurations of `preset`.
/// Only orderings between two selected configurations are checked.
#[allow(clippy::too_many_arguments)]
pub fn ablate_subset(
    preset: Preset,
    names: &[&str],
    seeds: &[u64],
    base: &ExperimentConfig,
    corpus: &Corpus,
    out_root: &Path,
    threads: usize,
    cache: &mut RunCache,
) -> Result<AblationSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    let all = preset_runs(preset, base);
    if let Some(bad) = names.iter().find(|n| !all.iter().any(|(m, _)| m == *n)) {
        return Err(Error::Config(format!("preset {preset} has no configuration {bad:?}")));
    }
    let configs: Vec<(String, ExperimentConfig)> =
        all.into_iter().filter(|(n, _)| names.contains(&n.as_str())).collect();
    let jobs: Vec<(usize, u64, ExperimentConfig)> = configs
        .iter()
        .enumerate()
        .flat_map(|(ci, (name, cfg))| {
            seeds.iter().map(move |&seed| {
                let mut c = cfg.clone();
                c.run.seed = seed;
                c.run.resume = None;
                c.run.output_dir = out_root.join(name).join(format!("seed-{seed}"));
                (ci, seed, c)
            })
        })
        .collect();
    let keys = jobs.iter().map(|(_, _, c)| RunCache::key(c)).collect::<Result<Vec<_>>>()?;
    let todo: Vec<usize> = (0..jobs.len()).filter(|&j| !cache.runs.contains_key(&keys[j])).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SeedRun>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, todo.len().max(1)) {
            scope.spawn(|| {
                while let Some(&j) = todo.get(next.fetch_add(1, AtomicOrdering::SeqCst)) {
                    let (_, seed, cfg) = &jobs[j];
                    let r = run_with_corpus(cfg, corpus).map(|a| SeedRun {
                        seed: *seed,
                        miou: a.final_eval().report.miou,
                        metrics: a.metrics,
                        evals: a.evals,
                    });
                    results.lock().expect("no worker panics while holding the lock")[j] = Some(r);
                }
            });
        }
    });
    let mut rows: Vec<AblationRow> = configs
        .iter()
        .map(|(name, _)| AblationRow { name: name.clone(), runs: Vec::new(), mean: 0.0, std: 0.0 })
        .collect();
    let results = results.into_inner().expect("workers joined");
    for (((ci, _, _), r), key) in jobs.iter().zip(results).zip(keys) {
        let run = match r {
            Some(r) => {
                let run = r?;
                cache.runs.insert(key, run.clone());
                run
            }
            None => cache.runs[&key].clone(),
        };
        rows[*ci].runs.push(run);
    }
    for row in &mut rows {
        let xs: Vec<f64> = row.runs.iter().map(|r| r.miou).collect();
        (row.mean, row.std) = mean_std(&xs);
    }
    let mean_of = |n: &str| rows.iter().find(|r| r.name == n).map(|r| r.mean);
    let checks = preset
        .expected()
        .iter()
        .filter_map(|&(worse, better, strict)| {
            let (w, b) = (mean_of(worse)?, mean_of(better)?);
            Some(OrderingCheck {
                worse: worse.into(),
                better: better.into(),
                strict,
                pass: if strict { b > w } else { b >= w },
            })
        })
        .collect();
    Ok(AblationSummary { preset, rows, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("table9".parse::<Preset>().is_err());
    }

    #[test]
    fn preset_configurations() {
        let base = ExperimentConfig::default();
        let names = |p| preset_runs(p, &base).into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        assert_eq!(names(Preset::Table4a), ["no-cl", "unweighted-cl", "weighted-cl"]);
        assert_eq!(names(Preset::Table4b), ["all-pairs", "s-s", "s-s+t-t"]);
        assert_eq!(names(Preset::Multires), ["baseline", "lr-only", "lr-hr", "weighted-lr-hr"]);
        let embeds: Vec<usize> = preset_runs(Preset::Embed, &base).iter().map(|(_, c)| c.model.embed_dim).collect();
        assert_eq!(embeds, [256, 512, 768, 1024]);
        let t4b = preset_runs(Preset::Table4b, &base);
        assert_eq!(
            t4b.iter().map(|(_, c)| c.cl.pair_mode).collect::<Vec<_>>(),
            [PairMode::AllPairs, PairMode::StuffOnly, PairMode::Masked]
        );
        let mr = preset_runs(Preset::Multires, &base);
        assert!(!mr[0].1.mode.cl_on && mr[0].1.mode.multires != MultiresMode::Off);
    }

    #[test]
    fn subset_runs_share_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = ExperimentConfig {
            data: crate::eval::DataConfig { num_source: 4, num_target: 4, num_target_val: 2, ..Default::default() },
            ..Default::default()
        };
        base.model.widths = [2, 2, 4, 4];
        base.model.embed_dim = 4;
        base.schedule.total_iters = 2;
        base.schedule.warmup_iters = 1;
        base.run.eval_interval = 0;
        let corpus = crate::data::generate_corpus(&base.data.corpus_spec()).unwrap();
        let mut cache = RunCache::default();
        let s =
            ablate_subset(Preset::Table4a, &["no-cl", "weighted-cl"], &[1], &base, &corpus, dir.path(), 1, &mut cache)
                .unwrap();
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.checks.len(), 1);
        assert!(s.check("no-cl", "weighted-cl").is_some());
        assert_eq!(cache.len(), 2);
        // the masked table4b configuration is table4a's weighted run: one new run
        let t =
            ablate_subset(Preset::Table4b, &["all-pairs", "s-s+t-t"], &[1], &base, &corpus, dir.path(), 1, &mut cache)
                .unwrap();
        assert_eq!(cache.len(), 3);
        assert_eq!(t.row("s-s+t-t").unwrap().mean, s.row("weighted-cl").unwrap().mean);
        assert!(ablate_subset(Preset::Table4a, &["nope"], &[1], &base, &corpus, dir.path(), 1, &mut cache).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
