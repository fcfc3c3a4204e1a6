//! Target-split labels never reach training: poisoning them leaves every
//! trained parameter and every logged number bit-identical.

mod common;

use std::path::Path;

use cluda::data::{generate_corpus, Corpus, LabelMap, IGNORE};
use cluda::eval::{run_with_corpus, ExperimentConfig, FINAL_CHECKPOINT, METRICS_CSV};

fn poison_target_labels(corpus: &Corpus, seed: u8) -> Corpus {
    let mut c = corpus.clone();
    let k = c.taxonomy.num_classes() as u8;
    for (i, s) in c.target.iter_mut().enumerate() {
        let (h, w) = s.label.dims();
        let data = (0..h * w).map(|p| {
            if (p + i) % 7 == 0 {
                IGNORE
            } else {
                ((p * 31 + i * 7 + seed as usize) % k as usize) as u8
            }
        });
        s.label = LabelMap::new(h, w, data.collect()).unwrap();
    }
    c
}

fn train(cfg: &ExperimentConfig, corpus: &Corpus, out: &Path) -> Vec<(String, Vec<u8>)> {
    let mut cfg = cfg.clone();
    cfg.run.output_dir = out.to_path_buf();
    run_with_corpus(&cfg, corpus).unwrap();
    let mut snap = common::snapshot(&out.join(FINAL_CHECKPOINT));
    snap.push((METRICS_CSV.into(), std::fs::read(out.join(METRICS_CSV)).unwrap()));
    snap
}

fn assert_contract(cfg: ExperimentConfig) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&cfg.data.corpus_spec()).unwrap();
    let clean = train(&cfg, &corpus, &dir.path().join("clean"));
    let poisoned = poison_target_labels(&corpus, 3);
    assert_ne!(poisoned.target[0].label, corpus.target[0].label);
    let dirty = train(&cfg, &poisoned, &dir.path().join("poisoned"));
    assert_eq!(clean.len(), dirty.len());
    for ((na, a), (nb, b)) in clean.iter().zip(&dirty) {
        assert_eq!(na, nb);
        assert!(a == b, "{na} differs after poisoning target labels");
    }
}

#[test]
fn single_resolution_ignores_target_labels() {
    let dir = tempfile::tempdir().unwrap();
    assert_contract(common::tiny_experiment(dir.path(), 12));
}

#[test]
fn multi_resolution_ignores_target_labels() {
    let dir = tempfile::tempdir().unwrap();
    assert_contract(common::tiny_multires(dir.path(), 8));
}

/// The comparison is sensitive: changing source labels does change the weights.
#[test]
fn source_labels_do_reach_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_experiment(dir.path(), 6);
    let corpus = generate_corpus(&cfg.data.corpus_spec()).unwrap();
    let clean = train(&cfg, &corpus, &dir.path().join("a"));
    let mut altered = corpus.clone();
    for s in &mut altered.source {
        for l in s.label.data_mut() {
            if *l != IGNORE {
                *l = (*l + 1) % 8;
            }
        }
    }
    let changed = train(&cfg, &altered, &dir.path().join("b"));
    assert!(clean.iter().zip(&changed).any(|(a, b)| a.1 != b.1));
}
