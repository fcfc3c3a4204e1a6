//! Pair masks observed on the pairs the trainer actually samples.

mod common;

use cluda::data::{generate_corpus, ClassTaxonomy};
use cluda::engine::{MultiresMode, Trainer};
use cluda::eval::ExperimentConfig;
use cluda::losses::{PairMode, PairSet, Resolution};

const BATCHES: usize = 100;

fn traced_pairs(mut cfg: ExperimentConfig, mode: PairMode, seed: u64) -> (ClassTaxonomy, Vec<PairSet>) {
    cfg.cl.pair_mode = mode;
    cfg.run.seed = seed;
    cfg.schedule.total_iters = BATCHES as u64;
    cfg.schedule.warmup_iters = 10;
    let corpus = generate_corpus(&cfg.data.corpus_spec()).unwrap();
    let tc = cfg.train_config(corpus.taxonomy.num_classes());
    let targets = corpus.target.iter().map(|s| s.image.clone()).collect();
    let mut trainer = Trainer::new(tc, corpus.taxonomy.clone(), corpus.source, targets).unwrap();
    let mut all = Vec::new();
    for _ in 0..BATCHES {
        all.extend(trainer.step_traced().unwrap().1);
    }
    (corpus.taxonomy, all)
}

fn count_pairs(sets: &[PairSet]) -> usize {
    sets.iter().map(|s| s.pairs().count()).sum()
}

fn cross_partition(tax: &ClassTaxonomy, sets: &[PairSet]) -> usize {
    sets.iter()
        .flat_map(|s| s.pairs())
        .filter(|(a, p)| tax.partition(a.class as usize) != tax.partition(p.class as usize))
        .count()
}

#[test]
fn masked_mode_never_pairs_stuff_with_thing() {
    let dir = tempfile::tempdir().unwrap();
    let (tax, sets) = traced_pairs(common::tiny_experiment(dir.path(), 1), PairMode::Masked, 3);
    assert!(count_pairs(&sets) > 1000, "too few pairs to be meaningful: {}", count_pairs(&sets));
    assert_eq!(cross_partition(&tax, &sets), 0);
}

#[test]
fn stuff_only_mode_never_touches_thing_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let (tax, sets) = traced_pairs(common::tiny_experiment(dir.path(), 1), PairMode::StuffOnly, 4);
    assert!(count_pairs(&sets) > 1000);
    let things = sets
        .iter()
        .flat_map(|s| s.pairs())
        .filter(|(a, p)| tax.is_thing(a.class as usize) || tax.is_thing(p.class as usize));
    assert_eq!(things.count(), 0);
}

/// The detector itself sees crossings when the mask is off.
#[test]
fn all_pairs_mode_does_cross_partitions() {
    let dir = tempfile::tempdir().unwrap();
    let (tax, sets) = traced_pairs(common::tiny_experiment(dir.path(), 1), PairMode::AllPairs, 5);
    assert!(cross_partition(&tax, &sets) > 0);
}

#[test]
fn multires_mode_masks_partitions_and_has_no_high_high_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (tax, sets) = traced_pairs(common::tiny_multires(dir.path(), 1), PairMode::Masked, 6);
    let hr_anchors = sets.iter().flat_map(|s| &s.anchors).filter(|a| a.resolution == Resolution::Hr).count();
    assert!(hr_anchors > 0, "no high-resolution anchors sampled");
    assert_eq!(cross_partition(&tax, &sets), 0);
    let hr_hr = sets
        .iter()
        .flat_map(|s| s.pairs())
        .filter(|(a, p)| a.resolution == Resolution::Hr && p.resolution == Resolution::Hr)
        .count();
    assert_eq!(hr_hr, 0);
}

#[test]
fn multires_sum_mode_also_has_no_high_high_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_multires(dir.path(), 1);
    cfg.mode.multires = MultiresMode::LrHrSum;
    let (_, sets) = traced_pairs(cfg, PairMode::Masked, 7);
    assert!(count_pairs(&sets) > 0);
    assert!(sets
        .iter()
        .flat_map(|s| s.pairs())
        .all(|(a, p)| !(a.resolution == Resolution::Hr && p.resolution == Resolution::Hr)));
}
