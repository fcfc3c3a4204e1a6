//! Analytic gradients against central differences (f64, eps 1e-5).

use cluda::data::{ClassTaxonomy, Domain};
use cluda::losses::{grid_features, source_cl, ClConfig, GridLabels, Resolution};
use cluda::tensor::{Graph, Tensor};
use cluda::verify::{grad_check, GRAD_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_case_passes_on_twenty_instances() {
    let results = grad_check(7, 20).unwrap();
    let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
    for needle in [
        "cross-entropy",
        "info-nce",
        "source contrastive",
        "mixed contrastive",
        "total loss",
        "multi-resolution",
        "head classifier",
        "head feature weight",
        "head fusion",
        "head encoder",
    ] {
        assert!(names.iter().any(|n| n.contains(needle)), "no gradient case for {needle}");
    }
    for r in &results {
        assert_eq!(r.instances, 20);
        assert!(r.pass(), "{r}");
    }
}

#[test]
fn a_second_seed_also_passes() {
    for r in grad_check(12345, 20).unwrap() {
        assert!(r.pass(), "{r}");
    }
}

/// Hand-rolled central differences on the source contrastive loss, without
/// the library's gradient-check helper.
#[test]
fn source_loss_matches_hand_rolled_differences() {
    let tax = ClassTaxonomy::desk_default();
    let cfg =
        ClConfig { anchors_per_class: 4, positives_per_anchor: 3, negatives_per_anchor: 6, ..ClConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (h, w, e) = (rng.gen_range(2..9), rng.gen_range(2..9), rng.gen_range(2..9));
        let labels: Vec<u8> = (0..h * w).map(|_| [0u8, 2, 5, 7][rng.gen_range(0..4)]).collect();
        let grid = GridLabels::uniform(h, w, labels, Domain::Source, Resolution::Lr).unwrap();
        let x = Tensor::<f64>::from_fn(&[h, w, e], |_| rng.gen_range(-1.0..1.0));
        let pair_seed: u64 = rng.gen();
        let loss = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let f = grid_features(&mut g, v, h, w).unwrap();
            let (l, pairs) =
                source_cl(&mut g, f, &grid, &tax, &cfg, &mut ChaCha8Rng::seed_from_u64(pair_seed)).unwrap();
            let value = g.value(l).data()[0];
            if pairs.is_empty() {
                return (value, None);
            }
            let grads = g.backward(l).unwrap();
            (value, grads.get(v).cloned())
        };
        let (_, analytic) = loss(&x);
        let Some(analytic) = analytic else { continue };
        let eps = 1e-5;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&p).0 - loss(&m).0) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            assert!(rel <= GRAD_TOL, "element {i}: analytic {a} vs fd {fd}");
        }
    }
}
