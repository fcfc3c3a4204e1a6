//! Independent oracles written in test code, plus the library's own oracle suite.

use cluda::data::{rcs_pick, rcs_probabilities, ClassTaxonomy, Domain, LabelMap, SegSample, IGNORE};
use cluda::engine::{classmix_with_classes, ema_update, lr_at, ScheduleConfig};
use cluda::eval::{confusion, miou};
use cluda::losses::{
    confidence_weight, grid_features, info_nce_mean, mixed_cl, source_cl, ClConfig, GridLabels, PairSet, Resolution,
};
use cluda::network::{ModelParams, NetConfig};
use cluda::tensor::{Graph, Tensor};
use cluda::verify::oracle_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `Σ_k coeff_k · mean_p [logsumexp(s_p, s_n…) − s_p]`, the log-sum-exp form of
/// InfoNCE, on plain row vectors.
fn nce_oracle(rows: &[Vec<f64>], pairs: &PairSet, coeffs: &[f64], tau: f64) -> f64 {
    let sim = |i: usize, j: usize| rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    pairs
        .anchors
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let negs: Vec<f64> = pairs.negatives[k].iter().map(|&n| sim(a.row, n)).collect();
            let per: f64 = pairs.positives[k]
                .iter()
                .map(|&p| {
                    let s = sim(a.row, p);
                    let mut all = negs.clone();
                    all.push(s);
                    log_sum_exp(&all) - s
                })
                .sum();
            coeffs[k] * per / pairs.positives[k].len() as f64
        })
        .sum()
}

fn feature_rows(g: &Graph<f64>, v: cluda::tensor::Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

#[test]
fn info_nce_closed_form_two_vectors() {
    // anchor e1, positive e1, negative e2, τ = 1: −ln(e / (e + 1)) = ln(1 + 1/e).
    let mut g = Graph::<f64>::new();
    let feats = g.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
    let mut pairs = PairSet::default();
    pairs.anchors.push(cluda::losses::Anchor {
        row: 0,
        class: 0,
        origin: Domain::Source,
        resolution: Resolution::Lr,
        lr_cell: 0,
    });
    pairs.positives.push(vec![1]);
    pairs.negatives.push(vec![2]);
    let entry = |class| cluda::losses::PoolEntry { class, origin: Domain::Source, resolution: Resolution::Lr };
    pairs.pool = vec![entry(0), entry(0), entry(1)];
    let l = info_nce_mean(&mut g, feats, feats, &pairs, 1.0).unwrap();
    let expect = (1.0 + (-1f64).exp()).ln();
    assert!((g.value(l).data()[0] - expect).abs() < 1e-14);
}

#[test]
fn source_and_mixed_losses_match_log_sum_exp_oracle() {
    let tax = ClassTaxonomy::desk_default();
    let cfg =
        ClConfig { anchors_per_class: 5, positives_per_anchor: 4, negatives_per_anchor: 7, ..ClConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (h, w, e) = (rng.gen_range(3..8), rng.gen_range(3..8), rng.gen_range(2..10));
        let a = h * w;
        let labels: Vec<u8> = (0..a).map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..8) }).collect();
        let origins: Vec<Domain> =
            (0..a).map(|_| if rng.gen_bool(0.5) { Domain::Source } else { Domain::Target }).collect();
        let src_grid = GridLabels::uniform(h, w, labels.clone(), Domain::Source, Resolution::Lr).unwrap();
        let mix_grid = GridLabels::new(h, w, labels, origins, Resolution::Lr).unwrap();
        let x = Tensor::<f64>::from_fn(&[h, w, e], |_| rng.gen_range(-1.0..1.0));
        let gamma: f64 = rng.gen();
        let seed: u64 = rng.gen();

        let mut g = Graph::<f64>::new();
        let v = g.constant(x.clone());
        let f = grid_features(&mut g, v, h, w).unwrap();
        let rows = feature_rows(&g, f);
        let (ls, ps) = source_cl(&mut g, f, &src_grid, &tax, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let want = nce_oracle(&rows, &ps, &vec![1.0 / a as f64; ps.len()], cfg.tau);
        assert!((g.value(ls).data()[0] - want).abs() <= 1e-10 * want.abs().max(1.0));

        let (lm, pm) = mixed_cl(&mut g, f, &mix_grid, gamma, &tax, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let coeffs: Vec<f64> = pm
            .anchors
            .iter()
            .map(|an| if an.origin == Domain::Target { gamma / a as f64 } else { 1.0 / a as f64 })
            .collect();
        let want = nce_oracle(&rows, &pm, &coeffs, cfg.tau);
        assert!((g.value(lm).data()[0] - want).abs() <= 1e-10 * want.abs().max(1.0));
    }
}

#[test]
fn confidence_weight_counts_pixels_above_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (n, c) = (rng.gen_range(1..60), rng.gen_range(2..6));
        let beta = rng.gen_range(0.3..0.99);
        let mut probs = Vec::new();
        let mut above = 0;
        for _ in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0f64..1.0).powi(4)).collect();
            let s: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|r| r / s).collect();
            if row.iter().any(|&p| p > beta) {
                above += 1;
            }
            probs.extend(row);
        }
        let t = Tensor::new(vec![1, n, c], probs).unwrap();
        assert_eq!(confidence_weight(&t, beta).unwrap(), above as f64 / n as f64);
    }
}

#[test]
fn miou_hand_computed() {
    // gt   0 0 1 | 1 2 255     pred 0 1 1 | 1 0 2
    // class 0: tp 1, fp 1, fn 1 → 1/3; class 1: tp 2, fp 1 → 2/3; class 2: tp 0, fp 0, fn 1 → 0.
    let gt = LabelMap::new(2, 3, vec![0, 0, 1, 1, 2, IGNORE]).unwrap();
    let pred = LabelMap::new(2, 3, vec![0, 1, 1, 1, 0, 2]).unwrap();
    let r = miou(&confusion(&pred, &gt, 4).unwrap()).unwrap();
    assert_eq!(r.per_class[3], None);
    let expect = [1.0 / 3.0, 2.0 / 3.0, 0.0];
    for (k, e) in expect.iter().enumerate() {
        assert!((r.per_class[k].unwrap() - e).abs() < 1e-15);
    }
    assert!((r.miou - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn ema_matches_unrolled_recurrence() {
    let net = NetConfig { widths: [2, 2, 2, 2], embed_dim: 2, num_classes: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut teacher = ModelParams::<f64>::init(&net, 1).unwrap();
    let students: Vec<ModelParams<f64>> = (0..6).map(|i| ModelParams::init(&net, 10 + i).unwrap()).collect();
    let alphas: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
    let t0 = teacher.clone();
    for (s, &a) in students.iter().zip(&alphas) {
        ema_update(&mut teacher, s, a).unwrap();
    }
    // θ_T = Π α_j · θ_0 + Σ_j (1−α_j) Π_{i>j} α_i · θ_Sj
    for (name, t) in teacher.iter() {
        for (idx, &got) in t.data().iter().enumerate() {
            let mut want = alphas.iter().product::<f64>() * t0.get(name).unwrap().data()[idx];
            for j in 0..students.len() {
                let tail: f64 = alphas[j + 1..].iter().product();
                want += (1.0 - alphas[j]) * tail * students[j].get(name).unwrap().data()[idx];
            }
            assert!((got - want).abs() < 1e-12, "{name}[{idx}]");
        }
    }
}

#[test]
fn schedule_closed_form() {
    let s = ScheduleConfig {
        warmup_iters: 100,
        total_iters: 1100,
        warmup_ratio: 0.1,
        poly_power: 2.0,
        ..ScheduleConfig::default()
    };
    let (e, d) = lr_at(50, &s).unwrap();
    assert!((e - 6e-5 * 0.55).abs() < 1e-18 && (d - 6e-4 * 0.55).abs() < 1e-17);
    let (e, _) = lr_at(600, &s).unwrap();
    assert!((e - 6e-5 * 0.25).abs() < 1e-18);
    assert_eq!(lr_at(1100, &s).unwrap(), (0.0, 0.0));
}

#[test]
fn rare_class_sampling_follows_temperature_softmax() {
    let freqs: [f64; 4] = [0.5, 0.3, 0.15, 0.05];
    let t: f64 = 0.2;
    let z: f64 = freqs.iter().map(|f| ((1.0 - f) / t).exp()).sum();
    let want: Vec<f64> = freqs.iter().map(|f| ((1.0 - f) / t).exp() / z).collect();
    let got = rcs_probabilities(&freqs, t).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-14);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 40_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[rcs_pick(&freqs, t, &mut rng).unwrap()] += 1;
    }
    for (c, w) in counts.iter().zip(&want) {
        // 5σ binomial band
        let sd = (w * (1.0 - w) / n as f64).sqrt();
        assert!((*c as f64 / n as f64 - w).abs() < 5.0 * sd + 1e-9, "{counts:?} vs {want:?}");
    }
}

#[test]
fn classmix_hand_example() {
    // one grey value per pixel: source 0.0 0.1 0.2 0.3, target 0.5 0.6 0.7 0.8
    let src_img = Tensor::from_fn(&[1, 4, 3], |i| (i / 3) as f32 * 0.1);
    let tgt_img = Tensor::from_fn(&[1, 4, 3], |i| 0.5 + (i / 3) as f32 * 0.1);
    let src =
        SegSample::new("s", Domain::Source, src_img, LabelMap::new(1, 4, vec![3, 1, 3, IGNORE]).unwrap()).unwrap();
    let pseudo = LabelMap::new(1, 4, vec![0, 0, 2, 2]).unwrap();
    let mix = classmix_with_classes(&src, &tgt_img, &pseudo, &[3]).unwrap();
    let grey: Vec<f32> = mix.image.data().chunks(3).map(|p| p[0]).collect();
    assert_eq!(grey, [0.0, 0.6, 0.2, 0.8]);
    assert_eq!(mix.label.data(), &[3, 0, 3, 2]);
    assert_eq!(mix.origin, vec![true, false, true, false]);
}

#[test]
fn library_oracle_suite_passes() {
    for r in oracle_check(21, 50).unwrap() {
        assert!(r.pass(), "{r}");
    }
}
