//! Class-aware pair sampling and the contrastive losses on a labelled grid.

use cluda::data::{ClassTaxonomy, Domain};
use cluda::losses::{
    confidence_weight, grid_features, mixed_cl, source_cl, ClConfig, GridLabels, PairMode, Resolution,
};
use cluda::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cluda::Result<()> {
    let tax = ClassTaxonomy::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w, e) = (8, 8, 16);
    // top half sky/road (stuff), bottom half car/person (thing) plus road
    let labels: Vec<u8> = (0..h * w).map(|i| if i < 32 { [0, 3][i % 2] } else { [5, 6, 3][i % 3] }).collect();
    let origins: Vec<Domain> = (0..h * w).map(|i| if i % 4 == 0 { Domain::Target } else { Domain::Source }).collect();
    let src = GridLabels::uniform(h, w, labels.clone(), Domain::Source, Resolution::Lr)?;
    let mixed = GridLabels::new(h, w, labels, origins, Resolution::Lr)?;
    let feats = Tensor::<f64>::from_fn(&[h, w, e], |_| rng.gen_range(-1.0..1.0));

    for mode in [PairMode::AllPairs, PairMode::StuffOnly, PairMode::Masked] {
        let cfg = ClConfig { pair_mode: mode, anchors_per_class: 4, ..ClConfig::default() };
        let mut g = Graph::new();
        let x = g.param(feats.clone());
        let f = grid_features(&mut g, x, h, w)?;
        let (ls, pairs) = source_cl(&mut g, f, &src, &tax, &cfg, &mut ChaCha8Rng::seed_from_u64(2))?;
        let cross =
            pairs.pairs().filter(|(a, p)| tax.partition(a.class as usize) != tax.partition(p.class as usize)).count();
        println!(
            "{mode:?}: {} anchors, {} pairs, {cross} stuff-thing pairs, source loss {:.4}",
            pairs.len(),
            pairs.pairs().count(),
            g.value(ls).item()?
        );
    }

    // Γ from teacher probabilities, then the mixed loss weighted by it
    let probs = Tensor::<f64>::from_fn(&[h, w, 2], |i| {
        if i % 2 == 0 {
            [0.99, 0.6][(i / 2) % 2]
        } else {
            [0.01, 0.4][(i / 2) % 2]
        }
    });
    let cfg = ClConfig::default();
    let gamma = confidence_weight(&probs, cfg.beta)?;
    let mut g = Graph::new();
    let x = g.param(feats);
    let f = grid_features(&mut g, x, h, w)?;
    let (lm, pairs) = mixed_cl(&mut g, f, &mixed, gamma, &tax, &cfg, &mut rng)?;
    let target_anchors = pairs.anchors.iter().filter(|a| a.origin == Domain::Target).count();
    println!(
        "Γ = {gamma}; mixed loss {:.4} over {} anchors ({target_anchors} target)",
        g.value(lm).item()?,
        pairs.len()
    );
    Ok(())
}
