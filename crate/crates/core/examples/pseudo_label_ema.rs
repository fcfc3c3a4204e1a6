//! EMA teacher and confidence weighting: a few training steps, watching the
//! teacher drift toward the student and Γ respond.

use cluda::data::{generate_corpus, CorpusSpec};
use cluda::engine::{confidence_fraction, ema_update, pseudo_label, TrainConfig, Trainer};
use cluda::network::NetConfig;

fn main() -> cluda::Result<()> {
    let corpus = generate_corpus(&CorpusSpec {
        num_source: 16,
        num_target: 16,
        num_target_val: 1,
        ..CorpusSpec::desk_default(4)
    })?;
    let mut cfg = TrainConfig::desk_default(corpus.taxonomy.num_classes());
    cfg.net = NetConfig { widths: [8, 8, 16, 16], embed_dim: 16, num_classes: cfg.net.num_classes };
    cfg.schedule.total_iters = 200;
    cfg.schedule.warmup_iters = 10;
    cfg.schedule.lr_encoder = 1e-3;
    cfg.schedule.lr_decoder = 1e-2;
    cfg.schedule.ema_alpha = 0.9;
    cfg.cl.beta = 0.5;
    let targets: Vec<_> = corpus.target.iter().map(|s| s.image.clone()).collect();
    let probe = targets[0].clone();
    let mut trainer = Trainer::new(cfg, corpus.taxonomy.clone(), corpus.source, targets)?;

    println!("{:>4} {:>10} {:>8} {:>10}", "iter", "|T − S|∞", "Γ", "conf>0.5");
    while !trainer.is_done() {
        let m = trainer.step()?;
        if m.iteration % 25 == 0 {
            let s = trainer.state();
            let p = pseudo_label(&s.teacher, &probe)?;
            println!(
                "{:>4} {:>10.2e} {:>8.3} {:>10.3}",
                m.iteration,
                s.teacher.max_abs_diff(&s.student),
                m.gamma,
                confidence_fraction(&p, 0.5)
            );
        }
    }

    // one EMA update by hand: θ_T ← α θ_T + (1 − α) θ_S
    let s = trainer.state();
    let mut teacher = s.teacher.clone();
    let before = teacher.max_abs_diff(&s.student);
    ema_update(&mut teacher, &s.student, 0.5)?;
    println!("after one α = 0.5 update the gap halves: {before:.3e} → {:.3e}", teacher.max_abs_diff(&s.student));
    Ok(())
}
