//! A miniature ablation: every preset's configurations over two seeds, with
//! the expected orderings checked. Short schedules, so orderings may not hold.
//!
//! cargo run --release --example ablation -- [preset] [iterations]

use cluda::data::generate_corpus;
use cluda::eval::{ablate, ablation_profile, preset_runs, worker_threads, ExperimentConfig, Preset};

fn main() -> cluda::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset: Preset = args.next().as_deref().unwrap_or("table4a").parse()?;
    let iters: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let mut base = ablation_profile(ExperimentConfig::default());
    base.data.num_source = 24;
    base.data.num_target = 24;
    base.data.num_target_val = 8;
    base.schedule.total_iters = iters;
    base.schedule.warmup_iters = iters / 4;
    base.run.eval_interval = 0;

    for (name, cfg) in preset_runs(preset, &base) {
        println!(
            "{name}: cl_on={} weighted={} pairs={:?} multires={:?} embed={}",
            cfg.mode.cl_on, cfg.mode.cl_weighted, cfg.cl.pair_mode, cfg.mode.multires, cfg.model.embed_dim
        );
    }
    let corpus = generate_corpus(&base.data.corpus_spec())?;
    let out = std::env::temp_dir().join(format!("cluda-example-ablate-{preset}"));
    let summary = ablate(preset, &[1, 2], &base, &corpus, &out, worker_threads()?)?;
    print!("{}", summary.table());
    Ok(())
}
