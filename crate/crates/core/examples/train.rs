//! End-to-end training run: generate data, train with the weighted
//! contrastive loss, evaluate on the held-out target split.
//!
//! cargo run --release --example train -- [iterations]

use cluda::eval::{ablation_profile, run_experiment, ExperimentConfig};

fn main() -> cluda::Result<()> {
    let iters: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut cfg = ablation_profile(ExperimentConfig::default());
    cfg.data.num_source = 60;
    cfg.data.num_target = 60;
    cfg.data.num_target_val = 20;
    cfg.schedule.total_iters = iters;
    cfg.schedule.warmup_iters = cfg.schedule.warmup_iters.min(iters / 4);
    cfg.run.eval_interval = (iters / 3).max(1);
    cfg.run.output_dir = "runs/example-train".into();
    println!("{}", cfg.to_toml()?);

    let run = run_experiment(&cfg)?;
    for m in run.metrics.iter().filter(|m| m.iteration % (iters / 6).max(1) == 0) {
        println!(
            "it {:>5}  ce_s {:.3}  ce_t {:.3}  cl_s {:.4}  cl_m {:.4}  fd {:.4}  Γ {:.3}",
            m.iteration, m.ce_s, m.ce_t, m.cl_s, m.cl_m, m.fd, m.gamma
        );
    }
    for e in &run.evals {
        println!("eval at {:>5}: mIoU {:.4}", e.iteration, e.report.miou);
    }
    println!("artifacts in {}", run.output_dir.display());
    Ok(())
}
