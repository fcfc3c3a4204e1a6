#![allow(dead_code)]

use std::path::Path;

use cluda::engine::MultiresMode;
use cluda::eval::ExperimentConfig;

/// Small corpus, small model, short schedule: a full run in a few seconds.
pub fn tiny_experiment(out: &Path, iters: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.num_source = 12;
    c.data.num_target = 12;
    c.data.num_target_val = 4;
    c.model.widths = [4, 4, 8, 8];
    c.model.embed_dim = 8;
    c.cl.anchors_per_class = 8;
    c.cl.positives_per_anchor = 4;
    c.cl.negatives_per_anchor = 8;
    c.schedule.total_iters = iters;
    c.schedule.warmup_iters = iters / 4;
    c.schedule.ema_alpha = 0.9;
    c.run.eval_interval = (iters / 2).max(1);
    c.run.output_dir = out.to_path_buf();
    c
}

pub fn tiny_multires(out: &Path, iters: u64) -> ExperimentConfig {
    let mut c = tiny_experiment(out, iters);
    c.mode.multires = MultiresMode::LrHrWeighted;
    c.mode.entropy_crop = true;
    c
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}
