//! Confusion matrices and mIoU, then scoring a saved checkpoint.

use cluda::data::{generate_corpus, CorpusSpec, LabelMap, IGNORE};
use cluda::engine::{save_checkpoint, TrainConfig, TrainerState};
use cluda::eval::{confusion, evaluate_checkpoint, miou};
use cluda::network::NetConfig;

fn main() -> cluda::Result<()> {
    let gt = LabelMap::new(2, 4, vec![0, 0, 1, 1, 2, 2, IGNORE, IGNORE])?;
    let pred = LabelMap::new(2, 4, vec![0, 1, 1, 1, 2, 0, 2, 2])?;
    let cm = confusion(&pred, &gt, 4)?;
    let r = miou(&cm)?;
    for (c, iou) in r.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: IoU {v:.4}"),
            None => println!("class {c}: absent from prediction and ground truth, excluded"),
        }
    }
    println!("mIoU {:.4} over {} labelled pixels", r.miou, cm.total());

    // an untrained checkpoint scored on held-out target images
    let corpus = generate_corpus(&CorpusSpec {
        num_source: 1,
        num_target: 1,
        num_target_val: 6,
        ..CorpusSpec::desk_default(2)
    })?;
    let mut cfg = TrainConfig::desk_default(corpus.taxonomy.num_classes());
    cfg.net = NetConfig { widths: [4, 4, 8, 8], embed_dim: 8, num_classes: cfg.net.num_classes };
    let dir = std::env::temp_dir().join("cluda-example-checkpoint");
    save_checkpoint(&dir, &TrainerState::init(&cfg.net, 0)?, &cfg)?;
    let (it, report) = evaluate_checkpoint(&dir, &corpus.target_val)?;
    println!("checkpoint at iteration {it}: mIoU {:.4} on {} images", report.miou, corpus.target_val.len());
    Ok(())
}
