//! Multi-resolution views: LR/HR crops, entropy-chosen crop, sliding-window
//! inference and the LR↔HR grid correspondence behind the δ weighting.

use cluda::data::{generate_corpus, CorpusSpec};
use cluda::engine::softmax_probs;
use cluda::multires::{
    align_delta, bundle_at, entropy_crop, entropy_map, footprint, make_crops, sliding_logits, MultiresConfig,
};
use cluda::network::{infer, ModelParams, NetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cluda::Result<()> {
    let corpus = generate_corpus(&CorpusSpec {
        num_source: 1,
        num_target: 1,
        num_target_val: 1,
        ..CorpusSpec::desk_default(9)
    })?;
    let image = &corpus.target[0].image;
    let (h, w, _) = image.dims3()?;
    let mr = MultiresConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let bundle = make_crops(image, mr.lr_scale, mr.hr_dims(h, w), &mut rng)?;
    println!("image {h}×{w}: LR view {:?}, random HR crop {:?}", bundle.lr_image.shape(), bundle.hr_box);

    // the teacher's most uncertain window becomes the HR crop
    let net = NetConfig { widths: [8, 8, 16, 16], embed_dim: 16, num_classes: corpus.taxonomy.num_classes() };
    let teacher = ModelParams::<f32>::init(&net, 1)?;
    let (_, logits) = infer(&teacher, image)?;
    let ent = entropy_map(&softmax_probs(&logits)?, net.num_classes)?;
    let best = entropy_crop(&ent, h, w, mr.entropy_crop_dims(h, w), mr.entropy_stride(h, w))?;
    let chosen = bundle_at(image, mr.lr_scale, best)?;
    println!(
        "entropy crop {:?} (mean entropy {:.4} vs image {:.4})",
        chosen.hr_box,
        {
            let mut s = 0.0;
            for y in best.top..best.bottom() {
                for x in best.left..best.right() {
                    s += ent[y * w + x];
                }
            }
            s / (best.height * best.width) as f64
        },
        ent.iter().sum::<f64>() / ent.len() as f64
    );

    // sliding-window prediction at full resolution: overlapping windows averaged
    let win = mr.hr_dims(h, w);
    let (merged, counts) = sliding_logits(image, win, (win.0 / 2, win.1 / 2), |crop| Ok(infer(&teacher, crop)?.1))?;
    println!(
        "sliding window {win:?}: logits {:?}, pixels covered 1–{} times",
        merged.shape(),
        counts.iter().max().unwrap()
    );

    // grid correspondence: LR cells inside the HR footprint get δ, HR cells 1 − δ
    let fp = footprint(Some(best), (h, w), (8, 8), (8, 8))?;
    let inside = fp.lr_in_box.iter().filter(|&&b| b).count();
    let delta = vec![0.7; 64];
    let (lr_w, hr_w) = align_delta(&delta, &fp)?;
    let outside = lr_w.iter().filter(|&&x| x == 1.0).count();
    println!(
        "{inside} of 64 LR cells lie in the HR footprint and take δ = 0.7; {outside} take 1; HR cells take {:.2}",
        hr_w[0]
    );
    Ok(())
}
