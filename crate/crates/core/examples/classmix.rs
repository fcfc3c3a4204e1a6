//! Teacher pseudo-labels on a target image, then ClassMix with a source image.

use cluda::data::{generate_corpus, CorpusSpec};
use cluda::engine::{classmix, confidence_fraction, pseudo_label};
use cluda::network::{ModelParams, NetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cluda::Result<()> {
    let corpus = generate_corpus(&CorpusSpec {
        num_source: 1,
        num_target: 1,
        num_target_val: 1,
        ..CorpusSpec::desk_default(3)
    })?;
    let net = NetConfig { widths: [8, 16, 32, 64], embed_dim: 32, num_classes: corpus.taxonomy.num_classes() };
    let teacher = ModelParams::<f32>::init(&net, 0)?;
    let (source, target) = (&corpus.source[0], &corpus.target[0].image);

    let pseudo = pseudo_label(&teacher, target)?;
    println!("untrained teacher: {:.1}% of pixels above β = 0.968", 100.0 * confidence_fraction(&pseudo, 0.968));

    let mix = classmix(source, target, &pseudo, &mut ChaCha8Rng::seed_from_u64(5))?;
    let names: Vec<&str> = mix.selected.iter().map(|&c| corpus.taxonomy.names()[c as usize].as_str()).collect();
    let pasted = mix.origin.iter().filter(|&&o| o).count();
    println!("pasted classes {names:?}: {pasted} of {} pixels come from the source image", mix.origin.len());
    let (h, w) = mix.label.dims();
    for y in (0..h).step_by(4) {
        let row: String = (0..w).step_by(2).map(|x| if mix.origin[y * w + x] { '#' } else { '.' }).collect();
        println!("{row}");
    }
    Ok(())
}
