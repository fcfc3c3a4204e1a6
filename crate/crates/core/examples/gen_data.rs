//! Generate a small synthetic source/target corpus, write it, read it back.
//!
//! cargo run --release --example gen_data -- [out-dir]

use cluda::data::{frequencies_of, generate_corpus, Corpus, CorpusSpec};

fn main() -> cluda::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example-corpus".into());
    let spec = CorpusSpec { num_source: 20, num_target: 20, num_target_val: 8, ..CorpusSpec::desk_default(7) };
    let corpus = generate_corpus(&spec)?;
    corpus.write(out.as_ref())?;
    let back = Corpus::read(out.as_ref())?;
    assert_eq!(back, corpus);

    let tax = &corpus.taxonomy;
    let (h, w) = corpus.source[0].dims();
    println!(
        "{} source, {} target, {} held-out images of {h}×{w} in {out}",
        corpus.source.len(),
        corpus.target.len(),
        corpus.target_val.len()
    );
    let src = frequencies_of(corpus.source.iter().map(|s| &s.label), tax.num_classes())?;
    let tgt = frequencies_of(corpus.target.iter().map(|s| &s.label), tax.num_classes())?;
    println!("{:<12} {:>8} {:>8} {:>6}", "class", "source", "target", "kind");
    for (c, name) in tax.names().iter().enumerate() {
        let kind = if tax.is_thing(c) { "thing" } else { "stuff" };
        println!("{name:<12} {:>8.4} {:>8.4} {kind:>6}", src[c], tgt[c]);
    }
    let mean = |s: &[cluda::data::SegSample]| {
        let n: usize = s.iter().map(|x| x.image.len()).sum();
        s.iter().flat_map(|x| x.image.data()).map(|&v| v as f64).sum::<f64>() / n as f64
    };
    println!("mean intensity: source {:.3}, target {:.3}", mean(&corpus.source), mean(&corpus.target));
    Ok(())
}
