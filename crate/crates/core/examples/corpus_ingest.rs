//! Bitext ingestion: write a scored TSV, load it back, drop low-margin pairs,
//! mix two language pairs in equal shares and hold out an evaluation slice.
//!
//!     cargo run --release --example corpus_ingest

use tpp_core::corpus::{
    filter_by_margin, generate_cipher_corpus, hold_out, load_pair_tsv, mix_equal, CipherKind,
    CipherSpec, CorpusId,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;

    // stand-in for a mined corpus: cipher bitext with a fake margin score in the third column
    let mut spec = CipherSpec::new(30, 400, CipherKind::Substitution, 1);
    spec.target_lang = "de".into();
    let clean = generate_cipher_corpus(&spec)?;
    let scored: String = clean
        .pairs()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            format!(
                "{}\t{}\t{:.3}\n",
                p.source_text,
                p.target_text,
                0.9 + (i % 7) as f64 * 0.05
            )
        })
        .collect();
    let tsv = dir.path().join("en-de.tsv");
    std::fs::write(&tsv, scored + "broken line without a tab\n")?;

    let loaded = load_pair_tsv(&tsv, "en", "de", CorpusId::WM)?;
    println!("loaded {} pairs from {}", loaded.size(), tsv.display());
    for d in loaded.diagnostics() {
        println!("  {}: skipped {} ({})", d.op, d.count, d.reason);
    }
    let mined = filter_by_margin(&loaded, 1.06)?;
    println!("margin >= 1.06 keeps {} pairs", mined.size());

    spec.target_lang = "fr".into();
    spec.cipher = CipherKind::Reversal;
    spec.num_pairs = 150;
    let other = generate_cipher_corpus(&spec)?;

    let mixed = mix_equal(&[mined, other], 300, 7)?;
    let (train, held) = hold_out(&mixed, 50, 7)?;
    println!(
        "mixed stream {} ({} pairs): {} train, {} held out",
        mixed.language_pair(),
        mixed.size(),
        train.size(),
        held.size()
    );
    for lp in train.language_pairs() {
        let n = train
            .pairs()
            .iter()
            .filter(|p| p.language_pair() == lp)
            .count();
        println!("  {lp}: {n}");
    }
    let p = &held.pairs()[0];
    println!(
        "example: {} -> {} [{}]",
        p.source_text, p.target_text, p.corpus_id
    );
    Ok(())
}
