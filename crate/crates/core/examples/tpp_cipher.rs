//! Translation-pair prediction on a cipher language. Prints held-out
//! retrieval p@1 and mean normalized pair distance before and after.
//!
//!     cargo run --release --example tpp_cipher -- [--quick]

use tpp_core::analysis::alignment_report;
use tpp_core::corpus::{generate_cipher_corpus, hold_out, CipherKind, CipherSpec};
use tpp_core::encoder::{EncoderConfig, EncoderModel, VocabBuildOptions, Vocabulary};
use tpp_core::experiment::embed_pairs;
use tpp_core::tpp::{tpp_pretrain, PretrainingSchedule, TppConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let quick = std::env::args().any(|a| a == "--quick");
    let (pairs, epochs) = if quick { (600, 1) } else { (3000, 5) };

    let mut spec = CipherSpec::new(30, pairs, CipherKind::Substitution, 2);
    spec.sentence_length_range = (5, 5);
    let (train, held) = hold_out(
        &generate_cipher_corpus(&spec)?,
        if quick { 60 } else { 250 },
        2,
    )?;

    let texts = train
        .pairs()
        .iter()
        .flat_map(|p| [p.source_text.as_str(), p.target_text.as_str()]);
    let vocab = Vocabulary::build(texts, &VocabBuildOptions::default())?;
    let mut model = EncoderModel::new(EncoderConfig::desk(), vocab, 2)?;

    let show = |tag: &str, model: &EncoderModel| -> Result<(), Box<dyn std::error::Error>> {
        let (s, t) = embed_pairs(model, &held)?;
        let r = alignment_report(s.view(), t.view())?;
        println!(
            "{tag}: p@1 {:.3}, mean normalized distance {:.3}",
            r.p_at_1, r.mean_normalized_distance
        );
        Ok(())
    };
    show("before", &model)?;

    let schedule = PretrainingSchedule::one(
        train,
        TppConfig {
            epochs,
            seed: 2,
            ..TppConfig::desk()
        },
    )?;
    let reports = tpp_pretrain(&mut model, &schedule)?;
    for (e, l) in reports[0].epoch_losses.iter().enumerate() {
        println!("epoch {}: TPP loss {l:.4}", e + 1);
    }
    show("after", &model)?;
    Ok(())
}
