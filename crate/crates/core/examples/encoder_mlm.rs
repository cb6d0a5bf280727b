//! WordPiece vocabulary, first-subword alignment and masked-LM pretraining of
//! the small encoder on synthetic monolingual text.
//!
//!     cargo run --release --example encoder_mlm

use tpp_core::corpus::generate_cipher_corpus;
use tpp_core::encoder::{
    mlm_pretrain, EncoderConfig, EncoderModel, MlmConfig, VocabBuildOptions, Vocabulary,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec =
        tpp_core::corpus::CipherSpec::new(30, 1500, tpp_core::corpus::CipherKind::Substitution, 4);
    spec.sentence_length_range = (5, 5);
    let corpus = generate_cipher_corpus(&spec)?;
    let texts: Vec<&str> = corpus
        .pairs()
        .iter()
        .flat_map(|p| [p.source_text.as_str(), p.target_text.as_str()])
        .collect();

    let vocab = Vocabulary::build(texts.iter().copied(), &VocabBuildOptions::default())?;
    println!("vocabulary: {} entries", vocab.size());
    let words = ["bb", "unseenword", "αγ"];
    let row = vocab.tokenize_words(&words, 16)?;
    let pieces: Vec<&str> = row
        .ids
        .iter()
        .map(|&i| vocab.token(i).unwrap_or("?"))
        .collect();
    println!("{words:?} -> {pieces:?}");
    println!(
        "first subword of each word at {:?}",
        row.first_subword_index
    );

    let mut model = EncoderModel::new(EncoderConfig::desk(), vocab, 4)?;
    let cfg = MlmConfig {
        epochs: 2,
        ..MlmConfig::desk()
    };
    let report = mlm_pretrain(&mut model, &texts, &cfg)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {}: masked-token loss {l:.4}", e + 1);
    }
    let cls = model.encode_cls(&model.encode_texts(&texts[..2])?)?;
    println!(
        "[CLS] embedding width {}, first row norm {:.3}",
        cls.ncols(),
        cls.row(0).dot(&cls.row(0)).sqrt()
    );
    Ok(())
}
