//! Zero-shot transfer: tag source-language sentences, fine-tune on them only,
//! then score the cipher-language test set by token accuracy.
//!
//!     cargo run --release --example zero_shot_tagging -- [--quick]

use tpp_core::corpus::{generate_cipher_corpus, CipherKind, CipherSpec};
use tpp_core::encoder::{
    mlm_pretrain, EncoderConfig, EncoderModel, MlmConfig, VocabBuildOptions, Vocabulary,
};
use tpp_core::eval::token_accuracy;
use tpp_core::synthetic::{generate_tagging_task, TaggingTaskSpec};
use tpp_core::tasks::{
    collect_label_set, finetune_token, predict_tags, FineTuneConfig, TaggedSentence,
};
use tpp_core::tpp::{tpp_pretrain, PretrainingSchedule, TppConfig};

fn words(s: &[TaggedSentence]) -> Vec<Vec<String>> {
    s.iter().map(|x| x.tokens.clone()).collect()
}

fn tags(s: &[TaggedSentence]) -> Vec<Vec<String>> {
    s.iter().map(|x| x.labels.clone()).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let quick = std::env::args().any(|a| a == "--quick");
    let (pairs, epochs, n_train) = if quick {
        (500, 1, 200)
    } else {
        (4000, 3, 2000)
    };

    let mut spec = CipherSpec::new(30, pairs, CipherKind::Substitution, 1);
    spec.sentence_length_range = (5, 5);
    let corpus = generate_cipher_corpus(&spec)?;
    let task = generate_tagging_task(
        &spec.build_cipher()?,
        &TaggingTaskSpec {
            num_train: n_train,
            num_test: 300,
            seed: 1,
            ..TaggingTaskSpec::default()
        },
        "en",
        "xx",
    )?;
    let texts: Vec<&str> = corpus
        .pairs()
        .iter()
        .flat_map(|p| [p.source_text.as_str(), p.target_text.as_str()])
        .collect();
    let vocab = Vocabulary::build(texts.iter().copied(), &VocabBuildOptions::default())?;

    let mut base = EncoderModel::new(EncoderConfig::desk(), vocab, 1)?;
    mlm_pretrain(
        &mut base,
        &texts,
        &MlmConfig {
            epochs,
            seed: 1,
            ..MlmConfig::desk()
        },
    )?;
    let mut aligned = base.clone();
    tpp_pretrain(
        &mut aligned,
        &PretrainingSchedule::one(
            corpus,
            TppConfig {
                learning_rate: 1.5e-3,
                epochs,
                seed: 1,
                ..TppConfig::desk()
            },
        )?,
    )?;

    let labels = collect_label_set(&task.train);
    let ft = FineTuneConfig {
        learning_rate: 3e-4,
        epochs,
        seed: 1,
        freeze_embeddings: true,
        ..FineTuneConfig::desk()
    };
    for (name, encoder) in [("MLM only", base), ("MLM + TPP", aligned)] {
        let (tm, _) = finetune_token(encoder, &task.train, &labels, &ft)?;
        let src = predict_tags(&tm, &words(&task.test_source))?;
        let tgt = predict_tags(&tm, &words(&task.test_target))?;
        println!(
            "{name:>10}: source acc {:.3} | target acc {:.3}",
            token_accuracy(&tags(&task.test_source), &src)?.value,
            token_accuracy(&tags(&task.test_target), &tgt)?.value,
        );
    }
    Ok(())
}
