mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tpp_core::corpus::{CorpusId, TranslationPair};
use tpp_core::encoder::{EncoderConfig, EncoderModel, VocabBuildOptions, Vocabulary};
use tpp_core::tpp::{
    bce_with_logit, make_tpp_batch, make_tpp_batch_corpus_wide, tpp_logit, tpp_loss,
    tpp_loss_from_embeddings, tpp_prob, TppExample,
};

fn aligned(b: usize, tag: u64) -> Vec<TranslationPair> {
    (0..b)
        .map(|i| {
            TranslationPair::new(
                &format!("s{tag} {i}"),
                &format!("t{tag} {i}"),
                "en",
                "xx",
                CorpusId::TT,
                None,
            )
            .unwrap()
        })
        .collect()
}

fn matrix(b: usize, d: usize, vals: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((b, d), |(i, j)| vals[(i * d + j) % vals.len()])
}

proptest! {
    #[test]
    fn loss_gradient_matches_central_differences(
        b in 2usize..6,
        vals in prop::collection::vec(-1.5f64..1.5, 16..96),
        shift in 1usize..5,
    ) {
        let d = 8;
        let src = matrix(b, d, &vals);
        let tgt = matrix(b, d, &vals[vals.len() / 2..]);
        let mut ex: Vec<TppExample> = (0..b).map(|i| TppExample { source: i, target: i, label: true }).collect();
        let shift = shift % (b - 1) + 1;
        ex.extend((0..b).map(|i| TppExample { source: (i + shift) % b, target: i, label: false }));
        let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let (loss, ds, dt) = tpp_loss_from_embeddings(src.view(), tgt.view(), &ex).unwrap();
        prop_assert!((loss - common::reference_tpp_loss(&rows(&src), &rows(&tgt), &ex)).abs() < 1e-12);

        let h = 1e-3;
        for (which, grad) in [(0, &ds), (1, &dt)] {
            let mut diff = 0.0;
            let mut norm = 0.0;
            for i in 0..b {
                for j in 0..d {
                    let at = |delta: f64| {
                        let (mut s, mut t) = (src.clone(), tgt.clone());
                        if which == 0 { s[[i, j]] += delta } else { t[[i, j]] += delta }
                        common::reference_tpp_loss(&rows(&s), &rows(&t), &ex)
                    };
                    let num = (at(h) - at(-h)) / (2.0 * h);
                    diff += (num - grad[[i, j]]).powi(2);
                    norm += num * num;
                }
            }
            prop_assert!(diff.sqrt() <= 1e-4 * norm.sqrt().max(1e-8), "relative error {}", diff.sqrt() / norm.sqrt());
        }
    }

    #[test]
    fn batches_are_balanced_without_self_negatives(b in 2usize..65, seed in any::<u64>(), wide in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = aligned(b, 0);
        let pool = aligned(80, 1);
        let batch = if wide {
            make_tpp_batch_corpus_wide(&pairs, &pool, &mut rng).unwrap()
        } else {
            make_tpp_batch(&pairs, &mut rng).unwrap()
        };
        prop_assert_eq!(batch.len(), 2 * b);
        prop_assert_eq!(batch.labels().iter().filter(|&&l| l == 1).count(), b);
        let cand = batch.candidate_texts();
        let own = batch.source_aligned_targets();
        for (k, e) in batch.examples().iter().enumerate() {
            prop_assert_eq!(e.label, own[k] == cand[k]);
        }
        if !wide {
            // in-batch negatives reuse every source exactly once
            let mut srcs: Vec<usize> = batch.examples()[b..].iter().map(|e| e.source).collect();
            srcs.sort();
            prop_assert_eq!(srcs, (0..b).collect::<Vec<_>>());
        }
    }

    #[test]
    fn probability_is_symmetric_and_bce_is_stable(z in -800.0f64..800.0) {
        prop_assert!((tpp_prob(z) + tpp_prob(-z) - 1.0).abs() < 1e-12);
        let (pos, neg) = (bce_with_logit(z, true), bce_with_logit(z, false));
        prop_assert!(pos.is_finite() && neg.is_finite() && pos >= 0.0 && neg >= 0.0);
        prop_assert!((pos - bce_with_logit(-z, false)).abs() < 1e-12);
    }
}

#[test]
fn zero_embeddings_give_ln_2() {
    let z = Array2::<f64>::zeros((3, 4));
    let ex = [
        TppExample {
            source: 0,
            target: 0,
            label: true,
        },
        TppExample {
            source: 1,
            target: 0,
            label: false,
        },
    ];
    let (loss, ds, _) = tpp_loss_from_embeddings(z.view(), z.view(), &ex).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(ds.iter().all(|&g| g == 0.0));
    assert!(tpp_logit(z.row(0), Array2::<f64>::zeros((1, 5)).row(0)).is_err());
}

#[test]
fn shared_targets_never_become_negatives() {
    let mut pairs = aligned(6, 0);
    pairs[3] = TranslationPair::new(
        "another source",
        &pairs[0].target_text,
        "en",
        "xx",
        CorpusId::TT,
        None,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let batch = make_tpp_batch(&pairs, &mut rng).unwrap();
        for (k, e) in batch
            .examples()
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.label)
        {
            assert_ne!(
                batch.source_aligned_targets()[k],
                batch.candidate_texts()[k],
                "example {k} {e:?}"
            );
        }
    }
    let same = vec![pairs[0].clone(), pairs[3].clone()];
    assert!(make_tpp_batch(&same, &mut rng).is_err());
}

#[test]
fn untrained_encoder_loss_is_near_ln_2() {
    let pairs = aligned(16, 0);
    let texts: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.source_text.as_str(), p.target_text.as_str()])
        .collect();
    let vocab = Vocabulary::build(texts, &VocabBuildOptions::default()).unwrap();
    let model = EncoderModel::new(EncoderConfig::default(), vocab, 3).unwrap();
    let batch = make_tpp_batch(&pairs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (loss, grads) = tpp_loss(&batch, &model).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 0.05, "{loss}");
    assert!(grads
        .named()
        .iter()
        .any(|(_, g)| g.iter().any(|&x| x != 0.0)));
}
