//! Synthetic token-tagging task over a cipher: each source word carries a
//! fixed tag and its cipher image carries the same tag, so a tagger trained
//! on the source language can be scored zero-shot on the target language.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Cipher;
use crate::error::{Error, Result};
use crate::rng;
use crate::tasks::{write_conll, TaggedSentence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggingTaskSpec {
    pub num_tags: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub sentence_length_range: (usize, usize),
    pub seed: u64,
}

impl Default for TaggingTaskSpec {
    fn default() -> Self {
        Self {
            num_tags: 4,
            num_train: 2000,
            num_test: 500,
            sentence_length_range: (4, 8),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggingTask {
    pub label_set: Vec<String>,
    /// Tag of every source word, indexed by source word id.
    pub source_tags: Vec<String>,
    /// Source-language training sentences.
    pub train: Vec<TaggedSentence>,
    /// Held-out source-language sentences.
    pub test_source: Vec<TaggedSentence>,
    /// Cipher images of `test_source`, tagged through the cipher.
    pub test_target: Vec<TaggedSentence>,
}

impl TaggingTask {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_conll(dir.join("train.conll"), &self.train)?;
        write_conll(dir.join("test_source.conll"), &self.test_source)?;
        write_conll(dir.join("test_target.conll"), &self.test_target)
    }
}

pub fn tag_name(k: usize) -> String {
    format!("T{k}")
}

/// Draws the task. Tags are dealt round-robin over a seeded permutation of
/// the source vocabulary, so every tag covers about the same number of words.
pub fn generate_tagging_task(
    cipher: &Cipher,
    spec: &TaggingTaskSpec,
    source_lang: &str,
    target_lang: &str,
) -> Result<TaggingTask> {
    let v = cipher.source_vocab().len();
    let (lo, hi) = spec.sentence_length_range;
    if spec.num_tags < 2 || spec.num_tags > v {
        return Err(Error::invalid(format!("num_tags must be in 2..={v}")));
    }
    if lo < 1 || lo > hi {
        return Err(Error::invalid(format!(
            "invalid sentence_length_range ({lo}, {hi})"
        )));
    }
    if spec.num_train == 0 || spec.num_test == 0 {
        return Err(Error::invalid(
            "tagging task needs train and test sentences",
        ));
    }
    let mut r = rng::seeded(spec.seed, rng::STREAM_TAGS);
    let mut order: Vec<usize> = (0..v).collect();
    order.shuffle(&mut r);
    let mut source_tags = vec![String::new(); v];
    for (k, &w) in order.iter().enumerate() {
        source_tags[w] = tag_name(k % spec.num_tags);
    }
    let mut target_tags = vec![String::new(); v];
    for (i, t) in source_tags.iter().enumerate() {
        target_tags[cipher.image_id(i)] = t.clone();
    }

    let mut draw = |lang: &str| {
        let len = r.random_range(lo..=hi);
        let ids: Vec<usize> = (0..len).map(|_| r.random_range(0..v)).collect();
        let tokens: Vec<String> = ids
            .iter()
            .map(|&i| cipher.source_vocab()[i].clone())
            .collect();
        let labels = ids.iter().map(|&i| source_tags[i].clone()).collect();
        TaggedSentence::new(tokens, labels, lang)
    };
    let train = (0..spec.num_train)
        .map(|_| draw(source_lang))
        .collect::<Result<Vec<_>>>()?;
    let test_source = (0..spec.num_test)
        .map(|_| draw(source_lang))
        .collect::<Result<Vec<_>>>()?;
    let test_target = test_source
        .iter()
        .map(|s| {
            let tokens = cipher.encrypt(&s.tokens)?;
            let labels = tokens
                .iter()
                .map(|w| {
                    target_tags[cipher.target_id(w).expect("encrypt yields target words")].clone()
                })
                .collect();
            TaggedSentence::new(tokens, labels, target_lang)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TaggingTask {
        label_set: (0..spec.num_tags).map(tag_name).collect(),
        source_tags,
        train,
        test_source,
        test_target,
    })
}
