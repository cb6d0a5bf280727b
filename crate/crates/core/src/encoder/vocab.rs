//! Vocabulary and greedy longest-match subword tokenization.

use std::collections::{BTreeSet, HashMap};
use std::hash::{Hash, Hasher};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIAL: usize = 5;

/// Prefix marking a subword that continues a word.
pub const CONTINUATION: &str = "##";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    fingerprint: u64,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocabulary::from_tokens(f.tokens)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

#[derive(Debug, Clone)]
pub struct VocabBuildOptions {
    pub min_freq: usize,
    /// Cap on whole-word entries (most frequent first).
    pub max_words: usize,
    /// Add every seen character as a word-initial and a `##` continuation piece.
    pub char_pieces: bool,
}

impl Default for VocabBuildOptions {
    fn default() -> Self {
        Self {
            min_freq: 1,
            max_words: 30_000,
            char_pieces: true,
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from a token list that must start with the five
    /// special tokens in reserved order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let specials = [CLS, SEP, PAD, UNK, MASK];
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != specials {
            return Err(Error::invalid(
                "vocabulary must start with [CLS] [SEP] [PAD] [UNK] [MASK]",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry '{t}'")));
            }
        }
        let mut h = std::collections::hash_map::DefaultHasher::new();
        tokens.hash(&mut h);
        Ok(Self {
            fingerprint: h.finish(),
            tokens,
            index,
        })
    }

    /// Specials followed by `entries` in order, skipping repeats.
    pub fn with_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = [CLS, SEP, PAD, UNK, MASK].map(String::from).to_vec();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for e in entries {
            let e = e.into();
            if seen.insert(e.clone()) {
                tokens.push(e);
            }
        }
        Self::from_tokens(tokens)
    }

    /// Whole words by descending frequency (ties lexicographic), then
    /// character pieces if requested.
    pub fn build<'a, I>(texts: I, opts: &VocabBuildOptions) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut chars = BTreeSet::new();
        for text in texts {
            for w in text.split_whitespace() {
                *counts.entry(w).or_default() += 1;
                chars.extend(w.chars());
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= opts.min_freq)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        words.truncate(opts.max_words);

        let mut entries: Vec<String> = words.into_iter().map(|(w, _)| w.to_string()).collect();
        if opts.char_pieces {
            for c in &chars {
                entries.push(c.to_string());
            }
            for c in &chars {
                entries.push(format!("{CONTINUATION}{c}"));
            }
        }
        Self::with_entries(entries)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Greedy longest-match split of one word; a word with any unmatched
    /// remainder becomes a single `[UNK]`.
    pub fn word_pieces(&self, word: &str) -> Vec<u32> {
        if let Some(id) = self.id(word) {
            return vec![id];
        }
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let lo = chars[start].0;
                let hi = chars.get(end).map_or(word.len(), |c| c.0);
                let sub = &word[lo..hi];
                let id = if start == 0 {
                    self.id(sub)
                } else {
                    self.id(&format!("{CONTINUATION}{sub}"))
                };
                if id.is_some() {
                    found = id;
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![UNK_ID],
            }
        }
        pieces
    }

    pub fn tokenize(&self, text: &str, max_seq_len: usize) -> Result<Tokenized> {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.tokenize_words(&words, max_seq_len)
    }

    /// Tokenizes pre-split words, recording where each word's first piece lands.
    pub fn tokenize_words<S: AsRef<str>>(
        &self,
        words: &[S],
        max_seq_len: usize,
    ) -> Result<Tokenized> {
        if words.is_empty() {
            return Err(Error::invalid("cannot tokenize empty text"));
        }
        if max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len must be at least 2"));
        }
        let budget = max_seq_len - 1;
        let mut ids = vec![CLS_ID];
        let mut first_subword_index = Vec::with_capacity(words.len());
        'words: for w in words {
            for (k, piece) in self.word_pieces(w.as_ref()).into_iter().enumerate() {
                if ids.len() >= budget {
                    break 'words;
                }
                if k == 0 {
                    first_subword_index.push(ids.len());
                }
                ids.push(piece);
            }
        }
        ids.push(SEP_ID);
        Ok(Tokenized {
            ids,
            first_subword_index,
            num_words: words.len(),
        })
    }

    /// Tokenizes and pads a batch of texts.
    pub fn encode_texts<S: AsRef<str>>(
        &self,
        texts: &[S],
        max_seq_len: usize,
    ) -> Result<EncodedBatch> {
        let rows = texts
            .iter()
            .map(|t| self.tokenize(t.as_ref(), max_seq_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedBatch::from_rows(&rows, self))
    }
}

/// One tokenized sequence: `[CLS] pieces... [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    /// Position of the first piece of every word that survived truncation.
    pub first_subword_index: Vec<usize>,
    /// Number of words in the input, including truncated ones.
    pub num_words: usize,
}

/// Padded batch of token ids with its attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub token_ids: Array2<u32>,
    pub attention_mask: Array2<u8>,
    pub first_subword_index: Vec<Vec<usize>>,
    pub(crate) vocab_fingerprint: u64,
}

impl EncodedBatch {
    pub fn from_rows(rows: &[Tokenized], vocab: &Vocabulary) -> Self {
        let width = rows.iter().map(|r| r.ids.len()).max().unwrap_or(0);
        Self::from_rows_padded(rows, vocab, width)
    }

    /// Pads every row to `width` (or the longest row if that is longer).
    pub fn from_rows_padded(rows: &[Tokenized], vocab: &Vocabulary, width: usize) -> Self {
        let width = width.max(rows.iter().map(|r| r.ids.len()).max().unwrap_or(0));
        let mut token_ids = Array2::from_elem((rows.len(), width), PAD_ID);
        let mut attention_mask = Array2::zeros((rows.len(), width));
        for (i, r) in rows.iter().enumerate() {
            for (j, &id) in r.ids.iter().enumerate() {
                token_ids[[i, j]] = id;
                attention_mask[[i, j]] = 1;
            }
        }
        Self {
            token_ids,
            attention_mask,
            first_subword_index: rows.iter().map(|r| r.first_subword_index.clone()).collect(),
            vocab_fingerprint: vocab.fingerprint(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.token_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.ncols()
    }

    /// Rebuilds the batch with every row padded to `width`.
    pub fn repadded(&self, width: usize) -> Self {
        let width = width.max(self.seq_len());
        let mut token_ids = Array2::from_elem((self.batch_size(), width), PAD_ID);
        let mut attention_mask = Array2::zeros((self.batch_size(), width));
        token_ids
            .slice_mut(ndarray::s![.., ..self.seq_len()])
            .assign(&self.token_ids);
        attention_mask
            .slice_mut(ndarray::s![.., ..self.seq_len()])
            .assign(&self.attention_mask);
        Self {
            token_ids,
            attention_mask,
            first_subword_index: self.first_subword_index.clone(),
            vocab_fingerprint: self.vocab_fingerprint,
        }
    }

    /// Valid (unmasked) positions of row `i`.
    pub fn valid_positions(&self, i: usize) -> Vec<usize> {
        self.attention_mask
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(j, _)| j)
            .collect()
    }
}
