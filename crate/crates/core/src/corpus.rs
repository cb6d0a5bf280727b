//! Translation-pair corpora: ingestion, construction, filtering, mixing and
//! splitting, plus the synthetic cipher corpus used for desk-scale runs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Language code used as the target of a stream that mixes several targets.
pub const MIXED_LANG: &str = "mul";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorpusId {
    /// Tatoeba
    TT,
    /// WikiMatrix
    WM,
    /// Wikidata label/description pairs
    WD,
    /// Synthetic cipher corpus
    SYN,
}

impl fmt::Display for CorpusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorpusId::TT => "TT",
            CorpusId::WM => "WM",
            CorpusId::WD => "WD",
            CorpusId::SYN => "SYN",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LanguagePair {
    pub source: String,
    pub target: String,
}

impl LanguagePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }

    pub fn is_mixed(&self) -> bool {
        self.target == MIXED_LANG
    }
}

impl fmt::Display for LanguagePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.source, self.target)
    }
}

/// One aligned (source, target) text pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationPair {
    pub source_text: String,
    pub target_text: String,
    pub source_lang: String,
    pub target_lang: String,
    pub corpus_id: CorpusId,
    pub quality_score: Option<f64>,
}

impl TranslationPair {
    /// Builds a pair with trimmed texts; rejects empty sides and identical languages.
    pub fn new(
        source_text: &str,
        target_text: &str,
        source_lang: &str,
        target_lang: &str,
        corpus_id: CorpusId,
        quality_score: Option<f64>,
    ) -> Result<Self> {
        let source_text = source_text.trim();
        let target_text = target_text.trim();
        if source_text.is_empty() || target_text.is_empty() {
            return Err(Error::invalid("translation pair has an empty side"));
        }
        if source_lang == target_lang {
            return Err(Error::invalid(format!(
                "source and target language are both '{source_lang}'"
            )));
        }
        Ok(Self {
            source_text: source_text.to_string(),
            target_text: target_text.to_string(),
            source_lang: source_lang.to_string(),
            target_lang: target_lang.to_string(),
            corpus_id,
            quality_score,
        })
    }

    pub fn language_pair(&self) -> LanguagePair {
        LanguagePair::new(&self.source_lang, &self.target_lang)
    }
}

/// Structured record describing lines or items an operation dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub op: String,
    pub count: usize,
    pub reason: String,
}

fn report(diags: &mut Vec<Diagnostic>, op: &str, count: usize, reason: &str) {
    if count == 0 {
        return;
    }
    tracing::info!(op, count, reason, "corpus diagnostic");
    diags.push(Diagnostic {
        op: op.to_string(),
        count,
        reason: reason.to_string(),
    });
}

/// An immutable, ordered stream of pairs sharing one language pair.
///
/// Mixed streams produced by [`mix_equal`] share the source language and use
/// [`MIXED_LANG`] as their target.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStream {
    pairs: Vec<TranslationPair>,
    language_pair: LanguagePair,
    diagnostics: Vec<Diagnostic>,
}

impl CorpusStream {
    pub fn new(language_pair: LanguagePair, pairs: Vec<TranslationPair>) -> Result<Self> {
        for p in &pairs {
            let ok = if language_pair.is_mixed() {
                p.source_lang == language_pair.source
            } else {
                p.source_lang == language_pair.source && p.target_lang == language_pair.target
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "pair {}-{} does not belong to stream {language_pair}",
                    p.source_lang, p.target_lang
                )));
            }
        }
        Ok(Self {
            pairs,
            language_pair,
            diagnostics: Vec::new(),
        })
    }

    fn with_diagnostics(mut self, diagnostics: Vec<Diagnostic>) -> Self {
        self.diagnostics = diagnostics;
        self
    }

    pub fn pairs(&self) -> &[TranslationPair] {
        &self.pairs
    }

    pub fn language_pair(&self) -> &LanguagePair {
        &self.language_pair
    }

    pub fn size(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Skip and dedup records produced while building this stream.
    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn corpus_ids(&self) -> Vec<CorpusId> {
        let mut ids: Vec<CorpusId> = self.pairs.iter().map(|p| p.corpus_id).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn language_pairs(&self) -> Vec<LanguagePair> {
        let mut lps: Vec<LanguagePair> = self.pairs.iter().map(|p| p.language_pair()).collect();
        lps.sort();
        lps.dedup();
        lps
    }

    pub fn into_pairs(self) -> Vec<TranslationPair> {
        self.pairs
    }
}

/// Removes exact (source, target) duplicates, keeping first occurrences.
fn dedup_pairs(pairs: Vec<TranslationPair>) -> (Vec<TranslationPair>, usize) {
    let mut seen = HashSet::with_capacity(pairs.len());
    let before = pairs.len();
    let kept: Vec<TranslationPair> = pairs
        .into_iter()
        .filter(|p| seen.insert((p.source_text.clone(), p.target_text.clone())))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Reads a `source<TAB>target[<TAB>score]` file.
pub fn load_pair_tsv(
    path: impl AsRef<Path>,
    source_lang: &str,
    target_lang: &str,
    corpus_id: CorpusId,
) -> Result<CorpusStream> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if source_lang == target_lang {
        return Err(Error::invalid("source and target language must differ"));
    }

    let mut pairs = Vec::new();
    let (mut too_few, mut empty_side, mut bad_score) = (0usize, 0usize, 0usize);
    for line in raw.lines() {
        let mut fields = line.split('\t');
        let (Some(src), Some(tgt)) = (fields.next(), fields.next()) else {
            too_few += 1;
            continue;
        };
        let score = match fields.next().map(str::trim) {
            None | Some("") => None,
            Some(s) => match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Some(v),
                _ => {
                    bad_score += 1;
                    continue;
                }
            },
        };
        match TranslationPair::new(src, tgt, source_lang, target_lang, corpus_id, score) {
            Ok(p) => pairs.push(p),
            Err(_) => empty_side += 1,
        }
    }

    let (pairs, dups) = dedup_pairs(pairs);
    let mut diags = Vec::new();
    report(
        &mut diags,
        "load_pair_tsv",
        too_few,
        "fewer than 2 tab-separated fields",
    );
    report(
        &mut diags,
        "load_pair_tsv",
        empty_side,
        "empty source or target text",
    );
    report(
        &mut diags,
        "load_pair_tsv",
        bad_score,
        "unparseable quality score",
    );
    report(&mut diags, "load_pair_tsv", dups, "duplicate pair");

    if pairs.is_empty() {
        return Err(Error::Empty(format!(
            "no valid pairs in {}",
            path.display()
        )));
    }
    Ok(
        CorpusStream::new(LanguagePair::new(source_lang, target_lang), pairs)?
            .with_diagnostics(diags),
    )
}

/// Keeps exactly the pairs whose quality score is at least `threshold`.
pub fn filter_by_margin(stream: &CorpusStream, threshold: f64) -> Result<CorpusStream> {
    let mut kept = Vec::new();
    for (i, p) in stream.pairs.iter().enumerate() {
        let score = p
            .quality_score
            .ok_or_else(|| Error::invalid(format!("pair {i} has no quality score")))?;
        if score >= threshold {
            kept.push(p.clone());
        }
    }
    if kept.is_empty() {
        return Err(Error::Empty(format!(
            "no pair reaches margin threshold {threshold}"
        )));
    }
    let mut diags = Vec::new();
    report(
        &mut diags,
        "filter_by_margin",
        stream.size() - kept.len(),
        "below margin threshold",
    );
    Ok(CorpusStream::new(stream.language_pair.clone(), kept)?.with_diagnostics(diags))
}

/// One entry of a pre-extracted Wikidata record file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WikidataRecord {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub descriptions: BTreeMap<String, String>,
}

/// Reads JSON-lines Wikidata records; malformed lines are skipped.
pub fn load_wikidata_records(
    path: impl AsRef<Path>,
) -> Result<(Vec<WikidataRecord>, Vec<Diagnostic>)> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut bad = 0;
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<WikidataRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) => bad += 1,
        }
    }
    let mut diags = Vec::new();
    report(
        &mut diags,
        "load_wikidata_records",
        bad,
        "malformed JSON line",
    );
    Ok((records, diags))
}

/// Builds "label description" pairs from records that have both fields in
/// both languages.
pub fn build_wikidata_pairs(
    records: &[WikidataRecord],
    source_lang: &str,
    target_lang: &str,
) -> Result<CorpusStream> {
    let sentence = |r: &WikidataRecord, lang: &str| -> Option<String> {
        let label = r.labels.get(lang)?.trim();
        let desc = r.descriptions.get(lang)?.trim();
        if label.is_empty() || desc.is_empty() {
            return None;
        }
        Some(format!("{label} {desc}"))
    };

    let mut pairs = Vec::new();
    let mut incomplete = 0;
    for r in records {
        match (sentence(r, source_lang), sentence(r, target_lang)) {
            (Some(s), Some(t)) => {
                pairs.push(TranslationPair::new(
                    &s,
                    &t,
                    source_lang,
                    target_lang,
                    CorpusId::WD,
                    None,
                )?);
            }
            _ => incomplete += 1,
        }
    }
    let (pairs, dups) = dedup_pairs(pairs);
    let mut diags = Vec::new();
    report(
        &mut diags,
        "build_wikidata_pairs",
        incomplete,
        "missing label or description in one language",
    );
    report(&mut diags, "build_wikidata_pairs", dups, "duplicate pair");
    Ok(
        CorpusStream::new(LanguagePair::new(source_lang, target_lang), pairs)?
            .with_diagnostics(diags),
    )
}

/// Equal-share mixture of several streams into one epoch of `epoch_size` pairs.
///
/// The remainder of `epoch_size / streams.len()` goes to the first streams in
/// the given order, one extra pair each.
pub fn mix_equal(streams: &[CorpusStream], epoch_size: usize, seed: u64) -> Result<CorpusStream> {
    if streams.len() < 2 {
        return Err(Error::invalid("mix_equal needs at least two streams"));
    }
    let source = streams[0].language_pair.source.clone();
    for s in streams {
        if s.is_empty() {
            return Err(Error::Empty(format!("stream {} is empty", s.language_pair)));
        }
        if s.language_pair.source != source {
            return Err(Error::invalid(
                "mixed streams must share the source language",
            ));
        }
    }

    let k = streams.len();
    let mut rng = rng::seeded(seed, rng::STREAM_MIX);
    let mut out = Vec::with_capacity(epoch_size);
    for (i, s) in streams.iter().enumerate() {
        let quota = epoch_size / k + usize::from(i < epoch_size % k);
        if quota <= s.size() {
            for idx in rand::seq::index::sample(&mut rng, s.size(), quota) {
                out.push(s.pairs[idx].clone());
            }
        } else {
            for _ in 0..quota {
                out.push(s.pairs[rng.random_range(0..s.size())].clone());
            }
        }
    }
    out.shuffle(&mut rng);
    CorpusStream::new(LanguagePair::new(source, MIXED_LANG), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CipherKind {
    Substitution,
    Reversal,
    SubstitutionReversal,
}

/// Parameters of a synthetic bilingual corpus whose target side is a
/// deterministic transform of the source over a disjoint vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CipherSpec {
    pub vocab_size: usize,
    pub sentence_length_range: (usize, usize),
    pub num_pairs: usize,
    pub cipher: CipherKind,
    pub seed: u64,
    #[serde(default = "default_cipher_source")]
    pub source_lang: String,
    #[serde(default = "default_cipher_target")]
    pub target_lang: String,
}

fn default_cipher_source() -> String {
    "en".into()
}

fn default_cipher_target() -> String {
    "xx".into()
}

impl CipherSpec {
    pub fn new(vocab_size: usize, num_pairs: usize, cipher: CipherKind, seed: u64) -> Self {
        Self {
            vocab_size,
            sentence_length_range: (4, 10),
            num_pairs,
            cipher,
            seed,
            source_lang: default_cipher_source(),
            target_lang: default_cipher_target(),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sentence_length_range;
        if self.vocab_size < 10 {
            return Err(Error::invalid("cipher vocab_size must be at least 10"));
        }
        if self.num_pairs < 1 {
            return Err(Error::invalid("cipher num_pairs must be at least 1"));
        }
        if lo < 1 || lo > hi {
            return Err(Error::invalid(format!(
                "invalid sentence_length_range ({lo}, {hi})"
            )));
        }
        if self.source_lang == self.target_lang {
            return Err(Error::invalid("cipher languages must differ"));
        }
        Ok(())
    }

    /// The cipher this spec describes; identical for identical specs.
    pub fn build_cipher(&self) -> Result<Cipher> {
        self.validate()?;
        let source_vocab: Vec<String> = (0..self.vocab_size)
            .map(|i| bijective_word(i, LATIN))
            .collect();
        let target_vocab: Vec<String> = (0..self.vocab_size)
            .map(|i| bijective_word(i, GREEK))
            .collect();
        let mut map: Vec<usize> = (0..self.vocab_size).collect();
        if matches!(
            self.cipher,
            CipherKind::Substitution | CipherKind::SubstitutionReversal
        ) {
            map.shuffle(&mut rng::seeded(self.seed, rng::STREAM_CIPHER_MAP));
        }
        Ok(Cipher::new(source_vocab, target_vocab, map, self.cipher))
    }
}

const LATIN: &[char] = &[
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r', 's',
    't', 'u', 'v', 'w', 'x', 'y', 'z',
];
const GREEK: &[char] = &[
    'α', 'β', 'γ', 'δ', 'ε', 'ζ', 'η', 'θ', 'ι', 'κ', 'λ', 'μ', 'ν', 'ξ', 'ο', 'π', 'ρ', 'σ', 'τ',
    'υ', 'φ', 'χ', 'ψ', 'ω',
];

/// Bijective base-k numeral of `i + 1`, with a minimum of two letters so that
/// words never collide with single-character subword pieces.
fn bijective_word(i: usize, alphabet: &[char]) -> String {
    let k = alphabet.len();
    let mut n = i + 1 + k;
    let mut out = Vec::new();
    while n > 0 {
        n -= 1;
        out.push(alphabet[n % k]);
        n /= k;
    }
    out.iter().rev().collect()
}

/// Word-level cipher between two disjoint vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Cipher {
    source_vocab: Vec<String>,
    target_vocab: Vec<String>,
    map: Vec<usize>,
    kind: CipherKind,
    source_index: BTreeMap<String, usize>,
    target_index: BTreeMap<String, usize>,
}

impl Cipher {
    fn new(
        source_vocab: Vec<String>,
        target_vocab: Vec<String>,
        map: Vec<usize>,
        kind: CipherKind,
    ) -> Self {
        let source_index = source_vocab.iter().cloned().zip(0..).collect();
        let target_index = target_vocab.iter().cloned().zip(0..).collect();
        Self {
            source_vocab,
            target_vocab,
            map,
            kind,
            source_index,
            target_index,
        }
    }

    /// Builds a cipher from explicit vocabularies and a source→target index map.
    pub fn from_parts(
        source_vocab: Vec<String>,
        target_vocab: Vec<String>,
        map: Vec<usize>,
        kind: CipherKind,
    ) -> Result<Self> {
        let n = source_vocab.len();
        let mut seen = vec![false; n];
        if target_vocab.len() != n || map.len() != n {
            return Err(Error::invalid(
                "cipher vocabularies and map must have equal length",
            ));
        }
        for &m in &map {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(Error::invalid("cipher map is not a permutation"));
            }
        }
        let src: HashSet<&String> = source_vocab.iter().collect();
        if target_vocab.iter().any(|t| src.contains(t)) {
            return Err(Error::invalid("cipher vocabularies must be disjoint"));
        }
        Ok(Self::new(source_vocab, target_vocab, map, kind))
    }

    pub fn source_vocab(&self) -> &[String] {
        &self.source_vocab
    }

    pub fn target_vocab(&self) -> &[String] {
        &self.target_vocab
    }

    pub fn kind(&self) -> CipherKind {
        self.kind
    }

    pub fn source_id(&self, word: &str) -> Option<usize> {
        self.source_index.get(word).copied()
    }

    pub fn target_id(&self, word: &str) -> Option<usize> {
        self.target_index.get(word).copied()
    }

    /// Index of the target word that source word `i` maps to.
    pub fn image_id(&self, i: usize) -> usize {
        self.map[i]
    }

    fn reverses(&self) -> bool {
        matches!(
            self.kind,
            CipherKind::Reversal | CipherKind::SubstitutionReversal
        )
    }

    pub fn encrypt<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<String>> {
        let mut out = words
            .iter()
            .map(|w| {
                self.source_id(w.as_ref())
                    .map(|i| self.target_vocab[self.map[i]].clone())
                    .ok_or_else(|| Error::invalid(format!("'{}' is not a source word", w.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        if self.reverses() {
            out.reverse();
        }
        Ok(out)
    }

    pub fn decrypt<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<String>> {
        let mut inverse = vec![0; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inverse[m] = i;
        }
        let mut out = words
            .iter()
            .map(|w| {
                self.target_id(w.as_ref())
                    .map(|j| self.source_vocab[inverse[j]].clone())
                    .ok_or_else(|| Error::invalid(format!("'{}' is not a target word", w.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        if self.reverses() {
            out.reverse();
        }
        Ok(out)
    }
}

/// Generates `spec.num_pairs` distinct cipher pairs.
pub fn generate_cipher_corpus(spec: &CipherSpec) -> Result<CorpusStream> {
    let cipher = spec.build_cipher()?;
    let mut rng = rng::seeded(spec.seed, rng::STREAM_CIPHER_TEXT);
    let (lo, hi) = spec.sentence_length_range;
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(spec.num_pairs);
    let max_attempts = spec.num_pairs.saturating_mul(100).max(1000);
    let mut attempts = 0;
    while pairs.len() < spec.num_pairs {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::invalid(format!(
                "cannot draw {} distinct sentences from this cipher spec",
                spec.num_pairs
            )));
        }
        let len = rng.random_range(lo..=hi);
        let words: Vec<&str> = (0..len)
            .map(|_| cipher.source_vocab[rng.random_range(0..spec.vocab_size)].as_str())
            .collect();
        let source = words.join(" ");
        if !seen.insert(source.clone()) {
            continue;
        }
        let target = cipher.encrypt(&words)?.join(" ");
        pairs.push(TranslationPair::new(
            &source,
            &target,
            &spec.source_lang,
            &spec.target_lang,
            CorpusId::SYN,
            None,
        )?);
    }
    CorpusStream::new(
        LanguagePair::new(&spec.source_lang, &spec.target_lang),
        pairs,
    )
}

/// Shuffles and partitions a stream into train/dev/test.
pub fn split_stream(
    stream: &CorpusStream,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(CorpusStream, CorpusStream, CorpusStream)> {
    let (ftrain, fdev, ftest) = fractions;
    if !(ftrain > 0.0 && fdev > 0.0 && ftest > 0.0) {
        return Err(Error::invalid("all split fractions must be positive"));
    }
    if ((ftrain + fdev + ftest) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must sum to 1"));
    }
    let n = stream.size();
    if n < 3 {
        return Err(Error::invalid(format!(
            "cannot split a stream of {n} pairs"
        )));
    }
    let n_dev = ((fdev * n as f64).round() as usize).max(1);
    let n_test = ((ftest * n as f64).round() as usize).max(1);
    let n_train = n - n_dev - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed, rng::STREAM_SPLIT));
    let take = |idx: &[usize]| -> Result<CorpusStream> {
        CorpusStream::new(
            stream.language_pair.clone(),
            idx.iter().map(|&i| stream.pairs[i].clone()).collect(),
        )
    };
    Ok((
        take(&order[..n_train])?,
        take(&order[n_train..n_train + n_dev])?,
        take(&order[n_train + n_dev..])?,
    ))
}

/// Moves `n` seeded-random pairs out of `stream`. Both parts keep the
/// original relative order.
pub fn hold_out(
    stream: &CorpusStream,
    n: usize,
    seed: u64,
) -> Result<(CorpusStream, CorpusStream)> {
    if n == 0 || n >= stream.size() {
        return Err(Error::invalid(format!(
            "cannot hold out {n} of {} pairs",
            stream.size()
        )));
    }
    let mut order: Vec<usize> = (0..stream.size()).collect();
    order.shuffle(&mut rng::seeded(seed, rng::STREAM_SPLIT));
    let mut held = vec![false; stream.size()];
    for &i in &order[..n] {
        held[i] = true;
    }
    let (mut keep, mut out) = (Vec::new(), Vec::new());
    for (p, h) in stream.pairs.iter().zip(held) {
        if h {
            out.push(p.clone())
        } else {
            keep.push(p.clone())
        }
    }
    Ok((
        CorpusStream::new(stream.language_pair.clone(), keep)?,
        CorpusStream::new(stream.language_pair.clone(), out)?,
    ))
}

/// Writes `source<TAB>target[<TAB>score]` lines.
pub fn write_pair_tsv(path: impl AsRef<Path>, stream: &CorpusStream) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for p in &stream.pairs {
        s.push_str(&p.source_text);
        s.push('\t');
        s.push_str(&p.target_text);
        if let Some(q) = p.quality_score {
            s.push_str(&format!("\t{q}"));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tsv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn scored(scores: &[f64]) -> CorpusStream {
        let pairs = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                TranslationPair::new(
                    &format!("s{i}"),
                    &format!("t{i}"),
                    "en",
                    "ar",
                    CorpusId::WM,
                    Some(s),
                )
                .unwrap()
            })
            .collect();
        CorpusStream::new(LanguagePair::new("en", "ar"), pairs).unwrap()
    }

    #[test]
    fn hold_out_partitions_and_tsv_round_trips() {
        let s = scored(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let (keep, held) = hold_out(&s, 2, 7).unwrap();
        assert_eq!((keep.size(), held.size()), (3, 2));
        let mut all: Vec<_> = keep
            .pairs()
            .iter()
            .chain(held.pairs())
            .map(|p| p.source_text.clone())
            .collect();
        all.sort();
        assert_eq!(all, ["s0", "s1", "s2", "s3", "s4"]);
        assert_eq!(hold_out(&s, 2, 7).unwrap().1, held);
        assert!(hold_out(&s, 5, 7).is_err());
        let f = tempfile::NamedTempFile::new().unwrap();
        write_pair_tsv(f.path(), &s).unwrap();
        let back = load_pair_tsv(f.path(), "en", "ar", CorpusId::WM).unwrap();
        assert_eq!(back.pairs(), s.pairs());
    }

    #[test]
    fn pair_rejects_blank_and_same_language() {
        assert!(TranslationPair::new("  ", "x", "en", "ja", CorpusId::TT, None).is_err());
        assert!(TranslationPair::new("a", "b", "en", "en", CorpusId::TT, None).is_err());
        let p = TranslationPair::new(" a ", "b\t", "en", "ja", CorpusId::TT, None).unwrap();
        assert_eq!((p.source_text.as_str(), p.target_text.as_str()), ("a", "b"));
    }

    #[test]
    fn duplicate_lines_collapse() {
        let f = tsv("hello\tこんにちは\nhello\tこんにちは\n");
        let s = load_pair_tsv(f.path(), "en", "ja", CorpusId::TT).unwrap();
        assert_eq!(s.size(), 1);
        assert_eq!(s.diagnostics()[0].reason, "duplicate pair");
    }

    #[test]
    fn line_without_tab_is_skipped_and_counted() {
        let f = tsv("a\tb\nno tab here\nc\td\n");
        let s = load_pair_tsv(f.path(), "en", "ja", CorpusId::TT).unwrap();
        assert_eq!(s.size(), 2);
        assert_eq!(
            s.diagnostics(),
            &[Diagnostic {
                op: "load_pair_tsv".into(),
                count: 1,
                reason: "fewer than 2 tab-separated fields".into()
            }]
        );
    }

    #[test]
    fn third_field_is_the_score() {
        let f = tsv("a\tb\t1.07\n");
        let s = load_pair_tsv(f.path(), "en", "ar", CorpusId::WM).unwrap();
        assert_eq!(s.pairs()[0].quality_score, Some(1.07));
    }

    #[test]
    fn missing_or_empty_file_is_fatal() {
        assert!(matches!(
            load_pair_tsv("/nonexistent/x.tsv", "en", "ja", CorpusId::TT),
            Err(Error::Io { .. })
        ));
        let f = tsv("only\n");
        assert!(matches!(
            load_pair_tsv(f.path(), "en", "ja", CorpusId::TT),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn dedup_is_idempotent_on_self_concatenation() {
        let body = "a\tb\nc\td\na\tb\ne\tf\n";
        let once = load_pair_tsv(tsv(body).path(), "en", "hi", CorpusId::TT).unwrap();
        let twice = load_pair_tsv(
            tsv(&format!("{body}{body}")).path(),
            "en",
            "hi",
            CorpusId::TT,
        )
        .unwrap();
        assert_eq!(once.pairs(), twice.pairs());
    }

    #[test]
    fn margin_filter_keeps_scores_at_or_above_threshold() {
        let s = scored(&[1.10, 1.02, 1.05]);
        let kept = filter_by_margin(&s, 1.04).unwrap();
        let srcs: Vec<_> = kept
            .pairs()
            .iter()
            .map(|p| p.source_text.as_str())
            .collect();
        assert_eq!(srcs, ["s0", "s2"]);
        assert_eq!(
            filter_by_margin(&s, f64::NEG_INFINITY).unwrap().pairs(),
            s.pairs()
        );
        assert!(matches!(filter_by_margin(&s, 2.0), Err(Error::Empty(_))));
    }

    #[test]
    fn margin_filter_requires_scores() {
        let p = TranslationPair::new("a", "b", "en", "ar", CorpusId::TT, None).unwrap();
        let s = CorpusStream::new(LanguagePair::new("en", "ar"), vec![p]).unwrap();
        assert!(matches!(
            filter_by_margin(&s, 1.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn wikidata_pairs_concatenate_label_and_description() {
        let mut full = WikidataRecord::default();
        full.labels.insert("en".into(), "Q-label".into());
        full.descriptions.insert("en".into(), "a writer".into());
        full.labels.insert("hi".into(), "क्यू".into());
        full.descriptions.insert("hi".into(), "लेखक".into());
        let mut partial = full.clone();
        partial.descriptions.remove("hi");

        let s = build_wikidata_pairs(&[full, partial], "en", "hi").unwrap();
        assert_eq!(s.size(), 1);
        assert_eq!(s.pairs()[0].source_text, "Q-label a writer");
        assert_eq!(s.pairs()[0].target_text, "क्यू लेखक");
        assert_eq!(s.pairs()[0].corpus_id, CorpusId::WD);
        assert_eq!(s.diagnostics()[0].count, 1);
    }

    #[test]
    fn wikidata_jsonl_skips_bad_lines() {
        let f = tsv(concat!(
            r#"{"id":"Q1","labels":{"en":"x","ar":"y"},"descriptions":{"en":"d","ar":"e"}}"#,
            "\nnot json\n"
        ));
        let (recs, diags) = load_wikidata_records(f.path()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].id, "Q1");
        assert_eq!(diags[0].count, 1);
    }

    fn lang_stream(target: &str, n: usize) -> CorpusStream {
        let pairs = (0..n)
            .map(|i| {
                TranslationPair::new(
                    &format!("s{i}"),
                    &format!("{target}{i}"),
                    "en",
                    target,
                    CorpusId::TT,
                    None,
                )
                .unwrap()
            })
            .collect();
        CorpusStream::new(LanguagePair::new("en", target), pairs).unwrap()
    }

    fn per_lang(s: &CorpusStream) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for p in s.pairs() {
            *m.entry(p.target_lang.clone()).or_default() += 1;
        }
        m
    }

    #[test]
    fn mix_equal_splits_evenly_and_assigns_remainder_in_order() {
        let streams = [
            lang_stream("hi", 20),
            lang_stream("ja", 20),
            lang_stream("ar", 20),
        ];
        let nine = mix_equal(&streams, 9, 1).unwrap();
        assert!(per_lang(&nine).values().all(|&c| c == 3));
        let ten = mix_equal(&streams, 10, 1).unwrap();
        let counts = per_lang(&ten);
        assert_eq!((counts["hi"], counts["ja"], counts["ar"]), (4, 3, 3));
        assert!(ten.language_pair().is_mixed());
    }

    #[test]
    fn mix_equal_is_deterministic_and_oversamples_small_streams() {
        let streams = [lang_stream("hi", 2), lang_stream("ja", 50)];
        let a = mix_equal(&streams, 40, 9).unwrap();
        let b = mix_equal(&streams, 40, 9).unwrap();
        assert_eq!(a.pairs(), b.pairs());
        assert_eq!(per_lang(&a)["hi"], 20);
        let ja: HashSet<_> = a
            .pairs()
            .iter()
            .filter(|p| p.target_lang == "ja")
            .map(|p| p.target_text.clone())
            .collect();
        assert_eq!(
            ja.len(),
            20,
            "without replacement when the stream is large enough"
        );
    }

    #[test]
    fn mix_equal_rejects_single_or_empty_streams() {
        assert!(mix_equal(&[lang_stream("hi", 3)], 4, 0).is_err());
        let empty = CorpusStream::new(LanguagePair::new("en", "ja"), vec![]).unwrap();
        assert!(matches!(
            mix_equal(&[lang_stream("hi", 3), empty], 4, 0),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn substitution_cipher_follows_map() {
        let src: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let tgt: Vec<String> = ["X", "Y", "Z"].map(String::from).to_vec();
        let c = Cipher::from_parts(
            src.clone(),
            tgt.clone(),
            vec![0, 1, 2],
            CipherKind::Substitution,
        )
        .unwrap();
        assert_eq!(c.encrypt(&["a", "b", "c"]).unwrap(), ["X", "Y", "Z"]);
        let r = Cipher::from_parts(src, tgt, vec![0, 1, 2], CipherKind::Reversal).unwrap();
        assert_eq!(r.encrypt(&["a", "b", "c"]).unwrap(), ["Z", "Y", "X"]);
    }

    #[test]
    fn cipher_corpus_is_deterministic_disjoint_and_invertible() {
        let spec = CipherSpec::new(40, 300, CipherKind::SubstitutionReversal, 11);
        let a = generate_cipher_corpus(&spec).unwrap();
        let b = generate_cipher_corpus(&spec).unwrap();
        assert_eq!(a.pairs(), b.pairs());
        assert_eq!(a.size(), 300);

        let cipher = spec.build_cipher().unwrap();
        let src_words: HashSet<&str> = a
            .pairs()
            .iter()
            .flat_map(|p| p.source_text.split(' '))
            .collect();
        let tgt_words: HashSet<&str> = a
            .pairs()
            .iter()
            .flat_map(|p| p.target_text.split(' '))
            .collect();
        assert!(src_words.is_disjoint(&tgt_words));
        for p in a.pairs() {
            let t: Vec<&str> = p.target_text.split(' ').collect();
            assert_eq!(cipher.decrypt(&t).unwrap().join(" "), p.source_text);
        }
    }

    #[test]
    fn cipher_spec_bounds_are_checked() {
        assert!(
            generate_cipher_corpus(&CipherSpec::new(9, 10, CipherKind::Substitution, 0)).is_err()
        );
        assert!(
            generate_cipher_corpus(&CipherSpec::new(10, 0, CipherKind::Substitution, 0)).is_err()
        );
        let mut s = CipherSpec::new(10, 10, CipherKind::Substitution, 0);
        s.sentence_length_range = (5, 3);
        assert!(generate_cipher_corpus(&s).is_err());
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        let s = lang_stream("ja", 10);
        let (tr, dv, te) = split_stream(&s, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((tr.size(), dv.size(), te.size()), (8, 1, 1));
        let again = split_stream(&s, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(tr.pairs(), again.0.pairs());
        assert!(split_stream(&s, (1.0, 0.0, 0.0), 3).is_err());
        assert!(split_stream(&lang_stream("ja", 2), (0.5, 0.25, 0.25), 3).is_err());
    }

    proptest::proptest! {
        #[test]
        fn mix_counts_differ_by_at_most_one(k in 2usize..6, epoch in 0usize..200, seed in 0u64..1000) {
            let streams: Vec<_> = (0..k).map(|i| lang_stream(&format!("l{i}"), 7 + i)).collect();
            let mixed = mix_equal(&streams, epoch, seed).unwrap();
            proptest::prop_assert_eq!(mixed.size(), epoch);
            let counts = per_lang(&mixed);
            let vals: Vec<usize> = (0..k).map(|i| counts.get(&format!("l{i}")).copied().unwrap_or(0)).collect();
            let (mn, mx) = (vals.iter().min().unwrap(), vals.iter().max().unwrap());
            proptest::prop_assert!(mx - mn <= 1);
        }

        #[test]
        fn split_is_a_disjoint_partition(n in 3usize..200, seed in 0u64..100) {
            let s = lang_stream("ar", n);
            let (a, b, c) = split_stream(&s, (0.6, 0.2, 0.2), seed).unwrap();
            let mut all: Vec<String> = [a, b, c].iter().flat_map(|x| x.pairs().iter().map(|p| p.source_text.clone())).collect();
            proptest::prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            proptest::prop_assert_eq!(all.len(), n);
        }
    }
}
