//! Vocabulary, word-level tokenization, JSON-Lines corpora and the synthetic
//! key-sentence corpus.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Source documents are cut to this many tokens.
pub const MAX_SOURCE_TOKENS: usize = 512;

const SENTENCE_TERMINATORS: [&str; 3] = [".", "!", "?"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// Bidirectional token/id map. Ids `0..4` are PAD, BOS, EOS and UNK; every
/// other token has a unique id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary whose ordinary words get ids `4, 5, ...` in order.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!(
                    "invalid vocabulary entry {w:?}"
                )));
            }
            if index.contains_key(&w) {
                return Err(Error::InvalidInput(format!(
                    "duplicate vocabulary entry {w:?}"
                )));
            }
            index.insert(w.clone(), tokens.len() as TokenId);
            tokens.push(w);
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Most frequent words of `texts` (ties by lexical order), up to
    /// `max_size` entries including the reserved ones.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size.saturating_sub(NUM_SPECIAL));
        Vocabulary::from_words(ranked.into_iter().map(|(w, _)| w))
    }

    /// Reads a vocabulary file: one token per line, the first line is id 4.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocabulary {}", path.display()), e))?;
        Vocabulary::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_owned))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[NUM_SPECIAL..] {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)
            .map_err(|e| Error::io(format!("writing vocabulary {}", path.display()), e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_SPECIAL..]
    }
}

/// Token ids plus the index at which each sentence starts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    tokens: Vec<TokenId>,
    sentence_starts: Vec<usize>,
}

impl Document {
    /// `sentence_starts` must begin at 0, be strictly ascending and stay
    /// inside the token range. Empty documents are rejected.
    pub fn new(tokens: Vec<TokenId>, sentence_starts: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty document".into()));
        }
        if sentence_starts.first() != Some(&0) {
            return Err(Error::InvalidInput("first sentence must start at 0".into()));
        }
        let ascending = sentence_starts.windows(2).all(|w| w[0] < w[1]);
        if !ascending || *sentence_starts.last().unwrap() >= tokens.len() {
            return Err(Error::InvalidInput(format!(
                "invalid sentence starts {sentence_starts:?} for {} tokens",
                tokens.len()
            )));
        }
        Ok(Document {
            tokens,
            sentence_starts,
        })
    }

    pub fn single_sentence(tokens: Vec<TokenId>) -> Result<Self> {
        Document::new(tokens, vec![0])
    }

    /// Builds a document from non-empty sentences.
    pub fn from_sentences(sentences: &[Vec<TokenId>]) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut starts = Vec::new();
        for s in sentences.iter().filter(|s| !s.is_empty()) {
            starts.push(tokens.len());
            tokens.extend_from_slice(s);
        }
        Document::new(tokens, starts)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn sentence_starts(&self) -> &[usize] {
        &self.sentence_starts
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_starts.len()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &[TokenId]> + '_ {
        let ends = self.sentence_starts[1..]
            .iter()
            .copied()
            .chain(std::iter::once(self.tokens.len()));
        self.sentence_starts
            .iter()
            .zip(ends)
            .map(move |(&s, e)| &self.tokens[s..e])
    }
}

/// A source document with its BOS/EOS-framed reference summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub source: Document,
    pub target: Vec<TokenId>,
}

impl Example {
    pub fn new(source: Document, target: Vec<TokenId>) -> Result<Self> {
        if target.len() < 2 || target[0] != BOS || *target.last().unwrap() != EOS {
            return Err(Error::InvalidInput(
                "target must be framed by BOS ... EOS".into(),
            ));
        }
        Ok(Example { source, target })
    }

    /// Reference summary tokens without the BOS/EOS frame.
    pub fn summary(&self) -> &[TokenId] {
        &self.target[1..self.target.len() - 1]
    }
}

/// Lowercases, splits on whitespace, and splits punctuation off into its
/// own tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch.is_ascii_punctuation() && !matches!(ch, '<' | '>' | '/' | '_' | '-' | '\'') {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Word-level tokenization. A new sentence starts after every `.`, `!` or `?`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Document> {
    let words = split_words(text);
    if words.is_empty() {
        return Err(Error::InvalidInput("cannot tokenize empty text".into()));
    }
    let mut tokens = Vec::with_capacity(words.len());
    let mut starts = vec![0];
    for (i, w) in words.iter().enumerate() {
        tokens.push(vocab.id(w));
        if SENTENCE_TERMINATORS.contains(&w.as_str()) && i + 1 < words.len() {
            starts.push(i + 1);
        }
    }
    Document::new(tokens, starts)
}

/// Space-joined tokens. Unknown ids render as `<unk>`.
pub fn detokenize(tokens: &[TokenId], vocab: &Vocabulary) -> String {
    tokens
        .iter()
        .map(|&t| vocab.token(t).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Summary text to `BOS w1 .. wn EOS`.
pub fn encode_target(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut ids = vec![BOS];
    ids.extend(split_words(text).iter().map(|w| vocab.id(w)));
    ids.push(EOS);
    ids
}

/// Keeps the first `max_tokens` tokens.
pub fn truncate(doc: &Document, max_tokens: usize) -> Document {
    let max_tokens = max_tokens.max(1);
    if doc.len() <= max_tokens {
        return doc.clone();
    }
    Document {
        tokens: doc.tokens[..max_tokens].to_vec(),
        sentence_starts: doc
            .sentence_starts
            .iter()
            .copied()
            .filter(|&s| s < max_tokens)
            .collect(),
    }
}

/// One JSON-Lines corpus record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub src: String,
    pub tgt: String,
}

pub fn read_records(
    path: &Path,
) -> Result<Vec<(usize, serde_json::Map<String, serde_json::Value>)>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("malformed JSON: {e}"),
        })?;
        let serde_json::Value::Object(map) = value else {
            return Err(Error::Corpus {
                path: path.to_path_buf(),
                line: line_no,
                reason: "expected a JSON object".into(),
            });
        };
        out.push((line_no, map));
    }
    Ok(out)
}

pub(crate) fn string_field<'a>(
    path: &Path,
    line: usize,
    map: &'a serde_json::Map<String, serde_json::Value>,
    field: &str,
) -> Result<&'a str> {
    match map.get(field) {
        Some(serde_json::Value::String(s)) => Ok(s),
        Some(_) => Err(Error::Corpus {
            path: path.to_path_buf(),
            line,
            reason: format!("field `{field}` is not a string"),
        }),
        None => Err(Error::Corpus {
            path: path.to_path_buf(),
            line,
            reason: format!("missing field `{field}`"),
        }),
    }
}

/// Tokenizes one record, truncating the source to `max_src_tokens`.
pub fn encode_record(
    record: &CorpusRecord,
    vocab: &Vocabulary,
    max_src_tokens: usize,
) -> Result<Example> {
    let doc = tokenize(&record.src, vocab)?;
    Example::new(
        truncate(&doc, max_src_tokens.min(MAX_SOURCE_TOKENS)),
        encode_target(&record.tgt, vocab),
    )
}

/// Loads a `{"src": ..., "tgt": ...}` JSON-Lines file, tokenizing and
/// truncating every source. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn load_corpus(path: &Path, vocab: &Vocabulary, max_src_tokens: usize) -> Result<Vec<Example>> {
    let max_src_tokens = max_src_tokens.min(MAX_SOURCE_TOKENS);
    read_records(path)?
        .into_iter()
        .map(|(line, map)| {
            let src = string_field(path, line, &map, "src")?;
            let tgt = string_field(path, line, &map, "tgt")?;
            let doc = tokenize(src, vocab).map_err(|e| Error::Corpus {
                path: path.to_path_buf(),
                line,
                reason: e.to_string(),
            })?;
            Example::new(truncate(&doc, max_src_tokens), encode_target(tgt, vocab))
        })
        .collect()
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("writing corpus", e))?;
    }
    w.flush().map_err(|e| Error::io("writing corpus", e))
}

/// Shape of a synthetic corpus.
///
/// Every document is a handful of filler sentences plus one key sentence
/// built only from "key" words. The summary is the key sentence's words in
/// order, so it is extractive by construction and learnable by copying.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Total vocabulary size including the reserved tokens and `.`.
    pub vocab_size: usize,
    pub max_doc_tokens: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_sentence_words: usize,
    pub max_sentence_words: usize,
    pub min_key_words: usize,
    pub max_key_words: usize,
    /// Put the key sentence first instead of at a random position.
    pub key_sentence_first: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_train: 1000,
            n_dev: 100,
            n_test: 100,
            vocab_size: 200,
            max_doc_tokens: 60,
            min_sentences: 3,
            max_sentences: 6,
            min_sentence_words: 4,
            max_sentence_words: 8,
            min_key_words: 3,
            max_key_words: 5,
            key_sentence_first: true,
        }
    }
}

impl SyntheticSpec {
    fn content_words(&self) -> usize {
        self.vocab_size.saturating_sub(NUM_SPECIAL + 1)
    }

    fn key_word_count(&self) -> usize {
        self.content_words() / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::config("n_train", "must be at least 1"));
        }
        if self.min_key_words == 0 || self.min_key_words > self.max_key_words {
            return Err(Error::config("key_words", "need 1 <= min <= max"));
        }
        if self.key_word_count() < self.max_key_words
            || self.content_words() < 2 * self.max_key_words
        {
            return Err(Error::config(
                "vocab_size",
                format!("{} is too small", self.vocab_size),
            ));
        }
        if self.min_sentences < 1 || self.min_sentences > self.max_sentences {
            return Err(Error::config("sentences", "need 1 <= min <= max"));
        }
        if self.min_sentence_words == 0 || self.min_sentence_words > self.max_sentence_words {
            return Err(Error::config("sentence_words", "need 1 <= min <= max"));
        }
        // the key sentence alone plus one short filler sentence must fit
        if self.max_key_words + self.min_sentence_words + 2
            > self.max_doc_tokens.min(MAX_SOURCE_TOKENS)
        {
            return Err(Error::config(
                "max_doc_tokens",
                format!("{} is too small", self.max_doc_tokens),
            ));
        }
        Ok(())
    }

    /// Ordinary vocabulary words: `.`, then key words `k*`, then filler `w*`.
    pub fn words(&self) -> Vec<String> {
        let keys = self.key_word_count();
        let fillers = self.content_words() - keys;
        std::iter::once(".".to_string())
            .chain((0..keys).map(|i| format!("k{i}")))
            .chain((0..fillers).map(|i| format!("w{i}")))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<CorpusRecord>,
    pub dev: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
    pub vocabulary: Vocabulary,
}

fn synthetic_record(
    spec: &SyntheticSpec,
    keys: &[String],
    fillers: &[String],
    rng: &mut ChaCha8Rng,
) -> CorpusRecord {
    let key_len = rng.random_range(spec.min_key_words..=spec.max_key_words);
    let key_sentence: Vec<String> = keys.choose_multiple(rng, key_len).cloned().collect();
    let n_sentences = rng.random_range(spec.min_sentences..=spec.max_sentences);
    let key_pos = if spec.key_sentence_first {
        0
    } else {
        rng.random_range(0..n_sentences)
    };
    let budget = spec.max_doc_tokens.min(MAX_SOURCE_TOKENS);
    let mut used = key_len + 1;
    let mut sentences: Vec<Vec<String>> = Vec::with_capacity(n_sentences);
    for s in 0..n_sentences {
        if s == key_pos {
            sentences.push(key_sentence.clone());
            continue;
        }
        let len = rng.random_range(spec.min_sentence_words..=spec.max_sentence_words);
        let words: Vec<String> = (0..len)
            .map(|_| fillers[rng.random_range(0..fillers.len())].clone())
            .collect();
        // filler sentences that would overflow the budget are skipped
        if used + len < budget {
            used += len + 1;
            sentences.push(words);
        }
    }
    let src = sentences
        .iter()
        .map(|s| format!("{} .", s.join(" ")))
        .collect::<Vec<_>>()
        .join(" ");
    CorpusRecord {
        src,
        tgt: key_sentence.join(" "),
    }
}

/// Deterministic synthetic corpus for `seed`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let words = spec.words();
    let n_keys = spec.key_word_count();
    let keys = &words[1..=n_keys];
    let fillers = &words[n_keys + 1..];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize| -> Vec<CorpusRecord> {
        (0..n)
            .map(|_| synthetic_record(spec, keys, fillers, &mut rng))
            .collect()
    };
    let train = split(spec.n_train);
    let dev = split(spec.n_dev);
    let test = split(spec.n_test);
    Ok(SyntheticCorpus {
        train,
        dev,
        test,
        vocabulary: Vocabulary::from_words(words)?,
    })
}

/// File layout written by [`write_synthetic_corpus`].
#[derive(Clone, Debug)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub vocab: PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> Self {
        CorpusPaths {
            train: dir.join("train.jsonl"),
            dev: dir.join("dev.jsonl"),
            test: dir.join("test.jsonl"),
            vocab: dir.join("vocab.txt"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.train, &self.dev, &self.test, &self.vocab]
    }
}

pub fn write_synthetic_corpus(dir: &Path, spec: &SyntheticSpec, seed: u64) -> Result<CorpusPaths> {
    let corpus = generate_synthetic_corpus(spec, seed)?;
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let paths = CorpusPaths::in_dir(dir);
    write_corpus(&paths.train, &corpus.train)?;
    write_corpus(&paths.dev, &corpus.dev)?;
    write_corpus(&paths.test, &corpus.test)?;
    corpus.vocabulary.save(&paths.vocab)?;
    Ok(paths)
}

/// Distinct non-special token ids that occur in `tokens`.
pub fn token_set(tokens: &[TokenId]) -> BTreeSet<TokenId> {
    tokens.iter().copied().filter(|&t| !is_special(t)).collect()
}
