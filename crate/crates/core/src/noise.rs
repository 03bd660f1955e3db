//! Source-side perturbations for the noisy student: word drop, word
//! replacement from an embedding-similarity table, sentence drop, and
//! multiplicative Gaussian noise on source embeddings.
//!
//! Special tokens are never dropped or replaced and no perturbation returns
//! an empty document.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{is_special, Document, TokenId, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Word-drop probability `p_d`.
    pub word_drop: f64,
    /// Word-replacement probability `p_r`.
    pub word_replace: f64,
    /// Candidate list size `k` for replacement.
    pub candidates: usize,
    /// Sentence-drop probability `p_s`.
    pub sentence_drop: f64,
    pub gaussian_sigma: f64,
    pub gaussian_enabled: bool,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            word_drop: 0.1,
            word_replace: 0.1,
            candidates: 10,
            sentence_drop: 0.05,
            gaussian_sigma: 0.1,
            gaussian_enabled: false,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    /// No perturbation at all.
    pub fn off() -> Self {
        NoiseConfig {
            word_drop: 0.0,
            word_replace: 0.0,
            sentence_drop: 0.0,
            gaussian_enabled: false,
            ..NoiseConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("word_drop", self.word_drop),
            ("word_replace", self.word_replace),
            ("sentence_drop", self.sentence_drop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("{p} is not a probability")));
            }
        }
        if self.candidates == 0 {
            return Err(Error::config("candidates", "must be at least 1"));
        }
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::config(
                "gaussian_sigma",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.word_drop == 0.0
            && self.word_replace == 0.0
            && self.sentence_drop == 0.0
            && !(self.gaussian_enabled && self.gaussian_sigma > 0.0)
    }
}

/// For every ordinary word, its `k` most cosine-similar other ordinary words
/// in descending similarity (ties by ascending id). Special tokens have no
/// candidates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementTable {
    k: usize,
    candidates: Vec<Vec<TokenId>>,
}

impl ReplacementTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.candidates.len()
    }

    pub fn candidates(&self, id: TokenId) -> &[TokenId] {
        self.candidates.get(id as usize).map_or(&[], Vec::as_slice)
    }
}

/// Builds the replacement table from an embedding matrix `[V × d]`.
/// Zero vectors have cosine 0 with everything.
pub fn build_replacement_table(embeddings: &Tensor, k: usize) -> Result<ReplacementTable> {
    let [v, d] = embeddings.shape() else {
        return Err(Error::shape(
            "build_replacement_table",
            "embeddings must be a matrix",
        ));
    };
    let (v, d) = (*v, *d);
    if k == 0 || v <= k + NUM_SPECIAL {
        return Err(Error::config(
            "candidates",
            format!(
                "k = {k} needs a vocabulary larger than {}, got {v}",
                k + NUM_SPECIAL
            ),
        ));
    }
    let unit: Vec<Vec<f64>> = (0..v)
        .map(|i| {
            let row = &embeddings.values()[i * d..(i + 1) * d];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|x| x / norm).collect()
            } else {
                vec![0.0; d]
            }
        })
        .collect();
    let candidates = (0..v)
        .map(|w| {
            if w < NUM_SPECIAL {
                return Vec::new();
            }
            let mut scored: Vec<(f64, usize)> = (NUM_SPECIAL..v)
                .filter(|&o| o != w)
                .map(|o| (unit[w].iter().zip(&unit[o]).map(|(a, b)| a * b).sum(), o))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored
                .into_iter()
                .take(k)
                .map(|(_, o)| o as TokenId)
                .collect()
        })
        .collect();
    Ok(ReplacementTable { k, candidates })
}

/// Removes each ordinary token with probability `p`. Sentences that lose all
/// their tokens disappear; if nothing would be left, one uniformly chosen
/// droppable token is kept.
pub fn word_drop<R: Rng + ?Sized>(doc: &Document, p: f64, rng: &mut R) -> Document {
    if p == 0.0 {
        return doc.clone();
    }
    let mut sentences: Vec<Vec<TokenId>> = Vec::with_capacity(doc.num_sentences());
    let mut droppable = Vec::new();
    for (s, sentence) in doc.sentences().enumerate() {
        let mut kept = Vec::with_capacity(sentence.len());
        for (i, &t) in sentence.iter().enumerate() {
            if is_special(t) {
                kept.push(t);
                continue;
            }
            droppable.push((s, i));
            if rng.random::<f64>() >= p {
                kept.push(t);
            }
        }
        sentences.push(kept);
    }
    if sentences.iter().all(Vec::is_empty) {
        let (s, i) = droppable[rng.random_range(0..droppable.len())];
        let token = doc.sentences().nth(s).expect("sentence index")[i];
        return Document::single_sentence(vec![token]).expect("one token");
    }
    Document::from_sentences(&sentences).expect("non-empty")
}

/// Replaces each ordinary token with probability `p` by a uniform draw from
/// its candidate list. Length and sentence boundaries are unchanged.
pub fn word_replace<R: Rng + ?Sized>(
    doc: &Document,
    table: &ReplacementTable,
    p: f64,
    rng: &mut R,
) -> Document {
    if p == 0.0 {
        return doc.clone();
    }
    let tokens = doc
        .tokens()
        .iter()
        .map(|&t| {
            let options = table.candidates(t);
            if is_special(t) || options.is_empty() {
                return t;
            }
            if rng.random::<f64>() < p {
                options[rng.random_range(0..options.len())]
            } else {
                t
            }
        })
        .collect();
    Document::new(tokens, doc.sentence_starts().to_vec()).expect("same layout")
}

/// Removes each sentence with probability `p`; if every sentence would go,
/// one uniformly chosen sentence stays.
pub fn sentence_drop<R: Rng + ?Sized>(doc: &Document, p: f64, rng: &mut R) -> Document {
    if p == 0.0 || doc.num_sentences() == 1 {
        return doc.clone();
    }
    let all: Vec<&[TokenId]> = doc.sentences().collect();
    let kept: Vec<Vec<TokenId>> = all
        .iter()
        .filter(|_| rng.random::<f64>() >= p)
        .map(|s| s.to_vec())
        .collect();
    if kept.is_empty() {
        let pick = rng.random_range(0..all.len());
        return Document::from_sentences(&[all[pick].to_vec()]).expect("non-empty");
    }
    Document::from_sentences(&kept).expect("non-empty")
}

/// Multiplicative noise factors drawn from `N(1, σ²)`.
pub fn gaussian_noise_factors<R: Rng + ?Sized>(
    shape: &[usize],
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if sigma == 0.0 {
        return Ok(Tensor::filled(shape, 1.0));
    }
    let normal =
        Normal::new(1.0, sigma).map_err(|e| Error::config("gaussian_sigma", e.to_string()))?;
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

/// `x ⊗ e` with `e ~ N(1, σ²)` elementwise.
pub fn gaussian_embed_noise<R: Rng + ?Sized>(
    embeds: &Tensor,
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if sigma == 0.0 {
        return Ok(embeds.clone());
    }
    let factors = gaussian_noise_factors(embeds.shape(), sigma, rng)?;
    embeds.hadamard(&factors)
}

/// Word drop, then word replacement, then sentence drop. Gaussian noise is
/// not applied here; it acts on embeddings inside the model.
pub fn perturb_pipeline<R: Rng + ?Sized>(
    doc: &Document,
    cfg: &NoiseConfig,
    table: Option<&ReplacementTable>,
    rng: &mut R,
) -> Result<Document> {
    cfg.validate()?;
    let dropped = word_drop(doc, cfg.word_drop, rng);
    let replaced = match (cfg.word_replace > 0.0, table) {
        (false, _) => dropped,
        (true, Some(t)) => word_replace(&dropped, t, cfg.word_replace, rng),
        (true, None) => {
            return Err(Error::config(
                "word_replace",
                "word replacement needs a replacement table",
            ))
        }
    };
    Ok(sentence_drop(&replaced, cfg.sentence_drop, rng))
}
