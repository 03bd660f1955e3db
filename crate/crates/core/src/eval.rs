//! ROUGE-1/2/L and perplexity.
//!
//! Scores are computed on token ids from the corpus tokenizer, without
//! stemming or stopword handling, so they are comparable with each other
//! but not with numbers from the official ROUGE script.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::decode::{beam_search, DecodeConfig, DecodeOutput};
use crate::error::{Error, Result};
use crate::losses::nll_loss;
use crate::model::{forward, ForwardNoise, TransformerParams};
use crate::par;

/// Precision, recall and their harmonic mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    fn from_counts(matches: usize, candidate: usize, reference: usize) -> Self {
        if candidate == 0 || reference == 0 {
            return Prf::default();
        }
        Prf::new(
            matches as f64 / candidate as f64,
            matches as f64 / reference as f64,
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// ROUGE-N with clipped n-gram counts. `n = 0` scores zero.
pub fn rouge_n<T: Ord>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    if n == 0 || candidate.len() < n || reference.len() < n {
        return Prf::default();
    }
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matches: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    Prf::from_counts(matches, candidate.len() + 1 - n, reference.len() + 1 - n)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

pub fn rouge<T: Ord>(candidate: &[T], reference: &[T]) -> RougeScores {
    RougeScores {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
    }
}

/// Teacher-forced log-probabilities of an example's target, in evaluation
/// mode on the clean source.
pub fn target_log_probs(params: &TransformerParams, ex: &Example) -> Result<crate::tensor::Tensor> {
    let prefix = &ex.target[..ex.target.len() - 1];
    forward(
        params,
        params.config(),
        ex.source.tokens(),
        prefix,
        ForwardNoise::eval(),
    )
}

/// `(total unsmoothed NLL, target tokens)` of one example.
pub fn example_nll(params: &TransformerParams, ex: &Example) -> Result<(f64, usize)> {
    let lp = target_log_probs(params, ex)?;
    let gold = &ex.target[1..];
    Ok((nll_loss(&lp, gold, 0.0)?, gold.len()))
}

/// `exp(total NLL / total target tokens)` over `split`.
pub fn perplexity(params: &TransformerParams, split: &[Example]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::InvalidInput("perplexity of an empty split".into()));
    }
    let parts = par::map(split, |ex| example_nll(params, ex));
    let mut total = 0.0;
    let mut tokens = 0;
    for p in parts {
        let (nll, n) = p?;
        total += nll;
        tokens += n;
    }
    Ok((total / tokens as f64).exp())
}

/// One scored test example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub index: usize,
    pub output: DecodeOutput,
    pub scores: RougeScores,
}

/// Macro-averaged F1 over the examples that decoded successfully.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemScores {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub n_scored: usize,
    pub n_failed: usize,
    pub per_example: Vec<ExampleScore>,
    pub failures: Vec<(usize, String)>,
}

/// Means of the F1 fields. Zero for an empty slice.
pub fn macro_average(scores: &[RougeScores]) -> (f64, f64, f64) {
    if scores.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = scores.len() as f64;
    let sum = |f: fn(&RougeScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    (
        sum(|s| s.rouge1.f1),
        sum(|s| s.rouge2.f1),
        sum(|s| s.rouge_l.f1),
    )
}

/// Decodes every source and scores it against its reference summary.
/// Examples whose decoding fails are reported and left out of the means.
pub fn evaluate_system(
    params: &TransformerParams,
    split: &[Example],
    cfg: &DecodeConfig,
) -> Result<SystemScores> {
    cfg.validate()?;
    let results = par::map_indexed(split, |i, ex| {
        beam_search(params, ex.source.tokens(), cfg).map(|output| {
            let scores = rouge(&output.tokens, ex.summary());
            ExampleScore {
                index: i,
                output,
                scores,
            }
        })
    });
    let mut per_example = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => per_example.push(s),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    let all: Vec<RougeScores> = per_example.iter().map(|s| s.scores).collect();
    let (r1, r2, rl) = macro_average(&all);
    Ok(SystemScores {
        r1,
        r2,
        rl,
        n_scored: per_example.len(),
        n_failed: failures.len(),
        per_example,
        failures,
    })
}
