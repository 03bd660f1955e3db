//! Beam search with a length penalty, trigram blocking and EOS stopping.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{self, TransformerParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Exponent of the length penalty; the useful range is about 0.6 to 1.
    pub length_penalty: f64,
    /// Most tokens generated per summary, counting EOS.
    pub max_len: usize,
    pub block_trigrams: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            length_penalty: 0.8,
            max_len: 32,
            block_trigrams: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("beam_size", "must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len", "must be at least 1"));
        }
        if !(self.length_penalty.is_finite() && self.length_penalty >= 0.0) {
            return Err(Error::config(
                "length_penalty",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// A partial or complete summary. `tokens` starts with BOS; the hypothesis
/// is finished exactly when it ends with EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

impl BeamHypothesis {
    pub fn finished(&self) -> bool {
        self.tokens.len() > 1 && self.tokens.last() == Some(&EOS)
    }

    /// Number of generated tokens, EOS included.
    pub fn generated_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.generated_len().max(1), alpha)
    }
}

/// Result of decoding one source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// Summary tokens without BOS and EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub score: f64,
    /// False when no hypothesis emitted EOS within `max_len`.
    pub finished: bool,
}

/// `((5 + length) / 6)^α`.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

/// True when appending `next` to `tokens` repeats a trigram already present.
pub fn blocks_trigram(tokens: &[TokenId], next: TokenId) -> bool {
    let n = tokens.len();
    if n < 3 {
        return false;
    }
    let tail = [tokens[n - 2], tokens[n - 1], next];
    tokens.windows(3).any(|w| w == tail)
}

/// True when any trigram occurs twice in `tokens`.
pub fn has_repeated_trigram(tokens: &[TokenId]) -> bool {
    let mut seen = std::collections::BTreeSet::new();
    tokens.windows(3).any(|w| !seen.insert(w))
}

fn by_log_prob(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn by_score(alpha: f64) -> impl Fn(&BeamHypothesis, &BeamHypothesis) -> Ordering {
    move |a, b| {
        b.score(alpha)
            .total_cmp(&a.score(alpha))
            .then_with(|| a.tokens.cmp(&b.tokens))
    }
}

/// Beam search over an arbitrary next-token model. `next_log_probs` maps a
/// BOS-started prefix to the log-distribution of the following token.
///
/// Finished hypotheses keep their beam slot and compete on cumulative
/// log-probability; search ends when every slot is finished or `max_len`
/// tokens were generated. PAD and BOS are never generated.
pub fn beam_search_with<F>(
    mut next_log_probs: F,
    vocab_size: usize,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if (EOS as usize) >= vocab_size {
        return Err(Error::InvalidInput(format!(
            "vocabulary of {vocab_size} has no EOS"
        )));
    }
    let mut beam = vec![BeamHypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        if beam.iter().all(BeamHypothesis::finished) {
            break;
        }
        let mut candidates = Vec::new();
        for hyp in &beam {
            if hyp.finished() {
                candidates.push(hyp.clone());
                continue;
            }
            let log_probs = next_log_probs(&hyp.tokens)?;
            if log_probs.len() != vocab_size {
                return Err(Error::shape(
                    "beam_search",
                    "next-token distribution has the wrong size",
                ));
            }
            let mut expanded = false;
            for (v, &lp) in log_probs.iter().enumerate() {
                let token = v as TokenId;
                if token == PAD || token == BOS || lp == f64::NEG_INFINITY {
                    continue;
                }
                if cfg.block_trigrams && blocks_trigram(&hyp.tokens, token) {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(token);
                candidates.push(BeamHypothesis {
                    tokens,
                    log_prob: hyp.log_prob + lp,
                });
                expanded = true;
            }
            if !expanded {
                // every continuation is blocked; ending is the only move left
                let mut tokens = hyp.tokens.clone();
                tokens.push(EOS);
                candidates.push(BeamHypothesis {
                    tokens,
                    log_prob: hyp.log_prob + log_probs[EOS as usize],
                });
            }
        }
        candidates.sort_by(by_log_prob);
        candidates.truncate(cfg.beam_size);
        for c in &candidates {
            if c.finished() && !beam.iter().any(|b| b.tokens == c.tokens) {
                finished.push(c.clone());
            }
        }
        beam = candidates;
    }
    let (best, done) = match finished
        .iter()
        .min_by(|a, b| by_score(cfg.length_penalty)(a, b))
    {
        Some(h) => (h.clone(), true),
        None => {
            let h = beam
                .iter()
                .min_by(|a, b| by_score(cfg.length_penalty)(a, b))
                .expect("beam is never empty")
                .clone();
            log::warn!("no hypothesis finished within {} tokens", cfg.max_len);
            (h, false)
        }
    };
    let end = if done {
        best.tokens.len() - 1
    } else {
        best.tokens.len()
    };
    Ok(DecodeOutput {
        tokens: best.tokens[1..end].to_vec(),
        log_prob: best.log_prob,
        score: best.score(cfg.length_penalty),
        finished: done,
    })
}

/// Decodes `src` with `params` in evaluation mode. The encoder runs once;
/// `max_len` is capped at the model's target length.
pub fn beam_search(
    params: &TransformerParams,
    src: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    let mcfg = params.config();
    let memory = model::encode(params, mcfg, src)?;
    let capped = DecodeConfig {
        max_len: cfg.max_len.min(mcfg.max_tgt_len),
        ..cfg.clone()
    };
    let step = |prefix: &[TokenId]| -> Result<Vec<f64>> {
        let lp = model::decode(params, mcfg, src, &memory, prefix)?;
        Ok(lp.row(lp.rows() - 1).to_vec())
    };
    beam_search_with(step, mcfg.vocab_size, &capped)
}

/// Step-wise argmax decoding, with the same bans and blocking as the beam.
pub fn greedy_with<F>(
    mut next_log_probs: F,
    vocab_size: usize,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut hyp = BeamHypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
    };
    while hyp.generated_len() < cfg.max_len && !hyp.finished() {
        let lp = next_log_probs(&hyp.tokens)?;
        let best = (0..vocab_size as TokenId)
            .filter(|&t| t != PAD && t != BOS && lp[t as usize] != f64::NEG_INFINITY)
            .filter(|&t| !(cfg.block_trigrams && blocks_trigram(&hyp.tokens, t)))
            .max_by(|&a, &b| lp[a as usize].total_cmp(&lp[b as usize]).then(b.cmp(&a)))
            .unwrap_or(EOS);
        hyp.log_prob += lp[best as usize];
        hyp.tokens.push(best);
    }
    let done = hyp.finished();
    let end = if done {
        hyp.tokens.len() - 1
    } else {
        hyp.tokens.len()
    };
    Ok(DecodeOutput {
        tokens: hyp.tokens[1..end].to_vec(),
        log_prob: hyp.log_prob,
        score: hyp.score(cfg.length_penalty),
        finished: done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_penalty_values() {
        for a in [0.0, 0.6, 0.8, 1.0] {
            assert_eq!(length_penalty(1, a), 1.0);
        }
        for len in 1..20 {
            assert_eq!(length_penalty(len, 0.0), 1.0);
        }
        assert!((length_penalty(7, 1.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn trigram_blocking_cases() {
        assert!(blocks_trigram(&[10, 11, 12, 10, 11], 12));
        assert!(!blocks_trigram(&[10, 11], 10));
        assert!(!blocks_trigram(&[10, 11, 12], 13));
        assert!(has_repeated_trigram(&[1, 2, 3, 1, 2, 3]));
        assert!(!has_repeated_trigram(&[1, 2, 3, 4]));
    }

    /// A fixed bigram-style table keyed on the last token.
    fn table_model(prefix: &[TokenId]) -> Result<Vec<f64>> {
        let last = *prefix.last().unwrap() as usize;
        let mut w = vec![
            0.1,
            0.1,
            0.3 + 0.1 * last as f64,
            0.2,
            1.0,
            0.5 + 0.2 * (last % 2) as f64,
        ];
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x = (*x / z).ln());
        Ok(w)
    }

    #[test]
    fn unit_beam_is_greedy() {
        let cfg = DecodeConfig {
            beam_size: 1,
            max_len: 6,
            ..DecodeConfig::default()
        };
        let b = beam_search_with(table_model, 6, &cfg).unwrap();
        let g = greedy_with(table_model, 6, &cfg).unwrap();
        assert_eq!(b, g);
    }

    #[test]
    fn unfinished_output_is_flagged() {
        let never_ends = |_: &[TokenId]| Ok(vec![-1.0, -1.0, -50.0, -9.0, -0.1, -3.0]);
        let cfg = DecodeConfig {
            beam_size: 2,
            max_len: 3,
            block_trigrams: false,
            ..DecodeConfig::default()
        };
        let out = beam_search_with(never_ends, 6, &cfg).unwrap();
        assert!(!out.finished);
        assert_eq!(out.tokens, vec![4, 4, 4]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = DecodeConfig {
            beam_size: 0,
            ..DecodeConfig::default()
        };
        assert!(beam_search_with(table_model, 6, &cfg).is_err());
    }
}
