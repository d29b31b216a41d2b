//! Greedy and beam-search decoding over any next-token scorer.
//!
//! Scores are sums of token log-probabilities with no length normalisation.
//! Candidates are ranked by score, ties going to the lexicographically
//! smaller token sequence (so the lower token id wins at equal prefixes).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoding strategy for generated label sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Beam(usize),
}

/// Supplies log-probabilities of the next token given a generated prefix
/// (which excludes the start token).
pub trait NextTokenScorer {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[u32]) -> Result<Vec<f64>>> NextTokenScorer for F {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens; ends with the end token iff `finished`.
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Result of a beam search, including the ranked live beam after each step.
#[derive(Clone, Debug)]
pub struct BeamOutput {
    pub best: Hypothesis,
    pub finished: Vec<Hypothesis>,
    pub steps: Vec<Vec<Hypothesis>>,
}

pub fn greedy<S: NextTokenScorer>(scorer: &mut S, max_len: usize, eos: u32) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let lp = scorer.log_probs(&hyp.tokens)?;
        let (tok, score) = argmax(&lp);
        hyp.tokens.push(tok);
        hyp.score += score;
        if tok == eos {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

fn argmax(lp: &[f64]) -> (u32, f64) {
    let mut best = 0;
    for (i, v) in lp.iter().enumerate() {
        if *v > lp[best] {
            best = i;
        }
    }
    (best as u32, lp[best])
}

/// Beam search of the given width.
///
/// Each step ranks every one-token extension of every live beam and walks
/// down the ranking until `width` unfinished candidates have been taken.
/// Candidates ending in `eos` met along the way become finished hypotheses.
/// Since extending a hypothesis can only lower its score, the search stops
/// as soon as the best finished score is at least the best live score.
/// With `width == 1` this reduces exactly to [`greedy`].
pub fn beam_search<S: NextTokenScorer>(
    scorer: &mut S,
    width: usize,
    max_len: usize,
    eos: u32,
) -> Result<BeamOutput> {
    if width == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut steps = Vec::new();

    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for h in &live {
            let lp = scorer.log_probs(&h.tokens)?;
            for (tok, &p) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Hypothesis {
                    finished: tok as u32 == eos,
                    tokens,
                    score: h.score + p,
                });
            }
        }
        candidates.sort_by(rank);
        let mut next = Vec::with_capacity(width);
        for c in candidates {
            if next.len() == width {
                break;
            }
            if c.finished {
                finished.push(c);
            } else {
                next.push(c);
            }
        }
        steps.push(next.clone());
        live = next;
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_finished >= live[0].score {
            break;
        }
    }

    let mut pool: Vec<Hypothesis> = finished.iter().cloned().chain(live).collect();
    pool.sort_by(rank);
    let best = pool.into_iter().next().expect("at least one hypothesis survives");
    finished.sort_by(rank);
    Ok(BeamOutput {
        best,
        finished,
        steps,
    })
}

pub fn decode<S: NextTokenScorer>(
    scorer: &mut S,
    decoding: Decoding,
    max_len: usize,
    eos: u32,
) -> Result<Hypothesis> {
    match decoding {
        Decoding::Greedy => greedy(scorer, max_len, eos),
        Decoding::Beam(w) => Ok(beam_search(scorer, w, max_len, eos)?.best),
    }
}
