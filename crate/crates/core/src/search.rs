//! Greedy and beam-search sequence decoding over any step model.

use std::cmp::Ordering;

use crate::error::{KagsError, Result};
use crate::vocab::{BOS, EOS};

/// A left-to-right model: feeding a token to a state yields log-probabilities
/// for the next token and the successor state.
pub trait StepModel {
    type State: Clone;

    fn initial(&mut self) -> Result<Self::State>;

    fn step(&mut self, state: &Self::State, token: usize) -> Result<(Vec<f64>, Self::State)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without the begin and end tokens.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher log-probability first, then the smaller token sequence.
fn rank(a_lp: f64, a_tok: &[usize], b_lp: f64, b_tok: &[usize]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a_tok.cmp(b_tok))
}

fn argmax_lowest(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

/// Picks the most probable token each step (ties go to the lowest id), for
/// at most `max_len` steps.
pub fn greedy<M: StepModel>(model: &mut M, max_len: usize) -> Result<Hypothesis> {
    let mut state = model.initial()?;
    let mut token = BOS;
    let mut out = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let (lp, next) = model.step(&state, token)?;
        let best = argmax_lowest(&lp);
        out.log_prob += lp[best];
        if best == EOS {
            out.finished = true;
            break;
        }
        out.tokens.push(best);
        state = next;
        token = best;
    }
    Ok(out)
}

struct Live<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    /// State before consuming the last token.
    state: S,
    last: usize,
}

/// Length-wise beam search over cumulative log-probability, without length
/// normalisation. Hypotheses that emit the end token leave the beam and
/// compete on total log-probability with whatever is alive at `max_len`.
pub fn beam<M: StepModel>(model: &mut M, beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(KagsError::Precondition("beam size must be at least 1".into()));
    }
    let mut alive = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial()?,
        last: BOS,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if alive.is_empty() {
            break;
        }
        // log-probabilities only fall as tokens append
        let best_alive = alive.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if finished.iter().any(|f| f.log_prob > best_alive) {
            break;
        }
        let mut cands: Vec<(f64, Vec<usize>, usize, usize)> = Vec::new();
        let mut succ = Vec::with_capacity(alive.len());
        for (pi, h) in alive.iter().enumerate() {
            let (lp, next) = model.step(&h.state, h.last)?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut seq = h.tokens.clone();
                seq.push(tok);
                cands.push((h.log_prob + l, seq, pi, tok));
            }
            succ.push(next);
        }
        cands.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
        // An end token ranked inside the beam retires its hypothesis; the
        // beam refills with the best continuations, so finished hypotheses
        // never cost a live slot.
        let mut next_alive = Vec::with_capacity(beam);
        for (rank_pos, (lp, mut seq, pi, tok)) in cands.into_iter().enumerate() {
            if tok == EOS {
                if rank_pos < beam {
                    seq.pop();
                    finished.push(Hypothesis {
                        tokens: seq,
                        log_prob: lp,
                        finished: true,
                    });
                }
            } else if next_alive.len() < beam {
                next_alive.push(Live {
                    tokens: seq,
                    log_prob: lp,
                    state: succ[pi].clone(),
                    last: tok,
                });
            }
            if rank_pos + 1 >= beam && next_alive.len() == beam {
                break;
            }
        }
        alive = next_alive;
    }
    finished.extend(alive.into_iter().map(|h| Hypothesis {
        tokens: h.tokens,
        log_prob: h.log_prob,
        finished: false,
    }));
    finished.sort_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
    Ok(finished.swap_remove(0))
}
