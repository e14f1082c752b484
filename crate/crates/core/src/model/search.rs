//! Greedy and beam search over an arbitrary next-token distribution.

use super::{EOS, SOS};
use crate::error::{config_err, Result};

/// A decoded token sequence without `<sos>`/`<eos>`, with its summed
/// log-probability. `finished` marks hypotheses closed by `<eos>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Log-probability per generated token, counting the closing `<eos>`.
    pub fn score(&self) -> f64 {
        let n = self.tokens.len() + usize::from(self.finished);
        if n == 0 {
            return 0.0;
        }
        self.log_prob / n as f64
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn with_sos(tokens: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(tokens.len() + 1);
    v.push(SOS);
    v.extend_from_slice(tokens);
    v
}

/// Iterated argmax from `<sos>` until `<eos>` or `max_len` generated tokens.
/// `step` maps a prefix (starting with `<sos>`) to next-token probabilities.
pub fn greedy_search<F>(mut step: F, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_len {
        let p = step(&with_sos(&h.tokens))?;
        let v = argmax(&p);
        h.log_prob += p[v].ln();
        if v == EOS {
            h.finished = true;
            break;
        }
        h.tokens.push(v);
    }
    Ok(h)
}

/// Length-normalized beam search. Each step keeps the `width` best
/// extensions across all live beams; extensions ending in `<eos>` retire.
/// The greedy path joins the final pool, so the result never scores below it.
pub fn beam_search<F>(mut step: F, width: usize, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if width == 0 {
        return Err(config_err!("beam width must be at least 1"));
    }
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if alive.is_empty() {
            break;
        }
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (b, (toks, lp)) in alive.iter().enumerate() {
            let p = step(&with_sos(toks))?;
            cands.extend(p.iter().enumerate().map(|(v, &pv)| (b, v, lp + pv.ln())));
        }
        cands.sort_by(|x, y| y.2.total_cmp(&x.2));
        let mut next = Vec::with_capacity(width);
        for &(b, v, lp) in cands.iter().take(width) {
            let toks = &alive[b].0;
            if v == EOS {
                pool.push(Hypothesis {
                    tokens: toks.clone(),
                    log_prob: lp,
                    finished: true,
                });
            } else {
                let mut t = toks.clone();
                t.push(v);
                next.push((t, lp));
            }
        }
        alive = next;
    }
    pool.extend(alive.into_iter().map(|(tokens, log_prob)| Hypothesis {
        tokens,
        log_prob,
        finished: false,
    }));
    if width > 1 {
        pool.push(greedy_search(&mut step, max_len)?);
    }
    let mut best = 0;
    for (i, h) in pool.iter().enumerate() {
        if h.score() > pool[best].score() {
            best = i;
        }
    }
    Ok(pool.swap_remove(best))
}
