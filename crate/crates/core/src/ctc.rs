//! CTC loss by forward-backward recursion and the two CTC decoders.
//!
//! All probabilities live in the log domain with `-inf` for impossible
//! events.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `ln(e^a + e^b)` that is exact for `-inf` arguments.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Forward and backward variables over the blank-interleaved label sequence.
///
/// `alpha[t][s]` includes the emission at frame `t`; `beta[t][s]` covers
/// frames after `t` only, so `alpha + beta` is the log-probability of all
/// paths visiting state `s` at frame `t`.
#[derive(Clone, Debug)]
pub struct CtcTrellis {
    pub labels: Vec<usize>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

impl CtcTrellis {
    /// Total log-likelihood read off the backward variables.
    pub fn backward_log_likelihood(&self, logprobs: &Tensor) -> f64 {
        let mut total = f64::NEG_INFINITY;
        for s in 0..self.labels.len().min(2) {
            total = log_add(total, self.beta[0][s] + logprobs.at(0, self.labels[s]));
        }
        total
    }
}

/// Frames needed to emit `target`: one per label plus one blank between
/// each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + repeats(target)
}

fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate(logprobs: &Tensor, target: &[usize], blank: usize) -> Result<(usize, usize)> {
    let (frames, vocab) = logprobs.dims2()?;
    if blank >= vocab {
        return Err(Error::Input(format!("blank {blank} outside vocabulary of {vocab}")));
    }
    if let Some(&bad) = target.iter().find(|&&y| y == blank || y >= vocab) {
        return Err(Error::Input(format!(
            "target label {bad} is blank or outside vocabulary of {vocab}"
        )));
    }
    let required = min_frames(target);
    if frames < required {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            repeats: repeats(target),
            required,
            frames,
        });
    }
    Ok((frames, vocab))
}

pub fn ctc_trellis(logprobs: &Tensor, target: &[usize], blank: usize) -> Result<CtcTrellis> {
    let (frames, _) = validate(logprobs, target, blank)?;
    let mut labels = Vec::with_capacity(2 * target.len() + 1);
    labels.push(blank);
    for &y in target {
        labels.push(y);
        labels.push(blank);
    }
    let n = labels.len();
    let skip = |s: usize| s >= 2 && labels[s] != blank && labels[s] != labels[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![vec![ninf; n]; frames];
    alpha[0][0] = logprobs.at(0, labels[0]);
    if n > 1 {
        alpha[0][1] = logprobs.at(0, labels[1]);
    }
    for t in 1..frames {
        for s in 0..n {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if skip(s) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + logprobs.at(t, labels[s]);
        }
    }

    let mut beta = vec![vec![ninf; n]; frames];
    beta[frames - 1][n - 1] = 0.0;
    if n > 1 {
        beta[frames - 1][n - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..n {
            let next = |s2: usize| beta[t + 1][s2] + logprobs.at(t + 1, labels[s2]);
            let mut acc = next(s);
            if s + 1 < n {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < n && skip(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[t][s] = acc;
        }
    }

    let mut ll = alpha[frames - 1][n - 1];
    if n > 1 {
        ll = log_add(ll, alpha[frames - 1][n - 2]);
    }
    Ok(CtcTrellis {
        labels,
        alpha,
        beta,
        log_likelihood: ll,
    })
}

/// Negative log-likelihood and its gradient with respect to `logprobs`.
#[derive(Clone, Debug)]
pub struct CtcLoss {
    pub nll: f64,
    pub grad: Tensor,
}

/// `−log Σ_alignments Π p(frame, symbol)` for `logprobs: L × |U|`.
pub fn ctc_loss(logprobs: &Tensor, target: &[usize], blank: usize) -> Result<CtcLoss> {
    let tr = ctc_trellis(logprobs, target, blank)?;
    if !tr.log_likelihood.is_finite() {
        return Err(Error::Numeric(format!(
            "CTC log-likelihood is {}",
            tr.log_likelihood
        )));
    }
    let (frames, vocab) = logprobs.dims2()?;
    let mut grad = Tensor::zeros(&[frames, vocab]);
    for t in 0..frames {
        let row = grad.row_mut(t);
        for (s, &k) in tr.labels.iter().enumerate() {
            let occ = tr.alpha[t][s] + tr.beta[t][s] - tr.log_likelihood;
            if occ > f64::NEG_INFINITY {
                row[k] -= occ.exp();
            }
        }
    }
    Ok(CtcLoss {
        nll: -tr.log_likelihood,
        grad,
    })
}

/// Records the CTC loss of `logprobs` on the tape.
pub fn ctc_loss_graph(g: &mut Graph, logprobs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let out = ctc_loss(g.value(logprobs), target, blank)?;
    g.linearized(logprobs, out.nll, out.grad)
}

/// Removes repeats, then blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Best path: per-frame argmax (lowest index on ties), collapsed.
pub fn ctc_greedy(logprobs: &Tensor, blank: usize) -> Vec<usize> {
    ctc_greedy_scored(logprobs, blank).0
}

/// Greedy output together with the log-probability of the best path.
pub fn ctc_greedy_scored(logprobs: &Tensor, blank: usize) -> (Vec<usize>, f64) {
    let mut path = Vec::with_capacity(logprobs.rows());
    let mut score = 0.0;
    for t in 0..logprobs.rows() {
        let (k, v) = argmax(logprobs.row(t));
        path.push(k);
        score += v;
    }
    (collapse(&path, blank), score)
}

/// A collapsed label sequence with its total CTC log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcHypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub log_prob_blank: f64,
    pub log_prob_nonblank: f64,
}

/// Descending score, then lexicographically smaller tokens first.
pub(crate) fn rank(a: (&[usize], f64), b: (&[usize], f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

/// Prefix beam search keeping blank-ending and non-blank-ending
/// probabilities per prefix and merging equal prefixes every frame.
pub fn ctc_prefix_beam(
    logprobs: &Tensor,
    beam_size: usize,
    blank: usize,
) -> Result<Vec<CtcHypothesis>> {
    if beam_size == 0 {
        return Err(Error::Input("beam size must be at least 1".into()));
    }
    let (_, vocab) = logprobs.dims2()?;
    if blank >= vocab {
        return Err(Error::Input(format!("blank {blank} outside vocabulary of {vocab}")));
    }
    let ninf = f64::NEG_INFINITY;
    // (prefix, p_blank, p_nonblank), kept in rank order
    let mut beam: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, ninf)];
    for t in 0..logprobs.rows() {
        let row = logprobs.row(t);
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, pb, pnb) in &beam {
            let total = log_add(*pb, *pnb);
            for (k, &p) in row.iter().enumerate() {
                if p == ninf {
                    continue;
                }
                if k == blank {
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.0 = log_add(e.0, total + p);
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(k);
                if prefix.last() == Some(&k) {
                    // a repeat needs a blank in between to extend
                    let e = next.entry(extended).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, pb + p);
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, pnb + p);
                } else {
                    let e = next.entry(extended).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, total + p);
                }
            }
        }
        let mut merged: Vec<(Vec<usize>, f64, f64)> = next
            .into_iter()
            .filter(|(_, (b, nb))| log_add(*b, *nb) > ninf)
            .map(|(k, (b, nb))| (k, b, nb))
            .collect();
        merged.sort_by(|a, b| rank((&a.0, log_add(a.1, a.2)), (&b.0, log_add(b.1, b.2))));
        merged.truncate(beam_size);
        beam = merged;
    }
    Ok(beam
        .into_iter()
        .map(|(tokens, pb, pnb)| CtcHypothesis {
            tokens,
            log_prob: log_add(pb, pnb),
            log_prob_blank: pb,
            log_prob_nonblank: pnb,
        })
        .collect())
}
