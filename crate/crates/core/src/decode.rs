//! Attention beam search, attention rescoring of CTC n-best lists, and
//! character error rate.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::ctc::{self, log_add, rank};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::model::{Model, Vocabulary};
use crate::tensor::Tensor;

pub const DEFAULT_RESCORE_WEIGHT: f64 = 0.3;
pub const DEFAULT_CTC_NBEST: usize = 10;
pub const DEFAULT_BEAM: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens without sos/eos.
    pub tokens: Vec<usize>,
    pub log_prob_ctc: Option<f64>,
    pub log_prob_att: Option<f64>,
    pub score: f64,
}

impl Hypothesis {
    pub fn ctc(tokens: Vec<usize>, log_prob: f64) -> Self {
        Self {
            tokens,
            log_prob_ctc: Some(log_prob),
            log_prob_att: None,
            score: log_prob,
        }
    }

    pub fn attention(tokens: Vec<usize>, log_prob: f64) -> Self {
        Self {
            tokens,
            log_prob_ctc: None,
            log_prob_att: Some(log_prob),
            score: log_prob,
        }
    }
}

/// Hypotheses in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub hypotheses: Vec<Hypothesis>,
    pub beam_size: usize,
    /// Set when no hypothesis reached eos and partial ones were returned.
    pub truncated: bool,
}

impl NBestList {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }

    pub fn from_ctc(hyps: Vec<ctc::CtcHypothesis>, beam_size: usize) -> Self {
        Self {
            hypotheses: hyps
                .into_iter()
                .map(|h| Hypothesis::ctc(h.tokens, h.log_prob))
                .collect(),
            beam_size,
            truncated: false,
        }
    }
}

/// Source of next-token log-probabilities for a prefix starting with sos.
pub trait NextTokenScorer {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F> NextTokenScorer for F
where
    F: Fn(&[usize]) -> Result<Vec<f64>>,
{
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// The attention decoder of `model` attending over encoder output `h`.
pub struct AttentionDecoder<'a> {
    pub model: &'a Model,
    pub h: &'a Tensor,
}

impl NextTokenScorer for AttentionDecoder<'_> {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.model.decoder_forward(self.h, prefix)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamOptions {
    pub beam_size: usize,
    /// Maximum number of output tokens, eos excluded.
    pub max_len: usize,
    /// Added per emitted non-eos token; zero keeps raw log-probability sums.
    pub length_bonus: f64,
}

/// Renormalizes `lp` with blank and sos removed from the support.
fn mask_specials(mut lp: Vec<f64>) -> Vec<f64> {
    lp[Vocabulary::BLANK_ID] = f64::NEG_INFINITY;
    lp[Vocabulary::SOS_ID] = f64::NEG_INFINITY;
    let norm = lp.iter().fold(f64::NEG_INFINITY, |acc, &v| log_add(acc, v));
    for v in &mut lp {
        *v -= norm;
    }
    lp
}

/// Length-synchronous beam search from sos; hypotheses are frozen on eos.
pub fn attention_beam_search(
    scorer: &impl NextTokenScorer,
    opts: BeamOptions,
) -> Result<NBestList> {
    if opts.beam_size == 0 || opts.max_len == 0 {
        return Err(Error::Input("beam size and max_len must be at least 1".into()));
    }
    let eos = Vocabulary::EOS_ID;
    let mut running: Vec<(Vec<usize>, f64)> = vec![(vec![Vocabulary::SOS_ID], 0.0)];
    let mut ended: Vec<(Vec<usize>, f64)> = Vec::new();
    for step in 0..=opts.max_len {
        let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
        for (prefix, score) in &running {
            let lp = mask_specials(scorer.next_log_probs(prefix)?);
            if lp.len() <= eos {
                return Err(Error::Input(format!("scorer returned {} log-probs", lp.len())));
            }
            for (k, &p) in lp.iter().enumerate() {
                if p == f64::NEG_INFINITY || (step == opts.max_len && k != eos) {
                    continue;
                }
                let bonus = if k == eos { 0.0 } else { opts.length_bonus };
                let mut next = prefix.clone();
                next.push(k);
                candidates.push((next, score + p + bonus));
            }
        }
        candidates.sort_by(|a, b| rank((&a.0, a.1), (&b.0, b.1)));
        candidates.truncate(opts.beam_size);
        if candidates.is_empty() {
            break;
        }
        running.clear();
        for (seq, score) in candidates {
            if seq.last() == Some(&eos) {
                ended.push((seq, score));
            } else {
                running.push((seq, score));
            }
        }
        if running.is_empty() {
            break;
        }
    }
    let truncated = ended.is_empty();
    let mut pool = if truncated {
        log::warn!("no hypothesis reached eos within {} tokens", opts.max_len);
        running
    } else {
        ended
    };
    pool.sort_by(|a, b| rank((&a.0, a.1), (&b.0, b.1)));
    pool.truncate(opts.beam_size);
    let hypotheses = pool
        .into_iter()
        .map(|(seq, score)| {
            let tokens = seq[1..].iter().copied().filter(|&t| t != eos).collect();
            Hypothesis::attention(tokens, score)
        })
        .collect();
    Ok(NBestList {
        hypotheses,
        beam_size: opts.beam_size,
        truncated,
    })
}

/// `weight·ctc + (1−weight)·att`, with the boundary weights reading one
/// score only so an impossible score on the other side cannot leak in.
pub fn combine_scores(weight: f64, ctc: f64, att: f64) -> f64 {
    if weight == 1.0 {
        ctc
    } else if weight == 0.0 {
        att
    } else {
        weight * ctc + (1.0 - weight) * att
    }
}

/// Re-ranks a CTC n-best list by teacher-forced attention scores.
pub fn attention_rescore(
    nbest: &NBestList,
    weight: f64,
    attention_score: impl Fn(&[usize]) -> Result<f64>,
) -> Result<Hypothesis> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Input(format!("rescore weight {weight} outside [0, 1]")));
    }
    if nbest.hypotheses.is_empty() {
        return Err(Error::Input("empty n-best list".into()));
    }
    let mut scored = Vec::with_capacity(nbest.hypotheses.len());
    for h in &nbest.hypotheses {
        let ctc = h
            .log_prob_ctc
            .ok_or_else(|| Error::Input("n-best entry without a CTC score".into()))?;
        let att = attention_score(&h.tokens)?;
        scored.push(Hypothesis {
            tokens: h.tokens.clone(),
            log_prob_ctc: Some(ctc),
            log_prob_att: Some(att),
            score: combine_scores(weight, ctc, att),
        });
    }
    scored.sort_by(|a, b| rank((&a.tokens, a.score), (&b.tokens, b.score)));
    Ok(scored.swap_remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMethod {
    CtcGreedy,
    CtcPrefix,
    Attention,
    AttentionRescore,
}

impl DecodeMethod {
    pub const ALL: [DecodeMethod; 4] = [
        DecodeMethod::CtcGreedy,
        DecodeMethod::CtcPrefix,
        DecodeMethod::Attention,
        DecodeMethod::AttentionRescore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMethod::CtcGreedy => "cg",
            DecodeMethod::CtcPrefix => "cp",
            DecodeMethod::Attention => "att",
            DecodeMethod::AttentionRescore => "att-re",
        }
    }
}

impl fmt::Display for DecodeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown decode method {s:?}; expected cg, cp, att or att-re")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam_size: usize,
    pub ctc_nbest: usize,
    pub rescore_weight: f64,
    /// Defaults to the encoder length when unset.
    pub max_len: Option<usize>,
    pub length_bonus: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_size: DEFAULT_BEAM,
            ctc_nbest: DEFAULT_CTC_NBEST,
            rescore_weight: DEFAULT_RESCORE_WEIGHT,
            max_len: None,
            length_bonus: 0.0,
        }
    }
}

/// Decodes encoder output `h` with one of the four methods.
pub fn decode_encoded(
    model: &Model,
    h: &Tensor,
    method: DecodeMethod,
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    let blank = Vocabulary::BLANK_ID;
    match method {
        DecodeMethod::CtcGreedy => {
            let (tokens, score) = ctc::ctc_greedy_scored(&model.ctc_head(h)?, blank);
            Ok(Hypothesis::ctc(tokens, score))
        }
        DecodeMethod::CtcPrefix => {
            let hyps = ctc::ctc_prefix_beam(&model.ctc_head(h)?, opts.beam_size, blank)?;
            let top = hyps.into_iter().next().expect("prefix beam never empty");
            Ok(Hypothesis::ctc(top.tokens, top.log_prob))
        }
        DecodeMethod::Attention => {
            let beam = BeamOptions {
                beam_size: opts.beam_size,
                max_len: opts.max_len.unwrap_or(h.rows()).max(1),
                length_bonus: opts.length_bonus,
            };
            let list = attention_beam_search(&AttentionDecoder { model, h }, beam)?;
            Ok(list.hypotheses.into_iter().next().expect("beam never empty"))
        }
        DecodeMethod::AttentionRescore => {
            let hyps = ctc::ctc_prefix_beam(&model.ctc_head(h)?, opts.ctc_nbest, blank)?;
            let nbest = NBestList::from_ctc(hyps, opts.ctc_nbest);
            attention_rescore(&nbest, opts.rescore_weight, |t| model.attention_score(h, t))
        }
    }
}

pub fn decode_features(
    model: &Model,
    features: &FeatureMatrix,
    method: DecodeMethod,
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    let h = model.encode(features)?.h;
    decode_encoded(model, &h, method, opts)
}

/// Edit operations of a unit-cost Levenshtein alignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    pub cer: f64,
    /// Empty reference: `cer` is the insertion count.
    pub degenerate: bool,
}

impl CerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

pub fn compute_cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> CerStats {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let (mut s, mut ins, mut del) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + diff {
                s += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    let degenerate = n == 0;
    CerStats {
        substitutions: s,
        insertions: ins,
        deletions: del,
        ref_len: n,
        cer: (s + ins + del) as f64 / n.max(1) as f64,
        degenerate,
    }
}

/// Pooled CER over many utterances: total errors over total reference length.
pub fn corpus_cer(stats: &[CerStats]) -> f64 {
    let errors: usize = stats.iter().map(CerStats::errors).sum();
    let len: usize = stats.iter().map(|s| s.ref_len).sum();
    errors as f64 / len.max(1) as f64
}

pub fn write_hypothesis_line(out: &mut impl Write, utt_id: &str, text: &str, score: f64) -> Result<()> {
    writeln!(out, "{utt_id}\t{text}\t{score}").map_err(|e| Error::Input(e.to_string()))
}

pub const CER_CSV_HEADER: &str = "utt_id,S,I,D,ref_len,cer";

pub fn write_cer_csv(out: &mut impl Write, rows: &[(String, CerStats)]) -> std::io::Result<()> {
    writeln!(out, "{CER_CSV_HEADER}")?;
    for (utt, s) in rows {
        writeln!(
            out,
            "{utt},{},{},{},{},{}",
            s.substitutions, s.insertions, s.deletions, s.ref_len, s.cer
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    /// Deterministic pseudo-decoder: log-probs depend only on the prefix.
    fn hashed_scorer(vocab: usize, seed: u64) -> impl Fn(&[usize]) -> Result<Vec<f64>> {
        move |prefix: &[usize]| {
            let mut h = DefaultHasher::new();
            (seed, prefix).hash(&mut h);
            let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
            let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let norm = raw.iter().map(|v| v.exp()).sum::<f64>().ln();
            Ok(raw.into_iter().map(|v| v - norm).collect())
        }
    }

    fn greedy(scorer: &impl NextTokenScorer, max_len: usize) -> (Vec<usize>, f64) {
        let mut prefix = vec![Vocabulary::SOS_ID];
        let mut score = 0.0;
        for step in 0..=max_len {
            let lp = mask_specials(scorer.next_log_probs(&prefix).unwrap());
            let mut best = Vocabulary::EOS_ID;
            if step < max_len {
                for k in 0..lp.len() {
                    if lp[k] > lp[best] {
                        best = k;
                    }
                }
            }
            score += lp[best];
            if best == Vocabulary::EOS_ID {
                break;
            }
            prefix.push(best);
        }
        (prefix[1..].to_vec(), score)
    }

    fn all_sequences(tokens: &[usize], max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for p in &frontier {
                for &t in tokens {
                    let mut q: Vec<usize> = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    fn sequence_score(scorer: &impl NextTokenScorer, seq: &[usize]) -> f64 {
        let mut prefix = vec![Vocabulary::SOS_ID];
        let mut total = 0.0;
        for &t in seq.iter().chain(std::iter::once(&Vocabulary::EOS_ID)) {
            total += mask_specials(scorer.next_log_probs(&prefix).unwrap())[t];
            prefix.push(t);
        }
        total
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..30 {
            let s = hashed_scorer(7, seed);
            let opts = BeamOptions { beam_size: 1, max_len: 6, length_bonus: 0.0 };
            let list = attention_beam_search(&s, opts).unwrap();
            let (tokens, score) = greedy(&s, 6);
            assert_eq!(list.hypotheses[0].tokens, tokens);
            assert!((list.hypotheses[0].score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn eos_first_gives_empty_output() {
        let s = |_: &[usize]| -> Result<Vec<f64>> {
            let mut v = vec![f64::NEG_INFINITY; 5];
            v[Vocabulary::EOS_ID] = 0.0;
            Ok(v)
        };
        let list = attention_beam_search(&s, BeamOptions { beam_size: 3, max_len: 4, length_bonus: 0.0 })
            .unwrap();
        assert_eq!(list.hypotheses.len(), 1);
        assert!(list.hypotheses[0].tokens.is_empty());
        assert_eq!(list.hypotheses[0].score, 0.0);
    }

    #[test]
    fn unbounded_beam_matches_exhaustive_argmax() {
        let tokens = [3, 4, 5];
        for seed in 0..25 {
            let s = hashed_scorer(6, seed);
            let list =
                attention_beam_search(&s, BeamOptions { beam_size: 100, max_len: 3, length_bonus: 0.0 })
                    .unwrap();
            let mut all: Vec<(Vec<usize>, f64)> = all_sequences(&tokens, 3)
                .into_iter()
                .map(|q| {
                    let sc = sequence_score(&s, &q);
                    (q, sc)
                })
                .collect();
            all.sort_by(|a, b| rank((&a.0, a.1), (&b.0, b.1)));
            assert_eq!(list.hypotheses.len(), all.len());
            assert_eq!(list.hypotheses[0].tokens, all[0].0);
            assert!((list.hypotheses[0].score - all[0].1).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_is_flagged() {
        let s = |_: &[usize]| -> Result<Vec<f64>> {
            let mut v = vec![f64::NEG_INFINITY; 5];
            v[4] = 0.0;
            Ok(v)
        };
        let list = attention_beam_search(&s, BeamOptions { beam_size: 2, max_len: 3, length_bonus: 0.0 })
            .unwrap();
        assert!(list.truncated);
        assert_eq!(list.hypotheses[0].tokens, vec![4, 4, 4]);
    }

    #[test]
    fn beam_scores_never_increase() {
        let s = hashed_scorer(8, 99);
        let list =
            attention_beam_search(&s, BeamOptions { beam_size: 5, max_len: 5, length_bonus: 0.0 }).unwrap();
        for h in &list.hypotheses {
            let mut prefix = vec![Vocabulary::SOS_ID];
            let mut prev = 0.0;
            for &t in h.tokens.iter().chain(std::iter::once(&Vocabulary::EOS_ID)) {
                let next = prev + mask_specials(s(&prefix).unwrap())[t];
                assert!(next <= prev);
                prev = next;
                prefix.push(t);
            }
            assert!((prev - h.score).abs() < 1e-12);
        }
    }

    fn nbest(entries: &[(&[usize], f64)]) -> NBestList {
        NBestList {
            hypotheses: entries.iter().map(|(t, s)| Hypothesis::ctc(t.to_vec(), *s)).collect(),
            beam_size: entries.len(),
            truncated: false,
        }
    }

    #[test]
    fn rescore_boundaries() {
        let list = nbest(&[(&[3], -1.0), (&[4], -2.0), (&[3, 4], -3.0)]);
        let att = |t: &[usize]| -> Result<f64> { Ok(if t == [3, 4] { -0.1 } else { -5.0 }) };
        assert_eq!(attention_rescore(&list, 1.0, att).unwrap().tokens, vec![3]);
        assert_eq!(attention_rescore(&list, 0.0, att).unwrap().tokens, vec![3, 4]);
        let mixed = attention_rescore(&list, 0.3, att).unwrap();
        assert_eq!(mixed.tokens, vec![3, 4]);
        assert!((mixed.score - (0.3 * -3.0 + 0.7 * -0.1)).abs() < 1e-15);

        let single = nbest(&[(&[5], -4.0)]);
        for w in [0.0, 0.2, 0.7, 1.0] {
            assert_eq!(attention_rescore(&single, w, att).unwrap().tokens, vec![5]);
        }
        assert!(attention_rescore(&nbest(&[]), 0.3, att).is_err());
    }

    #[test]
    fn rescore_ties_are_lexicographic() {
        let list = nbest(&[(&[4], -1.0), (&[3], -1.0)]);
        let att = |_: &[usize]| -> Result<f64> { Ok(-1.0) };
        assert_eq!(attention_rescore(&list, 0.5, att).unwrap().tokens, vec![3]);
    }

    #[test]
    fn cer_examples() {
        let s = compute_cer(b"abc", b"abc");
        assert_eq!(s.cer, 0.0);
        let s = compute_cer(b"abc", b"axc");
        assert_eq!((s.substitutions, s.insertions, s.deletions), (1, 0, 0));
        assert!((s.cer - 1.0 / 3.0).abs() < 1e-15);
        let s = compute_cer(b"", b"xy");
        assert!(s.degenerate);
        assert_eq!(s.insertions, 2);
        assert_eq!(s.cer, 2.0);
        let s = compute_cer(b"abcd", b"ad");
        assert_eq!(s.deletions, 2);
    }

    fn edit_distance(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = edit_distance(ra, rb) + usize::from(x != y);
                sub.min(edit_distance(ra, b) + 1).min(edit_distance(a, rb) + 1)
            }
        }
    }

    proptest! {
        #[test]
        fn cer_matches_recursive_edit_distance(
            a in proptest::collection::vec(0u8..4, 0..=8),
            b in proptest::collection::vec(0u8..4, 0..=8),
        ) {
            let s = compute_cer(&a, &b);
            let d = edit_distance(&a, &b);
            prop_assert_eq!(s.errors(), d);
            prop_assert_eq!(s.insertions as isize - s.deletions as isize, b.len() as isize - a.len() as isize);
            prop_assert_eq!(compute_cer(&b, &a).errors(), d);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in DecodeMethod::ALL {
            assert_eq!(m.as_str().parse::<DecodeMethod>().unwrap(), m);
        }
        assert!("beam".parse::<DecodeMethod>().is_err());
    }

    #[test]
    fn output_formats() {
        let mut buf = Vec::new();
        write_hypothesis_line(&mut buf, "u1", "a b", -1.5).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "u1\ta b\t-1.5\n");
        let mut buf = Vec::new();
        write_cer_csv(&mut buf, &[("u1".into(), compute_cer(b"abc", b"axc"))]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("utt_id,S,I,D,ref_len,cer\nu1,1,0,0,3,0.333"));
    }
}
