//! Greedy single-head decoding and joint CTC/attention decoding.
//!
//! CTC rows and decoder outputs share one index space: word ids `0..V`
//! plus a special index `V` (blank for CTC, eos for the decoder). Joint
//! decoding therefore scores the same candidate set under both heads, with
//! the special index meaning "end the hypothesis here".

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Transcript;
use crate::error::{Error, Result};
use crate::losses::MtlWeights;
use crate::model::{ctc_head, encode, Bound, DecoderState, ModelParams};

/// Hypothesis length cap used by the evaluation and attack drivers.
pub const DEFAULT_MAX_LEN: usize = 12;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Best-path CTC decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_ctc_decode(logp: &Tensor) -> Transcript {
    let blank = logp.cols() - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logp.rows() {
        let best = argmax(logp.row(t));
        if best != blank && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    Transcript(out)
}

/// Lowest index among the maxima.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Decoder-only greedy decoding; stops at eos or after `max_len` words.
pub fn greedy_attention_decode(tape: &mut Tape, m: &Bound, h: Var, max_len: usize) -> Result<Transcript> {
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be >= 1".into()));
    }
    let eos = m.config().special();
    let mut state = DecoderState::start(tape, m, h)?;
    let mut token = eos;
    let mut out = Vec::new();
    while out.len() < max_len {
        let step = state.step(tape, m, token)?;
        token = argmax(tape.value(step.log_probs).data());
        if token == eos {
            break;
        }
        out.push(token);
    }
    Ok(Transcript(out))
}

/// Forward variables of one prefix: per-frame log-probability that the
/// first `t + 1` frames collapse to the prefix, ending in a non-blank
/// (`r_n`) or a blank (`r_b`) frame.
#[derive(Clone, Debug)]
pub struct PrefixState {
    prefix: Vec<usize>,
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    /// `log p(output starts with prefix)`.
    pub score: f64,
}

impl PrefixState {
    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }
}

/// Incremental CTC prefix scorer over one `T × (V+1)` log-prob matrix.
pub struct CtcPrefixScorer<'a> {
    logp: &'a Tensor,
    blank: usize,
    evaluations: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(logp: &'a Tensor) -> Result<Self> {
        if logp.rank() != 2 || logp.rows() == 0 || logp.cols() < 2 {
            return Err(Error::shape("ctc_prefix_score", format!("{:?}", logp.shape())));
        }
        Ok(CtcPrefixScorer {
            logp,
            blank: logp.cols() - 1,
            evaluations: 0,
        })
    }

    /// Number of prefix extensions and end scores computed so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn initial(&self) -> PrefixState {
        let mut r_b = Vec::with_capacity(self.logp.rows());
        let mut acc = 0.0;
        for t in 0..self.logp.rows() {
            acc += self.logp.row(t)[self.blank];
            r_b.push(acc);
        }
        PrefixState {
            prefix: Vec::new(),
            r_n: vec![f64::NEG_INFINITY; self.logp.rows()],
            r_b,
            score: 0.0,
        }
    }

    /// `log p(output = prefix exactly)`.
    pub fn end_score(&mut self, state: &PrefixState) -> f64 {
        self.evaluations += 1;
        let last = self.logp.rows() - 1;
        log_add(state.r_n[last], state.r_b[last])
    }

    /// Extend `state` by word `c`; the result's `score` is
    /// `log p(output starts with prefix·c)`.
    pub fn extend(&mut self, state: &PrefixState, c: usize) -> Result<PrefixState> {
        if c >= self.blank {
            return Err(Error::LabelOutOfRange {
                label: c,
                classes: self.blank,
            });
        }
        self.evaluations += 1;
        let frames = self.logp.rows();
        let repeat = state.prefix.last() == Some(&c);
        let mut r_n = vec![f64::NEG_INFINITY; frames];
        let mut r_b = vec![f64::NEG_INFINITY; frames];
        let mut score = f64::NEG_INFINITY;
        if state.prefix.is_empty() {
            r_n[0] = self.logp.row(0)[c];
            score = r_n[0];
        }
        for t in 1..frames {
            let row = self.logp.row(t);
            // Mass that has emitted exactly the old prefix by frame t-1 and
            // may start c at frame t.
            let phi = if repeat {
                state.r_b[t - 1]
            } else {
                log_add(state.r_b[t - 1], state.r_n[t - 1])
            };
            let enter = phi + row[c];
            r_n[t] = log_add(r_n[t - 1], phi) + row[c];
            r_b[t] = log_add(r_n[t - 1], r_b[t - 1]) + row[self.blank];
            score = log_add(score, enter);
        }
        let mut prefix = state.prefix.clone();
        prefix.push(c);
        Ok(PrefixState {
            prefix,
            r_n,
            r_b,
            score,
        })
    }

    /// Score of `candidate` after `state`: the extended prefix score for a
    /// word, or the full-sequence score when `candidate` is the special index.
    pub fn score(&mut self, state: &PrefixState, candidate: usize) -> Result<f64> {
        if candidate == self.blank {
            Ok(self.end_score(state))
        } else {
            Ok(self.extend(state, candidate)?.score)
        }
    }
}

/// `log p(output starts with g·c)` for a word `c`, or `log p(output = g)`
/// when `c` is the blank index. Unreachable prefixes give `-inf`.
pub fn ctc_prefix_score(logp: &Tensor, prefix: &[usize], candidate: usize) -> Result<f64> {
    let mut scorer = CtcPrefixScorer::new(logp)?;
    let mut state = scorer.initial();
    for &g in prefix {
        state = scorer.extend(&state, g)?;
    }
    scorer.score(&state, candidate)
}

/// Scores of the token chosen at one decoding step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    /// CTC prefix-score increment `ψ(g·c) − ψ(g)`; 0 when the CTC head is
    /// not consulted.
    pub ctc: f64,
    /// Decoder log-probability; 0 when the decoder is not consulted.
    pub dec: f64,
    pub combined: f64,
    pub token: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub hypothesis: Transcript,
    /// One entry per emitted token, the final eos included when reached.
    pub per_step_scores: Vec<StepScore>,
    /// CTC prefix-scorer evaluations performed.
    pub ctc_evaluations: usize,
}

/// Step-synchronous joint decoding with beam width 1: every candidate is
/// scored by `λ·ctc_increment + (1−λ)·decoder_logprob` with `λ = λ(i)_C`.
///
/// At `λ = 0` the CTC head is never evaluated; at `λ = 1` the decoder is
/// never evaluated.
pub fn joint_greedy_decode(
    tape: &mut Tape,
    m: &Bound,
    h: Var,
    weights: &MtlWeights,
    max_len: usize,
) -> Result<DecodeResult> {
    weights.validate()?;
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be >= 1".into()));
    }
    let lambda = weights.lambda_i_c;
    let special = m.config().special();
    let candidates = m.config().head_size();

    let ctc_logp = if lambda > 0.0 {
        let lp = ctc_head(tape, m, h)?;
        Some(tape.value(lp).clone())
    } else {
        None
    };
    let mut scorer = ctc_logp.as_ref().map(CtcPrefixScorer::new).transpose()?;
    let mut prefix_state = scorer.as_ref().map(|s| s.initial());
    let mut dec_state = if lambda < 1.0 {
        Some(DecoderState::start(tape, m, h)?)
    } else {
        None
    };

    let mut hyp = Vec::new();
    let mut steps = Vec::new();
    let mut last = special;
    loop {
        let dec_row = match dec_state.as_mut() {
            Some(st) => {
                let out = st.step(tape, m, last)?;
                Some(tape.value(out.log_probs).data().to_vec())
            }
            None => None,
        };
        let mut ctc_row = vec![0.0; candidates];
        let mut extended: Vec<Option<PrefixState>> = vec![None; candidates];
        if let (Some(sc), Some(ps)) = (scorer.as_mut(), prefix_state.as_ref()) {
            for c in 0..candidates {
                let abs = if c == special {
                    sc.end_score(ps)
                } else {
                    let next = sc.extend(ps, c)?;
                    let s = next.score;
                    extended[c] = Some(next);
                    s
                };
                ctc_row[c] = abs - ps.score;
            }
        }
        let mut best: Option<StepScore> = None;
        for c in 0..candidates {
            let ctc = ctc_row[c];
            let dec = dec_row.as_ref().map_or(0.0, |r| r[c]);
            let combined = match (scorer.is_some(), dec_row.is_some()) {
                (true, true) => lambda * ctc + (1.0 - lambda) * dec,
                (true, false) => ctc,
                _ => dec,
            };
            if best.is_none_or(|b| combined > b.combined) {
                best = Some(StepScore {
                    ctc,
                    dec,
                    combined,
                    token: c,
                });
            }
        }
        let best = best.expect("at least one candidate");
        steps.push(best);
        if best.token == special {
            break;
        }
        hyp.push(best.token);
        last = best.token;
        if let Some(ps) = prefix_state.as_mut() {
            *ps = extended[best.token].take().expect("extended for every word");
        }
        if hyp.len() >= max_len {
            break;
        }
    }
    Ok(DecodeResult {
        hypothesis: Transcript(hyp),
        per_step_scores: steps,
        ctc_evaluations: scorer.map_or(0, |s| s.evaluations()),
    })
}

/// Encode `x` without gradient tracking and joint-decode it.
pub fn recognize(params: &ModelParams, x: &Tensor, weights: &MtlWeights, max_len: usize) -> Result<DecodeResult> {
    let mut tape = Tape::new();
    let m = Bound::new(params, &mut tape, false);
    let xv = tape.constant(x.clone());
    let h = encode(&mut tape, &m, xv)?;
    joint_greedy_decode(&mut tape, &m, h, weights, max_len)
}
