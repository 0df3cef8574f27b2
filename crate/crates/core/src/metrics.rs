//! Word error rate, targeted WER and accent accuracy.
//!
//! Corpus figures are pooled: total edit operations over total reference
//! words, not a mean of per-utterance rates.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `errors / ref_len`; may exceed 1 through insertions.
    pub fn wer(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::Empty("reference"));
        }
        Ok(self.errors() as f64 / self.ref_len as f64)
    }
}

impl AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_len += o.ref_len;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerStats {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub wer: f64,
}

impl TryFrom<EditCounts> for WerStats {
    type Error = Error;

    fn try_from(c: EditCounts) -> Result<Self> {
        Ok(WerStats {
            substitutions: c.substitutions,
            deletions: c.deletions,
            insertions: c.insertions,
            ref_len: c.ref_len,
            wer: c.wer()?,
        })
    }
}

/// Unit-cost Levenshtein alignment of word sequences. Among optimal
/// alignments the backtrace prefers substitution, then deletion, then
/// insertion.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, v) in d.iter_mut().enumerate().take(m + 1) {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + diff == here {
                c.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

pub fn edit_distance_words<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<WerStats> {
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    edit_counts(reference, hyp).try_into()
}

/// WER of the prediction against the attacker's target transcription;
/// 0 means the attack fully succeeded.
pub fn adv_twer<T: PartialEq>(target: &[T], prediction: &[T]) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Empty("adversarial target"));
    }
    edit_counts(target, prediction).wer()
}

/// Pooled WER over `(reference, hypothesis)` pairs.
pub fn corpus_wer<'a, T, I>(pairs: I) -> Result<WerStats>
where
    T: PartialEq + 'a,
    I: IntoIterator<Item = (&'a [T], &'a [T])>,
{
    let mut total = EditCounts::default();
    for (r, h) in pairs {
        total += edit_counts(r, h);
    }
    total.try_into()
}

pub fn accent_accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::Empty("accent labels"));
    }
    let hits = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}
