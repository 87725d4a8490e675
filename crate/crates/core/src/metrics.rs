//! Levenshtein alignment and pooled error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Edit operations on one best alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Unit-cost Levenshtein distance of `hyp` against `reference`.
///
/// The backtrace prefers a diagonal step (match or substitution), then a
/// deletion, then an insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for (j, cell) in dp.iter_mut().take(w).enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut counts = EditCounts {
        distance: dp[n * w + m],
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let differs = reference[i - 1] != hyp[j - 1];
            if dp[(i - 1) * w + j - 1] + usize::from(differs) == here {
                counts.substitutions += usize::from(differs);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Pooled edit counts for one metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
}

impl MetricCounts {
    fn add(&mut self, e: EditCounts, ref_len: usize) {
        self.substitutions += e.substitutions;
        self.insertions += e.insertions;
        self.deletions += e.deletions;
        self.reference_length += ref_len;
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn rate(&self) -> Result<f64> {
        if self.reference_length == 0 {
            return Err(Error::UndefinedMetric("total reference length is zero".into()));
        }
        Ok(self.errors() as f64 / self.reference_length as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub word: MetricCounts,
    pub char: MetricCounts,
    pub phone: MetricCounts,
}

/// Corpus-level error rates as ratios (1.0 = 100%). Values above 1 are
/// possible when hypotheses are much longer than references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub wer: f64,
    pub cer: f64,
    pub per: f64,
    pub counts: ReportCounts,
}

/// Scores hypotheses against references, pooling counts over the corpus.
///
/// Tokens act as words for WER and as phones for PER, so the two coincide
/// on this task. CER runs over the characters of the space-joined
/// rendering of each token sequence.
pub fn score(refs: &[Vec<usize>], hyps: &[Vec<usize>], vocab: &Vocab) -> Result<ErrorReport> {
    if refs.len() != hyps.len() {
        return Err(Error::Data(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut counts = ReportCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        let tokens = edit_distance(r, h);
        counts.word.add(tokens, r.len());
        counts.phone.add(tokens, r.len());

        let rc: Vec<char> = vocab.render(r)?.chars().collect();
        let hc: Vec<char> = vocab.render(h)?.chars().collect();
        counts.char.add(edit_distance(&rc, &hc), rc.len());
    }
    Ok(ErrorReport {
        wer: counts.word.rate()?,
        cer: counts.char.rate()?,
        per: counts.phone.rate()?,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_is_zero() {
        let e = edit_distance(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!(e, EditCounts::default());
    }

    #[test]
    fn hello_world() {
        let e = edit_distance(&words("hello world"), &words("hello word"));
        assert_eq!(e.distance, 1);
        assert_eq!(e.substitutions, 1);
        assert_eq!(e.distance as f64 / 2.0, 0.5);
    }

    #[test]
    fn empty_sides() {
        let e = edit_distance::<u8>(&[], &[1, 2]);
        assert_eq!((e.distance, e.insertions), (2, 2));
        let e = edit_distance::<u8>(&[1, 2, 3], &[]);
        assert_eq!((e.distance, e.deletions), (3, 3));
    }

    #[test]
    fn tie_break_prefers_substitution_then_deletion() {
        // "ab" -> "b": one deletion either way; diagonal path is not optimal.
        let e = edit_distance(&['a', 'b'], &['b']);
        assert_eq!((e.deletions, e.insertions, e.substitutions), (1, 0, 0));
        // "a" -> "b": substitution (1) beats deletion + insertion (2).
        let e = edit_distance(&['a'], &['b']);
        assert_eq!(e.substitutions, 1);
    }

    #[test]
    fn score_examples() {
        let vocab = Vocab::synthetic(6);
        let refs = vec![vec![1, 2, 3], vec![4]];
        let r = score(&refs, &refs, &vocab).unwrap();
        assert_eq!((r.wer, r.cer, r.per), (0.0, 0.0, 0.0));

        let r = score(&[vec![1, 2, 3, 4]], &[vec![]], &vocab).unwrap();
        assert_eq!(r.wer, 1.0);
        assert_eq!(r.cer, 1.0);
        assert_eq!(r.counts.word.deletions, 4);

        assert!(matches!(score(&[vec![]], &[vec![1]], &vocab), Err(Error::UndefinedMetric(_))));
        assert!(matches!(score(&[vec![1]], &[], &vocab), Err(Error::Data(_))));
    }

    #[test]
    fn pooling_is_over_totals() {
        let vocab = Vocab::synthetic(6);
        let refs = vec![vec![1, 2], vec![1, 2, 3, 4, 5]];
        let hyps = vec![vec![3], vec![1, 2, 3, 4, 5, 5, 5]];
        let r = score(&refs, &hyps, &vocab).unwrap();
        let e1 = edit_distance(&refs[0], &hyps[0]);
        let e2 = edit_distance(&refs[1], &hyps[1]);
        let pooled = (e1.distance + e2.distance) as f64 / 7.0;
        assert_eq!(r.wer, pooled);
        let mean_of_rates = (e1.distance as f64 / 2.0 + e2.distance as f64 / 5.0) / 2.0;
        assert_ne!(r.wer, mean_of_rates);
    }

    #[test]
    fn rates_are_not_clamped() {
        let vocab = Vocab::synthetic(6);
        let r = score(&[vec![1]], &[vec![2, 3, 4, 5]], &vocab).unwrap();
        assert_eq!(r.wer, 4.0);
    }
}
