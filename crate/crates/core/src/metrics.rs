//! Corpus BLEU and the relative-improvement arithmetic of the transfer reports.
//!
//! BLEU here is the standard corpus-level BLEU-4: clipped n-gram counts are
//! summed over all lines before the precisions are formed, the four orders are
//! weighted uniformly and the brevity penalty uses total lengths. Input lines
//! are split on whitespace only.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{hyp} hypothesis lines but {reference} reference lines")]
    LengthMismatch { hyp: usize, reference: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("baseline BLEU must be positive, got {0}")]
    ZeroBaseline(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Smoothing {
    #[default]
    None,
    /// Adds one to the match and candidate counts of orders 2..=4.
    AddOne,
}

/// Sufficient statistics of BLEU; additive over lines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn from_pair(hyp: &str, reference: &str) -> Self {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let mut s = BleuStats {
            hyp_len: h.len() as u64,
            ref_len: r.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            if h.len() < n {
                break;
            }
            let mut ref_counts: HashMap<&[&str], u64> = HashMap::new();
            for g in r.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[&str], u64> = HashMap::new();
            for g in h.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            s.totals[n - 1] = (h.len() + 1 - n) as u64;
            s.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    fn merge(mut self, o: BleuStats) -> Self {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        self
    }

    pub fn score(&self, smoothing: Smoothing) -> BleuResult {
        let bp = brevity_penalty(self.hyp_len, self.ref_len);
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 0..MAX_ORDER {
            let (m, t) = match smoothing {
                Smoothing::AddOne if n > 0 => (self.matches[n] + 1, self.totals[n] + 1),
                _ => (self.matches[n], self.totals[n]),
            };
            if m == 0 || t == 0 {
                zero = true;
                break;
            }
            log_sum += (m as f64 / t as f64).ln() / MAX_ORDER as f64;
        }
        let score = if zero {
            0.0
        } else {
            100.0 * bp * log_sum.exp()
        };
        BleuResult {
            score,
            matches: self.matches,
            totals: self.totals,
            brevity_penalty: bp,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

/// `exp(1 - r/c)` for a candidate shorter than the reference, else 1.
/// An empty candidate gets 0.
pub fn brevity_penalty(hyp_len: u64, ref_len: u64) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuResult {
    /// BLEU in [0, 100].
    pub score: f64,
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuResult {
    /// Unsmoothed precision of order `n` (1-based); 0 when there are no candidates.
    pub fn precision(&self, n: usize) -> f64 {
        let (m, t) = (self.matches[n - 1], self.totals[n - 1]);
        if t == 0 {
            0.0
        } else {
            m as f64 / t as f64
        }
    }

    /// `BLEU=<x.x> P=<p1/p2/p3/p4> BP=<b.bbb> len=<hyp>/<ref>`, precisions in percent.
    pub fn summary_line(&self) -> String {
        let p: Vec<String> = (1..=MAX_ORDER)
            .map(|n| format!("{:.1}", round_half_up(100.0 * self.precision(n), 1)))
            .collect();
        format!(
            "BLEU={:.1} P={} BP={:.3} len={}/{}",
            round_half_up(self.score, 1),
            p.join("/"),
            round_half_up(self.brevity_penalty, 3),
            self.hyp_len,
            self.ref_len
        )
    }
}

pub fn corpus_bleu<H, R>(hypotheses: &[H], references: &[R]) -> Result<BleuResult, MetricsError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    corpus_bleu_with(hypotheses, references, Smoothing::None)
}

pub fn corpus_bleu_with<H, R>(
    hypotheses: &[H],
    references: &[R],
    smoothing: Smoothing,
) -> Result<BleuResult, MetricsError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    if hypotheses.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            hyp: hypotheses.len(),
            reference: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let stats = hypotheses
        .par_iter()
        .zip(references.par_iter())
        .map(|(h, r)| BleuStats::from_pair(h.as_ref(), r.as_ref()))
        .reduce(BleuStats::default, BleuStats::merge);
    Ok(stats.score(smoothing))
}

/// Add-one smoothed single-sentence BLEU, for per-line debugging output.
pub fn sentence_bleu(hyp: &str, reference: &str) -> BleuResult {
    BleuStats::from_pair(hyp, reference).score(Smoothing::AddOne)
}

/// Relative change of `attacked` over `clean`, in percent (unrounded).
pub fn percent_improvement(attacked: f64, clean: f64) -> Result<f64, MetricsError> {
    if clean.is_nan() || clean <= 0.0 {
        return Err(MetricsError::ZeroBaseline(clean));
    }
    Ok((attacked - clean) / clean * 100.0)
}

/// Rounds half toward +infinity at `decimals` places.
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    // tolerate representation error of values printed with `decimals + 1` places
    ((x * f) + 0.5 + 1e-9).floor() / f
}

/// Indices of every value equal to the maximum.
pub fn mark_best(values: &[f64]) -> Vec<usize> {
    let Some(max) = values.iter().copied().reduce(f64::max) else {
        return Vec::new();
    };
    values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == max)
        .map(|(i, _)| i)
        .collect()
}

/// One report entry: a BLEU score and its change over the clean-trained baseline.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReportCell {
    pub bleu: f64,
    pub delta_pct: Option<f64>,
}

impl ReportCell {
    pub fn with_baseline(bleu: f64, baseline: f64) -> Self {
        ReportCell {
            bleu,
            delta_pct: percent_improvement(bleu, baseline).ok(),
        }
    }
}

/// `↑27.1%` / `↓1.3%` / `±0.0%`.
pub fn format_delta(delta_pct: f64) -> String {
    let r = round_half_up(delta_pct, 1);
    if r > 0.0 {
        format!("↑{r:.1}%")
    } else if r < 0.0 {
        format!("↓{:.1}%", -r)
    } else {
        "±0.0%".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_100() {
        let x = ["a b c d e", "the cat sat on the mat"];
        let r = corpus_bleu(&x, &x).unwrap();
        assert!((r.score - 100.0).abs() < 1e-9);
        assert_eq!(r.brevity_penalty, 1.0);
        for n in 1..=4 {
            assert_eq!(r.precision(n), 1.0);
        }
    }

    #[test]
    fn hand_enumerated_example() {
        let r = corpus_bleu(&["the cat sat on the mat"], &["the cat is on the mat"]).unwrap();
        assert_eq!(r.matches, [5, 3, 1, 0]);
        assert_eq!(r.totals, [6, 5, 4, 3]);
        assert_eq!(r.score, 0.0);
        assert_eq!(
            r.summary_line(),
            "BLEU=0.0 P=83.3/60.0/25.0/0.0 BP=1.000 len=6/6"
        );
    }

    #[test]
    fn clipping_and_brevity() {
        // "the the the" against "the cat": unigram matches clipped to 1
        let s = BleuStats::from_pair("the the the", "the cat");
        assert_eq!(s.matches[0], 1);
        assert_eq!(s.totals[0], 3);
        let bp = brevity_penalty(4, 6);
        assert!((bp - (1.0f64 - 1.5).exp()).abs() < 1e-12);
        assert_eq!(brevity_penalty(6, 4), 1.0);
        assert_eq!(brevity_penalty(0, 4), 0.0);
    }

    #[test]
    fn short_corpus_scored_by_formula() {
        let h = ["a b c d e f"];
        let r = ["a b c d e f g h"];
        let res = corpus_bleu(&h, &r).unwrap();
        let bp = (1.0f64 - 8.0 / 6.0).exp();
        assert!((res.score - 100.0 * bp).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert_eq!(
            corpus_bleu(&["a"], &["a", "b"]),
            Err(MetricsError::LengthMismatch {
                hyp: 1,
                reference: 2
            })
        );
        let empty: [&str; 0] = [];
        assert_eq!(corpus_bleu(&empty, &empty), Err(MetricsError::EmptyCorpus));
        assert_eq!(
            percent_improvement(1.0, 0.0),
            Err(MetricsError::ZeroBaseline(0.0))
        );
    }

    #[test]
    fn percent_improvement_examples() {
        assert_eq!(
            round_half_up(percent_improvement(12.2, 9.6).unwrap(), 1),
            27.1
        );
        assert_eq!(
            round_half_up(percent_improvement(13.9, 11.3).unwrap(), 1),
            23.0
        );
        assert_eq!(percent_improvement(7.5, 7.5).unwrap(), 0.0);
        assert_eq!(
            format_delta(percent_improvement(12.2, 9.6).unwrap()),
            "↑27.1%"
        );
        assert_eq!(
            format_delta(percent_improvement(23.0, 23.3).unwrap()),
            "↓1.3%"
        );
        assert_eq!(format_delta(0.0), "±0.0%");
    }

    #[test]
    fn rounding_half_up() {
        assert_eq!(round_half_up(0.25, 1), 0.3);
        assert_eq!(round_half_up(2.45, 1), 2.5);
        assert_eq!(round_half_up(-1.25, 1), -1.2);
        assert_eq!(round_half_up(0.9994, 3), 0.999);
    }

    #[test]
    fn mark_best_examples() {
        assert_eq!(mark_best(&[28.0, 38.8, 30.5, 37.4]), vec![1]);
        assert_eq!(mark_best(&[1.0, 1.0, 1.0]), vec![0, 1, 2]);
        assert_eq!(mark_best(&[39.2, 39.2, 38.7, 38.9]), vec![0, 1]);
        assert!(mark_best(&[]).is_empty());
    }

    #[test]
    fn add_one_smoothing_keeps_partial_matches() {
        let r = sentence_bleu("the cat sat on the mat", "the cat is on the mat");
        // p = 5/6, 4/6, 2/5, 1/4
        let geo = ((5.0f64 / 6.0) * (4.0 / 6.0) * 0.4 * 0.25).powf(0.25) * 100.0;
        assert!((r.score - geo).abs() < 1e-9);
    }
}
