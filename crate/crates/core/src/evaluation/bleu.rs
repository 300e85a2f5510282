//! Character-level BLEU-4.

use std::collections::HashMap;

const MAX_ORDER: usize = 4;

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    for gram in chars.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// BLEU over character n-grams of orders 1 to 4 with clipped counts, a
/// uniform geometric mean and the usual brevity penalty.
///
/// An order at which neither string has any n-gram (both shorter than n) is
/// left out of the mean, so identical short strings still score 1. An empty
/// hypothesis scores 0.
pub fn char_bleu4(hypothesis: &str, reference: &str) -> f64 {
    let hyp: Vec<char> = hypothesis.chars().collect();
    let refr: Vec<char> = reference.chars().collect();
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=MAX_ORDER {
        let total = hyp.len().saturating_sub(n - 1);
        if total == 0 && refr.len() < n {
            continue;
        }
        if total == 0 {
            return 0.0;
        }
        let ref_counts = ngram_counts(&refr, n);
        let matched: usize = ngram_counts(&hyp, n)
            .into_iter()
            .map(|(g, c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
        orders += 1;
    }
    let precision = (log_sum / orders as f64).exp();
    let (c, r) = (hyp.len() as f64, refr.len() as f64);
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    brevity * precision
}
