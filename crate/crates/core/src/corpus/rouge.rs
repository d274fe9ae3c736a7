// SPDX-License-Identifier: MIT OR Apache-2.0

//! N-gram and longest-common-subsequence overlap F1 scores.
//!
//! Tokens are lowercased whitespace-separated words; there is no stemming.

use std::collections::HashMap;

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 || cand == 0 || reference == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N F1 with clipped n-gram counts.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    let (cc, rc) = (ngrams(&c, n), ngrams(&r, n));
    let overlap = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
    f1(overlap, cc.values().sum(), rc.values().sum())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F1 over the longest common subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    f1(lcs_len(&c, &r), c.len(), r.len())
}

/// Mean of ROUGE-1, ROUGE-2 and ROUGE-L F1.
pub fn rouge_avg(candidate: &str, reference: &str) -> f64 {
    (rouge_n(candidate, reference, 1) + rouge_n(candidate, reference, 2) + rouge_l(candidate, reference)) / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_strings_score_one() {
        assert_eq!(rouge_avg("the cat sat", "The cat  sat"), 1.0);
    }

    #[test]
    fn disjoint_strings_score_zero() {
        assert_eq!(rouge_avg("a b c", "x y z"), 0.0);
        assert_eq!(rouge_avg("", "x y z"), 0.0);
    }

    #[test]
    fn repeated_ngrams_are_clipped() {
        // Candidate "the the the" against "the cat": one clipped unigram match.
        let expected = 2.0 * (1.0 / 3.0) * 0.5 / (1.0 / 3.0 + 0.5);
        assert!((rouge_n("the the the", "the cat", 1) - expected).abs() < 1e-12);
    }
}
