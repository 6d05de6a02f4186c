use std::collections::HashMap;

use super::{ngrams, tokenize, EvalCorpus, MetricsError};

const MAX_N: usize = 4;

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Corpus-level BLEU with uniform weights over 1- to 4-grams and the
/// brevity penalty. Counts are clipped by the maximum count in any single
/// reference; the effective reference length per item is the reference
/// length closest to the candidate's (the shorter one on ties). No
/// smoothing: a zero n-gram precision gives 0.
pub fn bleu4(corpus: &EvalCorpus) -> Result<f64, MetricsError> {
    corpus.validate()?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for item in &corpus.items {
        let cand = tokenize(&item.candidate);
        let refs: Vec<Vec<String>> = item.references.iter().map(|r| tokenize(r)).collect();
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=MAX_N {
            let c = counts(&cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &refs {
                for (g, k) in counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &c {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok((bp * log_p.exp()).clamp(0.0, 1.0))
}
