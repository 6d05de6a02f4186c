use std::collections::{HashMap, HashSet};

use super::{ngrams, tokenize, EvalCorpus, MetricsError};

const MAX_N: usize = 4;
/// Standard deviation of the Gaussian length penalty.
pub const CIDER_SIGMA: f64 = 6.0;

type Counts = [HashMap<Vec<String>, f64>; MAX_N];
/// N-gram counts and token length of one text.
type Cooked = (Counts, usize);

fn cook(text: &str) -> Cooked {
    let tokens = tokenize(text);
    let mut c: Counts = Default::default();
    for n in 1..=MAX_N {
        for g in ngrams(&tokens, n) {
            *c[n - 1].entry(g.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    (c, tokens.len())
}

struct Weighted {
    vec: Counts,
    norm: [f64; MAX_N],
    len: usize,
}

fn weigh(counts: Counts, len: usize, df: &HashMap<Vec<String>, f64>, log_n: f64) -> Weighted {
    let mut vec = counts;
    let mut norm = [0.0; MAX_N];
    for (level, nrm) in vec.iter_mut().zip(norm.iter_mut()) {
        for (g, tf) in level.iter_mut() {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
            *tf *= log_n - d.ln();
            *nrm += *tf * *tf;
        }
        *nrm = nrm.sqrt();
    }
    Weighted { vec, norm, len }
}

fn similarity(hyp: &Weighted, r: &Weighted) -> [f64; MAX_N] {
    let delta = hyp.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    std::array::from_fn(|n| {
        let mut v: f64 = hyp.vec[n]
            .iter()
            .filter_map(|(g, &h)| r.vec[n].get(g).map(|&rv| h.min(rv) * rv))
            .sum();
        if hyp.norm[n] != 0.0 && r.norm[n] != 0.0 {
            v /= hyp.norm[n] * r.norm[n];
        }
        v * penalty
    })
}

/// Per-item CIDEr-D scores (already multiplied by 10). Document
/// frequencies count, per n-gram, the items whose references contain it.
pub fn cider_d_items(corpus: &EvalCorpus) -> Result<Vec<f64>, MetricsError> {
    corpus.validate()?;
    if corpus.len() < 2 {
        return Err(MetricsError::TooFewItems {
            needed: 2,
            got: corpus.len(),
        });
    }
    let cooked: Vec<(Cooked, Vec<Cooked>)> = corpus
        .items
        .iter()
        .map(|it| (cook(&it.candidate), it.references.iter().map(|r| cook(r)).collect()))
        .collect();
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for (_, refs) in &cooked {
        let mut seen: HashSet<&Vec<String>> = HashSet::new();
        for (c, _) in refs {
            for level in c {
                seen.extend(level.keys());
            }
        }
        for g in seen {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    Ok(cooked
        .into_iter()
        .map(|((hc, hl), refs)| {
            let hyp = weigh(hc, hl, &df, log_n);
            let nrefs = refs.len() as f64;
            let mut total = [0.0; MAX_N];
            for (rc, rl) in refs {
                let r = weigh(rc, rl, &df, log_n);
                for (t, v) in total.iter_mut().zip(similarity(&hyp, &r)) {
                    *t += v;
                }
            }
            let mean = total.iter().sum::<f64>() / MAX_N as f64;
            mean / nrefs * 10.0
        })
        .collect())
}

/// Corpus CIDEr-D: mean of the per-item scores.
pub fn cider_d(corpus: &EvalCorpus) -> Result<f64, MetricsError> {
    let s = cider_d_items(corpus)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
