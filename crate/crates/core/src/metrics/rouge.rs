use super::{tokenize, EvalCorpus, MetricsError};

/// Recall weight in the F-measure, as in the common captioning toolkits.
pub const ROUGE_BETA: f64 = 1.2;

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure for one candidate: the best score over references.
pub fn rouge_l_item(candidate: &str, references: &[String]) -> f64 {
    let cand = tokenize(candidate);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let r = tokenize(r);
            let lcs = lcs_len(&cand, &r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / cand.len() as f64;
            let rec = lcs / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean per-item ROUGE-L.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64, MetricsError> {
    corpus.validate()?;
    let sum: f64 = corpus
        .items
        .iter()
        .map(|it| rouge_l_item(&it.candidate, &it.references))
        .sum();
    Ok(sum / corpus.len() as f64)
}
