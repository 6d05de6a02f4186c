//! Oversized prompt suite for the context budget.

use merge_core::graph::KnowledgeGraph;
use merge_core::hcma::{AlignmentContext, GlobalSummary, HypothesisCaption, RelevantSentences};
use merge_core::pipeline::{enforce_budget, CaptionInputs, Kept};
use merge_core::prompts::PromptSet;
use merge_core::rmki::{EntityMatch, MatchPath};
use merge_core::ImageRef;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_words, Check};

pub const N_CTX: usize = 1024;
pub const MAX_TRIPLES: usize = 64;

pub fn inputs(n_triples: usize, summary_words: usize, sentences: usize, sentence_words: usize, rng: &mut ChaCha8Rng) -> CaptionInputs {
    let mut graph = KnowledgeGraph::new();
    for i in 0..n_triples {
        let rel = random_words(rng, 2).join(" ");
        graph.link(&format!("Node{i} Left"), &format!("Node{i} Right"), &rel).unwrap();
    }
    let entities = (0..rng.random_range(0..=6))
        .map(|i| EntityMatch {
            entity_id: format!("e{i}"),
            canonical_name: format!("Person {i}"),
            similarity: 0.9 - i as f64 * 0.01,
            path: MatchPath::Face,
        })
        .collect();
    CaptionInputs {
        image: ImageRef::new("mem://img"),
        alignment: AlignmentContext {
            hypothesis: HypothesisCaption {
                text: random_words(rng, 30).join(" "),
                key_sentences: vec![],
            },
            relevant: RelevantSentences {
                sentences: (0..sentences)
                    .map(|_| format!("{}.", random_words(rng, sentence_words).join(" ")))
                    .collect(),
            },
            summary: GlobalSummary {
                text: random_words(rng, summary_words).join(" "),
            },
        },
        entities,
        graph,
    }
}

fn full(inputs: &CaptionInputs) -> Kept {
    Kept {
        graph_triples: inputs.graph.edge_count().min(MAX_TRIPLES),
        summary_words: inputs.alignment.summary.text.split_whitespace().count(),
        sentences: inputs.alignment.relevant.sentences.len(),
    }
}

/// Trimming order: graph first, then summary, then sentences.
fn order_ok(kept: Kept, full: Kept) -> bool {
    (kept.sentences == full.sentences || (kept.summary_words == 0 && kept.graph_triples == 0))
        && (kept.summary_words == full.summary_words || kept.graph_triples == 0)
}

/// `cases` inputs that are guaranteed to exceed the budget.
pub fn check_budget(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts = PromptSet::default();
    let mut max_seen = 0;
    for k in 0..cases {
        // At least 64 triples * 6 words + 100-word summary + 5 sentences of
        // 120+ words, well past 1,024 words before trimming.
        let n_triples = rng.random_range(64..=400);
        let summary = rng.random_range(100..=400);
        let sentence_words = rng.random_range(120..=200);
        let inp = inputs(n_triples, summary, 5, sentence_words, &mut rng);
        let out = enforce_budget(&inp, &prompts, N_CTX, MAX_TRIPLES).map_err(|e| format!("case {k}: {e}"))?;
        let words = out.text().split_whitespace().count();
        if words > N_CTX || out.estimated_tokens > N_CTX {
            return Err(format!("case {k}: {words} words / {} estimated tokens", out.estimated_tokens));
        }
        if !order_ok(out.kept, full(&inp)) {
            return Err(format!("case {k}: trimming order violated: {:?}", out.kept));
        }
        max_seen = max_seen.max(words);
    }
    let targeted = check_targeted()?;
    Ok(format!("{cases}/{cases} oversized prompts <= {N_CTX} tokens (max {max_seen}); {targeted}"))
}

/// Hand-sized cases where exactly one trimming stage must act.
pub fn check_targeted() -> Result<String, String> {
    let prompts = PromptSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Large graph, small rest: only graph lines go.
    let a = inputs(200, 40, 3, 20, &mut rng);
    let out = enforce_budget(&a, &prompts, 300, MAX_TRIPLES).map_err(|e| e.to_string())?;
    let f = full(&a);
    if !(out.kept.graph_triples < f.graph_triples
        && out.kept.graph_triples > 0
        && out.kept.summary_words == f.summary_words
        && out.kept.sentences == f.sentences)
    {
        return Err(format!("graph-only case trimmed {:?} of {f:?}", out.kept));
    }
    // No graph, long summary: the summary is cut, sentences stay.
    let b = inputs(0, 400, 3, 20, &mut rng);
    let out = enforce_budget(&b, &prompts, 400, MAX_TRIPLES).map_err(|e| e.to_string())?;
    let f = full(&b);
    if !(out.kept.summary_words < f.summary_words && out.kept.summary_words > 0 && out.kept.sentences == f.sentences) {
        return Err(format!("summary case trimmed {:?} of {f:?}", out.kept));
    }
    // Graph and summary present but sentences alone overflow: all graph
    // and summary go before the first sentence is dropped.
    let c = inputs(10, 50, 5, 150, &mut rng);
    let out = enforce_budget(&c, &prompts, 500, MAX_TRIPLES).map_err(|e| e.to_string())?;
    if !(out.kept.graph_triples == 0 && out.kept.summary_words == 0 && out.kept.sentences < 5 && out.kept.sentences > 0) {
        return Err(format!("sentence case trimmed {:?}", out.kept));
    }
    // Untouched when it fits.
    let d = inputs(3, 10, 2, 10, &mut rng);
    let out = enforce_budget(&d, &prompts, N_CTX, MAX_TRIPLES).map_err(|e| e.to_string())?;
    if out.kept != full(&d) {
        return Err(format!("fitting prompt was trimmed: {:?}", out.kept));
    }
    Ok("targeted graph/summary/sentence/no-op cases trim in order".into())
}
