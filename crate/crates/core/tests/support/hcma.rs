//! Adversarial chat provider for the alignment stages.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use merge_core::gateways::mock::{tagged_section, MockGateway, MockScript};
use merge_core::gateways::{ChatGateway, ChatRequest, Completion, GatewayError, Gateways, RetryPolicy, StructuredSchema};
use merge_core::hcma::{CallError, Hcma, HcmaConfig, Stage};
use merge_core::prompts::PromptSet;
use merge_core::ImageRef;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fold, random_words, Check};

const MALFORMED: &[&str] = &[
    "",
    "{",
    "I think the caption is nice.",
    "{\"caption\": 42}",
    "[1, 2, 3]",
    "```json\n{\"oops\": true\n```",
    "null",
    "{\"sentences\": \"not a list\"}",
];

/// The summary stage accepts free text, so only empty or broken JSON
/// replies count as malformed there.
const MALFORMED_SUMMARY: &[&str] = &["", "   \n", "{", "{\"summary\": \"\"}", "{\"summary\": 7}", "{\"caption\": 42}"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Failure {
    Malformed,
    Transient,
}

/// Per-stage plan: the failures served before a valid reply.
#[derive(Clone, Debug)]
pub struct Plan {
    pub failures: Vec<Failure>,
}

pub struct Adversary {
    rng: Mutex<ChaCha8Rng>,
    plans: BTreeMap<u8, Plan>,
    pub calls: Mutex<BTreeMap<u8, usize>>,
    article_sentences: Vec<String>,
}

fn stage_of(schema: Option<StructuredSchema>) -> u8 {
    match schema {
        Some(StructuredSchema::Hypothesis) => 1,
        Some(StructuredSchema::SentenceSelection) => 2,
        Some(StructuredSchema::Summary) => 3,
        _ => 0,
    }
}

impl Adversary {
    fn valid(&self, rng: &mut ChaCha8Rng, stage: u8, prompt: &str) -> String {
        match stage {
            1 => {
                let n = rng.random_range(5..=80);
                let keys: Vec<String> = (0..rng.random_range(0..=25))
                    .map(|_| random_words(rng, 6).join(" "))
                    .collect();
                serde_json::json!({"caption": random_words(rng, n).join(" "), "key_sentences": keys}).to_string()
            }
            2 => {
                let mut picks: Vec<String> = Vec::new();
                for _ in 0..rng.random_range(0..=12) {
                    let s = match rng.random_range(0..5) {
                        0 => format!("{} fabricated.", random_words(rng, 7).join(" ")),
                        1 => self.article_sentences.choose(rng).unwrap().to_uppercase(),
                        2 => format!("\"{}\"", self.article_sentences.choose(rng).unwrap()),
                        3 => self.article_sentences.choose(rng).unwrap().replace(' ', "   "),
                        _ => self.article_sentences.choose(rng).unwrap().clone(),
                    };
                    picks.push(s);
                }
                let hyp = tagged_section(prompt, "hypothesis").unwrap_or_default().to_string();
                if rng.random_bool(0.5) {
                    serde_json::json!({"sentences": picks, "note": hyp}).to_string()
                } else {
                    serde_json::to_string(&picks).unwrap()
                }
            }
            _ => {
                // Stays within the requested output cap but may exceed the
                // summary word limit.
                let n = rng.random_range(1..=250);
                random_words(rng, n).join(" ")
            }
        }
    }
}

impl ChatGateway for Adversary {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let stage = stage_of(request.response_schema);
        let call = {
            let mut calls = self.calls.lock().unwrap();
            let c = calls.entry(stage).or_insert(0);
            *c += 1;
            *c - 1
        };
        let mut rng = self.rng.lock().unwrap();
        let plan = self.plans.get(&stage).cloned().unwrap_or(Plan { failures: vec![] });
        let text = match plan.failures.get(call) {
            Some(Failure::Transient) => {
                return Err(if rng.random_bool(0.5) {
                    GatewayError::Transport("connection reset".into())
                } else {
                    GatewayError::Provider {
                        status: 503,
                        message: "overloaded".into(),
                    }
                })
            }
            Some(Failure::Malformed) => {
                let pool = if stage == 3 { MALFORMED_SUMMARY } else { MALFORMED };
                pool.choose(&mut *rng).unwrap().to_string()
            }
            None => self.valid(&mut rng, stage, &request.prompt_text()),
        };
        Ok(Completion::new(request, text, None))
    }
}

fn article(rng: &mut ChaCha8Rng) -> (String, Vec<String>) {
    let sentences: Vec<String> = (0..rng.random_range(1..=12))
        .map(|i| {
            let n = rng.random_range(4..=14);
            let mut w = random_words(rng, n);
            w[0] = format!("Item{i}");
            format!("{}.", w.join(" "))
        })
        .collect();
    (sentences.join(" "), sentences)
}

/// Sentence provenance check, independent of the library helpers.
fn in_article(sentence: &str, article: &str) -> bool {
    let strip = |s: &str| {
        fold(s)
            .trim_matches(|c: char| c.is_ascii_punctuation() || c == '“' || c == '”')
            .to_string()
    };
    let s = strip(sentence);
    !s.is_empty() && fold(article).contains(&s)
}

pub fn check_constraints(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let retry_limit = 3u32;
    let (mut completed, mut failed) = (0usize, 0usize);
    for k in 0..cases {
        let (text, sentences) = article(&mut rng);
        let mut plans = BTreeMap::new();
        for stage in 1..=3u8 {
            let n = [0, 0, 1, 2, 3, 4, 5][rng.random_range(0..7)];
            let failures = (0..n)
                .map(|_| if rng.random_bool(0.7) { Failure::Malformed } else { Failure::Transient })
                .collect();
            plans.insert(stage, Plan { failures });
        }
        let adversary = Arc::new(Adversary {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed ^ k as u64)),
            plans: plans.clone(),
            calls: Mutex::new(BTreeMap::new()),
            article_sentences: sentences,
        });
        let sleeps = Arc::new(Mutex::new(Vec::new()));
        let recorded = sleeps.clone();
        let policy =
            RetryPolicy::new(retry_limit, Duration::from_millis(250)).with_sleeper(move |d| recorded.lock().unwrap().push(d));
        let mock = Arc::new(MockGateway::new(MockScript::default(), 8));
        let gateways = Gateways {
            chat: adversary.clone(),
            images: mock.clone(),
            faces: mock,
            image_dim: 8,
            face_dim: 8,
        };
        let config = HcmaConfig {
            retry: policy,
            ..HcmaConfig::default()
        };
        let prompts = PromptSet::default();
        let hcma = Hcma {
            gateways: &gateways,
            prompts: &prompts,
            config: &config,
        };
        let image = ImageRef::new("mem://photo");
        let result = hcma.run(&image, &text);
        let calls = adversary.calls.lock().unwrap().clone();
        for (stage, n) in &calls {
            if *n > 1 + retry_limit as usize {
                return Err(format!("case {k}: stage {stage} made {n} calls"));
            }
        }
        let fails = |s: u8| plans[&s].failures.len() > retry_limit as usize;
        let expected_stage = if fails(1) {
            Some(Stage::Hypothesis)
        } else if fails(2) {
            Some(Stage::Selection)
        } else if fails(3) {
            Some(Stage::Summary)
        } else {
            None
        };
        match (result, expected_stage) {
            (Ok(ctx), None) => {
                completed += 1;
                let words = ctx.hypothesis.text.split_whitespace().count();
                if words > 30 || ctx.hypothesis.key_sentences.len() > 10 {
                    return Err(format!("case {k}: hypothesis has {words} words"));
                }
                if ctx.relevant.sentences.len() > 5 {
                    return Err(format!("case {k}: {} sentences selected", ctx.relevant.sentences.len()));
                }
                if let Some(bad) = ctx.relevant.sentences.iter().find(|s| !in_article(s, &text)) {
                    return Err(format!("case {k}: selected sentence not in article: {bad:?}"));
                }
                if ctx.summary.text.split_whitespace().count() > 100 {
                    return Err(format!("case {k}: summary too long"));
                }
            }
            (Err(e), Some(stage)) => {
                failed += 1;
                if e.stage != stage {
                    return Err(format!("case {k}: failed at {} but expected {stage}", e.stage));
                }
                if !e.to_string().starts_with(&format!("hcma/{stage}")) {
                    return Err(format!("case {k}: unlabeled error {e}"));
                }
                let last = plans[&(stage as u8)].failures[retry_limit as usize];
                let kind_ok = match (last, &e.source) {
                    (Failure::Malformed, CallError::Malformed { .. }) => true,
                    (Failure::Transient, CallError::Gateway(g)) => g.is_retryable(),
                    _ => false,
                };
                if !kind_ok {
                    return Err(format!("case {k}: {last:?} on the final call surfaced as {e}"));
                }
                if let CallError::Malformed { raw_outputs, .. } = &e.source {
                    if raw_outputs.iter().any(|r| r.len() >= 12 && e.to_string().contains(r.as_str())) {
                        return Err(format!("case {k}: raw model output leaked into the error message"));
                    }
                }
            }
            (Ok(_), Some(stage)) => return Err(format!("case {k}: expected {stage} to fail")),
            (Err(e), None) => return Err(format!("case {k}: unexpected failure {e}")),
        }
        // Backoff delays follow base * 2^k within each stage.
        for d in sleeps.lock().unwrap().iter() {
            let ms = d.as_millis();
            if ![250, 500, 1000].contains(&ms) {
                return Err(format!("case {k}: unexpected backoff {ms} ms"));
            }
        }
    }
    Ok(format!(
        "{cases} adversarial runs: {completed} completed within limits, {failed} failed at the expected stage, calls <= 1 + {retry_limit}"
    ))
}
