//! Independent oracles and randomized suites shared by the integration
//! tests and the acceptance runner. Each `check_*` returns a one-line
//! summary on success and the first counterexample on failure.
#![allow(dead_code)]

pub mod budget;
pub mod degradation;
pub mod graph;
pub mod hcma;
pub mod metrics;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn fold(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

pub fn cosine64(a: &[f32], b: &[f32]) -> Option<f64> {
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    Some(d / (na * nb))
}

pub fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

/// `base` plus uniform noise of the given scale.
pub fn perturb(rng: &mut ChaCha8Rng, base: &[f32], scale: f32) -> Vec<f32> {
    loop {
        let v: Vec<f32> = base.iter().map(|x| x + scale * rng.random_range(-1.0f32..1.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

const WORDS: &[&str] = &[
    "river", "council", "market", "season", "bridge", "harbor", "garden", "station", "museum", "festival", "budget",
    "election", "storm", "school", "hospital", "league", "court", "village", "factory", "highway", "library",
    "orchestra", "border", "treaty", "airport", "stadium", "forest", "island", "parade", "summit",
];

pub fn random_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect()
}
