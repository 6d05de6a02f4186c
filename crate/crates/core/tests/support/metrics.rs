//! Metric oracles: hand-counted BLEU/ROUGE, a second CIDEr-D and a
//! brute-force entity matcher.

use std::collections::BTreeMap;

use merge_core::emkb::EntityType;
use merge_core::ingest::fixtures::make_fixtures;
use merge_core::metrics::{bleu4, cider_d_items, entity_prf, rouge_l, Averaging, EvalCorpus, EvalItem};
use merge_core::ner::GazetteerTagger;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Check;

fn item(id: &str, cand: &str, refs: &[&str]) -> EvalItem {
    EvalItem {
        item_id: id.to_string(),
        candidate: cand.to_string(),
        references: refs.iter().map(|r| r.to_string()).collect(),
    }
}

pub fn hand_corpus() -> EvalCorpus {
    EvalCorpus::new(vec![
        item(
            "1",
            "a man rides a red bike down the street",
            &["a man rides a bike down the street", "a person on a red bicycle in the street"],
        ),
        item("2", "the mayor speaks at city hall", &["the mayor gives a speech at city hall"]),
        item(
            "3",
            "two dogs play in the park",
            &["two dogs are playing in a park", "dogs play together in the park"],
        ),
        item("4", "players celebrate after the final goal", &["the players celebrate the winning goal"]),
        item("5", "a crowd gathers outside the stadium", &["a large crowd gathers outside the stadium before the game"]),
    ])
    .unwrap()
}

/// BLEU-4 of [`hand_corpus`] from counts worked out by hand: clipped
/// matches 30/33, 19/28, 9/23, 4/18; candidate length 33, closest
/// reference lengths 8 + 8 + 6 + 6 + 11 = 39.
pub fn hand_bleu() -> f64 {
    let p: f64 = (30.0 / 33.0) * (19.0 / 28.0) * (9.0 / 23.0) * (4.0 / 18.0);
    (1.0f64 - 39.0 / 33.0).exp() * p.powf(0.25)
}

/// ROUGE-L of [`hand_corpus`]: per item the best `(lcs, |cand|, |ref|)`.
pub fn hand_rouge() -> f64 {
    let f = |lcs: f64, c: f64, r: f64| {
        let (p, rec, b2) = (lcs / c, lcs / r, 1.44);
        (1.0 + b2) * p * rec / (rec + b2 * p)
    };
    let items = [f(8.0, 9.0, 8.0), f(5.0, 6.0, 8.0), f(5.0, 6.0, 6.0), f(4.0, 6.0, 6.0), f(6.0, 6.0, 10.0)];
    items.iter().sum::<f64>() / 5.0
}

/// Second CIDEr-D, written from the definition with string n-gram keys.
pub fn cider_reference(corpus: &EvalCorpus) -> Vec<f64> {
    fn toks(s: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in s.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }
    fn grams(t: &[String]) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for n in 1..=4 {
            for i in 0..t.len().saturating_sub(n - 1) {
                *m.entry(format!("{n}|{}", t[i..i + n].join(" "))).or_insert(0.0) += 1.0;
            }
        }
        m
    }
    let n_docs = corpus.items.len() as f64;
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for it in &corpus.items {
        let mut seen = std::collections::BTreeSet::new();
        for r in &it.references {
            seen.extend(grams(&toks(r)).into_keys());
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let tfidf = |text: &str| -> (BTreeMap<String, f64>, [f64; 4], f64) {
        let t = toks(text);
        let mut v = grams(&t);
        let mut norms = [0.0; 4];
        for (g, x) in v.iter_mut() {
            let d: f64 = df.get(g).copied().unwrap_or(0.0);
            *x *= n_docs.ln() - d.max(1.0).ln();
            let n: usize = g[..1].parse().unwrap();
            norms[n - 1] += *x * *x;
        }
        (v, norms.map(f64::sqrt), t.len() as f64)
    };
    corpus
        .items
        .iter()
        .map(|it| {
            let (hv, hn, hl) = tfidf(&it.candidate);
            let mut sum = 0.0;
            for r in &it.references {
                let (rv, rn, rl) = tfidf(r);
                let mut per_n = [0.0; 4];
                for (g, h) in &hv {
                    if let Some(x) = rv.get(g) {
                        let n: usize = g[..1].parse().unwrap();
                        per_n[n - 1] += h.min(*x) * x;
                    }
                }
                let penalty = (-(hl - rl).powi(2) / 72.0).exp();
                for n in 0..4 {
                    if hn[n] > 0.0 && rn[n] > 0.0 {
                        per_n[n] /= hn[n] * rn[n];
                    }
                    sum += per_n[n] * penalty / 4.0;
                }
            }
            sum / it.references.len() as f64 * 10.0
        })
        .collect()
}

pub fn cider_corpus() -> EvalCorpus {
    let rows: [(&str, &[&str]); 10] = [
        ("a man rides a bike down the street", &["a man riding a bike on the street", "a cyclist on a city street"]),
        ("the mayor speaks at city hall", &["the mayor gives a speech at city hall"]),
        ("two dogs play in the park", &["two dogs playing in a park", "dogs play together in the park"]),
        ("players celebrate the goal", &["the players celebrate the winning goal"]),
        ("a crowd outside the stadium", &["a large crowd gathers outside the stadium", "fans wait outside"]),
        ("firefighters at the scene of a fire", &["firefighters battle a fire downtown"]),
        ("the president meets the prime minister", &["the president shakes hands with the prime minister"]),
        ("a boat on the river at sunset", &["boats on the river as the sun sets", "a boat sails at sunset"]),
        ("students in a classroom", &["students listen in a classroom", "a teacher with students"]),
        ("the market is busy", &["shoppers crowd the busy market"]),
    ];
    EvalCorpus::new(
        rows.iter()
            .enumerate()
            .map(|(i, (c, r))| item(&format!("{i}"), c, r))
            .collect(),
    )
    .unwrap()
}

const PEOPLE: &[&str] = &["Ada Lowe", "Ben Okafor", "Cara Ruiz", "Dev Patel", "Eli Stone"];
const PLACES: &[&str] = &["Boston", "Lagos", "Quito", "Oslo"];
const ORGS: &[&str] = &["Harbor Council", "River Union", "Maple Institute"];

fn planted_tagger() -> GazetteerTagger {
    let mut t = GazetteerTagger::new().gazetteer_only();
    for p in PEOPLE {
        t.add(p, EntityType::Person);
    }
    for p in PLACES {
        t.add(p, EntityType::Gpe);
    }
    for o in ORGS {
        t.add(o, EntityType::Org);
    }
    t
}

type Mention = (String, EntityType);

fn pick(rng: &mut ChaCha8Rng) -> Vec<Mention> {
    (0..rng.random_range(0..=4))
        .map(|_| match rng.random_range(0..3) {
            0 => (PEOPLE.choose(rng).unwrap().to_string(), EntityType::Person),
            1 => (PLACES.choose(rng).unwrap().to_string(), EntityType::Gpe),
            _ => (ORGS.choose(rng).unwrap().to_string(), EntityType::Org),
        })
        .collect()
}

fn render(mentions: &[Mention]) -> String {
    let mut s = String::from("photo of");
    for (m, _) in mentions {
        s.push_str(" and ");
        s.push_str(m);
    }
    s
}

/// Greedy one-to-one matching on equal (name, type); with equality edges
/// greedy is a maximum matching.
fn brute_counts(pred: &[Mention], gold: &[Mention], kind: Option<EntityType>) -> (usize, usize, usize) {
    let keep = |m: &&Mention| kind.is_none_or(|k| m.1 == k);
    let pred: Vec<&Mention> = pred.iter().filter(keep).collect();
    let gold: Vec<&Mention> = gold.iter().filter(keep).collect();
    let mut used = vec![false; gold.len()];
    let mut matched = 0;
    for p in &pred {
        for (j, g) in gold.iter().enumerate() {
            if !used[j] && p.0.to_lowercase() == g.0.to_lowercase() && p.1 == g.1 {
                used[j] = true;
                matched += 1;
                break;
            }
        }
    }
    (matched, pred.len(), gold.len())
}

pub fn check_metrics(seed: u64) -> Check {
    // Self-referenced fixture captions.
    let fx = make_fixtures(42, 50);
    let items: Vec<EvalItem> = fx
        .articles
        .iter()
        .map(|a| {
            let g = a.gold_caption.clone().unwrap();
            EvalItem {
                item_id: a.article_id.clone(),
                candidate: g.clone(),
                references: vec![g],
            }
        })
        .collect();
    let self_corpus = EvalCorpus::new(items).unwrap();
    let b = bleu4(&self_corpus).map_err(|e| e.to_string())?;
    if b != 1.0 {
        return Err(format!("self-referenced BLEU-4 is {b}, not 1"));
    }
    let tagger = GazetteerTagger::from_kb(&fx.kb);
    let f = entity_prf(&self_corpus, &tagger, Averaging::Micro).map_err(|e| e.to_string())?["ALL"];
    if f.f1 != 1.0 || f.predicted == 0 {
        return Err(format!("self-referenced entity F1 is {} over {} entities", f.f1, f.predicted));
    }

    // Hand-computed corpus.
    let hc = hand_corpus();
    let (b, r) = (bleu4(&hc).unwrap(), rouge_l(&hc).unwrap());
    if (b - hand_bleu()).abs() > 1e-6 || (r - hand_rouge()).abs() > 1e-6 {
        return Err(format!("hand corpus: BLEU {b} vs {}, ROUGE-L {r} vs {}", hand_bleu(), hand_rouge()));
    }

    // CIDEr-D against the second implementation.
    let cc = cider_corpus();
    let ours = cider_d_items(&cc).map_err(|e| e.to_string())?;
    let theirs = cider_reference(&cc);
    let worst = ours.iter().zip(&theirs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (ma, mb) = (ours.iter().sum::<f64>() / 10.0, theirs.iter().sum::<f64>() / 10.0);
    if worst > 1e-4 || (ma - mb).abs() > 1e-4 {
        return Err(format!("CIDEr-D differs from the reference by {worst}"));
    }

    // Planted entities against brute-force matching.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planted = Vec::new();
    let mut items = Vec::new();
    for i in 0..20 {
        let (p, g) = (pick(&mut rng), pick(&mut rng));
        items.push(EvalItem {
            item_id: format!("p{i}"),
            candidate: render(&p),
            references: vec![render(&g)],
        });
        planted.push((p, g));
    }
    let pc = EvalCorpus::new(items).unwrap();
    let scores = entity_prf(&pc, &planted_tagger(), Averaging::Micro).map_err(|e| e.to_string())?;
    for (name, kind) in [
        ("ALL", None),
        ("PERSON", Some(EntityType::Person)),
        ("GPE", Some(EntityType::Gpe)),
        ("ORG", Some(EntityType::Org)),
    ] {
        let (m, p, g) = planted
            .iter()
            .map(|(p, g)| brute_counts(p, g, kind))
            .fold((0, 0, 0), |a, x| (a.0 + x.0, a.1 + x.1, a.2 + x.2));
        let prec = if p == 0 { 0.0 } else { m as f64 / p as f64 };
        let rec = if g == 0 { 0.0 } else { m as f64 / g as f64 };
        let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        let s = scores[name];
        if (s.matched, s.predicted, s.reference) != (m, p, g) || s.precision != prec || s.recall != rec || s.f1 != f1 {
            return Err(format!("{name}: got {s:?}, brute force ({m}, {p}, {g}) P {prec} R {rec} F {f1}"));
        }
    }
    Ok(format!(
        "self-ref BLEU-4 1.0 and F1 1.0; hand BLEU {b:.6} ROUGE-L {r:.6}; CIDEr-D max diff {worst:.2e}; entity P/R/F1 match on 20 items"
    ))
}
