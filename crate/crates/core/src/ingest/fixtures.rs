//! Deterministic synthetic corpus, knowledge base and mock script.
//!
//! Every article gets an image whose retrieval outcome is known in advance:
//!
//! - `i % 4 == 0 | 1`: a face of a person stored in the knowledge base
//!   (every 8th article adds a second stored person, and `i % 8 == 0` adds a
//!   low-confidence distractor face that resembles yet another person);
//! - `i % 4 == 2`: the face of a person not in the knowledge base;
//! - `i % 4 == 3`: no faces; the image resembles a stored place or
//!   organization image, except when `i % 8 == 7`, where it resembles
//!   nothing.
//!
//! Planted vectors are built so that stored vectors of one modality are
//! mutually far apart (orthogonal while the dimension allows, otherwise
//! below a small cosine), and queries sit at a fixed cosine from their
//! target. The top-1 neighbour of every query is therefore its target, and
//! unrelated queries stay below the default similarity floors.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_record, ArticleRecord, Split};
use crate::emkb::{EntityRecord, EntityType, ImageAsset, ImageSource, KnowledgeBase, StoreConfig};
use crate::gateways::mock::MockScript;
use crate::gateways::{FaceDetection, ImageRef};
use crate::graph::KnowledgeGraph;
use crate::rmki::MatchPath;
use crate::vector::EmbeddingVector;

/// Cosine between a query and the stored vector it was planted from.
pub const QUERY_COSINE: f64 = 0.95;
/// Cosine between the planted near-duplicate image and its original.
pub const DUPLICATE_COSINE: f64 = 0.99;
/// Upper bound on cosine between unrelated planted vectors.
pub const SEPARATION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTruth {
    pub article_id: String,
    /// Retrieval branch the image should take; `None` when nothing matches.
    pub path: Option<MatchPath>,
    /// Entity ids the image should match, sorted.
    pub expected_entities: Vec<String>,
    /// Names mentioned in the article.
    pub mentioned: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub articles: Vec<ArticleRecord>,
    pub kb: KnowledgeBase,
    pub script: MockScript,
    pub truth: Vec<FixtureTruth>,
    /// Asset id of the planted near-duplicate image.
    pub duplicate_asset: String,
}

struct Planter {
    dim: usize,
    basis: Vec<Vec<f64>>,
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

impl Planter {
    fn new(dim: usize) -> Self {
        Self { dim, basis: Vec::new() }
    }

    /// A unit vector far from every vector handed out before.
    fn fresh(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let v = loop {
            let mut v = gaussian(rng, self.dim);
            if self.basis.len() < self.dim {
                for b in &self.basis {
                    let d = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            if self.basis.iter().all(|b| dot(&v, b) < SEPARATION) {
                break v;
            }
        };
        self.basis.push(v.clone());
        v
    }

    /// A unit vector at cosine `c` from `target`.
    fn near(&self, rng: &mut ChaCha8Rng, target: &[f64], c: f64) -> Vec<f64> {
        loop {
            let mut w = gaussian(rng, self.dim);
            let d = dot(&w, target);
            w.iter_mut().zip(target).for_each(|(x, y)| *x -= d * y);
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            let s = (1.0 - c * c).sqrt();
            let mut out: Vec<f64> = target.iter().zip(&w).map(|(t, x)| c * t + s * x / n).collect();
            unit(&mut out);
            return out;
        }
    }
}

fn emb(v: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(v.iter().map(|&x| x as f32).collect()).expect("finite planted vector")
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "ren", "vi", "dar", "mel", "sor", "tan", "bel", "qui", "zan", "ro", "fen", "lis", "mor", "ath",
    "gal", "nor", "pe", "sul", "tev", "ur", "wen", "yal",
];
const ORG_HEADS: &[&str] = &["Council", "Group", "Institute", "Union", "Agency", "Foundation"];
const PLACE_ENDS: &[&str] = &["holm", "port", "ford", "mere", "stad", "wick"];

fn cap(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let w: String = (0..syllables).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
    cap(&w)
}

struct Names {
    used: std::collections::HashSet<String>,
}

impl Names {
    fn unique(&mut self, rng: &mut ChaCha8Rng, make: impl Fn(&mut ChaCha8Rng) -> String) -> String {
        loop {
            let n = make(rng);
            if self.used.insert(n.to_lowercase()) {
                return n;
            }
        }
    }
}

struct Entity {
    id: String,
    name: String,
    kind: EntityType,
    in_kb: bool,
    face: Option<Vec<f64>>,
    images: Vec<Vec<f64>>,
}

pub fn make_fixtures(seed: u64, n: usize) -> FixtureSet {
    let n = n.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_people = (n / 2 + 3).max(4);
    let n_places = (n / 5 + 2).max(2);
    let n_orgs = (n / 5 + 2).max(2);
    // Vectors handed out per modality, with headroom for queries.
    let face_needed = n_people + n / 4 + 8;
    let image_needed = n_people + 2 * (n_places + n_orgs) + n / 8 + 8;
    let dim_for = |k: usize| (k.div_ceil(32) * 32).clamp(64, 512);
    let (face_dim, image_dim) = (dim_for(face_needed), dim_for(image_needed));
    let mut faces = Planter::new(face_dim);
    let mut images = Planter::new(image_dim);
    let mut names = Names {
        used: Default::default(),
    };

    let mut entities: Vec<Entity> = Vec::new();
    for i in 0..n_people {
        let name = names.unique(&mut rng, |r| {
            let a = r.random_range(2..=3);
            let b = r.random_range(2..=3);
            format!("{} {}", word(r, a), word(r, b))
        });
        // Every third person is left out of the knowledge base.
        let in_kb = i % 3 != 2;
        let face = faces.fresh(&mut rng);
        let imgs = if in_kb { vec![images.fresh(&mut rng)] } else { vec![] };
        entities.push(Entity {
            id: format!("per-{i:04}"),
            name,
            kind: EntityType::Person,
            in_kb,
            face: Some(face),
            images: imgs,
        });
    }
    for i in 0..n_places {
        let name = names.unique(&mut rng, |r| {
            let end = *PLACE_ENDS.choose(r).expect("non-empty");
            word(r, 2) + end
        });
        let imgs = vec![images.fresh(&mut rng), images.fresh(&mut rng)];
        entities.push(Entity {
            id: format!("gpe-{i:04}"),
            name,
            kind: EntityType::Gpe,
            in_kb: true,
            face: None,
            images: imgs,
        });
    }
    for i in 0..n_orgs {
        let name = names.unique(&mut rng, |r| {
            let head = *ORG_HEADS.choose(r).expect("non-empty");
            format!("{} {head}", word(r, 2))
        });
        let imgs = vec![images.fresh(&mut rng), images.fresh(&mut rng)];
        entities.push(Entity {
            id: format!("org-{i:04}"),
            name,
            kind: EntityType::Org,
            in_kb: true,
            face: None,
            images: imgs,
        });
    }

    let people: Vec<usize> = (0..n_people).collect();
    let kb_people: Vec<usize> = people.iter().copied().filter(|&i| entities[i].in_kb).collect();
    let absent_people: Vec<usize> = people.iter().copied().filter(|&i| !entities[i].in_kb).collect();
    let places: Vec<usize> = (n_people..n_people + n_places).collect();
    let orgs: Vec<usize> = (n_people + n_places..entities.len()).collect();

    // One near-duplicate image on the first place.
    let dup_source = entities[places[0]].images[0].clone();
    let duplicate = images.near(&mut rng, &dup_source, DUPLICATE_COSINE);
    let duplicate_asset = format!("{}-img-dup", entities[places[0]].id);

    let mut kb = KnowledgeBase::new(StoreConfig::new(face_dim, image_dim)).expect("valid fixture config");
    let orgs_and_places: Vec<usize> = places.iter().chain(&orgs).copied().collect();
    for (k, e) in entities.iter().enumerate() {
        if !e.in_kb {
            continue;
        }
        let mut assets: Vec<ImageAsset> = e
            .images
            .iter()
            .enumerate()
            .map(|(j, v)| ImageAsset {
                asset_id: format!("{}-img-{j}", e.id),
                source: if j == 0 { ImageSource::Wikipedia } else { ImageSource::WebSearch },
                image_embedding: emb(v),
                face_embeddings: e.face.iter().map(|f| emb(f)).collect(),
                uri: format!("fixture://kb/{}/{j}", e.id),
            })
            .collect();
        if k == places[0] {
            assets.push(ImageAsset {
                asset_id: duplicate_asset.clone(),
                source: ImageSource::WebSearch,
                image_embedding: emb(&duplicate),
                face_embeddings: vec![],
                uri: format!("fixture://kb/{}/dup", e.id),
            });
        }
        // Every other entity gets a small subgraph linking it to a place or
        // organization.
        let mut subgraph = KnowledgeGraph::new();
        if k % 2 == 0 {
            let other = &entities[orgs_and_places[k % orgs_and_places.len()]];
            if other.name != e.name {
                let rel = match e.kind {
                    EntityType::Person => "member of",
                    _ => "partners with",
                };
                subgraph.link(&e.name, &other.name, rel).expect("valid labels");
            }
            subgraph
                .link(&e.name, &format!("{} archive", e.name), "documented in")
                .expect("valid labels");
        }
        let background = match e.kind {
            EntityType::Person => format!("{} is a public figure who appears in regional news coverage.", e.name),
            EntityType::Gpe => format!("{} is a town that hosts regional events.", e.name),
            _ => format!("The {} is an organization active in civic affairs.", e.name),
        };
        kb.upsert(EntityRecord {
            entity_id: e.id.clone(),
            canonical_name: e.name.clone(),
            entity_type: e.kind,
            images: assets,
            background_text: background,
            subgraph,
        })
        .expect("fixture records are valid");
    }

    let mut script = MockScript::default();
    let mut articles = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let article_id = format!("art-{i:05}");
        let image_ref = format!("fixture://{article_id}.jpg");
        let place = &entities[places[i % places.len()]];
        let org = &entities[orgs[(i / 2) % orgs.len()]];
        let mut mentioned = Vec::new();
        let mut detections = Vec::new();
        let (path, mut expected, lead): (Option<MatchPath>, Vec<String>, String) = match i % 4 {
            0 | 1 => {
                let p = &entities[kb_people[i % kb_people.len()]];
                let mut exp = vec![p.id.clone()];
                let mut lead = p.name.clone();
                detections.push(face_det(&mut rng, &faces, p, 0.97));
                if i % 8 == 1 && kb_people.len() > 1 {
                    let q = &entities[kb_people[(i + 1) % kb_people.len()]];
                    detections.push(face_det(&mut rng, &faces, q, 0.9));
                    exp.push(q.id.clone());
                    lead = format!("{} and {}", p.name, q.name);
                    mentioned.push(q.name.clone());
                }
                if i % 8 == 0 && kb_people.len() > 2 {
                    let d = &entities[kb_people[(i + 2) % kb_people.len()]];
                    detections.push(face_det(&mut rng, &faces, d, 0.5));
                }
                mentioned.insert(0, p.name.clone());
                (Some(MatchPath::Face), exp, lead)
            }
            2 => {
                let p = &entities[absent_people[i % absent_people.len()]];
                detections.push(face_det(&mut rng, &faces, p, 0.95));
                mentioned.push(p.name.clone());
                (None, vec![], p.name.clone())
            }
            _ => {
                if i % 8 == 7 {
                    script.images.insert(image_ref.clone(), emb(&images.fresh(&mut rng)));
                    (None, vec![], format!("Residents of {}", place.name))
                } else {
                    let target = if (i / 4) % 2 == 0 { place } else { org };
                    let q = images.near(&mut rng, &target.images[0], QUERY_COSINE);
                    script.images.insert(image_ref.clone(), emb(&q));
                    let lead = if target.kind == EntityType::Gpe {
                        format!("Residents of {}", target.name)
                    } else {
                        format!("Members of the {}", target.name)
                    };
                    (Some(MatchPath::Clip), vec![target.id.clone()], lead)
                }
            }
        };
        expected.sort();
        if !mentioned.contains(&place.name) {
            mentioned.push(place.name.clone());
        }
        if !mentioned.contains(&org.name) {
            mentioned.push(org.name.clone());
        }
        if !detections.is_empty() {
            script.faces.insert(image_ref.clone(), detections);
        }
        let (body, gold) = article_text(&mut rng, &lead, &place.name, &org.name);
        articles.push(ArticleRecord {
            article_id: article_id.clone(),
            image_ref: ImageRef::new(image_ref),
            headline: Some(format!("{lead} in {}", place.name)),
            body,
            gold_caption: Some(gold),
            split: Split::Test,
        });
        truth.push(FixtureTruth {
            article_id,
            path,
            expected_entities: expected,
            mentioned,
        });
    }
    FixtureSet {
        articles,
        kb,
        script,
        truth,
        duplicate_asset,
    }
}

fn face_det(rng: &mut ChaCha8Rng, planter: &Planter, who: &Entity, confidence: f64) -> FaceDetection {
    let base = who.face.as_ref().expect("people have faces");
    let q = planter.near(rng, base, QUERY_COSINE);
    let x = rng.random_range(0..400) as f64;
    let y = rng.random_range(0..300) as f64;
    FaceDetection {
        bbox: [x, y, 80.0, 96.0],
        confidence,
        embedding: emb(&q),
    }
}

fn article_text(rng: &mut ChaCha8Rng, lead: &str, place: &str, org: &str) -> (String, String) {
    let days = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday"];
    let day = *days.choose(rng).expect("non-empty");
    let opening = [
        format!("{lead} arrived in {place} on {day} for talks with the {org}."),
        format!("{lead} spoke at a gathering in {place} on {day} organized by the {org}."),
        format!("{lead} visited {place} on {day} at the invitation of the {org}."),
    ];
    let middle = [
        "Officials said the visit had been planned for several months.".to_string(),
        format!("The {org} said it would publish a summary of the discussions."),
        format!("Crowds gathered outside the hall in {place} as the meeting began."),
        "Several local groups had asked for the meeting to be held in public.".to_string(),
        format!("Reporters were allowed into the first part of the session in {place}."),
        "Weather delayed the start of the event by nearly an hour.".to_string(),
    ];
    let closing = [
        format!("Later, {lead} met local leaders before leaving {place}."),
        format!("A spokesperson for the {org} described the talks as productive."),
    ];
    let mut sentences = vec![opening.choose(rng).expect("non-empty").clone()];
    let k = rng.random_range(2..=4);
    let mut picks: Vec<&String> = middle.choose_multiple(rng, k).collect();
    picks.sort();
    sentences.extend(picks.into_iter().cloned());
    sentences.push(closing.choose(rng).expect("non-empty").clone());
    let gold = [
        format!("{lead} speaks with members of the {org} in {place}."),
        format!("{lead} during a visit to {place}."),
    ]
    .choose(rng)
    .expect("non-empty")
    .clone();
    (sentences.join(" "), gold)
}

impl FixtureSet {
    /// Writes `corpus.jsonl`, `kb/`, `mock_script.json` and `truth.json`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut corpus = std::io::BufWriter::new(std::fs::File::create(dir.join("corpus.jsonl"))?);
        for a in &self.articles {
            write_record(&mut corpus, a)?;
        }
        corpus.flush()?;
        self.kb
            .save(dir.join("kb"))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let script = serde_json::to_string_pretty(&self.script).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("mock_script.json"), script + "\n")?;
        let truth: BTreeMap<&str, &FixtureTruth> =
            self.truth.iter().map(|t| (t.article_id.as_str(), t)).collect();
        let truth = serde_json::to_string_pretty(&truth).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("truth.json"), truth + "\n")
    }

    pub fn corpus_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for a in &self.articles {
            write_record(&mut out, a).expect("writing to memory");
        }
        out
    }
}
