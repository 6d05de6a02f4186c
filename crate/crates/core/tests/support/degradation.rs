//! Presence/absence matrix over faces, stored entity, subgraph and
//! extracted relations.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use merge_core::emkb::{EntityRecord, EntityType, ImageAsset, ImageSource, KnowledgeBase, StoreConfig};
use merge_core::gateways::mock::{MockGateway, MockScript, ScriptedResponse};
use merge_core::gateways::{FaceDetection, RetryPolicy};
use merge_core::graph::KnowledgeGraph;
use merge_core::pipeline::{Pipeline, PipelineConfig};
use merge_core::rmki::MatchPath;
use merge_core::{EmbeddingVector, ImageRef};

use super::Check;

const DIM: usize = 16;
pub const RELATIONS_MARKER: &str = "List the relationships the text states";
pub const STAGES: &[&str] = &[
    "input",
    "hcma/stage 1",
    "hcma/stage 2",
    "hcma/stage 3",
    "rmki/ras 1",
    "rmki/ras 2/ner",
    "rmki/ras 2/relations",
    "rmki/ras 2/graph",
    "pipeline/budget",
    "pipeline/generate",
];

const ARTICLE: &str = "Mara Velez met members of the Tolbridge Council in Quill Harbor on Monday. \
The Tolbridge Council thanked Mara Velez for the visit. Crowds gathered outside the hall.";

fn axis(i: usize, j: usize, c: f32) -> EmbeddingVector {
    let mut v = vec![0.0; DIM];
    v[i] = c;
    v[j] = (1.0 - c * c).sqrt();
    EmbeddingVector::new(v).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct Combo {
    pub faces: bool,
    pub in_kb: bool,
    pub subgraph: bool,
    pub relations: bool,
}

impl Combo {
    pub fn all() -> Vec<Combo> {
        (0..16)
            .map(|b| Combo {
                faces: b & 1 != 0,
                in_kb: b & 2 != 0,
                subgraph: b & 4 != 0,
                relations: b & 8 != 0,
            })
            .collect()
    }
}

fn record(id: &str, name: &str, kind: EntityType, image: usize, face: Option<usize>, sub: Option<(&str, &str)>) -> EntityRecord {
    let mut subgraph = KnowledgeGraph::new();
    if let Some((other, rel)) = sub {
        subgraph.link(name, other, rel).unwrap();
    }
    EntityRecord {
        entity_id: id.into(),
        canonical_name: name.into(),
        entity_type: kind,
        images: vec![ImageAsset {
            asset_id: format!("{id}-0"),
            source: ImageSource::Wikipedia,
            image_embedding: axis(image, image + 1, 1.0),
            face_embeddings: face.map(|f| vec![axis(f, f + 1, 1.0)]).unwrap_or_default(),
            uri: String::new(),
        }],
        background_text: String::new(),
        subgraph,
    }
}

pub fn setup(c: Combo, image: &str) -> (KnowledgeBase, MockScript) {
    let mut kb = KnowledgeBase::new(StoreConfig::new(DIM, DIM)).unwrap();
    let sub = |other, rel| c.subgraph.then_some((other, rel));
    if c.in_kb {
        kb.upsert(record("per-1", "Mara Velez", EntityType::Person, 0, Some(4), sub("Ardent Party", "member of")))
            .unwrap();
    }
    kb.upsert(record("gpe-1", "Quill Harbor", EntityType::Gpe, 8, None, sub("Lake Orm", "borders")))
        .unwrap();

    let mut script = MockScript::default();
    if c.faces {
        script.faces.insert(
            image.to_string(),
            vec![FaceDetection {
                bbox: [10.0, 10.0, 50.0, 60.0],
                confidence: 0.95,
                embedding: axis(4, 6, 0.95),
            }],
        );
    }
    script.images.insert(image.to_string(), axis(0, 2, 0.9));
    let reply = if c.relations {
        r#"[("Mara Velez", "Tolbridge Council", "met with")]"#
    } else {
        "[]"
    };
    script = script.rule(RELATIONS_MARKER, vec![ScriptedResponse::text(reply)]);
    (kb, script)
}

fn pipeline(kb: KnowledgeBase, script: MockScript) -> Pipeline {
    let gateways = Arc::new(MockGateway::new(script, DIM)).bundle(DIM);
    let mut config = PipelineConfig::default();
    let quiet = RetryPolicy::default().with_sleeper(|_| {});
    config.hcma.retry = quiet.clone();
    config.rmki.retry = quiet;
    Pipeline::new(Arc::new(kb), gateways, config)
}

fn labeled(stage: &str) -> bool {
    STAGES.contains(&stage)
}

pub fn check_matrix() -> Check {
    let image = "fixture://degradation.jpg";
    let mut completed = 0;
    let mut failed = 0;
    for c in Combo::all() {
        let (kb, script) = setup(c, image);
        let p = pipeline(kb.clone(), script.clone());
        let out = catch_unwind(AssertUnwindSafe(|| p.run(&ImageRef::new(image), ARTICLE)))
            .map_err(|_| format!("{c:?}: panicked"))?;
        let r = out.map_err(|e| format!("{c:?}: clean inputs failed at {}: {}", e.stage, e.message))?;
        completed += 1;
        let mara = r.provenance.matched_entities.iter().find(|m| m.entity_id == "per-1");
        match (c.in_kb, c.faces, mara) {
            (true, true, Some(m)) if m.path == MatchPath::Face => {}
            (true, false, Some(m)) if m.path == MatchPath::Clip => {}
            (false, _, None) => {}
            _ => return Err(format!("{c:?}: unexpected matches {:?}", r.provenance.matched_entities)),
        }
        if r.caption.is_empty() {
            return Err(format!("{c:?}: empty caption"));
        }

        // Same combination with a provider that never returns usable
        // relations, and with an unreadable image.
        let (kb2, mut broken) = setup(c, image);
        broken.rules.clear();
        broken = broken.rule(RELATIONS_MARKER, vec![ScriptedResponse::text("no idea")]);
        for (label, kb, script, img) in [
            ("bad relations", kb2.clone(), broken, image),
            ("unreadable image", kb2, MockScript::default(), "/nonexistent/photo.jpg"),
        ] {
            let p = pipeline(kb, script);
            let out = catch_unwind(AssertUnwindSafe(|| p.run(&ImageRef::new(img), ARTICLE)))
                .map_err(|_| format!("{c:?} {label}: panicked"))?;
            match out {
                Ok(_) => completed += 1,
                Err(e) if labeled(&e.stage) => failed += 1,
                Err(e) => return Err(format!("{c:?} {label}: unlabeled stage {:?}", e.stage)),
            }
        }
    }
    Ok(format!(
        "16/16 combinations complete with the expected matches; {completed} runs completed, {failed} failed with labeled stages, 0 crashes"
    ))
}
