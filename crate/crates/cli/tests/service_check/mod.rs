//! Service contract checks shared by the service tests and the acceptance
//! runner.

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use merge_cli::serve::{serve, Drain, Service};
use merge_core::emkb::{EntityRecord, EntityType};
use merge_core::gateways::mock::{MockGateway, MockScript, ScriptedResponse};
use merge_core::gateways::{FaceAnalyzer, FaceDetection, GatewayError, Gateways, ImageRef, RetryPolicy};
use merge_core::ingest::fixtures::{make_fixtures, FixtureSet};
use merge_core::pipeline::{Pipeline, PipelineConfig};
use merge_core::KnowledgeGraph;
use serde_json::{json, Value};

pub type Check = Result<String, String>;

/// Face analyzer that delays every call and records how many overlap.
pub struct SlowFaces {
    inner: Arc<MockGateway>,
    delay: Duration,
    active: AtomicUsize,
    pub peak: AtomicUsize,
    pub started: AtomicUsize,
}

impl FaceAnalyzer for SlowFaces {
    fn detect_faces(&self, image: &ImageRef, min_confidence: f64) -> Result<Vec<FaceDetection>, GatewayError> {
        self.started.fetch_add(1, Ordering::SeqCst);
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(self.delay);
        self.active.fetch_sub(1, Ordering::SeqCst);
        self.inner.detect_faces(image, min_confidence)
    }
}

fn quick_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    let retry = RetryPolicy::new(3, Duration::from_millis(1));
    c.hcma.retry = retry.clone();
    c.rmki.retry = retry;
    c
}

fn gateways(f: &FixtureSet, script: MockScript, face_delay: Option<Duration>) -> (Gateways, Option<Arc<SlowFaces>>) {
    let c = f.kb.config();
    let mock = Arc::new(MockGateway::new(script, c.image_dim));
    let mut g = mock.clone().bundle(c.face_dim);
    let slow = face_delay.map(|delay| {
        Arc::new(SlowFaces {
            inner: mock,
            delay,
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            started: AtomicUsize::new(0),
        })
    });
    if let Some(s) = &slow {
        g.faces = s.clone();
    }
    (g, slow)
}

/// A running service on an ephemeral port.
pub struct Running {
    pub base: String,
    rt: Option<tokio::runtime::Runtime>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    done: Option<std::sync::mpsc::Receiver<Result<Drain, String>>>,
}

impl Running {
    pub fn start(service: Service, drain: Duration) -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let (done_tx, done_rx) = std::sync::mpsc::channel();
        rt.spawn(async move {
            let shutdown = async {
                let _ = stop_rx.await;
            };
            let r = serve(service, listener, shutdown, drain).await.map_err(|e| e.to_string());
            let _ = done_tx.send(r);
        });
        Self {
            base,
            rt: Some(rt),
            stop: Some(stop_tx),
            done: Some(done_rx),
        }
    }

    /// Signals shutdown and returns how the drain ended and how long it took.
    pub fn shutdown(mut self) -> (Result<Drain, String>, Duration) {
        let t = Instant::now();
        let _ = self.stop.take().unwrap().send(());
        let r = self
            .done
            .take()
            .unwrap()
            .recv_timeout(Duration::from_secs(60))
            .unwrap_or_else(|_| Err("serve did not return".into()));
        let elapsed = t.elapsed();
        (r, elapsed)
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(rt) = self.rt.take() {
            rt.shutdown_background();
        }
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

/// Status and body text.
pub fn get(base: &str, path: &str) -> Result<(u16, String), String> {
    let mut r = agent().get(&format!("{base}{path}")).call().map_err(|e| e.to_string())?;
    let body = r.body_mut().read_to_string().map_err(|e| e.to_string())?;
    Ok((r.status().as_u16(), body))
}

pub fn post(base: &str, path: &str, body: &str) -> Result<(u16, String), String> {
    let mut r = agent()
        .post(&format!("{base}{path}"))
        .header("Content-Type", "application/json")
        .send(body)
        .map_err(|e| e.to_string())?;
    let text = r.body_mut().read_to_string().map_err(|e| e.to_string())?;
    Ok((r.status().as_u16(), text))
}

fn caption_body(f: &FixtureSet, i: usize) -> String {
    let a = &f.articles[i];
    json!({"article_text": a.article_text(), "image_ref": a.image_ref.as_str()}).to_string()
}

fn expect(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn error_code(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v["error"]["code"].as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Happy path, 400, 404, health, hot reload.
pub fn check_endpoints() -> Check {
    let f = make_fixtures(42, 8);
    let (g, _) = gateways(&f, f.script.clone(), None);
    let service = Service::new(f.kb.clone(), None, g.clone(), quick_config(), 4);
    let direct = Pipeline::new(Arc::new(f.kb.clone()), g, quick_config())
        .run(&f.articles[0].image_ref, &f.articles[0].article_text())
        .map_err(|e| e.to_string())?;
    let srv = Running::start(service.clone(), Duration::from_secs(5));
    let base = srv.base.clone();

    let (status, body) = post(&base, "/v1/caption", &caption_body(&f, 0))?;
    expect(status == 200, || format!("happy path: {status} {body}"))?;
    let got: Value = serde_json::from_str(&body).map_err(|e| e.to_string())?;
    expect(got == serde_json::to_value(&direct).unwrap(), || {
        format!("service caption differs from a direct run: {body}")
    })?;

    for (what, body) in [
        ("missing article_text", json!({"image_ref": "fixture://x"}).to_string()),
        ("empty article_text", json!({"article_text": "  ", "image_ref": "fixture://x"}).to_string()),
        ("not JSON", "{article".to_string()),
        ("wrong type", json!({"article_text": 5, "image_ref": "fixture://x"}).to_string()),
    ] {
        let (status, text) = post(&base, "/v1/caption", &body)?;
        expect(status == 400 && error_code(&text) == "invalid_request", || {
            format!("{what}: {status} {text}")
        })?;
    }

    let known = f.kb.records().next().unwrap();
    let (status, body) = get(&base, &format!("/v1/entities/{}", known.entity_id))?;
    let v: Value = serde_json::from_str(&body).map_err(|e| e.to_string())?;
    expect(status == 200 && v["canonical_name"] == known.canonical_name.as_str(), || {
        format!("entity lookup: {status} {body}")
    })?;
    let (status, body) = get(&base, "/v1/entities/no-such-entity")?;
    expect(status == 404 && error_code(&body) == "not_found", || format!("unknown entity: {status} {body}"))?;
    let (status, _) = get(&base, "/v2/nothing")?;
    expect(status == 404, || format!("unknown route: {status}"))?;

    let (status, body) = get(&base, "/healthz")?;
    let v: Value = serde_json::from_str(&body).map_err(|e| e.to_string())?;
    let stats = serde_json::to_value(f.kb.stats()).unwrap();
    expect(status == 200 && v["kb"] == stats, || format!("healthz: {status} {body}"))?;

    // Hot reload: a new snapshot is visible to the next request.
    let mut kb2 = f.kb.clone();
    let mut sub = KnowledgeGraph::new();
    sub.add_node("Late Arrival").unwrap();
    kb2.upsert(EntityRecord {
        entity_id: "late-1".into(),
        canonical_name: "Late Arrival".into(),
        entity_type: EntityType::Person,
        images: vec![],
        background_text: String::new(),
        subgraph: sub,
    })
    .map_err(|e| e.to_string())?;
    let (before, _) = get(&base, "/v1/entities/late-1")?;
    service.swap_kb(kb2);
    let (after, _) = get(&base, "/v1/entities/late-1")?;
    expect(before == 404 && after == 200, || format!("reload: {before} then {after}"))?;
    drop(srv);
    Ok("200 happy path equals a direct run; 400 x4; 404 entity and route; healthz stats; hot reload".into())
}

/// Gateway outage maps to 503, malformed model output to 500, and neither
/// body carries model output.
pub fn check_failures() -> Check {
    let f = make_fixtures(42, 4);
    let raw = "RAW-MODEL-OUTPUT-5c1e {\"caption\": ";
    let cases = [
        ("outage", ScriptedResponse::provider(503), 503, "backend_unavailable"),
        ("malformed", ScriptedResponse::text(raw), 500, "caption_failed"),
    ];
    for (what, response, status_want, code_want) in cases {
        let script = f.script.clone().rule("", vec![response]);
        let (g, _) = gateways(&f, script, None);
        let srv = Running::start(Service::new(f.kb.clone(), None, g, quick_config(), 2), Duration::from_secs(5));
        let (status, body) = post(&srv.base, "/v1/caption", &caption_body(&f, 0))?;
        expect(status == status_want && error_code(&body) == code_want, || {
            format!("{what}: {status} {body}")
        })?;
        expect(!body.contains("RAW-MODEL-OUTPUT"), || format!("{what}: body leaks model output: {body}"))?;
        let v: Value = serde_json::from_str(&body).map_err(|e| e.to_string())?;
        expect(v["error"]["stage"].as_str().is_some_and(|s| s.starts_with("hcma/")), || {
            format!("{what}: stage missing: {body}")
        })?;
    }
    Ok("503 on outage, 500 on malformed output, no model output in bodies".into())
}

/// No more than `workers` captions run at once.
pub fn check_concurrency(workers: usize) -> Check {
    let f = make_fixtures(42, 8);
    let (g, slow) = gateways(&f, f.script.clone(), Some(Duration::from_millis(150)));
    let slow = slow.unwrap();
    let srv = Running::start(
        Service::new(f.kb.clone(), None, g, quick_config(), workers),
        Duration::from_secs(5),
    );
    let n = workers * 3;
    let handles: Vec<_> = (0..n)
        .map(|i| {
            let base = srv.base.clone();
            let body = caption_body(&f, i % f.articles.len());
            std::thread::spawn(move || post(&base, "/v1/caption", &body).map(|r| r.0))
        })
        .collect();
    for h in handles {
        let status = h.join().map_err(|_| "client thread panicked".to_string())??;
        expect(status == 200, || format!("concurrent request: {status}"))?;
    }
    let peak = slow.peak.load(Ordering::SeqCst);
    expect(peak <= workers, || format!("{peak} captions ran at once with {workers} workers"))?;
    expect(peak >= 2.min(workers), || format!("requests never overlapped (peak {peak})"))?;
    Ok(format!("{n} concurrent requests, peak {peak} in flight with W={workers}"))
}

/// Shutdown waits for in-flight work but never longer than the drain
/// timeout, within one second.
pub fn check_drain() -> Check {
    let f = make_fixtures(42, 4);
    let mut lines = Vec::new();
    for (work, drain, want) in [
        (Duration::from_secs(6), Duration::from_millis(1500), Drain::TimedOut),
        (Duration::from_millis(400), Duration::from_secs(4), Drain::Complete),
    ] {
        let (g, slow) = gateways(&f, f.script.clone(), Some(work));
        let slow = slow.unwrap();
        let srv = Running::start(Service::new(f.kb.clone(), None, g, quick_config(), 2), drain);
        let base = srv.base.clone();
        let body = caption_body(&f, 0);
        let client = std::thread::spawn(move || post(&base, "/v1/caption", &body));
        let t = Instant::now();
        while slow.started.load(Ordering::SeqCst) == 0 {
            if t.elapsed() > Duration::from_secs(10) {
                return Err("request never reached the pipeline".into());
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        let (outcome, elapsed) = srv.shutdown();
        let outcome = outcome?;
        expect(outcome == want, || format!("drain {drain:?} with {work:?} of work: {outcome:?}"))?;
        let bound = if want == Drain::TimedOut { drain } else { work };
        let off = elapsed.as_secs_f64() - bound.as_secs_f64();
        expect(off.abs() <= 1.0, || {
            format!("shutdown took {elapsed:?}, expected about {bound:?}")
        })?;
        if want == Drain::Complete {
            let r = client.join().map_err(|_| "client panicked".to_string())??;
            expect(r.0 == 200, || format!("drained request got {}", r.0))?;
        }
        lines.push(format!("{outcome:?} after {:.2}s (drain {:.1}s)", elapsed.as_secs_f64(), drain.as_secs_f64()));
    }
    Ok(lines.join("; "))
}

/// Reload from disk swaps in the saved store.
pub fn check_reload_from_disk() -> Check {
    let f = make_fixtures(42, 4);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("kb");
    let mut kb = f.kb.clone();
    kb.save(&path).map_err(|e| e.to_string())?;
    let (g, _) = gateways(&f, f.script.clone(), None);
    let service = Service::new(kb.clone(), Some(path.clone()), g, quick_config(), 1);
    let victim = kb.records().next().unwrap().entity_id.clone();
    kb.remove(&victim);
    kb.save(&path).map_err(|e| e.to_string())?;
    let stats = service.reload().map_err(|e| e.to_string())?;
    expect(stats.entities == f.kb.len() - 1 && service.pipeline().kb.get(&victim).is_none(), || {
        "reload did not pick up the saved store".into()
    })?;
    std::fs::write(path.join("MANIFEST"), "garbage").map_err(|e| e.to_string())?;
    expect(service.reload().is_err() && service.pipeline().kb.len() == f.kb.len() - 1, || {
        "a failed reload replaced the store".into()
    })?;
    Ok("reload swaps in the saved store and keeps the old one on failure".into())
}
