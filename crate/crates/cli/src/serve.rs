//! `merge serve`: caption requests over HTTP.
//!
//! - `POST /v1/caption` with `{"article_text": .., "image_ref": ..}` returns
//!   `{"caption": .., "provenance": {..}}`.
//! - `GET /v1/entities/{id}` returns the stored record without embeddings.
//! - `GET /healthz` returns store counts.
//!
//! Errors are `{"error": {"code": .., "message": .., "stage": ..}}` with
//! status 400 (bad request body or article), 404 (unknown entity or route),
//! 503 (model backend unavailable) or 500 (anything else). Messages name the
//! failing stage but never include model output.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, info, warn};
use merge_core::emkb::{EntityType, ImageSource, KnowledgeBase, StoreStats};
use merge_core::gateways::{Gateways, ImageRef};
use merge_core::pipeline::{Pipeline, PipelineConfig};
use merge_core::KnowledgeGraph;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{oneshot, Semaphore};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Deserialize)]
pub struct CaptionRequest {
    pub article_text: String,
    pub image_ref: String,
}

struct Inner {
    /// Swapped whole on reload; requests clone the `Arc` once at the start.
    pipeline: RwLock<Arc<Pipeline>>,
    kb_path: Option<PathBuf>,
    gateways: Gateways,
    config: PipelineConfig,
    permits: Arc<Semaphore>,
}

/// Shared service state. Cloning is cheap.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

fn error_response(status: StatusCode, code: &str, message: impl Into<String>, stage: Option<&str>) -> Response {
    let body = json!({"error": {"code": code, "message": message.into(), "stage": stage}});
    (status, Json(body)).into_response()
}

#[derive(Serialize)]
struct ImageView<'a> {
    asset_id: &'a str,
    source: ImageSource,
    uri: &'a str,
    faces: usize,
}

#[derive(Serialize)]
struct EntityView<'a> {
    entity_id: &'a str,
    canonical_name: &'a str,
    entity_type: EntityType,
    background_text: &'a str,
    images: Vec<ImageView<'a>>,
    subgraph: &'a KnowledgeGraph,
}

impl Service {
    /// `workers` bounds how many captions run at once; further requests
    /// wait for a slot.
    pub fn new(
        kb: KnowledgeBase,
        kb_path: Option<PathBuf>,
        gateways: Gateways,
        config: PipelineConfig,
        workers: usize,
    ) -> Self {
        let pipeline = Pipeline::new(Arc::new(kb), gateways.clone(), config.clone());
        Self {
            inner: Arc::new(Inner {
                pipeline: RwLock::new(Arc::new(pipeline)),
                kb_path,
                gateways,
                config,
                permits: Arc::new(Semaphore::new(workers.max(1))),
            }),
        }
    }

    pub fn pipeline(&self) -> Arc<Pipeline> {
        self.inner.pipeline.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Installs a new store. Requests already running keep the old one.
    pub fn swap_kb(&self, kb: KnowledgeBase) -> StoreStats {
        let stats = kb.stats();
        let pipeline = Pipeline::new(Arc::new(kb), self.inner.gateways.clone(), self.inner.config.clone());
        *self.inner.pipeline.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(pipeline);
        stats
    }

    /// Reloads the store from the directory it was opened from.
    pub fn reload(&self) -> Result<StoreStats> {
        let path = self
            .inner
            .kb_path
            .as_ref()
            .ok_or_else(|| CliError::Usage("service has no knowledge base path to reload".into()))?;
        let kb = KnowledgeBase::load(path)?;
        let c = kb.config();
        if c.image_dim != self.inner.gateways.image_dim || c.face_dim != self.inner.gateways.face_dim {
            return Err(CliError::Data(format!(
                "reloaded store has dimensions {}/{}, service expects {}/{}",
                c.face_dim, c.image_dim, self.inner.gateways.face_dim, self.inner.gateways.image_dim
            )));
        }
        Ok(self.swap_kb(kb))
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/v1/caption", post(caption))
            .route("/v1/entities/{id}", get(entity))
            .route("/healthz", get(health))
            .fallback(|| async { error_response(StatusCode::NOT_FOUND, "not_found", "no such route", None) })
            .with_state(self.clone())
    }
}

async fn caption(State(s): State<Service>, body: Result<Json<CaptionRequest>, JsonRejection>) -> Response {
    let req = match body {
        Ok(Json(r)) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "invalid_request", e.body_text(), None),
    };
    if req.article_text.trim().is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "invalid_request", "article_text is empty", None);
    }
    if req.image_ref.trim().is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "invalid_request", "image_ref is empty", None);
    }
    let Ok(_permit) = s.inner.permits.clone().acquire_owned().await else {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "shutting_down", "service is shutting down", None);
    };
    let pipeline = s.pipeline();
    let run = tokio::task::spawn_blocking(move || pipeline.run(&ImageRef::new(req.image_ref), &req.article_text));
    match run.await {
        Ok(Ok(result)) => (StatusCode::OK, Json(result)).into_response(),
        Ok(Err(e)) if e.stage == "input" => {
            error_response(StatusCode::BAD_REQUEST, "invalid_request", e.message, Some(&e.stage))
        }
        Ok(Err(e)) if e.outage => {
            warn!("caption: backend unavailable at {}: {}", e.stage, e.message);
            error_response(
                StatusCode::SERVICE_UNAVAILABLE,
                "backend_unavailable",
                "the model backend is unavailable",
                Some(&e.stage),
            )
        }
        Ok(Err(e)) => {
            warn!("caption: failed at {}: {}", e.stage, e.message);
            error_response(
                StatusCode::INTERNAL_SERVER_ERROR,
                "caption_failed",
                "caption generation failed",
                Some(&e.stage),
            )
        }
        Err(e) => {
            error!("caption task: {e}");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error", None)
        }
    }
}

async fn entity(State(s): State<Service>, Path(id): Path<String>) -> Response {
    let pipeline = s.pipeline();
    let Some(r) = pipeline.kb.get(&id) else {
        return error_response(StatusCode::NOT_FOUND, "not_found", format!("no entity {id:?}"), None);
    };
    let view = EntityView {
        entity_id: &r.entity_id,
        canonical_name: &r.canonical_name,
        entity_type: r.entity_type,
        background_text: &r.background_text,
        images: r
            .images
            .iter()
            .map(|a| ImageView {
                asset_id: &a.asset_id,
                source: a.source,
                uri: &a.uri,
                faces: a.face_embeddings.len(),
            })
            .collect(),
        subgraph: &r.subgraph,
    };
    (StatusCode::OK, Json(view)).into_response()
}

async fn health(State(s): State<Service>) -> Response {
    let stats = s.pipeline().kb.stats();
    (StatusCode::OK, Json(json!({"status": "ok", "kb": stats}))).into_response()
}

/// How a shutdown ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Drain {
    /// Every in-flight request finished.
    Complete,
    /// The drain timeout passed with requests still running.
    TimedOut,
}

/// Serves until `shutdown` resolves, then stops accepting connections and
/// waits at most `drain` for in-flight requests.
pub async fn serve(
    service: Service,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
    drain: Duration,
) -> Result<Drain> {
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let app = service.router();
    let mut server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stop_rx.await;
            })
            .await
    });
    tokio::select! {
        r = &mut server => {
            return match r {
                Ok(Ok(())) => Ok(Drain::Complete),
                Ok(Err(e)) => Err(CliError::Data(format!("server: {e}"))),
                Err(e) => Err(CliError::Data(format!("server task: {e}"))),
            };
        }
        _ = shutdown => {}
    }
    info!("shutting down, draining for up to {drain:?}");
    let _ = stop_tx.send(());
    match tokio::time::timeout(drain, &mut server).await {
        Ok(_) => Ok(Drain::Complete),
        Err(_) => {
            warn!("drain timeout passed with requests still running");
            server.abort();
            Ok(Drain::TimedOut)
        }
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

#[cfg(unix)]
fn reload_on_hangup(service: Service) {
    use tokio::signal::unix::{signal, SignalKind};
    let Ok(mut hup) = signal(SignalKind::hangup()) else {
        warn!("cannot listen for SIGHUP; hot reload disabled");
        return;
    };
    tokio::spawn(async move {
        while hup.recv().await.is_some() {
            let s = service.clone();
            match tokio::task::spawn_blocking(move || s.reload()).await {
                Ok(Ok(stats)) => info!("reloaded knowledge base: {} entities", stats.entities),
                Ok(Err(e)) => warn!("reload failed, keeping the current store: {e}"),
                Err(e) => warn!("reload task: {e}"),
            }
        }
    });
}

/// Runs the service on its own runtime until SIGINT or SIGTERM; SIGHUP
/// reloads the store.
pub fn run_blocking(service: Service, addr: SocketAddr, drain: Duration) -> Result<Drain> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Data(format!("cannot start runtime: {e}")))?;
    let out = rt.block_on(async {
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot listen on {addr}: {e}")))?;
        if let Ok(a) = listener.local_addr() {
            info!("listening on {a}");
        }
        #[cfg(unix)]
        reload_on_hangup(service.clone());
        serve(service, listener, shutdown_signal(), drain).await
    });
    // Captions still running after the drain window are abandoned rather
    // than waited for.
    rt.shutdown_background();
    out
}
