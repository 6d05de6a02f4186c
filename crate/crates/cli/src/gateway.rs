use std::sync::Arc;

use merge_core::emkb::StoreConfig;
use merge_core::gateways::http::{HttpConfig, HttpGateway};
use merge_core::gateways::mock::{MockGateway, MockScript};
use merge_core::gateways::{Gateways, Retrying};

use crate::config::{GatewayKind, RunConfig};
use crate::error::{CliError, Result};

/// Providers for every model role, sized to the store's dimensions.
///
/// Chat retries are handled per stage by the pipeline (they share a budget
/// with re-prompts), so only the embedding and face roles are wrapped here.
pub fn build(cfg: &RunConfig, store: &StoreConfig) -> Result<Gateways> {
    match cfg.gateway.kind {
        GatewayKind::Mock => {
            let mut script = match &cfg.gateway.mock_script {
                Some(path) => MockScript::from_path(path).map_err(|e| CliError::Data(e.to_string()))?,
                None => MockScript::default(),
            };
            if script.salt.is_none() {
                script.salt = cfg.seed.map(|s| format!("seed-{s}"));
            }
            Ok(Arc::new(MockGateway::new(script, store.image_dim)).bundle(store.face_dim))
        }
        GatewayKind::Http => {
            let http = Arc::new(HttpGateway::new(HttpConfig {
                base_url: cfg.gateway.base_url.clone().unwrap_or_default(),
                model: cfg.gateway.model.clone().unwrap_or_else(|| "default".into()),
                timeout_secs: cfg.gateway.timeout_secs,
            }));
            let policy = cfg.retry_policy();
            Ok(Gateways {
                chat: http.clone(),
                images: Arc::new(Retrying::new(http.clone(), policy.clone())),
                faces: Arc::new(Retrying::new(http, policy)),
                image_dim: store.image_dim,
                face_dim: store.face_dim,
            })
        }
    }
}
