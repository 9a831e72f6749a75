//! HTTP front end over the core run operations.
//!
//! The service is a deterministic compute server. Identity passes return all
//! artifacts as CCTF payloads and also keep the decoded cache in memory under
//! its content hash, so later frame requests can reference `cache_id`
//! instead of re-uploading. State is advisory: every request also works with
//! inline cache bytes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use consist_api::{
    AccuracyRequest, CacheRef, ErrorBody, FrameRequest, FrameResponse, IdentityRequest,
    IdentityResponse, RingsRequest, SelfcheckRequest, SelfcheckResponse, TableResponse,
};
use consist_core::error::ErrorClass;
use consist_core::sampler::IdentityCache;
use consist_core::selfcheck::{self, CheckOptions};
use consist_core::{ops, Error as CoreError};
use sha2::{Digest, Sha256};

#[derive(Default)]
pub struct AppState {
    caches: Mutex<HashMap<String, Arc<IdentityCache>>>,
}

impl AppState {
    fn remember(&self, id: String, cache: IdentityCache) {
        self.caches.lock().expect("poisoned").insert(id, Arc::new(cache));
    }

    fn lookup(&self, id: &str) -> Option<Arc<IdentityCache>> {
        self.caches.lock().expect("poisoned").get(id).cloned()
    }
}

/// Service error: an HTTP status plus the error-class body the CLI maps to
/// exit codes.
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn internal(message: String) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody {
                class: ErrorClass::Internal.as_str().into(),
                message,
            },
        }
    }

    fn config(message: String) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                class: ErrorClass::Config.as_str().into(),
                message,
            },
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match e.class() {
            ErrorClass::Config | ErrorClass::Format => StatusCode::BAD_REQUEST,
            ErrorClass::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            body: ErrorBody {
                class: e.class().as_str().into(),
                message: e.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn cache_id_for(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Run CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

async fn health() -> &'static str {
    "ok"
}

async fn identity(
    State(state): State<Arc<AppState>>,
    Json(req): Json<IdentityRequest>,
) -> Result<Json<IdentityResponse>, ApiError> {
    let (artifacts, cache, cache_id) = blocking(move || {
        let artifacts = ops::run_identity_op(&req.config)?;
        let cache = ops::decode_cache(&artifacts.cache_cctf)?;
        let cache_id = cache_id_for(&artifacts.cache_cctf);
        Ok((artifacts, cache, cache_id))
    })
    .await?;
    state.remember(cache_id.clone(), cache);
    tracing::info!(%cache_id, "identity pass complete");
    Ok(Json(IdentityResponse {
        cache_id,
        report: artifacts.report,
        latent_cctf_b64: consist_api::b64::encode(&artifacts.latent_cctf),
        cache_cctf_b64: consist_api::b64::encode(&artifacts.cache_cctf),
        mask_cctf_b64: consist_api::b64::encode(&artifacts.mask_cctf),
        attn_cctf_b64: consist_api::b64::encode(&artifacts.attn_cctf),
    }))
}

fn resolve_cache(state: &AppState, cache: &CacheRef) -> Result<Arc<IdentityCache>, ApiError> {
    match cache {
        CacheRef::CacheId(id) => state
            .lookup(id)
            .ok_or_else(|| ApiError::config(format!("unknown cache_id {id:?}"))),
        CacheRef::CctfB64(text) => {
            let bytes = consist_api::b64::decode(text).map_err(ApiError::config)?;
            Ok(Arc::new(ops::decode_cache(&bytes)?))
        }
    }
}

async fn frame(
    State(state): State<Arc<AppState>>,
    Json(req): Json<FrameRequest>,
) -> Result<Json<FrameResponse>, ApiError> {
    let cache = resolve_cache(&state, &req.cache)?;
    let artifacts =
        blocking(move || Ok(ops::run_frame_op(&req.config, &cache, req.frame_index)?)).await?;
    Ok(Json(FrameResponse {
        report: artifacts.report,
        report_csv: artifacts.report_csv,
        latent_cctf_b64: consist_api::b64::encode(&artifacts.latent_cctf),
        match_cctf_b64: consist_api::b64::encode(&artifacts.match_cctf),
        mask_cctf_b64: consist_api::b64::encode(&artifacts.mask_cctf),
    }))
}

async fn diagnose_rings(
    Json(req): Json<RingsRequest>,
) -> Result<Json<TableResponse>, ApiError> {
    let csv = blocking(move || {
        let bytes = consist_api::b64::decode(&req.cctf_b64).map_err(ApiError::config)?;
        Ok(ops::rings_op(
            &bytes,
            req.entry.as_deref(),
            req.query_index,
            req.n_rings,
            req.grid,
        )?)
    })
    .await?;
    Ok(Json(TableResponse { csv }))
}

async fn diagnose_accuracy(
    State(state): State<Arc<AppState>>,
    Json(req): Json<AccuracyRequest>,
) -> Result<Json<TableResponse>, ApiError> {
    let cache = resolve_cache(&state, &req.cache)?;
    let csv = blocking(move || {
        let gt = req.ground_truth.as_ref().map(|g| ops::GroundTruth {
            map: g.map.clone(),
            mask_bits: g.mask_bits.clone(),
        });
        Ok(ops::accuracy_op(
            &req.config,
            &cache,
            req.frame_index,
            &req.steps,
            gt.as_ref(),
        )?)
    })
    .await?;
    Ok(Json(TableResponse { csv }))
}

async fn run_selfcheck(
    Json(req): Json<SelfcheckRequest>,
) -> Result<Json<SelfcheckResponse>, ApiError> {
    let mut opts = CheckOptions::default();
    for m in &req.mutations {
        match m.as_str() {
            "skip-reencode" => opts.skip_reencode = true,
            other => {
                return Err(ApiError::config(format!("unknown mutation {other:?}")));
            }
        }
    }
    let results = blocking(move || Ok(selfcheck::run_all(&opts))).await?;
    let passed = results.iter().all(|r| r.passed);
    Ok(Json(SelfcheckResponse { passed, results }))
}

/// Request body cap; identity caches ride inside JSON as base64.
const MAX_BODY_BYTES: usize = 1 << 30;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/identity", post(identity))
        .route("/v1/frame", post(frame))
        .route("/v1/diagnose/rings", post(diagnose_rings))
        .route("/v1/diagnose/accuracy", post(diagnose_accuracy))
        .route("/v1/selfcheck", post(run_selfcheck))
        .layer(axum::extract::DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Bind and serve; returns the bound address (useful with port 0).
pub async fn serve(addr: std::net::SocketAddr) -> std::io::Result<std::net::SocketAddr> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    tokio::spawn(async move {
        axum::serve(listener, router(Arc::new(AppState::default())))
            .await
            .expect("server failed");
    });
    Ok(bound)
}
