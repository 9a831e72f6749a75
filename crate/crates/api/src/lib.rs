//! Request/response types for the consist HTTP API. CCTF payloads travel as
//! base64 strings inside JSON; everything else is plain serde.

use consist_core::ops::{FrameReport, IdentityReport};
use consist_core::selfcheck::CheckResult;
use consist_core::RunConfig;
use serde::{Deserialize, Serialize};

pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;

    pub fn encode(bytes: &[u8]) -> String {
        STANDARD.encode(bytes)
    }

    pub fn decode(text: &str) -> Result<Vec<u8>, String> {
        STANDARD
            .decode(text)
            .map_err(|e| format!("invalid base64 payload: {e}"))
    }
}

/// Error body returned with any non-2xx status. `class` mirrors the CLI's
/// exit-code classes: `config`, `format`, or `internal`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub class: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityRequest {
    pub config: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityResponse {
    /// Content hash of the cache bytes; later frame requests may reference
    /// it instead of re-uploading.
    pub cache_id: String,
    pub report: IdentityReport,
    pub latent_cctf_b64: String,
    pub cache_cctf_b64: String,
    pub mask_cctf_b64: String,
    pub attn_cctf_b64: String,
}

/// Identity cache reference: a server-held id or inline CCTF bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheRef {
    CacheId(String),
    CctfB64(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRequest {
    pub config: RunConfig,
    pub frame_index: usize,
    pub cache: CacheRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameResponse {
    pub report: FrameReport,
    pub report_csv: String,
    pub latent_cctf_b64: String,
    pub match_cctf_b64: String,
    pub mask_cctf_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingsRequest {
    pub cctf_b64: String,
    /// Entry name inside the dump; defaults to `attn_i2i`.
    pub entry: Option<String>,
    pub query_index: usize,
    pub n_rings: usize,
    /// Overrides the dump's `meta` grid extents.
    pub grid: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthWire {
    pub map: Vec<usize>,
    pub mask_bits: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyRequest {
    pub config: RunConfig,
    pub cache: CacheRef,
    /// Frame prompt to probe with; the identity prompt when absent.
    pub frame_index: Option<usize>,
    pub steps: Vec<usize>,
    /// Defaults to the self-matching ground truth (identity permutation and
    /// the cache's identity mask).
    pub ground_truth: Option<GroundTruthWire>,
}

/// CSV table payload (`ring,sum` or `step,mse,iou`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableResponse {
    pub csv: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SelfcheckRequest {
    /// Mutation switches for verifying the suite catches regressions;
    /// currently just `skip-reencode`.
    #[serde(default)]
    pub mutations: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfcheckResponse {
    pub passed: bool,
    pub results: Vec<CheckResult>,
}
