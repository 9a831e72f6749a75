//! Point-tracking attention and adaptive token merge. The frame pass swaps
//! each single block's attention for one over an extended key/value set:
//! the frame's own keys plus identity keys gathered at the matched indices
//! and re-encoded at the frame-side coordinates. It then interpolates the
//! foreground attention outputs toward the identity's.
//!
//! An additive mask keeps the appended identity foreground visible only to
//! frame foreground queries (and appended background to background queries);
//! text queries never see appended keys, so prompt conditioning is untouched.

use crate::attn;
use crate::correspond::MatchResult;
use crate::error::{Error, Result};
use crate::maskex::ForegroundMask;
use crate::rope::{self, GridCoord, RopeConfig};
use crate::tensor::{Tensor, MASK_NEG_INF};

/// Which identity rows to gather for one frame, and with what confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherPlan {
    /// Frame foreground token indices (`nonzero` of the frame mask).
    pub c_fg_frm: Vec<usize>,
    /// Matched identity indices, `map_star` gathered at `c_fg_frm`.
    pub c_fg_id: Vec<usize>,
    /// Matching confidences aligned with `c_fg_frm`.
    pub s_conf: Vec<f32>,
    pub include_bg: bool,
    /// Identity background indices when `include_bg` is set.
    pub c_bg_id: Vec<usize>,
}

impl GatherPlan {
    pub fn appended_keys(&self) -> usize {
        self.c_fg_frm.len() + self.c_bg_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.appended_keys() == 0
    }
}

pub fn build_gather_plan(
    frame_mask: &ForegroundMask,
    identity_mask: &ForegroundMask,
    match_result: &MatchResult,
    include_bg: bool,
) -> Result<GatherPlan> {
    let hw = frame_mask.h() * frame_mask.w();
    if identity_mask.h() != frame_mask.h() || identity_mask.w() != frame_mask.w() {
        return Err(Error::input(
            "gather-plan",
            format!(
                "mask grids disagree: {}x{} vs {}x{}",
                frame_mask.h(),
                frame_mask.w(),
                identity_mask.h(),
                identity_mask.w()
            ),
        ));
    }
    if match_result.len() != hw {
        return Err(Error::input(
            "gather-plan",
            format!("{} matches for {hw} grid tokens", match_result.len()),
        ));
    }
    let c_fg_frm: Vec<usize> = frame_mask.fg_indices().to_vec();
    let mut c_fg_id = Vec::with_capacity(c_fg_frm.len());
    let mut s_conf = Vec::with_capacity(c_fg_frm.len());
    for &j in &c_fg_frm {
        let target = match_result.map_star[j];
        if target >= hw {
            return Err(Error::input(
                "gather-plan",
                format!("match target {target} out of grid {hw}"),
            ));
        }
        c_fg_id.push(target);
        s_conf.push(match_result.s_max[j]);
    }
    let c_bg_id = if include_bg {
        identity_mask.bg_indices().to_vec()
    } else {
        Vec::new()
    };
    Ok(GatherPlan {
        c_fg_frm,
        c_fg_id,
        s_conf,
        include_bg,
        c_bg_id,
    })
}

/// Re-encode position-free identity keys at new grid coordinates. `k_rows`
/// are the gathered `K^0` rows (multi-head, `n x (n_heads * head_dim)`),
/// `target_coords` the frame-side coordinate for each row.
pub fn reencode_identity_keys(
    k_rows: &Tensor,
    target_coords: &[GridCoord],
    n_heads: usize,
    rope_cfg: &RopeConfig,
    grid_h: usize,
    grid_w: usize,
) -> Result<Tensor> {
    if k_rows.rows() != target_coords.len() {
        return Err(Error::shape(
            "reencode-keys",
            format!("{} rows vs {} coords", k_rows.rows(), target_coords.len()),
        ));
    }
    for c in target_coords {
        if !c.in_bounds(grid_h, grid_w) {
            return Err(Error::input(
                "reencode-keys",
                format!("coordinate ({}, {}) outside {grid_h}x{grid_w} grid", c.row, c.col),
            ));
        }
    }
    rope::rope2d_apply_heads(k_rows, target_coords, n_heads, rope_cfg)
}

/// Build the additive mask over the extended key axis.
///
/// Layout of the key axis: `text_len + hw` native keys, then the appended
/// identity foreground block, then (optionally) the appended background
/// block. Native keys stay visible to every query; appended foreground keys
/// only to frame foreground image queries; appended background keys only to
/// frame background image queries; text queries see no appended keys.
pub fn build_attention_mask(
    plan: &GatherPlan,
    frame_mask: &ForegroundMask,
    text_len: usize,
) -> Result<Tensor> {
    let hw = frame_mask.h() * frame_mask.w();
    let n_queries = text_len + hw;
    let n_fg = plan.c_fg_frm.len();
    let n_bg = plan.c_bg_id.len();
    let n_keys = n_queries + n_fg + n_bg;
    let mut mask = Tensor::zeros(vec![n_queries, n_keys]);
    for q in 0..n_queries {
        let is_image = q >= text_len;
        let is_fg = is_image && frame_mask.bits()[q - text_len] == 1;
        let row = mask.row_mut(q);
        for item in row.iter_mut().take(n_queries + n_fg).skip(n_queries) {
            if !is_fg {
                *item = MASK_NEG_INF;
            }
        }
        for item in row.iter_mut().skip(n_queries + n_fg) {
            if !is_image || is_fg {
                *item = MASK_NEG_INF;
            }
        }
    }
    Ok(mask)
}

/// Native q/k/v plus appended identity blocks and the mask over the extended
/// key axis.
#[derive(Debug, Clone)]
pub struct ExtendedAttentionInputs {
    pub q: Tensor,
    pub k_ext: Tensor,
    pub v_ext: Tensor,
    /// Additive mask, `q.rows() x k_ext.rows()`, entries 0 or the sentinel.
    pub additive_mask: Tensor,
    pub n_heads: usize,
    /// Rows of `k_ext` that are native (everything after is appended).
    pub n_native: usize,
}

impl ExtendedAttentionInputs {
    pub fn appended_keys(&self) -> usize {
        self.k_ext.rows() - self.n_native
    }
}

/// Masked attention over the extended key axis. With nothing appended this
/// is exactly the standard unified attention (same code path, bit for bit).
pub fn point_tracking_attention(inputs: &ExtendedAttentionInputs) -> Result<Tensor> {
    if !inputs.q.is_finite() || !inputs.k_ext.is_finite() || !inputs.v_ext.is_finite() {
        return Err(Error::input(
            "point-tracking-attention",
            "non-finite values in q/k/v",
        ));
    }
    if inputs.k_ext.rows() != inputs.v_ext.rows() {
        return Err(Error::shape(
            "point-tracking-attention",
            format!("{} keys vs {} values", inputs.k_ext.rows(), inputs.v_ext.rows()),
        ));
    }
    let (mr, mc) = inputs.additive_mask.dims2("point-tracking-attention")?;
    if mr != inputs.q.rows() || mc != inputs.k_ext.rows() {
        return Err(Error::shape(
            "point-tracking-attention",
            format!(
                "mask {mr}x{mc} vs {} queries and {} keys",
                inputs.q.rows(),
                inputs.k_ext.rows()
            ),
        ));
    }
    if inputs.appended_keys() == 0 {
        return attn::unified_attention(&inputs.q, &inputs.k_ext, &inputs.v_ext, inputs.n_heads);
    }
    attn::attention_with_mask(
        &inputs.q,
        &inputs.k_ext,
        &inputs.v_ext,
        inputs.n_heads,
        Some(&inputs.additive_mask),
    )
}

/// Per-token convex interpolation of frame attention outputs toward the
/// gathered identity outputs: `(1 - a*s) * frame + a*s * identity`, with
/// each confidence clamped to [0, 1] first.
pub fn adaptive_merge(
    h_frame_fg: &Tensor,
    h_identity_at_matches: &Tensor,
    s_conf: &[f32],
    alpha: f32,
) -> Result<Tensor> {
    if h_frame_fg.shape() != h_identity_at_matches.shape() {
        return Err(Error::shape(
            "adaptive-merge",
            format!(
                "{:?} vs {:?}",
                h_frame_fg.shape(),
                h_identity_at_matches.shape()
            ),
        ));
    }
    let (n, _) = h_frame_fg.dims2("adaptive-merge")?;
    if s_conf.len() != n {
        return Err(Error::shape(
            "adaptive-merge",
            format!("{} confidences for {n} rows", s_conf.len()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input(
            "adaptive-merge",
            format!("alpha must be in [0, 1], got {alpha}"),
        ));
    }
    let mut out = h_frame_fg.clone();
    for i in 0..n {
        let weight = alpha * s_conf[i].clamp(0.0, 1.0);
        let id_row = h_identity_at_matches.row(i);
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (1.0 - weight) * *v + weight * id_row[j];
        }
    }
    Ok(out)
}
