//! High-level run operations behind the service endpoints: each takes a
//! validated `RunConfig` (plus dump bytes where needed) and produces CCTF
//! payloads and a report. Everything is deterministic, so identical requests
//! yield identical bytes.

use crate::cctf::{self, DumpEntry};
use crate::config::RunConfig;
use crate::correspond::MatchResult;
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::maskex::ForegroundMask;
use crate::model::build_model;
use crate::sampler::{self, IdentityCache};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

fn grid_meta(h: usize, w: usize) -> DumpEntry {
    DumpEntry::Tensor(Tensor::new(vec![2], vec![h as f32, w as f32]).expect("extents agree"))
}

fn mask_entry(mask: &ForegroundMask) -> DumpEntry {
    DumpEntry::MaskGrid {
        h: mask.h(),
        w: mask.w(),
        bits: mask.bits().to_vec(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityReport {
    pub fg_fraction: f64,
    pub cache_entries: usize,
    pub n_steps: usize,
    pub extract_step: usize,
    pub apply_until_step: usize,
}

#[derive(Debug, Clone)]
pub struct IdentityArtifacts {
    pub latent_cctf: Vec<u8>,
    pub cache_cctf: Vec<u8>,
    pub mask_cctf: Vec<u8>,
    pub attn_cctf: Vec<u8>,
    pub report: IdentityReport,
}

/// Run the identity pass and serialize its products.
pub fn run_identity_op(cfg: &RunConfig) -> Result<IdentityArtifacts> {
    cfg.validate()?;
    let model = build_model(&cfg.model)?;
    let prompt = cfg.prompt_layout(&cfg.identity_prompt)?;
    let out = sampler::run_identity_pass(&model, &prompt, cfg.seed, &cfg.sampler)?;
    let (h, w) = (cfg.model.grid_h, cfg.model.grid_w);
    let latent_cctf = cctf::dump_tensors(&[
        ("meta".into(), grid_meta(h, w)),
        ("latent".into(), DumpEntry::Tensor(out.latent.clone())),
    ])?;
    let cache_cctf = out.cache.to_cctf_bytes()?;
    let mask_cctf = cctf::dump_tensors(&[(
        "mask".into(),
        mask_entry(&out.cache.identity_mask),
    )])?;
    let attn_cctf = cctf::dump_tensors(&[
        ("meta".into(), grid_meta(h, w)),
        ("attn_i2i".into(), DumpEntry::Tensor(out.attn_i2i)),
    ])?;
    let report = IdentityReport {
        fg_fraction: out.cache.identity_mask.fg_fraction(),
        cache_entries: out.cache.populated_entries(),
        n_steps: cfg.sampler.n_steps,
        extract_step: cfg.sampler.extract_step,
        apply_until_step: cfg.sampler.apply_until_step,
    };
    Ok(IdentityArtifacts {
        latent_cctf,
        cache_cctf,
        mask_cctf,
        attn_cctf,
        report,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_index: usize,
    pub mechanisms_active: bool,
    pub fg_fraction: f64,
    pub mean_s_conf: f64,
    pub appended_fg_keys: usize,
    pub appended_bg_keys: usize,
    pub keep_background: bool,
    pub pta_enabled: bool,
    pub merge_enabled: bool,
    pub masking_enabled: bool,
}

impl FrameReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        out.push_str(&format!("frame_index,{}\n", self.frame_index));
        out.push_str(&format!("mechanisms_active,{}\n", self.mechanisms_active));
        out.push_str(&format!("fg_fraction,{}\n", self.fg_fraction));
        out.push_str(&format!("mean_s_conf,{}\n", self.mean_s_conf));
        out.push_str(&format!("appended_fg_keys,{}\n", self.appended_fg_keys));
        out.push_str(&format!("appended_bg_keys,{}\n", self.appended_bg_keys));
        out.push_str(&format!("keep_background,{}\n", self.keep_background));
        out.push_str(&format!("pta_enabled,{}\n", self.pta_enabled));
        out.push_str(&format!("merge_enabled,{}\n", self.merge_enabled));
        out.push_str(&format!("masking_enabled,{}\n", self.masking_enabled));
        out
    }
}

#[derive(Debug, Clone)]
pub struct FrameArtifacts {
    pub latent_cctf: Vec<u8>,
    pub match_cctf: Vec<u8>,
    pub mask_cctf: Vec<u8>,
    pub report_csv: String,
    pub report: FrameReport,
}

pub fn decode_cache(bytes: &[u8]) -> Result<IdentityCache> {
    IdentityCache::from_cctf_bytes(bytes)
}

/// Probe then generate one frame against an identity cache.
pub fn run_frame_op(
    cfg: &RunConfig,
    cache: &IdentityCache,
    frame_index: usize,
) -> Result<FrameArtifacts> {
    cfg.validate()?;
    let model = build_model(&cfg.model)?;
    let frame_prompt_text = cfg.frame_prompt(frame_index)?;
    let frame_prompt = cfg.prompt_layout(frame_prompt_text)?;
    let (h, w) = (cfg.model.grid_h, cfg.model.grid_w);
    let hw = h * w;

    // an empty window means no mechanisms and nothing to probe
    let window_active = cfg.sampler.apply_until_step > 0;
    let (match_result, frame_mask) = if window_active {
        sampler::run_probe_pass(&model, &frame_prompt, cfg.seed, &cfg.sampler, cache)?
    } else {
        (MatchResult::identity(hw), ForegroundMask::all_ones(h, w))
    };
    let latent = sampler::run_frame_pass(
        &model,
        &frame_prompt,
        cfg.seed,
        &cfg.sampler,
        cache,
        &match_result,
        &frame_mask,
    )?;

    let plan = crate::pta::build_gather_plan(
        &frame_mask,
        &cache.identity_mask,
        &match_result,
        cfg.sampler.keep_background,
    )?;
    let pta_ran = window_active && cfg.sampler.pta_enabled;
    let report = FrameReport {
        frame_index,
        mechanisms_active: window_active
            && (cfg.sampler.pta_enabled || cfg.sampler.merge_enabled),
        fg_fraction: frame_mask.fg_fraction(),
        mean_s_conf: match_result.mean_confidence(),
        appended_fg_keys: if pta_ran { plan.c_fg_frm.len() } else { 0 },
        appended_bg_keys: if pta_ran { plan.c_bg_id.len() } else { 0 },
        keep_background: cfg.sampler.keep_background,
        pta_enabled: cfg.sampler.pta_enabled,
        merge_enabled: cfg.sampler.merge_enabled,
        masking_enabled: cfg.sampler.masking_enabled,
    };

    let latent_cctf = cctf::dump_tensors(&[
        ("meta".into(), grid_meta(h, w)),
        ("latent".into(), DumpEntry::Tensor(latent)),
    ])?;
    let map_tensor = Tensor::new(
        vec![hw],
        match_result.map_star.iter().map(|&i| i as f32).collect(),
    )?;
    let s_tensor = Tensor::new(vec![hw], match_result.s_max.clone())?;
    let match_cctf = cctf::dump_tensors(&[
        ("meta".into(), grid_meta(h, w)),
        ("map_star".into(), DumpEntry::Tensor(map_tensor)),
        ("s_max".into(), DumpEntry::Tensor(s_tensor)),
    ])?;
    let mask_cctf = cctf::dump_tensors(&[("mask".into(), mask_entry(&frame_mask))])?;
    Ok(FrameArtifacts {
        latent_cctf,
        match_cctf,
        mask_cctf,
        report_csv: report.to_csv(),
        report,
    })
}

/// Bin one query row of a dumped attention matrix into rings; returns the
/// `(ring, sum)` table.
pub fn rings_op(
    dump_bytes: &[u8],
    entry_name: Option<&str>,
    query_index: usize,
    n_rings: usize,
    grid_override: Option<(usize, usize)>,
) -> Result<String> {
    let entries = cctf::load_tensors(dump_bytes)?;
    let name = entry_name.unwrap_or("attn_i2i");
    let weights = cctf::find(&entries, name)?
        .as_tensor()
        .ok_or_else(|| Error::Format(format!("entry {name:?} is not a tensor")))?;
    let (h, w) = match grid_override {
        Some(hw) => hw,
        None => {
            let meta = cctf::find(&entries, "meta")?
                .as_tensor()
                .ok_or_else(|| Error::Format("meta must be a tensor".into()))?;
            if meta.len() < 2 {
                return Err(Error::Format("meta must hold grid extents".into()));
            }
            (meta.data()[0] as usize, meta.data()[1] as usize)
        }
    };
    let hist = diagnostics::locality_rings(weights, h, w, query_index, n_rings)?;
    Ok(hist.to_csv())
}

/// Ground truth for the accuracy table; defaults to the self-matching case
/// (identity permutation, cache's identity mask).
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub map: Vec<usize>,
    pub mask_bits: Vec<u8>,
}

/// Probe at each requested step and score against ground truth; returns the
/// `(step, mse, iou)` table.
pub fn accuracy_op(
    cfg: &RunConfig,
    cache: &IdentityCache,
    frame_index: Option<usize>,
    steps: &[usize],
    ground_truth: Option<&GroundTruth>,
) -> Result<String> {
    cfg.validate()?;
    let model = build_model(&cfg.model)?;
    let prompt_text = match frame_index {
        Some(i) => cfg.frame_prompt(i)?,
        None => cfg.identity_prompt.as_str(),
    };
    let prompt = cfg.prompt_layout(prompt_text)?;
    let (h, w) = (cfg.model.grid_h, cfg.model.grid_w);
    let hw = h * w;
    let (gt_map, gt_mask) = match ground_truth {
        Some(gt) => {
            if gt.map.len() != hw {
                return Err(Error::input(
                    "accuracy",
                    format!("ground-truth map has {} entries for {hw} tokens", gt.map.len()),
                ));
            }
            (
                MatchResult {
                    map_star: gt.map.clone(),
                    s_max: vec![1.0; hw],
                },
                ForegroundMask::from_bits(h, w, gt.mask_bits.clone())?,
            )
        }
        None => (
            MatchResult::identity(hw),
            cache.identity_mask.clone(),
        ),
    };
    let extractions = sampler::probe_extract(&model, &prompt, cfg.seed, &cfg.sampler, cache, steps)?;
    let rows = diagnostics::accuracy_curve(
        &extractions,
        &gt_map,
        &gt_mask,
        cfg.sampler.n_steps,
        h,
        w,
    )?;
    Ok(diagnostics::accuracy_table_csv(&rows))
}
