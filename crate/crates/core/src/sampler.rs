//! Rectified-flow Euler sampling and the two-pass pipeline.
//!
//! The identity pass samples unmodified while recording position-free keys,
//! values, and attention outputs from every single block over the active
//! step window, and extracts the identity foreground mask at the extraction
//! step. A probe pass runs vanilla sampling up to the extraction step to
//! compute the frame's point matches and mask. The frame pass then samples
//! from step 1 with point-tracking attention and the token merge active
//! through the end of the window.
//!
//! Steps are 1-based throughout, matching "extract at step 11, apply through
//! step 40" exactly.

use crate::attn;
use crate::cctf::{self, DumpEntry};
use crate::correspond::{self, MatchResult};
use crate::error::{Error, Result};
use crate::maskex::{self, ForegroundMask};
use crate::model::{ActivationBundle, AttentionTap, Model, ModelConfig, PromptLayout};
use crate::pta::{self, ExtendedAttentionInputs, GatherPlan};
use crate::rng::SeededRng;
use crate::rope::GridCoord;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    /// Step whose activations feed point matching and mask extraction.
    pub extract_step: usize,
    /// Mechanisms stay active for steps in `[1, apply_until_step]`;
    /// 0 disables the window entirely.
    pub apply_until_step: usize,
    pub alpha_start: f64,
    pub keep_background: bool,
    pub pta_enabled: bool,
    pub merge_enabled: bool,
    pub masking_enabled: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_steps: 50,
            extract_step: 11,
            apply_until_step: 40,
            alpha_start: 0.8,
            keep_background: true,
            pta_enabled: true,
            merge_enabled: true,
            masking_enabled: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("sampler.n_steps must be positive".into()));
        }
        if self.extract_step == 0 || self.extract_step > self.n_steps {
            return Err(Error::Config(format!(
                "sampler.extract_step must be in [1, n_steps], got {}",
                self.extract_step
            )));
        }
        if self.apply_until_step > 0 {
            if self.extract_step > self.apply_until_step {
                return Err(Error::Config(format!(
                    "sampler.extract_step {} exceeds apply_until_step {}",
                    self.extract_step, self.apply_until_step
                )));
            }
            if self.apply_until_step > self.n_steps {
                return Err(Error::Config(format!(
                    "sampler.apply_until_step {} exceeds n_steps {}",
                    self.apply_until_step, self.n_steps
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha_start) {
            return Err(Error::Config(format!(
                "sampler.alpha_start must be in [0, 1], got {}",
                self.alpha_start
            )));
        }
        Ok(())
    }

    pub fn alpha_schedule(&self) -> AlphaSchedule {
        AlphaSchedule {
            alpha_start: self.alpha_start,
            apply_until_step: self.apply_until_step,
        }
    }
}

/// Merge coefficient schedule: starts at `alpha_start`, decays linearly, and
/// is 0 from `apply_until_step` onward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    pub alpha_start: f64,
    pub apply_until_step: usize,
}

pub fn alpha_at(step: usize, schedule: &AlphaSchedule) -> f64 {
    if step == 0 || step >= schedule.apply_until_step {
        return 0.0;
    }
    schedule.alpha_start * (schedule.apply_until_step - step) as f64
        / (schedule.apply_until_step - 1) as f64
}

/// Noise levels `sigma_0 = 1, ..., sigma_n = 0`, linear in the step index.
pub fn sigma_schedule(n_steps: usize) -> Vec<f64> {
    (0..=n_steps)
        .map(|i| 1.0 - i as f64 / n_steps as f64)
        .collect()
}

/// First-order Euler integration of a velocity field from noise (`sigma = 1`)
/// to data (`sigma = 0`). Returns the final state and the trajectory
/// (initial state plus one entry per step).
pub fn euler_core(
    x0: Tensor,
    n_steps: usize,
    mut eval: impl FnMut(&Tensor, f32, usize) -> Result<Tensor>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let sigmas = sigma_schedule(n_steps);
    let mut x = x0;
    let mut trajectory = vec![x.clone()];
    for step in 1..=n_steps {
        let t = sigmas[step - 1] as f32;
        let v = eval(&x, t, step)?;
        let dt = (sigmas[step] - sigmas[step - 1]) as f32;
        x = x.add(&v.scale(dt))?;
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: format!("latent at step {step}"),
            });
        }
        trajectory.push(x.clone());
    }
    Ok((x, trajectory))
}

/// Draw the initial latent for a seed.
pub fn initial_latent(model: &Model, seed: u64) -> Tensor {
    let cfg = model.config();
    let mut rng = SeededRng::new(seed);
    Tensor::matrix(
        cfg.img_tokens(),
        cfg.model_dim(),
        rng.normal_vec(cfg.img_tokens() * cfg.model_dim()),
    )
    .expect("extents agree")
}

/// Run the sampler for `run_steps` of the full `n_steps` schedule.
fn euler_partial(
    model: &Model,
    prompt: &PromptLayout,
    seed: u64,
    cfg: &SamplerConfig,
    run_steps: usize,
    mut tap: Option<&mut (dyn AttentionTap + '_)>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let sigmas = sigma_schedule(cfg.n_steps);
    let mut x = initial_latent(model, seed);
    let mut trajectory = vec![x.clone()];
    for step in 1..=run_steps {
        let t = sigmas[step - 1] as f32;
        let v = model.forward(&x, prompt, t, step, tap.as_deref_mut())?;
        let dt = (sigmas[step] - sigmas[step - 1]) as f32;
        x = x.add(&v.scale(dt))?;
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: format!("latent at step {step}"),
            });
        }
        trajectory.push(x.clone());
    }
    Ok((x, trajectory))
}

/// Full Euler sampling run; hooks (if any) see every single block at every
/// step.
pub fn euler_sample(
    model: &Model,
    prompt: &PromptLayout,
    seed: u64,
    cfg: &SamplerConfig,
    tap: Option<&mut (dyn AttentionTap + '_)>,
) -> Result<(Tensor, Vec<Tensor>)> {
    cfg.validate()?;
    euler_partial(model, prompt, seed, cfg, cfg.n_steps, tap)
}

/// Per-(step, layer) variables recorded during the identity pass, restricted
/// to image rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub k_no_pos: Tensor,
    pub v: Tensor,
    pub attn_out: Tensor,
}

/// Everything the frame passes read from the identity pass.
#[derive(Debug, Clone)]
pub struct IdentityCache {
    pub grid_h: usize,
    pub grid_w: usize,
    pub model_dim: usize,
    pub text_len: usize,
    pub n_single: usize,
    pub apply_until_step: usize,
    entries: Vec<Option<CacheEntry>>,
    pub identity_mask: ForegroundMask,
}

impl IdentityCache {
    pub fn empty(model_cfg: &ModelConfig, apply_until_step: usize) -> Self {
        IdentityCache {
            grid_h: model_cfg.grid_h,
            grid_w: model_cfg.grid_w,
            model_dim: model_cfg.model_dim(),
            text_len: model_cfg.text_len,
            n_single: model_cfg.n_single,
            apply_until_step,
            entries: vec![None; apply_until_step * model_cfg.n_single],
            identity_mask: ForegroundMask::all_zeros(model_cfg.grid_h, model_cfg.grid_w),
        }
    }

    fn slot(&self, step: usize, layer: usize) -> usize {
        (step - 1) * self.n_single + layer
    }

    pub fn insert(&mut self, step: usize, layer: usize, entry: CacheEntry) {
        let slot = self.slot(step, layer);
        self.entries[slot] = Some(entry);
    }

    /// Entry for a 1-based step and a single-block layer index.
    pub fn entry(&self, step: usize, layer: usize) -> Result<&CacheEntry> {
        if step == 0 || step > self.apply_until_step || layer >= self.n_single {
            return Err(Error::Ordering(format!(
                "no cache slot for step {step}, layer {layer} (window [1, {}], {} layers)",
                self.apply_until_step, self.n_single
            )));
        }
        self.entries[self.slot(step, layer)]
            .as_ref()
            .ok_or_else(|| {
                Error::Ordering(format!("cache empty at step {step}, layer {layer}"))
            })
    }

    pub fn populated_entries(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    /// Identity attention outputs per layer at one step.
    pub fn attn_outs_at(&self, step: usize) -> Result<Vec<Tensor>> {
        (0..self.n_single)
            .map(|l| Ok(self.entry(step, l)?.attn_out.clone()))
            .collect()
    }

    /// Check the cache fits the configs a frame pass will run under; the
    /// error names the mismatching extent.
    pub fn validate_against(&self, model_cfg: &ModelConfig, cfg: &SamplerConfig) -> Result<()> {
        let checks = [
            ("grid_h", self.grid_h, model_cfg.grid_h),
            ("grid_w", self.grid_w, model_cfg.grid_w),
            ("model_dim", self.model_dim, model_cfg.model_dim()),
            ("text_len", self.text_len, model_cfg.text_len),
            ("n_single", self.n_single, model_cfg.n_single),
            (
                "apply_until_step",
                self.apply_until_step,
                cfg.apply_until_step,
            ),
        ];
        for (name, cached, wanted) in checks {
            if cached != wanted {
                return Err(Error::Config(format!(
                    "cache/config mismatch on {name}: cache has {cached}, config wants {wanted}"
                )));
            }
        }
        Ok(())
    }

    /// Serialize to named CCTF entries.
    pub fn to_dump_entries(&self) -> Vec<(String, DumpEntry)> {
        let meta = Tensor::new(
            vec![6],
            vec![
                self.grid_h as f32,
                self.grid_w as f32,
                self.model_dim as f32,
                self.text_len as f32,
                self.n_single as f32,
                self.apply_until_step as f32,
            ],
        )
        .expect("extents agree");
        let mut out = vec![
            ("meta".to_string(), DumpEntry::Tensor(meta)),
            (
                "identity_mask".to_string(),
                DumpEntry::MaskGrid {
                    h: self.identity_mask.h(),
                    w: self.identity_mask.w(),
                    bits: self.identity_mask.bits().to_vec(),
                },
            ),
        ];
        for step in 1..=self.apply_until_step {
            for layer in 0..self.n_single {
                if let Some(entry) = &self.entries[self.slot(step, layer)] {
                    for (tag, t) in [
                        ("k0", &entry.k_no_pos),
                        ("v", &entry.v),
                        ("h", &entry.attn_out),
                    ] {
                        out.push((
                            format!("{tag}/s{step:03}/l{layer:02}"),
                            DumpEntry::Tensor(t.clone()),
                        ));
                    }
                }
            }
        }
        out
    }

    pub fn from_dump_entries(entries: &[(String, DumpEntry)]) -> Result<Self> {
        let meta = cctf::find(entries, "meta")?
            .as_tensor()
            .ok_or_else(|| Error::Format("meta must be a tensor".into()))?;
        if meta.len() != 6 {
            return Err(Error::Format(format!(
                "meta must hold 6 values, got {}",
                meta.len()
            )));
        }
        let m: Vec<usize> = meta.data().iter().map(|&v| v as usize).collect();
        let (grid_h, grid_w, model_dim, text_len, n_single, apply_until_step) =
            (m[0], m[1], m[2], m[3], m[4], m[5]);
        let identity_mask = cctf::find(entries, "identity_mask")?
            .as_mask()
            .ok_or_else(|| Error::Format("identity_mask must be a mask grid".into()))?;
        let mut cache = IdentityCache {
            grid_h,
            grid_w,
            model_dim,
            text_len,
            n_single,
            apply_until_step,
            entries: vec![None; apply_until_step * n_single],
            identity_mask,
        };
        let hw = grid_h * grid_w;
        for step in 1..=apply_until_step {
            for layer in 0..n_single {
                let mut parts = Vec::with_capacity(3);
                for tag in ["k0", "v", "h"] {
                    let name = format!("{tag}/s{step:03}/l{layer:02}");
                    let t = cctf::find(entries, &name)?
                        .as_tensor()
                        .ok_or_else(|| Error::Format(format!("{name} must be a tensor")))?;
                    if t.shape() != [hw, model_dim] {
                        return Err(Error::Format(format!(
                            "{name}: shape {:?}, expected [{hw}, {model_dim}]",
                            t.shape()
                        )));
                    }
                    parts.push(t.clone());
                }
                let attn_out = parts.pop().expect("three parts");
                let v = parts.pop().expect("two parts");
                let k_no_pos = parts.pop().expect("one part");
                cache.insert(
                    step,
                    layer,
                    CacheEntry {
                        k_no_pos,
                        v,
                        attn_out,
                    },
                );
            }
        }
        Ok(cache)
    }

    pub fn to_cctf_bytes(&self) -> Result<Vec<u8>> {
        cctf::dump_tensors(&self.to_dump_entries())
    }

    pub fn from_cctf_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_dump_entries(&cctf::load_tensors(bytes)?)
    }
}

/// Identity-pass observer: fills the cache and keeps the q/k pairs of the
/// extraction step for mask extraction and diagnostics.
struct CacheRecorder {
    cache: IdentityCache,
    extract_step: usize,
    extract_qk: Vec<(Tensor, Tensor)>,
}

impl AttentionTap for CacheRecorder {
    fn observe(&mut self, step: usize, bundle: &ActivationBundle) -> Result<()> {
        if step >= 1 && step <= self.cache.apply_until_step {
            self.cache.insert(
                step,
                bundle.layer_index,
                CacheEntry {
                    k_no_pos: bundle.img_rows(&bundle.k_no_pos),
                    v: bundle.img_rows(&bundle.v),
                    attn_out: bundle.img_rows(&bundle.attn_out),
                },
            );
        }
        if step == self.extract_step {
            self.extract_qk
                .push((bundle.q.clone(), bundle.k_with_pos.clone()));
        }
        Ok(())
    }
}

/// Image-to-text logit slices (one per layer per head), full text width.
fn image_to_text_slices(
    qk_pairs: &[(Tensor, Tensor)],
    text_len: usize,
    n_heads: usize,
) -> Result<Vec<Tensor>> {
    let mut slices = Vec::with_capacity(qk_pairs.len() * n_heads);
    for (q, k) in qk_pairs {
        for logits in attn::attention_logits_per_head(q, k, n_heads)? {
            slices.push(
                logits
                    .slice_rows(text_len, logits.rows())
                    .slice_cols(0, text_len),
            );
        }
    }
    Ok(slices)
}

/// Image-to-image attention probabilities averaged over layers and heads.
fn mean_image_attention(
    qk_pairs: &[(Tensor, Tensor)],
    text_len: usize,
    n_heads: usize,
) -> Result<Tensor> {
    let mut acc: Option<Vec<f64>> = None;
    let mut hw = 0;
    for (q, k) in qk_pairs {
        for p in attn::attention_probs_per_head(q, k, n_heads, None)? {
            let img = p.slice_rows(text_len, p.rows()).slice_cols(text_len, p.cols());
            hw = img.rows();
            let acc = acc.get_or_insert_with(|| vec![0.0; img.len()]);
            for (a, &v) in acc.iter_mut().zip(img.data()) {
                *a += v as f64;
            }
        }
    }
    let acc = acc.ok_or_else(|| Error::input("mean-image-attention", "no layers"))?;
    let n = (qk_pairs.len() * n_heads) as f64;
    Tensor::matrix(hw, hw, acc.iter().map(|&v| (v / n) as f32).collect())
}

fn extract_mask_from_qk(
    qk_pairs: &[(Tensor, Tensor)],
    prompt: &PromptLayout,
    model_cfg: &ModelConfig,
    masking_enabled: bool,
) -> Result<ForegroundMask> {
    if !masking_enabled {
        return Ok(ForegroundMask::all_ones(model_cfg.grid_h, model_cfg.grid_w));
    }
    let slices = image_to_text_slices(qk_pairs, model_cfg.text_len, model_cfg.n_heads)?;
    let raw = maskex::extract_raw_mask(
        &slices,
        prompt.l_bg,
        prompt.l_fg,
        model_cfg.grid_h,
        model_cfg.grid_w,
    )?;
    Ok(maskex::morph_refine(&raw))
}

/// Identity-pass products: the final latent, the populated cache, and the
/// layer/head-averaged image-to-image attention at the extraction step.
#[derive(Debug, Clone)]
pub struct IdentityPassOutput {
    pub latent: Tensor,
    pub cache: IdentityCache,
    pub attn_i2i: Tensor,
}

/// Generate the identity image: unmodified sampling plus observation.
pub fn run_identity_pass(
    model: &Model,
    prompt: &PromptLayout,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<IdentityPassOutput> {
    cfg.validate()?;
    let model_cfg = model.config();
    let mut recorder = CacheRecorder {
        cache: IdentityCache::empty(model_cfg, cfg.apply_until_step),
        extract_step: cfg.extract_step,
        extract_qk: Vec::with_capacity(model_cfg.n_single),
    };
    let (latent, _) = euler_sample(model, prompt, seed, cfg, Some(&mut recorder))?;
    let mask = extract_mask_from_qk(&recorder.extract_qk, prompt, model_cfg, cfg.masking_enabled)?;
    let attn_i2i =
        mean_image_attention(&recorder.extract_qk, model_cfg.text_len, model_cfg.n_heads)?;
    let mut cache = recorder.cache;
    cache.identity_mask = mask;
    Ok(IdentityPassOutput {
        latent,
        cache,
        attn_i2i,
    })
}

/// Probe observer: keeps q/k pairs and image attention outputs at the
/// requested steps.
struct ProbeRecorder {
    wanted: Vec<usize>,
    // per wanted step: per layer
    qk: Vec<Vec<(Tensor, Tensor)>>,
    attn_outs: Vec<Vec<Tensor>>,
}

impl AttentionTap for ProbeRecorder {
    fn observe(&mut self, step: usize, bundle: &ActivationBundle) -> Result<()> {
        if let Some(pos) = self.wanted.iter().position(|&s| s == step) {
            self.qk[pos].push((bundle.q.clone(), bundle.k_with_pos.clone()));
            self.attn_outs[pos].push(bundle.img_rows(&bundle.attn_out));
        }
        Ok(())
    }
}

/// Point matches and the refined frame mask observed at one step.
#[derive(Debug, Clone)]
pub struct StepExtraction {
    pub step: usize,
    pub match_result: MatchResult,
    pub frame_mask: ForegroundMask,
}

/// Vanilla sampling up to `max(steps)`, extracting matches and masks at each
/// requested step against the identity cache.
pub fn probe_extract(
    model: &Model,
    frame_prompt: &PromptLayout,
    seed: u64,
    cfg: &SamplerConfig,
    cache: &IdentityCache,
    steps: &[usize],
) -> Result<Vec<StepExtraction>> {
    cfg.validate()?;
    cache.validate_against(model.config(), cfg)?;
    if steps.is_empty() {
        return Err(Error::input("probe", "no extraction steps requested"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &s in steps {
        if s == 0 || s > cfg.n_steps {
            return Err(Error::input(
                "probe",
                format!("step {s} outside [1, {}]", cfg.n_steps),
            ));
        }
        if !seen.insert(s) {
            return Err(Error::input("probe", format!("step {s} requested twice")));
        }
        // fail before sampling if the cache cannot serve this step
        for layer in 0..cache.n_single {
            cache.entry(s, layer)?;
        }
    }
    let max_step = *steps.iter().max().expect("non-empty");
    let mut recorder = ProbeRecorder {
        wanted: steps.to_vec(),
        qk: vec![Vec::new(); steps.len()],
        attn_outs: vec![Vec::new(); steps.len()],
    };
    euler_partial(model, frame_prompt, seed, cfg, max_step, Some(&mut recorder))?;
    let model_cfg = model.config();
    let mut out = Vec::with_capacity(steps.len());
    for (pos, &step) in steps.iter().enumerate() {
        let identity_outs = cache.attn_outs_at(step)?;
        let match_result = correspond::match_points(&recorder.attn_outs[pos], &identity_outs)?;
        let frame_mask = extract_mask_from_qk(
            &recorder.qk[pos],
            frame_prompt,
            model_cfg,
            cfg.masking_enabled,
        )?;
        out.push(StepExtraction {
            step,
            match_result,
            frame_mask,
        });
    }
    Ok(out)
}

/// The probe pass: vanilla sampling through the extraction step only.
pub fn run_probe_pass(
    model: &Model,
    frame_prompt: &PromptLayout,
    seed: u64,
    cfg: &SamplerConfig,
    cache: &IdentityCache,
) -> Result<(MatchResult, ForegroundMask)> {
    let mut extractions = probe_extract(model, frame_prompt, seed, cfg, cache, &[cfg.extract_step])?;
    let e = extractions.pop().expect("one extraction");
    Ok((e.match_result, e.frame_mask))
}

/// Frame-pass hook: replaces single-block image attention with the
/// point-tracking variant and merges outputs toward the identity's.
struct FrameTap<'a> {
    cache: &'a IdentityCache,
    cfg: &'a SamplerConfig,
    schedule: AlphaSchedule,
    n_heads: usize,
    rope: crate::rope::RopeConfig,
    plan: GatherPlan,
    extended_mask: Option<Tensor>,
    fg_target_coords: Vec<GridCoord>,
    bg_coords: Vec<GridCoord>,
}

impl AttentionTap for FrameTap<'_> {
    fn replace_image_attn(
        &mut self,
        step: usize,
        bundle: &ActivationBundle,
    ) -> Result<Option<Tensor>> {
        if step == 0 || step > self.cfg.apply_until_step {
            return Ok(None);
        }
        let alpha = alpha_at(step, &self.schedule) as f32;
        let pta_active = self.cfg.pta_enabled && !self.plan.is_empty();
        let merge_active =
            self.cfg.merge_enabled && alpha > 0.0 && !self.plan.c_fg_frm.is_empty();
        if !pta_active && !merge_active {
            return Ok(None);
        }
        let entry = self.cache.entry(step, bundle.layer_index)?;
        let mut h_img = if pta_active {
            let k_fg = pta::reencode_identity_keys(
                &entry.k_no_pos.gather_rows(&self.plan.c_fg_id)?,
                &self.fg_target_coords,
                self.n_heads,
                &self.rope,
                self.cache.grid_h,
                self.cache.grid_w,
            )?;
            let v_fg = entry.v.gather_rows(&self.plan.c_fg_id)?;
            let mut k_parts = vec![&bundle.k_with_pos, &k_fg];
            let mut v_parts = vec![&bundle.v, &v_fg];
            // background keys keep their original coordinates
            let (k_bg, v_bg);
            if !self.plan.c_bg_id.is_empty() {
                k_bg = pta::reencode_identity_keys(
                    &entry.k_no_pos.gather_rows(&self.plan.c_bg_id)?,
                    &self.bg_coords,
                    self.n_heads,
                    &self.rope,
                    self.cache.grid_h,
                    self.cache.grid_w,
                )?;
                v_bg = entry.v.gather_rows(&self.plan.c_bg_id)?;
                k_parts.push(&k_bg);
                v_parts.push(&v_bg);
            }
            let inputs = ExtendedAttentionInputs {
                q: bundle.q.clone(),
                k_ext: Tensor::concat_rows(&k_parts)?,
                v_ext: Tensor::concat_rows(&v_parts)?,
                additive_mask: self
                    .extended_mask
                    .clone()
                    .expect("mask precomputed when pta is active"),
                n_heads: self.n_heads,
                n_native: bundle.k_with_pos.rows(),
            };
            let h_star = pta::point_tracking_attention(&inputs)?;
            bundle.img_rows(&h_star)
        } else {
            bundle.img_rows(&bundle.attn_out)
        };
        if merge_active {
            let h_id = entry.attn_out.gather_rows(&self.plan.c_fg_id)?;
            let h_fg = h_img.gather_rows(&self.plan.c_fg_frm)?;
            let merged = pta::adaptive_merge(&h_fg, &h_id, &self.plan.s_conf, alpha)?;
            for (i, &token) in self.plan.c_fg_frm.iter().enumerate() {
                h_img.row_mut(token).copy_from_slice(merged.row(i));
            }
        }
        Ok(Some(h_img))
    }
}

/// Generate one frame: full sampling with point-tracking attention and the
/// adaptive merge active for steps in `[1, apply_until_step]`.
pub fn run_frame_pass(
    model: &Model,
    frame_prompt: &PromptLayout,
    seed: u64,
    cfg: &SamplerConfig,
    cache: &IdentityCache,
    match_result: &MatchResult,
    frame_mask: &ForegroundMask,
) -> Result<Tensor> {
    cfg.validate()?;
    let model_cfg = model.config();
    cache.validate_against(model_cfg, cfg)?;
    if frame_mask.h() != model_cfg.grid_h || frame_mask.w() != model_cfg.grid_w {
        return Err(Error::Config(format!(
            "cache/config mismatch on mask grid: {}x{} vs {}x{}",
            frame_mask.h(),
            frame_mask.w(),
            model_cfg.grid_h,
            model_cfg.grid_w
        )));
    }
    let plan = pta::build_gather_plan(
        frame_mask,
        &cache.identity_mask,
        match_result,
        cfg.keep_background,
    )?;
    let extended_mask = if cfg.pta_enabled && !plan.is_empty() {
        Some(pta::build_attention_mask(
            &plan,
            frame_mask,
            model_cfg.text_len,
        )?)
    } else {
        None
    };
    let fg_target_coords: Vec<GridCoord> = plan
        .c_fg_frm
        .iter()
        .map(|&i| GridCoord::from_index(i, model_cfg.grid_w))
        .collect();
    let bg_coords: Vec<GridCoord> = plan
        .c_bg_id
        .iter()
        .map(|&i| GridCoord::from_index(i, model_cfg.grid_w))
        .collect();
    let mut tap = FrameTap {
        cache,
        cfg,
        schedule: cfg.alpha_schedule(),
        n_heads: model_cfg.n_heads,
        rope: model_cfg.rope_config()?,
        plan,
        extended_mask,
        fg_target_coords,
        bg_coords,
    };
    let (latent, _) = euler_sample(model, frame_prompt, seed, cfg, Some(&mut tap))?;
    Ok(latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, embed_prompt, EvalCounter};

    fn toy_model_cfg() -> ModelConfig {
        ModelConfig {
            text_len: 8,
            grid_h: 4,
            grid_w: 4,
            head_dim: 8,
            n_heads: 2,
            n_double: 1,
            n_single: 2,
            weight_seed: 3,
            rope_base: 10000.0,
        }
    }

    fn toy_sampler_cfg() -> SamplerConfig {
        SamplerConfig {
            n_steps: 12,
            extract_step: 4,
            apply_until_step: 9,
            ..SamplerConfig::default()
        }
    }

    fn toy_setup() -> (Model, PromptLayout, SamplerConfig) {
        let mc = toy_model_cfg();
        let model = build_model(&mc).unwrap();
        let prompt = embed_prompt("a sunny gym | a tall man | lifting weights", &mc).unwrap();
        (model, prompt, toy_sampler_cfg())
    }

    #[test]
    fn alpha_schedule_shape() {
        let s = AlphaSchedule {
            alpha_start: 0.8,
            apply_until_step: 40,
        };
        assert_eq!(alpha_at(1, &s), 0.8);
        assert!((alpha_at(20, &s) - 0.8 * 20.0 / 39.0).abs() < 1e-12);
        assert_eq!(alpha_at(40, &s), 0.0);
        assert_eq!(alpha_at(41, &s), 0.0);
        assert_eq!(alpha_at(500, &s), 0.0);
        // non-increasing over the window
        let mut last = f64::INFINITY;
        for t in 1..=45 {
            let a = alpha_at(t, &s);
            assert!(a <= last);
            last = a;
        }
    }

    #[test]
    fn alpha_midpoint_is_half() {
        // apply_until 41 puts the midpoint of [1, 41] at t = 21
        let s = AlphaSchedule {
            alpha_start: 0.8,
            apply_until_step: 41,
        };
        assert!((alpha_at(21, &s) - 0.4).abs() < 1e-9);
    }

    #[test]
    fn euler_runs_exactly_n_steps() {
        let (model, prompt, cfg) = toy_setup();
        let mut counter = EvalCounter::default();
        let (_, traj) = euler_sample(&model, &prompt, 1, &cfg, Some(&mut counter)).unwrap();
        assert_eq!(traj.len(), cfg.n_steps + 1);
        assert_eq!(counter.bundles_seen, cfg.n_steps * model.config().n_single);
    }

    #[test]
    fn euler_is_deterministic() {
        let (model, prompt, cfg) = toy_setup();
        let (a, _) = euler_sample(&model, &prompt, 5, &cfg, None).unwrap();
        let (b, _) = euler_sample(&model, &prompt, 5, &cfg, None).unwrap();
        assert!(a.bits_eq(&b));
        let (c, _) = euler_sample(&model, &prompt, 6, &cfg, None).unwrap();
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn constant_velocity_telescopes() {
        // with v = c everywhere, the final state is x0 - c because the sigma
        // deltas sum to -1
        let x0 = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25]).unwrap();
        let (fin, traj) = euler_core(x0.clone(), 50, |_, _, _| Ok(c.clone())).unwrap();
        assert_eq!(traj.len(), 51);
        let expect = x0.add(&c.scale(-1.0)).unwrap();
        assert!(fin.max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn non_finite_velocity_names_the_step() {
        let x0 = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let err = euler_core(x0, 10, |_, _, step| {
            Ok(Tensor::matrix(1, 2, vec![if step == 3 { f32::INFINITY } else { 0.0 }, 0.0])
                .unwrap())
        })
        .unwrap_err();
        assert!(err.to_string().contains("step 3"), "{err}");
    }

    #[test]
    fn identity_pass_is_observation_only() {
        let (model, prompt, cfg) = toy_setup();
        let (plain, _) = euler_sample(&model, &prompt, 9, &cfg, None).unwrap();
        let out = run_identity_pass(&model, &prompt, 9, &cfg).unwrap();
        assert!(out.latent.bits_eq(&plain));
    }

    #[test]
    fn identity_cache_is_fully_populated() {
        let (model, prompt, cfg) = toy_setup();
        let out = run_identity_pass(&model, &prompt, 2, &cfg).unwrap();
        assert_eq!(
            out.cache.populated_entries(),
            cfg.apply_until_step * model.config().n_single
        );
        assert!(out.cache.entry(1, 0).is_ok());
        assert!(out.cache.entry(cfg.apply_until_step, 1).is_ok());
        assert!(out.cache.entry(cfg.apply_until_step + 1, 0).is_err());
    }

    struct SecondObserver {
        wanted_step: usize,
        wanted_layer: usize,
        seen: Option<CacheEntry>,
    }

    impl AttentionTap for SecondObserver {
        fn observe(&mut self, step: usize, bundle: &ActivationBundle) -> Result<()> {
            if step == self.wanted_step && bundle.layer_index == self.wanted_layer {
                self.seen = Some(CacheEntry {
                    k_no_pos: bundle.img_rows(&bundle.k_no_pos),
                    v: bundle.img_rows(&bundle.v),
                    attn_out: bundle.img_rows(&bundle.attn_out),
                });
            }
            Ok(())
        }
    }

    #[test]
    fn cache_matches_independent_observer() {
        let (model, prompt, cfg) = toy_setup();
        let out = run_identity_pass(&model, &prompt, 4, &cfg).unwrap();
        let mut second = SecondObserver {
            wanted_step: 3,
            wanted_layer: 1,
            seen: None,
        };
        euler_sample(&model, &prompt, 4, &cfg, Some(&mut second)).unwrap();
        let seen = second.seen.expect("observer fired");
        let cached = out.cache.entry(3, 1).unwrap();
        assert!(cached.k_no_pos.bits_eq(&seen.k_no_pos));
        assert!(cached.v.bits_eq(&seen.v));
        assert!(cached.attn_out.bits_eq(&seen.attn_out));
    }

    #[test]
    fn probe_runs_exactly_extract_step_evaluations() {
        let (model, prompt, cfg) = toy_setup();
        let identity = run_identity_pass(&model, &prompt, 7, &cfg).unwrap();
        // instrumented replica of the probe's sampling span
        let mut counter = EvalCounter::default();
        euler_partial(&model, &prompt, 7, &cfg, cfg.extract_step, Some(&mut counter)).unwrap();
        assert_eq!(
            counter.bundles_seen,
            cfg.extract_step * model.config().n_single
        );
        // and the probe itself works against the cache
        let (m, _) = run_probe_pass(&model, &prompt, 7, &cfg, &identity.cache).unwrap();
        assert_eq!(m.len(), model.config().img_tokens());
    }

    #[test]
    fn probe_self_match_is_identity() {
        let (model, prompt, cfg) = toy_setup();
        let identity = run_identity_pass(&model, &prompt, 11, &cfg).unwrap();
        let (m, mask) = run_probe_pass(&model, &prompt, 11, &cfg, &identity.cache).unwrap();
        let n = model.config().img_tokens();
        assert_eq!(m.map_star, (0..n).collect::<Vec<_>>());
        for &s in &m.s_max {
            assert!(s > 0.999, "similarity {s}");
        }
        // same trajectory, same logits, same mask
        assert_eq!(mask.bits(), identity.cache.identity_mask.bits());
    }

    #[test]
    fn probe_with_masking_disabled_returns_all_ones() {
        let (model, prompt, mut cfg) = toy_setup();
        cfg.masking_enabled = false;
        let identity = run_identity_pass(&model, &prompt, 11, &cfg).unwrap();
        let (_, mask) = run_probe_pass(&model, &prompt, 11, &cfg, &identity.cache).unwrap();
        assert_eq!(mask.fg_indices().len(), model.config().img_tokens());
        assert_eq!(
            identity.cache.identity_mask.fg_indices().len(),
            model.config().img_tokens()
        );
    }

    #[test]
    fn probe_rejects_empty_cache() {
        let (model, prompt, cfg) = toy_setup();
        let empty = IdentityCache::empty(model.config(), cfg.apply_until_step);
        let err = run_probe_pass(&model, &prompt, 1, &cfg, &empty).unwrap_err();
        assert!(matches!(err, Error::Ordering(_)), "{err}");
    }

    #[test]
    fn frame_pass_with_all_mechanisms_off_is_plain_sampling() {
        let (model, prompt, mut cfg) = toy_setup();
        let identity = run_identity_pass(&model, &prompt, 13, &cfg).unwrap();
        let (m, mask) = run_probe_pass(&model, &prompt, 13, &cfg, &identity.cache).unwrap();
        cfg.pta_enabled = false;
        cfg.merge_enabled = false;
        cfg.masking_enabled = false;
        let frame =
            run_frame_pass(&model, &prompt, 13, &cfg, &identity.cache, &m, &mask).unwrap();
        let (plain, _) = euler_sample(&model, &prompt, 13, &cfg, None).unwrap();
        assert!(frame.bits_eq(&plain));
    }

    #[test]
    fn frame_pass_with_empty_window_is_plain_sampling() {
        let (model, prompt, mut cfg) = toy_setup();
        cfg.apply_until_step = 0;
        let model_cfg = model.config();
        let empty = IdentityCache::empty(model_cfg, 0);
        let hw = model_cfg.img_tokens();
        let frame = run_frame_pass(
            &model,
            &prompt,
            17,
            &cfg,
            &empty,
            &MatchResult::identity(hw),
            &ForegroundMask::all_ones(model_cfg.grid_h, model_cfg.grid_w),
        )
        .unwrap();
        let (plain, _) = euler_sample(&model, &prompt, 17, &cfg, None).unwrap();
        assert!(frame.bits_eq(&plain));
    }

    #[test]
    fn frame_pass_self_consistency_perturbs_only_softmax_mass() {
        // identical prompt and seed with an identity-permutation match: the
        // injected keys/values duplicate the frame's own, perturbing only
        // softmax mass, so the frame drifts from plain sampling but stays
        // well inside the latent's own scale
        let (model, prompt, mut cfg) = toy_setup();
        cfg.merge_enabled = false;
        cfg.keep_background = false;
        cfg.masking_enabled = false; // all tokens foreground: every key duplicated
        let identity = run_identity_pass(&model, &prompt, 19, &cfg).unwrap();
        let (m, mask) = run_probe_pass(&model, &prompt, 19, &cfg, &identity.cache).unwrap();
        assert_eq!(m.map_star, (0..model.config().img_tokens()).collect::<Vec<_>>());
        let frame =
            run_frame_pass(&model, &prompt, 19, &cfg, &identity.cache, &m, &mask).unwrap();
        let (plain, _) = euler_sample(&model, &prompt, 19, &cfg, None).unwrap();
        let zero = Tensor::zeros(plain.shape().to_vec());
        let signal = plain.rms_diff(&zero);
        let rms = frame.rms_diff(&plain);
        assert!(rms > 0.0, "duplicated keys must still shift softmax mass");
        assert!(rms < 0.5 * signal, "rms {rms} vs latent scale {signal}");
    }

    #[test]
    fn frame_pass_differs_when_prompts_differ() {
        let (model, prompt, cfg) = toy_setup();
        let mc = model.config().clone();
        let frame_prompt =
            embed_prompt("a sunny gym | a tall man | stretching outside", &mc).unwrap();
        let identity = run_identity_pass(&model, &prompt, 23, &cfg).unwrap();
        let (m, mask) = run_probe_pass(&model, &frame_prompt, 23, &cfg, &identity.cache).unwrap();
        let frame =
            run_frame_pass(&model, &frame_prompt, 23, &cfg, &identity.cache, &m, &mask).unwrap();
        let (plain, _) = euler_sample(&model, &frame_prompt, 23, &cfg, None).unwrap();
        assert!(!frame.bits_eq(&plain));
        assert!(frame.is_finite());
    }

    #[test]
    fn frame_pass_detects_cache_mismatch() {
        let (model, prompt, cfg) = toy_setup();
        let identity = run_identity_pass(&model, &prompt, 29, &cfg).unwrap();
        let mut other_cfg = toy_model_cfg();
        other_cfg.grid_h = 5;
        other_cfg.grid_w = 5;
        let other_model = build_model(&other_cfg).unwrap();
        let other_prompt = embed_prompt("a | b", &other_cfg).unwrap();
        let hw = other_cfg.img_tokens();
        let err = run_frame_pass(
            &other_model,
            &other_prompt,
            29,
            &cfg,
            &identity.cache,
            &MatchResult::identity(hw),
            &ForegroundMask::all_ones(5, 5),
        )
        .unwrap_err();
        assert!(err.to_string().contains("grid_h"), "{err}");
    }

    #[test]
    fn cache_round_trips_through_cctf() {
        let (model, prompt, cfg) = toy_setup();
        let identity = run_identity_pass(&model, &prompt, 31, &cfg).unwrap();
        let bytes = identity.cache.to_cctf_bytes().unwrap();
        let restored = IdentityCache::from_cctf_bytes(&bytes).unwrap();
        assert_eq!(
            restored.populated_entries(),
            identity.cache.populated_entries()
        );
        assert_eq!(restored.identity_mask.bits(), identity.cache.identity_mask.bits());

        let (m, mask) = run_probe_pass(&model, &prompt, 31, &cfg, &identity.cache).unwrap();
        let a = run_frame_pass(&model, &prompt, 31, &cfg, &identity.cache, &m, &mask).unwrap();
        let b = run_frame_pass(&model, &prompt, 31, &cfg, &restored, &m, &mask).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn passes_stay_finite_across_seeds() {
        let (model, prompt, cfg) = toy_setup();
        for seed in 0..20 {
            let identity = run_identity_pass(&model, &prompt, seed, &cfg).unwrap();
            assert!(identity.latent.is_finite());
            let (m, mask) = run_probe_pass(&model, &prompt, seed, &cfg, &identity.cache).unwrap();
            let frame =
                run_frame_pass(&model, &prompt, seed, &cfg, &identity.cache, &m, &mask).unwrap();
            assert!(frame.is_finite());
        }
    }

    #[test]
    fn sampler_config_validation() {
        let mut cfg = SamplerConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.extract_step = 45;
        assert!(cfg.validate().is_err()); // beyond apply window
        cfg.extract_step = 11;
        cfg.apply_until_step = 60;
        assert!(cfg.validate().is_err());
        cfg.apply_until_step = 0; // empty window is allowed
        assert!(cfg.validate().is_ok());
        cfg.alpha_start = 1.5;
        assert!(cfg.validate().is_err());
    }
}
