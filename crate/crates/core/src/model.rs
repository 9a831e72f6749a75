//! Miniature multimodal transformer: text and image tokens in one sequence,
//! double blocks (separate text/image projections) followed by single blocks
//! (shared projections). Single blocks expose hooks so callers can observe
//! activations or substitute the image-token attention output.
//!
//! Weights are drawn from a seeded stream and never trained; the model exists
//! to exercise the attention machinery, not to make pictures.

use crate::attn;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::rope::{GridCoord, RopeConfig};
use crate::tensor::{self, Tensor};
use serde::{Deserialize, Serialize};

const VOCAB_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Text token count `l`.
    pub text_len: usize,
    /// Image token grid extents.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Per-head dimension.
    pub head_dim: usize,
    pub n_heads: usize,
    pub n_double: usize,
    pub n_single: usize,
    pub weight_seed: u64,
    pub rope_base: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text_len: 16,
            grid_h: 8,
            grid_w: 8,
            head_dim: 32,
            n_heads: 2,
            n_double: 2,
            n_single: 4,
            weight_seed: 7,
            rope_base: 10000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.text_len", self.text_len),
            ("model.grid_h", self.grid_h),
            ("model.grid_w", self.grid_w),
            ("model.head_dim", self.head_dim),
            ("model.n_heads", self.n_heads),
            ("model.n_double", self.n_double),
            ("model.n_single", self.n_single),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.rope_config()?.validate()
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn img_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn seq_len(&self) -> usize {
        self.text_len + self.img_tokens()
    }

    pub fn rope_config(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.head_dim, self.rope_base)
    }

    /// Grid coordinates of the image tokens in sequence order.
    pub fn grid_coords(&self) -> Vec<GridCoord> {
        (0..self.img_tokens())
            .map(|i| GridCoord::from_index(i, self.grid_w))
            .collect()
    }
}

/// Token layout of a `background | foreground [| action]` prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub l_bg: usize,
    pub l_fg: usize,
    pub token_ids: Vec<u16>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

fn word_token(word: &str) -> u16 {
    // id 0 is reserved for padding
    1 + (fnv1a64(word.as_bytes()) % (VOCAB_SIZE as u64 - 1)) as u16
}

/// Hash a prompt into token ids. Segments are separated by `|`: background
/// first, then foreground, then an optional action. Background and foreground
/// word counts become `l_bg` / `l_fg`, clamped so `l_bg + l_fg <= l`.
pub fn embed_prompt(prompt: &str, cfg: &ModelConfig) -> Result<PromptLayout> {
    let segments: Vec<&str> = prompt.split('|').map(str::trim).collect();
    if segments.len() < 2 || segments.len() > 3 {
        return Err(Error::Prompt(format!(
            "expected 2 or 3 '|'-separated segments (background | foreground [| action]), got {}",
            segments.len()
        )));
    }
    let words_of = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_owned).collect() };
    let bg = words_of(segments[0]);
    let fg = words_of(segments[1]);
    let action = segments.get(2).map(|s| words_of(s)).unwrap_or_default();

    let l = cfg.text_len;
    let l_bg = bg.len().min(l);
    let l_fg = fg.len().min(l - l_bg);

    let mut token_ids: Vec<u16> = bg
        .iter()
        .chain(fg.iter())
        .chain(action.iter())
        .map(|w| word_token(w))
        .take(l)
        .collect();
    token_ids.resize(l, 0);
    Ok(PromptLayout {
        l_bg,
        l_fg,
        token_ids,
    })
}

/// Per-single-block activations handed to hooks. The first `text_len` rows of
/// each tensor are text tokens; the rest are image tokens in row-major grid
/// order. `k_no_pos` is the key tensor before the rotary rotation.
#[derive(Debug, Clone)]
pub struct ActivationBundle {
    pub layer_index: usize,
    pub q: Tensor,
    pub k_with_pos: Tensor,
    pub k_no_pos: Tensor,
    pub v: Tensor,
    pub attn_out: Tensor,
    pub text_len: usize,
}

impl ActivationBundle {
    pub fn img_rows(&self, t: &Tensor) -> Tensor {
        t.slice_rows(self.text_len, t.rows())
    }
}

/// Hook surface of the single blocks. `observe` sees every bundle; a
/// `replace_image_attn` returning `Some(h)` substitutes the image rows of the
/// attention output before the block's output projection.
pub trait AttentionTap {
    fn observe(&mut self, _step: usize, _bundle: &ActivationBundle) -> Result<()> {
        Ok(())
    }

    fn replace_image_attn(
        &mut self,
        _step: usize,
        _bundle: &ActivationBundle,
    ) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// Tap that counts forward passes through the single-block stack.
#[derive(Debug, Default)]
pub struct EvalCounter {
    pub bundles_seen: usize,
}

impl AttentionTap for EvalCounter {
    fn observe(&mut self, _step: usize, _bundle: &ActivationBundle) -> Result<()> {
        self.bundles_seen += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DoubleBlock {
    txt_q: Tensor,
    txt_k: Tensor,
    txt_v: Tensor,
    txt_o: Tensor,
    img_q: Tensor,
    img_k: Tensor,
    img_v: Tensor,
    img_o: Tensor,
}

#[derive(Debug, Clone)]
struct SingleBlock {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
}

#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    token_table: Tensor,
    double_blocks: Vec<DoubleBlock>,
    single_blocks: Vec<SingleBlock>,
    coords: Vec<GridCoord>,
    rope: RopeConfig,
    evals: std::sync::atomic::AtomicU64,
}

/// Build a model with every projection drawn from `seeded_rng(weight_seed)`
/// and scaled by `1/sqrt(head_dim)`. Same config, same weights, bit for bit.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let dim = cfg.model_dim();
    let mut rng = SeededRng::new(cfg.weight_seed);
    let scale = 1.0 / (cfg.head_dim as f32).sqrt();
    let proj = |rng: &mut SeededRng| -> Tensor {
        let data: Vec<f32> = rng.normal_vec(dim * dim).iter().map(|v| v * scale).collect();
        Tensor::matrix(dim, dim, data).expect("square projection")
    };
    let token_table = Tensor::matrix(VOCAB_SIZE, dim, rng.normal_vec(VOCAB_SIZE * dim))?;
    let double_blocks = (0..cfg.n_double)
        .map(|_| DoubleBlock {
            txt_q: proj(&mut rng),
            txt_k: proj(&mut rng),
            txt_v: proj(&mut rng),
            txt_o: proj(&mut rng),
            img_q: proj(&mut rng),
            img_k: proj(&mut rng),
            img_v: proj(&mut rng),
            img_o: proj(&mut rng),
        })
        .collect();
    let single_blocks = (0..cfg.n_single)
        .map(|_| SingleBlock {
            w_q: proj(&mut rng),
            w_k: proj(&mut rng),
            w_v: proj(&mut rng),
            w_o: proj(&mut rng),
        })
        .collect();
    Ok(Model {
        coords: cfg.grid_coords(),
        rope: cfg.rope_config()?,
        cfg: cfg.clone(),
        token_table,
        double_blocks,
        single_blocks,
        evals: std::sync::atomic::AtomicU64::new(0),
    })
}

/// Non-learned RMS normalization per row; keeps the residual stream from
/// growing multiplicatively across blocks and steps.
fn rms_norm_rows(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..n {
        let row = out.row_mut(i);
        let ms: f32 = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Sinusoidal timestep embedding added to every token.
fn time_embedding(t: f32, dim: usize) -> Vec<f32> {
    let scaled = t * 1000.0;
    let half = dim / 2;
    let mut emb = vec![0.0f32; dim];
    for c in 0..half {
        let freq = (10000.0f32).powf(-(c as f32) / half as f32);
        emb[2 * c] = (scaled * freq).sin();
        emb[2 * c + 1] = (scaled * freq).cos();
    }
    emb
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Forward evaluations since build (or the last reset).
    pub fn eval_count(&self) -> u64 {
        self.evals.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub fn reset_eval_count(&self) {
        self.evals.store(0, std::sync::atomic::Ordering::Relaxed);
    }

    /// Flattened view of every projection weight, for statistics.
    pub fn projection_weights(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for b in &self.double_blocks {
            for t in [
                &b.txt_q, &b.txt_k, &b.txt_v, &b.txt_o, &b.img_q, &b.img_k, &b.img_v, &b.img_o,
            ] {
                out.extend_from_slice(t.data());
            }
        }
        for b in &self.single_blocks {
            for t in [&b.w_q, &b.w_k, &b.w_v, &b.w_o] {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    fn embed_text(&self, prompt: &PromptLayout) -> Result<Tensor> {
        if prompt.token_ids.len() != self.cfg.text_len {
            return Err(Error::shape(
                "embed-text",
                format!(
                    "prompt has {} tokens, model wants {}",
                    prompt.token_ids.len(),
                    self.cfg.text_len
                ),
            ));
        }
        let dim = self.cfg.model_dim();
        let mut data = Vec::with_capacity(self.cfg.text_len * dim);
        for &id in &prompt.token_ids {
            data.extend_from_slice(self.token_table.row(id as usize));
        }
        Tensor::matrix(self.cfg.text_len, dim, data)
    }

    /// Apply the rotary embedding to the image rows, leaving text rows as-is.
    fn rope_image_rows(&self, t: &Tensor) -> Result<Tensor> {
        let text_len = self.cfg.text_len;
        let img = t.slice_rows(text_len, t.rows());
        let rotated =
            crate::rope::rope2d_apply_heads(&img, &self.coords, self.cfg.n_heads, &self.rope)?;
        let mut out = t.clone();
        out.set_rows(text_len, &rotated)?;
        Ok(out)
    }

    /// Project rows through separate text/image weight matrices.
    fn split_proj(&self, x: &Tensor, w_txt: &Tensor, w_img: &Tensor) -> Result<Tensor> {
        let text_len = self.cfg.text_len;
        let txt = tensor::matmul(&x.slice_rows(0, text_len), w_txt)?;
        let img = tensor::matmul(&x.slice_rows(text_len, x.rows()), w_img)?;
        Tensor::concat_rows(&[&txt, &img])
    }

    /// One denoiser evaluation. `latent` is the `hw x dim` image-token state,
    /// `t` the current noise level, `step` the 1-based sampler step handed to
    /// hooks. Returns the predicted velocity for the image tokens.
    pub fn forward(
        &self,
        latent: &Tensor,
        prompt: &PromptLayout,
        t: f32,
        step: usize,
        mut tap: Option<&mut (dyn AttentionTap + '_)>,
    ) -> Result<Tensor> {
        self.evals.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let (rows, dim) = latent.dims2("forward")?;
        if rows != self.cfg.img_tokens() || dim != self.cfg.model_dim() {
            return Err(Error::shape(
                "forward",
                format!(
                    "latent {rows}x{dim}, model wants {}x{}",
                    self.cfg.img_tokens(),
                    self.cfg.model_dim()
                ),
            ));
        }
        let text_len = self.cfg.text_len;
        let text = self.embed_text(prompt)?;
        let mut x = Tensor::concat_rows(&[&text, latent])?;
        let temb = time_embedding(t, dim);
        for i in 0..x.rows() {
            let row = x.row_mut(i);
            for (v, e) in row.iter_mut().zip(&temb) {
                *v += e;
            }
        }

        for block in &self.double_blocks {
            let xn = rms_norm_rows(&x);
            let q = self.rope_image_rows(&self.split_proj(&xn, &block.txt_q, &block.img_q)?)?;
            let k = self.rope_image_rows(&self.split_proj(&xn, &block.txt_k, &block.img_k)?)?;
            let v = self.split_proj(&xn, &block.txt_v, &block.img_v)?;
            let h = attn::unified_attention(&q, &k, &v, self.cfg.n_heads)?;
            let out = self.split_proj(&h, &block.txt_o, &block.img_o)?;
            x = x.add(&out)?;
        }

        for (layer_index, block) in self.single_blocks.iter().enumerate() {
            let xn = rms_norm_rows(&x);
            let q = self.rope_image_rows(&tensor::matmul(&xn, &block.w_q)?)?;
            let k_no_pos = tensor::matmul(&xn, &block.w_k)?;
            let k_with_pos = self.rope_image_rows(&k_no_pos)?;
            let v = tensor::matmul(&xn, &block.w_v)?;
            let mut attn_out = attn::unified_attention(&q, &k_with_pos, &v, self.cfg.n_heads)?;

            if let Some(tap) = tap.as_deref_mut() {
                let bundle = ActivationBundle {
                    layer_index,
                    q,
                    k_with_pos,
                    k_no_pos,
                    v,
                    attn_out: attn_out.clone(),
                    text_len,
                };
                let wrap = |e: Error| Error::Hook {
                    step,
                    layer: layer_index,
                    source: Box::new(e),
                };
                tap.observe(step, &bundle).map_err(wrap)?;
                if let Some(h_img) = tap.replace_image_attn(step, &bundle).map_err(wrap)? {
                    if h_img.shape() != [self.cfg.img_tokens(), dim] {
                        return Err(Error::shape(
                            "forward",
                            format!(
                                "hook replacement {:?}, expected [{}, {dim}]",
                                h_img.shape(),
                                self.cfg.img_tokens()
                            ),
                        ));
                    }
                    attn_out.set_rows(text_len, &h_img)?;
                }
            }
            x = x.add(&tensor::matmul(&attn_out, &block.w_o)?)?;
        }

        Ok(x.slice_rows(text_len, x.rows()))
    }
}
