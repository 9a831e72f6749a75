//! Run configuration and its `key = value` text format.
//!
//! One setting per line, `#` starts a comment line, prompts may repeat
//! (`frame_prompt` appends). Serialization is canonical: parsing then
//! re-serializing any valid file yields the same normalized text.

use crate::error::{Error, Result};
use crate::model::{embed_prompt, ModelConfig, PromptLayout};
use crate::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub out_dir: Option<String>,
    pub identity_prompt: String,
    pub frame_prompts: Vec<String>,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "{key}: expected true or false, got {other:?}"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut saw_identity = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "model.text_len" => cfg.model.text_len = parse_num(key, value)?,
                "model.grid_h" => cfg.model.grid_h = parse_num(key, value)?,
                "model.grid_w" => cfg.model.grid_w = parse_num(key, value)?,
                "model.head_dim" => cfg.model.head_dim = parse_num(key, value)?,
                "model.n_heads" => cfg.model.n_heads = parse_num(key, value)?,
                "model.n_double" => cfg.model.n_double = parse_num(key, value)?,
                "model.n_single" => cfg.model.n_single = parse_num(key, value)?,
                "model.weight_seed" => cfg.model.weight_seed = parse_num(key, value)?,
                "model.rope_base" => cfg.model.rope_base = parse_num(key, value)?,
                "sampler.n_steps" => cfg.sampler.n_steps = parse_num(key, value)?,
                "sampler.extract_step" => cfg.sampler.extract_step = parse_num(key, value)?,
                "sampler.apply_until_step" => {
                    cfg.sampler.apply_until_step = parse_num(key, value)?
                }
                "sampler.alpha_start" => cfg.sampler.alpha_start = parse_num(key, value)?,
                "sampler.keep_background" => {
                    cfg.sampler.keep_background = parse_bool(key, value)?
                }
                "sampler.pta" => cfg.sampler.pta_enabled = parse_bool(key, value)?,
                "sampler.merge" => cfg.sampler.merge_enabled = parse_bool(key, value)?,
                "sampler.masking" => cfg.sampler.masking_enabled = parse_bool(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "out_dir" => cfg.out_dir = Some(value.to_owned()),
                "identity_prompt" => {
                    cfg.identity_prompt = value.to_owned();
                    saw_identity = true;
                }
                "frame_prompt" => cfg.frame_prompts.push(value.to_owned()),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        if !saw_identity {
            return Err(Error::Config("identity_prompt is required".into()));
        }
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("model.text_len", self.model.text_len.to_string());
        push("model.grid_h", self.model.grid_h.to_string());
        push("model.grid_w", self.model.grid_w.to_string());
        push("model.head_dim", self.model.head_dim.to_string());
        push("model.n_heads", self.model.n_heads.to_string());
        push("model.n_double", self.model.n_double.to_string());
        push("model.n_single", self.model.n_single.to_string());
        push("model.weight_seed", self.model.weight_seed.to_string());
        push("model.rope_base", self.model.rope_base.to_string());
        push("sampler.n_steps", self.sampler.n_steps.to_string());
        push("sampler.extract_step", self.sampler.extract_step.to_string());
        push(
            "sampler.apply_until_step",
            self.sampler.apply_until_step.to_string(),
        );
        push("sampler.alpha_start", self.sampler.alpha_start.to_string());
        push(
            "sampler.keep_background",
            self.sampler.keep_background.to_string(),
        );
        push("sampler.pta", self.sampler.pta_enabled.to_string());
        push("sampler.merge", self.sampler.merge_enabled.to_string());
        push("sampler.masking", self.sampler.masking_enabled.to_string());
        push("seed", self.seed.to_string());
        if let Some(dir) = &self.out_dir {
            push("out_dir", dir.clone());
        }
        push("identity_prompt", self.identity_prompt.clone());
        for p in &self.frame_prompts {
            push("frame_prompt", p.clone());
        }
        out
    }

    /// Validate everything a pass depends on; errors name the field.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.prompt_layout(&self.identity_prompt)
            .map_err(|e| Error::Config(format!("identity_prompt: {e}")))?;
        for (i, p) in self.frame_prompts.iter().enumerate() {
            self.prompt_layout(p)
                .map_err(|e| Error::Config(format!("frame_prompt[{i}]: {e}")))?;
        }
        Ok(())
    }

    /// Embed one prompt under this model config, requiring at least one
    /// background and one foreground token.
    pub fn prompt_layout(&self, prompt: &str) -> Result<PromptLayout> {
        let layout = embed_prompt(prompt, &self.model)?;
        if layout.l_bg == 0 || layout.l_fg == 0 {
            return Err(Error::Prompt(format!(
                "prompt needs at least one background and one foreground word \
                 within text_len {}, got l_bg={} l_fg={}",
                self.model.text_len, layout.l_bg, layout.l_fg
            )));
        }
        Ok(layout)
    }

    pub fn frame_prompt(&self, index: usize) -> Result<&str> {
        self.frame_prompts
            .get(index)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::Config(format!(
                    "frame index {index} out of range ({} frame prompts)",
                    self.frame_prompts.len()
                ))
            })
    }
}
