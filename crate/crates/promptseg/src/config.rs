//! Flat key=value run configuration.
//!
//! One text format everywhere: `section.key = value`, `#` comments, unknown
//! keys rejected loudly, and the effective config echoed back to disk at the
//! start of every run so any result can be reproduced from its run directory.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Which training/evaluation task a batch or dataset slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    /// Whole-scene segmentation against a category-list condition.
    Panoptic,
    /// Expression-conditioned segmentation (single- or multi-target).
    Referring,
    /// Visual-prompt-conditioned segmentation (point/scribble/box/mask).
    Interactive,
    /// Image captioning (next-token objective; no masks).
    Caption,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Panoptic => "panoptic",
            TaskKind::Referring => "referring",
            TaskKind::Interactive => "interactive",
            TaskKind::Caption => "caption",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        match s.trim() {
            "panoptic" => Ok(TaskKind::Panoptic),
            "referring" => Ok(TaskKind::Referring),
            "interactive" => Ok(TaskKind::Interactive),
            "caption" => Ok(TaskKind::Caption),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected panoptic|referring|interactive|caption)"
            ))),
        }
    }
}

/// How mask tokens reach the mask decoder (ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskTokenMode {
    /// Appended after the condition; decoder reads their LM output rows.
    Lm,
    /// Decoder reads the raw mask-token embeddings; the LM never sees them.
    Direct,
    /// Placed before instruction and condition, so they cannot attend either.
    Prefix,
}

impl MaskTokenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskTokenMode::Lm => "lm",
            MaskTokenMode::Direct => "direct",
            MaskTokenMode::Prefix => "prefix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "lm" => Ok(MaskTokenMode::Lm),
            "direct" => Ok(MaskTokenMode::Direct),
            "prefix" => Ok(MaskTokenMode::Prefix),
            other => Err(Error::Config(format!("unknown mask_token_mode '{other}' (expected lm|direct|prefix)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Shared embedding width for the LM, projector, and decoders.
    pub dim: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub context: usize,
    pub n_mask_tokens: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Conv channels of the four encoder stages (raw RGB means are appended
    /// to each level, so effective channel counts are these + 3).
    pub vision_channels: [usize; 4],
    pub mask_token_mode: MaskTokenMode,
    /// Propose-then-classify (true) vs conditions-as-queries (false).
    pub decoupled: bool,
    /// Drop all biases in the pixel decoder projections (test configs).
    pub bias_free: bool,
    /// Add fixed sine position signals to mask-decoder memory keys.
    pub pos_enc: bool,
    /// Multiplier on the paper-quoted prompt geometry (disc diameter 10,
    /// stroke width 5) for canvases other than the native one.
    pub prompt_scale: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            dim: 128,
            lm_layers: 4,
            lm_heads: 4,
            context: 512,
            n_mask_tokens: 16,
            decoder_layers: 3,
            decoder_heads: 4,
            vision_channels: [16, 24, 32, 48],
            mask_token_mode: MaskTokenMode::Lm,
            decoupled: true,
            bias_free: false,
            pos_enc: true,
            prompt_scale: 1.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.lm_heads != 0 {
            return Err(Error::Config(format!("model.dim {} not divisible by lm_heads {}", self.dim, self.lm_heads)));
        }
        if self.dim % self.decoder_heads != 0 {
            return Err(Error::Config(format!("model.dim {} not divisible by decoder_heads {}", self.dim, self.decoder_heads)));
        }
        if self.image_size % 32 != 0 {
            return Err(Error::Config(format!("model.image_size {} must be a multiple of 32", self.image_size)));
        }
        if self.n_mask_tokens == 0 {
            return Err(Error::Config("model.n_mask_tokens must be ≥ 1".into()));
        }
        if self.pos_enc && self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "model.dim {} must be a multiple of 4 when pos_enc is on",
                self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_cls: f64,
    /// Cross-entropy weight on proposals assigned to the background class.
    pub bg_cls_weight: f64,
    /// Tasks in the joint mix, drawn uniformly per iteration.
    pub tasks: Vec<TaskKind>,
    /// Number of category names (targets + distractors) per panoptic
    /// training sample; evaluation always uses the full list.
    pub category_list_size: usize,
    pub log_every: usize,
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            stage1_iters: 300,
            stage2_iters: 4000,
            batch_size: 8,
            lr: 4e-4,
            warmup_frac: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_bce: 5.0,
            lambda_dice: 5.0,
            lambda_cls: 2.0,
            bg_cls_weight: 0.1,
            tasks: vec![TaskKind::Panoptic, TaskKind::Referring, TaskKind::Interactive, TaskKind::Caption],
            category_list_size: 8,
            log_every: 25,
            ckpt_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// Samples whose scenes are forced to contain a holdout combo.
    pub n_zeroshot: usize,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Color–shape pairs excluded from the train split ("red star, blue
    /// circle"); they form the zero-shot split.
    pub holdout: Vec<(String, String)>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            n_train: 2000,
            n_val: 300,
            n_zeroshot: 200,
            image_size: 64,
            min_shapes: 1,
            max_shapes: 5,
            holdout: vec![
                ("red".into(), "star".into()),
                ("green".into(), "triangle".into()),
                ("blue".into(), "square".into()),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Minimum class score for a proposal to enter the panoptic merge.
    pub panoptic_threshold: f64,
    /// Similarity cutoff for the generalized-referring union rule
    /// (strictly greater than).
    pub gres_threshold: f64,
    /// Sigmoid level at which mask probabilities binarize.
    pub mask_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { panoptic_threshold: 0.4, gres_threshold: 0.6, mask_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse::<T>().map_err(|_| Error::Config(format!("cannot parse value '{v}' for key '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("cannot parse boolean '{other}' for key '{key}'"))),
    }
}

impl Config {
    /// Set one `section.key` to a textual value. Unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        let v = value.trim();
        match k {
            "model.image_size" => self.model.image_size = parse_num(k, v)?,
            "model.dim" => self.model.dim = parse_num(k, v)?,
            "model.lm_layers" => self.model.lm_layers = parse_num(k, v)?,
            "model.lm_heads" => self.model.lm_heads = parse_num(k, v)?,
            "model.context" => self.model.context = parse_num(k, v)?,
            "model.n_mask_tokens" => self.model.n_mask_tokens = parse_num(k, v)?,
            "model.decoder_layers" => self.model.decoder_layers = parse_num(k, v)?,
            "model.decoder_heads" => self.model.decoder_heads = parse_num(k, v)?,
            "model.vision_channels" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse_num::<usize>(k, p))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(Error::Config(format!("{k} needs exactly 4 comma-separated values")));
                }
                self.model.vision_channels = [parts[0], parts[1], parts[2], parts[3]];
            }
            "model.mask_token_mode" => self.model.mask_token_mode = MaskTokenMode::parse(v)?,
            "model.decoupled" => self.model.decoupled = parse_bool(k, v)?,
            "model.bias_free" => self.model.bias_free = parse_bool(k, v)?,
            "model.pos_enc" => self.model.pos_enc = parse_bool(k, v)?,
            "model.prompt_scale" => self.model.prompt_scale = parse_num(k, v)?,
            "model.ln_eps" => self.model.ln_eps = parse_num(k, v)?,
            "train.seed" => self.train.seed = parse_num(k, v)?,
            "train.stage1_iters" => self.train.stage1_iters = parse_num(k, v)?,
            "train.stage2_iters" => self.train.stage2_iters = parse_num(k, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(k, v)?,
            "train.lr" => self.train.lr = parse_num(k, v)?,
            "train.warmup_frac" => self.train.warmup_frac = parse_num(k, v)?,
            "train.beta1" => self.train.beta1 = parse_num(k, v)?,
            "train.beta2" => self.train.beta2 = parse_num(k, v)?,
            "train.adam_eps" => self.train.adam_eps = parse_num(k, v)?,
            "train.lambda_bce" => self.train.lambda_bce = parse_num(k, v)?,
            "train.lambda_dice" => self.train.lambda_dice = parse_num(k, v)?,
            "train.lambda_cls" => self.train.lambda_cls = parse_num(k, v)?,
            "train.bg_cls_weight" => self.train.bg_cls_weight = parse_num(k, v)?,
            "train.tasks" => {
                let tasks: Vec<TaskKind> = v.split(',').map(TaskKind::parse).collect::<Result<_>>()?;
                if tasks.is_empty() {
                    return Err(Error::Config("train.tasks must name at least one task".into()));
                }
                self.train.tasks = tasks;
            }
            "train.category_list_size" => self.train.category_list_size = parse_num(k, v)?,
            "train.log_every" => self.train.log_every = parse_num(k, v)?,
            "train.ckpt_every" => self.train.ckpt_every = parse_num(k, v)?,
            "data.seed" => self.data.seed = parse_num(k, v)?,
            "data.n_train" => self.data.n_train = parse_num(k, v)?,
            "data.n_val" => self.data.n_val = parse_num(k, v)?,
            "data.n_zeroshot" => self.data.n_zeroshot = parse_num(k, v)?,
            "data.image_size" => self.data.image_size = parse_num(k, v)?,
            "data.min_shapes" => self.data.min_shapes = parse_num(k, v)?,
            "data.max_shapes" => self.data.max_shapes = parse_num(k, v)?,
            "data.holdout" => {
                let mut pairs = Vec::new();
                for item in v.split(',') {
                    let item = item.trim();
                    if item.is_empty() {
                        continue;
                    }
                    let mut words = item.split_whitespace();
                    match (words.next(), words.next(), words.next()) {
                        (Some(color), Some(shape), None) => pairs.push((color.to_string(), shape.to_string())),
                        _ => return Err(Error::Config(format!("holdout entry '{item}' must be 'color shape'"))),
                    }
                }
                self.data.holdout = pairs;
            }
            "eval.panoptic_threshold" => self.eval.panoptic_threshold = parse_num(k, v)?,
            "eval.gres_threshold" => self.eval.gres_threshold = parse_num(k, v)?,
            "eval.mask_threshold" => self.eval.mask_threshold = parse_num(k, v)?,
            other => return Err(Error::Config(format!("unknown config key: {other}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines ('#' starts a comment).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1)));
            };
            self.apply(key, value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate()?;
        if self.data.image_size != m.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} must equal model.image_size {}",
                self.data.image_size, m.image_size
            )));
        }
        if self.data.min_shapes == 0 || self.data.min_shapes > self.data.max_shapes {
            return Err(Error::Config("data.min_shapes must be in 1..=data.max_shapes".into()));
        }
        if self.data.n_zeroshot > 0 && self.data.holdout.is_empty() {
            return Err(Error::Config(
                "data.n_zeroshot > 0 requires a non-empty data.holdout list".into(),
            ));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.train.warmup_frac) {
            return Err(Error::Config("train.warmup_frac must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Every key in canonical order with its effective value — the file
    /// echoed into run directories, re-loadable by `apply_text`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let e = &self.eval;
        let _ = writeln!(s, "model.image_size = {}", m.image_size);
        let _ = writeln!(s, "model.dim = {}", m.dim);
        let _ = writeln!(s, "model.lm_layers = {}", m.lm_layers);
        let _ = writeln!(s, "model.lm_heads = {}", m.lm_heads);
        let _ = writeln!(s, "model.context = {}", m.context);
        let _ = writeln!(s, "model.n_mask_tokens = {}", m.n_mask_tokens);
        let _ = writeln!(s, "model.decoder_layers = {}", m.decoder_layers);
        let _ = writeln!(s, "model.decoder_heads = {}", m.decoder_heads);
        let _ = writeln!(
            s,
            "model.vision_channels = {},{},{},{}",
            m.vision_channels[0], m.vision_channels[1], m.vision_channels[2], m.vision_channels[3]
        );
        let _ = writeln!(s, "model.mask_token_mode = {}", m.mask_token_mode.as_str());
        let _ = writeln!(s, "model.decoupled = {}", m.decoupled);
        let _ = writeln!(s, "model.bias_free = {}", m.bias_free);
        let _ = writeln!(s, "model.pos_enc = {}", m.pos_enc);
        let _ = writeln!(s, "model.prompt_scale = {}", m.prompt_scale);
        let _ = writeln!(s, "model.ln_eps = {}", m.ln_eps);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.stage1_iters = {}", t.stage1_iters);
        let _ = writeln!(s, "train.stage2_iters = {}", t.stage2_iters);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.lr = {}", t.lr);
        let _ = writeln!(s, "train.warmup_frac = {}", t.warmup_frac);
        let _ = writeln!(s, "train.beta1 = {}", t.beta1);
        let _ = writeln!(s, "train.beta2 = {}", t.beta2);
        let _ = writeln!(s, "train.adam_eps = {}", t.adam_eps);
        let _ = writeln!(s, "train.lambda_bce = {}", t.lambda_bce);
        let _ = writeln!(s, "train.lambda_dice = {}", t.lambda_dice);
        let _ = writeln!(s, "train.lambda_cls = {}", t.lambda_cls);
        let _ = writeln!(s, "train.bg_cls_weight = {}", t.bg_cls_weight);
        let tasks: Vec<&str> = t.tasks.iter().map(|k| k.as_str()).collect();
        let _ = writeln!(s, "train.tasks = {}", tasks.join(","));
        let _ = writeln!(s, "train.category_list_size = {}", t.category_list_size);
        let _ = writeln!(s, "train.log_every = {}", t.log_every);
        let _ = writeln!(s, "train.ckpt_every = {}", t.ckpt_every);
        let _ = writeln!(s, "data.seed = {}", d.seed);
        let _ = writeln!(s, "data.n_train = {}", d.n_train);
        let _ = writeln!(s, "data.n_val = {}", d.n_val);
        let _ = writeln!(s, "data.n_zeroshot = {}", d.n_zeroshot);
        let _ = writeln!(s, "data.image_size = {}", d.image_size);
        let _ = writeln!(s, "data.min_shapes = {}", d.min_shapes);
        let _ = writeln!(s, "data.max_shapes = {}", d.max_shapes);
        let holdout: Vec<String> = d.holdout.iter().map(|(c, sh)| format!("{c} {sh}")).collect();
        let _ = writeln!(s, "data.holdout = {}", holdout.join(", "));
        let _ = writeln!(s, "eval.panoptic_threshold = {}", e.panoptic_threshold);
        let _ = writeln!(s, "eval.gres_threshold = {}", e.gres_threshold);
        let _ = writeln!(s, "eval.mask_threshold = {}", e.mask_threshold);
        s
    }
}
