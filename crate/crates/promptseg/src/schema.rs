//! The unified input schema: every task builds the same kind of sequence —
//! image tokens, a task instruction, a condition (category list, referring
//! sentence, or pooled visual-prompt features), and trailing mask tokens —
//! and every task reads its condition embeddings back out of the LM outputs.

use std::sync::Arc;

use crate::config::{MaskTokenMode, ModelConfig, TaskKind};
use crate::error::{Error, Result};
use crate::mask::BinMask;
use crate::model::lm::{Segment, SegmentKind, TokenSequence};
use crate::model::vocab::{Vocabulary, COMMA, REF};
use crate::tensor::{concat_rows, Elem, ParamStore, Tensor};

/// A geometric prompt on the image: the four interactive-segmentation
/// input flavors.
#[derive(Clone, Debug)]
pub enum VisualPrompt {
    Point { x: f64, y: f64 },
    Scribble(Vec<(f64, f64)>),
    Box { x: f64, y: f64, w: f64, h: f64 },
    Mask(BinMask),
}

/// Task condition as data, before any tensors exist.
#[derive(Clone, Debug)]
pub enum ConditionPrompt {
    /// Category names to segment (background is appended automatically).
    Category(Vec<String>),
    /// A referring expression picking out one target (or nothing).
    Sentence(String),
    /// Region prompts whose pooled image features form the condition.
    VisualPrior(Vec<VisualPrompt>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionKind {
    Category,
    Sentence,
    VisualPrior,
}

impl ConditionPrompt {
    pub fn kind(&self) -> ConditionKind {
        match self {
            ConditionPrompt::Category(_) => ConditionKind::Category,
            ConditionPrompt::Sentence(_) => ConditionKind::Sentence,
            ConditionPrompt::VisualPrior(_) => ConditionKind::VisualPrior,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConditionPrompt::Category(names) => {
                if names.is_empty() {
                    return Err(Error::Schema("category condition needs at least one name".into()));
                }
                for (i, a) in names.iter().enumerate() {
                    if a.trim().is_empty() {
                        return Err(Error::Schema("category names must be non-empty".into()));
                    }
                    if names[..i].contains(a) {
                        return Err(Error::Schema(format!("duplicate category name: {a}")));
                    }
                }
            }
            ConditionPrompt::Sentence(s) => {
                if s.trim().is_empty() {
                    return Err(Error::Schema("sentence condition must be non-empty".into()));
                }
            }
            ConditionPrompt::VisualPrior(prompts) => {
                if prompts.is_empty() {
                    return Err(Error::Schema("visual-prior condition needs at least one prompt".into()));
                }
            }
        }
        Ok(())
    }
}

/// Condition content ready for sequence assembly (visual priors already
/// pooled into feature rows).
pub enum ConditionInput<E: Elem> {
    Category { names: Vec<String> },
    Sentence { text: String },
    VisualPrior { features: Tensor<E>, labels: Vec<String> },
}

impl<E: Elem> ConditionInput<E> {
    pub fn kind(&self) -> ConditionKind {
        match self {
            ConditionInput::Category { .. } => ConditionKind::Category,
            ConditionInput::Sentence { .. } => ConditionKind::Sentence,
            ConditionInput::VisualPrior { .. } => ConditionKind::VisualPrior,
        }
    }
}

/// Condition embeddings extracted from LM outputs: the classifier weights.
pub struct ConditionEmbeddings<E: Elem> {
    /// `[K, d]`, one row per condition entry.
    pub embeddings: Tensor<E>,
    pub labels: Vec<String>,
    /// When true, the last row is the appended background category.
    pub includes_background: bool,
}

impl<E: Elem> ConditionEmbeddings<E> {
    pub fn k(&self) -> usize {
        self.embeddings.shape()[0]
    }
}

/// One fixed instruction per task.
pub const INSTRUCTION_TABLE: &[(TaskKind, &str)] = &[
    (TaskKind::Panoptic, "You need to segment all objects. This is all the candidate categories:"),
    (TaskKind::Referring, "Please segment according to the following instruction:"),
    (TaskKind::Interactive, "Please segment by given regions:"),
    (TaskKind::Caption, "Describe the image."),
];

pub fn instruction_text(task: TaskKind) -> &'static str {
    INSTRUCTION_TABLE
        .iter()
        .find(|(t, _)| *t == task)
        .map(|(_, s)| *s)
        .expect("every task has an instruction")
}

/// Assemble the model input sequence. Segment order is image, instruction,
/// condition, mask tokens; the mask-token block moves to the front under the
/// prefix ablation and disappears entirely in direct mode (or when
/// `n_mask_tokens` is 0, as in captioning).
pub fn build_sequence<E: Elem>(
    params: &ParamStore<E>,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    image_tokens: &Tensor<E>,
    instruction: &str,
    condition: &ConditionInput<E>,
    n_mask_tokens: usize,
) -> Result<TokenSequence<E>> {
    if instruction.trim().is_empty() {
        return Err(Error::Schema("instruction must be non-empty".into()));
    }
    let g = image_tokens.graph();
    let tok_emb = params.lift(g, "lm/tok_emb")?;
    let text_rows = |ids: &[usize]| tok_emb.gather_rows(ids);

    let mut parts: Vec<Tensor<E>> = Vec::new();
    let mut token_ids: Vec<Option<usize>> = Vec::new();
    let mut segments: Vec<Segment> = Vec::new();
    let mut at = 0usize;

    let n_mask = match cfg.mask_token_mode {
        MaskTokenMode::Direct => 0,
        _ => n_mask_tokens,
    };
    if n_mask > cfg.n_mask_tokens {
        return Err(Error::Schema(format!(
            "{n_mask} mask tokens requested but the model has {}",
            cfg.n_mask_tokens
        )));
    }
    let mask_rows: Vec<usize> = (0..n_mask).collect();
    let mut mask_span = None;
    let mut push_mask_block = |parts: &mut Vec<Tensor<E>>,
                               token_ids: &mut Vec<Option<usize>>,
                               segments: &mut Vec<Segment>,
                               at: &mut usize|
     -> Result<()> {
        if n_mask == 0 {
            return Ok(());
        }
        parts.push(params.lift(g, "lm/mask_emb")?.gather_rows(&mask_rows)?);
        token_ids.extend(std::iter::repeat(None).take(n_mask));
        segments.push(Segment { kind: SegmentKind::MaskTokens, start: *at, len: n_mask });
        mask_span = Some((*at, n_mask));
        *at += n_mask;
        Ok(())
    };

    if cfg.mask_token_mode == MaskTokenMode::Prefix {
        push_mask_block(&mut parts, &mut token_ids, &mut segments, &mut at)?;
    }

    let t_img = image_tokens.shape()[0];
    parts.push(image_tokens.clone());
    token_ids.extend(std::iter::repeat(None).take(t_img));
    segments.push(Segment { kind: SegmentKind::Image, start: at, len: t_img });
    at += t_img;

    let instr_ids = vocab.tokenize(instruction);
    if instr_ids.is_empty() {
        return Err(Error::Schema("instruction tokenized to nothing".into()));
    }
    parts.push(text_rows(&instr_ids)?);
    token_ids.extend(instr_ids.iter().map(|&i| Some(i)));
    segments.push(Segment { kind: SegmentKind::Instruction, start: at, len: instr_ids.len() });
    at += instr_ids.len();

    let cond_start = at;
    let mut name_spans: Vec<(usize, usize)> = Vec::new();
    let mut ref_pos: Option<usize> = None;
    let mut prior_rows: Vec<usize> = Vec::new();
    let cond_labels: Vec<String>;
    match condition {
        ConditionInput::Category { names } => {
            ConditionPrompt::Category(names.clone()).validate()?;
            let mut all: Vec<String> = names.clone();
            all.push("background".to_string());
            for (i, name) in all.iter().enumerate() {
                let ids = vocab.tokenize(name);
                if ids.is_empty() {
                    return Err(Error::Schema(format!("category name {name:?} tokenized to nothing")));
                }
                parts.push(text_rows(&ids)?);
                token_ids.extend(ids.iter().map(|&t| Some(t)));
                name_spans.push((at, ids.len()));
                at += ids.len();
                if i + 1 < all.len() {
                    parts.push(text_rows(&[COMMA])?);
                    token_ids.push(Some(COMMA));
                    at += 1;
                }
            }
            cond_labels = all;
        }
        ConditionInput::Sentence { text } => {
            ConditionPrompt::Sentence(text.clone()).validate()?;
            let mut ids = vocab.tokenize(text);
            if ids.is_empty() {
                return Err(Error::Schema("sentence tokenized to nothing".into()));
            }
            ids.push(REF);
            parts.push(text_rows(&ids)?);
            token_ids.extend(ids.iter().map(|&t| Some(t)));
            at += ids.len();
            ref_pos = Some(at - 1);
            cond_labels = vec!["referent".to_string()];
        }
        ConditionInput::VisualPrior { features, labels } => {
            let k = features.shape()[0];
            if k == 0 {
                return Err(Error::Schema("visual-prior condition needs at least one prompt".into()));
            }
            if labels.len() != k {
                return Err(Error::Schema(format!("{k} prior features but {} labels", labels.len())));
            }
            for i in 0..k {
                parts.push(features.slice_rows(i, 1)?);
                token_ids.push(None);
                prior_rows.push(at);
                at += 1;
                if i + 1 < k {
                    parts.push(text_rows(&[COMMA])?);
                    token_ids.push(Some(COMMA));
                    at += 1;
                }
            }
            cond_labels = labels.clone();
        }
    }
    segments.push(Segment { kind: SegmentKind::Condition, start: cond_start, len: at - cond_start });

    if cfg.mask_token_mode != MaskTokenMode::Prefix {
        push_mask_block(&mut parts, &mut token_ids, &mut segments, &mut at)?;
    }

    let seq = TokenSequence {
        embeddings: concat_rows(&parts)?,
        segments,
        token_ids,
        name_spans,
        ref_pos,
        prior_rows,
        cond_labels,
        mask_span,
    };
    seq.validate()?;
    Ok(seq)
}

/// Per-category mean of LM outputs over each name's token span
/// (separators excluded), background last.
pub fn category_condition_embed<E: Elem>(
    lm_output: &Tensor<E>,
    seq: &TokenSequence<E>,
) -> Result<ConditionEmbeddings<E>> {
    if seq.name_spans.is_empty() {
        return Err(Error::Schema("sequence was not built with a category condition".into()));
    }
    let mut rows = Vec::with_capacity(seq.name_spans.len());
    for &(start, len) in &seq.name_spans {
        rows.push(lm_output.slice_rows(start, len)?.mean_rows()?);
    }
    Ok(ConditionEmbeddings {
        embeddings: concat_rows(&rows)?,
        labels: seq.cond_labels.clone(),
        includes_background: true,
    })
}

/// The LM output row at the appended referring token.
pub fn sentence_condition_embed<E: Elem>(
    lm_output: &Tensor<E>,
    seq: &TokenSequence<E>,
) -> Result<ConditionEmbeddings<E>> {
    let pos = seq
        .ref_pos
        .ok_or_else(|| Error::Schema("sequence was not built with a sentence condition".into()))?;
    Ok(ConditionEmbeddings {
        embeddings: lm_output.slice_rows(pos, 1)?,
        labels: vec!["referent".to_string()],
        includes_background: false,
    })
}

/// LM output rows at the pooled-prompt positions, one per prompt.
pub fn visual_prior_condition_embed<E: Elem>(
    lm_output: &Tensor<E>,
    seq: &TokenSequence<E>,
) -> Result<ConditionEmbeddings<E>> {
    if seq.prior_rows.is_empty() {
        return Err(Error::Schema("sequence was not built with a visual-prior condition".into()));
    }
    Ok(ConditionEmbeddings {
        embeddings: lm_output.gather_rows(&seq.prior_rows)?,
        labels: seq.cond_labels.clone(),
        includes_background: false,
    })
}

pub fn extract_condition<E: Elem>(
    lm_output: &Tensor<E>,
    seq: &TokenSequence<E>,
    kind: ConditionKind,
) -> Result<ConditionEmbeddings<E>> {
    match kind {
        ConditionKind::Category => category_condition_embed(lm_output, seq),
        ConditionKind::Sentence => sentence_condition_embed(lm_output, seq),
        ConditionKind::VisualPrior => visual_prior_condition_embed(lm_output, seq),
    }
}

/// Draw a prompt as a binary map on the canvas. Point becomes a disc of
/// diameter 10·scale, scribbles are stroked 5·scale wide, boxes fill their
/// rectangle, masks pass through unchanged.
pub fn rasterize_prompt(prompt: &VisualPrompt, h: usize, w: usize, scale: f64) -> Result<BinMask> {
    let wf = w as f64;
    let hf = h as f64;
    let in_bounds = |x: f64, y: f64| x >= 0.0 && x <= wf && y >= 0.0 && y <= hf;
    let map = match prompt {
        VisualPrompt::Point { x, y } => {
            if !in_bounds(*x, *y) {
                return Err(Error::Schema(format!("point ({x}, {y}) outside {w}x{h} canvas")));
            }
            let r = 5.0 * scale;
            BinMask::from_fn(w, h, |px, py| {
                let dx = px as f64 + 0.5 - x;
                let dy = py as f64 + 0.5 - y;
                (dx * dx + dy * dy).sqrt() <= r
            })
        }
        VisualPrompt::Scribble(points) => {
            if points.len() < 2 {
                return Err(Error::Schema("scribble needs at least 2 points".into()));
            }
            if let Some((x, y)) = points.iter().find(|(x, y)| !in_bounds(*x, *y)) {
                return Err(Error::Schema(format!("scribble point ({x}, {y}) outside {w}x{h} canvas")));
            }
            let half = 2.5 * scale;
            BinMask::from_fn(w, h, |px, py| {
                let cx = px as f64 + 0.5;
                let cy = py as f64 + 0.5;
                points
                    .windows(2)
                    .any(|s| segment_distance(cx, cy, s[0].0, s[0].1, s[1].0, s[1].1) <= half)
            })
        }
        VisualPrompt::Box { x, y, w: bw, h: bh } => {
            if *bw < 0.0 || *bh < 0.0 || !in_bounds(*x, *y) || !in_bounds(x + bw, y + bh) {
                return Err(Error::Schema(format!(
                    "box ({x}, {y}, {bw}, {bh}) outside {w}x{h} canvas"
                )));
            }
            BinMask::from_fn(w, h, |px, py| {
                let cx = px as f64 + 0.5;
                let cy = py as f64 + 0.5;
                cx >= *x && cx <= x + bw && cy >= *y && cy <= y + bh
            })
        }
        VisualPrompt::Mask(m) => {
            if m.w != w || m.h != h {
                return Err(Error::Schema(format!(
                    "mask prompt is {}x{} but the canvas is {w}x{h}",
                    m.w, m.h
                )));
            }
            m.clone()
        }
    };
    if map.is_empty() {
        return Err(Error::Schema("degenerate visual prompt: rasterizes to an empty map".into()));
    }
    Ok(map)
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { ((px - ax) * dx + (py - ay) * dy) / len2 };
    let t = t.clamp(0.0, 1.0);
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx) * (px - qx) + (py - qy) * (py - qy)).sqrt()
}

/// Pool the aligned image tokens under each prompt: reshape the `[T_img, d]`
/// token grid back to its spatial layout, bilinearly upsample to the canvas,
/// and average under each rasterized prompt. Returns `[K, d]` features and
/// their labels.
pub fn visual_prior_embed<E: Elem>(
    image_tokens: &Tensor<E>,
    prompts: &[VisualPrompt],
    canvas_h: usize,
    canvas_w: usize,
    scale: f64,
) -> Result<(Tensor<E>, Vec<String>)> {
    if prompts.is_empty() {
        return Err(Error::Schema("visual-prior condition needs at least one prompt".into()));
    }
    let t_img = image_tokens.shape()[0];
    let d = image_tokens.shape()[1];
    let side = (t_img as f64).sqrt().round() as usize;
    if side * side != t_img {
        return Err(Error::shape("visual_prior_embed", format!("{t_img} tokens do not form a square grid")));
    }
    let grid = image_tokens.transpose()?.reshape(&[d, side, side])?;
    let up = grid.bilinear(canvas_h, canvas_w)?;
    let mut rows = Vec::with_capacity(prompts.len());
    let mut labels = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let m = rasterize_prompt(p, canvas_h, canvas_w, scale)?;
        let weights: Vec<E> = m.pool_weights()?.into_iter().map(E::from_f64).collect();
        rows.push(up.mask_pool(Arc::new(weights))?);
        labels.push(format!("prompt {i}"));
    }
    Ok((concat_rows(&rows)?, labels))
}
