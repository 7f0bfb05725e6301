//! Propose-then-classify mask generation.
//!
//! Mask-token outputs from the LM become queries; a small transformer
//! decoder cross-attends them to fused multi-scale image features and each
//! query dots against a per-pixel embedding map to produce a mask proposal.
//! Classification multiplies projected queries against projected condition
//! embeddings, so the label space is whatever the condition supplied.

use crate::config::TaskKind;
use crate::error::{Error, Result};
use crate::mask::BinMask;
use crate::model::vision::{self, MultiLevelFeatures};
use crate::model::{attn, lm, vl_align, Model};
use crate::schema::{
    self, build_sequence, extract_condition, ConditionEmbeddings, ConditionInput, ConditionKind,
    ConditionPrompt,
};
use crate::tensor::{concat_rows, Elem, Graph, Tensor};

pub struct PixelDecodeOutput<E: Elem> {
    /// `[d, H/4, W/4]` fused per-pixel embedding map.
    pub per_pixel: Tensor<E>,
    /// `[M, d]` flattened fused features of the three coarser levels
    /// (strides 32, 16, 8 in that order).
    pub memory: Tensor<E>,
    /// `[M, d]` fixed sine position signal for memory keys, when enabled.
    pub memory_pos: Option<Tensor<E>>,
}

/// Queries and mask logits for a set of proposals, still attached to the
/// graph so losses can flow through them.
pub struct DecodedMasks<E: Elem> {
    /// `[N, h*w]` mask logits at stride 4.
    pub mask_logits: Tensor<E>,
    /// `[N, d]` final query embeddings.
    pub queries: Tensor<E>,
    pub h: usize,
    pub w: usize,
}

/// Project one feature level to the shared width: `[C, h, w] -> [d, h, w]`.
fn lateral<E: Elem>(
    model: &Model<E>,
    g: &Graph<E>,
    level: &Tensor<E>,
    l: usize,
) -> Result<Tensor<E>> {
    let (c, h, w) = (level.shape()[0], level.shape()[1], level.shape()[2]);
    let flat = level.reshape(&[c, h * w])?.transpose()?;
    let mut x = flat.matmul(&model.params.lift(g, &format!("pix/lat{l}.w"))?)?;
    if !model.cfg.bias_free {
        x = x.add_bias(&model.params.lift(g, &format!("pix/lat{l}.b"))?)?;
    }
    x.transpose()?.reshape(&[model.cfg.dim, h, w])
}

/// Top-down lateral fusion: project every level to `d` channels and
/// upsample-and-add from stride 32 down to stride 4.
pub fn pixel_decode<E: Elem>(model: &Model<E>, feats: &MultiLevelFeatures<E>) -> Result<PixelDecodeOutput<E>> {
    if feats.levels.len() != 4 {
        return Err(Error::shape("pixel_decode", format!("{} levels, expected 4", feats.levels.len())));
    }
    let g = feats.levels[0].graph();
    let d = model.cfg.dim;
    let mut fused: Vec<Tensor<E>> = Vec::with_capacity(4);
    let mut top: Option<Tensor<E>> = None;
    for l in (0..4).rev() {
        let mut x = lateral(model, g, &feats.levels[l], l)?;
        if let Some(t) = &top {
            let (h, w) = (x.shape()[1], x.shape()[2]);
            x = x.add(&t.bilinear(h, w)?)?;
        }
        top = Some(x.clone());
        fused.push(x);
    }
    // `fused` runs coarse to fine: strides 32, 16, 8, 4.
    let per_pixel = fused[3].clone();
    let mut mem_parts = Vec::with_capacity(3);
    let mut pos_parts = Vec::with_capacity(3);
    for f in &fused[..3] {
        let (h, w) = (f.shape()[1], f.shape()[2]);
        mem_parts.push(f.reshape(&[d, h * w])?.transpose()?);
        if model.cfg.pos_enc {
            pos_parts.push(g.leaf(sine_pos_2d(h, w, d), &[h * w, d], false)?);
        }
    }
    let memory = concat_rows(&mem_parts)?;
    let memory_pos = if model.cfg.pos_enc { Some(concat_rows(&pos_parts)?) } else { None };
    Ok(PixelDecodeOutput { per_pixel, memory, memory_pos })
}

/// Fixed 2D sine/cosine position table for an `h` by `w` grid, `d` wide:
/// half the channels encode the row, half the column.
pub fn sine_pos_2d<E: Elem>(h: usize, w: usize, d: usize) -> Vec<E> {
    assert!(d % 4 == 0, "position width must be a multiple of 4");
    let q = d / 4;
    let mut out = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for (coord, denom) in [(y, h), (x, w)] {
                let t = coord as f64 / denom as f64;
                for k in 0..q {
                    let f = 10000f64.powf(-(k as f64) / q as f64);
                    let a = t * f * std::f64::consts::TAU * denom as f64 / 2.0;
                    out.push(E::from_f64(a.sin()));
                    out.push(E::from_f64(a.cos()));
                }
            }
        }
    }
    out
}

/// Dot each projected query against every pixel embedding:
/// `[N, d] x [d, h, w] -> [N, h*w]`.
pub fn mask_logits_from<E: Elem>(
    model: &Model<E>,
    queries: &Tensor<E>,
    per_pixel: &Tensor<E>,
) -> Result<Tensor<E>> {
    let g = queries.graph();
    let d = model.cfg.dim;
    let (h, w) = (per_pixel.shape()[1], per_pixel.shape()[2]);
    let projected = queries.matmul(&model.params.lift(g, "dec/mask_proj.w")?)?;
    projected.matmul(&per_pixel.reshape(&[d, h * w])?)
}

/// Refine mask-token outputs into proposal queries and mask logits:
/// `decoder_layers` rounds of cross-attention to the fused features,
/// self-attention among queries, and an MLP. Queries carry no position
/// signal, so the proposal set is permutation-equivariant.
pub fn mask_decode<E: Elem>(
    model: &Model<E>,
    pix: &PixelDecodeOutput<E>,
    mask_token_outputs: &Tensor<E>,
) -> Result<DecodedMasks<E>> {
    let g = mask_token_outputs.graph();
    let cfg = &model.cfg;
    let params = &model.params;
    let n = mask_token_outputs.shape()[0];
    if n == 0 {
        return Err(Error::shape("mask_decode", "need at least one query".to_string()));
    }
    let eps = E::from_f64(cfg.ln_eps);
    let ln = |x: &Tensor<E>, name: &str| -> Result<Tensor<E>> {
        x.layer_norm(
            &params.lift(g, &format!("{name}.g"))?,
            &params.lift(g, &format!("{name}.b"))?,
            eps,
        )
    };
    let mut x = mask_token_outputs.clone();
    for i in 0..cfg.decoder_layers {
        let p = format!("dec/l{i}");
        let q = ln(&x, &format!("{p}.ln1"))?;
        let cross = attn::multihead(
            params,
            &format!("{p}.cross"),
            cfg.decoder_heads,
            &q,
            &pix.memory,
            None,
            pix.memory_pos.as_ref(),
        )?;
        x = x.add(&cross)?;
        let q = ln(&x, &format!("{p}.ln2"))?;
        let selfa = attn::multihead(params, &format!("{p}.self"), cfg.decoder_heads, &q, &q, None, None)?;
        x = x.add(&selfa)?;
        let q = ln(&x, &format!("{p}.ln3"))?;
        let h = q
            .matmul(&params.lift(g, &format!("{p}.mlp.w1"))?)?
            .add_bias(&params.lift(g, &format!("{p}.mlp.b1"))?)?
            .relu()
            .matmul(&params.lift(g, &format!("{p}.mlp.w2"))?)?
            .add_bias(&params.lift(g, &format!("{p}.mlp.b2"))?)?;
        x = x.add(&h)?;
    }
    let queries = ln(&x, "dec/final_ln")?;
    let mask_logits = mask_logits_from(model, &queries, &pix.per_pixel)?;
    let (h, w) = (pix.per_pixel.shape()[1], pix.per_pixel.shape()[2]);
    Ok(DecodedMasks { mask_logits, queries, h, w })
}

/// Condition-embedding classification:
/// `logit[i, k] = <project_q(query_i), project_c(c_k)> / sqrt(d)`.
/// Similarity mode (sentence and visual-prior conditions) adds a learned
/// scalar bias so the sigmoid scores are calibrated.
pub fn classify<E: Elem>(
    model: &Model<E>,
    queries: &Tensor<E>,
    conditions: &Tensor<E>,
    similarity: bool,
) -> Result<Tensor<E>> {
    let g = queries.graph();
    let params = &model.params;
    let q = queries.matmul(&params.lift(g, "cls/proj_q.w")?)?;
    let c = conditions.matmul(&params.lift(g, "cls/proj_c.w")?)?;
    let scale = E::from_f64(1.0 / (model.cfg.dim as f64).sqrt());
    let logits = q.matmul(&c.transpose()?)?.scale(scale);
    if similarity {
        logits.add_scalar_t(&params.lift(g, "cls/score_bias")?)
    } else {
        Ok(logits)
    }
}

/// Everything a task loss or an inference rule needs, still graph-attached.
pub struct ForwardOutputs<E: Elem> {
    pub masks: DecodedMasks<E>,
    /// `[N, K]` classification logits (categorical for category conditions,
    /// per-condition similarity scores otherwise).
    pub class_logits: Tensor<E>,
    pub conditions: ConditionEmbeddings<E>,
    pub condition_kind: ConditionKind,
    pub seq_len: usize,
}

/// Run the full pipeline from features to proposals for one sample.
pub fn forward_for_task<E: Elem>(
    model: &Model<E>,
    feats: &MultiLevelFeatures<E>,
    instruction: &str,
    condition: &ConditionPrompt,
) -> Result<ForwardOutputs<E>> {
    condition.validate()?;
    let cfg = &model.cfg;
    let image_tokens = vl_align(&model.params, feats)?;
    let cond_input: ConditionInput<E> = match condition {
        ConditionPrompt::Category(names) => ConditionInput::Category { names: names.clone() },
        ConditionPrompt::Sentence(text) => ConditionInput::Sentence { text: text.clone() },
        ConditionPrompt::VisualPrior(prompts) => {
            let (features, labels) = schema::visual_prior_embed(
                &image_tokens,
                prompts,
                cfg.image_size,
                cfg.image_size,
                cfg.prompt_scale,
            )?;
            ConditionInput::VisualPrior { features, labels }
        }
    };
    forward_with_condition(model, feats, &image_tokens, instruction, cond_input)
}

/// Like [`forward_for_task`] but with the condition already in tensor form.
/// Frame-to-frame propagation needs this entry point: its visual prior is
/// pooled from the previous frame's tokens, not from the frame being
/// segmented.
pub fn forward_with_condition<E: Elem>(
    model: &Model<E>,
    feats: &MultiLevelFeatures<E>,
    image_tokens: &Tensor<E>,
    instruction: &str,
    cond_input: ConditionInput<E>,
) -> Result<ForwardOutputs<E>> {
    let g = feats.levels[0].graph();
    let cfg = &model.cfg;
    let kind = cond_input.kind();
    // The coupled variant has no proposal queries of its own, so the
    // sequence carries no mask-token block.
    let n_mask = if cfg.decoupled { cfg.n_mask_tokens } else { 0 };
    let seq = build_sequence(
        &model.params,
        &model.vocab,
        cfg,
        image_tokens,
        instruction,
        &cond_input,
        n_mask,
    )?;
    let lm_out = lm::lm_forward(&model.params, cfg, &seq)?;
    let conditions = extract_condition(&lm_out, &seq, kind)?;

    let pix = pixel_decode(model, feats)?;
    let queries_in = if !cfg.decoupled {
        // Ablation variant: conditions drive the decoder directly.
        conditions.embeddings.clone()
    } else {
        match seq.mask_span {
            Some((start, len)) => lm_out.slice_rows(start, len)?,
            // Direct mode: raw learned queries, bypassing the LM.
            None => model.params.lift(g, "lm/mask_emb")?,
        }
    };
    let masks = mask_decode(model, &pix, &queries_in)?;
    let similarity = kind != ConditionKind::Category;
    let class_logits = classify(model, &masks.queries, &conditions.embeddings, similarity)?;
    Ok(ForwardOutputs {
        masks,
        class_logits,
        conditions,
        condition_kind: kind,
        seq_len: seq.len(),
    })
}

/// One detached mask proposal at inference resolution.
pub struct MaskProposal {
    /// Row-major mask logits (pre-sigmoid).
    pub mask_logits: Vec<f64>,
    pub query: Vec<f64>,
}

/// Detached prediction for one image: `n()` proposals with aligned class
/// logits, plus the labels the condition carried.
pub struct ProposalSet {
    pub proposals: Vec<MaskProposal>,
    /// `n x k` class logits.
    pub class_logits: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub includes_background: bool,
    pub condition_kind: ConditionKind,
    pub mask_h: usize,
    pub mask_w: usize,
}

impl ProposalSet {
    pub fn n(&self) -> usize {
        self.proposals.len()
    }

    /// Proposal `i` thresholded at probability 0.5 (logit 0).
    pub fn binarized(&self, i: usize) -> BinMask {
        let logits = &self.proposals[i].mask_logits;
        BinMask::from_fn(self.mask_w, self.mask_h, |x, y| logits[y * self.mask_w + x] > 0.0)
    }
}

/// Full inference for one image: encode, run the LM, decode proposals, and
/// classify them. Masks are bilinearly upsampled to the input resolution
/// when `upsample` is set.
pub fn predict<E: Elem>(
    model: &Model<E>,
    planes: &[f32],
    task: TaskKind,
    condition: &ConditionPrompt,
    upsample: bool,
) -> Result<ProposalSet> {
    let g = Graph::<E>::new();
    let feats = vision::encode_image(&g, &model.params, &model.cfg, planes)?;
    let out = forward_for_task(model, &feats, schema::instruction_text(task), condition)?;
    detach(model, out, upsample)
}

/// Pull a forward pass out of its graph into plain numbers.
pub fn detach<E: Elem>(model: &Model<E>, out: ForwardOutputs<E>, upsample: bool) -> Result<ProposalSet> {
    let (mut h, mut w) = (out.masks.h, out.masks.w);
    let n = out.masks.queries.shape()[0];
    let logits = if upsample {
        let s = model.cfg.image_size;
        let up = out.masks.mask_logits.reshape(&[n, h, w])?.bilinear(s, s)?;
        h = s;
        w = s;
        up.reshape(&[n, s * s])?
    } else {
        out.masks.mask_logits
    };
    let flat = logits.to_vec();
    let queries = out.masks.queries.to_vec();
    let d = model.cfg.dim;
    let proposals = (0..n)
        .map(|i| MaskProposal {
            mask_logits: flat[i * h * w..(i + 1) * h * w].iter().map(|&v| v.to_f64()).collect(),
            query: queries[i * d..(i + 1) * d].iter().map(|&v| v.to_f64()).collect(),
        })
        .collect();
    let k = out.class_logits.shape()[1];
    let cls = out.class_logits.to_vec();
    let class_logits = (0..n)
        .map(|i| cls[i * k..(i + 1) * k].iter().map(|&v| v.to_f64()).collect())
        .collect();
    Ok(ProposalSet {
        proposals,
        class_logits,
        labels: out.conditions.labels,
        includes_background: out.conditions.includes_background,
        condition_kind: out.condition_kind,
        mask_h: h,
        mask_w: w,
    })
}

#[cfg(test)]
mod tests;
