//! Decoder-only transformer over a mixed sequence of image patches, text,
//! condition embeddings, and mask-query tokens.
//!
//! Ordinary positions use standard causal attention. Positions inside the
//! mask-token span may attend to everything before the span and to
//! themselves, but not to each other, and they all share one learned
//! positional row — so the model is exactly permutation-symmetric in the
//! mask queries.

use std::sync::Arc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::attn;
use crate::tensor::{Elem, Graph, ParamStore, Tensor};

/// What a contiguous run of sequence positions holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Image,
    Instruction,
    Condition,
    MaskTokens,
}

#[derive(Clone, Debug)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

/// A fully assembled input sequence: pre-positional embeddings plus the
/// bookkeeping needed to route LM outputs to the right downstream heads.
pub struct TokenSequence<E: Elem> {
    /// `[T, d]` embeddings, before positional rows are added.
    pub embeddings: Tensor<E>,
    pub segments: Vec<Segment>,
    /// Vocabulary id per position; `None` for non-text rows (image patches,
    /// condition feature rows, mask tokens).
    pub token_ids: Vec<Option<usize>>,
    /// Row spans of category-name tokens inside the condition segment,
    /// one `(start, len)` per class, in class order.
    pub name_spans: Vec<(usize, usize)>,
    /// Position of the appended referring token, if the condition is a sentence.
    pub ref_pos: Option<usize>,
    /// Positions of visual-prior feature rows, one per prompt, in prompt order.
    pub prior_rows: Vec<usize>,
    /// Human-readable label per condition entry (category names including the
    /// appended background, "referent", or prompt indices).
    pub cond_labels: Vec<String>,
    /// `(start, len)` of the mask-token span, if present.
    pub mask_span: Option<(usize, usize)>,
}

impl<E: Elem> TokenSequence<E> {
    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Segments must be adjacent, in order, and cover the whole sequence.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let mut at = 0usize;
        for seg in &self.segments {
            if seg.start != at {
                return Err(Error::Schema(format!(
                    "segment {:?} starts at {} but previous ends at {at}",
                    seg.kind, seg.start
                )));
            }
            if seg.len == 0 {
                return Err(Error::Schema(format!("empty segment {:?}", seg.kind)));
            }
            at += seg.len;
        }
        if at != t {
            return Err(Error::Schema(format!("segments cover {at} of {t} positions")));
        }
        if self.token_ids.len() != t {
            return Err(Error::Schema("token_ids length mismatch".into()));
        }
        let mask_spans: Vec<_> =
            self.segments.iter().filter(|s| s.kind == SegmentKind::MaskTokens).collect();
        match (mask_spans.len(), self.mask_span) {
            (0, None) => {}
            (1, Some((s, l))) if mask_spans[0].start == s && mask_spans[0].len == l => {}
            _ => return Err(Error::Schema("mask_span disagrees with segments".into())),
        }
        Ok(())
    }
}

/// Row-major `[T, T]` allowed-attention mask for a sequence.
pub fn attention_mask(t: usize, mask_span: Option<(usize, usize)>) -> Arc<Vec<bool>> {
    let mut allowed = vec![false; t * t];
    let span = mask_span.unwrap_or((t, 0));
    let (ms, ml) = span;
    for i in 0..t {
        let in_span = i >= ms && i < ms + ml;
        for j in 0..=i {
            let j_in_span = j >= ms && j < ms + ml;
            allowed[i * t + j] = if in_span {
                j < ms || j == i
            } else {
                // Causal; mask queries sit at the end, so earlier rows never
                // see them, but guard anyway for odd layouts.
                !j_in_span || j == i
            };
        }
    }
    Arc::new(allowed)
}

/// Positional row index per position: sequential, except that every position
/// inside the mask span shares the span's first index, and positions after
/// the span continue from there.
pub fn position_ids(t: usize, mask_span: Option<(usize, usize)>) -> Vec<usize> {
    let (ms, ml) = mask_span.unwrap_or((t, 0));
    (0..t)
        .map(|i| {
            if i < ms {
                i
            } else if i < ms + ml {
                ms
            } else {
                i - ml + 1
            }
        })
        .collect()
}

pub fn register_lm_params<E: Elem>(
    store: &mut ParamStore<E>,
    cfg: &ModelConfig,
    vocab_size: usize,
) -> Result<()> {
    use crate::tensor::Init;
    let d = cfg.dim;
    store.register("lm/tok_emb", &[vocab_size, d], Init::Normal(0.02))?;
    store.register("lm/mask_emb", &[cfg.n_mask_tokens, d], Init::Normal(0.02))?;
    store.register("lm/pos_emb", &[cfg.context, d], Init::Normal(0.02))?;
    for l in 0..cfg.lm_layers {
        let p = format!("lm/l{l}");
        store.register(&format!("{p}.ln1.g"), &[d], Init::Ones)?;
        store.register(&format!("{p}.ln1.b"), &[d], Init::Zeros)?;
        attn::register(store, &format!("{p}.attn"), d)?;
        store.register(&format!("{p}.ln2.g"), &[d], Init::Ones)?;
        store.register(&format!("{p}.ln2.b"), &[d], Init::Zeros)?;
        store.register(&format!("{p}.mlp.w1"), &[d, 4 * d], Init::Normal(0.02))?;
        store.register(&format!("{p}.mlp.b1"), &[4 * d], Init::Zeros)?;
        store.register(&format!("{p}.mlp.w2"), &[4 * d, d], Init::Normal(0.02))?;
        store.register(&format!("{p}.mlp.b2"), &[d], Init::Zeros)?;
    }
    store.register("lm/final_ln.g", &[d], Init::Ones)?;
    store.register("lm/final_ln.b", &[d], Init::Zeros)?;
    Ok(())
}

/// Run the transformer over an assembled sequence. Returns `[T, d]` outputs
/// after the final layer norm.
pub fn lm_forward<E: Elem>(
    params: &ParamStore<E>,
    cfg: &ModelConfig,
    seq: &TokenSequence<E>,
) -> Result<Tensor<E>> {
    seq.validate()?;
    let g = seq.embeddings.graph();
    let t = seq.len();
    if t > cfg.context {
        return Err(Error::Schema(format!(
            "sequence length {t} exceeds context {}",
            cfg.context
        )));
    }
    let pos_ids = position_ids(t, seq.mask_span);
    let pos_table = params.lift(g, "lm/pos_emb")?;
    let pos_rows = pos_table.gather_rows(&pos_ids)?;
    let mut x = seq.embeddings.add(&pos_rows)?;
    let allowed = attention_mask(t, seq.mask_span);
    let eps = E::from_f64(cfg.ln_eps);
    for l in 0..cfg.lm_layers {
        let p = format!("lm/l{l}");
        let ln1 = x.layer_norm(
            &params.lift(g, &format!("{p}.ln1.g"))?,
            &params.lift(g, &format!("{p}.ln1.b"))?,
            eps,
        )?;
        let a = attn::multihead(
            params,
            &format!("{p}.attn"),
            cfg.lm_heads,
            &ln1,
            &ln1,
            Some(&allowed),
            None,
        )?;
        x = x.add(&a)?;
        let ln2 = x.layer_norm(
            &params.lift(g, &format!("{p}.ln2.g"))?,
            &params.lift(g, &format!("{p}.ln2.b"))?,
            eps,
        )?;
        let h = ln2
            .matmul(&params.lift(g, &format!("{p}.mlp.w1"))?)?
            .add_bias(&params.lift(g, &format!("{p}.mlp.b1"))?)?
            .relu()
            .matmul(&params.lift(g, &format!("{p}.mlp.w2"))?)?
            .add_bias(&params.lift(g, &format!("{p}.mlp.b2"))?)?;
        x = x.add(&h)?;
    }
    x.layer_norm(
        &params.lift(g, "lm/final_ln.g")?,
        &params.lift(g, "lm/final_ln.b")?,
        eps,
    )
}

/// Next-token logits over the vocabulary via the tied embedding table:
/// `outputs · tok_embᵀ`, restricted to the given rows.
pub fn token_logits<E: Elem>(
    params: &ParamStore<E>,
    outputs: &Tensor<E>,
    rows: &[usize],
) -> Result<Tensor<E>> {
    let g = outputs.graph();
    let picked = outputs.gather_rows(rows)?;
    let emb = params.lift(g, "lm/tok_emb")?;
    picked.matmul(&emb.transpose()?)
}

/// Greedy decoding. `build` assembles the full sequence (prefix plus the
/// tokens generated so far) in a fresh graph; generation stops at `stop_id`
/// or after `max_new` tokens.
pub fn generate_greedy<E: Elem>(
    params: &ParamStore<E>,
    cfg: &ModelConfig,
    build: impl Fn(&Graph<E>, &[usize]) -> Result<TokenSequence<E>>,
    stop_id: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut generated: Vec<usize> = Vec::new();
    for step in 0..max_new {
        let g = Graph::<E>::new();
        let seq = build(&g, &generated)?;
        if step == 0 && seq.token_ids.last() == Some(&Some(stop_id)) {
            return Ok(generated);
        }
        let out = lm_forward(params, cfg, &seq)?;
        let last = seq.len() - 1;
        let logits = token_logits(params, &out, &[last])?;
        let row = logits.value();
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in row.iter().enumerate() {
            let v = v.to_f64();
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        if best == stop_id {
            break;
        }
        generated.push(best);
    }
    Ok(generated)
}
