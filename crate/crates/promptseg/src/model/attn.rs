//! Multi-head attention built from graph primitives, shared by the language
//! model (self-attention with an allowed-position mask) and the mask decoder
//! (cross- and self-attention without one).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{concat_cols, Elem, ParamStore, Tensor};

/// `q_in: [Tq, d]`, `kv_in: [Tk, d]` -> `[Tq, d]`.
/// Weights looked up as `{prefix}.wq/.bq/.wk/.bk/.wv/.bv/.wo/.bo`.
/// `allowed`, when given, is a row-major `[Tq * Tk]` attention mask.
/// `key_pos`, when given, is added to keys only (content-free position signal).
pub fn multihead<E: Elem>(
    params: &ParamStore<E>,
    prefix: &str,
    heads: usize,
    q_in: &Tensor<E>,
    kv_in: &Tensor<E>,
    allowed: Option<&Arc<Vec<bool>>>,
    key_pos: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let g = q_in.graph();
    let d = q_in.shape()[1];
    if d % heads != 0 {
        return Err(Error::shape("multihead", format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let lift = |name: &str| params.lift(g, &format!("{prefix}.{name}"));
    let q = q_in.matmul(&lift("wq")?)?.add_bias(&lift("bq")?)?;
    let mut k_src = kv_in.clone();
    if let Some(p) = key_pos {
        k_src = k_src.add(p)?;
    }
    let k = k_src.matmul(&lift("wk")?)?.add_bias(&lift("bk")?)?;
    let v = kv_in.matmul(&lift("wv")?)?.add_bias(&lift("bv")?)?;
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        let attn = match allowed {
            Some(mask) => scores.masked_softmax_rows(mask)?,
            None => scores.softmax_rows()?,
        };
        head_outs.push(attn.matmul(&vh)?);
    }
    let merged = concat_cols(&head_outs)?;
    merged.matmul(&lift("wo")?)?.add_bias(&lift("bo")?)
}

/// Register one attention block's parameters.
pub fn register<E: Elem>(store: &mut ParamStore<E>, prefix: &str, d: usize) -> Result<()> {
    use crate::tensor::Init;
    for w in ["wq", "wk", "wv", "wo"] {
        store.register(&format!("{prefix}.{w}"), &[d, d], Init::Normal(0.02))?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.register(&format!("{prefix}.{b}"), &[d], Init::Zeros)?;
    }
    Ok(())
}
