//! The full segmentation model: frozen vision pyramid, vision-language
//! projector, causal LM, and the parameters of the mask/classification heads.
//!
//! All parameters live in one named [`ParamStore`]; modules look their
//! weights up by name so a single store snapshot is a complete checkpoint.

pub mod attn;
pub mod ckpt;
pub mod lm;
pub mod vision;
pub mod vocab;


use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Elem, Init, ParamStore, Tensor};
use vision::MultiLevelFeatures;
use vocab::Vocabulary;

pub struct Model<E: Elem> {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<E>,
}

impl<E: Elem> Model<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::new();
        let mut params = ParamStore::new(seed);
        register_params(&mut params, &cfg, vocab.len())?;
        Ok(Model { cfg, vocab, params })
    }

    /// Apply the training-stage freeze rules. Stage 1 trains only the
    /// vision-language projector; stage 2 unfreezes everything except the
    /// vision pyramid. Returns the number of trainable parameter values.
    pub fn freeze_stage(&mut self, stage: u32) -> Result<usize> {
        match stage {
            1 => self.params.set_trainable_where(|n| n.starts_with("vl/")),
            2 => self.params.set_trainable_where(|n| !n.starts_with("vision/")),
            s => return Err(Error::Config(format!("unknown training stage {s} (expected 1 or 2)"))),
        };
        Ok(self.params.num_trainable_values())
    }
}

fn register_params<E: Elem>(store: &mut ParamStore<E>, cfg: &ModelConfig, vocab_size: usize) -> Result<()> {
    let d = cfg.dim;
    vision::register_vision_params(store, cfg)?;

    // Vision-language projector on the coarsest level: 3x3 conv then linear.
    let c = vision::level_channels(cfg, 3);
    let std = (2.0 / (c as f64 * 9.0)).sqrt();
    store.register("vl/conv.w", &[c, c, 3, 3], Init::Normal(std))?;
    store.register("vl/conv.b", &[c], Init::Zeros)?;
    store.register("vl/lin.w", &[c, d], Init::Normal(0.02))?;
    store.register("vl/lin.b", &[d], Init::Zeros)?;

    lm::register_lm_params(store, cfg, vocab_size)?;

    // Pixel decoder: one lateral projection per feature level.
    for l in 0..4 {
        let cl = vision::level_channels(cfg, l);
        store.register(&format!("pix/lat{l}.w"), &[cl, d], Init::Normal(0.02))?;
        if !cfg.bias_free {
            store.register(&format!("pix/lat{l}.b"), &[d], Init::Zeros)?;
        }
    }

    // Mask decoder: cross-attention to memory, self-attention among queries,
    // then an MLP, each pre-normalized.
    for i in 0..cfg.decoder_layers {
        let p = format!("dec/l{i}");
        for ln in ["ln1", "ln2", "ln3"] {
            store.register(&format!("{p}.{ln}.g"), &[d], Init::Ones)?;
            store.register(&format!("{p}.{ln}.b"), &[d], Init::Zeros)?;
        }
        attn::register(store, &format!("{p}.cross"), d)?;
        attn::register(store, &format!("{p}.self"), d)?;
        store.register(&format!("{p}.mlp.w1"), &[d, 4 * d], Init::Normal(0.02))?;
        store.register(&format!("{p}.mlp.b1"), &[4 * d], Init::Zeros)?;
        store.register(&format!("{p}.mlp.w2"), &[4 * d, d], Init::Normal(0.02))?;
        store.register(&format!("{p}.mlp.b2"), &[d], Init::Zeros)?;
    }
    store.register("dec/final_ln.g", &[d], Init::Ones)?;
    store.register("dec/final_ln.b", &[d], Init::Zeros)?;
    store.register("dec/mask_proj.w", &[d, d], Init::Normal(0.02))?;

    // Classification head: bias-free projections keep the score bilinear in
    // query and condition; the scalar bias calibrates similarity scores.
    store.register("cls/proj_q.w", &[d, d], Init::Normal(0.02))?;
    store.register("cls/proj_c.w", &[d, d], Init::Normal(0.02))?;
    store.register("cls/score_bias", &[1], Init::Zeros)?;
    Ok(())
}

/// Project the coarsest feature level into `T_img` LM tokens
/// (3x3 conv, then a per-position linear map, flattened row-major).
pub fn vl_align<E: Elem>(
    params: &ParamStore<E>,
    feats: &MultiLevelFeatures<E>,
) -> Result<Tensor<E>> {
    let lvl = &feats.levels[3];
    let g = lvl.graph();
    let (c, h, w) = (lvl.shape()[0], lvl.shape()[1], lvl.shape()[2]);
    let conv = lvl
        .conv3x3(&params.lift(g, "vl/conv.w")?, &params.lift(g, "vl/conv.b")?)?;
    // [c, h, w] -> [h*w, c]: row-major spatial order with channels per token.
    let tokens = conv.reshape(&[c, h * w])?.transpose()?;
    tokens
        .matmul(&params.lift(g, "vl/lin.w")?)?
        .add_bias(&params.lift(g, "vl/lin.b")?)
}

/// Number of visual tokens `vl_align` emits for the configured image size.
pub fn n_image_tokens(cfg: &ModelConfig) -> usize {
    let s = cfg.image_size / 32;
    s * s
}
