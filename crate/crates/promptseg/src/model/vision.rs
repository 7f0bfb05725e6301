//! Frozen convolutional feature pyramid.
//!
//! Four stages of 3x3 conv + relu + 2x2 pool produce features at strides
//! 4/8/16/32. The raw image, average-pooled to each level's resolution, is
//! appended to the channels so color information survives the frozen random
//! filters untouched.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{concat_rows, Elem, Graph, Init, ParamStore, Tensor};

/// Feature maps at strides 4, 8, 16, 32 (coarsest last).
pub struct MultiLevelFeatures<E: Elem> {
    pub levels: Vec<Tensor<E>>,
}

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Channel count of level `l` (conv features + 3 appended RGB planes).
pub fn level_channels(cfg: &ModelConfig, l: usize) -> usize {
    cfg.vision_channels[l] + 3
}

pub fn register_vision_params<E: Elem>(store: &mut ParamStore<E>, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.vision_channels;
    let chain = [(3, c[0]), (c[0], c[0]), (c[0], c[1]), (c[1], c[2]), (c[2], c[3])];
    for (i, (ci, co)) in chain.iter().enumerate() {
        let std = (2.0 / (*ci as f64 * 9.0)).sqrt();
        store.register(&format!("vision/conv{i}.w"), &[*co, *ci, 3, 3], Init::Normal(std))?;
        store.register(&format!("vision/conv{i}.b"), &[*co], Init::Zeros)?;
    }
    Ok(())
}

/// Image (channels-first planes in [0,1]) -> four feature levels.
pub fn encode_image<E: Elem>(
    g: &Graph<E>,
    params: &ParamStore<E>,
    cfg: &ModelConfig,
    planes: &[f32],
) -> Result<MultiLevelFeatures<E>> {
    let s = cfg.image_size;
    if planes.len() != 3 * s * s {
        return Err(Error::shape("encode_image", format!("{} values for a 3x{s}x{s} image", planes.len())));
    }
    // Standardize each channel per image. Scene brightness is deliberately
    // randomized in the data, and through frozen random filters that global
    // mode would otherwise swamp the pooled coarse levels, leaving the
    // downstream projector almost nothing image-specific to work with.
    let px = s * s;
    let mut norm = Vec::with_capacity(planes.len());
    for c in 0..3 {
        let ch = &planes[c * px..(c + 1) * px];
        let mean = ch.iter().sum::<f32>() / px as f32;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / px as f32;
        let inv = 1.0 / var.sqrt().max(1e-4);
        norm.extend(ch.iter().map(|&v| E::from_f64(((v - mean) * inv) as f64)));
    }
    let img = g.leaf(norm, &[3, s, s], false)?;

    let conv = |x: &Tensor<E>, i: usize| -> Result<Tensor<E>> {
        let w = params.lift(g, &format!("vision/conv{i}.w"))?;
        let b = params.lift(g, &format!("vision/conv{i}.b"))?;
        Ok(x.conv3x3(&w, &b)?.relu())
    };

    // Stem to stride 4, then one conv+pool per remaining level.
    let mut x = conv(&img, 0)?.avg_pool2()?;
    x = conv(&x, 1)?.avg_pool2()?;
    let mut rgb = img.avg_pool2()?.avg_pool2()?;
    let mut levels = Vec::with_capacity(4);
    levels.push(append_rgb(&x, &rgb)?);
    for i in 2..5 {
        x = conv(&x, i)?.avg_pool2()?;
        rgb = rgb.avg_pool2()?;
        levels.push(append_rgb(&x, &rgb)?);
    }
    Ok(MultiLevelFeatures { levels })
}

fn append_rgb<E: Elem>(feat: &Tensor<E>, rgb: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let stacked = concat_rows(&[feat.reshape(&[c, h * w])?, rgb.reshape(&[3, h * w])?])?;
    stacked.reshape(&[c + 3, h, w])
}

/// Raw feature planes per level, for caching across iterations (the encoder
/// is frozen, so features are a pure function of the image).
pub fn feature_planes<E: Elem>(f: &MultiLevelFeatures<E>) -> Vec<(Vec<usize>, Vec<E>)> {
    f.levels.iter().map(|t| (t.shape().to_vec(), t.to_vec())).collect()
}

/// Rebuild features in a fresh graph from cached planes.
pub fn features_from_planes<E: Elem>(g: &Graph<E>, cached: &[(Vec<usize>, Vec<E>)]) -> Result<MultiLevelFeatures<E>> {
    let mut levels = Vec::with_capacity(cached.len());
    for (shape, data) in cached {
        levels.push(g.leaf(data.clone(), shape, false)?);
    }
    Ok(MultiLevelFeatures { levels })
}
