use super::*;
use crate::config::{MaskTokenMode, ModelConfig, TaskKind};
use crate::error::Result;
use crate::model::vision::{encode_image, level_channels};
use crate::model::vocab::Vocabulary;
use crate::schema::{instruction_text, ConditionKind, ConditionPrompt, VisualPrompt};
use crate::tensor::{grad_check, Elem, GradCheckOpts, GradTarget, Graph, ParamStore, Tensor};

fn micro_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        dim: 16,
        lm_layers: 1,
        lm_heads: 2,
        context: 96,
        n_mask_tokens: 4,
        decoder_layers: 2,
        decoder_heads: 2,
        vision_channels: [2, 3, 4, 5],
        ..ModelConfig::default()
    }
}

fn planes(size: usize) -> Vec<f32> {
    (0..3 * size * size).map(|i| ((i * 7 + 3) % 13) as f32 / 13.0 - 0.3).collect()
}

fn eye(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

#[test]
fn pixel_decoder_emits_a_stride_four_map_and_coarse_memory() -> Result<()> {
    let m = Model::<f32>::new(micro_cfg(), 3)?;
    let g = Graph::new();
    let feats = encode_image(&g, &m.params, &m.cfg, &planes(64))?;
    let pix = pixel_decode(&m, &feats)?;
    assert_eq!(pix.per_pixel.shape(), &[16, 16, 16]);
    // Memory holds the stride 32, 16, and 8 grids: 2x2 + 4x4 + 8x8 rows.
    assert_eq!(pix.memory.shape(), &[4 + 16 + 64, 16]);
    assert_eq!(pix.memory_pos.as_ref().map(|p| p.shape().to_vec()), Some(vec![84, 16]));
    assert!(pix.per_pixel.to_vec().iter().all(|&v| v.to_f64().is_finite()));
    Ok(())
}

#[test]
fn bias_free_pixel_decoder_maps_zero_features_to_zero() -> Result<()> {
    let mut cfg = micro_cfg();
    cfg.bias_free = true;
    let m = Model::<f64>::new(cfg, 5)?;
    let g = Graph::new();
    let mut levels = Vec::new();
    for (l, side) in [(0usize, 16usize), (1, 8), (2, 4), (3, 2)] {
        let c = level_channels(&m.cfg, l);
        levels.push(g.leaf(vec![0.0; c * side * side], &[c, side, side], false)?);
    }
    let pix = pixel_decode(&m, &MultiLevelFeatures { levels })?;
    assert!(pix.per_pixel.to_vec().iter().all(|&v| v == 0.0));
    assert!(pix.memory.to_vec().iter().all(|&v| v == 0.0));
    Ok(())
}

#[test]
fn every_feature_level_feeds_the_fused_map() -> Result<()> {
    let m = Model::<f64>::new(micro_cfg(), 7)?;
    let g = Graph::new();
    let mut levels = Vec::new();
    for (l, side) in [(0usize, 16usize), (1, 8), (2, 4), (3, 2)] {
        let c = level_channels(&m.cfg, l);
        let data = (0..c * side * side).map(|i| ((i * 11 + l) % 17) as f64 / 17.0).collect();
        levels.push(g.leaf(data, &[c, side, side], true)?);
    }
    let feats = MultiLevelFeatures { levels };
    let pix = pixel_decode(&m, &feats)?;
    let loss = pix.per_pixel.sum_all();
    g.backward(&loss)?;
    for (l, level) in feats.levels.iter().enumerate() {
        let grad = level.grad().expect("feature level should receive a gradient");
        assert!(grad.iter().any(|&v| v != 0.0), "no gradient reached level {l}");
    }
    Ok(())
}

#[test]
fn memory_positions_vary_by_location_and_stay_bounded() {
    let t: Vec<f64> = sine_pos_2d(3, 5, 8);
    assert_eq!(t.len(), 3 * 5 * 8);
    assert!(t.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    for a in 0..15 {
        for b in (a + 1)..15 {
            let ra = &t[a * 8..a * 8 + 8];
            let rb = &t[b * 8..b * 8 + 8];
            assert!(
                ra.iter().zip(rb).any(|(x, y)| (x - y).abs() > 1e-6),
                "rows {a} and {b} identical"
            );
        }
    }
}

#[test]
fn projected_query_orthogonal_to_all_pixels_scores_half_everywhere() -> Result<()> {
    let mut m = Model::<f64>::new(micro_cfg(), 9)?;
    let d = m.cfg.dim;
    m.params.set_data("dec/mask_proj.w", eye(d))?;
    let g = Graph::new();
    // Pixel embeddings confined to the span of the first two channels.
    let (h, w) = (4, 4);
    let mut pix = vec![0.0; d * h * w];
    for (i, v) in pix.iter_mut().take(2 * h * w).enumerate() {
        *v = ((i * 5 + 1) % 7) as f64 - 3.0;
    }
    let per_pixel = g.leaf(pix, &[d, h, w], false)?;
    let mut qdata = vec![0.0; d];
    qdata[2] = 1.5;
    let queries = g.leaf(qdata, &[1, d], false)?;
    let logits = mask_logits_from(&m, &queries, &per_pixel)?;
    assert!(logits.to_vec().iter().all(|&v| v == 0.0));
    assert!(logits.sigmoid().to_vec().iter().all(|&v| v == 0.5));
    Ok(())
}

#[test]
fn mask_proposals_permute_with_their_queries() -> Result<()> {
    let m = Model::<f64>::new(micro_cfg(), 11)?;
    let g = Graph::new();
    let feats = encode_image(&g, &m.params, &m.cfg, &planes(64))?;
    let pix = pixel_decode(&m, &feats)?;
    let d = m.cfg.dim;
    let n = 4;
    let base: Vec<f64> = (0..n * d).map(|i| ((i * 13 + 2) % 19) as f64 / 19.0 - 0.5).collect();
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<f64> =
        perm.iter().flat_map(|&r| base[r * d..(r + 1) * d].to_vec()).collect();
    let a = mask_decode(&m, &pix, &g.leaf(base, &[n, d], false)?)?;
    let b = mask_decode(&m, &pix, &g.leaf(permuted, &[n, d], false)?)?;
    let (la, lb) = (a.mask_logits.to_vec(), b.mask_logits.to_vec());
    let hw = a.h * a.w;
    for (bi, &ai) in perm.iter().enumerate() {
        for j in 0..hw {
            let (x, y) = (la[ai * hw + j], lb[bi * hw + j]);
            assert!((x - y).abs() <= 1e-9, "proposal {ai}->{bi} differs at {j}: {x} vs {y}");
        }
    }
    Ok(())
}

#[test]
fn a_single_query_still_decodes() -> Result<()> {
    let m = Model::<f64>::new(micro_cfg(), 13)?;
    let g = Graph::new();
    let feats = encode_image(&g, &m.params, &m.cfg, &planes(64))?;
    let pix = pixel_decode(&m, &feats)?;
    let q = g.leaf(vec![0.25; 16], &[1, 16], false)?;
    let out = mask_decode(&m, &pix, &q)?;
    assert_eq!(out.mask_logits.shape(), &[1, 256]);
    assert_eq!(out.queries.shape(), &[1, 16]);
    assert!(out.mask_logits.to_vec().iter().all(|v| v.is_finite()));
    Ok(())
}

#[test]
fn classification_reads_scaled_inner_products_against_conditions() -> Result<()> {
    let mut m = Model::<f64>::new(micro_cfg(), 15)?;
    let d = m.cfg.dim;
    m.params.set_data("cls/proj_q.w", eye(d))?;
    m.params.set_data("cls/proj_c.w", eye(d))?;
    let g = Graph::new();
    // Two queries: one along e0, one all-zero.
    let mut qd = vec![0.0; 2 * d];
    qd[0] = 1.0;
    let q = g.leaf(qd, &[2, d], false)?;
    // Three conditions: along e1, e2, and 2*e0.
    let mut cd = vec![0.0; 3 * d];
    cd[1] = 1.0;
    cd[d + 2] = 1.0;
    cd[2 * d] = 2.0;
    let c = g.leaf(cd, &[3, d], false)?;
    // sqrt(16) = 4, so the aligned pair scores exactly 2/4.
    let logits = classify(&m, &q, &c, false)?.to_vec();
    assert_eq!(logits, vec![0.0, 0.0, 0.5, 0.0, 0.0, 0.0]);
    // A zero query scores zero against everything, and the similarity bias
    // starts at zero, so sigmoid reads are exactly one half.
    let sim = classify(&m, &q, &c, true)?;
    assert_eq!(sim.to_vec()[3..6], [0.0, 0.0, 0.0]);
    assert!(sim.sigmoid().to_vec()[3..6].iter().all(|&v| v == 0.5));
    Ok(())
}

#[test]
fn positive_condition_scaling_preserves_the_argmax() -> Result<()> {
    let m = Model::<f64>::new(micro_cfg(), 17)?;
    let d = m.cfg.dim;
    let g = Graph::new();
    let q: Vec<f64> = (0..3 * d).map(|i| ((i * 7 + 1) % 23) as f64 / 23.0 - 0.5).collect();
    let c: Vec<f64> = (0..4 * d).map(|i| ((i * 11 + 5) % 29) as f64 / 29.0 - 0.5).collect();
    let c3: Vec<f64> = c.iter().map(|v| 3.0 * v).collect();
    let q = g.leaf(q, &[3, d], false)?;
    let a = classify(&m, &q, &g.leaf(c, &[4, d], false)?, false)?.to_vec();
    let b = classify(&m, &q, &g.leaf(c3, &[4, d], false)?, false)?.to_vec();
    for (x, y) in a.iter().zip(&b) {
        assert!((3.0 * x - y).abs() < 1e-12);
    }
    let argmax = |v: &[f64], row: usize| {
        v[row * 4..(row + 1) * 4]
            .iter()
            .enumerate()
            .max_by(|p, q| p.1.total_cmp(q.1))
            .unwrap()
            .0
    };
    for row in 0..3 {
        assert_eq!(argmax(&a, row), argmax(&b, row));
    }
    Ok(())
}

#[test]
fn predictions_are_deterministic_with_one_proposal_per_mask_token() -> Result<()> {
    let m = Model::<f64>::new(micro_cfg(), 19)?;
    let cond = ConditionPrompt::Category(vec!["red triangle".into(), "blue square".into()]);
    let p1 = predict(&m, &planes(64), TaskKind::Panoptic, &cond, true)?;
    let p2 = predict(&m, &planes(64), TaskKind::Panoptic, &cond, true)?;
    assert_eq!(p1.n(), 4);
    assert_eq!((p1.mask_h, p1.mask_w), (64, 64));
    assert_eq!(p1.class_logits[0].len(), 3);
    assert_eq!(p1.labels.last().map(String::as_str), Some("background"));
    assert!(p1.includes_background);
    for i in 0..p1.n() {
        assert_eq!(p1.proposals[i].mask_logits, p2.proposals[i].mask_logits);
        assert_eq!(p1.class_logits[i], p2.class_logits[i]);
    }
    let low = predict(&m, &planes(64), TaskKind::Panoptic, &cond, false)?;
    assert_eq!((low.mask_h, low.mask_w), (16, 16));
    assert_eq!(low.proposals[0].mask_logits.len(), 256);
    Ok(())
}

#[test]
fn every_mask_token_mode_yields_shape_conforming_proposals() -> Result<()> {
    for mode in [MaskTokenMode::Lm, MaskTokenMode::Direct, MaskTokenMode::Prefix] {
        let mut cfg = micro_cfg();
        cfg.mask_token_mode = mode;
        let m = Model::<f64>::new(cfg, 21)?;
        let cond = ConditionPrompt::Sentence("the red triangle".into());
        let p = predict(&m, &planes(64), TaskKind::Referring, &cond, false)?;
        assert_eq!(p.n(), 4, "{mode:?}");
        assert_eq!(p.class_logits[0].len(), 1);
        assert_eq!(p.condition_kind, ConditionKind::Sentence);
        assert!(!p.includes_background);
        assert!(p
            .proposals
            .iter()
            .all(|pr| pr.mask_logits.iter().all(|v| v.is_finite())));
    }
    Ok(())
}

#[test]
fn the_coupled_variant_uses_conditions_as_queries() -> Result<()> {
    let mut cfg = micro_cfg();
    cfg.decoupled = false;
    let m = Model::<f64>::new(cfg, 23)?;
    let cond = ConditionPrompt::Category(vec!["red triangle".into(), "blue square".into()]);
    let p = predict(&m, &planes(64), TaskKind::Panoptic, &cond, false)?;
    // One proposal per condition row: two categories plus background.
    assert_eq!(p.n(), 3);
    assert_eq!(p.class_logits.len(), 3);
    assert_eq!(p.class_logits[0].len(), 3);
    Ok(())
}

#[test]
fn visual_prompts_become_per_prompt_scores() -> Result<()> {
    let m = Model::<f64>::new(micro_cfg(), 25)?;
    let cond = ConditionPrompt::VisualPrior(vec![
        VisualPrompt::Point { x: 20.0, y: 20.0 },
        VisualPrompt::Box { x: 32.0, y: 32.0, w: 24.0, h: 20.0 },
    ]);
    let p = predict(&m, &planes(64), TaskKind::Interactive, &cond, false)?;
    assert_eq!(p.n(), 4);
    assert_eq!(p.class_logits[0].len(), 2);
    assert_eq!(p.labels, vec!["prompt 0", "prompt 1"]);
    assert_eq!(p.condition_kind, ConditionKind::VisualPrior);
    Ok(())
}

struct EndToEnd {
    cfg: ModelConfig,
    planes: Vec<f32>,
}

impl GradTarget for EndToEnd {
    fn loss<E: Elem>(&self, g: &Graph<E>, params: &ParamStore<E>) -> Result<Tensor<E>> {
        let m = Model { cfg: self.cfg.clone(), vocab: Vocabulary::new(), params: params.clone() };
        let feats = encode_image(g, &m.params, &m.cfg, &self.planes)?;
        let out = forward_for_task(
            &m,
            &feats,
            instruction_text(TaskKind::Referring),
            &ConditionPrompt::Sentence("the red triangle".into()),
        )?;
        let a = out.masks.mask_logits.sigmoid().mean_all();
        let b = out.class_logits.sum_all();
        a.add(&b)
    }
}

#[test]
fn full_pipeline_gradients_match_finite_differences() -> Result<()> {
    let cfg = ModelConfig {
        image_size: 32,
        dim: 8,
        lm_layers: 1,
        lm_heads: 2,
        context: 64,
        n_mask_tokens: 2,
        decoder_layers: 1,
        decoder_heads: 2,
        vision_channels: [2, 2, 2, 2],
        ..ModelConfig::default()
    };
    let m = Model::<f64>::new(cfg.clone(), 27)?;
    let target = EndToEnd { cfg, planes: planes(32) };
    let mut opts = GradCheckOpts::for_dtype("f64");
    opts.probes_per_param = 4;
    // Same reasoning as the encoder-to-LM check: keep the central difference
    // clear of relu kinks without losing f64 precision.
    opts.eps = 1e-6;
    let report = grad_check(&target, &m.params, &opts)?;
    assert!(report.max_rel_error < 1e-4, "gradient mismatch:\n{report}");
    Ok(())
}
