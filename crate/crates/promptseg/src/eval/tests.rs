use super::*;
use crate::config::{DataConfig, ModelConfig};
use crate::data;
use crate::maskgen::MaskProposal;
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet};

fn sentence_set(masks: Vec<Vec<f64>>, sims: Vec<f64>, w: usize, h: usize) -> ProposalSet {
    assert_eq!(masks.len(), sims.len());
    ProposalSet {
        proposals: masks.into_iter().map(|m| MaskProposal { mask_logits: m, query: Vec::new() }).collect(),
        class_logits: sims.into_iter().map(|s| vec![s]).collect(),
        labels: vec!["referent".to_string()],
        includes_background: false,
        condition_kind: ConditionKind::Sentence,
        mask_h: h,
        mask_w: w,
    }
}

fn category_set(
    masks: Vec<Vec<f64>>,
    class_logits: Vec<Vec<f64>>,
    labels: &[&str],
    w: usize,
    h: usize,
) -> ProposalSet {
    ProposalSet {
        proposals: masks.into_iter().map(|m| MaskProposal { mask_logits: m, query: Vec::new() }).collect(),
        class_logits,
        labels: labels.iter().map(|s| s.to_string()).collect(),
        includes_background: true,
        condition_kind: ConditionKind::Category,
        mask_h: h,
        mask_w: w,
    }
}

fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinMask {
    BinMask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
}

fn rand_mask(r: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> BinMask {
    BinMask::from_fn(w, h, |_, _| r.gen_bool(density))
}

// ---- panoptic merge -----------------------------------------------------------

#[test]
fn merge_matches_the_per_pixel_argmax_oracle() -> Result<()> {
    // Two proposals overlapping on columns 1-2 of a 4x4 canvas.
    let mask_a: Vec<f64> = (0..16).map(|p| if p % 4 < 3 { 2.0 } else { -2.0 }).collect();
    let mask_b: Vec<f64> = (0..16).map(|p| if p % 4 >= 1 { 1.0 } else { -3.0 }).collect();
    let ps = category_set(
        vec![mask_a.clone(), mask_b.clone()],
        vec![vec![3.0, 0.0], vec![1.0, 0.0]],
        &["thing", "background"],
        4,
        4,
    );
    let pred = infer_panoptic(&ps, 0.4)?;
    pred.validate()?;

    // Independent per-pixel evaluation of the same rule.
    let score = |logits: &[f64]| {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e[0] / z
    };
    let (sa, sb) = (score(&[3.0, 0.0]), score(&[1.0, 0.0]));
    let sg = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut want = vec![0u32; 16];
    for p in 0..16 {
        let ca = if mask_a[p] > 0.0 { sa * sg(mask_a[p]) } else { 0.0 };
        let cb = if mask_b[p] > 0.0 { sb * sg(mask_b[p]) } else { 0.0 };
        want[p] = if ca >= cb && ca > 0.0 {
            1
        } else if cb > ca {
            2
        } else {
            0
        };
    }
    assert_eq!(pred.segment_map, want);

    assert_eq!(pred.segments.len(), 2);
    assert_eq!(pred.segments[0].class, "thing");
    assert_eq!(pred.segments[1].class, "thing");
    assert!((pred.segments[0].score - sa).abs() < 1e-12);
    assert!((pred.segments[1].score - sb).abs() < 1e-12);
    Ok(())
}

#[test]
fn merge_drops_background_and_under_threshold_proposals() -> Result<()> {
    // Disjoint one-hot masks so pixel competition stays out of the picture.
    // Proposal 0 prefers background, proposal 1 is a weak "a" (score 0.5
    // exactly), proposal 2 a confident "b".
    let hot = |i: usize| (0..4).map(|p| if p == i { 5.0 } else { -5.0 }).collect::<Vec<f64>>();
    let ps = category_set(
        vec![hot(0), hot(1), hot(2)],
        vec![vec![0.0, 0.0, 4.0], vec![0.0, 0.0, f64::NEG_INFINITY], vec![-1.0, 6.0, 0.0]],
        &["a", "b", "background"],
        2,
        2,
    );
    // Threshold 0.5: the tied-logit proposal scores exactly 0.5 and stays
    // (the drop rule is strictly-below).
    let pred = infer_panoptic(&ps, 0.5)?;
    assert_eq!(pred.segments.len(), 2);
    assert_eq!(pred.segments[0].class, "a");
    assert_eq!(pred.segments[0].score, 0.5);
    assert_eq!(pred.segments[1].class, "b");

    // Nudging the threshold above 0.5 drops it; the background proposal is
    // dropped at any threshold, so only "b" is left.
    let pred = infer_panoptic(&ps, 0.500001)?;
    assert_eq!(pred.segments.len(), 1);
    assert_eq!(pred.segments[0].class, "b");

    // Nothing survives: all-void map, empty info list.
    let ps = category_set(vec![hot(0)], vec![vec![0.0, 0.0, 9.0]], &["a", "b", "background"], 2, 2);
    let pred = infer_panoptic(&ps, 0.4)?;
    assert_eq!(pred.segment_map, vec![0; 4]);
    assert!(pred.segments.is_empty());
    pred.validate()?;
    Ok(())
}

#[test]
fn merge_keeps_disjoint_confident_proposals_apart() -> Result<()> {
    let left: Vec<f64> = (0..16).map(|p| if p % 4 < 2 { 8.0 } else { -8.0 }).collect();
    let right: Vec<f64> = (0..16).map(|p| if p % 4 >= 2 { 8.0 } else { -8.0 }).collect();
    let ps = category_set(
        vec![left, right],
        vec![vec![5.0, 0.0, 0.0], vec![0.0, 5.0, 0.0]],
        &["a", "b", "background"],
        4,
        4,
    );
    let pred = infer_panoptic(&ps, 0.4)?;
    pred.validate()?;
    assert_eq!(pred.segments.len(), 2);
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(pred.segment_map[y * 4 + x], if x < 2 { 1 } else { 2 });
        }
    }
    Ok(())
}

#[test]
fn merge_rejects_misuse() {
    let ps = sentence_set(vec![vec![1.0; 4]], vec![0.3], 2, 2);
    assert!(infer_panoptic(&ps, 0.4).is_err());

    let ps = category_set(vec![vec![1.0; 4]], vec![vec![0.0, 0.0]], &["a", "background"], 2, 2);
    assert!(infer_panoptic(&ps, -0.1).is_err());
    assert!(infer_panoptic(&ps, 1.5).is_err());

    // Class row narrower than the label list.
    let ps = category_set(vec![vec![1.0; 4]], vec![vec![0.0]], &["a", "background"], 2, 2);
    assert!(infer_panoptic(&ps, 0.4).is_err());
}

// ---- referring / multi-target rules --------------------------------------------

#[test]
fn top1_selection_follows_the_similarity_ranking() -> Result<()> {
    let m: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..4).map(|p| if p == i { 4.0 } else { -4.0 }).collect())
        .collect();

    // Hand-set scores: the middle proposal wins.
    let ps = sentence_set(m.clone(), vec![0.2, 0.9, 0.4], 2, 2);
    assert_eq!(infer_referring(&ps)?.bits(), &[false, true, false, false]);

    // A single proposal is returned as-is.
    let ps = sentence_set(vec![m[2].clone()], vec![-3.0], 2, 2);
    assert!(infer_referring(&ps)?.get(0, 1));

    // Ties break toward the lowest index.
    let ps = sentence_set(m.clone(), vec![0.7, 0.7, 0.1], 2, 2);
    assert_eq!(infer_referring(&ps)?.bits(), ps.binarized(0).bits());

    let empty = sentence_set(vec![], vec![], 2, 2);
    assert!(infer_referring(&empty).is_err());
    let cat = category_set(vec![vec![0.0; 4]], vec![vec![0.0, 0.0]], &["a", "background"], 2, 2);
    assert!(infer_referring(&cat).is_err());
    Ok(())
}

#[test]
fn union_rule_follows_the_similarity_threshold() -> Result<()> {
    let masks: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..4).map(|p| if p == i { 4.0 } else { -4.0 }).collect())
        .collect();
    // Sigmoid scores ~0.7, 0.5, ~0.61: the rule keeps 0 and 2.
    let sims = vec![(7.0f64 / 3.0).ln(), 0.0, (61.0f64 / 39.0).ln()];
    let got = infer_gres(&sentence_set(masks.clone(), sims, 2, 2), 0.6)?;
    assert_eq!(got.bits(), &[true, false, true, false]);

    // Scores at or below the threshold contribute nothing; sigmoid(0) is
    // exactly 0.5, so this also pins the strict inequality.
    let got = infer_gres(&sentence_set(masks.clone(), vec![0.0, -1.0, 0.0], 2, 2), 0.5)?;
    assert!(got.is_empty(), "empty union is the no-target prediction");

    // Identical masks above threshold: union is idempotent.
    let same = vec![masks[0].clone(), masks[0].clone()];
    let got = infer_gres(&sentence_set(same, vec![2.0, 3.0], 2, 2), 0.6)?;
    assert_eq!(got.bits(), &[true, false, false, false]);
    Ok(())
}

#[test]
fn union_rule_extremes_cover_nothing_and_everything() -> Result<()> {
    let mut r = rng::stream(3, "test/gres-extremes");
    for _ in 0..100 {
        let n = r.gen_range(1..5);
        let masks: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..16).map(|_| r.gen_range(-6.0..6.0)).collect())
            .collect();
        let sims: Vec<f64> = (0..n).map(|_| r.gen_range(-8.0..8.0)).collect();
        let ps = sentence_set(masks, sims, 4, 4);

        assert!(infer_gres(&ps, 1.0)?.is_empty());

        let mut all = BinMask::new(4, 4);
        for i in 0..ps.n() {
            all.union_with(&ps.binarized(i));
        }
        assert_eq!(infer_gres(&ps, 0.0)?.bits(), all.bits());
    }
    Ok(())
}

// ---- video propagation ----------------------------------------------------------

fn tiny_model(image: usize, seed: u64) -> Model<f32> {
    let cfg = ModelConfig {
        image_size: image,
        dim: 8,
        lm_layers: 1,
        lm_heads: 2,
        context: 96,
        n_mask_tokens: 2,
        decoder_layers: 1,
        decoder_heads: 2,
        vision_channels: [2, 3, 4, 5],
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

fn scene(image: usize, seed: u64) -> data::SegSample {
    let dc = DataConfig {
        seed,
        n_train: 1,
        n_val: 0,
        n_zeroshot: 0,
        image_size: image,
        min_shapes: 1,
        max_shapes: 2,
        ..DataConfig::default()
    };
    data::gen_shapeworld(&dc).unwrap().train.remove(0)
}

#[test]
fn propagation_returns_the_reference_for_a_single_frame() -> Result<()> {
    let model = tiny_model(32, 11);
    let s = scene(32, 4);
    let reference = s.instances[0].visible.clone();
    let track = propagate_video(&model, &[s.image.clone()], &reference)?;
    assert_eq!(track.masks.len(), 1);
    assert_eq!(track.masks[0].bits(), reference.bits());
    assert_eq!(track.carried, vec![false]);
    Ok(())
}

#[test]
fn propagation_is_deterministic_for_fixed_weights() -> Result<()> {
    let model = tiny_model(32, 11);
    let s = scene(32, 4);
    let frames: Vec<RgbImage> =
        (0..3).map(|t| s.image.translated(2 * t, t)).collect();
    let reference = s.instances[0].visible.clone();
    let a = propagate_video(&model, &frames, &reference)?;
    let b = propagate_video(&model, &frames, &reference)?;
    assert_eq!(a.masks.len(), 3);
    for (ma, mb) in a.masks.iter().zip(&b.masks) {
        assert_eq!(ma.bits(), mb.bits());
    }
    assert_eq!(a.carried, b.carried);
    Ok(())
}

#[test]
fn propagation_validates_its_inputs() {
    let model = tiny_model(32, 11);
    let s = scene(32, 4);
    let reference = s.instances[0].visible.clone();

    assert!(propagate_video(&model, &[], &reference).is_err());
    assert!(propagate_video(&model, &[s.image.clone()], &BinMask::new(32, 32)).is_err());
    assert!(propagate_video(&model, &[s.image.clone()], &BinMask::from_fn(16, 16, |_, _| true)).is_err());
    assert!(propagate_video(&model, &[RgbImage::new(16, 16)], &reference).is_err());
}

#[test]
fn empty_predictions_reuse_the_previous_mask() {
    let prev = rect(4, 4, 0, 0, 2, 2);
    let (m, carried) = fallback_to_previous(BinMask::new(4, 4), &prev);
    assert!(carried);
    assert_eq!(m.bits(), prev.bits());

    let pred = rect(4, 4, 1, 1, 3, 3);
    let (m, carried) = fallback_to_previous(pred.clone(), &prev);
    assert!(!carried);
    assert_eq!(m.bits(), pred.bits());
}

// ---- scalar mask metrics ---------------------------------------------------------

#[test]
fn ciou_matches_hand_worked_cases() -> Result<()> {
    let a = rect(4, 4, 0, 0, 2, 2);
    let b = rect(4, 4, 1, 0, 3, 2);
    assert_eq!(ciou(&[a.clone(), b.clone()], &[a.clone(), b.clone()])?, 1.0);

    // Sample A: I=2, U=4. Sample B: I=0, U=2. Cumulative 2/6.
    let p1 = rect(8, 8, 0, 0, 2, 2);
    let g1 = rect(8, 8, 0, 0, 2, 1);
    assert_eq!((p1.intersection_area(&g1), p1.union_area(&g1)), (2, 4));
    let p2 = rect(8, 8, 4, 4, 5, 5);
    let g2 = rect(8, 8, 6, 6, 7, 7);
    assert_eq!((p2.intersection_area(&g2), p2.union_area(&g2)), (0, 2));
    let got = ciou(&[p1, p2], &[g1, g2])?;
    assert!((got - 2.0 / 6.0).abs() < 1e-12);

    // All-empty predictions against nonempty ground truth.
    let empty = BinMask::new(4, 4);
    assert_eq!(ciou(&[empty.clone(), empty.clone()], &[a.clone(), b])?, 0.0);

    assert!(ciou(&[a.clone()], &[]).is_err());
    assert!(ciou(&[], &[]).is_err());
    assert!(ciou(&[a], &[BinMask::new(2, 2)]).is_err());
    Ok(())
}

#[test]
fn giou_matches_hand_worked_cases() -> Result<()> {
    let empty = BinMask::new(4, 4);
    // Correctly predicted no-target samples score 1 each.
    assert_eq!(giou_gres(&[empty.clone(), empty.clone()], &[empty.clone(), empty.clone()])?, 1.0);

    // Per-sample IoUs 1.0 and 0.5 average to 0.75.
    let a = rect(4, 4, 0, 0, 2, 2);
    let half = rect(4, 4, 0, 0, 2, 1);
    let got = giou_gres(&[a.clone(), half], &[a.clone(), a.clone()])?;
    assert!((got - 0.75).abs() < 1e-12);

    // An empty prediction against a nonempty target contributes 0, and a
    // spurious prediction on a no-target sample also contributes 0.
    let got = giou_gres(&[empty.clone(), a.clone()], &[a.clone(), empty.clone()])?;
    assert_eq!(got, 0.0);
    Ok(())
}

#[test]
fn miou_matches_hand_worked_cases() -> Result<()> {
    let v = VOID_CLASS;
    // Perfect prediction over two classes.
    let gt = vec![vec![0, 0, 1, 1, v, v]];
    assert_eq!(miou(&gt, &gt, 3)?, 1.0);

    // One class, prediction covers half the target with no false positives.
    let pred = vec![vec![0, v, v, v]];
    let gtm = vec![vec![0, 0, v, v]];
    assert_eq!(miou(&pred, &gtm, 2)?, 0.5);

    // Class 2 never appears in the ground truth: excluded even though the
    // prediction uses it (those pixels still count against class 0's union).
    let pred = vec![vec![0, 2, v, v]];
    let gtm = vec![vec![0, 0, v, v]];
    assert_eq!(miou(&pred, &gtm, 3)?, 0.5);

    assert!(miou(&[], &[], 2).is_err());
    assert!(miou(&[vec![0]], &[vec![0, 1]], 2).is_err());
    assert!(miou(&[vec![5]], &[vec![0]], 2).is_err());
    assert!(miou(&[vec![v]], &[vec![v]], 2).is_err(), "no classes present");
    Ok(())
}

// ---- panoptic quality ------------------------------------------------------------

#[test]
fn pq_matches_hand_worked_cases() -> Result<()> {
    let gt = PanopticPrediction::from_masks(
        4,
        4,
        &[
            (rect(4, 4, 0, 0, 2, 4), "a".to_string(), 1.0),
            (rect(4, 4, 2, 0, 4, 4), "b".to_string(), 1.0),
        ],
    )?;
    let r = panoptic_quality(&gt, &gt)?;
    assert_eq!(r.value("PQ")?, 1.0);
    assert_eq!(r.value("SQ")?, 1.0);
    assert_eq!(r.value("RQ")?, 1.0);
    assert_eq!(r.counts["TP"], 2);
    assert_eq!((r.counts["FP"], r.counts["FN"]), (0, 0));

    // One pair at IoU 4/5: PQ = SQ = 0.8, RQ = 1.
    let gt = PanopticPrediction::from_masks(8, 8, &[(rect(8, 8, 0, 0, 5, 1), "a".into(), 1.0)])?;
    let pred = PanopticPrediction::from_masks(8, 8, &[(rect(8, 8, 0, 0, 4, 1), "a".into(), 0.9)])?;
    let r = panoptic_quality(&pred, &gt)?;
    assert!((r.value("PQ")? - 0.8).abs() < 1e-12);
    assert!((r.value("SQ")? - 0.8).abs() < 1e-12);
    assert_eq!(r.value("RQ")?, 1.0);

    // IoU exactly 1/2 (3 px vs 3 px overlapping in 2) is not a match.
    let gt = PanopticPrediction::from_masks(8, 8, &[(rect(8, 8, 0, 0, 3, 1), "a".into(), 1.0)])?;
    let pred = PanopticPrediction::from_masks(8, 8, &[(rect(8, 8, 1, 0, 4, 1), "a".into(), 1.0)])?;
    let r = panoptic_quality(&pred, &gt)?;
    assert_eq!(r.value("PQ")?, 0.0);
    assert_eq!((r.counts["TP"], r.counts["FP"], r.counts["FN"]), (0, 1, 1));

    // Classes from either side enter the mean: a perfect "a" plus a
    // hallucinated "b" and a missed "c" average PQ (1 + 0 + 0) / 3.
    let gt = PanopticPrediction::from_masks(
        4,
        4,
        &[(rect(4, 4, 0, 0, 2, 4), "a".into(), 1.0), (rect(4, 4, 2, 0, 4, 4), "c".into(), 1.0)],
    )?;
    let pred = PanopticPrediction::from_masks(
        4,
        4,
        &[(rect(4, 4, 0, 0, 2, 4), "a".into(), 1.0), (rect(4, 4, 2, 0, 4, 4), "b".into(), 1.0)],
    )?;
    let r = panoptic_quality(&pred, &gt)?;
    assert!((r.value("PQ")? - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.per_class["a"]["pq"], 1.0);
    assert_eq!(r.per_class["b"]["fp"], 1.0);
    assert_eq!(r.per_class["c"]["fn"], 1.0);

    // Two all-void maps agree perfectly.
    let r = panoptic_quality(&PanopticPrediction::all_void(4, 4), &PanopticPrediction::all_void(4, 4))?;
    assert_eq!(r.value("PQ")?, 1.0);
    Ok(())
}

#[test]
fn pq_rejects_malformed_inputs() {
    // Overlapping segments violate the construction contract.
    let parts = [
        (rect(4, 4, 0, 0, 3, 4), "a".to_string(), 1.0),
        (rect(4, 4, 2, 0, 4, 4), "b".to_string(), 1.0),
    ];
    assert!(PanopticPrediction::from_masks(4, 4, &parts).is_err());
    assert!(PanopticPrediction::from_masks(4, 4, &[(BinMask::new(4, 4), "a".into(), 1.0)]).is_err());
    assert!(PanopticPrediction::from_masks(4, 4, &[(rect(2, 2, 0, 0, 1, 1), "a".into(), 1.0)]).is_err());

    let ok = PanopticPrediction::from_masks(4, 4, &[(rect(4, 4, 0, 0, 2, 2), "a".into(), 1.0)]).unwrap();

    // Duplicate ids in the info list.
    let mut bad = ok.clone();
    bad.segments.push(SegmentInfo { id: 1, class: "b".into(), score: 0.5 });
    assert!(bad.validate().is_err());

    // Map pixels with no info record.
    let mut bad = ok.clone();
    bad.segment_map[15] = 7;
    assert!(bad.validate().is_err());

    // Info record owning no pixels.
    let mut bad = ok.clone();
    bad.segments.push(SegmentInfo { id: 9, class: "b".into(), score: 0.5 });
    assert!(bad.validate().is_err());

    // Reserved void id.
    let mut bad = ok.clone();
    bad.segments[0].id = 0;
    assert!(bad.validate().is_err());

    // Resolution mismatch between the two sides.
    let other = PanopticPrediction::all_void(8, 8);
    assert!(panoptic_quality(&ok, &other).is_err());
}

#[test]
fn class_maps_merge_segments_by_class() -> Result<()> {
    let pp = PanopticPrediction::from_masks(
        1,
        4,
        &[
            (rect(4, 1, 0, 0, 1, 1), "b".to_string(), 1.0),
            (rect(4, 1, 1, 0, 2, 1), "a".to_string(), 1.0),
            (rect(4, 1, 2, 0, 3, 1), "b".to_string(), 1.0),
        ],
    )?;
    let classes = vec!["a".to_string(), "b".to_string()];
    assert_eq!(pp.class_map(&classes)?, vec![1, 0, 1, VOID_CLASS]);
    assert!(pp.class_map(&classes[..1].to_vec()).is_err());
    Ok(())
}

#[test]
fn ground_truth_panoptic_maps_cover_every_instance() -> Result<()> {
    let s = scene(32, 9);
    let gt = panoptic_gt(&s)?;
    gt.validate()?;
    assert_eq!(gt.segments.len(), s.instances.len());
    for (seg, inst) in gt.segments.iter().zip(&s.instances) {
        assert_eq!(seg.class, inst.category());
        assert_eq!(seg.score, 1.0);
    }
    let covered = gt.segment_map.iter().filter(|&&v| v != 0).count();
    let total: usize = s.instances.iter().map(|i| i.visible.area()).sum();
    assert_eq!(covered, total);
    Ok(())
}

// ---- boundary metric --------------------------------------------------------------

#[test]
fn boundary_extracts_one_pixel_contours() {
    // A 3x3 block: the ring is boundary, the center is interior.
    let m = rect(8, 8, 2, 2, 5, 5);
    let b = boundary(&m);
    assert_eq!(b.area(), 8);
    assert!(!b.get(3, 3));
    assert!(b.get(2, 2) && b.get(4, 4) && b.get(3, 2));

    // The image border counts as outside: a full-frame mask has a ring
    // contour.
    let full = BinMask::from_fn(4, 4, |_, _| true);
    let b = boundary(&full);
    assert_eq!(b.area(), 12);
    assert!(!b.get(1, 1) && !b.get(2, 2));

    assert!(boundary(&BinMask::new(4, 4)).is_empty());
}

#[test]
fn jf_matches_hand_worked_cases() -> Result<()> {
    let sq = rect(8, 8, 1, 1, 5, 5);
    let (j, f, jf) = j_and_f(&[sq.clone(), sq.clone()], &[sq.clone(), sq.clone()])?;
    assert_eq!((j, f, jf), (1.0, 1.0, 1.0));

    // Frame 2 predicts nothing: J and F both drop to 0 there.
    let empty = BinMask::new(8, 8);
    let (j, f, jf) = j_and_f(&[sq.clone(), empty], &[sq.clone(), sq.clone()])?;
    assert_eq!((j, f), (0.5, 0.5));
    assert_eq!(jf, 0.5);

    // Shifting a 4x4 square by one pixel: every contour pixel of either
    // side is within the 1-px tolerance of the other contour, so F = 1
    // while J = 12/20.
    let shifted = rect(8, 8, 2, 1, 6, 5);
    let (j, f, _) = j_and_f(&[shifted], &[sq])?;
    assert!((j - 12.0 / 20.0).abs() < 1e-12);
    assert_eq!(boundary_tolerance(8, 8), 1.0);
    assert_eq!(f, 1.0);
    Ok(())
}

// ---- brute-force oracles ------------------------------------------------------------

fn pixel_iou(p: &BinMask, g: &BinMask) -> f64 {
    let mut i = 0usize;
    let mut u = 0usize;
    for y in 0..p.h {
        for x in 0..p.w {
            i += (p.get(x, y) && g.get(x, y)) as usize;
            u += (p.get(x, y) || g.get(x, y)) as usize;
        }
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

#[test]
fn ciou_matches_the_brute_force_oracle() -> Result<()> {
    let mut r = rng::stream(21, "test/ciou-oracle");
    for _ in 0..600 {
        let n = r.gen_range(1..5);
        let d = r.gen_range(0.05..0.6);
        let preds: Vec<BinMask> = (0..n).map(|_| rand_mask(&mut r, 8, 8, d)).collect();
        let gts: Vec<BinMask> = (0..n).map(|_| rand_mask(&mut r, 8, 8, d)).collect();

        let mut i = 0usize;
        let mut u = 0usize;
        for (p, g) in preds.iter().zip(&gts) {
            for y in 0..8 {
                for x in 0..8 {
                    i += (p.get(x, y) && g.get(x, y)) as usize;
                    u += (p.get(x, y) || g.get(x, y)) as usize;
                }
            }
        }
        let want = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        let got = ciou(&preds, &gts)?;
        assert!((got - want).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&got));
    }
    Ok(())
}

#[test]
fn giou_matches_the_brute_force_oracle() -> Result<()> {
    let mut r = rng::stream(22, "test/giou-oracle");
    for _ in 0..600 {
        let n = r.gen_range(1..5);
        // Low densities make genuinely empty masks (no-target samples) common.
        let d = r.gen_range(0.0..0.4);
        let preds: Vec<BinMask> = (0..n).map(|_| rand_mask(&mut r, 8, 8, d)).collect();
        let gts: Vec<BinMask> = (0..n).map(|_| rand_mask(&mut r, 8, 8, d)).collect();

        let mut want = 0.0;
        for (p, g) in preds.iter().zip(&gts) {
            want += if g.area() == 0 && p.area() == 0 {
                1.0
            } else if g.area() == 0 || p.area() == 0 {
                0.0
            } else {
                pixel_iou(p, g)
            };
        }
        want /= n as f64;
        let got = giou_gres(&preds, &gts)?;
        assert!((got - want).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&got));
    }
    Ok(())
}

#[test]
fn miou_matches_the_brute_force_oracle() -> Result<()> {
    let mut r = rng::stream(23, "test/miou-oracle");
    let n_classes = 3usize;
    let mut ran = 0;
    for _ in 0..700 {
        let n = r.gen_range(1..4);
        let gen_map = |r: &mut ChaCha8Rng| -> Vec<u32> {
            (0..64)
                .map(|_| {
                    let v = r.gen_range(0..n_classes as u32 + 1);
                    if v == n_classes as u32 {
                        VOID_CLASS
                    } else {
                        v
                    }
                })
                .collect()
        };
        let preds: Vec<Vec<u32>> = (0..n).map(|_| gen_map(&mut r)).collect();
        let gts: Vec<Vec<u32>> = (0..n).map(|_| gen_map(&mut r)).collect();

        let mut sum = 0.0;
        let mut included = 0usize;
        for c in 0..n_classes as u32 {
            let gt_any = gts.iter().flatten().any(|&v| v == c);
            if !gt_any {
                continue;
            }
            let mut i = 0usize;
            let mut u = 0usize;
            for (pm, gm) in preds.iter().zip(&gts) {
                for (&p, &g) in pm.iter().zip(gm) {
                    i += (p == c && g == c) as usize;
                    u += (p == c || g == c) as usize;
                }
            }
            sum += i as f64 / u as f64;
            included += 1;
        }
        if included == 0 {
            continue; // no classes in gt: the metric refuses, tested elsewhere
        }
        ran += 1;
        let got = miou(&preds, &gts, n_classes)?;
        assert!((got - sum / included as f64).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&got));
    }
    assert!(ran >= 500, "only {ran} informative trials");
    Ok(())
}

fn random_panoptic(r: &mut ChaCha8Rng, h: usize, w: usize) -> PanopticPrediction {
    let n_ids = r.gen_range(0..5u32);
    let map: Vec<u32> = (0..h * w).map(|_| r.gen_range(0..n_ids + 1)).collect();
    let present: BTreeSet<u32> = map.iter().copied().filter(|&v| v != 0).collect();
    let segments = present
        .into_iter()
        .map(|id| SegmentInfo {
            id,
            class: if r.gen_bool(0.5) { "a".to_string() } else { "b".to_string() },
            score: 1.0,
        })
        .collect();
    PanopticPrediction { h, w, segment_map: map, segments }
}

/// Straight-line reimplementation on pixel sets, asserting the
/// IoU > 1/2 uniqueness property along the way.
fn pq_oracle(pred: &PanopticPrediction, gt: &PanopticPrediction) -> (f64, f64, f64) {
    let collect = |pp: &PanopticPrediction| -> HashMap<u32, HashSet<usize>> {
        let mut m: HashMap<u32, HashSet<usize>> = HashMap::new();
        for (p, &id) in pp.segment_map.iter().enumerate() {
            if id != 0 {
                m.entry(id).or_default().insert(p);
            }
        }
        m
    };
    let (pset, gset) = (collect(pred), collect(gt));
    let classes: BTreeSet<String> =
        pred.segments.iter().chain(&gt.segments).map(|s| s.class.clone()).collect();
    if classes.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let (mut pq, mut sq, mut rq) = (0.0, 0.0, 0.0);
    for class in &classes {
        let pids: Vec<u32> =
            pred.segments.iter().filter(|s| s.class == *class).map(|s| s.id).collect();
        let gids: Vec<u32> =
            gt.segments.iter().filter(|s| s.class == *class).map(|s| s.id).collect();
        let mut used_p = HashSet::new();
        let mut used_g = HashSet::new();
        let mut ious = Vec::new();
        for &p in &pids {
            for &g in &gids {
                let inter = pset[&p].intersection(&gset[&g]).count();
                let union = pset[&p].union(&gset[&g]).count();
                if inter as f64 / union as f64 > 0.5 {
                    assert!(used_p.insert(p), "prediction matched twice");
                    assert!(used_g.insert(g), "ground truth matched twice");
                    ious.push(inter as f64 / union as f64);
                }
            }
        }
        let tp = ious.len();
        let denom = tp as f64 + 0.5 * (pids.len() - tp) as f64 + 0.5 * (gids.len() - tp) as f64;
        let s: f64 = ious.iter().sum();
        pq += s / denom;
        sq += if tp > 0 { s / tp as f64 } else { 0.0 };
        rq += tp as f64 / denom;
    }
    let n = classes.len() as f64;
    (pq / n, sq / n, rq / n)
}

#[test]
fn pq_matches_the_brute_force_oracle() -> Result<()> {
    let mut r = rng::stream(24, "test/pq-oracle");
    for _ in 0..600 {
        let pred = random_panoptic(&mut r, 8, 8);
        let gt = random_panoptic(&mut r, 8, 8);
        let (pq, sq, rq) = pq_oracle(&pred, &gt);
        let rep = panoptic_quality(&pred, &gt)?;
        assert!((rep.value("PQ")? - pq).abs() < 1e-6);
        assert!((rep.value("SQ")? - sq).abs() < 1e-6);
        assert!((rep.value("RQ")? - rq).abs() < 1e-6);
        for name in ["PQ", "SQ", "RQ"] {
            assert!((0.0..=1.0).contains(&rep.value(name)?));
        }
    }
    Ok(())
}

/// Contour matching by explicit nearest-distance search.
fn f_oracle(p: &BinMask, g: &BinMask) -> f64 {
    let contour = |m: &BinMask| -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for y in 0..m.h {
            for x in 0..m.w {
                if !m.get(x, y) {
                    continue;
                }
                let on_edge = x == 0 || y == 0 || x + 1 == m.w || y + 1 == m.h;
                if on_edge
                    || !m.get(x - 1, y)
                    || !m.get(x + 1, y)
                    || !m.get(x, y - 1)
                    || !m.get(x, y + 1)
                {
                    out.push((x as i64, y as i64));
                }
            }
        }
        out
    };
    let pc = contour(p);
    let gc = contour(g);
    match (pc.is_empty(), gc.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let tol = (0.01 * ((p.h * p.h + p.w * p.w) as f64).sqrt()).ceil();
    let matched = |a: &[(i64, i64)], b: &[(i64, i64)]| -> f64 {
        let hits = a
            .iter()
            .filter(|(x, y)| {
                b.iter().any(|(bx, by)| {
                    let (dx, dy) = (x - bx, y - by);
                    (dx * dx + dy * dy) as f64 <= tol * tol
                })
            })
            .count();
        hits as f64 / a.len() as f64
    };
    let precision = matched(&pc, &gc);
    let recall = matched(&gc, &pc);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[test]
fn jf_matches_the_brute_force_oracle() -> Result<()> {
    let mut r = rng::stream(25, "test/jf-oracle");
    for trial in 0..600 {
        let n = r.gen_range(1..4);
        // Mix scattered noise with compact blocks so contours vary.
        let gen = |r: &mut ChaCha8Rng| -> BinMask {
            if r.gen_bool(0.5) {
                let d = r.gen_range(0.0..0.7);
                rand_mask(r, 8, 8, d)
            } else {
                let x0 = r.gen_range(0..6);
                let y0 = r.gen_range(0..6);
                let x1 = r.gen_range(x0 + 1..9.min(x0 + 5));
                let y1 = r.gen_range(y0 + 1..9.min(y0 + 5));
                rect(8, 8, x0, y0, x1.min(8), y1.min(8))
            }
        };
        let preds: Vec<BinMask> = (0..n).map(|_| gen(&mut r)).collect();
        let gts: Vec<BinMask> = (0..n).map(|_| gen(&mut r)).collect();

        let want_j: f64 = preds.iter().zip(&gts).map(pairwise_iou).sum::<f64>() / n as f64;
        let want_f: f64 = preds.iter().zip(&gts).map(|(p, g)| f_oracle(p, g)).sum::<f64>() / n as f64;
        let (j, f, jf) = j_and_f(&preds, &gts)?;
        assert!((j - want_j).abs() < 1e-6, "J off at trial {trial}");
        assert!((f - want_f).abs() < 1e-6, "F off at trial {trial}");
        assert!((jf - 0.5 * (want_j + want_f)).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&f));
    }
    Ok(())
}

fn pairwise_iou((p, g): (&BinMask, &BinMask)) -> f64 {
    pixel_iou(p, g)
}

// ---- reports -----------------------------------------------------------------------

#[test]
fn reports_render_as_stable_structured_text() -> Result<()> {
    let gt = PanopticPrediction::from_masks(8, 8, &[(rect(8, 8, 0, 0, 5, 1), "a".into(), 1.0)])?;
    let pred = PanopticPrediction::from_masks(8, 8, &[(rect(8, 8, 0, 0, 4, 1), "a".into(), 0.9)])?;
    let r = panoptic_quality(&pred, &gt)?;
    let text = r.to_string();
    assert!(text.contains("metric\tPQ\t0.800000"));
    assert!(text.contains("count\tTP\t1"));
    assert!(text.contains("class\ta\t"));
    assert!(text.contains("pq=0.800000"));
    assert_eq!(text, r.to_string());
    assert!(r.value("nope").is_err());
    Ok(())
}
