//! Inference rules and segmentation metrics.
//!
//! Inference turns a detached [`ProposalSet`] into a final prediction, one
//! rule per task family: panoptic merge, top-1 referring selection,
//! thresholded multi-target union, and frame-to-frame mask propagation.
//! Metrics are pure functions of mask geometry; each one comes with an
//! independent brute-force oracle in the tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::config::TaskKind;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mask::BinMask;
use crate::maskgen::{self, forward_with_condition, ProposalSet};
use crate::model::{vision, vl_align, Model};
use crate::schema::{self, instruction_text, ConditionInput, ConditionKind, VisualPrompt};
use crate::tensor::{Elem, Graph};

/// Minimum max-softmax score for a proposal to survive the panoptic merge.
pub const DEFAULT_PANOPTIC_THRESHOLD: f64 = 0.4;
/// Similarity cutoff for the multi-target union rule.
pub const DEFAULT_GRES_THRESHOLD: f64 = 0.6;
/// Label-map id for pixels that belong to no class.
pub const VOID_CLASS: u32 = u32::MAX;

// ---------------------------------------------------------------------------
// Panoptic predictions

#[derive(Debug, Clone)]
pub struct SegmentInfo {
    pub id: u32,
    pub class: String,
    pub score: f64,
}

/// A full-image segmentation: a map of segment ids (0 = void) plus one info
/// record per segment.
#[derive(Debug, Clone)]
pub struct PanopticPrediction {
    pub h: usize,
    pub w: usize,
    /// Row-major, `h * w` entries; 0 marks pixels owned by no segment.
    pub segment_map: Vec<u32>,
    pub segments: Vec<SegmentInfo>,
}

impl PanopticPrediction {
    pub fn all_void(h: usize, w: usize) -> Self {
        PanopticPrediction { h, w, segment_map: vec![0; h * w], segments: Vec::new() }
    }

    /// Build from disjoint masks; segment ids are 1-based positions in
    /// `parts`. Overlapping or empty masks violate the contract.
    pub fn from_masks(h: usize, w: usize, parts: &[(BinMask, String, f64)]) -> Result<Self> {
        let mut map = vec![0u32; h * w];
        let mut segments = Vec::with_capacity(parts.len());
        for (i, (m, class, score)) in parts.iter().enumerate() {
            if m.w != w || m.h != h {
                return Err(Error::shape(
                    "from_masks",
                    format!("segment {i} is {}x{} on a {w}x{h} canvas", m.w, m.h),
                ));
            }
            if m.is_empty() {
                return Err(Error::Data(format!("segment {i} ({class}) has no pixels")));
            }
            let id = i as u32 + 1;
            for (p, &on) in m.bits().iter().enumerate() {
                if !on {
                    continue;
                }
                if map[p] != 0 {
                    return Err(Error::Data(format!(
                        "segments {} and {i} overlap at pixel {p}",
                        map[p] - 1
                    )));
                }
                map[p] = id;
            }
            segments.push(SegmentInfo { id, class: class.clone(), score: *score });
        }
        Ok(PanopticPrediction { h, w, segment_map: map, segments })
    }

    /// Check the id bookkeeping: info ids unique and nonzero, and the map
    /// and info list mention exactly the same ids.
    pub fn validate(&self) -> Result<()> {
        if self.segment_map.len() != self.h * self.w {
            return Err(Error::shape(
                "PanopticPrediction",
                format!("{} map entries for {}x{}", self.segment_map.len(), self.h, self.w),
            ));
        }
        let mut info_ids = BTreeSet::new();
        for s in &self.segments {
            if s.id == 0 {
                return Err(Error::Data("segment id 0 is reserved for void".into()));
            }
            if !info_ids.insert(s.id) {
                return Err(Error::Data(format!("segment id {} listed twice", s.id)));
            }
        }
        let map_ids: BTreeSet<u32> = self.segment_map.iter().copied().filter(|&v| v != 0).collect();
        if let Some(id) = map_ids.difference(&info_ids).next() {
            return Err(Error::Data(format!("map id {id} has no segment record")));
        }
        if let Some(id) = info_ids.difference(&map_ids).next() {
            return Err(Error::Data(format!("segment {id} owns no pixels")));
        }
        Ok(())
    }

    /// Per-pixel class indices into `classes` ([`VOID_CLASS`] for void),
    /// merging segments that share a class name.
    pub fn class_map(&self, classes: &[String]) -> Result<Vec<u32>> {
        let mut by_id = BTreeMap::new();
        for s in &self.segments {
            let c = classes
                .iter()
                .position(|n| *n == s.class)
                .ok_or_else(|| Error::Data(format!("class {:?} is not in the class list", s.class)))?;
            by_id.insert(s.id, c as u32);
        }
        self.segment_map
            .iter()
            .map(|&id| {
                if id == 0 {
                    Ok(VOID_CLASS)
                } else {
                    by_id.get(&id).copied().ok_or_else(|| Error::Data(format!("map id {id} has no segment record")))
                }
            })
            .collect()
    }
}

/// Ground-truth panoptic segmentation of a synthetic sample: one segment per
/// visible instance region, scored 1.
pub fn panoptic_gt(sample: &SegSample) -> Result<PanopticPrediction> {
    let parts: Vec<(BinMask, String, f64)> = sample
        .instances
        .iter()
        .map(|inst| (inst.visible.clone(), inst.category(), 1.0))
        .collect();
    PanopticPrediction::from_masks(sample.image.h, sample.image.w, &parts)
}

// ---------------------------------------------------------------------------
// Inference rules

/// Merge category-conditioned proposals into a panoptic map. Proposals whose
/// argmax class is background or whose max softmax score falls below
/// `score_threshold` are dropped; the rest compete per pixel by
/// score x mask-probability. A pixel goes to the strongest claimant whose own
/// mask is positive there (probability > 1/2); unclaimed pixels stay void,
/// and proposals that end up with no pixels are dropped from the result.
pub fn infer_panoptic(ps: &ProposalSet, score_threshold: f64) -> Result<PanopticPrediction> {
    if ps.condition_kind != ConditionKind::Category {
        return Err(Error::Schema("panoptic merge needs a category-conditioned proposal set".into()));
    }
    if !(0.0..=1.0).contains(&score_threshold) {
        return Err(Error::Config(format!("score threshold {score_threshold} outside [0, 1]")));
    }
    let k = ps.labels.len();
    let (h, w) = (ps.mask_h, ps.mask_w);
    let mut survivors: Vec<(usize, usize, f64)> = Vec::new();
    for (i, logits) in ps.class_logits.iter().enumerate() {
        if logits.len() != k {
            return Err(Error::shape(
                "infer_panoptic",
                format!("proposal {i} has {} class logits for {k} labels", logits.len()),
            ));
        }
        let probs = softmax_row(logits);
        let (arg, score) = argmax(&probs);
        if ps.includes_background && arg + 1 == k {
            continue;
        }
        if score < score_threshold {
            continue;
        }
        survivors.push((i, arg, score));
    }

    let mut map = vec![0u32; h * w];
    let mut claim = vec![0.0f64; h * w];
    for (rank, &(i, _, score)) in survivors.iter().enumerate() {
        for (p, &logit) in ps.proposals[i].mask_logits.iter().enumerate() {
            if logit <= 0.0 {
                continue;
            }
            let c = score * sigmoid(logit);
            // Strict > keeps the earlier (lower-index) proposal on ties.
            if c > claim[p] {
                claim[p] = c;
                map[p] = rank as u32 + 1;
            }
        }
    }

    // Renumber to skip survivors that won no pixels.
    let mut area = vec![0usize; survivors.len() + 1];
    for &id in &map {
        area[id as usize] += 1;
    }
    let mut final_id = vec![0u32; survivors.len() + 1];
    let mut segments = Vec::new();
    for (rank, &(_, arg, score)) in survivors.iter().enumerate() {
        if area[rank + 1] == 0 {
            continue;
        }
        let id = segments.len() as u32 + 1;
        final_id[rank + 1] = id;
        segments.push(SegmentInfo { id, class: ps.labels[arg].clone(), score });
    }
    for v in &mut map {
        *v = final_id[*v as usize];
    }
    Ok(PanopticPrediction { h, w, segment_map: map, segments })
}

/// Top-1 referring selection: the binarized mask of the proposal with the
/// highest similarity to the sentence embedding. Ties go to the lowest
/// proposal index.
pub fn infer_referring(ps: &ProposalSet) -> Result<BinMask> {
    require_sentence(ps, "referring selection")?;
    let mut best = 0;
    for i in 1..ps.n() {
        if ps.class_logits[i][0] > ps.class_logits[best][0] {
            best = i;
        }
    }
    Ok(ps.binarized(best))
}

/// Multi-target rule: union of every proposal whose sigmoid similarity
/// strictly exceeds `threshold`. An empty union is the no-target prediction.
pub fn infer_gres(ps: &ProposalSet, threshold: f64) -> Result<BinMask> {
    require_sentence(ps, "multi-target union")?;
    if threshold.is_nan() {
        return Err(Error::Config("similarity threshold is NaN".into()));
    }
    let mut out = BinMask::new(ps.mask_w, ps.mask_h);
    for i in 0..ps.n() {
        if sigmoid(ps.class_logits[i][0]) > threshold {
            out.union_with(&ps.binarized(i));
        }
    }
    Ok(out)
}

/// For each condition entry, the index of the highest-scoring proposal and
/// its sigmoid similarity. Ties go to the lowest proposal index.
pub fn best_per_condition(ps: &ProposalSet) -> Result<Vec<(usize, f64)>> {
    if ps.condition_kind == ConditionKind::Category {
        return Err(Error::Schema("per-condition selection needs similarity-scored proposals".into()));
    }
    if ps.n() == 0 {
        return Err(Error::Schema("proposal set is empty".into()));
    }
    let k = ps.labels.len();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let mut best = 0;
        for i in 1..ps.n() {
            if ps.class_logits[i][j] > ps.class_logits[best][j] {
                best = i;
            }
        }
        out.push((best, sigmoid(ps.class_logits[best][j])));
    }
    Ok(out)
}

/// One mask per visual prompt: the top-similarity proposal for each pooled
/// region embedding.
pub fn infer_interactive(ps: &ProposalSet) -> Result<Vec<BinMask>> {
    if ps.condition_kind != ConditionKind::VisualPrior {
        return Err(Error::Schema("interactive selection needs visual-prior conditions".into()));
    }
    Ok(best_per_condition(ps)?.into_iter().map(|(i, _)| ps.binarized(i)).collect())
}

/// A propagated object track: one mask per frame, plus a flag per frame
/// marking predictions that came back empty and reused the previous mask.
#[derive(Debug, Clone)]
pub struct VideoTrack {
    pub masks: Vec<BinMask>,
    pub carried: Vec<bool>,
}

/// Segment one object through a frame sequence. Frame 0 keeps the reference
/// mask; every later frame is conditioned on region features pooled from the
/// previous frame's tokens under the previous mask, and takes the
/// best-scoring proposal.
pub fn propagate_video<E: Elem>(
    model: &Model<E>,
    frames: &[RgbImage],
    reference: &BinMask,
) -> Result<VideoTrack> {
    if frames.is_empty() {
        return Err(Error::Data("video has no frames".into()));
    }
    let s = model.cfg.image_size;
    for (t, f) in frames.iter().enumerate() {
        if f.w != s || f.h != s {
            return Err(Error::Data(format!("frame {t} is {}x{}, model expects {s}x{s}", f.w, f.h)));
        }
    }
    if reference.w != s || reference.h != s {
        return Err(Error::Schema(format!(
            "reference mask is {}x{}, frames are {s}x{s}",
            reference.w, reference.h
        )));
    }
    if reference.is_empty() {
        return Err(Error::Schema("reference mask is empty".into()));
    }

    let mut masks = vec![reference.clone()];
    let mut carried = vec![false];
    // Aligned tokens of the frame just segmented, detached for reuse as the
    // next step's pooling source.
    let mut prev_tokens: Option<(Vec<E>, Vec<usize>)> = None;
    for t in 1..frames.len() {
        let g = Graph::<E>::new();
        let pooled_from = match prev_tokens.take() {
            Some((vals, shape)) => g.leaf(vals, &shape, false)?,
            None => {
                let feats = vision::encode_image(&g, &model.params, &model.cfg, frames[t - 1].planes())?;
                vl_align(&model.params, &feats)?
            }
        };
        let prior = VisualPrompt::Mask(masks[t - 1].clone());
        let (features, labels) =
            schema::visual_prior_embed(&pooled_from, &[prior], s, s, model.cfg.prompt_scale)?;

        let feats = vision::encode_image(&g, &model.params, &model.cfg, frames[t].planes())?;
        let tokens = vl_align(&model.params, &feats)?;
        prev_tokens = Some((tokens.to_vec(), tokens.shape().to_vec()));
        let out = forward_with_condition(
            model,
            &feats,
            &tokens,
            instruction_text(TaskKind::Interactive),
            ConditionInput::VisualPrior { features, labels },
        )?;
        let ps = maskgen::detach(model, out, true)?;
        let best = best_per_condition(&ps)?[0].0;
        let (mask, fell_back) = fallback_to_previous(ps.binarized(best), &masks[t - 1]);
        masks.push(mask);
        carried.push(fell_back);
    }
    Ok(VideoTrack { masks, carried })
}

/// Empty predictions reuse the previous frame's mask (and get flagged) so
/// one blank frame cannot end the track: the next prior must stay poolable.
fn fallback_to_previous(pred: BinMask, prev: &BinMask) -> (BinMask, bool) {
    if pred.is_empty() {
        (prev.clone(), true)
    } else {
        (pred, false)
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Cumulative intersection over cumulative union across samples. Empty
/// inputs everywhere (union 0) count as a perfect 1.
pub fn ciou(preds: &[BinMask], gts: &[BinMask]) -> Result<f64> {
    check_aligned("ciou", preds, gts)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        inter += p.intersection_area(g);
        union += p.union_area(g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean per-sample IoU with the no-target convention: a sample where both
/// masks are empty scores 1, a sample where exactly one is empty scores 0.
pub fn giou_gres(preds: &[BinMask], gts: &[BinMask]) -> Result<f64> {
    check_aligned("giou_gres", preds, gts)?;
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| p.iou(g)).sum();
    Ok(total / preds.len() as f64)
}

/// Mean over classes present in the ground truth of dataset-wide
/// intersection / union for that class. Maps hold class indices below
/// `n_classes`, or [`VOID_CLASS`] for unlabeled pixels.
pub fn miou(preds: &[Vec<u32>], gts: &[Vec<u32>], n_classes: usize) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!("miou: {} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::Data("miou: no samples".into()));
    }
    let mut inter = vec![0usize; n_classes];
    let mut pred_area = vec![0usize; n_classes];
    let mut gt_area = vec![0usize; n_classes];
    for (s, (pm, gm)) in preds.iter().zip(gts).enumerate() {
        if pm.len() != gm.len() {
            return Err(Error::Data(format!("miou: sample {s} maps differ in length")));
        }
        for (&p, &g) in pm.iter().zip(gm) {
            for (name, v) in [("prediction", p), ("ground truth", g)] {
                if v != VOID_CLASS && v as usize >= n_classes {
                    return Err(Error::Data(format!("miou: {name} label {v} with {n_classes} classes")));
                }
            }
            if p != VOID_CLASS {
                pred_area[p as usize] += 1;
            }
            if g != VOID_CLASS {
                gt_area[g as usize] += 1;
                if p == g {
                    inter[g as usize] += 1;
                }
            }
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..n_classes {
        if gt_area[c] == 0 {
            continue; // absent classes are excluded from the mean
        }
        let u = pred_area[c] + gt_area[c] - inter[c];
        sum += inter[c] as f64 / u as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("miou: ground truth contains no classes".into()));
    }
    Ok(sum / n as f64)
}

/// Metric values plus supporting counts and a per-class breakdown, ready to
/// serialize as structured text.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub per_class: BTreeMap<String, BTreeMap<String, f64>>,
}

impl MetricReport {
    pub fn value(&self, name: &str) -> Result<f64> {
        self.values
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("report has no metric {name:?}")))
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in &self.values {
            writeln!(f, "metric\t{name}\t{v:.6}")?;
        }
        for (name, v) in &self.counts {
            writeln!(f, "count\t{name}\t{v}")?;
        }
        for (class, kv) in &self.per_class {
            write!(f, "class\t{class}")?;
            for (k, v) in kv {
                write!(f, "\t{k}={v:.6}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Panoptic quality against a ground-truth segmentation. Segments match
/// within a class when IoU > 1/2 (which makes matches unique); per class,
/// PQ = sum of matched IoU / (TP + FP/2 + FN/2), SQ = sum IoU / TP,
/// RQ = TP / (TP + FP/2 + FN/2); headline values average the per-class
/// numbers over classes that appear on either side. Two all-void inputs
/// agree perfectly and score 1.
pub fn panoptic_quality(pred: &PanopticPrediction, gt: &PanopticPrediction) -> Result<MetricReport> {
    pred.validate()?;
    gt.validate()?;
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::shape(
            "panoptic_quality",
            format!("{}x{} prediction vs {}x{} ground truth", pred.w, pred.h, gt.w, gt.h),
        ));
    }
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<u32, usize> = BTreeMap::new();
    for (&pid, &gid) in pred.segment_map.iter().zip(&gt.segment_map) {
        if pid != 0 {
            *pred_area.entry(pid).or_default() += 1;
        }
        if gid != 0 {
            *gt_area.entry(gid).or_default() += 1;
        }
        if pid != 0 && gid != 0 {
            *inter.entry((pid, gid)).or_default() += 1;
        }
    }

    let classes: BTreeSet<&String> =
        pred.segments.iter().chain(&gt.segments).map(|s| &s.class).collect();
    let mut report = MetricReport::default();
    let (mut pq_sum, mut sq_sum, mut rq_sum) = (0.0, 0.0, 0.0);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for class in &classes {
        let pred_ids: Vec<u32> =
            pred.segments.iter().filter(|s| s.class == **class).map(|s| s.id).collect();
        let gt_ids: Vec<u32> =
            gt.segments.iter().filter(|s| s.class == **class).map(|s| s.id).collect();
        let mut tp = 0usize;
        let mut iou_sum = 0.0;
        for &p in &pred_ids {
            for &g in &gt_ids {
                let i = inter.get(&(p, g)).copied().unwrap_or(0);
                let u = pred_area[&p] + gt_area[&g] - i;
                if i as f64 / u as f64 > 0.5 {
                    tp += 1;
                    iou_sum += i as f64 / u as f64;
                }
            }
        }
        let fp = pred_ids.len() - tp;
        let fn_ = gt_ids.len() - tp;
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        let pq = iou_sum / denom;
        let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
        let rq = tp as f64 / denom;
        pq_sum += pq;
        sq_sum += sq;
        rq_sum += rq;
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        report.per_class.insert(
            (*class).clone(),
            BTreeMap::from([
                ("pq".to_string(), pq),
                ("sq".to_string(), sq),
                ("rq".to_string(), rq),
                ("tp".to_string(), tp as f64),
                ("fp".to_string(), fp as f64),
                ("fn".to_string(), fn_ as f64),
            ]),
        );
    }
    let n = classes.len();
    let (pq, sq, rq) = if n == 0 {
        (1.0, 1.0, 1.0)
    } else {
        (pq_sum / n as f64, sq_sum / n as f64, rq_sum / n as f64)
    };
    report.values.insert("PQ".to_string(), pq);
    report.values.insert("SQ".to_string(), sq);
    report.values.insert("RQ".to_string(), rq);
    report.counts.insert("TP".to_string(), tp_all);
    report.counts.insert("FP".to_string(), fp_all);
    report.counts.insert("FN".to_string(), fn_all);
    Ok(report)
}

/// Region + boundary video score: J is mean per-frame IoU, F is mean
/// per-frame boundary F-measure, and the headline number is their average.
pub fn j_and_f(preds: &[BinMask], gts: &[BinMask]) -> Result<(f64, f64, f64)> {
    check_aligned("j_and_f", preds, gts)?;
    let n = preds.len() as f64;
    let j: f64 = preds.iter().zip(gts).map(|(p, g)| p.iou(g)).sum::<f64>() / n;
    let f: f64 = preds.iter().zip(gts).map(|(p, g)| boundary_f(p, g)).sum::<f64>() / n;
    Ok((j, f, 0.5 * (j + f)))
}

/// 1-pixel contour: mask pixels with a 4-neighbor outside the mask (the
/// image border counts as outside).
pub fn boundary(m: &BinMask) -> BinMask {
    BinMask::from_fn(m.w, m.h, |x, y| {
        m.get(x, y)
            && (x == 0
                || y == 0
                || x + 1 == m.w
                || y + 1 == m.h
                || !m.get(x - 1, y)
                || !m.get(x + 1, y)
                || !m.get(x, y - 1)
                || !m.get(x, y + 1))
    })
}

/// Boundary match radius: 1% of the image diagonal, rounded up to a whole
/// pixel.
pub fn boundary_tolerance(h: usize, w: usize) -> f64 {
    (0.01 * ((h * h + w * w) as f64).sqrt()).ceil()
}

/// Boundary F-measure for one frame: precision and recall of the two
/// contours matched within [`boundary_tolerance`] (Euclidean). Two empty
/// contours agree (1); exactly one empty scores 0.
pub fn boundary_f(pred: &BinMask, gt: &BinMask) -> f64 {
    let pb = boundary(pred);
    let gb = boundary(gt);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let tol = boundary_tolerance(pred.h, pred.w);
    let gd = dilate(&gb, tol);
    let pd = dilate(&pb, tol);
    let precision = pb.intersection_area(&gd) as f64 / pb.area() as f64;
    let recall = gb.intersection_area(&pd) as f64 / gb.area() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Disc dilation with radius `r` pixels (centers within Euclidean distance
/// `r` turn on).
fn dilate(m: &BinMask, r: f64) -> BinMask {
    let ri = r.floor() as i64;
    let mut offsets = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if (dx * dx + dy * dy) as f64 <= r * r {
                offsets.push((dx, dy));
            }
        }
    }
    let mut out = BinMask::new(m.w, m.h);
    for y in 0..m.h {
        for x in 0..m.w {
            if !m.get(x, y) {
                continue;
            }
            for &(dx, dy) in &offsets {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx >= 0 && ny >= 0 && (nx as usize) < m.w && (ny as usize) < m.h {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------

fn check_aligned(op: &'static str, preds: &[BinMask], gts: &[BinMask]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!("{op}: {} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::Data(format!("{op}: no samples")));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.w != g.w || p.h != g.h {
            return Err(Error::Data(format!(
                "{op}: sample {i} is {}x{} vs {}x{}",
                p.w, p.h, g.w, g.h
            )));
        }
    }
    Ok(())
}

fn require_sentence(ps: &ProposalSet, what: &str) -> Result<()> {
    if ps.condition_kind != ConditionKind::Sentence {
        return Err(Error::Schema(format!("{what} needs a sentence-conditioned proposal set")));
    }
    if ps.n() == 0 {
        return Err(Error::Schema("proposal set is empty".into()));
    }
    Ok(())
}

fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    (best, v[best])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
