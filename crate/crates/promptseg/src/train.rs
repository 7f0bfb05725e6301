//! Set-prediction training: bipartite matching between mask proposals and
//! ground-truth instances, mask + classification losses, the caption
//! objective, and the two-stage optimizer loop.
//!
//! The loss layout follows the DETR family. A Hungarian assignment routes
//! each ground-truth instance to one proposal; matched proposals pay BCE and
//! Dice on their masks, and every proposal pays a classification term —
//! matched ones toward their instance's condition entry, the rest toward the
//! appended background class (category conditions) or a zero similarity
//! score (sentence / visual-prior conditions), down-weighted so negatives
//! don't drown the signal. Mask losses are computed at ground-truth
//! resolution by bilinearly upsampling the proposal logits, the same path
//! inference takes.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, TaskKind, TrainConfig};
use crate::data::{Dataset, SegSample};
use crate::error::{Error, Result};
use crate::mask::BinMask;
use crate::maskgen::{forward_for_task, ForwardOutputs};
use crate::model::lm::{self, Segment, SegmentKind, TokenSequence};
use crate::model::vision::{self, MultiLevelFeatures};
use crate::model::{ckpt, vl_align, vocab, Model};
use crate::rng;
use crate::schema::{instruction_text, ConditionKind, ConditionPrompt};
use crate::tensor::{concat_rows, Elem, Graph, ParamStore, Tensor};

// ---------------------------------------------------------------------------
// Ground truth and loss weights
// ---------------------------------------------------------------------------

/// One supervised instance for a training sample.
#[derive(Debug, Clone)]
pub struct GtInstance {
    /// Binary target mask at image resolution.
    pub mask: BinMask,
    /// Which condition entry claims this instance: the category-list index
    /// for category conditions, the prompt/referent slot otherwise.
    pub class_id: Option<usize>,
}

/// Weights on the loss terms (shared by the matching cost).
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    /// Classification weight on unmatched proposals. Must be positive so a
    /// batch with no matches still has a well-defined mean.
    pub background: f64,
}

impl LossWeights {
    pub fn new(bce: f64, dice: f64, cls: f64, background: f64) -> Result<Self> {
        if !(bce >= 0.0 && dice >= 0.0 && cls >= 0.0) {
            return Err(Error::Config(format!("loss weights must be ≥ 0, got bce={bce} dice={dice} cls={cls}")));
        }
        if !(background > 0.0) {
            return Err(Error::Config(format!("background class weight must be > 0, got {background}")));
        }
        Ok(LossWeights { bce, dice, cls, background })
    }

    pub fn from_train(tc: &TrainConfig) -> Result<Self> {
        LossWeights::new(tc.lambda_bce, tc.lambda_dice, tc.lambda_cls, tc.bg_cls_weight)
    }
}

// ---------------------------------------------------------------------------
// Elementary losses
// ---------------------------------------------------------------------------

/// Soft Dice loss on logits: `1 − (2·Σ σ(x)·g + 1) / (Σ σ(x) + Σ g + 1)`.
/// Always in [0, 1]; the +1 smoothing keeps empty masks defined.
pub fn dice_loss<E: Elem>(pred_logits: &Tensor<E>, gt: &BinMask) -> Result<Tensor<E>> {
    let n = pred_logits.numel();
    if n != gt.w * gt.h {
        return Err(Error::shape("dice_loss", format!("{n} logits vs {}x{} mask", gt.w, gt.h)));
    }
    let g = pred_logits.graph();
    let gt_t = g.constant(gt.bits().iter().map(|&b| if b { E::one() } else { E::zero() }).collect(), &[n])?;
    let s = pred_logits.reshape(&[n])?.sigmoid();
    let num = s.mul(&gt_t)?.sum_all().scale(E::from_f64(2.0)).add_const(E::one());
    let den = s.sum_all().add_const(E::from_f64(gt.area() as f64 + 1.0));
    Ok(num.div(&den)?.scale(E::from_f64(-1.0)).add_const(E::one()))
}

/// Mean binary cross-entropy over pixels, directly on logits.
pub fn bce_mask_loss<E: Elem>(pred_logits: &Tensor<E>, gt: &BinMask) -> Result<Tensor<E>> {
    let n = pred_logits.numel();
    if n != gt.w * gt.h {
        return Err(Error::shape("bce_mask_loss", format!("{n} logits vs {}x{} mask", gt.w, gt.h)));
    }
    let target: Vec<E> = gt.bits().iter().map(|&b| if b { E::one() } else { E::zero() }).collect();
    pred_logits.reshape(&[n])?.bce_with_logits(&target, &vec![E::one(); n])
}

/// Classification target for one proposal.
#[derive(Debug, Clone)]
pub enum ClsTarget {
    /// Softmax cross-entropy against this class index (category conditions).
    Class(usize),
    /// Per-entry BCE targets on the similarity scores (other conditions).
    Scores(Vec<f64>),
}

/// Classification loss for one proposal's logits row.
pub fn cls_loss<E: Elem>(logits: &Tensor<E>, target: &ClsTarget) -> Result<Tensor<E>> {
    let k = logits.numel();
    match target {
        ClsTarget::Class(t) => logits.reshape(&[1, k])?.softmax_ce_rows(&[*t], &[E::one()]),
        ClsTarget::Scores(s) => {
            if s.len() != k {
                return Err(Error::shape("cls_loss", format!("{} targets vs {k} scores", s.len())));
            }
            let t: Vec<E> = s.iter().map(|&v| E::from_f64(v)).collect();
            logits.reshape(&[k])?.bce_with_logits(&t, &vec![E::one(); k])
        }
    }
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// Result of bipartite matching between proposals and ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// `(proposal, ground-truth)` pairs, sorted by ground-truth index;
    /// exactly `min(N, M)` of them.
    pub pairs: Vec<(usize, usize)>,
    /// Proposals left without an instance, ascending.
    pub unmatched_proposals: Vec<usize>,
}

impl Assignment {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, n: usize) -> Assignment {
        pairs.sort_unstable_by_key(|&(_, j)| j);
        let mut taken = vec![false; n];
        for &(i, _) in &pairs {
            taken[i] = true;
        }
        let unmatched_proposals = (0..n).filter(|&i| !taken[i]).collect();
        Assignment { pairs, unmatched_proposals }
    }
}

/// Minimum-cost assignment on a rectangular `n×m` cost matrix (row-major),
/// matching `min(n, m)` pairs. Shortest-augmenting-path algorithm with
/// potentials, O(min² · max).
pub fn hungarian(cost: &[f64], n: usize, m: usize) -> Result<Assignment> {
    if cost.len() != n * m {
        return Err(Error::shape("hungarian", format!("{} costs vs {n}x{m}", cost.len())));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("matching cost matrix contains a non-finite entry".into()));
    }
    if n == 0 || m == 0 {
        return Ok(Assignment::from_pairs(Vec::new(), n));
    }
    let pairs = if n <= m {
        let row_to_col = solve_rect(&|i, j| cost[i * m + j], n, m);
        row_to_col.iter().enumerate().map(|(i, &j)| (i, j)).collect()
    } else {
        // Transpose so rows are the smaller side (every ground truth matched).
        let gt_to_prop = solve_rect(&|i, j| cost[j * m + i], m, n);
        gt_to_prop.iter().enumerate().map(|(j, &i)| (i, j)).collect()
    };
    Ok(Assignment::from_pairs(pairs, n))
}

/// Hungarian core for `n ≤ m`; returns the column matched to each row.
fn solve_rect(cost: &dyn Fn(usize, usize) -> f64, n: usize, m: usize) -> Vec<usize> {
    // Potentials u (rows), v (columns); p[j] is the 1-based row matched to
    // column j, with column 0 as the virtual start of each augmenting path.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path back, flipping matches.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn softmax_f64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn bce_scalar(logits: &[f64], gt: &BinMask) -> f64 {
    let bits = gt.bits();
    let mut s = 0.0;
    for (&x, &b) in logits.iter().zip(bits.iter()) {
        let z = if b { 1.0 } else { 0.0 };
        s += x.max(0.0) - x * z + (-x.abs()).exp().ln_1p();
    }
    s / logits.len() as f64
}

fn dice_scalar(logits: &[f64], gt: &BinMask) -> f64 {
    let bits = gt.bits();
    let mut inter = 0.0;
    let mut pred_sum = 0.0;
    for (&x, &b) in logits.iter().zip(bits.iter()) {
        let s = 1.0 / (1.0 + (-x).exp());
        pred_sum += s;
        if b {
            inter += s;
        }
    }
    1.0 - (2.0 * inter + 1.0) / (pred_sum + gt.area() as f64 + 1.0)
}

/// Pairwise assignment costs between proposals and ground-truth instances,
/// row-major `[N × M]`. Every pair pays weighted mask BCE + Dice; category
/// conditions additionally pay `−p_i[class_j]` (softmax probability), while
/// other conditions match on masks alone.
pub fn matching_cost(
    mask_logits: &[Vec<f64>],
    class_logits: &[Vec<f64>],
    gts: &[GtInstance],
    kind: ConditionKind,
    w: &LossWeights,
) -> Result<Vec<f64>> {
    if gts.is_empty() {
        return Err(Error::Data("matching needs at least one ground-truth instance".into()));
    }
    let n = mask_logits.len();
    let m = gts.len();
    let px = gts[0].mask.w * gts[0].mask.h;
    for gt in gts {
        if gt.mask.w * gt.mask.h != px {
            return Err(Error::Data("ground-truth masks disagree on resolution".into()));
        }
    }
    for row in mask_logits {
        if row.len() != px {
            return Err(Error::shape("matching_cost", format!("{} mask logits vs {px} pixels", row.len())));
        }
    }
    let probs: Option<Vec<Vec<f64>>> = if kind == ConditionKind::Category {
        if class_logits.len() != n {
            return Err(Error::shape("matching_cost", format!("{} class rows vs {n} proposals", class_logits.len())));
        }
        Some(class_logits.iter().map(|r| softmax_f64(r)).collect())
    } else {
        None
    };
    let class_ids: Vec<usize> = if let Some(p) = &probs {
        let width = p[0].len();
        gts.iter()
            .map(|gt| match gt.class_id {
                Some(c) if c < width => Ok(c),
                Some(c) => Err(Error::Data(format!("ground-truth class {c} out of {width} condition entries"))),
                None => Err(Error::Data("category matching needs a class id on every instance".into())),
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut cost = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut c = w.bce * bce_scalar(&mask_logits[i], &gts[j].mask)
                + w.dice * dice_scalar(&mask_logits[i], &gts[j].mask);
            if let Some(p) = &probs {
                c += w.cls * -p[i][class_ids[j]];
            }
            cost[i * m + j] = c;
        }
    }
    Ok(cost)
}

// ---------------------------------------------------------------------------
// Batch loss
// ---------------------------------------------------------------------------

/// Detached per-term values for logging. The component fields are unweighted
/// means; `total` is the λ-weighted sum that gradients flow from.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
    pub cls: f64,
    pub caption: f64,
}

/// Union instances that share a condition entry (the coupled variant
/// supervises one query per entry, so same-entry instances merge into one
/// semantic mask).
pub fn merge_by_entry(gts: &[GtInstance]) -> Result<Vec<GtInstance>> {
    let mut merged: BTreeMap<usize, BinMask> = BTreeMap::new();
    for gt in gts {
        let cid = gt
            .class_id
            .ok_or_else(|| Error::Data("fixed assignment needs a class id on every instance".into()))?;
        match merged.get_mut(&cid) {
            Some(m) => m.union_with(&gt.mask),
            None => {
                merged.insert(cid, gt.mask.clone());
            }
        }
    }
    Ok(merged.into_iter().map(|(cid, mask)| GtInstance { mask, class_id: Some(cid) }).collect())
}

/// Full set-prediction loss for one sample: match, then mask + classification
/// terms. With `fixed_assignment` (the coupled ablation) matching is skipped
/// and each instance pairs with the proposal at its own condition-entry
/// index; instances must already be merged one-per-entry.
pub fn total_loss<E: Elem>(
    out: &ForwardOutputs<E>,
    gts: &[GtInstance],
    w: &LossWeights,
    fixed_assignment: bool,
) -> Result<(Tensor<E>, Assignment, LossBreakdown)> {
    let n = out.masks.queries.shape()[0];
    let k = out.class_logits.shape()[1];
    let kind = out.condition_kind;

    // Proposal logits at ground-truth resolution.
    let up = if gts.is_empty() {
        out.masks.mask_logits.clone()
    } else {
        let (sh, sw) = (gts[0].mask.h, gts[0].mask.w);
        for gt in gts {
            if gt.mask.h != sh || gt.mask.w != sw {
                return Err(Error::Data("ground-truth masks disagree on resolution".into()));
            }
        }
        if (out.masks.h, out.masks.w) == (sh, sw) {
            out.masks.mask_logits.clone()
        } else {
            out.masks
                .mask_logits
                .reshape(&[n, out.masks.h, out.masks.w])?
                .bilinear(sh, sw)?
                .reshape(&[n, sh * sw])?
        }
    };

    let assign = if gts.is_empty() {
        Assignment::from_pairs(Vec::new(), n)
    } else if fixed_assignment {
        let mut seen = vec![false; n];
        let mut pairs = Vec::with_capacity(gts.len());
        for (j, gt) in gts.iter().enumerate() {
            let cid = gt
                .class_id
                .ok_or_else(|| Error::Data("fixed assignment needs a class id on every instance".into()))?;
            if cid >= n {
                return Err(Error::Data(format!("fixed assignment maps an instance to entry {cid} of {n}")));
            }
            if seen[cid] {
                return Err(Error::Data(format!(
                    "fixed assignment saw entry {cid} twice; merge same-entry instances first"
                )));
            }
            seen[cid] = true;
            pairs.push((cid, j));
        }
        Assignment::from_pairs(pairs, n)
    } else {
        let up_vals = up.value();
        let px = up.shape()[1];
        let mask_rows: Vec<Vec<f64>> =
            (0..n).map(|i| up_vals[i * px..(i + 1) * px].iter().map(|&v| v.to_f64()).collect()).collect();
        let cls_vals = out.class_logits.value();
        let cls_rows: Vec<Vec<f64>> =
            (0..n).map(|i| cls_vals[i * k..(i + 1) * k].iter().map(|&v| v.to_f64()).collect()).collect();
        let cost = matching_cost(&mask_rows, &cls_rows, gts, kind, w)?;
        hungarian(&cost, n, gts.len())?
    };

    // Mask terms over matched pairs, in ground-truth order so the sum is
    // independent of proposal order.
    let mut bce_sum: Option<Tensor<E>> = None;
    let mut dice_sum: Option<Tensor<E>> = None;
    for &(i, j) in &assign.pairs {
        let row = up.slice_rows(i, 1)?;
        let b = bce_mask_loss(&row, &gts[j].mask)?;
        let d = dice_loss(&row, &gts[j].mask)?;
        bce_sum = Some(match bce_sum {
            Some(acc) => acc.add(&b)?,
            None => b,
        });
        dice_sum = Some(match dice_sum {
            Some(acc) => acc.add(&d)?,
            None => d,
        });
    }
    let n_matched = assign.pairs.len();

    // Classification over every proposal.
    let cls_limit = if kind == ConditionKind::Category { k - 1 } else { k };
    let cls_term = match kind {
        ConditionKind::Category => {
            let mut targets = vec![k - 1; n];
            let mut weights = vec![E::from_f64(w.background); n];
            for &(i, j) in &assign.pairs {
                let cid = gts[j]
                    .class_id
                    .ok_or_else(|| Error::Data("category loss needs a class id on every instance".into()))?;
                if cid >= cls_limit {
                    return Err(Error::Data(format!("ground-truth class {cid} out of {cls_limit} categories")));
                }
                targets[i] = cid;
                weights[i] = E::one();
            }
            out.class_logits.softmax_ce_rows(&targets, &weights)?
        }
        _ => {
            let mut targets = vec![E::zero(); n * k];
            let mut weights = vec![E::from_f64(w.background); n * k];
            for &(i, j) in &assign.pairs {
                let cid = gts[j]
                    .class_id
                    .ok_or_else(|| Error::Data("similarity loss needs a class id on every instance".into()))?;
                if cid >= cls_limit {
                    return Err(Error::Data(format!("ground-truth class {cid} out of {cls_limit} condition entries")));
                }
                targets[i * k + cid] = E::one();
                weights[i * k + cid] = E::one();
            }
            out.class_logits.reshape(&[n * k])?.bce_with_logits(&targets, &weights)?
        }
    };

    let mut breakdown = LossBreakdown { cls: cls_term.item().to_f64(), ..Default::default() };
    let mut total = cls_term.scale(E::from_f64(w.cls));
    if let (Some(b), Some(d)) = (bce_sum, dice_sum) {
        let inv = 1.0 / n_matched as f64;
        breakdown.mask_bce = b.item().to_f64() * inv;
        breakdown.mask_dice = d.item().to_f64() * inv;
        total = total.add(&b.scale(E::from_f64(w.bce * inv)))?.add(&d.scale(E::from_f64(w.dice * inv)))?;
    }
    breakdown.total = total.item().to_f64();
    Ok((total, assign, breakdown))
}

// ---------------------------------------------------------------------------
// Caption objective
// ---------------------------------------------------------------------------

/// Image + captioning instruction, optionally followed by caption tokens.
fn caption_sequence<E: Elem>(
    model: &Model<E>,
    image_tokens: &Tensor<E>,
    tail_ids: &[usize],
) -> Result<TokenSequence<E>> {
    let g = image_tokens.graph();
    let tok_emb = model.params.lift(g, "lm/tok_emb")?;
    let instr_ids = model.vocab.tokenize(instruction_text(TaskKind::Caption));
    let t_img = image_tokens.shape()[0];
    let mut parts = vec![image_tokens.clone(), tok_emb.gather_rows(&instr_ids)?];
    let mut token_ids: Vec<Option<usize>> = vec![None; t_img];
    token_ids.extend(instr_ids.iter().map(|&i| Some(i)));
    let mut segments = vec![
        Segment { kind: SegmentKind::Image, start: 0, len: t_img },
        Segment { kind: SegmentKind::Instruction, start: t_img, len: instr_ids.len() },
    ];
    if !tail_ids.is_empty() {
        parts.push(tok_emb.gather_rows(tail_ids)?);
        token_ids.extend(tail_ids.iter().map(|&i| Some(i)));
        segments.push(Segment {
            kind: SegmentKind::Condition,
            start: t_img + instr_ids.len(),
            len: tail_ids.len(),
        });
    }
    let seq = TokenSequence {
        embeddings: concat_rows(&parts)?,
        segments,
        token_ids,
        name_spans: Vec::new(),
        ref_pos: None,
        prior_rows: Vec::new(),
        cond_labels: Vec::new(),
        mask_span: None,
    };
    seq.validate()?;
    Ok(seq)
}

/// Teacher-forced next-token cross-entropy over the caption plus end-of-text.
pub fn caption_loss<E: Elem>(
    model: &Model<E>,
    feats: &MultiLevelFeatures<E>,
    caption: &str,
) -> Result<Tensor<E>> {
    let mut ids = model.vocab.tokenize(caption);
    if ids.is_empty() {
        return Err(Error::Data(format!("caption {caption:?} tokenized to nothing")));
    }
    ids.push(vocab::EOT);
    let image_tokens = vl_align(&model.params, feats)?;
    let seq = caption_sequence(model, &image_tokens, &ids)?;
    let out = lm::lm_forward(&model.params, &model.cfg, &seq)?;
    let t = seq.len();
    let first = t - ids.len();
    // Position p predicts the token at p+1, so the last instruction position
    // through the second-to-last caption position cover every caption token.
    let rows: Vec<usize> = (first - 1..t - 1).collect();
    let logits = lm::token_logits(&model.params, &out, &rows)?;
    logits.softmax_ce_rows(&ids, &vec![E::one(); ids.len()])
}

/// Greedily decode a caption for an image (stops at end-of-text).
pub fn caption_greedy<E: Elem>(model: &Model<E>, planes: &[f32], max_new: usize) -> Result<String> {
    let cached = {
        let g = Graph::<E>::new();
        let feats = vision::encode_image(&g, &model.params, &model.cfg, planes)?;
        vision::feature_planes(&feats)
    };
    let ids = lm::generate_greedy(
        &model.params,
        &model.cfg,
        |g, generated| {
            let feats = vision::features_from_planes(g, &cached)?;
            let image_tokens = vl_align(&model.params, &feats)?;
            caption_sequence(model, &image_tokens, generated)
        },
        vocab::EOT,
        max_new,
    )?;
    Ok(model.vocab.detokenize(&ids))
}

// ---------------------------------------------------------------------------
// Schedule and optimizer
// ---------------------------------------------------------------------------

/// Learning rate at `iter` of `total`: linear warmup to the peak, then cosine
/// decay toward zero. The warmup ends exactly at the peak.
pub fn lr_at(iter: usize, total: usize, peak: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let w = ((total as f64 * warmup_frac).round() as usize).clamp(1, total);
    if iter < w {
        return peak * (iter + 1) as f64 / w as f64;
    }
    let phase = (iter - w + 1) as f64 / (total - w + 1) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// Adam with bias correction and no weight decay. Moments are kept in f64
/// keyed by parameter name, so state survives checkpoints exactly.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    pub t: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(tc: &TrainConfig) -> Self {
        Adam { beta1: tc.beta1, beta2: tc.beta2, eps: tc.adam_eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step<E: Elem>(
        &mut self,
        params: &mut ParamStore<E>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            if m.len() != grad.len() {
                return Err(Error::shape("adam_step", format!("{name}: {} moments vs {} grads", m.len(), grad.len())));
            }
            let data = params.data_mut(name)?;
            if data.len() != grad.len() {
                return Err(Error::shape("adam_step", format!("{name}: {} values vs {} grads", data.len(), grad.len())));
            }
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                data[i] = E::from_f64(data[i].to_f64() - step);
            }
        }
        Ok(())
    }

    /// Optimizer state as checkpoint tensors under the `opt/` prefix.
    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (name, m) in &self.m {
            out.push((format!("opt/m/{name}"), vec![m.len()], m.clone()));
        }
        for (name, v) in &self.v {
            out.push((format!("opt/v/{name}"), vec![v.len()], v.clone()));
        }
        out.push(("opt/t".to_string(), vec![1], vec![self.t as f64]));
        out
    }

    /// Restore state saved by [`Adam::state_tensors`]; entries outside the
    /// `opt/` prefix are ignored, absent moments start fresh.
    pub fn load_state(&mut self, tensors: &[(String, Vec<usize>, Vec<f64>)]) {
        for (name, _, values) in tensors {
            if let Some(p) = name.strip_prefix("opt/m/") {
                self.m.insert(p.to_string(), values.clone());
            } else if let Some(p) = name.strip_prefix("opt/v/") {
                self.v.insert(p.to_string(), values.clone());
            } else if name == "opt/t" {
                self.t = values.first().copied().unwrap_or(0.0) as usize;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Task sampling and per-sample preparation
// ---------------------------------------------------------------------------

/// Uniform task draw for one iteration, derived only from (seed, iter) so
/// any resumption reproduces the same task sequence.
pub fn draw_task(tasks: &[TaskKind], seed: u64, iter: u64) -> Result<TaskKind> {
    if tasks.is_empty() {
        return Err(Error::Config("task mix is empty".into()));
    }
    let mut r = rng::stream_at(seed, "train/task", iter);
    Ok(tasks[r.gen_range(0..tasks.len())])
}

/// One sample readied for one task: the condition to feed the model plus the
/// instances (or caption) that supervise it.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub task: TaskKind,
    pub sample_id: String,
    pub condition: Option<ConditionPrompt>,
    pub gts: Vec<GtInstance>,
    pub caption: Option<String>,
}

/// Build the condition and targets for `task` on one sample. Draws that need
/// randomness (expression pick, prompt kinds, distractor categories) come
/// from `r`, which the caller seeds per iteration.
pub fn prepare_sample(
    s: &SegSample,
    task: TaskKind,
    list_size: usize,
    holdout: &[(String, String)],
    r: &mut ChaCha8Rng,
) -> Result<PreparedSample> {
    let base = PreparedSample {
        task,
        sample_id: s.id.clone(),
        condition: None,
        gts: Vec::new(),
        caption: None,
    };
    match task {
        TaskKind::Caption => Ok(PreparedSample { caption: Some(s.caption.clone()), ..base }),
        TaskKind::Panoptic => {
            let mut names: Vec<String> = Vec::new();
            for inst in &s.instances {
                let c = inst.category();
                if !names.contains(&c) {
                    names.push(c);
                }
            }
            // Distractors from the catalog, never from the zero-shot holdout:
            // listing a held-out combo here would train it as an explicit
            // negative and poison the transfer split.
            let mut pool: Vec<String> = Dataset::full_category_list()
                .into_iter()
                .filter(|c| !names.contains(c))
                .filter(|c| !holdout.iter().any(|(hc, hs)| format!("{hc} {hs}") == *c))
                .collect();
            pool.shuffle(r);
            let want = if list_size == 0 { usize::MAX } else { list_size };
            for c in pool {
                if names.len() >= want {
                    break;
                }
                names.push(c);
            }
            names.shuffle(r);
            let gts = s
                .instances
                .iter()
                .map(|inst| {
                    let cid = names.iter().position(|c| *c == inst.category()).expect("own category stays listed");
                    GtInstance { mask: inst.visible.clone(), class_id: Some(cid) }
                })
                .collect();
            Ok(PreparedSample { condition: Some(ConditionPrompt::Category(names)), gts, ..base })
        }
        TaskKind::Referring => {
            if s.expressions.is_empty() {
                return Err(Error::Data(format!("sample {} has no referring expressions", s.id)));
            }
            let expr = &s.expressions[r.gen_range(0..s.expressions.len())];
            let gts = expr
                .targets
                .iter()
                .map(|&t| GtInstance { mask: s.instances[t].visible.clone(), class_id: Some(0) })
                .collect();
            Ok(PreparedSample { condition: Some(ConditionPrompt::Sentence(expr.text.clone())), gts, ..base })
        }
        TaskKind::Interactive => {
            if s.prompts.len() != s.instances.len() {
                return Err(Error::Data(format!("sample {} has no stored visual prompts", s.id)));
            }
            let mut prompts = Vec::with_capacity(s.instances.len());
            let mut gts = Vec::with_capacity(s.instances.len());
            for (idx, inst) in s.instances.iter().enumerate() {
                prompts.push(s.prompts[idx][r.gen_range(0..4)].clone());
                gts.push(GtInstance { mask: inst.visible.clone(), class_id: Some(idx) });
            }
            Ok(PreparedSample { condition: Some(ConditionPrompt::VisualPrior(prompts)), gts, ..base })
        }
    }
}

/// Forward one prepared sample and return its differentiable loss.
pub fn sample_loss<E: Elem>(
    model: &Model<E>,
    feats: &MultiLevelFeatures<E>,
    item: &PreparedSample,
    w: &LossWeights,
) -> Result<(Tensor<E>, LossBreakdown)> {
    if item.task == TaskKind::Caption {
        let caption = item.caption.as_deref().ok_or_else(|| Error::Data("caption item without text".into()))?;
        let loss = caption_loss(model, feats, caption)?;
        let v = loss.item().to_f64();
        return Ok((loss, LossBreakdown { total: v, caption: v, ..Default::default() }));
    }
    let condition =
        item.condition.as_ref().ok_or_else(|| Error::Data("segmentation item without a condition".into()))?;
    let out = forward_for_task(model, feats, instruction_text(item.task), condition)?;
    let coupled = !model.cfg.decoupled;
    let merged;
    let gts: &[GtInstance] = if coupled {
        merged = merge_by_entry(&item.gts)?;
        &merged
    } else {
        &item.gts
    };
    let (loss, _, bd) = total_loss(&out, gts, w, coupled)?;
    Ok((loss, bd))
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// One optimizer step's log line.
#[derive(Debug, Clone, Copy)]
pub struct IterRecord {
    pub stage: u32,
    pub iter: usize,
    pub task: TaskKind,
    pub lr: f64,
    pub loss: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
    pub cls: f64,
    pub caption: f64,
}

/// Result of a training run: the trained model plus every iteration record
/// produced by this call (a resumed run records only the iterations it ran).
pub struct TrainRun {
    pub model: Model<f32>,
    pub records: Vec<IterRecord>,
}

const LOG_HEADER: &str = "stage\titer\ttask\tlr\tloss\tmask_bce\tmask_dice\tcls\tcaption";

struct RunDir {
    root: std::path::PathBuf,
    log: std::fs::File,
}

impl RunDir {
    fn create(root: &Path, cfg: &Config) -> Result<RunDir> {
        for sub in ["logs", "checkpoints"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let cfg_path = root.join("config.txt");
        std::fs::write(&cfg_path, cfg.echo()).map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = root.join("logs/train.tsv");
        let fresh = !log_path.exists();
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        if fresh {
            writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
        }
        Ok(RunDir { root: root.to_path_buf(), log })
    }

    fn log_record(&mut self, r: &IterRecord) -> Result<()> {
        writeln!(
            self.log,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.stage,
            r.iter,
            r.task.as_str(),
            r.lr,
            r.loss,
            r.mask_bce,
            r.mask_dice,
            r.cls,
            r.caption
        )
        .map_err(|e| Error::io(self.root.join("logs/train.tsv"), e))
    }
}

fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    adam: &Adam,
    cfg: &Config,
    stage: u32,
    next_iter: usize,
) -> Result<()> {
    let mut tensors = model.params.snapshot();
    tensors.extend(adam.state_tensors());
    let c = ckpt::Checkpoint {
        config_text: cfg.echo(),
        tensors,
        meta: serde_json::json!({ "stage": stage, "next_iter": next_iter }),
    };
    ckpt::write_checkpoint(path, &c)
}

fn meta_usize(meta: &serde_json::Value, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks '{key}'")))
}

/// Pick a training-sample index for a task; referring draws skip (forward,
/// wrapping) past samples whose expression list came out empty.
fn pick_sample(ds: &Dataset, task: TaskKind, r: &mut ChaCha8Rng) -> Result<usize> {
    let n = ds.train.len();
    let idx = r.gen_range(0..n);
    if task != TaskKind::Referring {
        return Ok(idx);
    }
    for off in 0..n {
        let j = (idx + off) % n;
        if !ds.train[j].expressions.is_empty() {
            return Ok(j);
        }
    }
    Err(Error::Config("no training sample has a referring expression".into()))
}

fn validate_for_training(cfg: &Config, ds: &Dataset) -> Result<()> {
    cfg.validate()?;
    LossWeights::from_train(&cfg.train)?;
    if ds.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if ds.image_size != cfg.model.image_size {
        return Err(Error::Config(format!(
            "dataset images are {} px but the model expects {}",
            ds.image_size, cfg.model.image_size
        )));
    }
    if cfg.train.tasks.contains(&TaskKind::Interactive)
        && ds.train.iter().any(|s| s.prompts.len() != s.instances.len())
    {
        return Err(Error::Config(
            "interactive training needs stored visual prompts; build the interactive set first".into(),
        ));
    }
    if cfg.train.tasks.contains(&TaskKind::Referring) && ds.train.iter().all(|s| s.expressions.is_empty()) {
        return Err(Error::Config("no training sample has a referring expression".into()));
    }
    Ok(())
}

fn write_abort_dump(dir: &mut RunDir, context: &str, model: &Model<f32>) {
    let path = dir.root.join("logs/abort.txt");
    let mut text = format!("{context}\n\nparameter l2 norms:\n");
    for p in model.params.iter() {
        let l2: f64 = p.data.iter().map(|&v| {
            let f = v.to_f64();
            f * f
        }).sum::<f64>().sqrt();
        text.push_str(&format!("{}\t{l2}\n", p.name));
    }
    let _ = std::fs::write(path, text);
}

/// Run the two-stage schedule: stage 1 trains only the vision-language
/// projector on captions; stage 2 unfreezes everything but the vision
/// pyramid and samples tasks uniformly per iteration. With `out_dir` set the
/// run directory gets a config echo, a per-iteration TSV log, and periodic
/// checkpoints; `resume` continues from a saved checkpoint and reproduces
/// the uninterrupted run's loss trace exactly.
pub fn train(cfg: &Config, ds: &Dataset, out_dir: Option<&Path>, resume: Option<&Path>) -> Result<TrainRun> {
    validate_for_training(cfg, ds)?;
    let tc = &cfg.train;
    let w = LossWeights::from_train(tc)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), tc.seed)?;
    let mut adam = Adam::new(tc);
    let mut dir = match out_dir {
        Some(root) => Some(RunDir::create(root, cfg)?),
        None => None,
    };

    let (mut start_stage, mut start_iter) = (1u32, 0usize);
    if let Some(path) = resume {
        let c = ckpt::read_checkpoint(path)?;
        model.params.restore(&c.param_tensors())?;
        adam.load_state(&c.tensors);
        start_stage = meta_usize(&c.meta, "stage")? as u32;
        start_iter = meta_usize(&c.meta, "next_iter")?;
    }

    let mut records = Vec::new();
    let mut feat_cache: HashMap<usize, Vec<(Vec<usize>, Vec<f32>)>> = HashMap::new();

    for stage in 1..=2u32 {
        if stage < start_stage {
            continue;
        }
        let total = if stage == 1 { tc.stage1_iters } else { tc.stage2_iters };
        let first = if stage == start_stage { start_iter } else { 0 };
        if stage != start_stage {
            adam = Adam::new(tc);
        }
        model.freeze_stage(stage)?;
        let trainable: Vec<String> =
            model.params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();

        for it in first..total {
            let lr = lr_at(it, total, tc.lr, tc.warmup_frac);
            let task = if stage == 1 { TaskKind::Caption } else { draw_task(&tc.tasks, tc.seed, it as u64)? };
            let mut r = rng::stream_at(tc.seed, &format!("train/batch/s{stage}"), it as u64);
            let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut sums = LossBreakdown::default();

            for _ in 0..tc.batch_size {
                let idx = pick_sample(ds, task, &mut r)?;
                let item = prepare_sample(&ds.train[idx], task, tc.category_list_size, &ds.holdout, &mut r)?;
                let g = Graph::<f32>::new();
                if !feat_cache.contains_key(&idx) {
                    // The vision pyramid never trains, so features are a pure
                    // function of the image and safe to reuse across steps.
                    let tmp = Graph::<f32>::new();
                    let feats = vision::encode_image(&tmp, &model.params, &model.cfg, ds.train[idx].image.planes())?;
                    feat_cache.insert(idx, vision::feature_planes(&feats));
                }
                let feats = vision::features_from_planes(&g, &feat_cache[&idx])?;
                let (loss, bd) = sample_loss(&model, &feats, &item, &w)?;
                if !bd.total.is_finite() {
                    let context = format!(
                        "non-finite loss at stage {stage} iter {it} task {} sample {} \
                         (bce {} dice {} cls {} caption {})",
                        task.as_str(),
                        item.sample_id,
                        bd.mask_bce,
                        bd.mask_dice,
                        bd.cls,
                        bd.caption
                    );
                    if let Some(d) = dir.as_mut() {
                        write_abort_dump(d, &context, &model);
                    }
                    return Err(Error::NonFinite { context: "train".into(), detail: context });
                }
                g.backward(&loss)?;
                for name in &trainable {
                    if let Some(gr) = g.lifted_grad(name) {
                        let acc = grad_acc.entry(name.clone()).or_insert_with(|| vec![0.0; gr.len()]);
                        for (a, v) in acc.iter_mut().zip(gr.iter()) {
                            *a += v.to_f64();
                        }
                    }
                }
                sums.total += bd.total;
                sums.mask_bce += bd.mask_bce;
                sums.mask_dice += bd.mask_dice;
                sums.cls += bd.cls;
                sums.caption += bd.caption;
            }

            let inv = 1.0 / tc.batch_size as f64;
            for g in grad_acc.values_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            adam.step(&mut model.params, &grad_acc, lr)?;

            let rec = IterRecord {
                stage,
                iter: it,
                task,
                lr,
                loss: sums.total * inv,
                mask_bce: sums.mask_bce * inv,
                mask_dice: sums.mask_dice * inv,
                cls: sums.cls * inv,
                caption: sums.caption * inv,
            };
            if let Some(d) = dir.as_mut() {
                d.log_record(&rec)?;
                if tc.log_every > 0 && (it + 1) % tc.log_every == 0 {
                    eprintln!(
                        "stage {stage} iter {}/{total} task {} loss {:.4}",
                        it + 1,
                        task.as_str(),
                        rec.loss
                    );
                }
                if tc.ckpt_every > 0 && (it + 1) % tc.ckpt_every == 0 && it + 1 < total {
                    let p = d.root.join(format!("checkpoints/stage{stage}_iter{:06}.segc", it + 1));
                    save_checkpoint(&p, &model, &adam, cfg, stage, it + 1)?;
                }
            }
            records.push(rec);
        }

        if let Some(d) = dir.as_mut() {
            let p = d.root.join(format!("checkpoints/stage{stage}_final.segc"));
            save_checkpoint(&p, &model, &adam, cfg, stage, total)?;
        }
    }

    if let Some(d) = dir.as_mut() {
        save_checkpoint(&d.root.join("checkpoints/final.segc"), &model, &adam, cfg, 2, tc.stage2_iters)?;
    }
    Ok(TrainRun { model, records })
}

/// Restore a trained model from a checkpoint written by [`train`].
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let c = ckpt::read_checkpoint(path)?;
    let mut cfg = Config::default();
    cfg.apply_text(&c.config_text)?;
    let mut model = Model::<f32>::new(cfg.model, 0)?;
    model.params.restore(&c.param_tensors())?;
    Ok(model)
}
