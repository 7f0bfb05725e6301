//! Synthetic shape scenes with dense ground truth.
//!
//! Each sample paints 1–5 anti-aliased colored shapes back-to-front over a
//! textured background. Ground truth is the visible partition of the canvas
//! (majority vote over 16 subsamples per pixel, so masks are disjoint by
//! construction), referring expressions from a small attribute grammar, an
//! enumerating caption, and optionally four visual prompts per instance.
//! Generation is a pure function of (seed, config): every sample draws from
//! its own named RNG stream, so parallel and serial runs agree byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mask::{BinMask, Rle};
use crate::rng;
use crate::schema::VisualPrompt;

pub const COLORS: [(&str, [f32; 3]); 5] = [
    ("red", [0.86, 0.18, 0.16]),
    ("green", [0.17, 0.70, 0.24]),
    ("blue", [0.20, 0.34, 0.86]),
    ("yellow", [0.91, 0.85, 0.21]),
    ("purple", [0.58, 0.23, 0.77]),
];

pub const SHAPES: [&str; 4] = ["triangle", "circle", "square", "star"];
pub const SIZES: [&str; 2] = ["small", "large"];

/// Order of the per-instance prompt slots.
pub const PROMPT_KINDS: [&str; 4] = ["point", "scribble", "box", "mask"];

/// How many polyline points a scribble carries.
pub const SCRIBBLE_POINTS: usize = 96;

/// Comparison buffer (pixels) the expression generator demands between the
/// winner and the runner-up, so the margin-free resolver can never disagree.
const POSITION_MARGIN: f64 = 2.0;
const AREA_MARGIN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x0 + self.w / 2.0, self.y0 + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let ix = (self.x0 + self.w).min(o.x0 + o.w) - self.x0.max(o.x0);
        let iy = (self.y0 + self.h).min(o.y0 + o.h) - self.y0.max(o.y0);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + o.area() - inter)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w > 0.0 && self.h > 0.0 && self.x0.is_finite() && self.y0.is_finite() {
            Ok(())
        } else {
            Err(Error::Data(format!("degenerate box {self:?}")))
        }
    }

    /// Tight pixel box around the set bits, or None for an empty mask.
    pub fn from_mask(m: &BinMask) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..m.h {
            for x in 0..m.w {
                if m.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if x0 == usize::MAX {
            return None;
        }
        Some(BBox {
            x0: x0 as f64,
            y0: y0 as f64,
            w: (x1 - x0 + 1) as f64,
            h: (y1 - y0 + 1) as f64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub color: String,
    pub shape: String,
    pub size: String,
    pub center: (f64, f64),
    pub radius: f64,
    /// Visible-region mask after occlusion.
    pub visible: BinMask,
    /// Tight box around the visible region.
    pub bbox: BBox,
}

impl Instance {
    pub fn category(&self) -> String {
        format!("{} {}", self.color, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefExpr {
    pub text: String,
    pub targets: Vec<usize>,
    /// True for "all ..." expressions that may pick several instances.
    pub multi: bool,
}

#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub image: RgbImage,
    pub instances: Vec<Instance>,
    pub expressions: Vec<RefExpr>,
    pub caption: String,
    /// One prompt per kind per instance, in `PROMPT_KINDS` order; empty
    /// until `build_interactive_set` runs.
    pub prompts: Vec<[VisualPrompt; 4]>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub zeroshot: Vec<SegSample>,
    pub holdout: Vec<(String, String)>,
    pub image_size: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[SegSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "zeroshot" => Ok(&self.zeroshot),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }

    /// Every category name that can appear, holdouts included.
    pub fn full_category_list() -> Vec<String> {
        let mut v = Vec::new();
        for (c, _) in COLORS {
            for s in SHAPES {
                v.push(format!("{c} {s}"));
            }
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Scene geometry and rendering
// ---------------------------------------------------------------------------

struct ShapeSpec {
    color: usize,
    shape: usize,
    size: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

fn polygon(shape: &str, cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    match shape {
        "triangle" => (0..3)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::TAU / 3.0;
                (cx + r * a.cos(), cy - r * a.sin())
            })
            .collect(),
        "star" => (0..10)
            .map(|k| {
                let rr = if k % 2 == 0 { r } else { 0.45 * r };
                let a = std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::TAU / 10.0;
                (cx + rr * a.cos(), cy - rr * a.sin())
            })
            .collect(),
        other => panic!("no polygon for shape {other}"),
    }
}

fn in_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn inside_shape(shape: &str, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
    match shape {
        "circle" => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        "square" => (x - cx).abs() <= 0.85 * r && (y - cy).abs() <= 0.85 * r,
        _ => in_polygon(&polygon(shape, cx, cy, r), x, y),
    }
}

/// Paint shapes back to front with 4x4 supersampling. A pixel joins an
/// instance's visible mask when that instance tops the majority of its
/// subsamples, which keeps the masks disjoint without any cleanup pass.
fn render(specs: &[ShapeSpec], size: usize, rng: &mut ChaCha8Rng) -> (RgbImage, Vec<BinMask>) {
    let mut img = RgbImage::new(size, size);
    let base = 0.40 + rng.gen_range(0.0..0.12) as f32;
    let tilt = rng.gen_range(-0.06..0.06) as f32;
    let mut bg = vec![[0f32; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let n = rng.gen_range(-0.045..0.045) as f32;
            let v = base + tilt * (y as f32 / size as f32 - 0.5) + n;
            bg[y * size + x] = [v, v + 0.01, v + 0.02];
        }
    }
    let polys: Vec<Option<Vec<(f64, f64)>>> = specs
        .iter()
        .map(|s| {
            let name = SHAPES[s.shape];
            (name != "circle" && name != "square").then(|| polygon(name, s.cx, s.cy, s.r))
        })
        .collect();
    let mut masks = vec![BinMask::new(size, size); specs.len()];
    const SS: usize = 4;
    for y in 0..size {
        for x in 0..size {
            let mut counts = vec![0usize; specs.len()];
            let mut acc = [0f32; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let mut top: Option<usize> = None;
                    for (k, s) in specs.iter().enumerate().rev() {
                        let hit = match &polys[k] {
                            Some(p) => in_polygon(p, px, py),
                            None => inside_shape(SHAPES[s.shape], s.cx, s.cy, s.r, px, py),
                        };
                        if hit {
                            top = Some(k);
                            break;
                        }
                    }
                    let rgb = match top {
                        Some(k) => {
                            counts[k] += 1;
                            COLORS[specs[k].color].1
                        }
                        None => bg[y * size + x],
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c];
                    }
                }
            }
            let inv = 1.0 / (SS * SS) as f32;
            img.set(x, y, [acc[0] * inv, acc[1] * inv, acc[2] * inv]);
            for (k, &c) in counts.iter().enumerate() {
                if c > SS * SS / 2 {
                    masks[k].set(x, y, true);
                }
            }
        }
    }
    (img, masks)
}

fn all_combos() -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for c in 0..COLORS.len() {
        for s in 0..SHAPES.len() {
            v.push((c, s));
        }
    }
    v
}

fn holdout_indices(holdout: &[(String, String)]) -> Result<Vec<(usize, usize)>> {
    holdout
        .iter()
        .map(|(c, s)| {
            let ci = COLORS
                .iter()
                .position(|(n, _)| n == c)
                .ok_or_else(|| Error::Config(format!("unknown holdout color '{c}'")))?;
            let si = SHAPES
                .iter()
                .position(|n| n == s)
                .ok_or_else(|| Error::Config(format!("unknown holdout shape '{s}'")))?;
            Ok((ci, si))
        })
        .collect()
}

/// One attempt at a scene; None when an instance ends up too occluded.
fn try_scene(
    r: &mut ChaCha8Rng,
    cfg: &DataConfig,
    force_holdout: bool,
    holdout: &[(usize, usize)],
) -> Option<(RgbImage, Vec<Instance>)> {
    let s = cfg.image_size as f64;
    let scale = s / 64.0;
    let n = r.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let train_pool: Vec<(usize, usize)> =
        all_combos().into_iter().filter(|c| !holdout.contains(c)).collect();
    let holdout_slot = force_holdout.then(|| r.gen_range(0..n));
    let mut specs = Vec::with_capacity(n);
    for i in 0..n {
        let (color, shape) = if Some(i) == holdout_slot {
            holdout[r.gen_range(0..holdout.len())]
        } else if force_holdout {
            // Zero-shot scenes may mix held-out and ordinary combos.
            let pool = all_combos();
            pool[r.gen_range(0..pool.len())]
        } else {
            train_pool[r.gen_range(0..train_pool.len())]
        };
        let size = r.gen_range(0..SIZES.len());
        let rad = if SIZES[size] == "small" {
            r.gen_range(5.5..7.5) * scale
        } else {
            r.gen_range(9.0..12.0) * scale
        };
        let cx = r.gen_range(rad + 1.0..s - rad - 1.0);
        let cy = r.gen_range(rad + 1.0..s - rad - 1.0);
        specs.push(ShapeSpec { color, shape, size, cx, cy, r: rad });
    }
    let (image, masks) = render(&specs, cfg.image_size, r);
    let mut instances = Vec::with_capacity(n);
    for (spec, visible) in specs.into_iter().zip(masks) {
        if visible.area() < 4 {
            return None;
        }
        let bbox = BBox::from_mask(&visible)?;
        instances.push(Instance {
            color: COLORS[spec.color].0.to_string(),
            shape: SHAPES[spec.shape].to_string(),
            size: SIZES[spec.size].to_string(),
            center: (spec.cx, spec.cy),
            radius: spec.r,
            visible,
            bbox,
        });
    }
    Some((image, instances))
}

// ---------------------------------------------------------------------------
// Referring expressions: generator and the margin-free resolver oracle
// ---------------------------------------------------------------------------

fn matching(instances: &[Instance], f: impl Fn(&Instance) -> bool) -> Vec<usize> {
    instances
        .iter()
        .enumerate()
        .filter_map(|(i, inst)| f(inst).then_some(i))
        .collect()
}

/// Winner by key with the runner-up at least `margin` behind, else None.
fn clear_extreme<K: PartialOrd + Copy>(
    keys: &[(usize, K)],
    smaller_wins: bool,
    gap: impl Fn(K, K) -> bool,
) -> Option<usize> {
    if keys.len() < 2 {
        return None;
    }
    let better = |a: K, b: K| if smaller_wins { a < b } else { a > b };
    let mut best = keys[0];
    for &k in &keys[1..] {
        if better(k.1, best.1) {
            best = k;
        }
    }
    for &(i, k) in keys {
        if i != best.0 && !gap(best.1, k) {
            return None;
        }
    }
    Some(best.0)
}

/// All expressions of the grammar that resolve unambiguously, in a fixed
/// deterministic order.
pub fn generate_expressions(instances: &[Instance]) -> Vec<RefExpr> {
    let mut out: Vec<RefExpr> = Vec::new();
    let mut push = |text: String, targets: Vec<usize>, multi: bool| {
        if !out.iter().any(|e| e.text == text) {
            out.push(RefExpr { text, targets, multi });
        }
    };

    // Attribute phrases: emit each phrase only when it picks out exactly
    // one instance.
    for (i, inst) in instances.iter().enumerate() {
        let candidates = [
            format!("the {}", inst.shape),
            format!("the {} {}", inst.color, inst.shape),
            format!("the {} {} {}", inst.size, inst.color, inst.shape),
            format!("the {} {}", inst.size, inst.shape),
            format!("the {} thing", inst.color),
        ];
        for text in candidates {
            let hits = matching(instances, |o| phrase_matches(&text, o));
            if hits == [i] {
                push(text, vec![i], false);
            }
        }
    }

    // Positional and size superlatives over the whole scene and per shape.
    let scopes: Vec<(String, Vec<usize>)> = std::iter::once(("shape".to_string(), (0..instances.len()).collect()))
        .chain(SHAPES.iter().filter_map(|s| {
            let hits = matching(instances, |o| o.shape == *s);
            (hits.len() >= 2).then(|| (s.to_string(), hits))
        }))
        .collect();
    for (noun, members) in &scopes {
        let xs: Vec<(usize, f64)> =
            members.iter().map(|&i| (i, instances[i].bbox.center().0)).collect();
        let ys: Vec<(usize, f64)> =
            members.iter().map(|&i| (i, instances[i].bbox.center().1)).collect();
        let areas: Vec<(usize, usize)> =
            members.iter().map(|&i| (i, instances[i].visible.area())).collect();
        let pos_gap = |a: f64, b: f64| (a - b).abs() >= POSITION_MARGIN;
        let area_gap = |a: usize, b: usize| a.abs_diff(b) >= AREA_MARGIN;
        let cases: [(&str, Option<usize>); 6] = [
            ("leftmost", clear_extreme(&xs, true, pos_gap)),
            ("rightmost", clear_extreme(&xs, false, pos_gap)),
            ("topmost", clear_extreme(&ys, true, pos_gap)),
            ("bottommost", clear_extreme(&ys, false, pos_gap)),
            ("smallest", clear_extreme(&areas, true, area_gap)),
            ("largest", clear_extreme(&areas, false, area_gap)),
        ];
        for (word, winner) in cases {
            if let Some(i) = winner {
                push(format!("the {word} {noun}"), vec![i], false);
            }
        }
    }

    // Binary relations "the A left of the B": only when B is the unique
    // instance of its shape and exactly one A-shaped instance sits clearly
    // on the stated side.
    for s2 in SHAPES {
        let anchors = matching(instances, |o| o.shape == s2);
        let [b] = anchors[..] else { continue };
        let (bx, by) = instances[b].bbox.center();
        for s1 in SHAPES {
            if s1 == s2 {
                continue;
            }
            let cands = matching(instances, |o| o.shape == s1);
            let sides: [(&str, Vec<usize>, Vec<usize>); 4] = [
                (
                    "left of",
                    side(&cands, instances, |x, _| x < bx - POSITION_MARGIN),
                    side(&cands, instances, |x, _| x < bx + POSITION_MARGIN),
                ),
                (
                    "right of",
                    side(&cands, instances, |x, _| x > bx + POSITION_MARGIN),
                    side(&cands, instances, |x, _| x > bx - POSITION_MARGIN),
                ),
                (
                    "above",
                    side(&cands, instances, |_, y| y < by - POSITION_MARGIN),
                    side(&cands, instances, |_, y| y < by + POSITION_MARGIN),
                ),
                (
                    "below",
                    side(&cands, instances, |_, y| y > by + POSITION_MARGIN),
                    side(&cands, instances, |_, y| y > by - POSITION_MARGIN),
                ),
            ];
            for (rel, strict, loose) in sides {
                if strict.len() == 1 && strict == loose {
                    push(format!("the {s1} {rel} the {s2}"), strict, false);
                }
            }
        }
    }

    // Multi-target groups.
    for (c, _) in COLORS {
        let hits = matching(instances, |o| o.color == c);
        if hits.len() >= 2 {
            push(format!("all {c} shapes"), hits, true);
        }
    }
    for s in SHAPES {
        let hits = matching(instances, |o| o.shape == s);
        if hits.len() >= 2 {
            push(format!("all {s}s"), hits, true);
        }
    }
    if instances.len() >= 2 {
        push("all shapes".to_string(), (0..instances.len()).collect(), true);
    }
    out
}

fn side(cands: &[usize], instances: &[Instance], f: impl Fn(f64, f64) -> bool) -> Vec<usize> {
    cands
        .iter()
        .copied()
        .filter(|&i| {
            let (x, y) = instances[i].bbox.center();
            f(x, y)
        })
        .collect()
}

/// Does a "the [size] [color] (shape|thing)" phrase match this instance?
fn phrase_matches(text: &str, inst: &Instance) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut idx = 1; // skip "the"
    let mut size: Option<&str> = None;
    let mut color: Option<&str> = None;
    if idx < words.len() && SIZES.contains(&words[idx]) {
        size = Some(words[idx]);
        idx += 1;
    }
    if idx < words.len() && COLORS.iter().any(|(c, _)| *c == words[idx]) {
        color = Some(words[idx]);
        idx += 1;
    }
    let noun = words.get(idx).copied().unwrap_or("");
    let shape_ok = noun == "thing" || noun == inst.shape;
    shape_ok
        && size.map_or(true, |s| s == inst.size)
        && color.map_or(true, |c| c == inst.color)
}

/// Independent re-parse of an expression against scene geometry. This is
/// the validator the generator is tested against: same grammar, but plain
/// strict comparisons with no margins.
pub fn resolve_expression(text: &str, instances: &[Instance]) -> Result<Vec<usize>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::Data(format!("unparseable expression '{text}'"));
    match words.first() {
        Some(&"all") => {
            if words.len() == 2 && words[1] == "shapes" {
                return Ok((0..instances.len()).collect());
            }
            if words.len() == 3 && words[2] == "shapes" {
                let c = words[1];
                return Ok(matching(instances, |o| o.color == c));
            }
            if words.len() == 2 {
                let singular = words[1].strip_suffix('s').ok_or_else(bad)?;
                return Ok(matching(instances, |o| o.shape == singular));
            }
            Err(bad())
        }
        Some(&"the") => {
            const SUPERLATIVES: [&str; 6] =
                ["leftmost", "rightmost", "topmost", "bottommost", "largest", "smallest"];
            if words.len() == 3 && SUPERLATIVES.contains(&words[1]) {
                let members = if words[2] == "shape" {
                    (0..instances.len()).collect::<Vec<_>>()
                } else {
                    matching(instances, |o| o.shape == words[2])
                };
                if members.is_empty() {
                    return Ok(vec![]);
                }
                let key = |i: usize| -> f64 {
                    let (x, y) = instances[i].bbox.center();
                    match words[1] {
                        "leftmost" => x,
                        "rightmost" => -x,
                        "topmost" => y,
                        "bottommost" => -y,
                        "largest" => -(instances[i].visible.area() as f64),
                        _ => instances[i].visible.area() as f64,
                    }
                };
                let best = members
                    .into_iter()
                    .min_by(|&a, &b| key(a).total_cmp(&key(b)))
                    .unwrap();
                return Ok(vec![best]);
            }
            // "the A left|right of the B" (6 words), "the A above|below the B" (5).
            for (rel, with_of) in
                [("left", true), ("right", true), ("above", false), ("below", false)]
            {
                let n = if with_of { 6 } else { 5 };
                if words.len() == n
                    && words[2] == rel
                    && (!with_of || words[3] == "of")
                    && words[n - 2] == "the"
                {
                    let (s1, s2) = (words[1], words[n - 1]);
                    let anchors = matching(instances, |o| o.shape == s2);
                    let [b] = anchors[..] else {
                        return Err(Error::Data(format!("ambiguous anchor in '{text}'")));
                    };
                    let (bx, by) = instances[b].bbox.center();
                    return Ok(side(
                        &matching(instances, |o| o.shape == s1),
                        instances,
                        |x, y| match rel {
                            "left" => x < bx,
                            "right" => x > bx,
                            "above" => y < by,
                            _ => y > by,
                        },
                    ));
                }
            }
            Ok(matching(instances, |o| phrase_matches(text, o)))
        }
        _ => Err(bad()),
    }
}

fn caption_for(instances: &[Instance]) -> String {
    let descs: Vec<String> = instances
        .iter()
        .map(|i| format!("a {} {} {}", i.size, i.color, i.shape))
        .collect();
    let list = match descs.len() {
        1 => descs[0].clone(),
        _ => format!(
            "{} and {}",
            descs[..descs.len() - 1].join(" , "),
            descs[descs.len() - 1]
        ),
    };
    format!("the scene contains {list} .")
}

// ---------------------------------------------------------------------------
// Generation driver
// ---------------------------------------------------------------------------

fn gen_sample(
    cfg: &DataConfig,
    split: &str,
    i: usize,
    force_holdout: bool,
    holdout: &[(usize, usize)],
) -> Result<SegSample> {
    for attempt in 0..64 {
        let mut r = rng::stream(cfg.seed, &format!("data/{split}/{i}/try{attempt}"));
        if let Some((image, instances)) = try_scene(&mut r, cfg, force_holdout, holdout) {
            let expressions = generate_expressions(&instances);
            let caption = caption_for(&instances);
            return Ok(SegSample {
                id: format!("{split}-{i:06}"),
                image,
                instances,
                expressions,
                caption,
                prompts: Vec::new(),
            });
        }
    }
    Err(Error::Data(format!(
        "could not synthesize sample {split}/{i}: every attempt left an instance under 4 visible pixels"
    )))
}

/// Generate all three splits. Train and val scenes never use held-out
/// color–shape combos; every zero-shot scene contains at least one.
pub fn gen_shapeworld(cfg: &DataConfig) -> Result<Dataset> {
    let holdout = holdout_indices(&cfg.holdout)?;
    let mut uniq = holdout.clone();
    uniq.sort_unstable();
    uniq.dedup();
    if all_combos().len() == uniq.len() {
        return Err(Error::Config(
            "holdout list covers every color-shape combo; nothing left to train on".into(),
        ));
    }
    if cfg.n_zeroshot > 0 && holdout.is_empty() {
        return Err(Error::Config("zero-shot split requested with an empty holdout list".into()));
    }
    let gen_split = |name: &str, n: usize, force: bool| -> Result<Vec<SegSample>> {
        (0..n)
            .into_par_iter()
            .map(|i| gen_sample(cfg, name, i, force, &holdout))
            .collect()
    };
    Ok(Dataset {
        train: gen_split("train", cfg.n_train, false)?,
        val: gen_split("val", cfg.n_val, false)?,
        zeroshot: gen_split("zeroshot", cfg.n_zeroshot, true)?,
        holdout: cfg.holdout.clone(),
        image_size: cfg.image_size,
        seed: cfg.seed,
    })
}

// ---------------------------------------------------------------------------
// Visual-prompt samplers
// ---------------------------------------------------------------------------

fn clamp_pt(x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
    (x.clamp(0.0, w as f64 - 1e-3), y.clamp(0.0, h as f64 - 1e-3))
}

/// Uniform point in the disc centered on the box, radius half the short
/// side, clamped onto the canvas.
pub fn sample_point_prompt(
    b: &BBox,
    r: &mut ChaCha8Rng,
    img_w: usize,
    img_h: usize,
) -> Result<VisualPrompt> {
    b.validate()?;
    let (cx, cy) = b.center();
    let radius = b.w.min(b.h) / 2.0;
    let rr = radius * r.gen_range(0.0f64..1.0).sqrt();
    let th = r.gen_range(0.0..std::f64::consts::TAU);
    let (x, y) = clamp_pt(cx + rr * th.cos(), cy + rr * th.sin(), img_w, img_h);
    Ok(VisualPrompt::Point { x, y })
}

/// Rescale width and height independently about a fixed center until the
/// result overlaps the original well enough.
pub fn jitter_box(
    b: &BBox,
    scale_range: (f64, f64),
    iou_min: f64,
    r: &mut ChaCha8Rng,
) -> Result<BBox> {
    b.validate()?;
    if !(scale_range.0 <= scale_range.1) || !(0.0..1.0).contains(&iou_min) {
        return Err(Error::Data(format!(
            "bad jitter parameters: scales {scale_range:?}, iou_min {iou_min}"
        )));
    }
    let (cx, cy) = b.center();
    for _ in 0..100 {
        let sw = if scale_range.0 == scale_range.1 {
            scale_range.0
        } else {
            r.gen_range(scale_range.0..scale_range.1)
        };
        let sh = if scale_range.0 == scale_range.1 {
            scale_range.0
        } else {
            r.gen_range(scale_range.0..scale_range.1)
        };
        let (w, h) = (b.w * sw, b.h * sh);
        let cand = BBox { x0: cx - w / 2.0, y0: cy - h / 2.0, w, h };
        if cand.iou(b) > iou_min {
            return Ok(cand);
        }
    }
    Err(Error::Data(format!(
        "jitter_box: no draw in {scale_range:?} reached IoU > {iou_min} within 100 tries"
    )))
}

/// Pure scribble geometry: a sine ride along the segment from `p0` to `p1`,
/// amplitude windowed by sin(pi t) so the endpoints stay on the corners.
pub fn scribble_geometry(
    p0: (f64, f64),
    p1: (f64, f64),
    amplitude: f64,
    cycles: f64,
    phase: f64,
    n_points: usize,
) -> Result<Vec<(f64, f64)>> {
    let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
    let len = (dx * dx + dy * dy).sqrt();
    if len < 1e-9 {
        return Err(Error::Data("scribble diagonal has zero length".into()));
    }
    let (nx, ny) = (-dy / len, dx / len);
    Ok((0..n_points)
        .map(|i| {
            let t = i as f64 / (n_points - 1) as f64;
            let off = amplitude
                * (std::f64::consts::TAU * cycles * t + phase).sin()
                * (std::f64::consts::PI * t).sin();
            (p0.0 + dx * t + nx * off, p0.1 + dy * t + ny * off)
        })
        .collect())
}

/// Jitter the box, pick one of its diagonals, and ride a random sine along
/// it: amplitude in [10, 20] px, 0.2–1 cycles, uniform phase.
pub fn sample_scribble_prompt(
    b: &BBox,
    r: &mut ChaCha8Rng,
    img_w: usize,
    img_h: usize,
) -> Result<VisualPrompt> {
    let jb = jitter_box(b, (0.5, 1.2), 0.5, r)?;
    let corners = if r.gen_bool(0.5) {
        ((jb.x0, jb.y0), (jb.x0 + jb.w, jb.y0 + jb.h))
    } else {
        ((jb.x0, jb.y0 + jb.h), (jb.x0 + jb.w, jb.y0))
    };
    let a = r.gen_range(10.0..20.0);
    let cycles = r.gen_range(0.2..1.0);
    let phase = r.gen_range(0.0..std::f64::consts::TAU);
    let pts = scribble_geometry(corners.0, corners.1, a, cycles, phase, SCRIBBLE_POINTS)?
        .into_iter()
        .map(|(x, y)| clamp_pt(x, y, img_w, img_h))
        .collect();
    Ok(VisualPrompt::Scribble(pts))
}

/// Width and height independently rescaled by [0.9, 1.1] about the center,
/// then intersected with the canvas.
pub fn sample_box_prompt(
    b: &BBox,
    r: &mut ChaCha8Rng,
    img_w: usize,
    img_h: usize,
) -> Result<VisualPrompt> {
    b.validate()?;
    let (cx, cy) = b.center();
    let w = b.w * r.gen_range(0.9..1.1);
    let h = b.h * r.gen_range(0.9..1.1);
    let x0 = (cx - w / 2.0).max(0.0);
    let y0 = (cy - h / 2.0).max(0.0);
    let x1 = (cx + w / 2.0).min(img_w as f64 - 1e-3);
    let y1 = (cy + h / 2.0).min(img_h as f64 - 1e-3);
    Ok(VisualPrompt::Box { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
}

/// Separable Gaussian blur of the mask, sigma 2, kernel truncated at 3
/// sigma, zero padding. Values stay in [0, 1] because the kernel has unit
/// mass.
pub fn blur_mask(m: &BinMask) -> Vec<f64> {
    const SIGMA: f64 = 2.0;
    const R: i64 = 6; // 3 sigma
    let kernel: Vec<f64> = {
        let raw: Vec<f64> =
            (-R..=R).map(|j| (-(j * j) as f64 / (2.0 * SIGMA * SIGMA)).exp()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    };
    let (w, h) = (m.w as i64, m.h as i64);
    let src: Vec<f64> = m.to_f();
    let mut tmp = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let xx = x + ki as i64 - R;
                if (0..w).contains(&xx) {
                    acc += kv * src[(y * w + xx) as usize];
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let yy = y + ki as i64 - R;
                if (0..h).contains(&yy) {
                    acc += kv * tmp[(yy * w + x) as usize];
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Blur-then-binarize mask degradation. Thin masks can vanish entirely;
/// that is reported as an error so the caller can fall back to the raw mask.
pub fn sample_mask_prompt(gt: &BinMask) -> Result<VisualPrompt> {
    if gt.is_empty() {
        return Err(Error::Data("mask prompt from an empty ground-truth mask".into()));
    }
    let blurred = blur_mask(gt);
    let bits: Vec<bool> = blurred.iter().map(|&v| v >= 0.5).collect();
    let m = BinMask::from_bits(gt.w, gt.h, bits)?;
    if m.is_empty() {
        return Err(Error::Data("mask prompt degenerated to empty after blurring".into()));
    }
    Ok(VisualPrompt::Mask(m))
}

/// Attach one prompt of each kind to every instance. Seeds derive from
/// (sample id, instance index, kind), so regeneration is stable and
/// independent of iteration order. A blurred-out mask falls back to the raw
/// ground truth.
pub fn build_interactive_set(ds: &mut Dataset, seed: u64) -> Result<()> {
    let size = ds.image_size;
    for split in [&mut ds.train, &mut ds.val, &mut ds.zeroshot] {
        split.par_iter_mut().try_for_each(|sample| -> Result<()> {
            let mut all = Vec::with_capacity(sample.instances.len());
            for (idx, inst) in sample.instances.iter().enumerate() {
                let draw = |kind: &str| rng::stream(seed, &format!("prompt/{}/{idx}/{kind}", sample.id));
                let point = sample_point_prompt(&inst.bbox, &mut draw("point"), size, size)?;
                let scribble = sample_scribble_prompt(&inst.bbox, &mut draw("scribble"), size, size)?;
                let boxp = sample_box_prompt(&inst.bbox, &mut draw("box"), size, size)?;
                let mask = match sample_mask_prompt(&inst.visible) {
                    Ok(m) => m,
                    Err(_) => VisualPrompt::Mask(inst.visible.clone()),
                };
                all.push([point, scribble, boxp, mask]);
            }
            sample.prompts = all;
            Ok(())
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Disk format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    color: String,
    shape: String,
    size: String,
    center: (f64, f64),
    radius: f64,
    bbox: BBox,
    visible: Rle,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum PromptRecord {
    Point { x: f64, y: f64 },
    Scribble { points: Vec<(f64, f64)> },
    Box { x: f64, y: f64, w: f64, h: f64 },
    Mask { rle: Rle },
}

impl From<&VisualPrompt> for PromptRecord {
    fn from(p: &VisualPrompt) -> Self {
        match p {
            VisualPrompt::Point { x, y } => PromptRecord::Point { x: *x, y: *y },
            VisualPrompt::Scribble(pts) => PromptRecord::Scribble { points: pts.clone() },
            VisualPrompt::Box { x, y, w, h } => {
                PromptRecord::Box { x: *x, y: *y, w: *w, h: *h }
            }
            VisualPrompt::Mask(m) => PromptRecord::Mask { rle: m.encode() },
        }
    }
}

impl PromptRecord {
    fn to_prompt(&self) -> Result<VisualPrompt> {
        Ok(match self {
            PromptRecord::Point { x, y } => VisualPrompt::Point { x: *x, y: *y },
            PromptRecord::Scribble { points } => VisualPrompt::Scribble(points.clone()),
            PromptRecord::Box { x, y, w, h } => {
                VisualPrompt::Box { x: *x, y: *y, w: *w, h: *h }
            }
            PromptRecord::Mask { rle } => VisualPrompt::Mask(rle.decode()?),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    caption: String,
    instances: Vec<InstanceRecord>,
    expressions: Vec<RefExpr>,
    prompts: Vec<Vec<PromptRecord>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    image_size: usize,
    seed: u64,
    holdout: Vec<(String, String)>,
    splits: BTreeMap<String, Vec<String>>,
}

fn sample_record(s: &SegSample) -> SampleRecord {
    SampleRecord {
        id: s.id.clone(),
        caption: s.caption.clone(),
        instances: s
            .instances
            .iter()
            .map(|i| InstanceRecord {
                color: i.color.clone(),
                shape: i.shape.clone(),
                size: i.size.clone(),
                center: i.center,
                radius: i.radius,
                bbox: i.bbox,
                visible: i.visible.encode(),
            })
            .collect(),
        expressions: s.expressions.clone(),
        prompts: s.prompts.iter().map(|ps| ps.iter().map(PromptRecord::from).collect()).collect(),
    }
}

/// Write the dataset as one directory: a split manifest, then one PPM image
/// and one JSON record per sample.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let samples_dir = dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut splits = BTreeMap::new();
    for (name, list) in
        [("train", &ds.train), ("val", &ds.val), ("zeroshot", &ds.zeroshot)]
    {
        splits.insert(name.to_string(), list.iter().map(|s| s.id.clone()).collect());
        for s in list {
            s.image.write_ppm(&samples_dir.join(format!("{}.ppm", s.id)))?;
            let json = serde_json::to_string_pretty(&sample_record(s))?;
            let path = samples_dir.join(format!("{}.json", s.id));
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
    }
    let manifest = ManifestRecord {
        image_size: ds.image_size,
        seed: ds.seed,
        holdout: ds.holdout.clone(),
        splits,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: ManifestRecord = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )?;
    let load_split = |name: &str| -> Result<Vec<SegSample>> {
        manifest
            .splits
            .get(name)
            .map(|ids| ids.as_slice())
            .unwrap_or(&[])
            .iter()
            .map(|id| {
                let image = RgbImage::read_ppm(&dir.join(format!("samples/{id}.ppm")))?;
                let rec_path = dir.join(format!("samples/{id}.json"));
                let rec: SampleRecord = serde_json::from_str(
                    &std::fs::read_to_string(&rec_path).map_err(|e| Error::io(&rec_path, e))?,
                )?;
                let instances = rec
                    .instances
                    .into_iter()
                    .map(|i| {
                        Ok(Instance {
                            color: i.color,
                            shape: i.shape,
                            size: i.size,
                            center: i.center,
                            radius: i.radius,
                            visible: i.visible.decode()?,
                            bbox: i.bbox,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let prompts = rec
                    .prompts
                    .into_iter()
                    .map(|ps| {
                        let v: Vec<VisualPrompt> =
                            ps.iter().map(PromptRecord::to_prompt).collect::<Result<_>>()?;
                        <[VisualPrompt; 4]>::try_from(v).map_err(|v| {
                            Error::Data(format!("expected 4 prompts, found {}", v.len()))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SegSample {
                    id: rec.id,
                    image,
                    instances,
                    expressions: rec.expressions,
                    caption: rec.caption,
                    prompts,
                })
            })
            .collect()
    };
    Ok(Dataset {
        train: load_split("train")?,
        val: load_split("val")?,
        zeroshot: load_split("zeroshot")?,
        holdout: manifest.holdout,
        image_size: manifest.image_size,
        seed: manifest.seed,
    })
}

/// Serialized form of one sample, used by determinism checks.
pub fn sample_fingerprint(s: &SegSample) -> Result<String> {
    Ok(serde_json::to_string(&sample_record(s))?)
}
