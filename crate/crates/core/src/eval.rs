//! Four-protocol evaluation harness for human parsing predictions.
//!
//! The four protocols score the same predictions at different granularities:
//!
//! * **FPP** — foreground person parsing: one mask per person, covering the
//!   union of that person's body-part, clothing, and accessory pixels.
//! * **BHP** — body human parsing: face / hair / hand / leg, with left and
//!   right variants collapsed into a single class.
//! * **CCP** — carried/worn accessory parsing over seven object classes.
//! * **COP** — clothing-only parsing over the full clothing + accessory
//!   vocabulary (a superset of the CCP classes, disjoint from BHP).
//!
//! Free-form labels are first mapped into this canonical vocabulary by a
//! [`UnificationMap`]; unmapped labels pass through lowercased so novel
//! categories keep their own metric rows.
//!
//! Metric conventions (also embedded in every [`MetricReport`]):
//!
//! * mIoU / mAcc aggregate per-class pixel counts over the whole split and
//!   average over classes present in the ground truth; a split with no
//!   present classes is marked empty rather than scored zero.
//! * mAP_SS averages, over IoU thresholds `0.50:0.05:0.95`, the fraction of
//!   (image, class) pairs whose semantic IoU meets the threshold.
//! * mAP_IS follows detection practice: score-ordered greedy one-to-one
//!   matching per image, 101-point interpolated precision-recall area,
//!   averaged over the same thresholds and over categories with ground truth.
//! * AR@100 keeps the 100 highest-scoring predictions per image and averages
//!   recall over thresholds and over images with ground truth.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::prompts::EnsembleTable;
use crate::sample::LabeledSample;

/// Body classes scored by BHP. Left/right sides unify into one class.
pub const BHP_CATEGORIES: [&str; 4] = ["face", "hair", "hand", "leg"];

/// Accessory classes scored by CCP.
pub const CCP_CATEGORIES: [&str; 7] = [
    "backpack",
    "umbrella",
    "shoe",
    "eye glasses",
    "handbag",
    "tie",
    "suitcase",
];

/// Clothing + accessory classes scored by COP. Superset of [`CCP_CATEGORIES`],
/// disjoint from [`BHP_CATEGORIES`].
pub const COP_CATEGORIES: [&str; 14] = [
    "tops",
    "bottoms",
    "one-piece outfits",
    "special clothings",
    "scarf",
    "belts",
    "hats",
    "shoe",
    "eye glasses",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
];

/// Class name used for whole-person masks in FPP.
pub const FPP_LABEL: &str = "person";

/// IoU thresholds shared by mAP_SS, mAP_IS, and AR@100: 0.50 to 0.95 step 0.05.
pub fn iou_thresholds() -> [f64; 10] {
    let mut t = [0.0; 10];
    for (i, slot) in t.iter_mut().enumerate() {
        *slot = (50 + 5 * i) as f64 / 100.0;
    }
    t
}

/// The four evaluation protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Protocol {
    Fpp,
    Bhp,
    Ccp,
    Cop,
}

impl Protocol {
    pub fn all() -> [Protocol; 4] {
        [Protocol::Fpp, Protocol::Bhp, Protocol::Ccp, Protocol::Cop]
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Fpp => "FPP",
            Protocol::Bhp => "BHP",
            Protocol::Ccp => "CCP",
            Protocol::Cop => "COP",
        }
    }

    /// Case-insensitive parse of a protocol name.
    pub fn parse(s: &str) -> Result<Protocol> {
        match s.to_ascii_lowercase().as_str() {
            "fpp" => Ok(Protocol::Fpp),
            "bhp" => Ok(Protocol::Bhp),
            "ccp" => Ok(Protocol::Ccp),
            "cop" => Ok(Protocol::Cop),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?}; expected one of FPP, BHP, CCP, COP"
            ))),
        }
    }

    /// Canonical class list for the protocol; `None` for FPP, whose single
    /// class is [`FPP_LABEL`].
    pub fn categories(self) -> Option<&'static [&'static str]> {
        match self {
            Protocol::Fpp => None,
            Protocol::Bhp => Some(&BHP_CATEGORIES),
            Protocol::Ccp => Some(&CCP_CATEGORIES),
            Protocol::Cop => Some(&COP_CATEGORIES),
        }
    }

    fn contains(self, canonical: &str) -> bool {
        match self.categories() {
            Some(cats) => cats.contains(&canonical),
            None => canonical == FPP_LABEL,
        }
    }
}

/// Maps free-form labels to the canonical protocol vocabulary.
///
/// Lookups are case-insensitive; a label without an entry passes through
/// lowercased, so the map is idempotent by construction: every value is also
/// a key mapping to itself, which loading enforces.
#[derive(Debug, Clone)]
pub struct UnificationMap {
    map: BTreeMap<String, String>,
}

impl UnificationMap {
    /// The built-in label map shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json_str(include_str!("../assets/unification.json"))
            .expect("built-in unification map must parse")
    }

    /// Parses a JSON object of `raw -> canonical` pairs. Keys and values are
    /// lowercased; every canonical value gains a self-entry, and a value that
    /// already maps somewhere else is rejected so `unify` stays idempotent.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: BTreeMap<String, String> = serde_json::from_str(s)
            .map_err(|e| Error::Config(format!("unification map: {e}")))?;
        let mut map = BTreeMap::new();
        for (k, v) in raw {
            map.insert(k.to_lowercase(), v.to_lowercase());
        }
        let values: Vec<String> = map.values().cloned().collect();
        for v in values {
            match map.get(&v) {
                Some(existing) if *existing != v => {
                    return Err(Error::Config(format!(
                        "unification map is not idempotent: {v:?} maps to {existing:?}"
                    )));
                }
                Some(_) => {}
                None => {
                    map.insert(v.clone(), v);
                }
            }
        }
        Ok(Self { map })
    }

    /// Canonical form of a label: mapped if known, lowercased verbatim if not.
    pub fn unify(&self, label: &str) -> String {
        let key = label.trim().to_lowercase();
        self.map.get(&key).cloned().unwrap_or(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One ground-truth region under a protocol: the canonical class it scores
/// as, the raw annotation label it came from, and the owning person.
#[derive(Debug, Clone)]
pub struct GtInstance {
    pub mask: Array2<bool>,
    pub canonical: String,
    pub raw: String,
    pub person: usize,
}

/// Protocol-specific ground truth for one image.
#[derive(Debug, Clone, Default)]
pub struct ProtocolGt {
    pub instances: Vec<GtInstance>,
}

impl ProtocolGt {
    /// Per-class pixel sets: the union of instance masks sharing a canonical
    /// class. Classes with no true pixel are omitted.
    pub fn semantic(&self) -> BTreeMap<String, Array2<bool>> {
        let mut out: BTreeMap<String, Array2<bool>> = BTreeMap::new();
        for inst in &self.instances {
            out.entry(inst.canonical.clone())
                .and_modify(|m| or_assign(m, &inst.mask))
                .or_insert_with(|| inst.mask.clone());
        }
        out.retain(|_, m| m.iter().any(|&b| b));
        out
    }
}

fn binarize(mask: &Array2<f64>) -> Array2<bool> {
    mask.mapv(|v| v >= 0.5)
}

fn or_assign(dst: &mut Array2<bool>, src: &Array2<bool>) {
    azip_or(dst, src);
}

fn azip_or(dst: &mut Array2<bool>, src: &Array2<bool>) {
    dst.zip_mut_with(src, |d, &s| *d = *d || s);
}

fn count(mask: &Array2<bool>) -> u64 {
    mask.iter().filter(|&&b| b).count() as u64
}

fn intersection_count(a: &Array2<bool>, b: &Array2<bool>) -> u64 {
    a.iter().zip(b.iter()).filter(|(&x, &y)| x && y).count() as u64
}

/// IoU of two binary masks; 0 when both are empty.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let inter = intersection_count(a, b);
    let union = count(a) + count(b) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Whether a canonical class contributes person pixels under FPP.
fn fpp_source(canonical: &str) -> bool {
    BHP_CATEGORIES.contains(&canonical) || COP_CATEGORIES.contains(&canonical)
}

/// Builds the ground truth an image presents under one protocol.
///
/// For BHP/CCP/COP each annotated instance whose unified label belongs to
/// the protocol's class list becomes one instance. For FPP the instances
/// are persons: per person id, the union of that person's body, clothing,
/// and accessory pixels (exactly the classes the other three protocols
/// score); persons with no covered pixels are skipped.
pub fn build_protocol_gt(
    sample: &LabeledSample,
    kind: Protocol,
    unify: &UnificationMap,
) -> ProtocolGt {
    let (h, w) = sample.plane();
    match kind {
        Protocol::Fpp => {
            let mut by_person: BTreeMap<usize, Array2<bool>> = BTreeMap::new();
            for inst in &sample.instances {
                let canonical = unify.unify(&inst.label);
                if !fpp_source(&canonical) {
                    continue;
                }
                let m = binarize(&inst.mask);
                by_person
                    .entry(inst.person)
                    .and_modify(|acc| or_assign(acc, &m))
                    .or_insert_with(|| {
                        let mut z = Array2::from_elem((h, w), false);
                        or_assign(&mut z, &m);
                        z
                    });
            }
            let instances = by_person
                .into_iter()
                .filter(|(_, m)| m.iter().any(|&b| b))
                .map(|(person, mask)| GtInstance {
                    mask,
                    canonical: FPP_LABEL.to_string(),
                    raw: FPP_LABEL.to_string(),
                    person,
                })
                .collect();
            ProtocolGt { instances }
        }
        _ => {
            let instances = sample
                .instances
                .iter()
                .filter_map(|inst| {
                    let canonical = unify.unify(&inst.label);
                    if kind.contains(&canonical) {
                        Some(GtInstance {
                            mask: binarize(&inst.mask),
                            canonical,
                            raw: inst.label.to_lowercase(),
                            person: inst.person,
                        })
                    } else {
                        None
                    }
                })
                .collect();
            ProtocolGt { instances }
        }
    }
}

/// One predicted region in raw label space: binarized mask, label, confidence.
#[derive(Debug, Clone)]
pub struct PredInstance {
    pub mask: Array2<bool>,
    pub label: String,
    pub score: f64,
}

/// All predictions for one image.
///
/// `semantic` holds the per-pixel class decision as disjoint per-label pixel
/// sets; `instances` keeps the raw (possibly overlapping) masks used for
/// instance-level metrics.
#[derive(Debug, Clone, Default)]
pub struct ImagePrediction {
    pub semantic: BTreeMap<String, Array2<bool>>,
    pub instances: Vec<PredInstance>,
}

/// 4-connected components of a binary mask, one mask per component, ordered
/// by first pixel in row-major scan order.
pub fn connected_components(mask: &Array2<bool>) -> Vec<Array2<bool>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask[[sy, sx]] || seen[[sy, sx]] {
                continue;
            }
            let mut comp = Array2::from_elem((h, w), false);
            let mut stack = vec![(sy, sx)];
            seen[[sy, sx]] = true;
            while let Some((y, x)) = stack.pop() {
                comp[[y, x]] = true;
                let mut push = |ny: usize, nx: usize, seen: &mut Array2<bool>| {
                    if mask[[ny, nx]] && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x, &mut seen);
                }
                if y + 1 < h {
                    push(y + 1, x, &mut seen);
                }
                if x > 0 {
                    push(y, x - 1, &mut seen);
                }
                if x + 1 < w {
                    push(y, x + 1, &mut seen);
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Projects raw predictions into one protocol's label space.
///
/// Returns the per-class semantic pixel sets and the instance list, both in
/// canonical labels, restricted to the protocol's classes and with `ignore`
/// classes dropped. For FPP the predicted persons are the 4-connected
/// components of the union of all covered instance masks; each component
/// scores as the highest-confidence instance touching it.
pub fn protocol_prediction(
    pred: &ImagePrediction,
    kind: Protocol,
    unify: &UnificationMap,
    ignore: &BTreeSet<String>,
) -> (BTreeMap<String, Array2<bool>>, Vec<PredInstance>) {
    match kind {
        Protocol::Fpp => {
            let covered: Vec<&PredInstance> = pred
                .instances
                .iter()
                .filter(|p| {
                    let c = unify.unify(&p.label);
                    fpp_source(&c) && !ignore.contains(&c)
                })
                .collect();
            let Some(first) = covered.first() else {
                return (BTreeMap::new(), Vec::new());
            };
            let mut union = Array2::from_elem(first.mask.dim(), false);
            for p in &covered {
                or_assign(&mut union, &p.mask);
            }
            let mut semantic = BTreeMap::new();
            if union.iter().any(|&b| b) {
                semantic.insert(FPP_LABEL.to_string(), union.clone());
            }
            let instances = connected_components(&union)
                .into_iter()
                .map(|comp| {
                    let score = covered
                        .iter()
                        .filter(|p| intersection_count(&p.mask, &comp) > 0)
                        .map(|p| p.score)
                        .fold(f64::NEG_INFINITY, f64::max);
                    PredInstance {
                        mask: comp,
                        label: FPP_LABEL.to_string(),
                        score: if score.is_finite() { score } else { 1.0 },
                    }
                })
                .collect();
            (semantic, instances)
        }
        _ => {
            let mut semantic: BTreeMap<String, Array2<bool>> = BTreeMap::new();
            for (raw, mask) in &pred.semantic {
                let c = unify.unify(raw);
                if !kind.contains(&c) || ignore.contains(&c) {
                    continue;
                }
                semantic
                    .entry(c)
                    .and_modify(|m| or_assign(m, mask))
                    .or_insert_with(|| mask.clone());
            }
            semantic.retain(|_, m| m.iter().any(|&b| b));
            let instances = pred
                .instances
                .iter()
                .filter_map(|p| {
                    let c = unify.unify(&p.label);
                    if kind.contains(&c) && !ignore.contains(&c) {
                        Some(PredInstance {
                            mask: p.mask.clone(),
                            label: c,
                            score: p.score,
                        })
                    } else {
                        None
                    }
                })
                .collect();
            (semantic, instances)
        }
    }
}

/// Split-level semantic scores, all in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticScores {
    pub miou: f64,
    pub macc: f64,
    pub per_class_iou: BTreeMap<String, f64>,
}

/// Accumulates per-class pixel counts and per-(image, class) IoUs across a
/// split; the finished scores use split-aggregated counts.
#[derive(Debug, Clone, Default)]
pub struct SemanticAccum {
    counts: BTreeMap<String, (u64, u64, u64)>,
    pair_ious: Vec<f64>,
}

impl SemanticAccum {
    pub fn add_image(
        &mut self,
        pred: &BTreeMap<String, Array2<bool>>,
        gt: &BTreeMap<String, Array2<bool>>,
    ) {
        for (class, gmask) in gt {
            let g = count(gmask);
            if g == 0 {
                continue;
            }
            let (inter, p) = match pred.get(class) {
                Some(pmask) => (intersection_count(pmask, gmask), count(pmask)),
                None => (0, 0),
            };
            let union = p + g - inter;
            let entry = self.counts.entry(class.clone()).or_insert((0, 0, 0));
            entry.0 += inter;
            entry.1 += union;
            entry.2 += g;
            self.pair_ious.push(inter as f64 / union as f64);
        }
    }

    /// Classes seen so far with ground-truth pixels.
    pub fn present_classes(&self) -> usize {
        self.counts.len()
    }

    /// Final scores, or `None` when no class was ever present.
    pub fn finish(&self) -> Option<(SemanticScores, f64)> {
        if self.counts.is_empty() {
            return None;
        }
        let mut per_class_iou = BTreeMap::new();
        let mut iou_sum = 0.0;
        let mut acc_sum = 0.0;
        for (class, &(inter, union, gt)) in &self.counts {
            let iou = inter as f64 / union as f64;
            per_class_iou.insert(class.clone(), 100.0 * iou);
            iou_sum += iou;
            acc_sum += inter as f64 / gt as f64;
        }
        let n = self.counts.len() as f64;
        let scores = SemanticScores {
            miou: 100.0 * iou_sum / n,
            macc: 100.0 * acc_sum / n,
            per_class_iou,
        };
        let map_ss = semantic_ap(&self.pair_ious).expect("pair list nonempty");
        Some((scores, map_ss))
    }
}

/// Semantic scores for a single image (the split-level path with one image).
pub fn semantic_metrics(
    pred: &BTreeMap<String, Array2<bool>>,
    gt: &BTreeMap<String, Array2<bool>>,
) -> Option<SemanticScores> {
    let mut acc = SemanticAccum::default();
    acc.add_image(pred, gt);
    acc.finish().map(|(scores, _)| scores)
}

/// Semantic average precision in percent over IoU thresholds 0.50:0.05:0.95:
/// the mean over thresholds of the fraction of (image, class) IoUs meeting
/// the threshold. `None` when no pair exists.
pub fn semantic_ap(pair_ious: &[f64]) -> Option<f64> {
    if pair_ious.is_empty() {
        return None;
    }
    let mut hits = 0.0;
    for thr in iou_thresholds() {
        for &iou in pair_ious {
            if iou >= thr {
                hits += 1.0;
            }
        }
    }
    Some(100.0 * hits / (10.0 * pair_ious.len() as f64))
}

/// Instance-level scores, all in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceScores {
    pub map_is: f64,
    pub ar_100: f64,
    pub per_class_ap: BTreeMap<String, f64>,
}

/// Keeps the 100 highest-scoring predictions (descending score, ties by
/// original order).
fn cap_predictions(preds: &[PredInstance]) -> Vec<&PredInstance> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(100);
    order.into_iter().map(|i| &preds[i]).collect()
}

/// Greedy one-to-one matching for one image and one class at one threshold.
/// `ious[p][g]` are pairwise IoUs; predictions arrive in score order. Each
/// prediction takes the unmatched ground truth with the highest IoU at or
/// above the threshold (ties to the lowest index). Returns per-prediction
/// hit flags and the number of matched ground truths.
fn greedy_match(ious: &[Vec<f64>], n_gt: usize, thr: f64) -> (Vec<bool>, usize) {
    let mut taken = vec![false; n_gt];
    let mut hits = Vec::with_capacity(ious.len());
    let mut matched = 0;
    for row in ious {
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in row.iter().enumerate() {
            if taken[g] || iou < thr {
                continue;
            }
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                matched += 1;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    (hits, matched)
}

/// 101-point interpolated average precision from score-ordered hit flags.
fn ap_101(hits: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(hits.len());
    let mut recalls = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }
    // Precision envelope: best precision at this recall or any higher one.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i + 1] > precisions[i] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let want = r as f64 / 100.0;
        if let Some(i) = recalls.iter().position(|&rec| rec >= want) {
            sum += precisions[i];
        }
    }
    sum / 101.0
}

/// Instance detection metrics over a split.
///
/// Each image contributes its predictions and its ground-truth (label, mask)
/// list. Returns `None` when the split has no ground-truth instance at all.
pub fn instance_metrics(
    images: &[(Vec<PredInstance>, Vec<(String, Array2<bool>)>)],
) -> Option<InstanceScores> {
    let total_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return None;
    }
    let thresholds = iou_thresholds();

    let capped: Vec<Vec<&PredInstance>> =
        images.iter().map(|(p, _)| cap_predictions(p)).collect();

    // Category list: every label with ground truth anywhere in the split.
    let mut categories: BTreeSet<String> = BTreeSet::new();
    for (_, gts) in images {
        for (label, _) in gts {
            categories.insert(label.clone());
        }
    }

    // Per (image, category): score-ordered prediction indices, gt indices,
    // and the pairwise IoU matrix, computed once and reused per threshold.
    struct Cell {
        ious: Vec<Vec<f64>>,
        n_gt: usize,
        pred_scores: Vec<f64>,
    }
    let mut cells: BTreeMap<(usize, String), Cell> = BTreeMap::new();
    for (img, (_, gts)) in images.iter().enumerate() {
        for cat in &categories {
            let gt_masks: Vec<&Array2<bool>> = gts
                .iter()
                .filter(|(l, _)| l == cat)
                .map(|(_, m)| m)
                .collect();
            let preds: Vec<&&PredInstance> = capped[img]
                .iter()
                .filter(|p| &p.label == cat)
                .collect();
            if gt_masks.is_empty() && preds.is_empty() {
                continue;
            }
            let ious = preds
                .iter()
                .map(|p| gt_masks.iter().map(|g| mask_iou(&p.mask, g)).collect())
                .collect();
            cells.insert(
                (img, cat.clone()),
                Cell {
                    ious,
                    n_gt: gt_masks.len(),
                    pred_scores: preds.iter().map(|p| p.score).collect(),
                },
            );
        }
    }

    // mAP_IS: per category, per threshold, match every image then rank the
    // pooled predictions by score for the precision-recall curve.
    let mut per_class_ap = BTreeMap::new();
    let mut ap_total = 0.0;
    for cat in &categories {
        let cat_gt: usize = cells
            .iter()
            .filter(|((_, c), _)| c == cat)
            .map(|(_, cell)| cell.n_gt)
            .sum();
        if cat_gt == 0 {
            continue;
        }
        let mut cat_ap_sum = 0.0;
        for thr in thresholds {
            // (score, image index, rank in image, hit)
            let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
            for (img, _) in images.iter().enumerate() {
                let Some(cell) = cells.get(&(img, cat.clone())) else {
                    continue;
                };
                let (hits, _) = greedy_match(&cell.ious, cell.n_gt, thr);
                for (k, &hit) in hits.iter().enumerate() {
                    pooled.push((cell.pred_scores[k], img, k, hit));
                }
            }
            pooled.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let flags: Vec<bool> = pooled.iter().map(|&(_, _, _, h)| h).collect();
            cat_ap_sum += ap_101(&flags, cat_gt);
        }
        per_class_ap.insert(cat.clone(), 100.0 * cat_ap_sum / 10.0);
        ap_total += cat_ap_sum;
    }
    let n_cats = per_class_ap.len() as f64;
    let map_is = if per_class_ap.is_empty() {
        0.0
    } else {
        100.0 * ap_total / (10.0 * n_cats)
    };

    // AR@100: per image with ground truth, mean recall over thresholds.
    let mut recall_sum = 0.0;
    let mut gt_images = 0usize;
    for (img, (_, gts)) in images.iter().enumerate() {
        if gts.is_empty() {
            continue;
        }
        gt_images += 1;
        for thr in thresholds {
            let mut matched = 0usize;
            for cat in &categories {
                if let Some(cell) = cells.get(&(img, cat.clone())) {
                    let (_, m) = greedy_match(&cell.ious, cell.n_gt, thr);
                    matched += m;
                }
            }
            recall_sum += matched as f64 / gts.len() as f64;
        }
    }
    let ar_100 = 100.0 * recall_sum / (10.0 * gt_images as f64);

    Some(InstanceScores {
        map_is,
        ar_100,
        per_class_ap,
    })
}

/// Splits test labels into unseen and seen sets against the training labels.
///
/// A test label counts as seen when it matches any training label's ensemble
/// expansion after lowercasing and trailing-plural stripping on both sides.
pub fn unseen_split(
    train_labels: &BTreeSet<String>,
    test_labels: &BTreeSet<String>,
    ensembles: &EnsembleTable,
) -> (BTreeSet<String>, BTreeSet<String>) {
    fn forms(s: &str) -> Vec<String> {
        let l = s.trim().to_lowercase();
        let mut out = vec![l.clone()];
        if l.len() > 1 {
            if let Some(stripped) = l.strip_suffix('s') {
                out.push(stripped.to_string());
            }
        }
        out
    }
    let mut seen_forms: BTreeSet<String> = BTreeSet::new();
    for t in train_labels {
        for term in ensembles.expand(t) {
            for f in forms(&term) {
                seen_forms.insert(f);
            }
        }
    }
    let mut unseen = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for l in test_labels {
        let norm = l.trim().to_lowercase();
        if forms(&norm).iter().any(|f| seen_forms.contains(f)) {
            seen.insert(norm);
        } else {
            unseen.insert(norm);
        }
    }
    (unseen, seen)
}

/// Photometric robustness transform: raises each pixel to `1/gamma`.
///
/// `gamma` must lie in `(0, 1]`; `gamma = 1` is the identity and smaller
/// values darken mid-tones (e.g. `gamma = 0.5` maps 0.25 to 0.0625).
pub fn gamma_correct(image: &Array3<f64>, gamma: f64) -> Result<Array3<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    if image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Shape(
            "gamma correction expects pixel values in [0, 1]".into(),
        ));
    }
    if gamma == 1.0 {
        return Ok(image.clone());
    }
    let exponent = 1.0 / gamma;
    Ok(image.mapv(|v| v.powf(exponent)))
}

/// Scores for one protocol over a split. `empty` marks a split where the
/// protocol had no ground truth at all; the metric fields are then `None`
/// rather than zero.
#[derive(Debug, Clone, Serialize)]
pub struct ProtocolReport {
    pub images: usize,
    pub empty: bool,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    pub map_ss: Option<f64>,
    pub map_is: Option<f64>,
    pub ar_100: Option<f64>,
    pub per_class_iou: BTreeMap<String, f64>,
    pub per_class_ap: BTreeMap<String, f64>,
}

/// COP scores restricted to one side of the unseen/seen label split.
#[derive(Debug, Clone, Serialize)]
pub struct SplitReport {
    pub labels: Vec<String>,
    pub report: ProtocolReport,
}

/// The full evaluation result: one report per protocol, optional unseen/seen
/// sections, and the metric conventions spelled out.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub protocols: BTreeMap<String, ProtocolReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen: Option<SplitReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen: Option<SplitReport>,
    pub missing_predictions: usize,
    pub conventions: BTreeMap<String, String>,
}

impl MetricReport {
    /// Deterministic pretty-printed JSON (sorted keys, trailing newline).
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Fixed-width text table followed by the conventions block.
    pub fn to_text(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            match v {
                Some(x) => format!("{x:>8.2}"),
                None => format!("{:>8}", "empty"),
            }
        }
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12}{:>8}{:>8}{:>8}{:>8}{:>8}\n",
            "protocol", "mIoU", "mAcc", "mAP_SS", "mAP_IS", "AR@100"
        ));
        let mut rows: Vec<(String, &ProtocolReport)> = self
            .protocols
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .collect();
        if let Some(u) = &self.unseen {
            rows.push(("COP/unseen".into(), &u.report));
        }
        if let Some(s) = &self.seen {
            rows.push(("COP/seen".into(), &s.report));
        }
        for (name, r) in rows {
            out.push_str(&format!(
                "{:<12}{}{}{}{}{}\n",
                name,
                cell(r.miou),
                cell(r.macc),
                cell(r.map_ss),
                cell(r.map_is),
                cell(r.ar_100),
            ));
        }
        if self.missing_predictions > 0 {
            out.push_str(&format!(
                "missing predictions: {}\n",
                self.missing_predictions
            ));
        }
        out.push_str("conventions:\n");
        for (k, v) in &self.conventions {
            out.push_str(&format!("  {k}: {v}\n"));
        }
        out
    }
}

fn conventions() -> BTreeMap<String, String> {
    let mut c = BTreeMap::new();
    c.insert(
        "semantic".into(),
        "per-class pixel counts aggregate over the split; mIoU and mAcc \
         average over classes present in the ground truth; splits with no \
         present class are marked empty rather than scored zero"
            .into(),
    );
    c.insert(
        "map_ss".into(),
        "mean over IoU thresholds 0.50:0.05:0.95 of the fraction of \
         (image, class) pairs whose semantic IoU meets the threshold"
            .into(),
    );
    c.insert(
        "map_is".into(),
        "score-ordered greedy one-to-one matching per image; 101-point \
         interpolated precision-recall area, averaged over thresholds \
         0.50:0.05:0.95 and over categories with ground truth"
            .into(),
    );
    c.insert(
        "ar_100".into(),
        "recall with at most the 100 highest-scoring predictions per image, \
         averaged over thresholds 0.50:0.05:0.95 and over images with ground \
         truth"
            .into(),
    );
    c.insert(
        "ignore".into(),
        "ignored classes are removed from predictions and ground truth before \
         any intersection, union, or class average"
            .into(),
    );
    c.insert(
        "fpp".into(),
        "ground-truth persons follow annotation person ids; predicted persons \
         are 4-connected components of the union of predicted masks"
            .into(),
    );
    c.insert(
        "gamma".into(),
        "robustness sweeps raise pixels to 1/gamma with gamma in (0, 1]".into(),
    );
    c.insert(
        "unseen".into(),
        "a test label is seen when any training label's ensemble expansion \
         contains it after lowercasing and plural stripping"
            .into(),
    );
    c
}

/// Evaluation request: which protocols to score, the training labels for the
/// unseen/seen split (skipped when `None`), and canonical classes to ignore.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub protocols: Vec<Protocol>,
    pub train_labels: Option<BTreeSet<String>>,
    pub ignore: BTreeSet<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocols: Protocol::all().to_vec(),
            train_labels: None,
            ignore: BTreeSet::new(),
        }
    }
}

/// Scores one protocol over aligned (ground truth, prediction) pairs. When
/// `raw_filter` is given, only ground-truth instances whose raw label is in
/// the set are kept (used for the unseen/seen sections).
fn run_protocol(
    samples: &[LabeledSample],
    preds: &[ImagePrediction],
    kind: Protocol,
    unify: &UnificationMap,
    ignore: &BTreeSet<String>,
    raw_filter: Option<&BTreeSet<String>>,
) -> ProtocolReport {
    let mut sem = SemanticAccum::default();
    let mut inst_images = Vec::with_capacity(samples.len());
    for (sample, pred) in samples.iter().zip(preds) {
        let mut gt = build_protocol_gt(sample, kind, unify);
        gt.instances.retain(|i| !ignore.contains(&i.canonical));
        if let Some(filter) = raw_filter {
            gt.instances.retain(|i| filter.contains(&i.raw));
        }
        let (pred_sem, pred_inst) = protocol_prediction(pred, kind, unify, ignore);
        sem.add_image(&pred_sem, &gt.semantic());
        let gts: Vec<(String, Array2<bool>)> = gt
            .instances
            .iter()
            .map(|i| (i.canonical.clone(), i.mask.clone()))
            .collect();
        inst_images.push((pred_inst, gts));
    }
    let semantic = sem.finish();
    let instance = instance_metrics(&inst_images);
    let empty = semantic.is_none();
    let (miou, macc, map_ss, per_class_iou) = match &semantic {
        Some((s, ap)) => (
            Some(s.miou),
            Some(s.macc),
            Some(*ap),
            s.per_class_iou.clone(),
        ),
        None => (None, None, None, BTreeMap::new()),
    };
    let (map_is, ar_100, per_class_ap) = match &instance {
        Some(i) => (Some(i.map_is), Some(i.ar_100), i.per_class_ap.clone()),
        None => (None, None, BTreeMap::new()),
    };
    ProtocolReport {
        images: samples.len(),
        empty,
        miou,
        macc,
        map_ss,
        map_is,
        ar_100,
        per_class_iou,
        per_class_ap,
    }
}

/// Runs the requested protocols over a split and assembles the report.
///
/// `preds[i]` holds the predictions for `samples[i]`; a `None` entry counts
/// as an all-miss prediction and is tallied in `missing_predictions`.
pub fn evaluate_dataset(
    samples: &[LabeledSample],
    preds: &[Option<ImagePrediction>],
    unify: &UnificationMap,
    ensembles: &EnsembleTable,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if samples.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} predictions",
            samples.len(),
            preds.len()
        )));
    }
    let mut missing = 0usize;
    let filled: Vec<ImagePrediction> = preds
        .iter()
        .map(|p| match p {
            Some(p) => p.clone(),
            None => {
                missing += 1;
                ImagePrediction::default()
            }
        })
        .collect();

    let mut protocols = BTreeMap::new();
    for &kind in &opts.protocols {
        protocols.insert(
            kind.name().to_string(),
            run_protocol(samples, &filled, kind, unify, &opts.ignore, None),
        );
    }

    let (unseen, seen) = match &opts.train_labels {
        Some(train) => {
            let mut test_labels = BTreeSet::new();
            for s in samples {
                for i in &s.instances {
                    test_labels.insert(i.label.to_lowercase());
                }
            }
            let (unseen_labels, seen_labels) = unseen_split(train, &test_labels, ensembles);
            let section = |labels: &BTreeSet<String>| SplitReport {
                labels: labels.iter().cloned().collect(),
                report: run_protocol(
                    samples,
                    &filled,
                    Protocol::Cop,
                    unify,
                    &opts.ignore,
                    Some(labels),
                ),
            };
            (Some(section(&unseen_labels)), Some(section(&seen_labels)))
        }
        None => (None, None),
    };

    Ok(MetricReport {
        protocols,
        unseen,
        seen,
        missing_predictions: missing,
        conventions: conventions(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Instance;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    fn rect_f(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Array2<f64> {
        rect(h, w, y0, y1, x0, x1).mapv(|b| if b { 1.0 } else { 0.0 })
    }

    #[test]
    fn unification_is_idempotent_and_case_insensitive() {
        let u = UnificationMap::builtin();
        assert!(!u.is_empty());
        // Every canonical target maps to itself.
        for key in ["face", "hand", "leg", "tops", "bottoms", "shoe", "person"] {
            assert_eq!(u.unify(key), key);
        }
        assert_eq!(u.unify("Pants"), "bottoms");
        assert_eq!(u.unify("upper arms"), "hand");
        assert_eq!(u.unify("Hand_L"), "hand");
        assert_eq!(u.unify("saree"), "saree"); // unknown passes through
        // Double application changes nothing, for every mapped label.
        for k in ["PANTS", "boots", "sunglasses", "briefcase", "wedding dress"] {
            let once = u.unify(k);
            assert_eq!(u.unify(&once), once);
        }
    }

    #[test]
    fn rejects_non_idempotent_map() {
        let err = UnificationMap::from_json_str(r#"{"a": "b", "b": "c"}"#);
        assert!(err.is_err());
    }

    #[test]
    fn category_sets_are_consistent() {
        for c in CCP_CATEGORIES {
            assert!(COP_CATEGORIES.contains(&c), "{c} missing from COP");
        }
        for c in BHP_CATEGORIES {
            assert!(!COP_CATEGORIES.contains(&c), "{c} must not be in COP");
        }
        assert_eq!(Protocol::parse("fpp").unwrap(), Protocol::Fpp);
        assert_eq!(Protocol::parse("COP").unwrap(), Protocol::Cop);
        assert!(Protocol::parse("xyz").is_err());
    }

    fn two_person_sample() -> LabeledSample {
        // Person 0: face + tops + handbag; person 1: hand_l + pants.
        let mk = |y0, y1, x0, x1| rect_f(8, 8, y0, y1, x0, x1);
        LabeledSample {
            image: Array3::zeros((3, 8, 8)),
            caption: "two people".into(),
            instances: vec![
                Instance { mask: mk(0, 2, 0, 2), label: "Face".into(), person: 0 },
                Instance { mask: mk(2, 4, 0, 2), label: "tops".into(), person: 0 },
                Instance { mask: mk(4, 6, 0, 2), label: "handbag".into(), person: 0 },
                Instance { mask: mk(0, 2, 4, 6), label: "Hand_L".into(), person: 1 },
                Instance { mask: mk(2, 4, 4, 6), label: "pants".into(), person: 1 },
            ],
        }
    }

    #[test]
    fn fpp_gt_is_union_of_other_protocols() {
        let u = UnificationMap::builtin();
        let s = two_person_sample();
        let fpp = build_protocol_gt(&s, Protocol::Fpp, &u);
        assert_eq!(fpp.instances.len(), 2);

        // Independent union: OR together every BHP/CCP/COP instance per person.
        for person in 0..2 {
            let mut expected = Array2::from_elem((8, 8), false);
            for kind in [Protocol::Bhp, Protocol::Ccp, Protocol::Cop] {
                for inst in build_protocol_gt(&s, kind, &u).instances {
                    if inst.person == person {
                        or_assign(&mut expected, &inst.mask);
                    }
                }
            }
            let got = &fpp
                .instances
                .iter()
                .find(|i| i.person == person)
                .unwrap()
                .mask;
            assert_eq!(got, &expected, "person {person}");
        }
    }

    #[test]
    fn bhp_collapses_sides_and_filters() {
        let u = UnificationMap::builtin();
        let s = two_person_sample();
        let bhp = build_protocol_gt(&s, Protocol::Bhp, &u);
        let classes: Vec<&str> = bhp.instances.iter().map(|i| i.canonical.as_str()).collect();
        assert_eq!(classes, ["face", "hand"]);
        let ccp = build_protocol_gt(&s, Protocol::Ccp, &u);
        assert_eq!(ccp.instances.len(), 1);
        assert_eq!(ccp.instances[0].canonical, "handbag");
        let cop = build_protocol_gt(&s, Protocol::Cop, &u);
        let classes: Vec<&str> = cop.instances.iter().map(|i| i.canonical.as_str()).collect();
        assert_eq!(classes, ["tops", "handbag", "bottoms"]);
    }

    #[test]
    fn perfect_prediction_scores_hundred() {
        let gt: BTreeMap<String, Array2<bool>> = [
            ("tops".to_string(), rect(6, 6, 0, 3, 0, 3)),
            ("bottoms".to_string(), rect(6, 6, 3, 6, 0, 3)),
        ]
        .into();
        let s = semantic_metrics(&gt.clone(), &gt).unwrap();
        assert_eq!(s.miou, 100.0);
        assert_eq!(s.macc, 100.0);
    }

    #[test]
    fn shifted_square_iou_is_two_sixths() {
        let gt: BTreeMap<String, Array2<bool>> =
            [("tops".to_string(), rect(5, 5, 1, 3, 1, 3))].into();
        let pred: BTreeMap<String, Array2<bool>> =
            [("tops".to_string(), rect(5, 5, 1, 3, 2, 4))].into();
        let s = semantic_metrics(&pred, &gt).unwrap();
        assert!((s.miou - 100.0 * 2.0 / 6.0).abs() < 1e-9);
        assert_eq!(
            mask_iou(&pred["tops"], &gt["tops"]),
            mask_iou(&gt["tops"], &pred["tops"])
        );
    }

    #[test]
    fn empty_ground_truth_is_marked_not_zero() {
        let pred: BTreeMap<String, Array2<bool>> =
            [("tops".to_string(), rect(4, 4, 0, 2, 0, 2))].into();
        assert!(semantic_metrics(&pred, &BTreeMap::new()).is_none());
        assert!(semantic_ap(&[]).is_none());
    }

    #[test]
    fn semantic_ap_exact_values() {
        // One (image, class) pair with IoU exactly 0.60: thresholds 0.50,
        // 0.55, 0.60 pass, so the mean over ten thresholds is 30 percent.
        let iou = 3.0 / 5.0;
        assert_eq!(semantic_ap(&[iou]).unwrap(), 30.0);
        assert_eq!(semantic_ap(&[1.0]).unwrap(), 100.0);
        assert_eq!(semantic_ap(&[0.0]).unwrap(), 0.0);
        assert_eq!(semantic_ap(&[0.49]).unwrap(), 0.0);
    }

    /// Brute-force oracle: recompute the split metrics with bare nested loops
    /// over pixels, no shared helpers.
    fn oracle_semantic(
        images: &[(BTreeMap<String, Array2<bool>>, BTreeMap<String, Array2<bool>>)],
    ) -> Option<(f64, f64, f64)> {
        let mut classes = BTreeSet::new();
        for (_, gt) in images {
            for (c, m) in gt {
                if m.iter().any(|&b| b) {
                    classes.insert(c.clone());
                }
            }
        }
        if classes.is_empty() {
            return None;
        }
        let mut iou_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut pair_ious = Vec::new();
        for c in &classes {
            let mut inter = 0u64;
            let mut union = 0u64;
            let mut gt_count = 0u64;
            for (pred, gt) in images {
                let Some(g) = gt.get(c) else { continue };
                if !g.iter().any(|&b| b) {
                    continue;
                }
                let (h, w) = g.dim();
                let mut i_img = 0u64;
                let mut u_img = 0u64;
                let mut g_img = 0u64;
                for y in 0..h {
                    for x in 0..w {
                        let gv = g[[y, x]];
                        let pv = pred.get(c).map_or(false, |p| p[[y, x]]);
                        if gv && pv {
                            i_img += 1;
                        }
                        if gv || pv {
                            u_img += 1;
                        }
                        if gv {
                            g_img += 1;
                        }
                    }
                }
                inter += i_img;
                union += u_img;
                gt_count += g_img;
                pair_ious.push(i_img as f64 / u_img as f64);
            }
            iou_sum += inter as f64 / union as f64;
            acc_sum += inter as f64 / gt_count as f64;
        }
        let n = classes.len() as f64;
        let mut hits = 0.0;
        for i in 0..10 {
            let thr = (50 + 5 * i) as f64 / 100.0;
            for &iou in &pair_ious {
                if iou >= thr {
                    hits += 1.0;
                }
            }
        }
        Some((
            100.0 * iou_sum / n,
            100.0 * acc_sum / n,
            100.0 * hits / (10.0 * pair_ious.len() as f64),
        ))
    }

    #[test]
    fn semantic_metrics_match_pixel_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1701);
        let classes = ["tops", "bottoms", "face"];
        for _ in 0..50 {
            let n_images = rng.gen_range(1..4);
            let mut images = Vec::new();
            let mut accum = SemanticAccum::default();
            for _ in 0..n_images {
                let mut pred = BTreeMap::new();
                let mut gt = BTreeMap::new();
                for c in classes {
                    if rng.gen_bool(0.8) {
                        gt.insert(
                            c.to_string(),
                            Array2::from_shape_fn((12, 12), |_| rng.gen_bool(0.4)),
                        );
                    }
                    if rng.gen_bool(0.8) {
                        pred.insert(
                            c.to_string(),
                            Array2::from_shape_fn((12, 12), |_| rng.gen_bool(0.4)),
                        );
                    }
                }
                accum.add_image(&pred, &gt);
                images.push((pred, gt));
            }
            match (accum.finish(), oracle_semantic(&images)) {
                (Some((scores, map_ss)), Some((miou, macc, ap))) => {
                    assert!((scores.miou - miou).abs() < 1e-9);
                    assert!((scores.macc - macc).abs() < 1e-9);
                    assert!((map_ss - ap).abs() < 1e-9);
                }
                (None, None) => {}
                (a, b) => panic!("presence disagreement: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn single_prediction_at_point_seven_iou() {
        // GT 10 pixels, prediction overlapping 7 with 10 of its own: choose
        // masks so IoU is exactly 7/13... instead construct IoU 0.7 directly:
        // gt = 10 px row, pred = same 7 px plus nothing else => inter 7,
        // union 10, IoU 0.7.
        let gt_mask = rect(4, 10, 0, 1, 0, 10);
        let pred_mask = rect(4, 10, 0, 1, 0, 7);
        assert!((mask_iou(&pred_mask, &gt_mask) - 0.7).abs() < 1e-15);
        let images = vec![(
            vec![PredInstance {
                mask: pred_mask,
                label: "tops".into(),
                score: 0.9,
            }],
            vec![("tops".to_string(), gt_mask)],
        )];
        let s = instance_metrics(&images).unwrap();
        assert_eq!(s.map_is, 50.0);
        assert_eq!(s.ar_100, 50.0);
    }

    #[test]
    fn instance_edge_cases() {
        // No predictions at all: zero scores, not a crash.
        let images = vec![(
            Vec::<PredInstance>::new(),
            vec![("tops".to_string(), rect(4, 4, 0, 2, 0, 2))],
        )];
        let s = instance_metrics(&images).unwrap();
        assert_eq!(s.map_is, 0.0);
        assert_eq!(s.ar_100, 0.0);
        // Perfect single prediction: everything at 100.
        let m = rect(4, 4, 0, 2, 0, 2);
        let images = vec![(
            vec![PredInstance {
                mask: m.clone(),
                label: "tops".into(),
                score: 1.0,
            }],
            vec![("tops".to_string(), m)],
        )];
        let s = instance_metrics(&images).unwrap();
        assert_eq!(s.map_is, 100.0);
        assert_eq!(s.ar_100, 100.0);
        // No ground truth anywhere: marked empty.
        let images = vec![(Vec::<PredInstance>::new(), Vec::new())];
        assert!(instance_metrics(&images).is_none());
    }

    /// Independent oracle for the detection metrics: fresh matching per
    /// threshold with explicit loops and direct 101-point max scans.
    fn oracle_instance(
        images: &[(Vec<PredInstance>, Vec<(String, Array2<bool>)>)],
    ) -> Option<(f64, f64)> {
        let total_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
        if total_gt == 0 {
            return None;
        }
        fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
            let (h, w) = a.dim();
            let mut i = 0.0;
            let mut u = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if a[[y, x]] && b[[y, x]] {
                        i += 1.0;
                    }
                    if a[[y, x]] || b[[y, x]] {
                        u += 1.0;
                    }
                }
            }
            if u == 0.0 {
                0.0
            } else {
                i / u
            }
        }
        // Score-sorted indices per image (cap 100).
        let order: Vec<Vec<usize>> = images
            .iter()
            .map(|(preds, _)| {
                let mut idx: Vec<usize> = (0..preds.len()).collect();
                idx.sort_by(|&a, &b| {
                    preds[b]
                        .score
                        .partial_cmp(&preds[a].score)
                        .unwrap()
                        .then(a.cmp(&b))
                });
                idx.truncate(100);
                idx
            })
            .collect();
        let mut cats = BTreeSet::new();
        for (_, gts) in images {
            for (l, _) in gts {
                cats.insert(l.clone());
            }
        }
        let mut ap_sum_all = 0.0;
        for cat in &cats {
            for ti in 0..10 {
                let thr = (50 + 5 * ti) as f64 / 100.0;
                // Flatten: (score, img, rank, hit)
                let mut rows: Vec<(f64, usize, usize, bool)> = Vec::new();
                let mut cat_gt = 0usize;
                for (img, (preds, gts)) in images.iter().enumerate() {
                    let gt_idx: Vec<usize> = (0..gts.len())
                        .filter(|&g| &gts[g].0 == cat)
                        .collect();
                    cat_gt += gt_idx.len();
                    let mut used = vec![false; gt_idx.len()];
                    for (rank, &p) in order[img]
                        .iter()
                        .filter(|&&p| preds[p].label == *cat)
                        .enumerate()
                    {
                        let mut best = None;
                        let mut best_iou = 0.0;
                        for (slot, &g) in gt_idx.iter().enumerate() {
                            if used[slot] {
                                continue;
                            }
                            let v = iou(&preds[p].mask, &gts[g].1);
                            if v >= thr && v > best_iou {
                                best = Some(slot);
                                best_iou = v;
                            }
                        }
                        let hit = match best {
                            Some(slot) => {
                                used[slot] = true;
                                true
                            }
                            None => false,
                        };
                        rows.push((preds[p].score, img, rank, hit));
                    }
                }
                if cat_gt == 0 {
                    continue;
                }
                rows.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0)
                        .unwrap()
                        .then(a.1.cmp(&b.1))
                        .then(a.2.cmp(&b.2))
                });
                // Direct 101-point interpolation: for each recall level take
                // the max precision among points with recall at or above it.
                let mut ap = 0.0;
                for r in 0..=100 {
                    let want = r as f64 / 100.0;
                    let mut best_p = 0.0;
                    let mut tp = 0.0;
                    for (k, row) in rows.iter().enumerate() {
                        if row.3 {
                            tp += 1.0;
                        }
                        let rec = tp / cat_gt as f64;
                        let prec = tp / (k + 1) as f64;
                        if rec >= want && prec > best_p {
                            best_p = prec;
                        }
                    }
                    ap += best_p;
                }
                ap_sum_all += ap / 101.0;
            }
        }
        let n_cats = cats.len() as f64;
        let map_is = 100.0 * ap_sum_all / (10.0 * n_cats);
        // AR@100.
        let mut recall_sum = 0.0;
        let mut n_img = 0usize;
        for (img, (preds, gts)) in images.iter().enumerate() {
            if gts.is_empty() {
                continue;
            }
            n_img += 1;
            for ti in 0..10 {
                let thr = (50 + 5 * ti) as f64 / 100.0;
                let mut used = vec![false; gts.len()];
                let mut matched = 0usize;
                for &p in &order[img] {
                    let mut best = None;
                    let mut best_iou = 0.0;
                    for (g, (l, gm)) in gts.iter().enumerate() {
                        if used[g] || l != &preds[p].label {
                            continue;
                        }
                        let v = iou(&preds[p].mask, gm);
                        if v >= thr && v > best_iou {
                            best = Some(g);
                            best_iou = v;
                        }
                    }
                    if let Some(g) = best {
                        used[g] = true;
                        matched += 1;
                    }
                }
                recall_sum += matched as f64 / gts.len() as f64;
            }
        }
        Some((map_is, 100.0 * recall_sum / (10.0 * n_img as f64)))
    }

    #[test]
    fn instance_metrics_match_matching_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let labels = ["tops", "bottoms"];
        for _ in 0..50 {
            let n_images = rng.gen_range(1..3);
            let mut images = Vec::new();
            for _ in 0..n_images {
                let n_gt = rng.gen_range(0..4);
                let gts: Vec<(String, Array2<bool>)> = (0..n_gt)
                    .map(|_| {
                        let y = rng.gen_range(0..6);
                        let x = rng.gen_range(0..6);
                        (
                            labels[rng.gen_range(0..2)].to_string(),
                            rect(10, 10, y, y + 4, x, x + 4),
                        )
                    })
                    .collect();
                let n_pred = rng.gen_range(0..5);
                let preds: Vec<PredInstance> = (0..n_pred)
                    .map(|_| {
                        let y = rng.gen_range(0..6);
                        let x = rng.gen_range(0..6);
                        PredInstance {
                            mask: rect(10, 10, y, y + 4, x, x + 4),
                            label: labels[rng.gen_range(0..2)].to_string(),
                            score: rng.gen::<f64>(),
                        }
                    })
                    .collect();
                images.push((preds, gts));
            }
            match (instance_metrics(&images), oracle_instance(&images)) {
                (Some(s), Some((map_is, ar))) => {
                    assert!(
                        (s.map_is - map_is).abs() < 1e-9,
                        "map {} vs {map_is}",
                        s.map_is
                    );
                    assert!((s.ar_100 - ar).abs() < 1e-9, "ar {} vs {ar}", s.ar_100);
                }
                (None, None) => {}
                (a, b) => panic!("presence disagreement: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn components_split_separate_blobs() {
        let mut m = Array2::from_elem((6, 6), false);
        for (y, x) in [(0, 0), (0, 1), (1, 0)] {
            m[[y, x]] = true;
        }
        for (y, x) in [(4, 4), (4, 5), (5, 5)] {
            m[[y, x]] = true;
        }
        // Diagonal touch does not connect under 4-connectivity.
        m[[2, 2]] = true;
        m[[3, 3]] = true;
        let comps = connected_components(&m);
        assert_eq!(comps.len(), 4);
        let mut reunion = Array2::from_elem((6, 6), false);
        for c in &comps {
            or_assign(&mut reunion, c);
        }
        assert_eq!(reunion, m);
    }

    #[test]
    fn unseen_split_spec_examples() {
        let ens = EnsembleTable::builtin();
        let train: BTreeSet<String> = ["tops".to_string(), "bottoms".to_string()].into();
        let test: BTreeSet<String> =
            ["jeans".to_string(), "saree".to_string(), "Tops".to_string()].into();
        let (unseen, seen) = unseen_split(&train, &test, &ens);
        assert!(unseen.contains("saree"));
        assert!(seen.contains("jeans"), "jeans is in the bottoms ensemble");
        assert!(seen.contains("tops"));
        assert_eq!(unseen.len(), 1);
    }

    #[test]
    fn gamma_correct_values_and_errors() {
        let img = Array3::from_elem((3, 2, 2), 0.25);
        let out = gamma_correct(&img, 0.5).unwrap();
        assert!((out[[0, 0, 0]] - 0.0625).abs() < 1e-12);
        let id = gamma_correct(&img, 1.0).unwrap();
        assert_eq!(id, img);
        assert!(gamma_correct(&img, 0.0).is_err());
        assert!(gamma_correct(&img, -0.5).is_err());
        assert!(gamma_correct(&img, 1.5).is_err());
        let bad = Array3::from_elem((3, 2, 2), 1.25);
        assert!(gamma_correct(&bad, 0.5).is_err());
    }

    #[test]
    fn report_is_deterministic_and_marks_empty() {
        let u = UnificationMap::builtin();
        let ens = EnsembleTable::builtin();
        let s = two_person_sample();
        // Perfect predictions: every instance echoed back with score 1.
        let pred = ImagePrediction {
            semantic: {
                let mut m = BTreeMap::new();
                for i in &s.instances {
                    m.insert(i.label.to_lowercase(), binarize(&i.mask));
                }
                m
            },
            instances: s
                .instances
                .iter()
                .map(|i| PredInstance {
                    mask: binarize(&i.mask),
                    label: i.label.clone(),
                    score: 1.0,
                })
                .collect(),
        };
        let opts = EvalOptions {
            train_labels: Some(["tops".to_string(), "face".to_string()].into()),
            ..EvalOptions::default()
        };
        let samples = vec![s];
        let preds = vec![Some(pred)];
        let r1 = evaluate_dataset(&samples, &preds, &u, &ens, &opts).unwrap();
        let r2 = evaluate_dataset(&samples, &preds, &u, &ens, &opts).unwrap();
        assert_eq!(r1.to_json_string(), r2.to_json_string());

        let cop = &r1.protocols["COP"];
        assert_eq!(cop.miou, Some(100.0));
        assert_eq!(cop.map_is, Some(100.0));
        let fpp = &r1.protocols["FPP"];
        assert_eq!(fpp.miou, Some(100.0));
        assert_eq!(fpp.images, 1);
        // The sample has no umbrella/backpack/etc beyond the handbag, so CCP
        // is present; BHP too. Nothing should be empty here.
        assert!(!r1.protocols["CCP"].empty);
        // Unseen section: pants and handbag (and hand_l's raw form) are not
        // covered by train labels {tops, face}.
        let unseen = r1.unseen.as_ref().unwrap();
        assert!(unseen.labels.contains(&"pants".to_string()));
        assert!(!unseen.report.empty);
        assert_eq!(unseen.report.miou, Some(100.0));
        // Text table renders and mentions every protocol.
        let text = r1.to_text();
        for p in ["FPP", "BHP", "CCP", "COP", "conventions"] {
            assert!(text.contains(p), "missing {p} in:\n{text}");
        }
        // Missing predictions are flagged and scored as all-miss.
        let r3 = evaluate_dataset(&samples, &[None], &u, &ens, &opts).unwrap();
        assert_eq!(r3.missing_predictions, 1);
        assert_eq!(r3.protocols["COP"].miou, Some(0.0));
        // A protocol with no ground truth at all is marked empty.
        let bare = LabeledSample {
            image: Array3::zeros((3, 8, 8)),
            caption: "a face".into(),
            instances: vec![Instance {
                mask: rect_f(8, 8, 0, 2, 0, 2),
                label: "face".into(),
                person: 0,
            }],
        };
        let opts_plain = EvalOptions::default();
        let r4 = evaluate_dataset(&[bare], &[None], &u, &ens, &opts_plain).unwrap();
        assert!(r4.protocols["CCP"].empty);
        assert_eq!(r4.protocols["CCP"].miou, None);
        assert!(r4.to_text().contains("empty"));
    }

    #[test]
    fn fpp_prediction_components_and_scores() {
        let u = UnificationMap::builtin();
        // Two disjoint blobs of clothing predictions -> two persons.
        let pred = ImagePrediction {
            semantic: BTreeMap::new(),
            instances: vec![
                PredInstance { mask: rect(8, 8, 0, 3, 0, 3), label: "tops".into(), score: 0.4 },
                PredInstance { mask: rect(8, 8, 2, 5, 0, 3), label: "pants".into(), score: 0.9 },
                PredInstance { mask: rect(8, 8, 0, 3, 5, 8), label: "face".into(), score: 0.7 },
                // Unknown label: ignored for person building.
                PredInstance { mask: rect(8, 8, 6, 8, 0, 8), label: "mystery".into(), score: 1.0 },
            ],
        };
        let (sem, inst) = protocol_prediction(&pred, Protocol::Fpp, &u, &BTreeSet::new());
        assert!(sem.contains_key("person"));
        assert_eq!(inst.len(), 2);
        // First component (top-left union) carries the max member score 0.9.
        assert_eq!(inst[0].score, 0.9);
        assert_eq!(inst[1].score, 0.7);
        let total: u64 = count(&sem["person"]);
        assert_eq!(total, count(&inst[0].mask) + count(&inst[1].mask));
    }

    #[test]
    fn ignore_classes_drop_out_everywhere() {
        let u = UnificationMap::builtin();
        let s = two_person_sample();
        let pred = ImagePrediction {
            semantic: [("tops".to_string(), rect(8, 8, 2, 4, 0, 2))].into(),
            instances: vec![PredInstance {
                mask: rect(8, 8, 2, 4, 0, 2),
                label: "tops".into(),
                score: 1.0,
            }],
        };
        let ignore: BTreeSet<String> = ["tops".to_string()].into();
        let (sem, inst) = protocol_prediction(&pred, Protocol::Cop, &u, &ignore);
        assert!(sem.is_empty());
        assert!(inst.is_empty());
        let mut gt = build_protocol_gt(&s, Protocol::Cop, &u);
        gt.instances.retain(|i| !ignore.contains(&i.canonical));
        assert!(gt.instances.iter().all(|i| i.canonical != "tops"));
    }
}
