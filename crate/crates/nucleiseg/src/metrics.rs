//! Evaluation metrics: pixel-level Dice, instance-level panoptic quality,
//! and the aggregated Jaccard index.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::postprocess::{BinaryMap, InstanceMap};

#[derive(Clone, Debug, Default)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug)]
pub struct MatchResult {
    /// (gt id, pred id, IoU), one entry per matched pair.
    pub pairs: Vec<(u32, u32, f64)>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
}

/// Pixel Dice; 1.0 when both maps are empty.
pub fn dice_metric(pred: &BinaryMap, gt: &BinaryMap) -> Result<f64> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::Dimension(format!(
            "dice_metric: pred {}×{} vs gt {}×{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (1, 1) => counts.tp += 1,
            (1, 0) => counts.fp += 1,
            (0, 1) => counts.fn_ += 1,
            _ => {}
        }
    }
    if counts.tp + counts.fp + counts.fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * counts.tp as f64 / (2.0 * counts.tp as f64 + counts.fp as f64 + counts.fn_ as f64))
}

/// Per-instance pixel counts and pairwise intersections.
struct Overlap {
    gt_sizes: HashMap<u32, usize>,
    pred_sizes: HashMap<u32, usize>,
    inter: HashMap<(u32, u32), usize>,
}

fn overlaps(pred: &InstanceMap, gt: &InstanceMap) -> Overlap {
    let mut o = Overlap {
        gt_sizes: HashMap::new(),
        pred_sizes: HashMap::new(),
        inter: HashMap::new(),
    };
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if p > 0 {
            *o.pred_sizes.entry(p).or_default() += 1;
        }
        if g > 0 {
            *o.gt_sizes.entry(g).or_default() += 1;
        }
        if p > 0 && g > 0 {
            *o.inter.entry((g, p)).or_default() += 1;
        }
    }
    o
}

fn iou_of(o: &Overlap, g: u32, p: u32) -> f64 {
    let inter = *o.inter.get(&(g, p)).unwrap_or(&0) as f64;
    let union = (o.gt_sizes[&g] + o.pred_sizes[&p]) as f64 - inter;
    inter / union
}

/// Pairs every (gt, pred) with IoU strictly above `iou_threshold`. With a
/// threshold >= 0.5 each instance can appear in at most one pair, so no
/// tie-breaking is needed.
pub fn match_instances(pred: &InstanceMap, gt: &InstanceMap, iou_threshold: f64) -> MatchResult {
    let o = overlaps(pred, gt);
    let mut pairs = Vec::new();
    let mut matched_gt = Vec::new();
    let mut matched_pred = Vec::new();
    for (&(g, p), _) in &o.inter {
        let iou = iou_of(&o, g, p);
        if iou > iou_threshold {
            pairs.push((g, p, iou));
            matched_gt.push(g);
            matched_pred.push(p);
        }
    }
    pairs.sort_by_key(|&(g, p, _)| (g, p));
    let mut unmatched_gt: Vec<u32> = o.gt_sizes.keys().copied().filter(|g| !matched_gt.contains(g)).collect();
    let mut unmatched_pred: Vec<u32> =
        o.pred_sizes.keys().copied().filter(|p| !matched_pred.contains(p)).collect();
    unmatched_gt.sort_unstable();
    unmatched_pred.sort_unstable();
    MatchResult {
        pairs,
        unmatched_gt,
        unmatched_pred,
    }
}

/// Panoptic quality at matching threshold IoU > 0.5.
pub fn pq(pred: &InstanceMap, gt: &InstanceMap) -> f64 {
    let m = match_instances(pred, gt, 0.5);
    let tp = m.pairs.len();
    let fp = m.unmatched_pred.len();
    let fn_ = m.unmatched_gt.len();
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let rq = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
    let sq = m.pairs.iter().map(|&(_, _, iou)| iou).sum::<f64>() / tp as f64;
    rq * sq
}

/// Aggregated Jaccard index. Ground-truth instances in ascending id order
/// each greedily take the unused prediction with the highest Jaccard
/// (ties to the lower pred id); unused predictions then inflate the
/// denominator.
///
/// When two ground-truth instances compete for the same prediction, the
/// greedy walk makes the score depend on id order; that degeneracy is part
/// of the matching definition, so relabeling can shift the result there
/// (it cannot in the competition-free case).
pub fn aji(pred: &InstanceMap, gt: &InstanceMap) -> f64 {
    let o = overlaps(pred, gt);
    if o.gt_sizes.is_empty() && o.pred_sizes.is_empty() {
        return 1.0;
    }
    let mut gt_ids: Vec<u32> = o.gt_sizes.keys().copied().collect();
    gt_ids.sort_unstable();
    let mut used: Vec<u32> = Vec::new();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for g in gt_ids {
        let mut best: Option<(f64, u32)> = None;
        for (&(gg, p), &inter) in &o.inter {
            if gg != g || used.contains(&p) || inter == 0 {
                continue;
            }
            let j = iou_of(&o, g, p);
            let better = match best {
                None => true,
                Some((bj, bp)) => j > bj || (j == bj && p < bp),
            };
            if better {
                best = Some((j, p));
            }
        }
        match best {
            Some((_, p)) => {
                let inter = o.inter[&(g, p)] as f64;
                let union = (o.gt_sizes[&g] + o.pred_sizes[&p]) as f64 - inter;
                num += inter;
                den += union;
                used.push(p);
            }
            None => den += o.gt_sizes[&g] as f64,
        }
    }
    for (&p, &size) in &o.pred_sizes {
        if !used.contains(&p) {
            den += size as f64;
        }
    }
    if den == 0.0 {
        // no gt instances; any prediction pixels already added above
        return if o.pred_sizes.is_empty() { 1.0 } else { 0.0 };
    }
    num / den
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    /// (image id, dice, aji, pq)
    pub per_image: Vec<(String, f64, f64, f64)>,
    pub mean_dice: f64,
    pub mean_aji: f64,
    pub mean_pq: f64,
}

pub fn evaluate_dataset(entries: &[(String, InstanceMap, InstanceMap)]) -> Result<MetricReport> {
    let mut per_image = Vec::with_capacity(entries.len());
    for (id, pred, gt) in entries {
        let d = dice_metric(&pred.foreground(), &gt.foreground())?;
        per_image.push((id.clone(), d, aji(pred, gt), pq(pred, gt)));
    }
    let n = per_image.len().max(1) as f64;
    Ok(MetricReport {
        mean_dice: per_image.iter().map(|e| e.1).sum::<f64>() / n,
        mean_aji: per_image.iter().map(|e| e.2).sum::<f64>() / n,
        mean_pq: per_image.iter().map(|e| e.3).sum::<f64>() / n,
        per_image,
    })
}

impl MetricReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>8} {:>8} {:>8}\n", "image", "dice", "aji", "pq");
        for (id, d, a, p) in &self.per_image {
            s += &format!("{id:<24} {d:>8.4} {a:>8.4} {p:>8.4}\n");
        }
        s += &format!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4}\n",
            "mean", self.mean_dice, self.mean_aji, self.mean_pq
        );
        s
    }

    /// Machine-readable key-value lines: `metric<TAB>v1 v2 ...<TAB>mean`.
    pub fn to_kv(&self) -> String {
        let join = |f: fn(&(String, f64, f64, f64)) -> f64| {
            self.per_image.iter().map(|e| format!("{:.6}", f(e))).collect::<Vec<_>>().join(" ")
        };
        let ids = self.per_image.iter().map(|e| e.0.as_str()).collect::<Vec<_>>().join(" ");
        format!(
            "images\t{ids}\ndice\t{}\t{:.6}\naji\t{}\t{:.6}\npq\t{}\t{:.6}\n",
            join(|e| e.1),
            self.mean_dice,
            join(|e| e.2),
            self.mean_aji,
            join(|e| e.3),
            self.mean_pq
        )
    }
}
