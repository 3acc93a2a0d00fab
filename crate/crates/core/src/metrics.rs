//! Dataset-level detection metrics: pooled 101-point AP, AP averaged over
//! IoU 0.20..=0.50, average recall, and the rate at which confounder regions
//! attract confident detections.
//!
//! Metrics that are undefined (no ground truth, no confounders) are `None`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoundingBox};
use crate::model::Detection;

pub const IOU_THRESHOLDS: [f64; 7] = [0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50];
pub const MAX_DETS_PER_IMAGE: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tp: Vec<bool>,
    pub false_negatives: usize,
}

/// Detections must be sorted by score, highest first. Each one takes the
/// unmatched ground-truth box of highest IoU (first on ties) if that IoU
/// reaches `iou_thresh`.
pub fn match_greedy(dets: &[Detection], gts: &[BoundingBox], iou_thresh: f64) -> MatchResult {
    debug_assert!(dets.windows(2).all(|w| w[0].score >= w[1].score), "detections not sorted");
    let mut taken = vec![false; gts.len()];
    let tp = dets
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&d.bbox, gt);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    MatchResult {
        tp,
        false_negatives: taken.iter().filter(|t| !**t).count(),
    }
}

fn sorted(dets: &[Detection]) -> Vec<Detection> {
    let mut d = dets.to_vec();
    d.sort_by(|a, b| b.score.total_cmp(&a.score));
    d
}

/// `(recall, precision)` after each detection of the pooled ranking. Ties in
/// score keep image order, then within-image order.
pub fn pr_curve(dets: &[Vec<Detection>], gts: &[Vec<BoundingBox>], iou_thresh: f64) -> Option<Vec<(f64, f64)>> {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        let d = sorted(d);
        let m = match_greedy(&d, g, iou_thresh);
        pooled.extend(d.iter().zip(m.tp).map(|(det, tp)| (det.score, tp)));
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    Some(
        pooled
            .iter()
            .enumerate()
            .map(|(k, &(_, hit))| {
                tp += usize::from(hit);
                (tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64)
            })
            .collect(),
    )
}

/// 101-point interpolated AP of the dataset-pooled PR curve.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<BoundingBox>], iou_thresh: f64) -> Option<f64> {
    let curve = pr_curve(dets, gts, iou_thresh)?;
    // Precision envelope: best precision at this or any higher recall.
    let mut envelope = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for (k, &(_, p)) in curve.iter().enumerate().rev() {
        best = best.max(p);
        envelope[k] = best;
    }
    let mut total = 0.0;
    let mut k = 0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        while k < curve.len() && curve[k].0 < r {
            k += 1;
        }
        if k < curve.len() {
            total += envelope[k];
        }
    }
    Some(total / 101.0)
}

pub fn ap_range(dets: &[Vec<Detection>], gts: &[Vec<BoundingBox>]) -> Option<f64> {
    let aps: Option<Vec<f64>> = IOU_THRESHOLDS.iter().map(|&t| average_precision(dets, gts, t)).collect();
    aps.map(|a| a.iter().sum::<f64>() / a.len() as f64)
}

/// Pooled recall with at most 100 detections per image, averaged over the
/// seven IoU thresholds.
pub fn average_recall(dets: &[Vec<Detection>], gts: &[Vec<BoundingBox>]) -> Option<f64> {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let top: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| {
            let mut d = sorted(d);
            d.truncate(MAX_DETS_PER_IMAGE);
            d
        })
        .collect();
    let sum: f64 = IOU_THRESHOLDS
        .iter()
        .map(|&t| {
            let found: usize = top
                .iter()
                .zip(gts)
                .map(|(d, g)| g.len() - match_greedy(d, g, t).false_negatives)
                .sum();
            found as f64 / n_gt as f64
        })
        .sum();
    Some(sum / IOU_THRESHOLDS.len() as f64)
}

/// Fraction of confounder regions overlapped (IoU >= `iou_thresh`) by at
/// least one detection scoring at least `score_thresh`.
pub fn confounder_fp_rate(
    dets: &[Vec<Detection>],
    confounders: &[Vec<BoundingBox>],
    score_thresh: f64,
    iou_thresh: f64,
) -> Option<f64> {
    assert_eq!(dets.len(), confounders.len(), "one detection list per image");
    let total: usize = confounders.iter().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let hit: usize = dets
        .iter()
        .zip(confounders)
        .map(|(d, c)| {
            c.iter()
                .filter(|region| d.iter().any(|x| x.score >= score_thresh && iou(&x.bbox, region) >= iou_thresh))
                .count()
        })
        .sum();
    Some(hit as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub score_thresh: f64,
    pub confounder_iou: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            score_thresh: 0.5,
            confounder_iou: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_range: Option<f64>,
    pub ap_20: Option<f64>,
    pub ap_50: Option<f64>,
    pub ar: Option<f64>,
    pub confounder_fp_rate: Option<f64>,
    pub per_threshold: Vec<(f64, Option<f64>)>,
    /// At IoU 0.5 over detections scoring at least `params.score_thresh`.
    pub counts_at_50: Counts,
    pub n_images: usize,
    pub params: EvalParams,
}

impl EvalReport {
    pub fn compute(
        dets: &[Vec<Detection>],
        gts: &[Vec<BoundingBox>],
        confounders: &[Vec<BoundingBox>],
        params: EvalParams,
    ) -> Self {
        let per_threshold: Vec<(f64, Option<f64>)> =
            IOU_THRESHOLDS.iter().map(|&t| (t, average_precision(dets, gts, t))).collect();
        let ap_range = per_threshold
            .iter()
            .map(|p| p.1)
            .collect::<Option<Vec<f64>>>()
            .map(|a| a.iter().sum::<f64>() / a.len() as f64);
        let mut counts = Counts { tp: 0, fp: 0, fn_: 0 };
        for (d, g) in dets.iter().zip(gts) {
            let confident: Vec<Detection> = sorted(d).into_iter().filter(|x| x.score >= params.score_thresh).collect();
            let m = match_greedy(&confident, g, 0.5);
            let tp = m.tp.iter().filter(|t| **t).count();
            counts.tp += tp;
            counts.fp += m.tp.len() - tp;
            counts.fn_ += m.false_negatives;
        }
        EvalReport {
            ap_range,
            ap_20: per_threshold[0].1,
            ap_50: per_threshold[6].1,
            ar: average_recall(dets, gts),
            confounder_fp_rate: confounder_fp_rate(dets, confounders, params.score_thresh, params.confounder_iou),
            per_threshold,
            counts_at_50: counts,
            n_images: dets.len(),
            params,
        }
    }

    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        let _ = writeln!(s, "| AP_0.2:0.5 | AP_0.2 | AP_0.5 | AR    | conf. FP rate |");
        let _ = writeln!(s, "|------------|--------|--------|-------|---------------|");
        let _ = writeln!(
            s,
            "| {:<10} | {:<6} | {:<6} | {:<5} | {:<13} |",
            f(self.ap_range),
            f(self.ap_20),
            f(self.ap_50),
            f(self.ar),
            f(self.confounder_fp_rate)
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "| IoU  | AP    |");
        let _ = writeln!(s, "|------|-------|");
        for (t, ap) in &self.per_threshold {
            let _ = writeln!(s, "| {t:.2} | {:<5} |", f(*ap));
        }
        let c = &self.counts_at_50;
        let _ = writeln!(
            s,
            "\n{} images; at IoU 0.5 and score >= {}: TP {} FP {} FN {}",
            self.n_images, self.params.score_thresh, c.tp, c.fp, c.fn_
        );
        s
    }
}
