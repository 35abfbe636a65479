//! Mask IoU and COCO-protocol evaluation: mask AP averaged over IoU
//! thresholds 0.50:0.05:0.95, AP50/AP75, AR@{1,10,100}, per-class and
//! per-size breakdowns.
//!
//! Matching is greedy per image and class in descending score order; the
//! precision-recall curve integrates with 101-point interpolation. Size
//! buckets use the COCO ignore mechanism: out-of-bucket ground truth never
//! counts against precision or recall.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Area thresholds (at full input resolution) separating small / medium /
/// large objects; rescaled from the COCO 32^2 / 96^2 convention to 256-px
/// desk images.
pub const SMALL_AREA: usize = 100;
pub const LARGE_AREA: usize = 900;

/// One predicted instance for evaluation.
#[derive(Debug, Clone)]
pub struct EvalPrediction {
    pub image: usize,
    pub class_id: u32,
    pub score: f32,
    pub mask: Vec<u8>,
}

/// One ground-truth instance.
#[derive(Debug, Clone)]
pub struct EvalGroundTruth {
    pub image: usize,
    pub class_id: u32,
    pub mask: Vec<u8>,
    /// Pixel area at full input resolution (drives the size buckets).
    pub full_res_area: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
    pub per_class_ap: Vec<(u32, f64)>,
}

impl EvalSummary {
    pub fn csv_header() -> &'static str {
        "ap,ap50,ap75,ap_s,ap_m,ap_l,ar1,ar10,ar100"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.ap, self.ap50, self.ap75, self.ap_small, self.ap_medium, self.ap_large,
            self.ar1, self.ar10, self.ar100
        )
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "AP    AP50  AP75  AP_S  AP_M  AP_L  AR1   AR10  AR100");
        let _ = writeln!(
            s,
            "{:.3} {:.3} {:.3} {:.3} {:.3} {:.3} {:.3} {:.3} {:.3}",
            self.ap, self.ap50, self.ap75, self.ap_small, self.ap_medium, self.ap_large,
            self.ar1, self.ar10, self.ar100
        );
        for (class, ap) in &self.per_class_ap {
            let _ = writeln!(s, "class {class}: AP = {ap:.3}");
        }
        s
    }
}

/// Intersection over union of two same-shape binary masks. Both-empty pairs
/// return 1 by convention (identical empties are a perfect match); this
/// never yields NaN.
pub fn mask_iou(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "mask_iou",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SizeBucket {
    All,
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    fn contains(self, area: usize) -> bool {
        match self {
            SizeBucket::All => true,
            SizeBucket::Small => area < SMALL_AREA,
            SizeBucket::Medium => (SMALL_AREA..=LARGE_AREA).contains(&area),
            SizeBucket::Large => area > LARGE_AREA,
        }
    }
}

/// (is_tp, is_ignored) flags for every prediction of one class in one image
/// at one IoU threshold, in descending-score order.
fn match_image(
    preds: &[&EvalPrediction],
    gts: &[&EvalGroundTruth],
    iou_matrix: &[Vec<f64>],
    thresh: f64,
    bucket: SizeBucket,
    max_det: usize,
) -> (Vec<(f32, bool, bool)>, usize) {
    let in_bucket: Vec<bool> = gts.iter().map(|g| bucket.contains(g.full_res_area)).collect();
    let n_gt_counted = in_bucket.iter().filter(|&&b| b).count();
    let mut gt_taken = vec![false; gts.len()];
    let mut results = Vec::with_capacity(preds.len().min(max_det));
    for (pi, pred) in preds.iter().enumerate().take(max_det) {
        // Prefer the best-IoU unmatched counted GT; fall back to an ignored
        // one so out-of-bucket objects absorb their detections.
        let mut best: Option<(usize, f64)> = None;
        let mut best_ignored: Option<(usize, f64)> = None;
        for (gi, _) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let iou = iou_matrix[pi][gi];
            if iou < thresh {
                continue;
            }
            let slot = if in_bucket[gi] { &mut best } else { &mut best_ignored };
            if slot.map(|(_, b)| iou > b).unwrap_or(true) {
                *slot = Some((gi, iou));
            }
        }
        match (best, best_ignored) {
            (Some((gi, _)), _) => {
                gt_taken[gi] = true;
                results.push((pred.score, true, false));
            }
            (None, Some((gi, _))) => {
                gt_taken[gi] = true;
                results.push((pred.score, false, true));
            }
            (None, None) => results.push((pred.score, false, false)),
        }
    }
    (results, n_gt_counted)
}

/// 101-point interpolated average precision from per-prediction TP flags
/// (already sorted by descending score) and the total GT count.
fn average_precision(flags: &[(f32, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for &(_, is_tp) in flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: max precision at recall >= r
    let mut env = precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = recall
            .iter()
            .position(|&rc| rc >= r - 1e-12)
            .map(|idx| env[idx])
            .unwrap_or(0.0);
        ap += p;
    }
    Some(ap / 101.0)
}

struct ClassEval {
    /// AP per IoU threshold (None when the class/bucket has no GT).
    ap: Vec<Option<f64>>,
    /// Max recall per IoU threshold at detection caps 1 / 10 / 100.
    recall_at: [Vec<Option<f64>>; 3],
}

fn evaluate_class(
    class: u32,
    predictions: &[EvalPrediction],
    ground_truth: &[EvalGroundTruth],
    bucket: SizeBucket,
    n_images: usize,
) -> ClassEval {
    // per image: sorted predictions + IoU matrix
    struct ImageData<'a> {
        preds: Vec<&'a EvalPrediction>,
        gts: Vec<&'a EvalGroundTruth>,
        ious: Vec<Vec<f64>>,
    }
    let mut images: Vec<ImageData> = Vec::with_capacity(n_images);
    for img in 0..n_images {
        let mut preds: Vec<&EvalPrediction> = predictions
            .iter()
            .filter(|p| p.image == img && p.class_id == class)
            .collect();
        preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        let gts: Vec<&EvalGroundTruth> = ground_truth
            .iter()
            .filter(|g| g.image == img && g.class_id == class)
            .collect();
        let ious = preds
            .iter()
            .map(|p| {
                gts.iter()
                    .map(|g| mask_iou(&p.mask, &g.mask).expect("shapes validated upstream"))
                    .collect()
            })
            .collect();
        images.push(ImageData { preds, gts, ious });
    }

    let caps = [1usize, 10, 100];
    let mut ap = Vec::with_capacity(IOU_THRESHOLDS.len());
    let mut recall_at: [Vec<Option<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for &thresh in &IOU_THRESHOLDS {
        // AP at the 100-detection cap
        let mut flags: Vec<(f32, bool)> = Vec::new();
        let mut n_gt = 0usize;
        for im in &images {
            let (res, gt_count) = match_image(&im.preds, &im.gts, &im.ious, thresh, bucket, 100);
            n_gt += gt_count;
            flags.extend(res.iter().filter(|(_, _, ignored)| !ignored).map(|&(s, tp, _)| (s, tp)));
        }
        flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        ap.push(average_precision(&flags, n_gt));

        for (ci, &cap) in caps.iter().enumerate() {
            let mut matched = 0usize;
            let mut n_gt_cap = 0usize;
            for im in &images {
                let (res, gt_count) = match_image(&im.preds, &im.gts, &im.ious, thresh, bucket, cap);
                n_gt_cap += gt_count;
                matched += res.iter().filter(|(_, tp, _)| *tp).count();
            }
            recall_at[ci].push(if n_gt_cap == 0 {
                None
            } else {
                Some(matched as f64 / n_gt_cap as f64)
            });
        }
    }
    ClassEval { ap, recall_at }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values.flatten() {
        sum += v;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Full evaluation. `classes` lists the class ids in play (classes without
/// ground truth anywhere are excluded from the means, COCO-style).
pub fn evaluate(
    predictions: &[EvalPrediction],
    ground_truth: &[EvalGroundTruth],
    classes: &[u32],
    n_images: usize,
) -> Result<EvalSummary> {
    for p in predictions {
        if let Some(g) = ground_truth.iter().find(|g| g.image == p.image) {
            if g.mask.len() != p.mask.len() {
                return Err(Error::ShapeMismatch {
                    op: "evaluate (prediction vs GT mask size)",
                    lhs: vec![p.mask.len()],
                    rhs: vec![g.mask.len()],
                });
            }
        }
    }

    let mut per_class: Vec<(u32, ClassEval)> = Vec::new();
    for &class in classes {
        if !ground_truth.iter().any(|g| g.class_id == class) {
            continue;
        }
        per_class.push((
            class,
            evaluate_class(class, predictions, ground_truth, SizeBucket::All, n_images),
        ));
    }

    let ap = mean_of(per_class.iter().flat_map(|(_, e)| e.ap.iter().copied()));
    let ap50 = mean_of(per_class.iter().map(|(_, e)| e.ap[0]));
    let ap75 = mean_of(per_class.iter().map(|(_, e)| e.ap[5]));
    let ar_for = |cap_idx: usize| {
        mean_of(
            per_class
                .iter()
                .flat_map(move |(_, e)| e.recall_at[cap_idx].iter().copied()),
        )
    };
    let (ar1, ar10, ar100) = (ar_for(0), ar_for(1), ar_for(2));

    let mut size_aps = [0.0f64; 3];
    for (i, bucket) in [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large]
        .into_iter()
        .enumerate()
    {
        let mut evals = Vec::new();
        for &class in classes {
            if !ground_truth
                .iter()
                .any(|g| g.class_id == class && bucket.contains(g.full_res_area))
            {
                continue;
            }
            evals.push(evaluate_class(class, predictions, ground_truth, bucket, n_images));
        }
        size_aps[i] = mean_of(evals.iter().flat_map(|e| e.ap.iter().copied()));
    }

    let per_class_ap = per_class
        .iter()
        .map(|(c, e)| (*c, mean_of(e.ap.iter().copied())))
        .collect();
    Ok(EvalSummary {
        ap,
        ap50,
        ap75,
        ap_small: size_aps[0],
        ap_medium: size_aps[1],
        ap_large: size_aps[2],
        ar1,
        ar10,
        ar100,
        per_class_ap,
    })
}
