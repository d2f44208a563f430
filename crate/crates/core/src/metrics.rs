//! Detection/ground-truth matching and the five evaluation metrics.
//!
//! Matching is greedy: detections are visited in descending confidence order
//! (ties by ascending detection index) and each claims the still-unmatched
//! ground-truth box of highest IoU, provided that IoU reaches the threshold.
//! This is the de-facto standard pairing rule; it depends only on the
//! *order* of confidences, never on their magnitudes.
//!
//! AP here is the mean of dataset-level precision over a sweep of confidence
//! cutoffs from 0 to 1. Cutoffs at which no detection survives contribute no
//! term: counting them as precision 0 would give a perfect detector with
//! confidence 0.9 an AP below 1. The conventional area-under-the-PR-curve AP
//! is available as [`ApMode::InterpolatedPr`] for comparison with other
//! toolkits.
//!
//! Counts are pooled over all images before any ratio is taken
//! (micro-averaging), matching reports that give one number per test set.
//! Metrics with an empty denominator are `None` ("undefined"), never
//! silently 0 or 1.

use std::collections::BTreeMap;

use crate::dataset::{BoundingBox, Dataset, Detection, DetectionMap};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("iou threshold {0} outside (0, 1]")]
    InvalidIouThreshold(f64),
    #[error("no iou thresholds given")]
    NoThresholds,
    #[error("empty confidence sweep")]
    EmptySweep,
    #[error("confidence cutoff {0} outside [0, 1]")]
    InvalidCutoff(f64),
    #[error("detections reference unknown image id `{0}`")]
    UnknownImageId(String),
}

/// Intersection over union of two boxes.
///
/// Symmetric, 0 for disjoint boxes, 1 exactly when the boxes coincide.
/// Positive areas are guaranteed by [`BoundingBox`] construction, so the
/// denominator is always positive.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter / union
}

/// One matched (ground truth, detection) pair and its IoU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub gt_index: usize,
    pub det_index: usize,
    pub iou: f64,
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_det: Vec<usize>,
}

/// Greedy one-to-one matching at the given IoU threshold.
pub fn match_detections(
    gt: &[BoundingBox],
    dets: &[Detection],
    iou_threshold: f64,
) -> Result<MatchResult, MetricsError> {
    if !iou_threshold.is_finite() || iou_threshold <= 0.0 || iou_threshold > 1.0 {
        return Err(MetricsError::InvalidIouThreshold(iou_threshold));
    }

    // Descending confidence, ties by ascending detection index.
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .expect("confidences are finite")
            .then(a.cmp(&b))
    });

    let mut gt_taken = vec![false; gt.len()];
    let mut result = MatchResult::default();
    for det_index in order {
        let mut best: Option<(usize, f64)> = None;
        for (gt_index, gt_box) in gt.iter().enumerate() {
            if gt_taken[gt_index] {
                continue;
            }
            let overlap = iou(gt_box, &dets[det_index].bbox);
            let better = match best {
                // Strict comparison keeps the lowest gt index on IoU ties.
                Some((_, best_iou)) => overlap > best_iou,
                None => overlap >= iou_threshold,
            };
            if better {
                best = Some((gt_index, overlap));
            }
        }
        match best {
            Some((gt_index, overlap)) => {
                gt_taken[gt_index] = true;
                result.pairs.push(MatchPair {
                    gt_index,
                    det_index,
                    iou: overlap,
                });
            }
            None => result.unmatched_det.push(det_index),
        }
    }
    result.unmatched_det.sort_unstable();
    result.unmatched_gt = gt_taken
        .iter()
        .enumerate()
        .filter(|(_, taken)| !**taken)
        .map(|(i, _)| i)
        .collect();
    Ok(result)
}

/// TP / FP / FN counts. `tp + fp` is the number of detections considered and
/// `tp + fn` the number of ground-truth boxes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ConfusionCounts {
    pub fn new(true_positives: usize, false_positives: usize, false_negatives: usize) -> Self {
        Self {
            true_positives,
            false_positives,
            false_negatives,
        }
    }

    fn add(&mut self, other: ConfusionCounts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }
}

pub fn confusion_counts(m: &MatchResult) -> ConfusionCounts {
    ConfusionCounts {
        true_positives: m.pairs.len(),
        false_positives: m.unmatched_det.len(),
        false_negatives: m.unmatched_gt.len(),
    }
}

/// `tp / (tp + fp)`; `None` when no detections were considered.
pub fn precision(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.true_positives + c.false_positives;
    (denom > 0).then(|| c.true_positives as f64 / denom as f64)
}

/// `tp / (tp + fn)`; `None` when there was no ground truth.
pub fn recall(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.true_positives + c.false_negatives;
    (denom > 0).then(|| c.true_positives as f64 / denom as f64)
}

/// Harmonic mean of precision and recall; `None` when either is undefined
/// or both are zero.
pub fn f1(c: &ConfusionCounts) -> Option<f64> {
    let p = precision(c)?;
    let r = recall(c)?;
    if p + r == 0.0 {
        return None;
    }
    Some(2.0 * p * r / (p + r))
}

/// Mean IoU over matched pairs; `None` when nothing matched.
pub fn mean_iou(m: &MatchResult) -> Option<f64> {
    if m.pairs.is_empty() {
        return None;
    }
    Some(m.pairs.iter().map(|p| p.iou).sum::<f64>() / m.pairs.len() as f64)
}

/// Which AP definition to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMode {
    /// Mean of dataset-level precision over a confidence-cutoff sweep.
    #[default]
    ConfidenceSweep,
    /// Area under the all-point interpolated precision/recall curve.
    InterpolatedPr,
}

/// The default sweep: 101 cutoffs 0.00, 0.01, ..., 1.00.
pub fn default_confidence_sweep() -> Vec<f64> {
    (0..=100).map(|i| f64::from(i) / 100.0).collect()
}

/// Per-image ground truth and detections, the unit over which dataset-level
/// metrics aggregate.
pub type ImagePairs<'a> = Vec<(&'a [BoundingBox], &'a [Detection])>;

/// AP under the confidence-sweep definition.
///
/// For each cutoff `c`, detections with confidence `>= c` are kept, every
/// image is rematched, and the pooled precision is recorded. The result is
/// the arithmetic mean over cutoffs where precision is defined; it is `None`
/// when no cutoff keeps any detection.
pub fn average_precision(
    images: &ImagePairs<'_>,
    iou_threshold: f64,
    sweep: &[f64],
) -> Result<Option<f64>, MetricsError> {
    if sweep.is_empty() {
        return Err(MetricsError::EmptySweep);
    }
    if let Some(bad) = sweep
        .iter()
        .find(|c| !c.is_finite() || !(0.0..=1.0).contains(*c))
    {
        return Err(MetricsError::InvalidCutoff(*bad));
    }

    let mut sum = 0.0;
    let mut defined = 0usize;
    for &cutoff in sweep {
        let mut counts = ConfusionCounts::default();
        for (gt, dets) in images {
            let kept: Vec<Detection> = dets
                .iter()
                .filter(|d| d.confidence >= cutoff)
                .copied()
                .collect();
            let matched = match_detections(gt, &kept, iou_threshold)?;
            counts.add(confusion_counts(&matched));
        }
        if let Some(p) = precision(&counts) {
            sum += p;
            defined += 1;
        }
    }
    Ok((defined > 0).then(|| sum / defined as f64))
}

/// AP as the area under the all-point interpolated PR curve.
///
/// Detections are ranked by descending confidence across the whole dataset
/// and matched greedily within their image; the precision envelope is then
/// integrated over recall. `None` when there is no ground truth.
pub fn average_precision_interpolated(
    images: &ImagePairs<'_>,
    iou_threshold: f64,
) -> Result<Option<f64>, MetricsError> {
    if !iou_threshold.is_finite() || iou_threshold <= 0.0 || iou_threshold > 1.0 {
        return Err(MetricsError::InvalidIouThreshold(iou_threshold));
    }
    let total_gt: usize = images.iter().map(|(gt, _)| gt.len()).sum();
    if total_gt == 0 {
        return Ok(None);
    }

    // (confidence, image index, detection index), globally ranked.
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img_idx, (_, dets)) in images.iter().enumerate() {
        for (det_idx, det) in dets.iter().enumerate() {
            ranked.push((det.confidence, img_idx, det_idx));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("confidences are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut gt_taken: Vec<Vec<bool>> = images.iter().map(|(gt, _)| vec![false; gt.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for (_, img_idx, det_idx) in &ranked {
        let (gt, dets) = &images[*img_idx];
        let det = &dets[*det_idx];
        let mut best: Option<(usize, f64)> = None;
        for (gt_index, gt_box) in gt.iter().enumerate() {
            if gt_taken[*img_idx][gt_index] {
                continue;
            }
            let overlap = iou(gt_box, &det.bbox);
            let better = match best {
                Some((_, best_iou)) => overlap > best_iou,
                None => overlap >= iou_threshold,
            };
            if better {
                best = Some((gt_index, overlap));
            }
        }
        match best {
            Some((gt_index, _)) => {
                gt_taken[*img_idx][gt_index] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // Cumulative precision/recall, then the right-to-left precision envelope.
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, is_tp) in tp_flags.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }

    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precisions.len() {
        ap += (recalls[i] - prev_recall) * precisions[i];
        prev_recall = recalls[i];
    }
    Ok(Some(ap))
}

/// Metrics for one (test set, IoU threshold) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub testset_name: String,
    pub iou_threshold: f64,
    pub counts: ConfusionCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub ap: Option<f64>,
    pub mean_iou: Option<f64>,
}

/// Evaluation knobs; the defaults reproduce the primary report semantics.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ap_mode: ApMode,
    pub sweep: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ap_mode: ApMode::ConfidenceSweep,
            sweep: default_confidence_sweep(),
        }
    }
}

/// Evaluate a detection map against a dataset at each IoU threshold.
///
/// Counts and pair IoUs are pooled across images before any ratio is taken.
/// Every id in the detection map must exist in the dataset; dataset images
/// without detections count as zero detections.
pub fn evaluate(
    dataset: &Dataset,
    detections: &DetectionMap,
    thresholds: &[f64],
) -> Result<Vec<EvalReport>, MetricsError> {
    evaluate_with(dataset, detections, thresholds, &EvalOptions::default())
}

pub fn evaluate_with(
    dataset: &Dataset,
    detections: &DetectionMap,
    thresholds: &[f64],
    options: &EvalOptions,
) -> Result<Vec<EvalReport>, MetricsError> {
    if thresholds.is_empty() {
        return Err(MetricsError::NoThresholds);
    }

    let known: BTreeMap<&str, &crate::dataset::AnnotatedImage> = dataset
        .images
        .iter()
        .map(|img| (img.image_id.as_str(), img))
        .collect();
    if let Some(unknown) = detections.keys().find(|id| !known.contains_key(id.as_str())) {
        return Err(MetricsError::UnknownImageId(unknown.clone()));
    }

    static NO_DETECTIONS: &[Detection] = &[];
    let images: ImagePairs<'_> = dataset
        .images
        .iter()
        .map(|img| {
            let dets = detections
                .get(&img.image_id)
                .map(|r| r.detections.as_slice())
                .unwrap_or(NO_DETECTIONS);
            (img.boxes.as_slice(), dets)
        })
        .collect();

    let mut reports = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut counts = ConfusionCounts::default();
        let mut iou_sum = 0.0;
        let mut pair_count = 0usize;
        for (gt, dets) in &images {
            let matched = match_detections(gt, dets, threshold)?;
            counts.add(confusion_counts(&matched));
            iou_sum += matched.pairs.iter().map(|p| p.iou).sum::<f64>();
            pair_count += matched.pairs.len();
        }
        let ap = match options.ap_mode {
            ApMode::ConfidenceSweep => average_precision(&images, threshold, &options.sweep)?,
            ApMode::InterpolatedPr => average_precision_interpolated(&images, threshold)?,
        };
        reports.push(EvalReport {
            testset_name: dataset.name.clone(),
            iou_threshold: threshold,
            counts,
            precision: precision(&counts),
            recall: recall(&counts),
            f1: f1(&counts),
            ap,
            mean_iou: (pair_count > 0).then(|| iou_sum / pair_count as f64),
        });
    }
    Ok(reports)
}
