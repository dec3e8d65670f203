use serde::Serialize;

use crate::detector::{decode_and_filter, forward, iou, DetectorParams, Detection};
use crate::scenes::{Annotation, Scene, NUM_CLASSES};

/// Score floor for evaluation. Low-confidence detections only extend the
/// precision-recall curve, so a small floor changes AP very little.
pub const EVAL_SCORE_FLOOR: f64 = 0.05;
const EVAL_NMS_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassAp {
    pub class: usize,
    pub num_gt: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub per_class: Vec<ClassAp>,
    /// Mean AP over classes with ground truth; 0 when there are none.
    pub map: f64,
}

/// All-point interpolated AP of a ranked list of match outcomes.
pub fn average_precision(ranked_hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked_hits.len());
    for (i, &hit) in ranked_hits.iter().enumerate() {
        tp += usize::from(hit);
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope from the right
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Per-class AP for detections against ground truth, image by image.
/// Detections of a class are ranked by score across all images (ties keep
/// image order, then list order); each one takes the unmatched ground-truth
/// box of its class with the highest IoU, if that IoU reaches the threshold.
pub fn evaluate_detections(detections: &[Vec<Detection>], truth: &[Vec<Annotation>], iou_threshold: f64) -> MapReport {
    assert_eq!(detections.len(), truth.len(), "one detection list per image");
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        let num_gt = truth.iter().flatten().filter(|a| a.class == class).count();
        let mut ranked: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (img, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, d)| {
                let best = truth[img]
                    .iter()
                    .enumerate()
                    .filter(|(j, a)| a.class == class && !used[img][*j])
                    .map(|(j, a)| (j, iou(&d.bbox, &a.bbox)))
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((j, v)) if v >= iou_threshold => {
                        used[img][j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        let ap = (num_gt > 0).then(|| average_precision(&hits, num_gt));
        per_class.push(ClassAp { class, num_gt, ap });
    }
    let present: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    MapReport { per_class, map }
}

pub fn evaluate_map(params: &DetectorParams, scenes: &[Scene], iou_threshold: f64) -> MapReport {
    let detections: Vec<Vec<Detection>> = scenes
        .iter()
        .map(|s| decode_and_filter(&forward(params, &s.image), EVAL_SCORE_FLOOR, EVAL_NMS_IOU))
        .collect();
    let truth: Vec<Vec<Annotation>> = scenes.iter().map(|s| s.annotations.clone()).collect();
    evaluate_detections(&detections, &truth, iou_threshold)
}
