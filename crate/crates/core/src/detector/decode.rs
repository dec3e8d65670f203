use serde::Serialize;

use super::{iou, BBox, ForwardTrace, BACKGROUND, GRID};

/// A kept prediction: clipped box, foreground class, and its probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// A detection before NMS, remembering which cell produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub detection: Detection,
    pub cell: usize,
}

/// One candidate per cell whose best foreground probability is at least
/// `score_threshold`, in row-major cell order.
pub fn cell_candidates(trace: &ForwardTrace, score_threshold: f64) -> Vec<Candidate> {
    let mut out = Vec::new();
    for cell in 0..GRID * GRID {
        let probs = trace.cell_probs(cell);
        let mut class = 0;
        for k in 1..BACKGROUND {
            if probs[k] > probs[class] {
                class = k;
            }
        }
        let score = probs[class];
        if score >= score_threshold {
            let bbox = trace.cell_box(cell).clipped();
            out.push(Candidate { detection: Detection { bbox, class, score }, cell });
        }
    }
    out
}

/// Greedy per-class suppression. A candidate is dropped when it overlaps an
/// already kept candidate of the same class with IoU ≥ `iou_threshold`.
/// Output is ordered by score descending, then by cell.
pub fn nms(mut candidates: Vec<Candidate>, iou_threshold: f64) -> Vec<Detection> {
    candidates.sort_by(|a, b| {
        b.detection.score.total_cmp(&a.detection.score).then(a.cell.cmp(&b.cell))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for c in candidates {
        let d = c.detection;
        if kept.iter().all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

pub fn decode_and_filter(trace: &ForwardTrace, score_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    nms(cell_candidates(trace, score_threshold), nms_iou)
}
