use crate::detector::BBox;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct CeOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// The label probability was below [`PROB_FLOOR`] and got clamped.
    pub clamped: bool,
}

/// Cross entropy `-log p_label` with its gradient on the probabilities.
pub fn ce_loss(probs: &[f64], label: usize) -> CeOutput {
    assert!(label < probs.len(), "label {label} out of range");
    let raw = probs[label];
    let clamped = raw <= PROB_FLOOR;
    let p = raw.max(PROB_FLOOR);
    let mut grad = vec![0.0; probs.len()];
    grad[label] = -1.0 / p;
    CeOutput {
        loss: -p.ln(),
        grad,
        clamped,
    }
}

/// `Σ |pred_i - target_i|` over the four corner coordinates. The subgradient
/// at equality is 0.
pub fn l1_box_loss(pred: &BBox, target: &BBox) -> (f64, [f64; 4]) {
    let mut grad = [0.0; 4];
    let mut loss = 0.0;
    for (i, (p, t)) in pred.to_array().into_iter().zip(target.to_array()).enumerate() {
        let d = p - t;
        loss += d.abs();
        grad[i] = sign(d);
    }
    (loss, grad)
}

pub(crate) fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}
