//! Imbalance-aware robust pseudo-label loss.
//!
//! Per image, over pseudo-labelled boxes `b` with class `ĉ`:
//!
//! ```text
//! L = Σ_b w_ĉ [ α·(−log p'_ĉ) + β·(1 − p_ĉ) ] + γ·KL(p̄ ‖ U_K)
//! ```
//!
//! where `p'` is the peak-adjusted distribution, `w_ĉ` is `w_fg` for
//! foreground classes and `w_bg` for background, and `p̄` is the pooled
//! foreground class distribution `p̄_k = Σ_b p_{b,k} / Z` with
//! `Z = Σ_b Σ_{k<K} p_{b,k}`.

use crate::numerics::softmax_backward;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrplConfig {
    /// Peak margin added to the most confident class.
    pub m: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub w_fg: f64,
    pub w_bg: f64,
    /// When false the α-term is plain cross entropy on `p`.
    pub peak_adjust: bool,
}

impl Default for IrplConfig {
    fn default() -> Self {
        IrplConfig {
            m: 1e4,
            alpha: 0.1,
            beta: 2.0,
            gamma: 0.01,
            w_fg: 2.0,
            w_bg: 1.0,
            peak_adjust: true,
        }
    }
}

impl IrplConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0) {
            return Err(Error::NonPositiveMargin);
        }
        let non_negative = [self.alpha, self.beta, self.gamma];
        if non_negative.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("alpha, beta and gamma must be >= 0".into()));
        }
        if !(self.w_fg > 0.0 && self.w_bg > 0.0) {
            return Err(Error::InvalidConfig("class weights must be positive".into()));
        }
        Ok(())
    }
}

/// Class probabilities of one box together with its pseudo class.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxLossTerm {
    pub probs: Vec<f64>,
    pub pseudo_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IrplOutput {
    pub loss: f64,
    /// Gradient of `loss` with respect to each box's probability vector.
    pub grads: Vec<Vec<f64>>,
    /// Value of the KL term before the `γ` weight (0 when skipped).
    pub kl: f64,
    /// The pooled foreground mass `Z` was zero, so the KL term was dropped.
    pub kl_skipped: bool,
}

/// Sums in ascending order so the result does not depend on box order.
fn order_free_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn peak_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Adds `m` to the peak probability and renormalises by `1 + m`.
pub fn peak_adjust(p: &[f64], m: f64) -> Result<Vec<f64>> {
    if !(m > 0.0) {
        return Err(Error::NonPositiveMargin);
    }
    if p.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let t = peak_argmax(p);
    let scale = 1.0 + m;
    Ok(p.iter()
        .enumerate()
        .map(|(k, &v)| if k == t { (v + m) / scale } else { v / scale })
        .collect())
}

/// `−log p'_c` (or `−log p_c` without peak adjustment) and its derivative
/// with respect to `p_c`. The argmax is treated as locally constant.
fn margin_term(p: &[f64], class: usize, m: f64, peak_adjust: bool) -> (f64, f64) {
    let pc = p[class];
    if !peak_adjust {
        return (-pc.ln(), -1.0 / pc);
    }
    if peak_argmax(p) == class {
        // p'_c = 1 − (1 − p_c)/(1 + m)
        let value = -(-(1.0 - pc) / (1.0 + m)).ln_1p();
        (value, -1.0 / (pc + m))
    } else {
        // p'_c = p_c/(1 + m); the log(1 + m) offset is constant
        (m.ln_1p() - pc.ln(), -1.0 / pc)
    }
}

pub fn irpl_loss(boxes: &[BoxLossTerm], cfg: &IrplConfig, num_fg_classes: usize) -> Result<IrplOutput> {
    cfg.validate()?;
    if boxes.is_empty() {
        return Err(Error::InvalidConfig("irpl_loss needs at least one box".into()));
    }
    let width = num_fg_classes + 1;
    for b in boxes {
        if b.probs.len() != width {
            return Err(Error::ShapeMismatch {
                expected: vec![width],
                actual: vec![b.probs.len()],
            });
        }
        if b.pseudo_class >= width {
            return Err(Error::InvalidConfig(format!(
                "pseudo class {} outside 0..={num_fg_classes}",
                b.pseudo_class
            )));
        }
    }

    let mut per_box = Vec::with_capacity(boxes.len());
    let mut grads = Vec::with_capacity(boxes.len());
    for b in boxes {
        let c = b.pseudo_class;
        let w = if c < num_fg_classes { cfg.w_fg } else { cfg.w_bg };
        let (margin, d_margin) = margin_term(&b.probs, c, cfg.m, cfg.peak_adjust);
        per_box.push(w * (cfg.alpha * margin + cfg.beta * (1.0 - b.probs[c])));
        let mut g = vec![0.0; width];
        g[c] = w * (cfg.alpha * d_margin - cfg.beta);
        grads.push(g);
    }
    let mut loss = order_free_sum(per_box);

    // Pooled foreground distribution p̄ and its KL divergence to uniform.
    let pooled: Vec<f64> = (0..num_fg_classes)
        .map(|k| order_free_sum(boxes.iter().map(|b| b.probs[k]).collect()))
        .collect();
    let z = order_free_sum(pooled.clone());
    let kl_skipped = num_fg_classes == 0 || !(z > 0.0);
    let mut kl = 0.0;
    if !kl_skipped {
        let pbar: Vec<f64> = pooled.iter().map(|s| s / z).collect();
        let neg_entropy: f64 = pbar.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
        kl = (num_fg_classes as f64).ln() + neg_entropy;
        loss += cfg.gamma * kl;
        if cfg.gamma != 0.0 {
            // dKL/dp_{b,j} = (log p̄_j − Σ_k p̄_k log p̄_k) / Z for foreground j
            let shared: Vec<f64> = pbar
                .iter()
                .map(|&v| cfg.gamma * (v.ln() - neg_entropy) / z)
                .collect();
            for g in &mut grads {
                for (gj, s) in g.iter_mut().zip(&shared) {
                    *gj += s;
                }
            }
        }
    }

    Ok(IrplOutput {
        loss,
        grads,
        kl,
        kl_skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradRegime {
    /// Pseudo class equals the student's argmax.
    Agree,
    Disagree,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegimeCheck {
    pub factor: f64,
    pub regime: GradRegime,
    /// Largest element-wise gap between the peak-adjusted logit gradient and
    /// `factor ×` the cross-entropy logit gradient.
    pub max_deviation: f64,
    /// `max_deviation` within 1e-10 (agree) or 1e-12 (disagree).
    pub holds: bool,
}

/// Compares the logit gradient of `−log p'_ĉ` with the plain cross-entropy
/// logit gradient `p − e_ĉ`.
///
/// When `ĉ` is the argmax the two differ by the scalar `p_ĉ / (p_ĉ + m)`;
/// otherwise the margin only shifts the loss by a constant and the gradients
/// coincide.
pub fn irpl_grad_regime_check(p: &[f64], pseudo_class: usize, m: f64) -> Result<RegimeCheck> {
    if !(m > 0.0) {
        return Err(Error::NonPositiveMargin);
    }
    if pseudo_class >= p.len() {
        return Err(Error::InvalidConfig("pseudo class out of range".into()));
    }
    let regime = if peak_argmax(p) == pseudo_class {
        GradRegime::Agree
    } else {
        GradRegime::Disagree
    };
    let (factor, tolerance) = match regime {
        GradRegime::Agree => (p[pseudo_class] / (p[pseudo_class] + m), 1e-10),
        GradRegime::Disagree => (1.0, 1e-12),
    };

    let (_, d_margin) = margin_term(p, pseudo_class, m, true);
    let mut grad_p = vec![0.0; p.len()];
    grad_p[pseudo_class] = d_margin;
    let adjusted = softmax_backward(p, &grad_p);

    let max_deviation = adjusted
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let ce = p[j] - if j == pseudo_class { 1.0 } else { 0.0 };
            (g - factor * ce).abs()
        })
        .fold(0.0, f64::max);

    Ok(RegimeCheck {
        factor,
        regime,
        max_deviation,
        holds: max_deviation <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, grad_check, softmax};
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn peak_adjust_substitution() {
        let out = peak_adjust(&[0.7, 0.2, 0.1], 1.0).unwrap();
        assert!(close(&out, &[0.85, 0.10, 0.05], 1e-15));
    }

    #[test]
    fn peak_adjust_tie_goes_to_lowest_index() {
        let out = peak_adjust(&[0.5, 0.5], 1.0).unwrap();
        assert_eq!(out, vec![0.75, 0.25]);
    }

    #[test]
    fn peak_adjust_large_margin_matches_high_precision() {
        // (0.7 + 1e4)/(1 + 1e4) and 0.3/(1 + 1e4) with 50-digit arithmetic
        let out = peak_adjust(&[0.7, 0.3], 1e4).unwrap();
        assert!((out[0] - 0.999_970_002_999_700_030_0).abs() < 1e-15);
        assert!((out[1] - 2.999_700_029_997_000_3e-5).abs() < 1e-19);
    }

    #[test]
    fn peak_adjust_rejects_non_positive_margin() {
        for m in [0.0, -1.0, f64::NAN] {
            let err = peak_adjust(&[0.5, 0.5], m).unwrap_err();
            assert_eq!(err.to_string(), "non-positive margin");
        }
    }

    #[test]
    fn kl_vanishes_for_uniform_pooled_distribution() {
        let boxes = vec![
            BoxLossTerm { probs: vec![1.0 / 3.0; 3], pseudo_class: 0 };
            4
        ];
        let out = irpl_loss(&boxes, &IrplConfig::default(), 2).unwrap();
        assert_eq!(out.kl, 0.0);
        assert!(!out.kl_skipped);
    }

    #[test]
    fn single_foreground_box_matches_high_precision() {
        let cfg = IrplConfig { gamma: 0.0, ..IrplConfig::default() };
        let boxes = [BoxLossTerm { probs: vec![0.6, 0.4], pseudo_class: 0 }];
        let out = irpl_loss(&boxes, &cfg, 1).unwrap();
        // 2·[0.1·(−log((0.6 + 1e4)/(1 + 1e4))) + 2·0.4] with 50-digit arithmetic
        assert!((out.loss - 1.600_007_999_360_052_262).abs() < 1e-14);
    }

    #[test]
    fn background_boxes_use_background_weight() {
        let cfg = IrplConfig { gamma: 0.0, peak_adjust: false, ..IrplConfig::default() };
        let fg = [BoxLossTerm { probs: vec![0.3, 0.3, 0.4], pseudo_class: 1 }];
        let bg = [BoxLossTerm { probs: vec![0.3, 0.3, 0.4], pseudo_class: 2 }];
        let lf = irpl_loss(&fg, &cfg, 2).unwrap().loss;
        let lb = irpl_loss(&bg, &cfg, 2).unwrap().loss;
        assert!((lf - 2.0 * (0.1 * -(0.3f64).ln() + 2.0 * 0.7)).abs() < 1e-14);
        assert!((lb - (0.1 * -(0.4f64).ln() + 2.0 * 0.6)).abs() < 1e-14);
    }

    #[test]
    fn zero_foreground_mass_skips_kl() {
        let boxes = [BoxLossTerm { probs: vec![0.0, 0.0, 1.0], pseudo_class: 2 }];
        let out = irpl_loss(&boxes, &IrplConfig::default(), 2).unwrap();
        assert!(out.kl_skipped);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = IrplConfig::default();
        assert!(irpl_loss(&[], &cfg, 2).is_err());
        let bad_class = [BoxLossTerm { probs: vec![0.5, 0.5], pseudo_class: 2 }];
        assert!(irpl_loss(&bad_class, &cfg, 1).is_err());
        let bad_len = [BoxLossTerm { probs: vec![0.5, 0.5], pseudo_class: 0 }];
        assert!(irpl_loss(&bad_len, &cfg, 2).is_err());
        let bad_m = IrplConfig { m: 0.0, ..cfg };
        assert!(matches!(irpl_loss(&bad_class, &bad_m, 1), Err(Error::NonPositiveMargin)));
    }

    fn random_boxes(rng: &mut impl Rng, n: usize, k: usize) -> Vec<BoxLossTerm> {
        (0..n)
            .map(|_| {
                let logits: Vec<f64> = (0..=k).map(|_| rng.random_range(-2.0..2.0)).collect();
                BoxLossTerm {
                    probs: softmax(&logits).unwrap(),
                    pseudo_class: rng.random_range(0..=k),
                }
            })
            .collect()
    }

    fn flat_loss(boxes: &[BoxLossTerm], flat: &[f64], cfg: &IrplConfig, k: usize) -> f64 {
        let rebuilt: Vec<BoxLossTerm> = boxes
            .iter()
            .zip(flat.chunks(k + 1))
            .map(|(b, p)| BoxLossTerm { probs: p.to_vec(), pseudo_class: b.pseudo_class })
            .collect();
        irpl_loss(&rebuilt, cfg, k).unwrap().loss
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::rng::rng_from(77);
        let k = 3;
        for seed_round in 0..5 {
            let boxes = random_boxes(&mut rng, 5, k);
            for peak in [true, false] {
                let cfg = IrplConfig { gamma: 0.5, m: if seed_round % 2 == 0 { 1e4 } else { 0.7 }, peak_adjust: peak, ..IrplConfig::default() };
                let out = irpl_loss(&boxes, &cfg, k).unwrap();
                let flat: Vec<f64> = boxes.iter().flat_map(|b| b.probs.clone()).collect();
                let numeric = finite_diff_grad(|p| flat_loss(&boxes, p, &cfg, k), &flat, 1e-6).unwrap();
                let analytic: Vec<f64> = out.grads.concat();
                let report = grad_check(&analytic, &numeric, 1e-5);
                assert!(report.pass, "{report:?}");
            }
        }
    }

    #[test]
    fn regime_examples() {
        let agree = irpl_grad_regime_check(&[0.9, 0.1], 0, 1e4).unwrap();
        assert_eq!(agree.regime, GradRegime::Agree);
        assert!((agree.factor - 0.9 / 10_000.9).abs() < 1e-18);
        assert!(agree.holds);

        let disagree = irpl_grad_regime_check(&[0.9, 0.1], 1, 1e4).unwrap();
        assert_eq!(disagree.regime, GradRegime::Disagree);
        assert_eq!(disagree.factor, 1.0);
        assert!(disagree.holds);

        let tiny = irpl_grad_regime_check(&[0.9, 0.1], 0, 1e-12).unwrap();
        assert!((tiny.factor - 1.0).abs() < 1e-11);
    }

    #[test]
    fn agree_factor_matches_finite_differences_on_logits() {
        let logits = [2.0, -0.3, 0.4];
        let p = softmax(&logits).unwrap();
        let m = 3.0;
        let check = irpl_grad_regime_check(&p, 0, m).unwrap();
        let f = |z: &[f64]| {
            let q = softmax(z).unwrap();
            -peak_adjust(&q, m).unwrap()[0].ln()
        };
        let numeric = finite_diff_grad(f, &logits, 1e-6).unwrap();
        for j in 0..3 {
            let ce = p[j] - if j == 0 { 1.0 } else { 0.0 };
            assert!((numeric[j] - check.factor * ce).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn peak_adjust_invariants(
            raw in prop::collection::vec(0.001f64..1.0, 2..12),
            log_m in -3.0f64..6.0,
        ) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let m = 10f64.powf(log_m);
            let q = peak_adjust(&p, m).unwrap();
            let t = peak_argmax(&p);
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert_eq!(peak_argmax(&q), t);
            for i in 0..p.len() {
                for j in 0..p.len() {
                    if i != t && j != t && p[i] < p[j] {
                        prop_assert!(q[i] <= q[j]);
                    }
                }
            }
        }

        #[test]
        fn irpl_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = crate::rng::rng_from(seed);
            let boxes = random_boxes(&mut rng, 6, 3);
            let mut reversed = boxes.clone();
            reversed.reverse();
            let cfg = IrplConfig::default();
            let a = irpl_loss(&boxes, &cfg, 3).unwrap();
            let b = irpl_loss(&reversed, &cfg, 3).unwrap();
            prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            let mut rg = b.grads.clone();
            rg.reverse();
            prop_assert_eq!(a.grads, rg);
        }
    }
}
