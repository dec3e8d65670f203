//! Classification risk under a noise channel, localization risk under
//! missed and shifted teacher boxes, and their sum.

use super::{exact, mean_and_se, sample_noisy_label, BoundReport, PerSampleCheck, TransitionMatrix};
use crate::detector::{iou, BBox};
use crate::rng::{derived_rng, LabRng};
use crate::{Error, Result};
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma1Report {
    /// `lhs` is the clean risk, `rhs` is `(1/λ)` times the noisy risk.
    pub bound: BoundReport,
    pub clean_risk: f64,
    pub noisy_risk: f64,
    pub lambda: f64,
    /// `λ·ℓ_c(x) ≤ Σ_i T_ci ℓ_i(x)` for every sample.
    pub per_sample: PerSampleCheck,
}

/// Draws `n` inputs from `sampler`, scores them with `classifier` and hands
/// the outputs to [`verify_lemma1_samples`]. Inputs and noisy labels come
/// from separate streams derived from `seed`, so changing `T` leaves the
/// inputs unchanged.
pub fn verify_lemma1<X>(
    classifier: impl Fn(&X) -> Vec<f64>,
    mut sampler: impl FnMut(&mut LabRng) -> (X, usize),
    t: &TransitionMatrix,
    n: usize,
    seed: u64,
) -> Result<Lemma1Report> {
    let mut data_rng = derived_rng(seed, 0);
    let outputs: Vec<(Vec<f64>, usize)> = (0..n)
        .map(|_| {
            let (x, class) = sampler(&mut data_rng);
            (classifier(&x), class)
        })
        .collect();
    verify_lemma1_samples(&outputs, t, seed)
}

/// Paired clean/noisy cross-entropy risks over `(probabilities, true class)`
/// pairs. Each sample draws one noisy label from `T[c]`; with `T = I` the
/// two estimates coincide bit for bit.
pub fn verify_lemma1_samples(outputs: &[(Vec<f64>, usize)], t: &TransitionMatrix, seed: u64) -> Result<Lemma1Report> {
    if outputs.is_empty() {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let k = t.size();
    let lambda = t.lambda();
    let inv = 1.0 / lambda;
    let exact_lambda = exact(lambda);
    let exact_rows: Vec<Vec<BigRational>> = t.rows().iter().map(|r| r.iter().map(|&v| exact(v)).collect()).collect();
    let mut noise_rng = derived_rng(seed, 1);

    let mut clean = Vec::with_capacity(outputs.len());
    let mut noisy = Vec::with_capacity(outputs.len());
    let mut diffs = Vec::with_capacity(outputs.len());
    let mut per_sample = PerSampleCheck::default();
    for (probs, class) in outputs {
        if probs.len() != k || *class >= k {
            return Err(Error::ShapeMismatch { expected: vec![k], actual: vec![probs.len()] });
        }
        if probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::InvalidConfig("classifier probabilities must be positive".into()));
        }
        let losses: Vec<f64> = probs.iter().map(|p| -p.ln()).collect();
        let noisy_label = sample_noisy_label(*class, t, &mut noise_rng);
        let (lc, ln) = (losses[*class], losses[noisy_label]);
        clean.push(lc);
        noisy.push(ln);
        diffs.push(lc - inv * ln);

        let lhs = &exact_lambda * exact(lc);
        let rhs: BigRational = exact_rows[*class]
            .iter()
            .zip(&losses)
            .filter(|(w, _)| !w.is_zero())
            .map(|(w, &l)| w * exact(l))
            .sum();
        per_sample.record(lhs <= rhs);
    }
    let (clean_risk, _) = mean_and_se(&clean);
    let (noisy_risk, _) = mean_and_se(&noisy);
    let (_, se) = mean_and_se(&diffs);
    Ok(Lemma1Report {
        bound: BoundReport::new(clean_risk, inv * noisy_risk, se, outputs.len()),
        clean_risk,
        noisy_risk,
        lambda,
        per_sample,
    })
}

/// Half the corner ℓ1 distance, i.e. the mean ℓ1 distance of the two
/// corner points. Any two unit-square boxes are at most 2 apart.
pub fn box_distance(a: &BBox, b: &BBox) -> f64 {
    0.5 * a.l1_distance(b)
}

fn exact_corner_l1(a: &BBox, b: &BBox) -> BigRational {
    a.to_array().iter().zip(b.to_array()).map(|(&x, y)| (exact(x) - exact(y)).abs()).sum()
}

/// One ground-truth box with the student's prediction and the teacher's
/// pseudo-box for it (`None` when the teacher produced nothing).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoxTriple {
    pub student: BBox,
    pub teacher: Option<BBox>,
    pub gt: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegressionNoiseStats {
    /// Mean of `M·d(b̂, b)`.
    pub eta_reg: f64,
    /// Mean of `1 − M`.
    pub zeta: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma2Report {
    /// `lhs` is the clean risk, `rhs` is noisy risk + η_reg + 2ζ.
    pub bound: BoundReport,
    pub stats: RegressionNoiseStats,
    pub noisy_risk: f64,
    /// Both cases: the triangle step when matched, `d ≤ 2` when missed.
    pub per_sample: PerSampleCheck,
}

pub fn verify_lemma2(triples: &[BoxTriple], tau: f64) -> Result<Lemma2Report> {
    if triples.is_empty() {
        return Err(Error::InvalidConfig("need at least one box".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidConfig("IoU threshold must lie in (0, 1]".into()));
    }
    let normalized = |b: &BBox| b.to_array().iter().all(|v| (0.0..=1.0).contains(v));
    for tr in triples {
        if !normalized(&tr.student) || !normalized(&tr.gt) || tr.teacher.is_some_and(|b| !normalized(&b)) {
            return Err(Error::UnnormalizedBox);
        }
    }
    let four = exact(4.0);

    let n = triples.len();
    let (mut clean, mut noisy, mut eta, mut miss, mut slack) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut per_sample = PerSampleCheck::default();
    for tr in triples {
        let d_clean = box_distance(&tr.student, &tr.gt);
        let matched = tr.teacher.filter(|b| iou(b, &tr.gt) >= tau);
        let (d_noisy, d_teacher, m) = match matched {
            Some(hat) => {
                // the ½ factor cancels, so compare corner sums exactly
                let lhs = exact_corner_l1(&tr.student, &tr.gt);
                let rhs = exact_corner_l1(&tr.student, &hat) + exact_corner_l1(&hat, &tr.gt);
                per_sample.record(lhs <= rhs);
                (box_distance(&tr.student, &hat), box_distance(&hat, &tr.gt), 0.0)
            }
            None => {
                per_sample.record(exact_corner_l1(&tr.student, &tr.gt) <= four);
                (0.0, 0.0, 1.0)
            }
        };
        clean.push(d_clean);
        noisy.push(d_noisy);
        eta.push(d_teacher);
        miss.push(m);
        slack.push(d_clean - (d_noisy + d_teacher + 2.0 * m));
    }
    let mean = |v: &[f64]| mean_and_se(v).0;
    let (clean_risk, noisy_risk) = (mean(&clean), mean(&noisy));
    let stats = RegressionNoiseStats { eta_reg: mean(&eta), zeta: mean(&miss), tau };
    let (_, se) = mean_and_se(&slack);
    Ok(Lemma2Report {
        bound: BoundReport::new(clean_risk, noisy_risk + stats.eta_reg + 2.0 * stats.zeta, se, n),
        stats,
        noisy_risk,
        per_sample,
    })
}

/// One detection sample: an input with its true class and the three boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample<X> {
    pub x: X,
    pub class: usize,
    pub boxes: BoxTriple,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub classification: Lemma1Report,
    pub regression: Lemma2Report,
    /// Sum of the two lemma reports.
    pub bound: BoundReport,
}

impl Theorem1Report {
    /// Adds lhs, rhs and standard errors. Summing the errors (rather than
    /// adding in quadrature) keeps `holds` implied by the two lemma checks.
    pub fn compose(classification: Lemma1Report, regression: Lemma2Report) -> Self {
        let (c, r) = (&classification.bound, &regression.bound);
        let bound = BoundReport::new(
            c.lhs + r.lhs,
            c.rhs + r.rhs,
            c.standard_error + r.standard_error,
            c.samples.min(r.samples),
        );
        Theorem1Report { classification, regression, bound }
    }
}

pub fn verify_theorem1<X>(
    classifier: impl Fn(&X) -> Vec<f64>,
    mut sampler: impl FnMut(&mut LabRng) -> DetectionSample<X>,
    t: &TransitionMatrix,
    tau: f64,
    n: usize,
    seed: u64,
) -> Result<Theorem1Report> {
    let mut data_rng = derived_rng(seed, 0);
    let mut outputs = Vec::with_capacity(n);
    let mut triples = Vec::with_capacity(n);
    for _ in 0..n {
        let s = sampler(&mut data_rng);
        outputs.push((classifier(&s.x), s.class));
        triples.push(s.boxes);
    }
    let classification = verify_lemma1_samples(&outputs, t, seed)?;
    let regression = verify_lemma2(&triples, tau)?;
    Ok(Theorem1Report::compose(classification, regression))
}
