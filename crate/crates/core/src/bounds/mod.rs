//! Numerical checks of the detection-risk bounds under pseudo-label noise.
//!
//! Classification noise is a class-conditional channel `T`: a sample of
//! true class `c` receives pseudo class `k` with probability `T[c][k]`,
//! independent of the input. Every Monte-Carlo comparison uses one sample
//! stream for both sides, and every pointwise step of the proofs is checked
//! in exact rational arithmetic on the computed `f64` values.

mod risk;
mod theorem2;
mod toy;

pub use risk::{
    box_distance, verify_lemma1, verify_lemma1_samples, verify_lemma2, verify_theorem1, BoxTriple, DetectionSample,
    Lemma1Report, Lemma2Report, RegressionNoiseStats, Theorem1Report,
};
pub use theorem2::{
    compute_theorem2_terms, empirical_theorem2_check, irpl_probe_loss, measure_delta, noise_margins,
    Theorem2Empirical, Theorem2Task, Theorem2Terms, EPSILON_GRID,
};
pub use toy::{jitter_box, random_box, BoxNoise, GaussianBlobs, LinearSoftmax};

use crate::{Error, Result};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::Rng;
use serde::Serialize;

/// Rows may deviate from summing to one by at most this much.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
    lambda: f64,
}

impl TransitionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidConfig("transition matrix must be square and non-empty".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidConfig(format!("row {i} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidConfig(format!("row {i} sums to {total}, not 1")));
            }
        }
        let lambda = (0..n).map(|j| rows[j][j]).fold(f64::INFINITY, f64::min);
        if !(lambda > 0.0) {
            return Err(Error::UnidentifiableNoise);
        }
        Ok(TransitionMatrix { rows, lambda })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect())
    }

    /// Keeps the true class with probability `1 − rate` and spreads `rate`
    /// evenly over the other classes.
    pub fn symmetric(n: usize, rate: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidConfig("symmetric noise needs at least two classes".into()));
        }
        let off = rate / (n - 1) as f64;
        Self::new((0..n).map(|i| (0..n).map(|j| if i == j { 1.0 - rate } else { off }).collect()).collect())
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// Smallest diagonal entry.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Inverse-CDF draw from row `T[true_class]`. Zero entries are never drawn.
pub fn sample_noisy_label<R: Rng + ?Sized>(true_class: usize, t: &TransitionMatrix, rng: &mut R) -> usize {
    let row = t.row(true_class);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (k, &p) in row.iter().enumerate() {
        cum += p;
        if u < cum {
            return k;
        }
    }
    // u landed in the rounding gap above the last partial sum
    row.iter().rposition(|&p| p > 0.0).expect("rows have positive mass")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub standard_error: f64,
    /// `lhs ≤ rhs + 3·standard_error`.
    pub holds: bool,
    pub samples: usize,
}

impl BoundReport {
    pub fn new(lhs: f64, rhs: f64, standard_error: f64, samples: usize) -> Self {
        BoundReport { lhs, rhs, standard_error, holds: lhs <= rhs + 3.0 * standard_error, samples }
    }
}

/// Outcome of a pointwise inequality evaluated on every sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PerSampleCheck {
    pub checked: usize,
    pub violations: usize,
}

impl PerSampleCheck {
    pub fn record(&mut self, ok: bool) {
        self.checked += 1;
        self.violations += usize::from(!ok);
    }

    pub fn all_hold(&self) -> bool {
        self.violations == 0
    }
}

/// The exact rational value of a finite float.
pub(crate) fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite value")
}

pub(crate) fn exact_one() -> BigRational {
    BigRational::from_integer(BigInt::from(1))
}

/// Mean and standard error of the mean (zero for fewer than two values).
pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
