//! Terms of the additive classification bound `2δ + 2wδ/a`.
//!
//! With instance-independent noise `η_{x,k} = T[c][k]`, so
//! `η_c = Σ_{k≠c} T[c][k]`, `w = Σ_c π_c (1 − η_c)` and
//! `a = min_{c, k≠c} (1 − η_c − T[c][k])` are exact functions of `T` and the
//! class prior `π`. `δ` has no closed form; it is the largest observed
//! `|Σ_k L(u1,k) − Σ_k L(u2,k)|` over sampled probability-vector pairs
//! within distance `ε`.

use super::toy::{GaussianBlobs, LinearSoftmax};
use super::{exact, exact_one, sample_noisy_label, TransitionMatrix};
use crate::losses::{ce_loss, irpl_loss, BoxLossTerm, IrplConfig};
use crate::numerics::softmax_backward;
use crate::rng::{derived_rng, mix};
use crate::{Error, Result};
use num_rational::BigRational;
use num_traits::ToPrimitive;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Probe radii reported together.
pub const EPSILON_GRID: [f64; 3] = [0.1, 0.05, 0.01];
/// Lower limit on sampled pairs per radius.
pub const MIN_PROBE_PAIRS: usize = 10_000;
const MAX_ATTEMPTS_PER_PAIR: usize = 1000;
const TAG_PROBE: u64 = 0x7072_6f62;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Theorem2Terms {
    pub delta: f64,
    pub w: f64,
    pub a: f64,
    pub epsilon: f64,
    /// `2δ + 2wδ/a`.
    pub additive_bound: f64,
    /// `1/λ`, the factor of the multiplicative bound.
    pub multiplicative_factor: f64,
}

fn exact_to_f64(v: &BigRational) -> f64 {
    v.to_f64().expect("bounded rational")
}

/// `(w, a)` from `T` and the class prior, evaluated exactly on the stored
/// entries and rounded once.
pub fn noise_margins(t: &TransitionMatrix, priors: &[f64]) -> Result<(f64, f64)> {
    let n = t.size();
    if n < 2 {
        return Err(Error::InvalidConfig("the additive bound needs at least two classes".into()));
    }
    if priors.len() != n || priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidConfig("class prior must be a non-negative vector over all classes".into()));
    }
    if (priors.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidConfig("class prior must sum to 1".into()));
    }
    let one = exact_one();
    let rows: Vec<Vec<BigRational>> = t.rows().iter().map(|r| r.iter().map(|&v| exact(v)).collect()).collect();
    let eta: Vec<BigRational> = rows
        .iter()
        .enumerate()
        .map(|(c, r)| r.iter().enumerate().filter(|&(k, _)| k != c).map(|(_, v)| v.clone()).sum())
        .collect();
    let w: BigRational = priors.iter().zip(&eta).map(|(&p, e)| exact(p) * (&one - e)).sum();
    let a = (0..n)
        .flat_map(|c| (0..n).filter(move |&k| k != c).map(move |k| (c, k)))
        .map(|(c, k)| &one - &eta[c] - &rows[c][k])
        .min()
        .expect("at least two classes");
    let a = exact_to_f64(&a);
    if !(a > 0.0) {
        return Err(Error::NonPositiveMinMargin(a));
    }
    Ok((exact_to_f64(&w), a))
}

/// `L(u, k)` for one box: the robust pseudo-label loss of a single
/// prediction `u` labelled `k`, with the last entry as background.
pub fn irpl_probe_loss(cfg: IrplConfig) -> impl Fn(&[f64], usize) -> f64 {
    move |u, k| {
        let term = BoxLossTerm { probs: u.to_vec(), pseudo_class: k };
        irpl_loss(&[term], &cfg, u.len() - 1).expect("valid probe").loss
    }
}

fn class_sum(loss: &dyn Fn(&[f64], usize) -> f64, u: &[f64]) -> f64 {
    (0..u.len()).map(|k| loss(u, k)).sum()
}

fn check_probes(probe_points: &[Vec<f64>]) -> Result<usize> {
    let dim = probe_points.first().map(Vec::len).unwrap_or(0);
    if dim < 2 {
        return Err(Error::InvalidConfig("need probe vectors with at least two entries".into()));
    }
    for u in probe_points {
        if u.len() != dim {
            return Err(Error::ShapeMismatch { expected: vec![dim], actual: vec![u.len()] });
        }
        if u.iter().any(|p| !(p.is_finite() && *p > 0.0)) || (u.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("probe points must be strictly positive probability vectors".into()));
        }
    }
    Ok(dim)
}

/// Measured `δ(ε)` for each radius. For every radius, `pairs` pairs are
/// drawn: `u1` from the probes and `u2 = u1 + r·d` with `d` a random unit
/// direction along the simplex, `r` uniform on `(0, ε]`, and `u2` strictly
/// inside the simplex. `δ(ε)` is the maximum over all drawn pairs, from any
/// radius, whose distance is at most `ε`, so it can only grow with `ε`.
pub fn measure_delta(
    loss: &dyn Fn(&[f64], usize) -> f64,
    probe_points: &[Vec<f64>],
    epsilons: &[f64],
    pairs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let dim = check_probes(probe_points)?;
    if epsilons.is_empty() || epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::InvalidConfig("probe radii must be positive".into()));
    }
    if pairs == 0 {
        return Err(Error::InvalidConfig("need at least one probe pair".into()));
    }
    let base: Vec<f64> = probe_points.iter().map(|u| class_sum(loss, u)).collect();

    // (distance, |ΔΣL|) for every accepted pair
    let mut observed = Vec::with_capacity(pairs * epsilons.len());
    for (i, &eps) in epsilons.iter().enumerate() {
        let mut rng = derived_rng(mix(seed, TAG_PROBE), i as u64);
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < pairs {
            attempts += 1;
            if attempts > pairs * MAX_ATTEMPTS_PER_PAIR {
                return Err(Error::InvalidConfig(format!("could not place probe pairs at radius {eps}")));
            }
            let j = rng.random_range(0..probe_points.len());
            let u1 = &probe_points[j];
            let mut d: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let mean = d.iter().sum::<f64>() / dim as f64;
            d.iter_mut().for_each(|v| *v -= mean);
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            // 1 − U lies in (0, 1]
            let r = eps * (1.0 - rng.random::<f64>());
            let u2: Vec<f64> = u1.iter().zip(&d).map(|(p, v)| p + r * v / norm).collect();
            if u2.iter().any(|p| !(*p > 0.0)) {
                continue;
            }
            let dist = u1.iter().zip(&u2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist > eps {
                continue;
            }
            observed.push((dist, (base[j] - class_sum(loss, &u2)).abs()));
            accepted += 1;
        }
    }
    Ok(epsilons
        .iter()
        .map(|&eps| observed.iter().filter(|(d, _)| *d <= eps).map(|(_, v)| *v).fold(0.0, f64::max))
        .collect())
}

/// The terms at every radius in `epsilons`, sharing one pool of probe pairs.
pub fn compute_theorem2_terms(
    loss: &dyn Fn(&[f64], usize) -> f64,
    t: &TransitionMatrix,
    priors: &[f64],
    probe_points: &[Vec<f64>],
    epsilons: &[f64],
    pairs: usize,
    seed: u64,
) -> Result<Vec<Theorem2Terms>> {
    if pairs < MIN_PROBE_PAIRS {
        return Err(Error::InvalidConfig(format!("need at least {MIN_PROBE_PAIRS} probe pairs per radius")));
    }
    let (w, a) = noise_margins(t, priors)?;
    let deltas = measure_delta(loss, probe_points, epsilons, pairs, seed)?;
    Ok(epsilons
        .iter()
        .zip(deltas)
        .map(|(&epsilon, delta)| Theorem2Terms {
            delta,
            w,
            a,
            epsilon,
            additive_bound: 2.0 * delta + 2.0 * w * delta / a,
            multiplicative_factor: 1.0 / t.lambda(),
        })
        .collect())
}

/// A small noisy classification problem: Gaussian blobs, a linear softmax
/// classifier trained by full-batch gradient descent on the per-sample
/// robust loss against labels passed through `T`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem2Task {
    pub blobs: GaussianBlobs,
    pub train_size: usize,
    pub test_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// The blobs have no background class, so both class weights are 1.
    pub irpl: IrplConfig,
    pub pairs: usize,
    pub epsilons: Vec<f64>,
}

impl Default for Theorem2Task {
    fn default() -> Self {
        Theorem2Task {
            blobs: GaussianBlobs::on_circle(3, 2.0, 0.6).expect("valid blobs"),
            train_size: 2000,
            test_size: 2000,
            steps: 500,
            lr: 1.0,
            irpl: IrplConfig { w_fg: 1.0, w_bg: 1.0, ..IrplConfig::default() },
            pairs: MIN_PROBE_PAIRS,
            epsilons: EPSILON_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem2Empirical {
    pub lambda: f64,
    /// Held-out cross-entropy against clean labels.
    pub clean_risk: f64,
    /// Held-out 0-1 error against clean labels.
    pub clean_error: f64,
    /// Held-out cross-entropy against labels passed through `T`.
    pub noisy_risk: f64,
    /// `(1/λ)·noisy_risk`.
    pub multiplicative_bound: f64,
    /// One row per probe radius.
    pub terms: Vec<Theorem2Terms>,
    /// `2δ + 2wδ/a` at the smallest radius.
    pub additive_bound: f64,
    pub additive_below_multiplicative: bool,
    pub final_train_loss: f64,
    pub classifier: LinearSoftmax,
}

pub fn empirical_theorem2_check(t: &TransitionMatrix, task: &Theorem2Task, seed: u64) -> Result<Theorem2Empirical> {
    let k = task.blobs.num_classes();
    if t.size() != k {
        return Err(Error::ShapeMismatch { expected: vec![k, k], actual: vec![t.size(), t.size()] });
    }
    if task.train_size == 0 || task.test_size == 0 || !(task.lr > 0.0) {
        return Err(Error::InvalidConfig("task needs samples and a positive learning rate".into()));
    }
    task.irpl.validate()?;
    let mut data_rng = derived_rng(seed, 0);
    let mut noise_rng = derived_rng(seed, 1);
    let train: Vec<([f64; 2], usize)> = (0..task.train_size)
        .map(|_| {
            let (x, c) = task.blobs.sample(&mut data_rng);
            (x, sample_noisy_label(c, t, &mut noise_rng))
        })
        .collect();
    let test: Vec<([f64; 2], usize, usize)> = (0..task.test_size)
        .map(|_| {
            let (x, c) = task.blobs.sample(&mut data_rng);
            (x, c, sample_noisy_label(c, t, &mut noise_rng))
        })
        .collect();

    let mut clf = LinearSoftmax::zeros(k);
    let mut trace = Vec::with_capacity(task.steps);
    let mut final_train_loss = f64::NAN;
    for step in 0..=task.steps {
        let mut grad = vec![[0.0; 3]; k];
        let mut total = 0.0;
        for (x, label) in &train {
            let p = clf.probs(x);
            let out = irpl_loss(&[BoxLossTerm { probs: p.clone(), pseudo_class: *label }], &task.irpl, k - 1)?;
            total += out.loss;
            let dz = softmax_backward(&p, &out.grads[0]);
            for (g, dzk) in grad.iter_mut().zip(&dz) {
                g[0] += dzk * x[0];
                g[1] += dzk * x[1];
                g[2] += dzk;
            }
        }
        let mean_loss = total / train.len() as f64;
        trace.push(mean_loss);
        if !mean_loss.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
            let tail = trace[trace.len().saturating_sub(8)..].to_vec();
            return Err(Error::Diverged { step, trace: tail });
        }
        final_train_loss = mean_loss;
        if step == task.steps {
            break;
        }
        let scale = task.lr / train.len() as f64;
        for (w, g) in clf.weights.iter_mut().zip(&grad) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= scale * gi;
            }
        }
    }

    let (mut clean, mut noisy, mut wrong) = (0.0, 0.0, 0usize);
    let mut probes = Vec::with_capacity(test.len());
    for (x, c, noisy_label) in &test {
        let p = clf.probs(x);
        clean += ce_loss(&p, *c).loss;
        noisy += ce_loss(&p, *noisy_label).loss;
        wrong += usize::from(crate::losses::peak_argmax(&p) != *c);
        // a probe needs every entry strictly positive
        if p.iter().all(|v| *v > 0.0) {
            probes.push(p);
        }
    }
    let n = test.len() as f64;
    let (clean_risk, noisy_risk) = (clean / n, noisy / n);
    let loss = irpl_probe_loss(task.irpl);
    let terms = compute_theorem2_terms(&loss, t, &task.blobs.priors(), &probes, &task.epsilons, task.pairs, seed)?;
    let smallest = terms
        .iter()
        .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
        .expect("non-empty radius grid");
    let multiplicative_bound = noisy_risk / t.lambda();
    Ok(Theorem2Empirical {
        lambda: t.lambda(),
        clean_risk,
        clean_error: wrong as f64 / n,
        noisy_risk,
        multiplicative_bound,
        additive_bound: smallest.additive_bound,
        additive_below_multiplicative: smallest.additive_bound < multiplicative_bound,
        terms,
        final_train_loss,
        classifier: clf,
    })
}
