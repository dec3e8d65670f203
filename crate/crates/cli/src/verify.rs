//! The `verify-bounds` report: all four verifiers on toy problems plus the
//! list of hard checks that decide the exit code.

use crate::config::ExperimentConfig;
use anyhow::Result;
use falcon_lab::bounds::{
    empirical_theorem2_check, verify_lemma1, verify_lemma2, verify_theorem1, BoundReport, BoxNoise, DetectionSample,
    GaussianBlobs, Lemma1Report, LinearSoftmax, Theorem1Report, Theorem2Empirical, Theorem2Task, TransitionMatrix,
};
use falcon_lab::rng::derived_rng;
use serde::Serialize;
use std::path::PathBuf;

pub const BOUNDS_REPORT: &str = "bounds.json";

/// Blob layout of the classification toy problems.
const BLOB_RADIUS: f64 = 2.0;
const BLOB_SIGMA: f64 = 0.8;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundsReport {
    pub transition: TransitionMatrix,
    /// Set when the classification bound was evaluated with a λ other than
    /// the one of `transition`.
    pub claimed_lambda: Option<f64>,
    pub lemma1: Lemma1Report,
    pub lemma2: falcon_lab::bounds::Lemma2Report,
    pub theorem1: Theorem1Report,
    pub theorem2: Theorem2Empirical,
    pub checks: Vec<Check>,
    pub all_passed: bool,
}

/// Re-evaluates the classification bound with `lambda` in place of the true
/// one. The standard error is carried over unchanged.
fn with_lambda(mut r: Lemma1Report, lambda: f64) -> Lemma1Report {
    let b = r.bound;
    r.lambda = lambda;
    r.bound = BoundReport::new(b.lhs, r.noisy_risk / lambda, b.standard_error, b.samples);
    r
}

pub fn verify_bounds(cfg: &ExperimentConfig) -> Result<BoundsReport> {
    let b = &cfg.bounds;
    let seed = cfg.train.seed;
    let k = b.num_classes;
    let t = TransitionMatrix::symmetric(k, b.noise_rate)?;
    let blobs = GaussianBlobs::on_circle(k, BLOB_RADIUS, BLOB_SIGMA)?;
    let clf = LinearSoftmax::random(k, 1.0, &mut derived_rng(seed, 3));
    let classify = |x: &[f64; 2]| clf.probs(x);
    let boxes = BoxNoise::default();

    let mut lemma1 = verify_lemma1(classify, |rng| blobs.sample(rng), &t, b.samples, seed)?;
    let lemma2 = verify_lemma2(&boxes.triples(b.samples, seed), b.tau)?;
    let sample = |rng: &mut _| {
        let (x, class) = blobs.sample(rng);
        DetectionSample { x, class, boxes: boxes.sample(rng) }
    };
    let mut theorem1 = verify_theorem1(classify, sample, &t, b.tau, b.samples, seed)?;
    if let Some(lambda) = b.claimed_lambda {
        lemma1 = with_lambda(lemma1, lambda);
        theorem1 = Theorem1Report::compose(with_lambda(theorem1.classification, lambda), theorem1.regression);
    }

    let task = Theorem2Task { blobs: GaussianBlobs::on_circle(k, BLOB_RADIUS, 0.6)?, pairs: b.pairs, ..Theorem2Task::default() };
    let theorem2 = empirical_theorem2_check(&t, &task, seed)?;

    let mut checks = vec![
        Check { name: "lemma1.bound", passed: lemma1.bound.holds },
        Check { name: "lemma1.per_sample", passed: lemma1.per_sample.all_hold() },
        Check { name: "lemma2.bound", passed: lemma2.bound.holds },
        Check { name: "lemma2.per_sample", passed: lemma2.per_sample.all_hold() },
        Check {
            name: "lemma2.stats_in_range",
            passed: lemma2.stats.eta_reg <= 2.0 && (0.0..=1.0).contains(&lemma2.stats.zeta),
        },
        Check { name: "theorem1.bound", passed: theorem1.bound.holds },
        Check { name: "theorem1.per_sample", passed: theorem1.classification.per_sample.all_hold() && theorem1.regression.per_sample.all_hold() },
        Check { name: "theorem2.delta_decreasing", passed: delta_decreasing(&theorem2) },
    ];
    if t.lambda() < 1.0 {
        checks.push(Check { name: "theorem2.additive_below_multiplicative", passed: theorem2.additive_below_multiplicative });
    }
    let all_passed = checks.iter().all(|c| c.passed);
    Ok(BoundsReport { transition: t, claimed_lambda: b.claimed_lambda, lemma1, lemma2, theorem1, theorem2, checks, all_passed })
}

/// δ strictly decreases as the radius shrinks.
fn delta_decreasing(r: &Theorem2Empirical) -> bool {
    let mut terms: Vec<_> = r.terms.iter().collect();
    terms.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    terms.windows(2).all(|w| w[1].delta < w[0].delta)
}

/// Runs the verifiers and writes `bounds.json`.
pub fn write_bounds_report(cfg: &ExperimentConfig) -> Result<(BoundsReport, PathBuf)> {
    let report = verify_bounds(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(BOUNDS_REPORT);
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(&path, json)?;
    Ok((report, path))
}
