//! Source pretraining, the EMA mean-teacher adaptation loop, and mAP
//! evaluation.
//!
//! Every optimisation step goes through [`image_objective`], which evaluates
//! the classification, prior-alignment and box losses of one image and
//! returns their gradient over the detector parameters. Batches average it
//! over images.

mod eval;
mod objective;
mod train;

pub use eval::{average_precision, evaluate_map, ClassAp, MapReport, EVAL_SCORE_FLOOR};
pub use objective::{image_objective, ClsLoss, ImageLoss, LossParts};
pub use train::{
    adapt, make_pseudo_labels, mask_filter, pretrain_source, AdaptOutcome, AdaptRecord, AdaptStep, PretrainRecord,
    PreparedPrior,
};

use crate::detector::DetectorParams;
use crate::losses::{IrplConfig, SparConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_source: f64,
    pub lr_adapt: f64,
    pub batch: usize,
    pub ema_delta: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub steps_source: usize,
    pub steps_adapt: usize,
    pub seed: u64,
    pub bg_sample_count: usize,
    /// Apply the EMA once per pass over the target set instead of per step.
    pub ema_per_epoch: bool,
    /// Probability of flipping each prior-mask pixel before adaptation.
    pub noisy_prior: f64,
    /// Also align the channel-mean map with source masks during pretraining.
    pub pretrain_spar: bool,
    pub irpl: IrplConfig,
    pub spar: SparConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_source: 0.04,
            lr_adapt: 0.0025,
            batch: 4,
            ema_delta: 0.9996,
            score_threshold: 0.8,
            nms_iou: 0.5,
            steps_source: 2000,
            steps_adapt: 2000,
            seed: 0,
            bg_sample_count: 16,
            ema_per_epoch: false,
            noisy_prior: 0.0,
            pretrain_spar: false,
            irpl: IrplConfig::default(),
            spar: SparConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.lr_source > 0.0 && self.lr_adapt > 0.0) || !self.lr_source.is_finite() || !self.lr_adapt.is_finite() {
            return bad("learning rates must be positive");
        }
        // the closed interval admits the two boundary cases used in tests
        if !(0.0..=1.0).contains(&self.ema_delta) {
            return bad("ema_delta must lie in [0, 1]");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("nms_iou must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.noisy_prior) {
            return bad("noisy_prior must lie in [0, 1]");
        }
        if self.score_threshold.is_nan() {
            return bad("score_threshold is NaN");
        }
        self.irpl.validate()?;
        self.spar.validate()
    }
}

/// Which loss paths an adaptation run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationSwitches {
    pub use_spar: bool,
    /// Off means plain cross entropy on the pseudo-labels.
    pub use_irpl: bool,
    pub use_peak_adjust: bool,
    pub use_fgbg_weighting: bool,
    pub use_kl: bool,
    /// Prior masks only filter pseudo-labels; SPAR must be off.
    pub mask_filter_only: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches::full()
    }
}

impl AblationSwitches {
    pub const fn full() -> Self {
        AblationSwitches {
            use_spar: true,
            use_irpl: true,
            use_peak_adjust: true,
            use_fgbg_weighting: true,
            use_kl: true,
            mask_filter_only: false,
        }
    }

    /// Mean teacher with plain cross entropy.
    pub const fn baseline() -> Self {
        AblationSwitches {
            use_spar: false,
            use_irpl: false,
            use_peak_adjust: false,
            use_fgbg_weighting: false,
            use_kl: false,
            mask_filter_only: false,
        }
    }

    pub const fn spar_only() -> Self {
        AblationSwitches { use_spar: true, ..AblationSwitches::baseline() }
    }

    pub const fn irpl_only() -> Self {
        AblationSwitches { use_spar: false, ..AblationSwitches::full() }
    }

    pub const fn mask_filter() -> Self {
        AblationSwitches { mask_filter_only: true, ..AblationSwitches::baseline() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask_filter_only && self.use_spar {
            return Err(Error::InvalidConfig("mask_filter_only requires SPAR to be off".into()));
        }
        Ok(())
    }

    /// The classification loss these switches select.
    pub fn cls_loss(&self, base: &IrplConfig) -> ClsLoss {
        if !self.use_irpl {
            return ClsLoss::CrossEntropy;
        }
        let mut cfg = *base;
        cfg.peak_adjust = self.use_peak_adjust;
        if !self.use_fgbg_weighting {
            cfg.w_fg = 1.0;
            cfg.w_bg = 1.0;
        }
        if !self.use_kl {
            cfg.gamma = 0.0;
        }
        ClsLoss::Irpl(cfg)
    }
}

/// `delta·teacher + (1 − delta)·student`, element-wise.
pub fn ema_update(teacher: &DetectorParams, student: &DetectorParams, delta: f64) -> Result<DetectorParams> {
    let mut out = teacher.clone();
    ema_update_in_place(out.as_mut_slice(), student.as_slice(), delta)?;
    Ok(out)
}

/// Slice form of [`ema_update`], usable on any parameter vector.
pub fn ema_update_in_place(teacher: &mut [f64], student: &[f64], delta: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![teacher.len()],
            actual: vec![student.len()],
        });
    }
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = delta * *t + (1.0 - delta) * s;
    }
    Ok(())
}
