//! Spatial prior alignment: mean ℓ1 plus Dice between the student's
//! activation map `A_S` and a binary foreground prior `A_G`.
//!
//! ```text
//! L = λ1/(H'W') Σ |A_S − A_G| + λ2 (1 − 2 Σ A_S A_G / (Σ A_S + Σ A_G + ε))
//! ```

use super::regression::sign;
use crate::numerics::Tensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
}

impl Default for SparConfig {
    fn default() -> Self {
        SparConfig {
            lambda1: 1.0,
            lambda2: 2.0,
            epsilon: 1e-7,
        }
    }
}

impl SparConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig("SPAR weights must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("SPAR epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparOutput {
    pub loss: f64,
    pub l1: f64,
    pub dice: f64,
    pub grad: Tensor,
}

pub fn spar_loss(student_map: &Tensor, prior_mask: &Tensor, cfg: &SparConfig) -> Result<SparOutput> {
    cfg.validate()?;
    prior_mask.expect_shape(student_map.shape())?;
    let n = student_map.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty activation map".into()));
    }
    let (s, g) = (student_map.data(), prior_mask.data());

    let mut abs_sum = 0.0;
    let (mut inter, mut sum_s, mut sum_g) = (0.0, 0.0, 0.0);
    for (&a, &b) in s.iter().zip(g) {
        abs_sum += (a - b).abs();
        inter += a * b;
        sum_s += a;
        sum_g += b;
    }
    let denom = sum_s + sum_g + cfg.epsilon;
    let l1 = cfg.lambda1 * abs_sum / n as f64;
    // (S + G − 2I + ε)/D avoids cancellation near a perfect match
    let dice = cfg.lambda2 * ((sum_s + sum_g - 2.0 * inter) + cfg.epsilon) / denom;

    // d/dA_S[j] of the Dice ratio 2I/D is 2 G_j / D − 2 I / D².
    let l1_scale = cfg.lambda1 / n as f64;
    let ratio_shift = 2.0 * inter / (denom * denom);
    let grad = s
        .iter()
        .zip(g)
        .map(|(&a, &b)| l1_scale * sign(a - b) - cfg.lambda2 * (2.0 * b / denom - ratio_shift))
        .collect();

    Ok(SparOutput {
        loss: l1 + dice,
        l1,
        dice,
        grad: Tensor::from_vec(student_map.shape(), grad)?,
    })
}
