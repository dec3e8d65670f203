//! Loss functions with forward values and analytic gradients.
//!
//! Classification losses take per-box probability vectors of length `K + 1`
//! where index `K` (the last) is background.

mod irpl;
mod regression;
mod spar;

pub use irpl::{
    irpl_grad_regime_check, irpl_loss, peak_adjust, peak_argmax, BoxLossTerm, GradRegime,
    IrplConfig, IrplOutput, RegimeCheck,
};
pub use regression::{ce_loss, l1_box_loss, CeOutput, PROB_FLOOR};
pub use spar::{spar_loss, SparConfig, SparOutput};
