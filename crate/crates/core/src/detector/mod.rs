//! Anchor-free grid detector with a hand-written backward pass.
//!
//! ```text
//! image [64,64,1] ─conv3x3/2 d2─ tanh ─conv3x3/2 d4─▶ a [16,16,16]
//!   a ─channel mean─ sigmoid ─▶ A_S [16,16]        (object-focus map)
//!   a ─tanh─ 1x1 ─▶ class logits [16,16,K+1]       (index K = background)
//!   a ─tanh─ 1x1 ─▶ box parameters [16,16,4]
//! ```
//!
//! The dilated kernels give each cell a receptive field of about 21 pixels,
//! enough to see a whole object through fog. The pre-sigmoid channel mean is
//! also added to every foreground logit, so a map that lights up on
//! background raises false foreground scores there.
//!
//! Each grid cell predicts one box: its center is the cell origin plus a
//! sigmoid offset, its width and height are sigmoid fractions of the image.

mod assign;
mod boxes;
mod decode;
mod network;
mod params;

pub use assign::{assign_targets, cell_of, CellTarget};
pub use boxes::{iou, BBox};
pub use decode::{cell_candidates, decode_and_filter, nms, Candidate, Detection};
pub use network::{backward, box_backward, decode_cell_box, forward, ForwardTrace, HeadGradients};
pub use params::{DetectorParams, ParamBlock, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::numerics::Conv2d;
use crate::scenes::{CANVAS, NUM_CLASSES};

pub const GRID: usize = 16;
pub const FEATURE_CHANNELS: usize = 16;
/// Foreground classes plus background.
pub const NUM_OUTPUTS: usize = NUM_CLASSES + 1;
pub const BACKGROUND: usize = NUM_CLASSES;
/// Weight of the pre-sigmoid focus map in each foreground logit.
pub const FG_COUPLING: f64 = 1.0;

pub const CONV1: Conv2d = Conv2d { kernel: 3, stride: 2, pad: 2, dilation: 2, in_channels: 1, out_channels: 8 };
pub const CONV2: Conv2d = Conv2d { kernel: 3, stride: 2, pad: 4, dilation: 4, in_channels: 8, out_channels: FEATURE_CHANNELS };
pub const CLS_HEAD: Conv2d = Conv2d { kernel: 1, stride: 1, pad: 0, dilation: 1, in_channels: FEATURE_CHANNELS, out_channels: NUM_OUTPUTS };
pub const REG_HEAD: Conv2d = Conv2d { kernel: 1, stride: 1, pad: 0, dilation: 1, in_channels: FEATURE_CHANNELS, out_channels: 4 };

const _: () = assert!(CONV2.output_dim(CONV1.output_dim(CANVAS)) == GRID);
