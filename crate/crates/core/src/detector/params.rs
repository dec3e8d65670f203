use super::{CLS_HEAD, CONV1, CONV2, REG_HEAD};
use crate::numerics::Conv2d;
use crate::rng::rng_from;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FALCONCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// All learnable weights as one flat vector.
///
/// Ordering (fixed, also written into checkpoint headers):
///
/// | block        | shape          | length |
/// |--------------|----------------|--------|
/// | conv1.weight | [3, 3, 1, 8]   | 72     |
/// | conv1.bias   | [8]            | 8      |
/// | conv2.weight | [3, 3, 8, 16]  | 1152   |
/// | conv2.bias   | [16]           | 16     |
/// | cls.weight   | [1, 1, 16, 4]  | 64     |
/// | cls.bias     | [4]            | 4      |
/// | reg.weight   | [1, 1, 16, 4]  | 64     |
/// | reg.bias     | [4]            | 4      |
///
/// Convolution weights are `[ky][kx][c_in][c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    values: Vec<f64>,
}

const LAYERS: [(&str, Conv2d); 4] = [("conv1", CONV1), ("conv2", CONV2), ("cls", CLS_HEAD), ("reg", REG_HEAD)];

const fn offset_of(layer: usize) -> usize {
    let mut total = 0;
    let mut i = 0;
    while i < layer {
        total += LAYERS[i].1.param_len();
        i += 1;
    }
    total
}

impl DetectorParams {
    pub const LEN: usize = offset_of(4);

    pub fn zeros() -> Self {
        DetectorParams { values: vec![0.0; Self::LEN] }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let mut params = Self::zeros();
        for (i, (_, conv)) in LAYERS.iter().enumerate() {
            let fan_in = conv.kernel * conv.kernel * conv.in_channels;
            let fan_out = conv.kernel * conv.kernel * conv.out_channels;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let start = offset_of(i);
            for w in &mut params.values[start..start + conv.weight_len()] {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.len() != Self::LEN {
            return Err(Error::ShapeMismatch { expected: vec![Self::LEN], actual: vec![values.len()] });
        }
        Ok(DetectorParams { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `(weight, bias)` slices of layer `i` in [`LAYERS`] order.
    pub(crate) fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let conv = LAYERS[i].1;
        let start = offset_of(i);
        let (w, rest) = self.values[start..].split_at(conv.weight_len());
        (w, &rest[..conv.out_channels])
    }

    pub fn blocks() -> Vec<ParamBlock> {
        let mut out = Vec::new();
        for (i, (name, conv)) in LAYERS.iter().enumerate() {
            let start = offset_of(i);
            out.push(ParamBlock {
                name: format!("{name}.weight"),
                shape: vec![conv.kernel, conv.kernel, conv.in_channels, conv.out_channels],
                offset: start,
            });
            out.push(ParamBlock {
                name: format!("{name}.bias"),
                shape: vec![conv.out_channels],
                offset: start + conv.weight_len(),
            });
        }
        out
    }

    /// Magic, version byte, little-endian u32 header length, JSON header,
    /// then every parameter as little-endian f64.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader { num_params: Self::LEN, blocks: Self::blocks() })?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&[CHECKPOINT_VERSION])?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut version = [0u8; 1];
        input.read_exact(&mut version)?;
        if version[0] != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", version[0])));
        }
        let mut len = [0u8; 4];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.num_params != Self::LEN || header.blocks != Self::blocks() {
            return Err(Error::Checkpoint("parameter layout does not match this detector".into()));
        }
        let mut values = Vec::with_capacity(Self::LEN);
        let mut buf = [0u8; 8];
        for _ in 0..Self::LEN {
            input.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let params = DetectorParams { values };
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_checkpoint(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    num_params: usize,
    blocks: Vec<ParamBlock>,
}
