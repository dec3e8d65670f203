use super::BoxTriple;
use crate::detector::BBox;
use crate::numerics::softmax;
use crate::rng::derived_rng;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Isotropic 2-D Gaussian classes with centers evenly spaced on a circle and
/// uniform class priors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianBlobs {
    pub centers: Vec<[f64; 2]>,
    pub sigma: f64,
}

impl GaussianBlobs {
    pub fn on_circle(num_classes: usize, radius: f64, sigma: f64) -> Result<Self> {
        if num_classes == 0 || !(sigma > 0.0) || !(radius >= 0.0) {
            return Err(Error::InvalidConfig("blobs need classes, radius >= 0 and sigma > 0".into()));
        }
        let centers = (0..num_classes)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / num_classes as f64;
                [radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        Ok(GaussianBlobs { centers, sigma })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn priors(&self) -> Vec<f64> {
        vec![1.0 / self.num_classes() as f64; self.num_classes()]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ([f64; 2], usize) {
        let class = rng.random_range(0..self.num_classes());
        let c = self.centers[class];
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        ([c[0] + self.sigma * dx, c[1] + self.sigma * dy], class)
    }
}

/// Softmax over affine scores `w_k · (x, y, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearSoftmax {
    pub weights: Vec<[f64; 3]>,
}

impl LinearSoftmax {
    pub fn zeros(num_classes: usize) -> Self {
        LinearSoftmax { weights: vec![[0.0; 3]; num_classes] }
    }

    pub fn random<R: Rng + ?Sized>(num_classes: usize, scale: f64, rng: &mut R) -> Self {
        let weights = (0..num_classes)
            .map(|_| std::array::from_fn(|_| scale * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        LinearSoftmax { weights }
    }

    pub fn logits(&self, x: &[f64; 2]) -> Vec<f64> {
        self.weights.iter().map(|w| w[0] * x[0] + w[1] * x[1] + w[2]).collect()
    }

    pub fn probs(&self, x: &[f64; 2]) -> Vec<f64> {
        softmax(&self.logits(x)).expect("at least one class")
    }
}

/// Uniform corners, sorted so that `x0 ≤ x1` and `y0 ≤ y1`.
pub fn random_box<R: Rng + ?Sized>(rng: &mut R) -> BBox {
    let (a, b): (f64, f64) = (rng.random(), rng.random());
    let (c, d): (f64, f64) = (rng.random(), rng.random());
    BBox::new(a.min(b), c.min(d), a.max(b), c.max(d))
}

/// Moves each corner coordinate by up to `amount`, then clamps and re-sorts.
pub fn jitter_box<R: Rng + ?Sized>(b: &BBox, amount: f64, rng: &mut R) -> BBox {
    let a = b.to_array().map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0));
    BBox::new(a[0].min(a[2]), a[1].min(a[3]), a[0].max(a[2]), a[1].max(a[3]))
}

/// How synthetic teacher and student boxes relate to the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoxNoise {
    /// Probability that the teacher emits no box.
    pub miss_rate: f64,
    pub teacher_jitter: f64,
    /// Student boxes are jittered ground truth; `None` draws them uniformly.
    pub student_jitter: Option<f64>,
}

impl Default for BoxNoise {
    fn default() -> Self {
        BoxNoise { miss_rate: 0.1, teacher_jitter: 0.05, student_jitter: Some(0.1) }
    }
}

impl BoxNoise {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BoxTriple {
        let gt = random_box(rng);
        let teacher = if rng.random_bool(self.miss_rate) { None } else { Some(jitter_box(&gt, self.teacher_jitter, rng)) };
        let student = match self.student_jitter {
            Some(j) => jitter_box(&gt, j, rng),
            None => random_box(rng),
        };
        BoxTriple { student, teacher, gt }
    }

    pub fn triples(&self, n: usize, seed: u64) -> Vec<BoxTriple> {
        let mut rng = derived_rng(seed, 2);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}
