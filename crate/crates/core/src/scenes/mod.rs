//! Procedural detection scenes with exact foreground masks.
//!
//! Source scenes are clean renderings of filled squares, disks and
//! triangles on a dark background. Target scenes are rendered the same way
//! and then pushed through a [`DomainShift`]: low-intensity clutter blobs,
//! a blend toward mid-gray fog and a brightness offset. Clutter is never part
//! of the foreground mask or the annotations.

mod augment;
mod io;
mod prior;

pub use augment::{
    apply_weak, strong_augment, strong_augment_with, weak_augment, AugmentPlan, ERASE_VALUE,
    NOISE_SIGMA,
};
pub use io::{
    generate_dataset, generate_split, load_split, quantize_scene, read_pgm, split_dir, write_pgm,
    write_split, AnnotationFile, DatasetConfig, Domain, Split,
};
pub use prior::{connected_components, flip_prior, pool_prior, Component};

use crate::detector::BBox;
use crate::numerics::Tensor;
use crate::rng::rng_from;
use crate::{Error, Result};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Number of foreground shape classes.
pub const NUM_CLASSES: usize = 3;
/// Class names in index order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["square", "disk", "triangle"];
pub const CANVAS: usize = 64;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square = 0,
    Disk = 1,
    Triangle = 2,
}

impl Shape {
    pub fn from_class(class: usize) -> Option<Shape> {
        match class {
            0 => Some(Shape::Square),
            1 => Some(Shape::Disk),
            2 => Some(Shape::Triangle),
            _ => None,
        }
    }

    /// Pixels covered by the shape with bounding square `(x, y, size)`,
    /// decided by pixel-center inclusion.
    pub fn support(self, x: usize, y: usize, size: usize, canvas: usize) -> Vec<usize> {
        let s = size as f64;
        let mut pixels = Vec::new();
        for row in y..(y + size).min(canvas) {
            for col in x..(x + size).min(canvas) {
                let px = col as f64 + 0.5 - x as f64;
                let py = row as f64 + 0.5 - y as f64;
                let inside = match self {
                    Shape::Square => true,
                    Shape::Disk => {
                        let r = 0.5 * s;
                        (px - r).powi(2) + (py - r).powi(2) <= r * r
                    }
                    // apex at the top center, base along the bottom edge
                    Shape::Triangle => (px - 0.5 * s).abs() <= 0.5 * py,
                };
                if inside {
                    pixels.push(row * canvas + col);
                }
            }
        }
        pixels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Sampling weights over the shape classes (square, disk, triangle).
    pub class_weights: Vec<f64>,
    pub min_size: usize,
    pub max_size: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub background: f64,
    pub max_pair_iou: f64,
}

impl SceneSpec {
    pub fn source() -> Self {
        SceneSpec {
            min_objects: 1,
            max_objects: 5,
            class_weights: vec![1.0; NUM_CLASSES],
            min_size: 8,
            max_size: 24,
            intensity_min: 0.6,
            intensity_max: 1.0,
            background: 0.1,
            max_pair_iou: 0.3,
        }
    }

    /// Same geometry as the source, with triangles drawn only 10% of the time.
    pub fn target() -> Self {
        SceneSpec {
            class_weights: vec![0.45, 0.45, 0.1],
            ..SceneSpec::source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scene spec: {m}")));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range");
        }
        if self.class_weights.len() != NUM_CLASSES
            || self.class_weights.iter().any(|w| !(*w >= 0.0))
            || self.class_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("class weights");
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > CANVAS {
            return bad("object size range");
        }
        if !(0.0..=1.0).contains(&self.intensity_min)
            || !(0.0..=1.0).contains(&self.intensity_max)
            || self.intensity_min > self.intensity_max
            || !(0.0..=1.0).contains(&self.background)
        {
            return bad("intensities must lie in [0, 1]");
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::source()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    /// Blend weight toward constant 0.5 gray.
    pub fog_alpha: f64,
    pub clutter_count: usize,
    pub clutter_intensity: (f64, f64),
    /// Clutter disk diameter range in pixels, inclusive.
    pub clutter_size: (usize, usize),
    pub brightness_offset: f64,
}

impl DomainShift {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("domain shift: {m}")));
        if !(0.0..=1.0).contains(&self.fog_alpha) {
            return bad("fog_alpha must lie in [0, 1]");
        }
        let (lo, hi) = self.clutter_intensity;
        if !((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi) {
            return bad("clutter intensities must be an ordered range in [0, 1]");
        }
        let (smin, smax) = self.clutter_size;
        if smin == 0 || smin > smax || smax > CANVAS {
            return bad("clutter size range");
        }
        if !self.brightness_offset.is_finite() {
            return bad("brightness offset must be finite");
        }
        Ok(())
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            fog_alpha: 0.5,
            clutter_count: 8,
            clutter_intensity: (0.2, 0.4),
            clutter_size: (3, 8),
            brightness_offset: -0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[64, 64]`, values in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
    /// `[64, 64]` binary foreground mask.
    pub fg_mask: Tensor,
}

impl Scene {
    pub fn flipped(&self) -> Scene {
        Scene {
            image: flip_columns(&self.image),
            annotations: self
                .annotations
                .iter()
                .map(|a| Annotation {
                    bbox: a.bbox.flipped_horizontally(),
                    class: a.class,
                })
                .collect(),
            fg_mask: flip_columns(&self.fg_mask),
        }
    }
}

pub(crate) fn flip_columns(t: &Tensor) -> Tensor {
    let &[h, w] = t.shape() else {
        panic!("flip expects a rank-2 tensor");
    };
    let src = t.data();
    let mut out = Vec::with_capacity(h * w);
    for row in src.chunks_exact(w) {
        out.extend(row.iter().rev());
    }
    Tensor::from_vec(&[h, w], out).expect("same shape")
}

/// Tight unit-square bounding box of a set of pixel indices.
pub fn tight_box(pixels: &[usize], canvas: usize) -> BBox {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for &p in pixels {
        let (r, c) = (p / canvas, p % canvas);
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r);
        c1 = c1.max(c);
    }
    let n = canvas as f64;
    BBox::new(c0 as f64 / n, r0 as f64 / n, (c1 + 1) as f64 / n, (r1 + 1) as f64 / n)
}

fn dilate_into(pixels: &[usize], canvas: usize, blocked: &mut [bool]) {
    for &p in pixels {
        let (r, c) = ((p / canvas) as isize, (p % canvas) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < canvas && (cc as usize) < canvas {
                    blocked[rr as usize * canvas + cc as usize] = true;
                }
            }
        }
    }
}

/// Renders one scene. Deterministic in `(seed, spec, shift)`.
///
/// Objects are rejection-sampled so that pairwise box IoU stays at or below
/// `spec.max_pair_iou` and supports never touch (8-neighbourhood), which keeps
/// every object a separate mask component.
pub fn generate_scene(seed: u64, spec: &SceneSpec, shift: Option<&DomainShift>) -> Result<Scene> {
    spec.validate()?;
    if let Some(shift) = shift {
        shift.validate()?;
    }
    let canvas = CANVAS;
    let mut rng = rng_from(seed);
    let classes = WeightedIndex::new(&spec.class_weights)
        .map_err(|e| Error::InvalidConfig(format!("class weights: {e}")))?;

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut image = vec![spec.background; canvas * canvas];
    let mut mask = vec![0.0; canvas * canvas];
    let mut blocked = vec![false; canvas * canvas];
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);

    let mut attempts = 0;
    while annotations.len() < count {
        if attempts == MAX_ATTEMPTS {
            return Err(Error::UnsatisfiableSpec);
        }
        attempts += 1;
        let class = classes.sample(&mut rng);
        let size = rng.random_range(spec.min_size..=spec.max_size);
        let x = rng.random_range(0..=canvas - size);
        let y = rng.random_range(0..=canvas - size);
        let intensity = rng.random_range(spec.intensity_min..=spec.intensity_max);

        let shape = Shape::from_class(class).expect("weighted index within classes");
        let support = shape.support(x, y, size, canvas);
        let bbox = tight_box(&support, canvas);
        if support.iter().any(|&p| blocked[p])
            || annotations
                .iter()
                .any(|a| crate::detector::iou(&a.bbox, &bbox) > spec.max_pair_iou)
        {
            continue;
        }
        for &p in &support {
            image[p] = intensity;
            mask[p] = 1.0;
        }
        dilate_into(&support, canvas, &mut blocked);
        annotations.push(Annotation { bbox, class });
    }

    if let Some(shift) = shift {
        let (lo, hi) = shift.clutter_intensity;
        let (smin, smax) = shift.clutter_size;
        for _ in 0..shift.clutter_count {
            let d = rng.random_range(smin..=smax.min(canvas));
            let x = rng.random_range(0..=canvas - d);
            let y = rng.random_range(0..=canvas - d);
            let value = rng.random_range(lo..=hi);
            for p in Shape::Disk.support(x, y, d, canvas) {
                if mask[p] == 0.0 {
                    image[p] = value;
                }
            }
        }
        for v in &mut image {
            let fogged = (1.0 - shift.fog_alpha) * *v + shift.fog_alpha * 0.5;
            *v = (fogged + shift.brightness_offset).clamp(0.0, 1.0);
        }
    }

    Ok(Scene {
        image: Tensor::from_vec(&[canvas, canvas], image)?,
        annotations,
        fg_mask: Tensor::from_vec(&[canvas, canvas], mask)?,
    })
}
