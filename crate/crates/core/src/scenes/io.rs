//! On-disk dataset layout:
//!
//! ```text
//! <root>/{source,target}/{train,val}/img_00000.pgm
//!                                    mask_00000.pgm
//!                                    ann_00000.json
//! ```
//!
//! Images and masks are 8-bit binary PGM; annotations are JSON with
//! unit-square corner boxes.

use super::{generate_scene, Annotation, DomainShift, Scene, SceneSpec};
use crate::detector::BBox;
use crate::numerics::Tensor;
use crate::rng::mix;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub fn split_dir(root: &Path, domain: Domain, split: Split) -> PathBuf {
    root.join(domain.name()).join(split.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub source_spec: SceneSpec,
    pub target_spec: SceneSpec,
    pub shift: DomainShift,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            source_train: 200,
            source_val: 50,
            target_train: 200,
            target_val: 50,
            source_spec: SceneSpec::source(),
            target_spec: SceneSpec::target(),
            shift: DomainShift::default(),
        }
    }
}

impl DatasetConfig {
    fn count(&self, domain: Domain, split: Split) -> usize {
        match (domain, split) {
            (Domain::Source, Split::Train) => self.source_train,
            (Domain::Source, Split::Val) => self.source_val,
            (Domain::Target, Split::Train) => self.target_train,
            (Domain::Target, Split::Val) => self.target_val,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rounds image and mask to the 8-bit grid used on disk so in-memory and
/// reloaded datasets are identical.
pub fn quantize_scene(scene: &Scene) -> Scene {
    Scene {
        image: scene.image.map(quantize),
        annotations: scene.annotations.clone(),
        fg_mask: scene.fg_mask.map(quantize),
    }
}

/// Generates one split in memory (quantized). Each scene's seed mixes the
/// base seed, the split and the scene index, so any subset can be
/// regenerated independently.
pub fn generate_split(cfg: &DatasetConfig, domain: Domain, split: Split) -> Result<Vec<Scene>> {
    let tag = match (domain, split) {
        (Domain::Source, Split::Train) => 0,
        (Domain::Source, Split::Val) => 1,
        (Domain::Target, Split::Train) => 2,
        (Domain::Target, Split::Val) => 3,
    };
    let split_seed = mix(cfg.seed, tag);
    let (spec, shift) = match domain {
        Domain::Source => (&cfg.source_spec, None),
        Domain::Target => (&cfg.target_spec, Some(&cfg.shift)),
    };
    (0..cfg.count(domain, split))
        .map(|i| generate_scene(mix(split_seed, i as u64), spec, shift).map(|s| quantize_scene(&s)))
        .collect()
}

pub fn generate_dataset(root: &Path, cfg: &DatasetConfig) -> Result<()> {
    for domain in [Domain::Source, Domain::Target] {
        for split in [Split::Train, Split::Val] {
            let scenes = generate_split(cfg, domain, split)?;
            write_split(&split_dir(root, domain, split), &scenes)?;
        }
    }
    Ok(())
}

pub fn write_split(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, scene) in scenes.iter().enumerate() {
        write_pgm(&dir.join(format!("img_{i:05}.pgm")), &scene.image)?;
        write_pgm(&dir.join(format!("mask_{i:05}.pgm")), &scene.fg_mask)?;
        let ann = AnnotationFile {
            boxes: scene.annotations.iter().map(|a| a.bbox.to_array()).collect(),
            classes: scene.annotations.iter().map(|a| a.class).collect(),
        };
        fs::write(dir.join(format!("ann_{i:05}.json")), serde_json::to_vec(&ann)?)?;
    }
    Ok(())
}

/// Loads `img_/mask_/ann_` triples in index order until the first gap.
pub fn load_split(dir: &Path) -> Result<Vec<Scene>> {
    if !dir.is_dir() {
        return Err(Error::dataset(dir, "dataset split directory not found"));
    }
    let mut scenes = Vec::new();
    loop {
        let i = scenes.len();
        let img = dir.join(format!("img_{i:05}.pgm"));
        if !img.exists() {
            break;
        }
        let image = read_pgm(&img)?;
        let fg_mask = read_pgm(&dir.join(format!("mask_{i:05}.pgm")))?;
        let ann_path = dir.join(format!("ann_{i:05}.json"));
        let ann: AnnotationFile = serde_json::from_slice(&fs::read(&ann_path)?)?;
        if ann.boxes.len() != ann.classes.len() {
            return Err(Error::dataset(ann_path, "boxes and classes differ in length"));
        }
        let annotations = ann
            .boxes
            .iter()
            .zip(&ann.classes)
            .map(|(b, &class)| Annotation { bbox: BBox::from_array(*b), class })
            .collect();
        scenes.push(Scene { image, annotations, fg_mask });
    }
    if scenes.is_empty() {
        return Err(Error::dataset(dir, "no scenes found"));
    }
    Ok(scenes)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let &[h, w] = image.shape() else {
        return Err(Error::dataset(path, "PGM images must be rank 2"));
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::dataset(path, m.to_string());
    // header: magic, width, height, maxval separated by single whitespace
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?);
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated PGM data"))?;
    Tensor::from_vec(&[h, w], pixels.iter().map(|&b| f64::from(b) / 255.0).collect())
}
