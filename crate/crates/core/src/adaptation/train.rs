use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use super::{ema_update_in_place, image_objective, AblationSwitches, LossParts, TrainConfig};
use crate::detector::{assign_targets, decode_and_filter, forward, iou, BBox, DetectorParams, Detection, GRID};
use crate::numerics::Tensor;
use crate::rng::{derived_rng, mix};
use crate::scenes::{apply_weak, connected_components, pool_prior, strong_augment_with, AugmentPlan, Scene};
use crate::{Error, Result};

const TAG_PRETRAIN: u64 = 0x5052_4554;
const TAG_ADAPT: u64 = 0x4144_4150;
const TAG_PRIOR: u64 = 0x5052_494f;
const TRACE_LEN: usize = 8;

/// One line of the pretraining metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
}

/// One line of the adaptation metrics stream. `loss_irpl` holds the
/// classification loss in use (cross entropy when IRPL is switched off).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdaptRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_irpl: f64,
    pub loss_spar: f64,
    pub loss_reg: f64,
    pub n_pseudo: usize,
}

/// State handed to the per-step observer of [`adapt`], after the EMA update.
pub struct AdaptStep<'a> {
    pub record: &'a AdaptRecord,
    pub student: &'a DetectorParams,
    pub teacher: &'a DetectorParams,
    /// Images in this batch that had no pseudo-labels.
    pub skipped_images: usize,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    /// Images (summed over steps) whose classification and box terms were
    /// skipped for lack of pseudo-labels.
    pub skipped_images: usize,
}

/// A target image's foreground prior, computed once before adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPrior {
    /// Binary mask at image resolution, used for mask filtering.
    pub mask: Tensor,
    /// Area-pooled onto the detector grid, used by SPAR.
    pub pooled: Tensor,
}

impl PreparedPrior {
    /// Flips each mask pixel with probability `noise` before pooling.
    pub fn new<R: Rng + ?Sized>(mask: &Tensor, noise: f64, rng: &mut R) -> Result<Self> {
        let mut mask = mask.clone();
        if noise > 0.0 {
            for v in mask.data_mut() {
                if rng.random_bool(noise) {
                    *v = 1.0 - *v;
                }
            }
        }
        let pooled = pool_prior(&mask, GRID, GRID)?;
        Ok(PreparedPrior { mask, pooled })
    }

    fn flipped(&self) -> PreparedPrior {
        PreparedPrior {
            mask: crate::scenes::flip_columns(&self.mask),
            pooled: crate::scenes::flip_prior(&self.pooled),
        }
    }
}

/// Epoch-wise shuffled image order: position `p` of the stream is
/// `perm[p / n][p % n]`.
struct BatchStream {
    base: u64,
    n: usize,
    epoch: usize,
    perm: Vec<usize>,
}

impl BatchStream {
    fn new(base: u64, n: usize) -> Self {
        let mut s = BatchStream { base, n, epoch: usize::MAX, perm: Vec::new() };
        s.load(0);
        s
    }

    fn load(&mut self, epoch: usize) {
        if self.epoch != epoch {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut derived_rng(self.base, epoch as u64));
            self.epoch = epoch;
        }
    }

    fn at(&mut self, position: usize) -> usize {
        self.load(position / self.n);
        self.perm[position % self.n]
    }
}

fn check_finite(step: usize, loss: f64, params: &DetectorParams, trace: &mut Vec<f64>) -> Result<()> {
    trace.push(loss);
    if trace.len() > TRACE_LEN {
        trace.remove(0);
    }
    if !loss.is_finite() || !params.all_finite() {
        return Err(Error::Diverged { step, trace: trace.clone() });
    }
    Ok(())
}

fn sgd(params: &mut DetectorParams, grad: &[f64], lr: f64) {
    for (p, g) in params.as_mut_slice().iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Supervised training on labelled source scenes with cross entropy and ℓ1
/// box loss. Each image sees a random weak view.
pub fn pretrain_source(
    cfg: &TrainConfig,
    scenes: &[Scene],
    on_step: &mut dyn FnMut(&PretrainRecord),
) -> Result<DetectorParams> {
    cfg.validate()?;
    let mut params = DetectorParams::init(cfg.seed);
    if cfg.steps_source == 0 {
        return Ok(params);
    }
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("source dataset is empty".into()));
    }
    let base = mix(cfg.seed, TAG_PRETRAIN);
    let mut stream = BatchStream::new(mix(base, 0), scenes.len());
    let cls = super::ClsLoss::CrossEntropy;
    let mut trace = Vec::new();
    for step in 0..cfg.steps_source {
        let mut grad = vec![0.0; DetectorParams::LEN];
        let mut parts = LossParts::default();
        let weight = 1.0 / cfg.batch as f64;
        for slot in 0..cfg.batch {
            let position = step * cfg.batch + slot;
            let scene = &scenes[stream.at(position)];
            let view_seed = mix(mix(base, 1), position as u64);
            let view = apply_weak(scene, &AugmentPlan::sample(view_seed));
            let objects: Vec<(BBox, usize)> = view.annotations.iter().map(|a| (a.bbox, a.class)).collect();
            let targets = assign_targets(&objects, cfg.bg_sample_count, &mut derived_rng(view_seed, 2));
            let prior = if cfg.pretrain_spar { Some(pool_prior(&view.fg_mask, GRID, GRID)?) } else { None };
            let out = image_objective(&params, &view.image, &targets, prior.as_ref().map(|p| (p, &cfg.spar)), &cls)?;
            parts.accumulate(&out.parts, weight);
            for (g, v) in grad.iter_mut().zip(&out.grad) {
                *g += weight * v;
            }
        }
        sgd(&mut params, &grad, cfg.lr_source);
        check_finite(step, parts.total(), &params, &mut trace)?;
        on_step(&PretrainRecord {
            step,
            loss_total: parts.cls + parts.reg,
            loss_cls: parts.cls,
            loss_reg: parts.reg,
        });
    }
    Ok(params)
}

/// Keeps detections whose IoU with the tight box of some prior-mask
/// component they overlap is at least 0.5. A component overlaps a
/// detection when one of its pixel centers lies inside the box.
pub fn mask_filter(detections: Vec<Detection>, mask: &Tensor) -> Vec<Detection> {
    let components = connected_components(mask);
    let w = mask.shape()[1];
    let scale = 1.0 / w as f64;
    detections
        .into_iter()
        .filter(|d| {
            components.iter().any(|c| {
                let overlaps = c.pixels.iter().any(|&p| {
                    let (x, y) = (((p % w) as f64 + 0.5) * scale, ((p / w) as f64 + 0.5) * scale);
                    d.bbox.x0 <= x && x <= d.bbox.x1 && d.bbox.y0 <= y && y <= d.bbox.y1
                });
                overlaps && iou(&d.bbox, &c.bbox) >= 0.5
            })
        })
        .collect()
}

/// Teacher detections on the weak view that pass the confidence threshold,
/// NMS and, in mask-filter mode, the prior-mask IoU test.
pub fn make_pseudo_labels(
    teacher: &DetectorParams,
    weak_view: &Scene,
    prior_mask: &Tensor,
    cfg: &TrainConfig,
    switches: &AblationSwitches,
) -> Vec<Detection> {
    let trace = forward(teacher, &weak_view.image);
    let dets = decode_and_filter(&trace, cfg.score_threshold, cfg.nms_iou);
    if switches.mask_filter_only {
        mask_filter(dets, prior_mask)
    } else {
        dets
    }
}

/// Mean-teacher adaptation on unlabelled target scenes. Annotations of
/// `scenes` are never read; their foreground masks serve as the prior.
pub fn adapt(
    source: &DetectorParams,
    cfg: &TrainConfig,
    switches: &AblationSwitches,
    scenes: &[Scene],
    on_step: &mut dyn FnMut(&AdaptStep<'_>),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    switches.validate()?;
    let mut student = source.clone();
    let mut teacher = source.clone();
    let mut skipped_total = 0;
    if cfg.steps_adapt == 0 {
        return Ok(AdaptOutcome { student, teacher, skipped_images: 0 });
    }
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("target dataset is empty".into()));
    }

    let base = mix(cfg.seed, TAG_ADAPT);
    let prior_base = mix(cfg.seed, TAG_PRIOR);
    let priors = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| PreparedPrior::new(&s.fg_mask, cfg.noisy_prior, &mut derived_rng(prior_base, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let cls = switches.cls_loss(&cfg.irpl);
    let mut stream = BatchStream::new(mix(base, 0), scenes.len());
    let mut trace = Vec::new();

    for step in 0..cfg.steps_adapt {
        let mut grad = vec![0.0; DetectorParams::LEN];
        let mut parts = LossParts::default();
        let mut n_pseudo = 0;
        let mut skipped = 0;
        let weight = 1.0 / cfg.batch as f64;
        for slot in 0..cfg.batch {
            let position = step * cfg.batch + slot;
            let index = stream.at(position);
            let scene = &scenes[index];
            let view_seed = mix(mix(base, 1), position as u64);
            let plan = AugmentPlan::sample(view_seed);
            let weak = apply_weak(scene, &plan);
            let strong = strong_augment_with(scene, &plan, view_seed);
            let prior = if plan.flip { priors[index].flipped() } else { priors[index].clone() };

            let pseudo = make_pseudo_labels(&teacher, &weak, &prior.mask, cfg, switches);
            n_pseudo += pseudo.len();
            let targets = if pseudo.is_empty() {
                skipped += 1;
                Vec::new()
            } else {
                let objects: Vec<(BBox, usize)> = pseudo.iter().map(|d| (d.bbox, d.class)).collect();
                assign_targets(&objects, cfg.bg_sample_count, &mut derived_rng(view_seed, 2))
            };
            let spar = switches.use_spar.then_some((&prior.pooled, &cfg.spar));
            let out = image_objective(&student, &strong.image, &targets, spar, &cls)?;
            parts.accumulate(&out.parts, weight);
            for (g, v) in grad.iter_mut().zip(&out.grad) {
                *g += weight * v;
            }
        }
        sgd(&mut student, &grad, cfg.lr_adapt);
        check_finite(step, parts.total(), &student, &mut trace)?;

        let epoch_ends = (step + 1) * cfg.batch / scenes.len() > step * cfg.batch / scenes.len();
        if !cfg.ema_per_epoch || epoch_ends || step + 1 == cfg.steps_adapt {
            ema_update_in_place(teacher.as_mut_slice(), student.as_slice(), cfg.ema_delta)?;
        }
        skipped_total += skipped;
        let record = AdaptRecord {
            step,
            loss_total: parts.total(),
            loss_irpl: parts.cls,
            loss_spar: parts.spar,
            loss_reg: parts.reg,
            n_pseudo,
        };
        on_step(&AdaptStep { record: &record, student: &student, teacher: &teacher, skipped_images: skipped });
    }
    Ok(AdaptOutcome { student, teacher, skipped_images: skipped_total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_scene, DomainShift, SceneSpec};

    fn target_scenes(n: u64) -> Vec<Scene> {
        (0..n)
            .map(|i| generate_scene(100 + i, &SceneSpec::target(), Some(&DomainShift::default())).unwrap())
            .collect()
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig { steps_source: steps, steps_adapt: steps, batch: 2, ..TrainConfig::default() }
    }

    #[test]
    fn zero_steps_return_initialisation_and_source() {
        let cfg = quick(0);
        let p = pretrain_source(&cfg, &[], &mut |_| {}).unwrap();
        assert_eq!(p, DetectorParams::init(cfg.seed));
        let out = adapt(&p, &cfg, &AblationSwitches::full(), &[], &mut |_| {}).unwrap();
        assert_eq!((out.student.clone(), out.teacher.clone()), (p.clone(), p));
    }

    #[test]
    fn untrained_teacher_labels_respect_threshold() {
        let scenes = target_scenes(3);
        let cfg = TrainConfig::default();
        for (i, s) in scenes.iter().enumerate() {
            let dets = make_pseudo_labels(&DetectorParams::init(i as u64), s, &s.fg_mask, &cfg, &AblationSwitches::full());
            assert!(dets.iter().all(|d| d.score >= 0.8));
        }
    }

    #[test]
    fn zero_threshold_makes_every_cell_a_candidate() {
        let s = &target_scenes(1)[0];
        let trace = forward(&DetectorParams::init(5), &s.image);
        assert_eq!(crate::detector::cell_candidates(&trace, 0.0).len(), GRID * GRID);
    }

    #[test]
    fn mask_filter_drops_background_detections() {
        let s = &target_scenes(1)[0];
        let obj = s.annotations[0];
        let inside = Detection { bbox: obj.bbox, class: obj.class, score: 0.9 };
        // find a 6x6 px window with no foreground at all
        let m = &s.fg_mask;
        let empty = (0..58)
            .flat_map(|r| (0..58).map(move |c| (r, c)))
            .find(|&(r, c)| (r..r + 6).all(|y| (c..c + 6).all(|x| m.at2(y, x) == 0.0)))
            .unwrap();
        let bg_box = BBox::new(empty.1 as f64 / 64.0, empty.0 as f64 / 64.0, (empty.1 + 6) as f64 / 64.0, (empty.0 + 6) as f64 / 64.0);
        let outside = Detection { bbox: bg_box, class: 0, score: 0.95 };
        let kept = mask_filter(vec![outside, inside], m);
        assert_eq!(kept, vec![inside]);
    }

    #[test]
    fn prior_noise_is_seeded_and_zero_noise_is_exact() {
        let s = &target_scenes(1)[0];
        let clean = PreparedPrior::new(&s.fg_mask, 0.0, &mut derived_rng(1, 1)).unwrap();
        assert_eq!(clean.mask, s.fg_mask);
        let a = PreparedPrior::new(&s.fg_mask, 0.2, &mut derived_rng(1, 1)).unwrap();
        let b = PreparedPrior::new(&s.fg_mask, 0.2, &mut derived_rng(1, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mask, s.fg_mask);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let scenes: Vec<Scene> = (0..4).map(|i| generate_scene(i, &SceneSpec::source(), None).unwrap()).collect();
        let cfg = quick(5);
        let a = pretrain_source(&cfg, &scenes, &mut |_| {}).unwrap();
        let b = pretrain_source(&cfg, &scenes, &mut |_| {}).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_checkpoint(&mut ba).unwrap();
        b.write_checkpoint(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a, DetectorParams::init(cfg.seed));
    }

    #[test]
    fn ema_zero_makes_teacher_track_student() {
        let scenes = target_scenes(4);
        let cfg = TrainConfig { ema_delta: 0.0, score_threshold: 0.3, ..quick(6) };
        let mut checked = 0;
        adapt(&DetectorParams::init(3), &cfg, &AblationSwitches::full(), &scenes, &mut |s| {
            if [1, 3, 4].contains(&s.record.step) {
                assert_eq!(s.teacher, s.student);
                checked += 1;
            }
        })
        .unwrap();
        assert_eq!(checked, 3);
    }

    #[test]
    fn teacher_is_untouched_when_ema_delta_is_one() {
        let scenes = target_scenes(4);
        let source = DetectorParams::init(4);
        let cfg = TrainConfig { ema_delta: 1.0, score_threshold: 0.3, ..quick(5) };
        let out = adapt(&source, &cfg, &AblationSwitches::full(), &scenes, &mut |_| {}).unwrap();
        assert_eq!(out.teacher, source);
        assert_ne!(out.student, source);
    }

    #[test]
    fn unreachable_threshold_isolates_the_spar_path() {
        let scenes = target_scenes(4);
        let source = DetectorParams::init(6);
        let cfg = TrainConfig { score_threshold: 1.0 + 1e-9, ..quick(3) };
        let off = AblationSwitches::baseline();
        let mut pseudo = 0;
        let out = adapt(&source, &cfg, &off, &scenes, &mut |s| pseudo += s.record.n_pseudo).unwrap();
        assert_eq!(pseudo, 0);
        assert_eq!(out.student, source);
        assert_eq!(out.skipped_images, 3 * 2);

        let spar_only = AblationSwitches::spar_only();
        let out = adapt(&source, &cfg, &spar_only, &scenes, &mut |s| {
            assert_eq!((s.record.loss_irpl, s.record.loss_reg), (0.0, 0.0));
            assert!(s.record.loss_spar > 0.0);
        })
        .unwrap();
        assert_ne!(out.student, source);
    }

    #[test]
    fn metric_parts_sum_to_total() {
        let scenes = target_scenes(4);
        let cfg = TrainConfig { score_threshold: 0.3, ..quick(4) };
        adapt(&DetectorParams::init(7), &cfg, &AblationSwitches::full(), &scenes, &mut |s| {
            let r = s.record;
            assert!((r.loss_irpl + r.loss_spar + r.loss_reg - r.loss_total).abs() <= 1e-9);
        })
        .unwrap();
    }

    #[test]
    fn per_epoch_ema_updates_only_at_epoch_ends() {
        let scenes = target_scenes(4);
        let source = DetectorParams::init(8);
        // batch 2 over 4 images: epochs end after steps 1 and 3
        let cfg = TrainConfig { ema_per_epoch: true, ema_delta: 0.5, score_threshold: 0.3, ..quick(4) };
        let mut moved = Vec::new();
        adapt(&source, &cfg, &AblationSwitches::full(), &scenes, &mut |s| moved.push(*s.teacher != source)).unwrap();
        assert_eq!(moved, vec![false, true, true, true]);
    }
}
