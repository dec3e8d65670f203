use super::Scene;
use crate::rng::{derived_rng, rng_from};
use rand::Rng;
use rand_distr::Normal;

/// Pixel noise level of the strong view.
pub const NOISE_SIGMA: f64 = 0.05;
/// Fill value of the random-erase rectangle (the clean background level).
pub const ERASE_VALUE: f64 = 0.1;
const MAX_ERASE: usize = 10;

/// The random choices of a weak view: a horizontal flip and a global
/// brightness jitter. The strong view built from the same seed reuses them,
/// so pseudo-boxes from the weak view line up with the strong view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub jitter: f64,
}

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan = AugmentPlan { flip: false, jitter: 0.0 };

    pub fn sample(seed: u64) -> Self {
        let mut rng = rng_from(seed);
        AugmentPlan {
            flip: rng.random_bool(0.5),
            jitter: rng.random_range(-0.02..=0.02),
        }
    }
}

pub fn apply_weak(scene: &Scene, plan: &AugmentPlan) -> Scene {
    let mut out = if plan.flip { scene.flipped() } else { scene.clone() };
    if plan.jitter != 0.0 {
        for v in out.image.data_mut() {
            *v = (*v + plan.jitter).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn weak_augment(scene: &Scene, seed: u64) -> Scene {
    apply_weak(scene, &AugmentPlan::sample(seed))
}

/// Weak view plus Gaussian pixel noise and one random erase rectangle.
/// Annotations and mask only see the flip.
pub fn strong_augment(scene: &Scene, seed: u64) -> Scene {
    strong_augment_with(scene, &AugmentPlan::sample(seed), seed)
}

pub fn strong_augment_with(scene: &Scene, plan: &AugmentPlan, seed: u64) -> Scene {
    let mut out = apply_weak(scene, plan);
    let mut rng = derived_rng(seed, 1);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let (h, w) = (out.image.shape()[0], out.image.shape()[1]);
    for v in out.image.data_mut() {
        *v = (*v + rng.sample(noise)).clamp(0.0, 1.0);
    }
    let eh = rng.random_range(1..=MAX_ERASE.min(h));
    let ew = rng.random_range(1..=MAX_ERASE.min(w));
    let top = rng.random_range(0..=h - eh);
    let left = rng.random_range(0..=w - ew);
    let data = out.image.data_mut();
    for r in top..top + eh {
        data[r * w + left..r * w + left + ew].fill(ERASE_VALUE);
    }
    out
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{connected_components, generate_scene, DomainShift, SceneSpec};

    fn scene() -> Scene {
        generate_scene(17, &SceneSpec::target(), Some(&DomainShift::default())).unwrap()
    }

    #[test]
    fn identity_plan_is_identity() {
        let s = scene();
        assert_eq!(apply_weak(&s, &AugmentPlan::IDENTITY), s);
    }

    #[test]
    fn flip_reflects_boxes() {
        let s = scene();
        let f = apply_weak(&s, &AugmentPlan { flip: true, jitter: 0.0 });
        for (a, b) in s.annotations.iter().zip(&f.annotations) {
            assert_eq!(b.bbox.x0, 1.0 - a.bbox.x1);
            assert_eq!(b.bbox.x1, 1.0 - a.bbox.x0);
            assert_eq!(b.bbox.y0, a.bbox.y0);
            assert_eq!(a.class, b.class);
        }
        assert_eq!(f.image.at2(3, 0), s.image.at2(3, 63));
    }

    #[test]
    fn double_flip_is_identity() {
        let s = scene();
        let plan = AugmentPlan { flip: true, jitter: 0.0 };
        let back = apply_weak(&apply_weak(&s, &plan), &plan);
        assert_eq!(back.image, s.image);
        assert_eq!(back.fg_mask, s.fg_mask);
        for (a, b) in back.annotations.iter().zip(&s.annotations) {
            for (x, y) in a.bbox.to_array().iter().zip(b.bbox.to_array()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn augmented_labels_match_recomputed_tight_boxes() {
        for seed in 0..30 {
            let s = generate_scene(seed, &SceneSpec::source(), None).unwrap();
            let v = weak_augment(&s, seed * 7 + 1);
            let comps = connected_components(&v.fg_mask);
            for ann in &v.annotations {
                assert!(comps.iter().any(|c| c.bbox == ann.bbox));
            }
        }
    }

    #[test]
    fn augmentations_are_deterministic_and_share_the_flip() {
        let s = scene();
        assert_eq!(weak_augment(&s, 9), weak_augment(&s, 9));
        assert_eq!(strong_augment(&s, 9), strong_augment(&s, 9));
        for seed in 0..20 {
            let weak = weak_augment(&s, seed);
            let strong = strong_augment(&s, seed);
            assert_eq!(weak.annotations, strong.annotations);
            assert_eq!(weak.fg_mask, strong.fg_mask);
            assert!(strong.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn strong_view_with_identity_plan_keeps_labels() {
        let s = scene();
        let strong = strong_augment_with(&s, &AugmentPlan::IDENTITY, 3);
        assert_eq!(strong.annotations, s.annotations);
        assert_ne!(strong.image, s.image);
        assert!(strong.image.data().contains(&ERASE_VALUE));
    }
}
