use crate::detector::{backward, box_backward, forward, CellTarget, DetectorParams, HeadGradients, NUM_OUTPUTS};
use crate::losses::{ce_loss, irpl_loss, l1_box_loss, spar_loss, BoxLossTerm, IrplConfig, SparConfig};
use crate::numerics::{softmax_backward, Tensor};
use crate::scenes::NUM_CLASSES;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClsLoss {
    /// Unweighted `−log p_ĉ` per box.
    CrossEntropy,
    Irpl(IrplConfig),
}

/// Loss of one image (or a batch mean) split by path.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub spar: f64,
    pub reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cls + self.spar + self.reg
    }

    pub(crate) fn accumulate(&mut self, other: &LossParts, weight: f64) {
        self.cls += weight * other.cls;
        self.spar += weight * other.spar;
        self.reg += weight * other.reg;
    }
}

#[derive(Clone, Debug)]
pub struct ImageLoss {
    pub parts: LossParts,
    /// Gradient of `parts.total()` over the flat parameters.
    pub grad: Vec<f64>,
}

/// Classification and box losses over `targets` (summed over cells) plus the
/// prior-alignment loss when `prior` is given.
///
/// An empty target list contributes nothing to the classification and box
/// terms.
pub fn image_objective(
    params: &DetectorParams,
    image: &Tensor,
    targets: &[CellTarget],
    prior: Option<(&Tensor, &SparConfig)>,
    cls: &ClsLoss,
) -> Result<ImageLoss> {
    let trace = forward(params, image);
    let mut up = HeadGradients::zeros();
    let mut parts = LossParts::default();

    if !targets.is_empty() {
        let probs: Vec<Vec<f64>> = targets.iter().map(|t| trace.cell_probs(t.cell)).collect();
        let grad_probs: Vec<Vec<f64>> = match cls {
            ClsLoss::CrossEntropy => {
                let outs: Vec<_> = probs.iter().zip(targets).map(|(p, t)| ce_loss(p, t.class)).collect();
                parts.cls = outs.iter().map(|o| o.loss).sum();
                outs.into_iter().map(|o| o.grad).collect()
            }
            ClsLoss::Irpl(cfg) => {
                let boxes: Vec<BoxLossTerm> = probs
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| BoxLossTerm { probs: p.clone(), pseudo_class: t.class })
                    .collect();
                let out = irpl_loss(&boxes, cfg, NUM_CLASSES)?;
                parts.cls = out.loss;
                out.grads
            }
        };
        let g = up.cls_logits.data_mut();
        for ((t, p), gp) in targets.iter().zip(&probs).zip(&grad_probs) {
            let gl = softmax_backward(p, gp);
            for (dst, v) in g[t.cell * NUM_OUTPUTS..][..NUM_OUTPUTS].iter_mut().zip(gl) {
                *dst += v;
            }
        }

        let g = up.reg_raw.data_mut();
        for t in targets {
            let Some(target_box) = t.bbox else { continue };
            let raw = trace.cell_reg(t.cell);
            let (loss, gc) = l1_box_loss(&trace.cell_box(t.cell), &target_box);
            parts.reg += loss;
            for (dst, v) in g[t.cell * 4..][..4].iter_mut().zip(box_backward(&raw, &gc)) {
                *dst += v;
            }
        }
    }

    if let Some((prior, cfg)) = prior {
        let out = spar_loss(&trace.mean_map, prior, cfg)?;
        parts.spar = out.loss;
        up.mean_map = out.grad;
    }

    let grad = backward(params, &trace, &up);
    Ok(ImageLoss { parts, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{BBox, BACKGROUND};
    use crate::numerics::{finite_diff_grad, grad_check};
    use rand::Rng;

    fn setup(seed: u64) -> (DetectorParams, Tensor, Vec<CellTarget>, Tensor) {
        let mut rng = crate::rng::rng_from(seed);
        let params = DetectorParams::init(seed);
        let image = Tensor::from_vec(&[64, 64], (0..4096).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let targets = vec![
            CellTarget { cell: 17, class: 0, bbox: Some(BBox::new(0.02, 0.03, 0.2, 0.15)) },
            CellTarget { cell: 120, class: 2, bbox: Some(BBox::new(0.4, 0.41, 0.6, 0.55)) },
            CellTarget { cell: 3, class: BACKGROUND, bbox: None },
            CellTarget { cell: 200, class: BACKGROUND, bbox: None },
        ];
        let prior = Tensor::from_vec(&[16, 16], (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        (params, image, targets, prior)
    }

    #[test]
    fn empty_targets_leave_only_spar() {
        let (params, image, _, prior) = setup(1);
        let spar = SparConfig::default();
        let out = image_objective(&params, &image, &[], Some((&prior, &spar)), &ClsLoss::CrossEntropy).unwrap();
        assert_eq!((out.parts.cls, out.parts.reg), (0.0, 0.0));
        assert!(out.parts.spar > 0.0);
        let none = image_objective(&params, &image, &[], None, &ClsLoss::CrossEntropy).unwrap();
        assert!(none.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn full_objective_matches_finite_differences() {
        let (params, image, targets, prior) = setup(2);
        let spar = SparConfig::default();
        let cls = ClsLoss::Irpl(IrplConfig::default());
        let out = image_objective(&params, &image, &targets, Some((&prior, &spar)), &cls).unwrap();
        let numeric = finite_diff_grad(
            |p| {
                let p = DetectorParams::from_vec(p.to_vec()).unwrap();
                image_objective(&p, &image, &targets, Some((&prior, &spar)), &cls).unwrap().parts.total()
            },
            params.as_slice(),
            1e-6,
        )
        .unwrap();
        let report = grad_check(&out.grad, &numeric, 1e-5);
        assert!(report.pass, "{report:?}");
    }
}
