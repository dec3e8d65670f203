use super::{
    BBox, DetectorParams, BACKGROUND, CLS_HEAD, CONV1, CONV2, FEATURE_CHANNELS, FG_COUPLING, GRID, NUM_OUTPUTS,
    REG_HEAD,
};
use crate::numerics::{channel_mean, channel_mean_backward, sigmoid, softmax, Tensor};

/// Everything the backward pass needs, plus the head outputs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Tensor,
    /// `tanh(conv1(x))`, `[32, 32, 8]`.
    pub hidden: Tensor,
    /// Backbone output `a`, `[16, 16, 16]`.
    pub features: Tensor,
    /// `tanh(a)`, the input of both heads.
    pub head_input: Tensor,
    /// `sigmoid(channel_mean(a))`, `[16, 16]`.
    pub mean_map: Tensor,
    /// `[16, 16, K+1]`.
    pub cls_logits: Tensor,
    /// `[16, 16, 4]`.
    pub reg_raw: Tensor,
}

impl ForwardTrace {
    pub fn cell_logits(&self, cell: usize) -> &[f64] {
        &self.cls_logits.data()[cell * NUM_OUTPUTS..][..NUM_OUTPUTS]
    }

    pub fn cell_probs(&self, cell: usize) -> Vec<f64> {
        softmax(self.cell_logits(cell)).expect("non-empty logits")
    }

    pub fn cell_reg(&self, cell: usize) -> [f64; 4] {
        self.reg_raw.data()[cell * 4..][..4].try_into().expect("four box parameters")
    }

    /// Unclipped box predicted by `cell`.
    pub fn cell_box(&self, cell: usize) -> BBox {
        decode_cell_box(&self.cell_reg(cell), cell / GRID, cell % GRID)
    }
}

/// Upstream gradients on the three detector outputs. Any of them may be zero.
#[derive(Clone, Debug)]
pub struct HeadGradients {
    pub cls_logits: Tensor,
    pub reg_raw: Tensor,
    pub mean_map: Tensor,
}

impl HeadGradients {
    pub fn zeros() -> Self {
        HeadGradients {
            cls_logits: Tensor::zeros(&[GRID, GRID, NUM_OUTPUTS]),
            reg_raw: Tensor::zeros(&[GRID, GRID, 4]),
            mean_map: Tensor::zeros(&[GRID, GRID]),
        }
    }
}

/// Box of one cell in corner form, before clipping:
/// center `((col, row) + sigmoid(raw[0..2])) / GRID`, size `sigmoid(raw[2..4])`.
pub fn decode_cell_box(raw: &[f64; 4], row: usize, col: usize) -> BBox {
    let g = GRID as f64;
    let cx = (col as f64 + sigmoid(raw[0])) / g;
    let cy = (row as f64 + sigmoid(raw[1])) / g;
    let (w, h) = (sigmoid(raw[2]), sigmoid(raw[3]));
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Pulls a gradient on `(x0, y0, x1, y1)` back to the four raw box parameters.
pub fn box_backward(raw: &[f64; 4], grad_corners: &[f64; 4]) -> [f64; 4] {
    let ds = |v: f64| {
        let s = sigmoid(v);
        s * (1.0 - s)
    };
    let g = GRID as f64;
    let [gx0, gy0, gx1, gy1] = *grad_corners;
    [
        (gx0 + gx1) * ds(raw[0]) / g,
        (gy0 + gy1) * ds(raw[1]) / g,
        0.5 * (gx1 - gx0) * ds(raw[2]),
        0.5 * (gy1 - gy0) * ds(raw[3]),
    ]
}

pub fn forward(params: &DetectorParams, image: &Tensor) -> ForwardTrace {
    let &[h, w] = image.shape() else {
        panic!("detector input must be a rank-2 image");
    };
    let input = Tensor::from_vec(&[h, w, 1], image.data().to_vec()).expect("same length");

    let (w1, b1) = params.layer(0);
    let hidden = CONV1.forward(&input, w1, b1).expect("conv1 geometry").map(f64::tanh);
    let (w2, b2) = params.layer(1);
    let features = CONV2.forward(&hidden, w2, b2).expect("conv2 geometry");
    let mean_pre = channel_mean(&features).expect("rank-3 features");
    let mean_map = mean_pre.map(sigmoid);
    let head_input = features.map(f64::tanh);
    let (wc, bc) = params.layer(2);
    let mut cls_logits = CLS_HEAD.forward(&head_input, wc, bc).expect("head geometry");
    for (cell, &m) in mean_pre.data().iter().enumerate() {
        for logit in &mut cls_logits.data_mut()[cell * NUM_OUTPUTS..][..BACKGROUND] {
            *logit += FG_COUPLING * m;
        }
    }
    let (wr, br) = params.layer(3);
    let reg_raw = REG_HEAD.forward(&head_input, wr, br).expect("head geometry");

    ForwardTrace { input, hidden, features, head_input, mean_map, cls_logits, reg_raw }
}

/// Gradient of `<upstream, outputs>` with respect to every parameter, in the
/// flat [`DetectorParams`] order.
pub fn backward(params: &DetectorParams, trace: &ForwardTrace, upstream: &HeadGradients) -> Vec<f64> {
    let (wc, _) = params.layer(2);
    let (wr, _) = params.layer(3);
    let (gi_c, gw_c, gb_c) = CLS_HEAD.backward(&trace.head_input, wc, &upstream.cls_logits, true);
    let (gi_r, gw_r, gb_r) = REG_HEAD.backward(&trace.head_input, wr, &upstream.reg_raw, true);
    let (gi_c, gi_r) = (gi_c.expect("requested"), gi_r.expect("requested"));

    // pre-sigmoid mean: g · s (1 − s) from the map plus the coupled
    // foreground logits, then spread over channels
    let pre = Tensor::from_vec(
        &[GRID, GRID],
        upstream
            .mean_map
            .data()
            .iter()
            .zip(trace.mean_map.data())
            .enumerate()
            .map(|(cell, (g, s))| {
                let fg: f64 = upstream.cls_logits.data()[cell * NUM_OUTPUTS..][..BACKGROUND].iter().sum();
                g * s * (1.0 - s) + FG_COUPLING * fg
            })
            .collect(),
    )
    .expect("grid shape");
    let from_map = channel_mean_backward(&pre, FEATURE_CHANNELS);

    let mut grad_features = from_map;
    for (((g, &c), &r), &u) in grad_features
        .data_mut()
        .iter_mut()
        .zip(gi_c.data())
        .zip(gi_r.data())
        .zip(trace.head_input.data())
    {
        *g += (c + r) * (1.0 - u * u);
    }

    let (w2, _) = params.layer(1);
    let (gi_2, gw_2, gb_2) = CONV2.backward(&trace.hidden, w2, &grad_features, true);
    let mut grad_hidden = gi_2.expect("requested");
    for (g, &h) in grad_hidden.data_mut().iter_mut().zip(trace.hidden.data()) {
        *g *= 1.0 - h * h;
    }
    let (w1, _) = params.layer(0);
    let (_, gw_1, gb_1) = CONV1.backward(&trace.input, w1, &grad_hidden, false);

    let mut grad = Vec::with_capacity(DetectorParams::LEN);
    for part in [gw_1, gb_1, gw_2, gb_2, gw_c, gb_c, gw_r, gb_r] {
        grad.extend(part);
    }
    debug_assert_eq!(grad.len(), DetectorParams::LEN);
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, grad_check};
    use rand::Rng;

    fn random_image(seed: u64) -> Tensor {
        let mut rng = crate::rng::rng_from(seed);
        Tensor::from_vec(&[64, 64], (0..4096).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn random_upstream(seed: u64) -> HeadGradients {
        let mut rng = crate::rng::rng_from(seed);
        let mut g = HeadGradients::zeros();
        for t in [&mut g.cls_logits, &mut g.reg_raw, &mut g.mean_map] {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        g
    }

    fn pairing(trace: &ForwardTrace, u: &HeadGradients) -> f64 {
        trace.cls_logits.dot(&u.cls_logits).unwrap()
            + trace.reg_raw.dot(&u.reg_raw).unwrap()
            + trace.mean_map.dot(&u.mean_map).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_class_probabilities() {
        let trace = forward(&DetectorParams::zeros(), &Tensor::zeros(&[64, 64]));
        for cell in 0..GRID * GRID {
            for p in trace.cell_probs(cell) {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
        assert!(trace.mean_map.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_regression_gives_half_size_boxes_at_cell_centers() {
        let trace = forward(&DetectorParams::zeros(), &random_image(1));
        for cell in [0, 17, 255] {
            let b = trace.cell_box(cell);
            let (row, col) = (cell / GRID, cell % GRID);
            let (cx, cy) = b.center();
            assert!((cx - (col as f64 + 0.5) / 16.0).abs() < 1e-15);
            assert!((cy - (row as f64 + 0.5) / 16.0).abs() < 1e-15);
            assert!((b.width() - 0.5).abs() < 1e-15);
            assert!((b.height() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn shapes_and_ranges() {
        let trace = forward(&DetectorParams::init(3), &random_image(2));
        assert_eq!(trace.features.shape(), &[16, 16, 16]);
        assert_eq!(trace.cls_logits.shape(), &[16, 16, 4]);
        assert!(trace.mean_map.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let params = DetectorParams::init(3);
        let trace = forward(&params, &random_image(4));
        let g = backward(&params, &trace, &HeadGradients::zeros());
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let params = DetectorParams::init(8);
        let trace = forward(&params, &random_image(5));
        let (u, v) = (random_upstream(1), random_upstream(2));
        let mut sum = u.clone();
        for (a, b) in [
            (&mut sum.cls_logits, &v.cls_logits),
            (&mut sum.reg_raw, &v.reg_raw),
            (&mut sum.mean_map, &v.mean_map),
        ] {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = 2.0 * *x - 3.0 * y;
            }
        }
        let gu = backward(&params, &trace, &u);
        let gv = backward(&params, &trace, &v);
        let gs = backward(&params, &trace, &sum);
        for i in 0..gs.len() {
            assert!((gs[i] - (2.0 * gu[i] - 3.0 * gv[i])).abs() < 1e-10);
        }
    }

    /// Forward-mode tangent of every detector output along parameter direction `v`.
    fn jvp(params: &DetectorParams, trace: &ForwardTrace, v: &DetectorParams) -> HeadGradients {
        let add = |a: Tensor, b: Tensor| {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::from_vec(a.shape(), data).unwrap()
        };
        let zeros = |n: usize| vec![0.0; n];
        let scale_by = |t: Tensor, s: &Tensor, f: &dyn Fn(f64) -> f64| {
            let data = t.data().iter().zip(s.data()).map(|(x, y)| x * f(*y)).collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        };
        let (dw1, db1) = v.layer(0);
        let dpre1 = CONV1.forward(&trace.input, dw1, db1).unwrap();
        let dh1 = scale_by(dpre1, &trace.hidden, &|h| 1.0 - h * h);
        let (w2, _) = params.layer(1);
        let (dw2, db2) = v.layer(1);
        let da = add(CONV2.forward(&dh1, w2, &zeros(16)).unwrap(), CONV2.forward(&trace.hidden, dw2, db2).unwrap());
        let dmean_pre = channel_mean(&da).unwrap();
        let dmean = scale_by(dmean_pre.clone(), &trace.mean_map, &|s| s * (1.0 - s));
        let du = scale_by(da, &trace.head_input, &|u| 1.0 - u * u);
        let (wc, _) = params.layer(2);
        let (dwc, dbc) = v.layer(2);
        let mut dcls = add(CLS_HEAD.forward(&du, wc, &zeros(4)).unwrap(), CLS_HEAD.forward(&trace.head_input, dwc, dbc).unwrap());
        for (cell, &dm) in dmean_pre.data().iter().enumerate() {
            for k in 0..BACKGROUND {
                dcls.data_mut()[cell * NUM_OUTPUTS + k] += FG_COUPLING * dm;
            }
        }
        let (wr, _) = params.layer(3);
        let (dwr, dbr) = v.layer(3);
        let dreg = add(REG_HEAD.forward(&du, wr, &zeros(4)).unwrap(), REG_HEAD.forward(&trace.head_input, dwr, dbr).unwrap());
        HeadGradients { cls_logits: dcls, reg_raw: dreg, mean_map: dmean }
    }

    #[test]
    fn adjoint_identity_on_random_seeds() {
        for seed in 0..3 {
            let params = DetectorParams::init(seed);
            let image = random_image(seed + 10);
            let u = random_upstream(seed + 20);
            let mut rng = crate::rng::rng_from(seed + 30);
            let v = DetectorParams::from_vec((0..DetectorParams::LEN).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let trace = forward(&params, &image);
            let jv = jvp(&params, &trace, &v);
            let lhs = jv.cls_logits.dot(&u.cls_logits).unwrap()
                + jv.reg_raw.dot(&u.reg_raw).unwrap()
                + jv.mean_map.dot(&u.mean_map).unwrap();
            let jt_u = backward(&params, &trace, &u);
            let rhs: f64 = v.as_slice().iter().zip(&jt_u).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "seed {seed}: {lhs} vs {rhs}");

            // the tangent itself agrees with a central difference
            let along = |t: f64| {
                let shifted: Vec<f64> = params.as_slice().iter().zip(v.as_slice()).map(|(p, d)| p + t * d).collect();
                pairing(&forward(&DetectorParams::from_vec(shifted).unwrap(), &image), &u)
            };
            let h = 1e-5;
            let fd = (along(h) - along(-h)) / (2.0 * h);
            assert!((fd - lhs).abs() <= 1e-6 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let params = DetectorParams::init(12);
        let image = random_image(13);
        let u = random_upstream(14);
        let trace = forward(&params, &image);
        let analytic = backward(&params, &trace, &u);
        // spot-check a spread of indices across all blocks
        let idx: Vec<usize> = (0..DetectorParams::LEN).step_by(37).chain([75, 1230, 1383]).collect();
        let sub: Vec<f64> = idx.iter().map(|&i| params.as_slice()[i]).collect();
        let numeric = finite_diff_grad(
            |s| {
                let mut p = params.clone();
                for (&i, &v) in idx.iter().zip(s) {
                    p.as_mut_slice()[i] = v;
                }
                pairing(&forward(&p, &image), &u)
            },
            &sub,
            1e-6,
        )
        .unwrap();
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        let report = grad_check(&picked, &numeric, 1e-5);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn box_backward_matches_finite_differences() {
        let raw = [0.3, -1.2, 0.8, -0.4];
        let gc = [0.7, -0.1, 0.25, 1.3];
        let analytic = box_backward(&raw, &gc);
        let numeric = finite_diff_grad(
            |r| {
                let b = decode_cell_box(&[r[0], r[1], r[2], r[3]], 5, 9).to_array();
                b.iter().zip(&gc).map(|(x, g)| x * g).sum()
            },
            &raw,
            1e-6,
        )
        .unwrap();
        assert!(grad_check(&analytic, &numeric, 1e-8).pass);
    }
}
