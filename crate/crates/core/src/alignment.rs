//! Adversarial feature alignment: center-aware map construction, per-domain
//! discriminator cross-entropy, global and center-aware alignment losses,
//! and the overall objective.
//!
//! Gradient reversal is a tape primitive ([`Tape::grl`]): identity forward,
//! gradient scaled by `-lambda` on the way back, so the discriminator
//! minimizes its loss while everything upstream of the insertion point is
//! pushed to maximize it in the same optimizer step.

use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Tape, Var};

/// Binary domain label: source = 1, target = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn z(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }
}

/// Per-pixel weighting map for center-aware alignment; every entry lies
/// strictly in `(0.5, 1)` for finite logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterAwareMap {
    pub values: Array2<f64>,
}

/// Combine classification and centerness logits into the center-aware map:
/// objectness = per-location max over class channels of `sigmoid(cls)`,
/// map = `sigmoid(delta * objectness * sigmoid(ctr))` elementwise.
pub fn center_aware_map(
    cls_logits: &ArrayView3<f64>,
    ctr_logits: &ArrayView2<f64>,
    delta: f64,
) -> Result<CenterAwareMap> {
    let (c, h, w) = cls_logits.dim();
    if c == 0 {
        return Err(Error::Invalid("center-aware map needs at least one class".into()));
    }
    if (h, w) != ctr_logits.dim() {
        return Err(Error::Shape(format!(
            "cls map {:?} vs ctr map {:?}",
            (h, w),
            ctr_logits.dim()
        )));
    }
    if delta <= 0.0 {
        return Err(Error::Invalid(format!("delta must be positive, got {delta}")));
    }
    let mut values = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut obj = f64::NEG_INFINITY;
            for ci in 0..c {
                obj = obj.max(sigmoid(cls_logits[[ci, y, x]]));
            }
            values[[y, x]] = sigmoid(delta * obj * sigmoid(ctr_logits[[y, x]]));
        }
    }
    Ok(CenterAwareMap { values })
}

/// Tape version of [`center_aware_map`]; pass constant leaves for the logits
/// to detach the map from the detection head (the default training mode), or
/// the live head outputs to let adversarial gradients reach the head.
pub fn center_aware_map_t(tape: &mut Tape, cls_logits: Var, ctr_logits: Var, delta: f64) -> Var {
    let obj_per_class = tape.sigmoid(cls_logits);
    let obj = tape.channel_max(obj_per_class);
    let ctr = tape.sigmoid(ctr_logits);
    let prod = tape.mul(obj, ctr);
    let scaled = tape.scale(prod, delta);
    tape.sigmoid(scaled)
}

/// Per-domain half of the discriminator objective, averaged over locations:
/// `mean(-z*ln(sigmoid(d)) - (1-z)*ln(1-sigmoid(d)))`.
pub fn domain_bce_map(d_logits: &ArrayView2<f64>, domain: Domain) -> Result<f64> {
    let n = d_logits.len();
    if n == 0 {
        return Err(Error::Shape("empty discriminator map".into()));
    }
    let z = domain.z();
    let mut sum = 0.0;
    for &d in d_logits.iter() {
        if !d.is_finite() {
            return Err(Error::Numeric(format!("non-finite discriminator logit: {d}")));
        }
        sum += softplus(d) - z * d;
    }
    Ok(sum / n as f64)
}

/// Tape variant of [`domain_bce_map`] over a `[H,W]` logit node.
pub fn domain_bce_map_t(tape: &mut Tape, d_logits: Var, domain: Domain) -> Result<Var> {
    let v = tape.value(d_logits).clone();
    let view = v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let value = domain_bce_map(&view, domain)?;
    let z = domain.z();
    let n = view.len() as f64;
    let grad = v.mapv(|d| (sigmoid(d) - z) / n);
    Ok(tape.scalar_with_grad(d_logits, value, grad))
}

/// Global alignment loss for one source/target feature pair through a shared
/// discriminator: both features pass through gradient reversal first.
pub fn global_alignment_loss_t(
    tape: &mut Tape,
    f_source: Var,
    f_target: Var,
    lambda: f64,
    mut discriminator: impl FnMut(&mut Tape, Var) -> Var,
) -> Result<Var> {
    let rs = tape.grl(f_source, lambda);
    let rt = tape.grl(f_target, lambda);
    let ds = discriminator(tape, rs);
    let dt = discriminator(tape, rt);
    let ls = domain_bce_map_t(tape, ds, Domain::Source)?;
    let lt = domain_bce_map_t(tape, dt, Domain::Target)?;
    Ok(tape.add(ls, lt))
}

/// Center-aware alignment loss: features are weighted by the center-aware
/// map (broadcast over channels) before reversal and the discriminator.
pub fn center_aware_loss_t(
    tape: &mut Tape,
    f_source: Var,
    f_target: Var,
    map_source: Var,
    map_target: Var,
    lambda: f64,
    mut discriminator: impl FnMut(&mut Tape, Var) -> Var,
) -> Result<Var> {
    let ws = tape.mul_map_var(f_source, map_source);
    let wt = tape.mul_map_var(f_target, map_target);
    let rs = tape.grl(ws, lambda);
    let rt = tape.grl(wt, lambda);
    let ds = discriminator(tape, rs);
    let dt = discriminator(tape, rt);
    let ls = domain_bce_map_t(tape, ds, Domain::Source)?;
    let lt = domain_bce_map_t(tape, dt, Domain::Target)?;
    Ok(tape.add(ls, lt))
}

/// Full objective: `det.total + alpha * sum(ga) + beta * sum(ca)`.
pub fn overall_objective(
    det: &crate::losses::LossBreakdown,
    ga_per_level: &[f64],
    ca_per_level: &[f64],
    alpha: f64,
    beta: f64,
) -> f64 {
    det.total
        + alpha * ga_per_level.iter().sum::<f64>()
        + beta * ca_per_level.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff, max_rel_err};
    use crate::tensor::Arr;
    use approx::assert_relative_eq;
    use ndarray::{arr2, Array2, Array3, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn ca_map_scalar_case() {
        // sigma(cls) = 0.5, sigma(ctr) = 0.5, delta = 20 -> sigma(5).
        let cls = Array3::from_elem((1, 1, 1), 0.0);
        let ctr = arr2(&[[0.0]]);
        let m = center_aware_map(&cls.view(), &ctr.view(), 20.0).unwrap();
        assert_relative_eq!(m.values[[0, 0]], 0.993307, max_relative = 1e-6);
    }

    #[test]
    fn ca_map_stays_above_half_and_uses_channel_max() {
        let cls = Array3::from_elem((2, 2, 2), -15.0);
        let ctr = Array2::from_elem((2, 2), -15.0);
        let m = center_aware_map(&cls.view(), &ctr.view(), 20.0).unwrap();
        for &v in m.values.iter() {
            assert!(v > 0.5 && v < 1.0, "infimum 0.5 never attained, got {v}");
        }
        // The sigmoid argument is always positive, so 0.5 is approached but
        // only reached when the product underflows past f64 resolution.
        let cls = Array3::from_elem((2, 2, 2), -60.0);
        let m = center_aware_map(&cls.view(), &ctr.view(), 20.0).unwrap();
        for &v in m.values.iter() {
            assert!((v - 0.5).abs() < 1e-12 && v >= 0.5);
        }
        let mut cls = Array3::zeros((3, 1, 1));
        cls[[0, 0, 0]] = logit(0.2);
        cls[[1, 0, 0]] = logit(0.9);
        cls[[2, 0, 0]] = logit(0.4);
        let ctr = arr2(&[[0.0]]);
        let m = center_aware_map(&cls.view(), &ctr.view(), 20.0).unwrap();
        assert_relative_eq!(m.values[[0, 0]], sigmoid(20.0 * 0.9 * 0.5), max_relative = 1e-12);
    }

    #[test]
    fn ca_map_rejects_zero_classes_and_bad_delta() {
        let cls = Array3::<f64>::zeros((0, 2, 2));
        let ctr = Array2::zeros((2, 2));
        assert!(center_aware_map(&cls.view(), &ctr.view(), 20.0).is_err());
        let cls = Array3::<f64>::zeros((1, 2, 2));
        assert!(center_aware_map(&cls.view(), &ctr.view(), 0.0).is_err());
    }

    #[test]
    fn ca_map_tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cls = Array3::from_shape_fn((3, 4, 4), |_| rng.gen::<f64>() * 6.0 - 3.0);
        let ctr = Array2::from_shape_fn((4, 4), |_| rng.gen::<f64>() * 6.0 - 3.0);
        let plain = center_aware_map(&cls.view(), &ctr.view(), 20.0).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(cls.into_dyn());
        let t = tape.constant(ctr.into_dyn());
        let m = center_aware_map_t(&mut tape, c, t, 20.0);
        let got = tape.value(m).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (a, b) in got.iter().zip(plain.values.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn domain_bce_examples() {
        let zeros = Array2::zeros((3, 3));
        assert_relative_eq!(
            domain_bce_map(&zeros.view(), Domain::Source).unwrap(),
            2.0f64.ln(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            domain_bce_map(&zeros.view(), Domain::Target).unwrap(),
            2.0f64.ln(),
            max_relative = 1e-12
        );
        let sat = Array2::from_elem((2, 2), 60.0);
        assert!(domain_bce_map(&sat.view(), Domain::Source).unwrap() < 1e-12);
        let two = arr2(&[[logit(0.8), logit(0.6)]]);
        assert_relative_eq!(
            domain_bce_map(&two.view(), Domain::Source).unwrap(),
            -(0.8f64.ln() + 0.6f64.ln()) / 2.0,
            max_relative = 1e-12
        );
        let bad = arr2(&[[f64::INFINITY]]);
        assert!(domain_bce_map(&bad.view(), Domain::Source).is_err());
    }

    /// Tiny linear per-pixel discriminator used by the loss tests.
    fn toy_disc(weights: Arr) -> impl FnMut(&mut Tape, Var) -> Var {
        move |tape: &mut Tape, x: Var| {
            let w = tape.leaf(weights.clone(), true);
            let prod = tape.mul(x, w);
            tape.channel_sum(prod)
        }
    }

    #[test]
    fn global_loss_trivial_disc_is_two_ln_two() {
        // Discriminator that always outputs logit 0.
        let mut tape = Tape::new();
        let fs = tape.constant(Arr::zeros(IxDyn(&[2, 3, 3])));
        let ft = tape.constant(Arr::zeros(IxDyn(&[2, 3, 3])));
        let zero_disc = |tape: &mut Tape, x: Var| {
            let shape = tape.value(x).shape().to_vec();
            tape.constant(Arr::zeros(IxDyn(&[shape[1], shape[2]])))
        };
        let l = global_alignment_loss_t(&mut tape, fs, ft, 0.01, zero_disc).unwrap();
        assert_relative_eq!(tape.scalar(l), 2.0 * 2.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn center_aware_with_unit_map_equals_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fs0 = Arr::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rng.gen::<f64>() - 0.5);
        let ft0 = Arr::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rng.gen::<f64>() - 0.5);
        let w0 = Arr::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rng.gen::<f64>() - 0.5);

        let mut tape = Tape::new();
        let fs = tape.constant(fs0.clone());
        let ft = tape.constant(ft0.clone());
        let ga = global_alignment_loss_t(&mut tape, fs, ft, 0.01, toy_disc(w0.clone())).unwrap();
        let ones = tape.constant(Arr::from_elem(IxDyn(&[3, 3]), 1.0));
        let ca =
            center_aware_loss_t(&mut tape, fs, ft, ones, ones, 0.02, toy_disc(w0.clone())).unwrap();
        assert!((tape.scalar(ga) - tape.scalar(ca)).abs() < 1e-10);
    }

    #[test]
    fn center_aware_weights_features_before_disc() {
        // 1x1 spatial, 2 channels, M = 0.9, F_s = (1, 2) -> disc sees (0.9, 1.8).
        let mut tape = Tape::new();
        let mut f = Arr::zeros(IxDyn(&[2, 1, 1]));
        f[IxDyn(&[0, 0, 0])] = 1.0;
        f[IxDyn(&[1, 0, 0])] = 2.0;
        let fs = tape.constant(f.clone());
        let ft = tape.constant(f);
        let m = tape.constant(Arr::from_elem(IxDyn(&[1, 1]), 0.9));
        let seen = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
        let seen2 = seen.clone();
        let spy_disc = move |tape: &mut Tape, x: Var| {
            seen2.borrow_mut().push(tape.value(x).clone());
            let shape = tape.value(x).shape().to_vec();
            tape.constant(Arr::zeros(IxDyn(&[shape[1], shape[2]])))
        };
        center_aware_loss_t(&mut tape, fs, ft, m, m, 0.02, spy_disc).unwrap();
        let seen = seen.borrow();
        assert_eq!(seen[0][IxDyn(&[0, 0, 0])], 0.9);
        assert_eq!(seen[0][IxDyn(&[1, 0, 0])], 1.8);
    }

    #[test]
    fn overall_objective_arithmetic() {
        let det = crate::losses::LossBreakdown::new(0.5, 0.3, 0.2);
        assert_eq!(overall_objective(&det, &[2.0], &[3.0], 0.0, 0.0), det.total);
        let det = crate::losses::LossBreakdown::new(1.0, 0.0, 0.0);
        let v = overall_objective(&det, &[1.5, 0.5], &[1.0, 2.0], 0.01, 0.1);
        assert_relative_eq!(v, 1.32, max_relative = 1e-12);
        let det = crate::losses::LossBreakdown::new(0.0, 0.0, 0.0);
        assert_eq!(overall_objective(&det, &[], &[], 0.01, 0.1), 0.0);
    }

    #[test]
    fn grl_flips_and_scales_extractor_gradient() {
        // Extractor weight w feeds features F = w * x; discriminator is a
        // fixed linear map. The gradient w.r.t. w through GRL must equal
        // -lambda times the gradient without GRL.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Arr::from_shape_fn(IxDyn(&[2, 2, 2]), |_| rng.gen::<f64>() - 0.5);
        let dw = Arr::from_shape_fn(IxDyn(&[2, 2, 2]), |_| rng.gen::<f64>() - 0.5);
        let lambda = 0.02;

        let run = |use_grl: bool| -> (f64, Arr) {
            let mut tape = Tape::new();
            let w = tape.leaf(Arr::from_elem(IxDyn(&[2, 2, 2]), 0.7), true);
            let x = tape.constant(x0.clone());
            let feat = tape.mul(w, x);
            let r = if use_grl { tape.grl(feat, lambda) } else { feat };
            let dwl = tape.constant(dw.clone());
            let prod = tape.mul(r, dwl);
            let d = tape.channel_sum(prod);
            let loss = domain_bce_map_t(&mut tape, d, Domain::Source).unwrap();
            let mut grads = tape.backward(loss);
            (tape.scalar(loss), grads.take(w).unwrap())
        };

        let (v_plain, g_plain) = run(false);
        let (v_grl, g_grl) = run(true);
        assert_eq!(v_plain, v_grl, "GRL must not change the forward value");
        let expected = g_plain.mapv(|g| g * -lambda);
        for (a, b) in g_grl.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }

        // And the no-GRL gradient itself matches finite differences.
        let mut eval = |wv: &Arr| -> f64 {
            let mut tape = Tape::new();
            let w = tape.leaf(wv.clone(), false);
            let x = tape.constant(x0.clone());
            let feat = tape.mul(w, x);
            let dwl = tape.constant(dw.clone());
            let prod = tape.mul(feat, dwl);
            let d = tape.channel_sum(prod);
            let loss = domain_bce_map_t(&mut tape, d, Domain::Source).unwrap();
            tape.scalar(loss)
        };
        let w0 = Arr::from_elem(IxDyn(&[2, 2, 2]), 0.7);
        let numeric = finite_diff(&mut eval, &w0, 1e-5);
        assert!(max_rel_err(&g_plain, &numeric) < 1e-6);
    }
}
