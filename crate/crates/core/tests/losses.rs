use approx::assert_abs_diff_eq;
use cpcr::dbpnet::{Branch, BranchPyramids};
use cpcr::losses::*;
use cpcr::{Error, Tensor4};
use ndarray::Array3;
use proptest::prelude::*;

// Plain reference implementations evaluated pixel by pixel.
fn softmax_ref(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn pixels(x: &Tensor4<f64>) -> Vec<Vec<f64>> {
    let [b, c, h, w] = x.shape();
    let mut out = Vec::new();
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                out.push((0..c).map(|k| x.get([bi, k, y, xx])).collect());
            }
        }
    }
    out
}

fn kl_ref(student_logits: &Tensor4<f64>, teacher_probs: &[Vec<f64>], t: f64) -> f64 {
    let s = pixels(student_logits);
    let n = s.len() as f64;
    s.iter()
        .zip(teacher_probs)
        .map(|(z, tp)| {
            let sp = softmax_ref(z, t);
            tp.iter()
                .zip(&sp)
                .map(|(a, b)| a * (a.max(1e-8).ln() - b.max(1e-8).ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

fn teacher(logits: &Tensor4<f64>, t: f64) -> Vec<Vec<f64>> {
    pixels(logits).iter().map(|z| softmax_ref(z, t)).collect()
}

fn toy(seed: f64) -> Tensor4<f64> {
    // 2x2 spatial, 3 classes.
    Tensor4::from_fn([1, 3, 2, 2], |i| {
        (seed + 1.3 * i[1] as f64 + 0.7 * i[2] as f64 - 0.4 * i[3] as f64).sin() * 2.0
    })
}

fn central_difference(x: &Tensor4<f64>, f: impl Fn(&Tensor4<f64>) -> f64) -> Tensor4<f64> {
    let h = 1e-6;
    let mut g = Tensor4::zeros(x.shape());
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn assert_relative(a: &Tensor4<f64>, b: &Tensor4<f64>, tol: f64) {
    for (x, y) in a.data().iter().zip(b.data()) {
        let scale = x.abs().max(y.abs()).max(1e-8);
        assert!(
            (x - y).abs() / scale < tol,
            "analytic {x:e} vs numeric {y:e}"
        );
    }
}

#[test]
fn t_softmax_matches_reference_and_limits() {
    let z = toy(0.3);
    for t in [1.0, 10.0] {
        let p = t_softmax(&z, t).unwrap();
        for (row, zr) in pixels(&p).iter().zip(pixels(&z)) {
            for (a, b) in row.iter().zip(softmax_ref(&zr, t)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
            }
        }
    }
    let hot = t_softmax(&z, 1e6).unwrap();
    assert!(hot.data().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-5));
    let col = Tensor4::from_vec([1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
    let p1 = t_softmax(&col, 1.0).unwrap();
    assert_abs_diff_eq!(p1.data()[0], 0.7311, epsilon = 1e-4);
    let p10 = t_softmax(&col, 10.0).unwrap();
    assert_abs_diff_eq!(p10.data()[0], 0.5250, epsilon = 1e-4);
    assert!(matches!(t_softmax(&col, 0.0), Err(Error::Argument(_))));
}

#[test]
fn t_softmax_survives_huge_logits() {
    let z = Tensor4::<f64>::from_vec([1, 2, 1, 1], vec![1e4, -1e4]).unwrap();
    let p = t_softmax(&z, 1.0).unwrap();
    assert!(p.data().iter().all(|v| v.is_finite()));
    assert_abs_diff_eq!(p.data()[0], 1.0, epsilon = 1e-12);
}

#[test]
fn directional_kl_student_gradient_matches_finite_differences() {
    let temp = 10.0;
    let s = toy(0.1);
    let t = toy(2.2);
    let tp = teacher(&t, temp);
    let d = directional_kl(&s, &t, temp).unwrap();
    assert_abs_diff_eq!(d.value, kl_ref(&s, &tp, temp), epsilon = 1e-12);
    let numeric = central_difference(&s, |x| kl_ref(x, &tp, temp));
    assert_relative(&d.student_grad, &numeric, 1e-4);
    assert!(d.teacher_grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn main_consistency_gradients_follow_the_student_side_only() {
    for temp in [1.0, 10.0] {
        let tr = toy(0.5);
        let up = toy(1.7);
        let pair = main_consistency_loss(&tr, &up, temp).unwrap();
        let up_fixed = teacher(&up, temp);
        let tr_fixed = teacher(&tr, temp);
        let expected = kl_ref(&tr, &up_fixed, temp) + kl_ref(&up, &tr_fixed, temp);
        assert_abs_diff_eq!(pair.value, expected, epsilon = 1e-12);
        let num_tr = central_difference(&tr, |x| kl_ref(x, &up_fixed, temp));
        assert_relative(&pair.grad_tr, &num_tr, 1e-4);
        let num_up = central_difference(&up, |x| kl_ref(x, &tr_fixed, temp));
        assert_relative(&pair.grad_up, &num_up, 1e-4);
    }
}

#[test]
fn kl_soft_reference_value() {
    let s = Tensor4::from_vec([1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
    let t = Tensor4::from_vec([1, 2, 1, 1], vec![0.75, 0.25]).unwrap();
    assert_abs_diff_eq!(kl_soft(&s, &t).unwrap(), 0.13081, epsilon = 1e-4);
    assert_abs_diff_eq!(kl_soft(&t, &t).unwrap(), 0.0, epsilon = 1e-7);
    let other = Tensor4::<f64>::zeros([1, 3, 1, 1]);
    assert!(matches!(kl_soft(&s, &other), Err(Error::Shape(_))));
}

fn entropy_ref(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len() as f64;
    -a.iter()
        .zip(b)
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(x, y)| {
                    let m = 0.5 * (x + y);
                    m * m.max(1e-8).ln()
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

#[test]
fn uncertainty_gradient_matches_finite_differences() {
    let tr = toy(0.9);
    let up = toy(-0.6);
    let pair = uncertainty_min_from_logits(&tr, &up).unwrap();
    let f = |a: &Tensor4<f64>, b: &Tensor4<f64>| entropy_ref(&teacher(a, 1.0), &teacher(b, 1.0));
    assert_abs_diff_eq!(pair.value, f(&tr, &up), epsilon = 1e-12);
    assert_relative(&pair.grad_tr, &central_difference(&tr, |x| f(x, &up)), 1e-4);
    assert_relative(&pair.grad_up, &central_difference(&up, |x| f(&tr, x)), 1e-4);
}

#[test]
fn uncertainty_averages_before_taking_entropy() {
    let a = Tensor4::from_vec([1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
    let b = Tensor4::from_vec([1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
    assert_abs_diff_eq!(
        uncertainty_min_loss(&a, &b).unwrap(),
        2f64.ln(),
        epsilon = 1e-4
    );
    assert_abs_diff_eq!(uncertainty_min_loss(&a, &a).unwrap(), 0.0, epsilon = 1e-6);
    let u = Tensor4::full([2, 4, 3, 3], 0.25);
    assert_abs_diff_eq!(
        uncertainty_min_loss(&u, &u).unwrap(),
        4f64.ln(),
        epsilon = 1e-4
    );
}

fn dice_ref(probs: &Tensor4<f64>, label: &Array3<u8>) -> f64 {
    let [b, c, h, w] = probs.shape();
    let mut total = 0.0;
    for k in 0..c {
        let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let p = probs.get([bi, k, y, x]);
                    let g = if label[[bi, y, x]] as usize == k {
                        1.0
                    } else {
                        0.0
                    };
                    inter += p * g;
                    ps += p;
                    gs += g;
                }
            }
        }
        total += 1.0 - (2.0 * inter + 1e-5) / (ps + gs + 1e-5);
    }
    total / c as f64
}

fn softmax_tensor(z: &Tensor4<f64>) -> Tensor4<f64> {
    let [b, c, h, w] = z.shape();
    let mut out = Tensor4::zeros(z.shape());
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row: Vec<f64> = (0..c).map(|k| z.get([bi, k, y, x])).collect();
                for (k, p) in softmax_ref(&row, 1.0).into_iter().enumerate() {
                    out.set([bi, k, y, x], p);
                }
            }
        }
    }
    out
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let z = toy(1.1);
    let label = Array3::from_shape_vec((1, 2, 2), vec![0u8, 2, 1, 2]).unwrap();
    let (value, grad) = dice_loss_from_logits(&z, &label).unwrap();
    assert_abs_diff_eq!(
        value,
        dice_ref(&softmax_tensor(&z), &label),
        epsilon = 1e-12
    );
    let numeric = central_difference(&z, |x| dice_ref(&softmax_tensor(x), &label));
    assert_relative(&grad, &numeric, 1e-4);
}

#[test]
fn dice_closed_forms() {
    let label = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| ((x + y) % 2) as u8);
    let onehot = Tensor4::from_fn([1, 2, 4, 4], |i| {
        if label[[0, i[2], i[3]]] as usize == i[1] {
            1.0
        } else {
            0.0
        }
    });
    assert_abs_diff_eq!(dice_loss(&onehot, &label).unwrap(), 0.0, epsilon = 1e-4);
    let miss = onehot.map(|v| 1.0 - v);
    assert_abs_diff_eq!(dice_loss(&miss, &label).unwrap(), 1.0, epsilon = 1e-4);
    let ones = Array3::from_elem((1, 4, 4), 1u8);
    let uniform = Tensor4::full([1, 2, 4, 4], 0.5);
    // class 1: 1 - N/(1.5N); class 0: 1 - 0/(0.5N) = 1.
    let expected = (1.0 + (1.0 - 16.0 / 24.0)) / 2.0;
    assert_abs_diff_eq!(
        dice_loss(&uniform, &ones).unwrap(),
        expected,
        epsilon = 1e-4
    );
    let bad = Array3::from_elem((1, 4, 4), 2u8);
    assert!(matches!(dice_loss(&uniform, &bad), Err(Error::Data(_))));
}

fn pyramid(seed: f64, shape: [usize; 4]) -> BranchPyramids<f64> {
    let map = |k: f64| {
        Tensor4::from_fn(shape, |i| {
            ((seed + k) * (1 + i[1] + 2 * i[2] + 3 * i[3] + 5 * i[0]) as f64).sin() * 3.0
        })
    };
    BranchPyramids {
        tr: (0..4).map(|s| map(s as f64 * 0.11)).collect(),
        up: (0..4).map(|s| map(s as f64 * 0.11 + 0.5)).collect(),
    }
}

#[test]
fn aux_consistency_is_the_mean_of_same_scale_pairs() {
    let pyr = pyramid(0.3, [2, 3, 4, 4]);
    let aux = aux_consistency_loss(&pyr, 10.0).unwrap();
    let per: Vec<f64> = (1..=3)
        .map(|s| {
            main_consistency_loss(pyr.scale(Branch::Tr, s), pyr.scale(Branch::Up, s), 10.0)
                .unwrap()
                .value
        })
        .collect();
    assert_abs_diff_eq!(aux.value, per.iter().sum::<f64>() / 3.0, epsilon = 1e-12);
    for (a, b) in aux.per_scale.iter().zip(&per) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
    }
}

#[test]
fn aux_consistency_grows_with_one_scale_discrepancy() {
    let base = pyramid(0.3, [1, 3, 4, 4]);
    let mut wider = base.clone();
    // Push scale 2 of TR further from UP along the existing difference.
    let diff: Vec<f64> = base.tr[1]
        .data()
        .iter()
        .zip(base.up[1].data())
        .map(|(a, b)| a - b)
        .collect();
    for (v, d) in wider.tr[1].data_mut().iter_mut().zip(&diff) {
        *v += 2.0 * d;
    }
    let a = aux_consistency_loss(&base, 10.0).unwrap();
    let b = aux_consistency_loss(&wider, 10.0).unwrap();
    assert!(b.value > a.value);
    assert_eq!(a.per_scale[0], b.per_scale[0]);
    assert_eq!(a.per_scale[2], b.per_scale[2]);
}

#[test]
fn aux_consistency_rejects_a_missing_scale() {
    let mut pyr = pyramid(0.3, [1, 3, 4, 4]);
    pyr.up.pop();
    assert!(matches!(
        aux_consistency_loss(&pyr, 10.0),
        Err(Error::Shape(_))
    ));
}

#[test]
fn supervised_loss_is_the_sum_of_two_dice_terms_and_ignores_aux() {
    let pyr = pyramid(0.8, [3, 3, 4, 4]);
    let label = Array3::from_shape_fn((2, 4, 4), |(b, y, x)| ((b + y * x) % 3) as u8);
    let (v, grads) = supervised_loss(&pyr, &label).unwrap();
    let lab = |m: &Tensor4<f64>| dice_ref(&softmax_tensor(&m.slice_outer(0, 2)), &label);
    assert_abs_diff_eq!(
        v,
        lab(pyr.main(Branch::Tr)) + lab(pyr.main(Branch::Up)),
        epsilon = 1e-12
    );
    for s in 1..=3 {
        assert!(grads.get(Branch::Tr, s).is_none() && grads.get(Branch::Up, s).is_none());
    }
    // The unlabeled third sample receives nothing.
    let g = grads.get(Branch::Tr, 4).unwrap();
    assert!(g.slice_outer(2, 3).data().iter().all(|&x| x == 0.0));
}

#[test]
fn ramp_up_and_total_reference_values() {
    let w = LossWeights::default();
    assert_abs_diff_eq!(ramp_up_weight(200, &w), 0.1, epsilon = 1e-12);
    assert_abs_diff_eq!(ramp_up_weight(0, &w), 6.738e-4, epsilon = 1e-6);
    assert_abs_diff_eq!(ramp_up_weight(100, &w), 0.028650, epsilon = 1e-5);
    assert_eq!(ramp_up_weight(5000, &w), 0.1);
    let parts = |a, b, c, d| LossParts {
        sup: a,
        con_main: b,
        con_aux: c,
        um: d,
    };
    assert_eq!(total_loss(parts(0.0, 0.0, 0.0, 0.0), 0, &w).total, 0.0);
    assert_abs_diff_eq!(
        total_loss(parts(1.0, 1.0, 1.0, 1.0), 200, &w).total,
        1.3,
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(
        total_loss(parts(0.0, 1.0, 1.0, 0.0), 0, &w).total,
        0.10067,
        epsilon = 1e-5
    );
}

#[test]
fn objective_gradient_of_zero_weight_terms_is_absent() {
    let pyr = pyramid(0.2, [2, 3, 4, 4]);
    let label = Array3::from_elem((1, 4, 4), 1u8);
    let obj = CpcrObjective {
        weights: LossWeights::supervised_only(),
        ..CpcrObjective::default()
    };
    let (b, grads) = obj.evaluate(&pyr, &label, 0).unwrap();
    assert_eq!(b.total, b.sup);
    let (_, sup_grads) = supervised_loss(&pyr, &label).unwrap();
    for br in [Branch::Tr, Branch::Up] {
        assert_eq!(grads.get(br, 4).unwrap(), sup_grads.get(br, 4).unwrap());
        for s in 1..=3 {
            assert!(grads.get(br, s).is_none());
        }
    }
}

fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..4).prop_flat_map(|n| {
        let len = n * 3 * 2 * 2;
        (
            prop::collection::vec(-30.0f64..30.0, len),
            prop::collection::vec(-30.0f64..30.0, len),
        )
    })
}

fn as_map(v: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec([v.len() / 12, 3, 2, 2], v.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn consistency_terms_are_nonnegative_and_symmetric((a, b) in logits_strategy(), t in 0.5f64..20.0) {
        let (x, y) = (as_map(&a), as_map(&b));
        let ab = main_consistency_loss(&x, &y, t).unwrap().value;
        let ba = main_consistency_loss(&y, &x, t).unwrap().value;
        prop_assert!(ab >= -1e-7);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
        prop_assert!(main_consistency_loss(&x, &x, t).unwrap().value.abs() < 1e-7);
        let um = uncertainty_min_from_logits(&x, &y).unwrap().value;
        prop_assert!(um >= -1e-7);
    }

    #[test]
    fn identical_branches_annihilate_consistency(a in prop::collection::vec(-10.0f64..10.0, 12 * 4)) {
        let maps: Vec<Tensor4<f64>> = a.chunks(12).map(as_map).collect();
        let pyr = BranchPyramids { tr: maps.clone(), up: maps };
        prop_assert!(aux_consistency_loss(&pyr, 10.0).unwrap().value.abs() < 1e-7);
        let label = Array3::from_elem((1, 2, 2), 0u8);
        let (b, _) = CpcrObjective::default().evaluate(&pyr, &label, 50).unwrap();
        prop_assert!(b.con_main.abs() < 1e-7 && b.con_aux.abs() < 1e-7);
        prop_assert!(b.sup >= 0.0);
    }

    #[test]
    fn breakdown_total_recomputes_exactly(
        sup in 0.0f64..2.0, cm in 0.0f64..2.0, ca in 0.0f64..2.0, um in 0.0f64..2.0, t in 0u64..400
    ) {
        let w = LossWeights::default();
        let b = total_loss(LossParts { sup, con_main: cm, con_aux: ca, um }, t, &w);
        prop_assert_eq!(b.total, b.recompute_total(w.fixed_weight));
    }

    #[test]
    fn ramp_up_is_nondecreasing_then_flat(t in 0u64..400) {
        let w = LossWeights::default();
        prop_assert!(ramp_up_weight(t + 1, &w) >= ramp_up_weight(t, &w));
        if t >= w.t_max {
            prop_assert_eq!(ramp_up_weight(t, &w), w.w_max);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(a in prop::collection::vec(-50.0f64..50.0, 12), t in 0.1f64..100.0) {
        let p = t_softmax(&as_map(&a), t).unwrap();
        for row in pixels(&p) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
