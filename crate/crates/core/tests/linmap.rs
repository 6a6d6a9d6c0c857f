//! Linear selectors: closed forms, constraints, linearity and the
//! near-optimality guarantee against a brute-force minimizer.

use nalgebra::DMatrix;
use proptest::prelude::*;
use sumspace::linmap::{
    guarantee_factor, select, select_constrained, Method, QuadraticBlockProblem,
};
use sumspace::Error;

fn apply(map: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..map.nrows())
        .map(|i| (0..map.ncols()).map(|j| map[(i, j)] * v[j]).sum())
        .collect()
}

/// Minimizes a convex function of `w` by a coarse grid followed by cyclic
/// golden-section coordinate descent.
fn brute_min(f: &dyn Fn(&[f64]) -> f64, k: usize, radius: f64) -> f64 {
    let steps: usize = if k <= 2 { 41 } else { 13 };
    let mut best_w = vec![0.0; k];
    let mut best = f(&best_w);
    let total = steps.pow(k as u32);
    for flat in 0..total {
        let w: Vec<f64> = (0..k)
            .map(|i| {
                -radius
                    + 2.0 * radius * ((flat / steps.pow(i as u32)) % steps) as f64
                        / (steps - 1) as f64
            })
            .collect();
        let v = f(&w);
        if v < best {
            best = v;
            best_w = w;
        }
    }
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    let mut span = 2.0 * radius / (steps - 1) as f64 * 2.0;
    for _ in 0..60 {
        for i in 0..k {
            let eval = |t: f64, w: &mut Vec<f64>| {
                w[i] = t;
                f(w)
            };
            let mut w = best_w.clone();
            let (mut a, mut b) = (best_w[i] - span, best_w[i] + span);
            for _ in 0..80 {
                let c = b - golden * (b - a);
                let d = a + golden * (b - a);
                if eval(c, &mut w) < eval(d, &mut w) {
                    b = d;
                } else {
                    a = c;
                }
            }
            let t = 0.5 * (a + b);
            let v = eval(t, &mut w);
            if v < best {
                best = v;
                best_w = w;
            }
        }
        span *= 0.7;
    }
    best
}

fn two_residuals(p: f64) -> QuadraticBlockProblem {
    QuadraticBlockProblem::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[-1.0, -1.0]),
        vec![1.0, 1.0],
        p,
    )
}

#[test]
fn quadratic_average_example() {
    let prob = two_residuals(2.0);
    let s = select(&prob).unwrap();
    let w = apply(&s.map, &[0.0, 2.0]);
    assert!((w[0] - 1.0).abs() < 1e-12);
    let value = prob.objective(&[0.0, 2.0], &w);
    assert!((value - 2.0).abs() < 1e-12);
    let inf = brute_min(&|w| prob.objective(&[0.0, 2.0], w), 1, 4.0);
    assert!((value - inf).abs() < 1e-8, "{value} vs {inf}");
    assert_eq!(apply(&s.map, &[0.0, 0.0]), vec![0.0]);
}

#[test]
fn quartic_average_example() {
    let prob = two_residuals(4.0);
    let s = select(&prob).unwrap();
    assert_eq!(s.method, Method::Sequential);
    let w = apply(&s.map, &[0.0, 2.0]);
    assert!((w[0] - 1.0).abs() < 1e-12);
    let value = prob.objective(&[0.0, 2.0], &w);
    assert!((value - 2.0).abs() < 1e-12);
    let inf = (0..=40000)
        .map(|k| prob.objective(&[0.0, 2.0], &[-1.0 + k as f64 * 1e-4]))
        .fold(f64::INFINITY, f64::min);
    assert!(value <= guarantee_factor(4.0, 1) * inf);
}

#[test]
fn zero_coefficients_select_zero() {
    let prob = QuadraticBlockProblem::new(
        DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
        DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -1.0, 0.0]),
        vec![1.0, 1.0],
        3.0,
    );
    let s = select(&prob).unwrap();
    assert_eq!(s.map[(1, 0)], 0.0);
}

#[test]
fn forced_constraint() {
    // w₁ = v₁ leaves nothing to optimize.
    let mut prob = QuadraticBlockProblem::new(
        DMatrix::from_row_slice(1, 1, &[1.0]),
        DMatrix::from_row_slice(1, 1, &[-3.0]),
        vec![1.0],
        2.0,
    );
    prob.constraint = Some((
        DMatrix::from_row_slice(1, 1, &[-1.0]),
        DMatrix::from_row_slice(1, 1, &[1.0]),
    ));
    let s = select_constrained(&prob).unwrap();
    assert_eq!(s.method, Method::Forced);
    assert!((s.map[(0, 0)] - 1.0).abs() < 1e-15);
}

#[test]
fn coherence_constraint_on_a_jet_block() {
    // w = (c₀, c₁) of R(y) = c₀ + c₁ y, v = (f₁, f₂, P₀ coefficients a₀, a₁).
    // Constraint R(x_s) = P₀(x_s); residuals R(x_j) − f_j at two atoms.
    let (xs, x1, x2) = (0.5, 0.45, 0.6);
    let av = DMatrix::from_row_slice(2, 4, &[-1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
    let aw = DMatrix::from_row_slice(2, 2, &[1.0, x1, 1.0, x2]);
    let mut prob = QuadraticBlockProblem::new(av, aw, vec![2.0, 1.0], 2.0);
    let psi_v = DMatrix::from_row_slice(1, 4, &[0.0, 0.0, -1.0, -xs]);
    let psi_w = DMatrix::from_row_slice(1, 2, &[1.0, xs]);
    prob.constraint = Some((psi_v.clone(), psi_w.clone()));
    let s = select_constrained(&prob).unwrap();
    for v in [
        [1.0, -2.0, 0.3, 4.0],
        [0.0, 0.0, 1.0, 0.0],
        [5.0, 1.0, -2.0, 1.5],
    ] {
        let w = apply(&s.map, &v);
        let lhs: f64 = (0..4).map(|j| psi_v[(0, j)] * v[j]).sum::<f64>() + w[0] + xs * w[1];
        assert!(lhs.abs() < 1e-10);
        // The constrained family is R = P₀(x_s) + c₁ (y − x_s).
        let p0 = v[2] + v[3] * xs;
        let obj = |c1: &[f64]| prob.objective(&v, &[p0 - c1[0] * xs, c1[0]]);
        let inf = brute_min(&obj, 1, 200.0);
        assert!(prob.objective(&v, &w) <= guarantee_factor(2.0, 1) * inf + 1e-12);
        // For p = 2 with one free coordinate the selection is the exact minimizer.
        assert!((prob.objective(&v, &w) - inf).abs() <= 1e-8 * (1.0 + inf));
    }
}

#[test]
fn rank_deficient_constraint_is_rejected() {
    let mut prob = two_residuals(2.0);
    prob.constraint = Some((
        DMatrix::zeros(2, 2),
        DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
    ));
    let err = select_constrained(&prob).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)));
    assert!(err.to_string().contains("constraint map not surjective"));
    let mut zero = two_residuals(2.0);
    zero.constraint = Some((DMatrix::zeros(1, 2), DMatrix::zeros(1, 1)));
    assert!(select_constrained(&zero).is_err());
}

fn block() -> impl Strategy<Value = (QuadraticBlockProblem, Vec<f64>, Vec<f64>, f64)> {
    (1usize..4, 1usize..4, prop::bool::ANY).prop_flat_map(|(k, nv, quartic)| {
        let t = (k + 1)..7;
        t.prop_flat_map(move |t| {
            (
                prop::collection::vec(-2.0..2.0f64, t * nv),
                prop::collection::vec(-2.0..2.0f64, t * k),
                prop::collection::vec(0.1..3.0f64, t),
                prop::collection::vec(-1.0..1.0f64, nv),
                prop::collection::vec(-1.0..1.0f64, nv),
                -2.0..2.0f64,
            )
                .prop_map(move |(av, aw, w, v1, v2, lambda)| {
                    let p = if quartic { 4.0 } else { 2.0 };
                    let prob = QuadraticBlockProblem::new(
                        DMatrix::from_row_slice(t, nv, &av),
                        DMatrix::from_row_slice(t, k, &aw),
                        w,
                        p,
                    );
                    (prob, v1, v2, lambda)
                })
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn selection_is_linear((prob, v1, v2, lambda) in block()) {
        let s = select(&prob).unwrap();
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + lambda * b).collect();
        let (w1, w2, wm) = (apply(&s.map, &v1), apply(&s.map, &v2), apply(&s.map, &mix));
        for i in 0..w1.len() {
            prop_assert!((wm[i] - w1[i] - lambda * w2[i]).abs() <= 1e-10 * (1.0 + wm[i].abs()));
        }
    }

    #[test]
    fn selection_meets_the_guarantee((prob, v, _v2, _l) in block()) {
        let s = select(&prob).unwrap();
        let w = apply(&s.map, &v);
        let got = prob.objective(&v, &w);
        let radius = 4.0 * (1.0 + w.iter().fold(0.0f64, |a, b| a.max(b.abs())));
        let inf = brute_min(&|x| prob.objective(&v, x), prob.nw(), radius);
        prop_assert!(got <= guarantee_factor(prob.p, prob.nw()) * inf + 1e-9,
            "got {} inf {} k {}", got, inf, prob.nw());
        if prob.p == 2.0 {
            prop_assert!(got <= inf * (1.0 + 1e-6) + 1e-9);
        }
    }

    #[test]
    fn separable_quadratic_blocks_are_solved_exactly(
        coefs in prop::collection::vec((-2.0..2.0f64, 0.5..2.0f64, 0.1..3.0f64), 2..7),
        k in 1usize..4,
        v in prop::collection::vec(-1.0..1.0f64, 7),
    ) {
        // Residual ℓ involves only coordinate ℓ mod k.
        let t = coefs.len();
        let av = DMatrix::from_fn(t, t, |i, j| if i == j { coefs[i].0 } else { 0.0 });
        let aw = DMatrix::from_fn(t, k, |i, j| if i % k == j { -coefs[i].1 } else { 0.0 });
        let weights = coefs.iter().map(|c| c.2).collect();
        let prob = QuadraticBlockProblem::new(av, aw, weights, 2.0);
        let s = select(&prob).unwrap();
        let v = &v[..t];
        let got = prob.objective(v, &apply(&s.map, v));
        // Exact coordinatewise minimum.
        let mut best = 0.0;
        for j in 0..k {
            let rows: Vec<usize> = (0..t).filter(|i| i % k == j).collect();
            let (num, den): (f64, f64) = rows.iter().fold((0.0, 0.0), |(n, d), &i| {
                let (a, b, w) = coefs[i];
                (n + w * b * a * v[i], d + w * b * b)
            });
            let wj = if den > 0.0 { num / den } else { 0.0 };
            best += rows.iter().map(|&i| {
                let (a, b, w) = coefs[i];
                w * (a * v[i] - b * wj).powi(2)
            }).sum::<f64>();
        }
        prop_assert!((got - best).abs() <= 1e-8 * (1.0 + best));
    }

    #[test]
    fn removed_coefficients_give_a_zero_coordinate((prob, v, _v2, _l) in block()) {
        let mut prob = prob;
        let last = prob.nw() - 1;
        prob.aw.column_mut(last).fill(0.0);
        prob.p = 3.0;
        let s = select(&prob).unwrap();
        prop_assert_eq!(apply(&s.map, &v)[last], 0.0);
    }
}
