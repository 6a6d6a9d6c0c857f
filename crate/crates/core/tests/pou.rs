//! Partitions of unity, cutoff profiles and gluing.

use nalgebra::DMatrix;
use proptest::prelude::*;
use sumspace::dyadic::{cz_decompose, Grid};
use sumspace::field::Field;
use sumspace::jets::{index_set, Label};
use sumspace::measures::{Atom, AtomicMeasure, Rect, Weight};
use sumspace::norms::brudnyi_estimate;
use sumspace::oracle::j_norm;
use sumspace::pou::{audit_pou, glue, BumpSystem, COLLAR};
use sumspace::RunConfig;

fn uniform(k: usize) -> Vec<Rect> {
    (0..k)
        .map(|i| Rect::new(vec![i as f64 / k as f64], vec![(i + 1) as f64 / k as f64]))
        .collect()
}

#[test]
fn single_cube_gives_the_constant_one() {
    for m in 1..=3 {
        let sys = BumpSystem::build(&[Rect::unit(1)], m).unwrap();
        let support = Rect::unit(1).dilate(1.0 + 2.0 * COLLAR);
        for k in 0..1024 {
            let y = support.lo[0] + (k as f64 + 0.5) / 1024.0 * support.side(0);
            let th = sys.theta_values(&[y]);
            assert_eq!(th.len(), 1);
            assert!((th[0].1 - 1.0).abs() < 1e-15);
        }
    }
    let sys2 = BumpSystem::build(&[Rect::unit(2)], 2).unwrap();
    let audit = audit_pou(&sys2, &Rect::unit(2), 32);
    assert!(audit.partition_error < 1e-15);
    assert_eq!(audit.theta_range, (1.0, 1.0));
}

#[test]
fn two_neighbor_cubes_sum_to_one() {
    let sys = BumpSystem::build(&uniform(2), 2).unwrap();
    let audit = audit_pou(&sys, &Rect::unit(1), 1024);
    assert_eq!(audit.samples, 1024);
    assert!(audit.partition_error <= 1e-12, "{audit:?}");
    assert!(audit.theta_range.0 >= 0.0 && audit.theta_range.1 <= 1.0);
    // Away from the common edge each cube carries everything.
    assert_eq!(sys.theta_values(&[0.2]), vec![(0, 1.0)]);
    assert_eq!(sys.theta_values(&[0.8]), vec![(1, 1.0)]);
    // Within the collar both bumps are active.
    assert_eq!(sys.theta_values(&[0.51]).len(), 2);
}

#[test]
fn scaled_derivative_bounds_are_scale_invariant() {
    // A uniform decomposition is a rescaled copy of itself at every size, so
    // the scaled bound must not depend on the number of cubes.
    for m in 1..=3 {
        let c8 = audit_pou(
            &BumpSystem::build(&uniform(8), m).unwrap(),
            &Rect::unit(1),
            1024,
        );
        let c16 = audit_pou(
            &BumpSystem::build(&uniform(16), m).unwrap(),
            &Rect::unit(1),
            2048,
        );
        assert_eq!(c8.scaled_derivative_bound.len(), m + 1);
        for (a, b) in c8
            .scaled_derivative_bound
            .iter()
            .zip(&c16.scaled_derivative_bound)
        {
            assert!(a.is_finite() && *a > 0.0);
            assert!((a - b).abs() <= 0.1 * a, "m = {m}: {a} vs {b}");
        }
        assert!((c8.scaled_derivative_bound[0] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn decomposition_partition_of_unity_passes_the_audit() {
    let mu = AtomicMeasure::new(
        1,
        vec![
            Atom {
                x: vec![0.47],
                w: Weight::Finite(1e5),
                f: 0.0,
            },
            Atom {
                x: vec![0.53],
                w: Weight::Infinite,
                f: 1.0,
            },
        ],
    )
    .unwrap();
    for m in [1, 2] {
        let cfg = RunConfig::new(m, 1, 2.0);
        let tree = cz_decompose(&mu, &Label::empty(m, 1), &Grid::unit(1), &cfg).unwrap();
        let rects: Vec<Rect> = tree.cubes.iter().map(|c| c.rect.clone()).collect();
        let sys = BumpSystem::build(&rects, m).unwrap();
        let audit = audit_pou(&sys, &Rect::unit(1), 1024);
        assert!(audit.partition_error <= 1e-12, "{audit:?}");
        assert!(audit.support_violation <= 1e-12);
        assert!(audit.theta_range.0 >= -1e-15 && audit.theta_range.1 <= 1.0 + 1e-15);
        assert!(sys.multiplicity <= 4);
    }
}

#[test]
fn build_rejects_degenerate_input() {
    assert!(BumpSystem::build(&[], 1).is_err());
    // Nine copies of one cube overlap more than 4 times.
    let stacked = vec![Rect::unit(1); 9];
    assert!(BumpSystem::build(&stacked, 1).is_err());
}

fn poly_field(m: usize, coeffs: &[f64]) -> Field {
    Field::Poly {
        m,
        n: 1,
        coeffs: DMatrix::from_column_slice(coeffs.len(), 1, coeffs),
    }
}

#[test]
fn glue_examples() {
    let q = Rect::new(vec![0.4], vec![0.6]);
    let m = 2;
    let d = index_set(m, 1).len();
    // F = P gives P everywhere.
    let p_coef = [0.3, -1.2];
    let f = poly_field(m, &p_coef);
    let g = glue(f, DMatrix::from_column_slice(d, 1, &p_coef), &q, 0.5, m).unwrap();
    for k in 0..200 {
        let y = -0.5 + 2.0 * k as f64 / 199.0;
        assert!((g.value(&[y], &[1.0]) - (0.3 - 1.2 * y)).abs() < 1e-12);
    }
    // F ≡ 1, P ≡ 0: one on Q, zero outside (1 + η)Q, monotone in between.
    let one = poly_field(m, &[1.0, 0.0]);
    let g = glue(one, DMatrix::zeros(d, 1), &q, 0.5, m).unwrap();
    let outer = q.dilate(1.5);
    assert_eq!(g.value(&[0.5], &[1.0]), 1.0);
    assert_eq!(g.value(&[outer.hi[0] + 1e-9], &[1.0]), 0.0);
    assert_eq!(g.value(&[outer.lo[0] - 1e-9], &[1.0]), 0.0);
    let mut prev = 1.0;
    for k in 0..=400 {
        let y = q.hi[0] + (outer.hi[0] - q.hi[0]) * k as f64 / 400.0;
        let v = g.value(&[y], &[1.0]);
        assert!(v <= prev + 1e-15 && (0.0..=1.0).contains(&v));
        prev = v;
    }
    assert!(glue(
        poly_field(m, &[1.0, 0.0]),
        DMatrix::zeros(d, 1),
        &q,
        1e-4,
        m
    )
    .is_err());
    assert!(glue(
        poly_field(m, &[1.0, 0.0]),
        DMatrix::zeros(d, 1),
        &q,
        200.0,
        m
    )
    .is_err());
}

#[test]
fn glue_restricted_to_the_cube_reproduces_the_field() {
    let mu = AtomicMeasure::new(
        1,
        vec![
            Atom {
                x: vec![0.42],
                w: Weight::Finite(3.0),
                f: 0.5,
            },
            Atom {
                x: vec![0.5],
                w: Weight::Infinite,
                f: -1.0,
            },
            Atom {
                x: vec![0.58],
                w: Weight::Finite(1.0),
                f: 2.0,
            },
        ],
    )
    .unwrap();
    let cfg = RunConfig::new(2, 1, 2.0);
    let f = j_norm(&mu, &cfg).unwrap().field().unwrap();
    let q = Rect::new(vec![0.4], vec![0.6]);
    let g = glue(
        f.clone(),
        DMatrix::from_column_slice(2, 1, &[0.1, 0.2]),
        &q,
        1.0,
        2,
    )
    .unwrap();
    for k in 0..=100 {
        let y = 0.4 + 0.2 * k as f64 / 100.0;
        assert_eq!(g.value(&[y], &[1.0]), f.value(&[y], &[1.0]));
    }
}

#[test]
fn glue_seminorm_is_controlled_by_the_pieces() {
    // ‖F̄‖ ≲ ‖F‖ + ‖F − P‖_{L^p((1+η)Q)} / δ^m, measured with the packing
    // estimator on a box containing the collar.
    let mu = AtomicMeasure::new(
        1,
        vec![
            Atom {
                x: vec![0.45],
                w: Weight::Infinite,
                f: 0.0,
            },
            Atom {
                x: vec![0.5],
                w: Weight::Infinite,
                f: 1.0,
            },
            Atom {
                x: vec![0.55],
                w: Weight::Infinite,
                f: 0.0,
            },
        ],
    )
    .unwrap();
    let (m, p) = (2, 2.0);
    let cfg = RunConfig::new(m, 1, p);
    let f = j_norm(&mu, &cfg).unwrap().field().unwrap();
    let q = Rect::new(vec![0.45], vec![0.55]);
    let delta = q.max_side();
    let p_coef = [0.2, 0.0];
    let box_ = q.dilate(3.0);
    let mut ratios = Vec::new();
    for eta in [0.25, 0.5, 1.0] {
        let g = glue(
            f.clone(),
            DMatrix::from_column_slice(2, 1, &p_coef),
            &q,
            eta,
            m,
        )
        .unwrap();
        let glued = brudnyi_estimate(&|y: &[f64]| g.value(y, &[1.0]), &box_, m, p, 8).value;
        let base = brudnyi_estimate(&|y: &[f64]| f.value(y, &[1.0]), &box_, m, p, 8).value;
        let outer = q.dilate(1.0 + eta);
        let nodes = 2000;
        let h = outer.side(0) / nodes as f64;
        let lp: f64 = (0..nodes)
            .map(|k| {
                let y = outer.lo[0] + (k as f64 + 0.5) * h;
                (f.value(&[y], &[1.0]) - p_coef[0] - p_coef[1] * y)
                    .abs()
                    .powf(p)
                    * h
            })
            .sum::<f64>()
            .powf(1.0 / p);
        let bound = base + lp / delta.powi(m as i32);
        ratios.push(glued / bound);
    }
    for r in &ratios {
        assert!(*r > 0.0 && *r <= 20.0, "ratios {ratios:?}");
    }
}

fn light_measure() -> impl Strategy<Value = AtomicMeasure> {
    prop::collection::vec((0.45..0.55f64, -1.0..4.0f64), 1..6).prop_map(|v| {
        let atoms = v
            .into_iter()
            .map(|(x, lw)| Atom {
                x: vec![x],
                w: Weight::Finite(10f64.powf(lw)),
                f: 0.0,
            })
            .collect();
        AtomicMeasure::new(1, atoms).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn partition_of_unity_on_random_decompositions(mu in light_measure(), m in 1usize..3) {
        let mut xs: Vec<f64> = mu.atoms.iter().map(|a| a.x[0]).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        prop_assume!(xs.len() == mu.len());
        let cfg = RunConfig::new(m, 1, 2.0);
        let tree = cz_decompose(&mu, &Label::empty(m, 1), &Grid::unit(1), &cfg).unwrap();
        let rects: Vec<Rect> = tree.cubes.iter().map(|c| c.rect.clone()).collect();
        let sys = BumpSystem::build(&rects, m).unwrap();
        let audit = audit_pou(&sys, &Rect::unit(1), 1024);
        prop_assert!(audit.partition_error <= 1e-12, "{:?}", audit);
        prop_assert!(audit.support_violation <= 1e-12);
        prop_assert!(audit.theta_range.0 >= -1e-15 && audit.theta_range.1 <= 1.0 + 1e-15);
        for b in &audit.scaled_derivative_bound {
            prop_assert!(b.is_finite());
        }
    }
}
