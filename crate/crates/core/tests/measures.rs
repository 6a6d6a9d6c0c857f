//! Normalization, restriction, mass, scaling and input parsing.

use approx::assert_relative_eq;
use proptest::prelude::*;
use sumspace::measures::{
    mass, normalize, parse_csv, parse_json, restrict, scale, Atom, AtomicMeasure, Rect, Weight,
};
use sumspace::oracle::j_norm;
use sumspace::{Error, RunConfig};

fn atom(x: &[f64], w: f64, f: f64) -> Atom {
    Atom {
        x: x.to_vec(),
        w: Weight::Finite(w),
        f,
    }
}

fn inf_atom(x: &[f64], f: f64) -> Atom {
    Atom {
        x: x.to_vec(),
        w: Weight::Infinite,
        f,
    }
}

#[test]
fn normalize_examples() {
    let mu = normalize(
        vec![atom(&[-5.0], 1.0, 0.0), atom(&[5.0], 1.0, 1.0)],
        1,
        2.0,
    )
    .unwrap();
    assert_relative_eq!(mu.atoms[0].x[0], 0.45, epsilon = 1e-12);
    assert_relative_eq!(mu.atoms[1].x[0], 0.55, epsilon = 1e-12);
    assert_eq!(mu.atoms[1].f, 1.0);

    let single = normalize(vec![atom(&[3.0, -7.0], 2.0, 4.0)], 2, 3.0).unwrap();
    assert_eq!(single.atoms[0].x, vec![0.5, 0.5]);

    let again = normalize(mu.atoms.clone(), 1, 2.0).unwrap();
    for (a, b) in again.atoms.iter().zip(&mu.atoms) {
        assert_relative_eq!(a.x[0], b.x[0], epsilon = 1e-12);
        assert_relative_eq!(a.w.value(), b.w.value(), max_relative = 1e-12);
    }
    assert_relative_eq!(again.frame.scale, 1.0, epsilon = 1e-12);

    assert!(normalize(Vec::new(), 1, 2.0).is_err());
    assert!(normalize(vec![atom(&[f64::NAN], 1.0, 0.0)], 1, 2.0).is_err());
}

#[test]
fn normalize_merges_duplicates() {
    let mu = normalize(
        vec![
            atom(&[0.0], 1.0, 0.0),
            atom(&[0.0], 3.0, 4.0),
            atom(&[1.0], 1.0, 1.0),
            inf_atom(&[2.0], 5.0),
            atom(&[2.0], 7.0, -1.0),
        ],
        1,
        2.0,
    )
    .unwrap();
    assert_eq!(mu.len(), 3);
    assert_eq!(mu.merges.len(), 2);
    let merged = &mu.merges[0];
    assert_eq!(merged.count, 2);
    assert_eq!(merged.w, Weight::Finite(4.0));
    assert_relative_eq!(merged.f, 3.0, epsilon = 1e-15);
    assert!(mu.merges[1].w.is_infinite());
    assert_eq!(mu.merges[1].f, 5.0);

    let conflict = normalize(vec![inf_atom(&[0.0], 0.0), inf_atom(&[0.0], 1.0)], 1, 2.0);
    assert!(matches!(conflict, Err(Error::Infeasible(_))));
}

#[test]
fn normalized_atoms_sit_in_the_central_tenth() {
    let raw: Vec<Atom> = (0..7)
        .map(|k| {
            atom(
                &[k as f64 * 3.1 - 4.0, (k * k) as f64 * 0.2],
                1.0 + k as f64,
                0.1 * k as f64,
            )
        })
        .collect();
    let mu = normalize(raw, 2, 3.0).unwrap();
    for a in &mu.atoms {
        for &c in &a.x {
            assert!((0.45 - 1e-12..=0.55 + 1e-12).contains(&c), "coordinate {c}");
        }
    }
}

#[test]
fn restrict_examples() {
    let mu = AtomicMeasure::new(
        1,
        vec![
            atom(&[0.1], 1.0, 0.0),
            atom(&[0.5], 1.0, 0.0),
            atom(&[0.9], 1.0, 0.0),
        ],
    )
    .unwrap();
    assert!(restrict(&mu, &Rect::new(vec![0.2], vec![0.4])).is_empty());
    assert_eq!(restrict(&mu, &Rect::unit(1)), mu);
    let two = restrict(&mu, &Rect::new(vec![0.0], vec![0.5]));
    assert_eq!(two.len(), 2);
    assert_eq!(two.atoms[1].x, vec![0.5]);
    // Half-open on the left.
    assert!(restrict(&mu, &Rect::new(vec![0.5], vec![0.6])).is_empty());
}

#[test]
fn mass_examples() {
    let mu = AtomicMeasure::new(1, vec![atom(&[0.3], 2.0, 0.0), atom(&[0.6], 3.0, 0.0)]).unwrap();
    assert_eq!(mass(&mu, &Rect::new(vec![0.0], vec![0.1])), 0.0);
    assert_eq!(mass(&mu, &Rect::unit(1)), 5.0);
    let inf = AtomicMeasure::new(1, vec![inf_atom(&[0.3], 0.0), atom(&[0.6], 3.0, 0.0)]).unwrap();
    assert_eq!(mass(&inf, &Rect::unit(1)), f64::INFINITY);
}

#[test]
fn scale_examples() {
    let mu = AtomicMeasure::new(1, vec![atom(&[0.3], 4.0, 1.0), inf_atom(&[0.6], 0.0)]).unwrap();
    assert_eq!(scale(&mu, 1.0, 2.0).unwrap(), mu);
    let s = scale(&mu, 3.0, 2.0).unwrap();
    assert_relative_eq!(s.atoms[0].w.value(), 36.0, max_relative = 1e-15);
    assert!(s.atoms[1].w.is_infinite());
    assert!(scale(&mu, 0.0, 2.0).is_err());
    assert!(scale(&mu, -1.0, 2.0).is_err());
}

#[test]
fn csv_and_json_inputs() {
    let atoms = parse_csv(
        "x1,x2,w,f\n0.1,0.2,inf,1\n# note\n0.3, 0.4 ,2.5,-1\n".as_bytes(),
        2,
    )
    .unwrap();
    assert_eq!(atoms.len(), 2);
    assert!(atoms[0].w.is_infinite());
    assert_eq!(atoms[1].x, vec![0.3, 0.4]);
    assert_eq!(atoms[1].w, Weight::Finite(2.5));

    let err = parse_csv("x,w,f\n0.1,1,0\n0.2,zero,1\n".as_bytes(), 1).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    let err = parse_csv("x,w,f\n0.1,1\n".as_bytes(), 1).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

    let atoms = parse_json(
        r#"[{"x":[0.5],"w":"inf","f":2},{"x":[0.7],"w":3,"f":1}]"#,
        1,
    )
    .unwrap();
    assert!(atoms[0].w.is_infinite());
    assert_eq!(atoms[1].w, Weight::Finite(3.0));
    assert!(parse_json(r#"[{"x":[0.5],"w":-2,"f":2}]"#, 1).is_err());
    assert!(parse_json(r#"[{"x":[0.5,0.1],"w":1,"f":2}]"#, 1).is_err());
}

#[test]
fn normalization_preserves_the_oracle_norm() {
    let raw = vec![
        atom(&[0.2], 1.0, 0.0),
        atom(&[0.35], 2.0, 1.0),
        inf_atom(&[0.5], -0.5),
        atom(&[0.8], 0.5, 2.0),
    ];
    for m in [1, 2] {
        let cfg = RunConfig::new(m, 1, 2.0);
        let direct = j_norm(&AtomicMeasure::new(1, raw.clone()).unwrap(), &cfg)
            .unwrap()
            .value;
        let mu = normalize(raw.clone(), m, 2.0).unwrap();
        let normalized = j_norm(&mu, &cfg).unwrap().value;
        assert_relative_eq!(
            normalized,
            direct * mu.frame.functional_factor(),
            max_relative = 1e-8
        );
    }
}

fn measure_1d() -> impl Strategy<Value = AtomicMeasure> {
    prop::collection::vec((0.0..1.0f64, 0.1..10.0f64, -1.0..1.0f64), 1..12).prop_map(|v| {
        let atoms = v.into_iter().map(|(x, w, f)| atom(&[x], w, f)).collect();
        AtomicMeasure::new(1, atoms).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_is_additive(mu in measure_1d(), cut in 0.0..1.0f64) {
        let left = Rect::new(vec![0.0], vec![cut]);
        let right = Rect::new(vec![cut], vec![1.0]);
        let total = mass(&mu, &Rect::unit(1));
        let sum = mass(&mu, &left) + mass(&mu, &right);
        prop_assert!((total - sum).abs() <= 1e-12 * total.max(1.0));
    }

    #[test]
    fn restrict_composes_as_intersection(
        mu in measure_1d(),
        a in 0.0..1.0f64, b in 0.0..1.0f64, c in 0.0..1.0f64, d in 0.0..1.0f64,
    ) {
        let b1 = Rect::new(vec![a.min(b)], vec![a.max(b)]);
        let b2 = Rect::new(vec![c.min(d)], vec![c.max(d)]);
        let twice = restrict(&restrict(&mu, &b1), &b2);
        match b1.intersect(&b2) {
            Some(i) => prop_assert_eq!(twice, restrict(&mu, &i)),
            None => prop_assert!(twice.is_empty()),
        }
    }

    #[test]
    fn normalization_scales_weights_and_keeps_values(
        pts in prop::collection::vec((-50.0..50.0f64, 0.1..10.0f64, -1.0..1.0f64), 2..8),
        m in 1usize..4,
        p in 2.0..5.0f64,
    ) {
        let mut pts = pts;
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.dedup_by(|a, b| a.0 == b.0);
        let raw: Vec<Atom> = pts.iter().map(|(x, w, f)| atom(&[*x], *w, *f)).collect();
        let mu = normalize(raw.clone(), m, p).unwrap();
        let k = mu.frame.functional_factor();
        for (r, a) in raw.iter().zip(&mu.atoms) {
            prop_assert!((mu.frame.inverse(&a.x)[0] - r.x[0]).abs() <= 1e-9 * (1.0 + r.x[0].abs()));
            prop_assert!((a.w.value() - r.w.value() * k).abs() <= 1e-12 * a.w.value());
            prop_assert_eq!(a.f, r.f);
        }
    }
}
