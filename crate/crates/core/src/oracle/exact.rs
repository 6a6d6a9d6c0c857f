//! One-dimensional discretization by Hermite splines with knots at the data.
//!
//! Unknowns are `F^{(j)}(t_k)` for `j < m` at every knot. Between knots the
//! function is the Hermite interpolant of degree `2m − 1`, which is the exact
//! minimizer of the seminorm for given endpoint jets, so problems without an
//! anchor term are solved exactly at `p = 2`. With an anchor term the
//! minimizer is not piecewise polynomial on the data knots; the knot set is
//! then refined uniformly and the result is a Ritz approximation.

use super::{Constraint, Row, RowKind, SolveSpec, System};
use crate::field::{HermiteBasis, SplineBasis};
use crate::jets::{factorial, index_set};
use crate::quad::gauss_legendre;
use std::sync::Arc;

/// Number of uniform pieces added to the knot set when an anchor is present.
pub const ANCHOR_REFINEMENT: usize = 16;

fn knot_index(knots: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, t) in knots.iter().enumerate() {
        if (t - x).abs() < (knots[best] - x).abs() {
            best = i;
        }
    }
    best
}

/// Builds the Hermite system for a one-dimensional problem.
pub fn build(spec: &SolveSpec) -> System {
    let m = spec.m;
    let mut pts: Vec<f64> = spec.atoms.iter().map(|a| a.x[0]).collect();
    pts.extend(spec.jets.iter().map(|(x, _)| x[0]));
    if let Some(d) = &spec.domain {
        let (a, b) = (d.lo[0], d.hi[0]);
        pts.retain(|t| *t >= a && *t <= b);
        pts.push(a);
        pts.push(b);
        if spec.anchor.is_some() {
            for k in 1..ANCHOR_REFINEMENT {
                pts.push(a + (b - a) * k as f64 / ANCHOR_REFINEMENT as f64);
            }
        }
    }
    if pts.is_empty() {
        pts.push(0.0);
    }
    pts.sort_by(f64::total_cmp);
    let span = pts.last().copied().unwrap_or(0.0) - pts[0];
    let tol = 1e-13 * (1.0 + span + pts[0].abs());
    let mut knots: Vec<f64> = Vec::with_capacity(pts.len());
    for t in pts {
        match knots.last() {
            Some(&l) if t - l <= tol => {}
            _ => knots.push(t),
        }
    }
    let basis = HermiteBasis {
        m,
        knots: knots.clone(),
    };
    let mut rows = Vec::new();
    let mut cons = Vec::new();
    let p = spec.p;
    for w in knots.windows(2) {
        let (xs, ws) = gauss_legendre(m + 1, w[0], w[1]);
        for (x, gw) in xs.iter().zip(&ws) {
            let u = basis
                .taylor_rows(*x, m)
                .into_iter()
                .map(|(i, t)| (i, t[m] * factorial(m)))
                .filter(|(_, c)| *c != 0.0)
                .collect();
            rows.push(Row {
                u,
                rhs: Vec::new(),
                weight: *gw,
                kind: RowKind::Seminorm,
            });
        }
    }
    for (ai, a) in spec.atoms.iter().enumerate() {
        if let Some(d) = &spec.domain {
            if !d.contains_closed(&a.x) {
                continue;
            }
        }
        let k = knot_index(&knots, a.x[0]);
        let u = vec![(basis.index(k, 0), 1.0)];
        let rhs = vec![(ai, 1.0)];
        match a.w.finite() {
            Some(w) => rows.push(Row {
                u,
                rhs,
                weight: w,
                kind: RowKind::Data(ai),
            }),
            None => cons.push(Constraint { u, rhs }),
        }
    }
    if let (Some(delta), Some(_)) = (spec.anchor, &spec.domain) {
        let set = index_set(m, 1);
        let off = spec.anchor_offset();
        let scale = delta.powf(m as f64 * p);
        for w in knots.windows(2) {
            let (xs, ws) = gauss_legendre(2 * m, w[0], w[1]);
            for (x, gw) in xs.iter().zip(&ws) {
                let u = basis
                    .taylor_rows(*x, 0)
                    .into_iter()
                    .map(|(i, t)| (i, t[0]))
                    .filter(|(_, c)| *c != 0.0)
                    .collect();
                let rhs = set
                    .items
                    .iter()
                    .enumerate()
                    .map(|(k, b)| (off + k, b.monomial(&[*x])))
                    .collect();
                rows.push(Row {
                    u,
                    rhs,
                    weight: gw / scale,
                    kind: RowKind::Anchor,
                });
            }
        }
    }
    let toff = spec.target_offset();
    for (ci, (x, a)) in spec.jets.iter().enumerate() {
        let k = knot_index(&knots, x[0]);
        cons.push(Constraint {
            u: vec![(basis.index(k, a.get(0)), 1.0)],
            rhs: vec![(toff + ci, 1.0)],
        });
    }
    System {
        nu: basis.len(),
        nin: spec.nin(),
        rows,
        cons,
        basis: Arc::new(SplineBasis::Hermite(basis)),
    }
}
