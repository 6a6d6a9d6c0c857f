//! Discretization by uniform tensor B-splines of degree `m`.
//!
//! The seminorm is the sum `Σ_{|α| = m} ∫ |∂^α F|^p`, integrated with `m + 1`
//! Gauss–Legendre points per axis and cell. Problems posed on `R^n` are solved
//! on the bounding box of the data (padded in two dimensions); outside that
//! box the function is continued by a Taylor polynomial of degree `m − 1`,
//! which is exact in one dimension.

use super::{Constraint, Row, RowKind, SolveSpec, System};
use crate::field::{SplineBasis, TensorBasis};
use crate::jets::index_set;
use crate::measures::Rect;
use crate::quad::gauss_legendre;
use std::sync::Arc;

/// Relative padding of the bounding box for two-dimensional problems on `R^2`.
pub const HULL_PADDING: f64 = 0.25;

/// Box carrying the discretization of a problem.
pub fn problem_box(spec: &SolveSpec) -> Rect {
    if let Some(d) = &spec.domain {
        return d.clone();
    }
    let n = spec.n;
    let pts: Vec<&Vec<f64>> = spec
        .atoms
        .iter()
        .map(|a| &a.x)
        .chain(spec.jets.iter().map(|(x, _)| x))
        .collect();
    if pts.is_empty() {
        return Rect::new(vec![-0.5; n], vec![0.5; n]);
    }
    let mut lo: Vec<f64> = (0..n)
        .map(|i| pts.iter().map(|x| x[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let mut hi: Vec<f64> = (0..n)
        .map(|i| pts.iter().map(|x| x[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let extent = (0..n).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
    let side = if extent > 0.0 { extent } else { 1.0 };
    for i in 0..n {
        let pad = if n == 1 && hi[i] > lo[i] {
            0.0
        } else if n == 1 {
            0.5 * side
        } else {
            HULL_PADDING * side
        };
        // Short axes grow symmetrically to the full side; the hull endpoints
        // themselves are kept exactly so that no atom falls outside by rounding.
        let short = if n == 1 {
            0.0
        } else {
            0.5 * (side - (hi[i] - lo[i])).max(0.0)
        };
        lo[i] -= short + pad;
        hi[i] += short + pad;
    }
    Rect::new(lo, hi)
}

/// Builds the tensor B-spline system with `cells` cells along the longest axis.
pub fn build(spec: &SolveSpec, cells: usize) -> System {
    let m = spec.m;
    let n = spec.n;
    let p = spec.p;
    let dom = problem_box(spec);
    let longest = dom.max_side();
    let cells_axis: Vec<usize> = (0..n)
        .map(|i| ((cells as f64 * dom.side(i) / longest).ceil() as usize).max(1))
        .collect();
    let basis = TensorBasis {
        m,
        domain: dom.clone(),
        cells: cells_axis.clone(),
    };
    let set = index_set(m + 1, n);
    let top: Vec<(usize, f64)> = set
        .items
        .iter()
        .enumerate()
        .filter(|(_, a)| a.order() == m)
        .map(|(k, a)| (k, a.factorial()))
        .collect();
    let mut rows = Vec::new();
    let mut cons = Vec::new();
    let anchor_set = index_set(m, n);
    let off = spec.anchor_offset();
    let anchor_scale = spec.anchor.map(|d| d.powf(m as f64 * p));
    let edges: Vec<Vec<f64>> = (0..n).map(|i| basis.breakpoints(i)).collect();
    let mut cell_points: Vec<(Vec<f64>, f64)> = Vec::new();
    let axis_rules: Vec<Vec<(Vec<f64>, Vec<f64>)>> = edges
        .iter()
        .map(|e| {
            e.windows(2)
                .map(|w| gauss_legendre(m + 1, w[0], w[1]))
                .collect()
        })
        .collect();
    if n == 1 {
        for (xs, ws) in &axis_rules[0] {
            for (x, w) in xs.iter().zip(ws) {
                cell_points.push((vec![*x], *w));
            }
        }
    } else {
        for (xs0, ws0) in &axis_rules[0] {
            for (xs1, ws1) in &axis_rules[1] {
                for (a, wa) in xs0.iter().zip(ws0) {
                    for (b, wb) in xs1.iter().zip(ws1) {
                        cell_points.push((vec![*a, *b], wa * wb));
                    }
                }
            }
        }
    }
    for (y, gw) in &cell_points {
        let tr = basis.taylor_rows(y, m);
        for (k, fact) in &top {
            let u: Vec<(usize, f64)> = tr
                .iter()
                .map(|(i, t)| (*i, t[*k] * fact))
                .filter(|(_, c)| *c != 0.0)
                .collect();
            rows.push(Row {
                u,
                rhs: Vec::new(),
                weight: *gw,
                kind: RowKind::Seminorm,
            });
        }
        if let Some(scale) = anchor_scale {
            let u: Vec<(usize, f64)> = tr
                .iter()
                .map(|(i, t)| (*i, t[0]))
                .filter(|(_, c)| *c != 0.0)
                .collect();
            let rhs = anchor_set
                .items
                .iter()
                .enumerate()
                .map(|(k, b)| (off + k, b.monomial(y)))
                .collect();
            rows.push(Row {
                u,
                rhs,
                weight: gw / scale,
                kind: RowKind::Anchor,
            });
        }
    }
    for (ai, a) in spec.atoms.iter().enumerate() {
        if !dom.contains_closed(&a.x) {
            continue;
        }
        let u: Vec<(usize, f64)> = basis
            .taylor_rows(&a.x, 0)
            .into_iter()
            .map(|(i, t)| (i, t[0]))
            .filter(|(_, c)| *c != 0.0)
            .collect();
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
    let toff = spec.target_offset();
    let jset = index_set(m, n);
    for (ci, (x, a)) in spec.jets.iter().enumerate() {
        let k = jset.position(a).expect("jet constraint order below m");
        let fact = a.factorial();
        let u = basis
            .taylor_rows(x, m - 1)
            .into_iter()
            .map(|(i, t)| (i, t[k] * fact))
            .filter(|(_, c)| *c != 0.0)
            .collect();
        cons.push(Constraint {
            u,
            rhs: vec![(toff + ci, 1.0)],
        });
    }
    System {
        nu: basis.len(),
        nin: spec.nin(),
        rows,
        cons,
        basis: Arc::new(SplineBasis::Tensor(basis)),
    }
}
