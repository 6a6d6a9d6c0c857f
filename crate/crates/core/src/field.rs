//! Evaluable functions that depend linearly on an input vector.
//!
//! Every function produced by the library (oracle minimizers, the operator
//! `T`, glued functions) is a [`Field`]: a recipe that, given a point `y`, an
//! order `k` and an input matrix `U` (inputs × columns), returns the Taylor
//! coefficients `∂^α F(y)/α!` for `|α| ≤ k` of the function attached to each
//! column of `U`. Passing the identity for `U` yields the linear map from
//! inputs to Taylor coefficients, which is what the functional ledger uses.

use crate::jets::{factorial, index_set, taylor_mul, Jet, MultiIndex};
use crate::measures::Rect;
use crate::pou::{BumpSystem, Profile};
use nalgebra::DMatrix;
use std::sync::{Arc, OnceLock};

/// Number of Taylor coefficients of order at most `order` in dimension `n`.
pub fn ntaylor(order: usize, n: usize) -> usize {
    index_set(order + 1, n).len()
}

/// Coefficients (ascending powers of `s`) of the unit-interval Hermite basis of
/// degree `2m − 1`: entry `[side][j]` has `∂^i H(side') = δ_{ij} δ_{side,side'}`.
fn hermite_unit(m: usize) -> &'static [[Vec<f64>; 2]] {
    static TABLE: OnceLock<Vec<Vec<[Vec<f64>; 2]>>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        (0..=crate::jets::MAX_M)
            .map(|m| {
                if m == 0 {
                    return Vec::new();
                }
                let d = 2 * m;
                // Row (side, i) evaluates the i-th derivative at s = side.
                let mut a = DMatrix::<f64>::zeros(d, d);
                for side in 0..2 {
                    for i in 0..m {
                        let r = side * m + i;
                        for k in i..d {
                            let c = factorial(k) / factorial(k - i);
                            a[(r, k)] = if side == 0 {
                                if k == i {
                                    c
                                } else {
                                    0.0
                                }
                            } else {
                                c
                            };
                        }
                    }
                }
                let inv = a.try_inverse().expect("Hermite system is invertible");
                (0..m)
                    .map(|j| {
                        let col = |side: usize| -> Vec<f64> {
                            (0..d).map(|k| inv[(k, side * m + j)]).collect()
                        };
                        [col(0), col(1)]
                    })
                    .collect()
            })
            .collect()
    });
    &table[m]
}

/// Derivatives `d^i/ds^i` for `i = 0..=order` of a polynomial with ascending coefficients.
fn poly_derivs(c: &[f64], s: f64, order: usize) -> Vec<f64> {
    (0..=order)
        .map(|i| {
            let mut v = 0.0;
            for k in (i..c.len()).rev() {
                v = v * s + c[k] * factorial(k) / factorial(k - i);
            }
            v
        })
        .collect()
}

/// Piecewise Hermite basis in one dimension: unknowns are `F^{(j)}(t_k)` for
/// `j < m`, ordered knot-major. Between knots the function is the degree
/// `2m − 1` Hermite interpolant; outside the knot hull it is continued by its
/// Taylor polynomial of degree `m − 1` at the nearest knot.
#[derive(Clone, Debug)]
pub struct HermiteBasis {
    /// Smoothness order.
    pub m: usize,
    /// Strictly increasing knots.
    pub knots: Vec<f64>,
}

impl HermiteBasis {
    /// Number of unknowns.
    pub fn len(&self) -> usize {
        self.m * self.knots.len()
    }

    /// True when there are no knots.
    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Index of the unknown `F^{(j)}(t_k)`.
    pub fn index(&self, k: usize, j: usize) -> usize {
        k * self.m + j
    }

    /// Nonzero basis contributions at `y`: pairs of unknown index and the
    /// Taylor coefficients (orders `0..=order`) of that basis function at `y`.
    pub fn taylor_rows(&self, y: f64, order: usize) -> Vec<(usize, Vec<f64>)> {
        let m = self.m;
        let kn = &self.knots;
        let last = kn.len() - 1;
        let ext = |k: usize| -> Vec<(usize, Vec<f64>)> {
            let d = y - kn[k];
            (0..m)
                .map(|j| {
                    let v = (0..=order)
                        .map(|i| {
                            if i > j {
                                0.0
                            } else {
                                d.powi((j - i) as i32) / (factorial(j - i) * factorial(i))
                            }
                        })
                        .collect();
                    (self.index(k, j), v)
                })
                .collect()
        };
        if kn.len() == 1 || y <= kn[0] {
            if kn.len() > 1 && y == kn[0] {
                return self.interval_rows(0, y, order);
            }
            return ext(0);
        }
        if y > kn[last] {
            return ext(last);
        }
        let k = match kn.binary_search_by(|t| t.total_cmp(&y)) {
            Ok(i) => i.min(last - 1),
            Err(i) => i - 1,
        };
        self.interval_rows(k, y, order)
    }

    fn interval_rows(&self, k: usize, y: f64, order: usize) -> Vec<(usize, Vec<f64>)> {
        let m = self.m;
        let h = self.knots[k + 1] - self.knots[k];
        let s = (y - self.knots[k]) / h;
        let unit = hermite_unit(m);
        let mut out = Vec::with_capacity(2 * m);
        for side in 0..2 {
            for (j, basis) in unit.iter().enumerate() {
                let d = poly_derivs(&basis[side], s, order);
                let v = d
                    .iter()
                    .enumerate()
                    .map(|(i, di)| di * h.powi(j as i32 - i as i32) / factorial(i))
                    .collect();
                out.push((self.index(k + side, j), v));
            }
        }
        out
    }
}

/// Coefficients (ascending powers of `u`) of the pieces of the cardinal
/// B-spline of degree `deg`: piece `k` lives on `[k, k + 1]`.
fn cardinal_pieces(deg: usize) -> &'static [Vec<f64>] {
    static TABLE: OnceLock<Vec<Vec<Vec<f64>>>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        (0..=crate::jets::MAX_M + 1)
            .map(|deg| {
                (0..=deg)
                    .map(|k| {
                        // N(k + u) = (1/deg!) Σ_{i ≤ k} (−1)^i C(deg+1, i) (k − i + u)^deg.
                        let mut c = vec![0.0; deg + 1];
                        for i in 0..=k {
                            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                            let a = sign * crate::jets::binomial(deg + 1, i) / factorial(deg);
                            let shift = (k - i) as f64;
                            for (e, slot) in c.iter_mut().enumerate() {
                                *slot += a
                                    * crate::jets::binomial(deg, e)
                                    * shift.powi((deg - e) as i32);
                            }
                        }
                        c
                    })
                    .collect()
            })
            .collect()
    });
    &table[deg]
}

/// Uniform tensor-product B-splines of degree `m` on a box.
///
/// Outside the box the function is continued by the Taylor polynomial of
/// degree `m − 1` at the nearest boundary point.
#[derive(Clone, Debug)]
pub struct TensorBasis {
    /// Smoothness order (spline degree equals `m`).
    pub m: usize,
    /// Box carrying the splines.
    pub domain: Rect,
    /// Cells per axis.
    pub cells: Vec<usize>,
}

impl TensorBasis {
    /// Dimension.
    pub fn n(&self) -> usize {
        self.domain.n()
    }

    /// Basis functions per axis.
    pub fn per_axis(&self, i: usize) -> usize {
        self.cells[i] + self.m
    }

    /// Number of unknowns.
    pub fn len(&self) -> usize {
        (0..self.n()).map(|i| self.per_axis(i)).product()
    }

    /// True when the basis is empty (never for a valid domain).
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell width along axis `i`.
    pub fn h(&self, i: usize) -> f64 {
        self.domain.side(i) / self.cells[i] as f64
    }

    /// Per-axis nonzero basis functions at coordinate `t` with derivatives up to `order`.
    fn axis_rows(&self, i: usize, t: f64, order: usize) -> Vec<(usize, Vec<f64>)> {
        let h = self.h(i);
        let r = (t - self.domain.lo[i]) / h;
        let c = (r.floor() as isize).clamp(0, self.cells[i] as isize - 1) as usize;
        let u = r - c as f64;
        let pieces = cardinal_pieces(self.m);
        (0..=self.m)
            .map(|k| {
                let d = poly_derivs(&pieces[self.m - k], u, order);
                let v = d
                    .iter()
                    .enumerate()
                    .map(|(o, dv)| dv / h.powi(o as i32))
                    .collect();
                (c + k, v)
            })
            .collect()
    }

    /// Nonzero basis contributions at `y` as Taylor coefficient vectors of
    /// length [`ntaylor`]`(order, n)`.
    pub fn taylor_rows(&self, y: &[f64], order: usize) -> Vec<(usize, Vec<f64>)> {
        let n = self.n();
        if self.domain.contains_closed(y) {
            return self.inside_rows(y, order);
        }
        let z = self.domain.project(y);
        let inner = self.inside_rows(&z, self.m - 1);
        let d: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a - b).collect();
        inner
            .into_iter()
            .map(|(idx, c)| (idx, shift_taylor(&c, self.m, n, &d, order)))
            .collect()
    }

    fn inside_rows(&self, y: &[f64], order: usize) -> Vec<(usize, Vec<f64>)> {
        let n = self.n();
        let set = index_set(order + 1, n);
        let axes: Vec<Vec<(usize, Vec<f64>)>> =
            (0..n).map(|i| self.axis_rows(i, y[i], order)).collect();
        let mut out = Vec::new();
        if n == 1 {
            for (idx, d) in &axes[0] {
                let v = set
                    .items
                    .iter()
                    .map(|a| d[a.get(0)] / a.factorial())
                    .collect();
                out.push((*idx, v));
            }
        } else {
            let nb0 = self.per_axis(0);
            for (i0, d0) in &axes[0] {
                for (i1, d1) in &axes[1] {
                    let v = set
                        .items
                        .iter()
                        .map(|a| d0[a.get(0)] * d1[a.get(1)] / a.factorial())
                        .collect();
                    out.push((i0 + nb0 * i1, v));
                }
            }
        }
        out
    }

    /// Breakpoints (cell edges) along axis `i`.
    pub fn breakpoints(&self, i: usize) -> Vec<f64> {
        let h = self.h(i);
        (0..=self.cells[i])
            .map(|k| self.domain.lo[i] + k as f64 * h)
            .collect()
    }
}

/// Re-expands Taylor coefficients `c` (orders `< m`) about a point shifted by
/// `d`, returning coefficients of orders `≤ order`.
pub fn shift_taylor(c: &[f64], m: usize, n: usize, d: &[f64], order: usize) -> Vec<f64> {
    let src = index_set(m, n);
    let dst = index_set(order + 1, n);
    dst.items
        .iter()
        .map(|a| {
            let mut s = 0.0;
            for (b, cb) in src.items.iter().zip(c) {
                if *cb == 0.0 {
                    continue;
                }
                if let Some(g) = b.checked_sub(a) {
                    s += cb * b.binomial(a) * g.monomial(d);
                }
            }
            s
        })
        .collect()
}

/// Linear map from origin monomial coefficients of a degree `m − 1`
/// polynomial to its Taylor coefficients at `y` (orders `≤ order`).
pub fn poly_taylor_map(m: usize, n: usize, y: &[f64], order: usize) -> DMatrix<f64> {
    let src = index_set(m, n);
    let dst = index_set(order + 1, n);
    DMatrix::from_fn(dst.len(), src.len(), |i, j| {
        let a = &dst.items[i];
        let b = &src.items[j];
        match b.checked_sub(a) {
            Some(g) => b.binomial(a) * g.monomial(y),
            None => 0.0,
        }
    })
}

/// A spline basis of either kind.
#[derive(Clone, Debug)]
pub enum SplineBasis {
    /// One-dimensional Hermite splines.
    Hermite(HermiteBasis),
    /// Tensor B-splines.
    Tensor(TensorBasis),
}

impl SplineBasis {
    /// Number of unknowns.
    pub fn len(&self) -> usize {
        match self {
            SplineBasis::Hermite(b) => b.len(),
            SplineBasis::Tensor(b) => b.len(),
        }
    }

    /// True when there are no unknowns.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dimension.
    pub fn n(&self) -> usize {
        match self {
            SplineBasis::Hermite(_) => 1,
            SplineBasis::Tensor(b) => b.n(),
        }
    }

    /// Nonzero basis contributions at `y`.
    pub fn taylor_rows(&self, y: &[f64], order: usize) -> Vec<(usize, Vec<f64>)> {
        match self {
            SplineBasis::Hermite(b) => b.taylor_rows(y[0], order),
            SplineBasis::Tensor(b) => b.taylor_rows(y, order),
        }
    }

    /// Breakpoints along axis `i`.
    pub fn breakpoints(&self, i: usize) -> Vec<f64> {
        match self {
            SplineBasis::Hermite(b) => b.knots.clone(),
            SplineBasis::Tensor(b) => b.breakpoints(i),
        }
    }
}

/// A function depending linearly on an input vector of length `nin`.
#[derive(Clone, Debug)]
pub enum Field {
    /// A polynomial of degree `m − 1` whose origin coefficients are `coeffs · u`.
    Poly {
        /// Smoothness order.
        m: usize,
        /// Dimension.
        n: usize,
        /// `D × nin` coefficient map.
        coeffs: DMatrix<f64>,
    },
    /// A spline whose unknowns are `coef · u`.
    Spline {
        /// The basis.
        basis: Arc<SplineBasis>,
        /// `nu × nin` coefficient map.
        coef: DMatrix<f64>,
    },
    /// `Σ_i θ_i · F_i(map_i · u)` over a partition of unity.
    Patched(Box<Patched>),
    /// `θ · F(u) + (1 − θ) · P(u)` for a cutoff profile `θ`.
    Blend(Box<Blend>),
}

/// Data of [`Field::Patched`].
#[derive(Clone, Debug)]
pub struct Patched {
    /// Partition of unity; part `i` uses bump `i`.
    pub pou: Arc<BumpSystem>,
    /// One part per cube of the partition.
    pub parts: Vec<Part>,
    /// Input length.
    pub nin: usize,
}

/// One summand of a patched field.
#[derive(Clone, Debug)]
pub struct Part {
    /// Local field.
    pub field: Field,
    /// `child_nin × nin` input map.
    pub map: DMatrix<f64>,
}

/// Data of [`Field::Blend`].
#[derive(Clone, Debug)]
pub struct Blend {
    /// Cutoff `θ`: one on its inner box, zero outside its outer box.
    pub profile: Profile,
    /// Field used where `θ = 1`.
    pub inner: Field,
    /// Origin coefficients of the polynomial used where `θ = 0` (`D × nin`).
    pub poly: DMatrix<f64>,
    /// Smoothness order.
    pub m: usize,
}

impl Field {
    /// Input length.
    pub fn nin(&self) -> usize {
        match self {
            Field::Poly { coeffs, .. } => coeffs.ncols(),
            Field::Spline { coef, .. } => coef.ncols(),
            Field::Patched(p) => p.nin,
            Field::Blend(b) => b.poly.ncols(),
        }
    }

    /// The constant polynomial field `P(u) = u` for jets (`nin = D`).
    pub fn identity_poly(m: usize, n: usize) -> Self {
        let d = index_set(m, n).len();
        Field::Poly {
            m,
            n,
            coeffs: DMatrix::identity(d, d),
        }
    }

    /// Applies an input map: the result takes inputs `v` with `u = map · v`.
    pub fn compose(self, map: &DMatrix<f64>) -> Field {
        match self {
            Field::Poly { m, n, coeffs } => Field::Poly {
                m,
                n,
                coeffs: coeffs * map,
            },
            Field::Spline { basis, coef } => Field::Spline {
                basis,
                coef: coef * map,
            },
            Field::Patched(mut p) => {
                for part in &mut p.parts {
                    part.map = &part.map * map;
                }
                p.nin = map.ncols();
                Field::Patched(p)
            }
            Field::Blend(mut b) => {
                b.inner = b.inner.compose(map);
                b.poly = &b.poly * map;
                Field::Blend(b)
            }
        }
    }

    /// Taylor coefficients of order `≤ order` at `y` for every column of `u`
    /// (`nin × k`); the result is `ntaylor(order, n) × k`.
    pub fn taylor(&self, y: &[f64], order: usize, u: &DMatrix<f64>) -> DMatrix<f64> {
        let n = y.len();
        let nt = ntaylor(order, n);
        match self {
            Field::Poly { m, n, coeffs } => poly_taylor_map(*m, *n, y, order) * (coeffs * u),
            Field::Spline { basis, coef } => {
                let mut out = DMatrix::zeros(nt, u.ncols());
                for (idx, tv) in basis.taylor_rows(y, order) {
                    let row = coef.row(idx) * u;
                    for (a, t) in tv.iter().enumerate() {
                        if *t != 0.0 {
                            for c in 0..u.ncols() {
                                out[(a, c)] += t * row[c];
                            }
                        }
                    }
                }
                out
            }
            Field::Patched(p) => {
                let set = index_set(order + 1, n);
                let mut out = DMatrix::zeros(nt, u.ncols());
                for (i, theta) in p.pou.theta_taylor(y, order) {
                    let part = &p.parts[i];
                    let cu = &part.map * u;
                    let ft = part.field.taylor(y, order, &cu);
                    for c in 0..u.ncols() {
                        let col: Vec<f64> = ft.column(c).iter().copied().collect();
                        let prod = taylor_mul(set, &theta, &col);
                        for (a, v) in prod.iter().enumerate() {
                            out[(a, c)] += v;
                        }
                    }
                }
                out
            }
            Field::Blend(b) => {
                let theta = b.profile.taylor(y, order, b.m);
                let poly = poly_taylor_map(b.m, n, y, order) * (&b.poly * u);
                if theta.iter().all(|v| *v == 0.0) {
                    return poly;
                }
                let inner = b.inner.taylor(y, order, u);
                if theta[0] == 1.0 && theta[1..].iter().all(|v| *v == 0.0) {
                    return inner;
                }
                let set = index_set(order + 1, n);
                let mut out = poly.clone();
                for c in 0..u.ncols() {
                    let diff: Vec<f64> = (0..nt).map(|a| inner[(a, c)] - poly[(a, c)]).collect();
                    let prod = taylor_mul(set, &theta, &diff);
                    for (a, v) in prod.iter().enumerate() {
                        out[(a, c)] += v;
                    }
                }
                out
            }
        }
    }

    /// Taylor coefficients for a single input vector.
    pub fn taylor_at(&self, y: &[f64], order: usize, u: &[f64]) -> Vec<f64> {
        let um = DMatrix::from_column_slice(u.len(), 1, u);
        self.taylor(y, order, &um)
            .column(0)
            .iter()
            .copied()
            .collect()
    }

    /// Value at `y` for input `u`.
    pub fn value(&self, y: &[f64], u: &[f64]) -> f64 {
        self.taylor_at(y, 0, u)[0]
    }

    /// The jet `J_y F` (degree `m − 1`) for input `u`.
    pub fn jet(&self, y: &[f64], m: usize, u: &[f64]) -> Jet {
        let n = y.len();
        let t = self.taylor_at(y, m - 1, u);
        Jet::from_taylor_at(m, n, y, &t)
    }

    /// Breakpoints along axis `i` where the field may fail to be smooth.
    pub fn breakpoints(&self, i: usize, out: &mut Vec<f64>) {
        match self {
            Field::Poly { .. } => {}
            Field::Spline { basis, .. } => out.extend(basis.breakpoints(i)),
            Field::Patched(p) => {
                p.pou.breakpoints(i, out);
                for part in &p.parts {
                    part.field.breakpoints(i, out);
                }
            }
            Field::Blend(b) => {
                b.profile.breakpoints(i, out);
                b.inner.breakpoints(i, out);
            }
        }
    }
}

/// `∫_B Σ_{|α| = m} |∂^α F|^p` for input `u`, by Gauss–Legendre quadrature on
/// the cells cut out by the field's breakpoints (each cell further split into
/// `sub` pieces).
pub fn seminorm_pow(field: &Field, u: &[f64], b: &Rect, m: usize, p: f64, sub: usize) -> f64 {
    let n = b.n();
    let q = (2 * m + 2).max(8);
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut bp = Vec::new();
            field.breakpoints(i, &mut bp);
            let mut pts: Vec<f64> = bp
                .into_iter()
                .filter(|t| *t > b.lo[i] && *t < b.hi[i])
                .collect();
            pts.push(b.lo[i]);
            pts.push(b.hi[i]);
            pts.sort_by(f64::total_cmp);
            pts.dedup_by(|a, c| (*a - *c).abs() <= 1e-15 * (1.0 + c.abs()));
            let mut fine = Vec::new();
            for w in pts.windows(2) {
                for k in 0..sub {
                    fine.push(w[0] + (w[1] - w[0]) * k as f64 / sub as f64);
                }
            }
            fine.push(*pts.last().expect("box has two edges"));
            fine
        })
        .collect();
    let set = index_set(m + 1, n);
    let top: Vec<(usize, MultiIndex)> = set
        .items
        .iter()
        .enumerate()
        .filter(|(_, a)| a.order() == m)
        .map(|(k, a)| (k, *a))
        .collect();
    let mut total = 0.0;
    let mut eval = |y: &[f64], w: f64| {
        let t = field.taylor_at(y, m, u);
        for (k, a) in &top {
            let d = t[*k] * a.factorial();
            if d != 0.0 {
                total += w * d.abs().powf(p);
            }
        }
    };
    if n == 1 {
        for c in axes[0].windows(2) {
            let (xs, ws) = crate::quad::gauss_legendre(q, c[0], c[1]);
            for (x, w) in xs.iter().zip(&ws) {
                eval(&[*x], *w);
            }
        }
    } else {
        for c0 in axes[0].windows(2) {
            let (x0, w0) = crate::quad::gauss_legendre(q, c0[0], c0[1]);
            for c1 in axes[1].windows(2) {
                let (x1, w1) = crate::quad::gauss_legendre(q, c1[0], c1[1]);
                for (a, wa) in x0.iter().zip(&w0) {
                    for (bb, wb) in x1.iter().zip(&w1) {
                        eval(&[*a, *bb], wa * wb);
                    }
                }
            }
        }
    }
    total
}
