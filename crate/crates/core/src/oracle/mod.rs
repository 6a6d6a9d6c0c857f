//! Variational back end.
//!
//! Every functional used by the operator has the form
//!
//! ```text
//! Σ_{|α| = m} ∫ |∂^α F|^p  +  Σ_a w_a |F(x_a) − f_a|^p  +  ∫_B |F − P_0|^p / δ^{mp}
//! ```
//!
//! optionally subject to exact constraints (infinite weights and prescribed
//! derivatives at points). After discretization in a spline space each term
//! becomes a weighted scalar residual `r = a·u − b·v`, where `u` are spline
//! unknowns and `v` is the input vector (data values, anchor coefficients and
//! constraint targets). A [`System`] collects these rows.
//!
//! Two discretizations exist: [`exact`] uses Hermite splines with knots at the
//! data (one dimension), and [`discrete`] uses uniform tensor B-splines.
//! Quadratic problems are solved directly and yield linear maps `v ↦ u`;
//! other exponents are handled by iteratively reweighted least squares.

pub mod discrete;
pub mod exact;

use crate::config::{OraclePath, RunConfig};
use crate::error::{Error, Result};
use crate::field::{Field, SplineBasis};
use crate::jets::{index_set, monotonic_labels, Jet, Label, MultiIndex};
use crate::measures::{mass_closed, restrict_closed, AtomicMeasure, Rect, Weight};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::sync::Arc;

/// What a residual row measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RowKind {
    /// A quadrature sample of an `m`-th derivative.
    Seminorm,
    /// The misfit at atom `i` (index into the problem's atom list).
    Data(usize),
    /// A quadrature sample of `F − P_0`.
    Anchor,
}

/// One weighted residual `weight · |u-part · u − rhs-part · v|^p`.
#[derive(Clone, Debug)]
pub struct Row {
    /// Sparse coefficients on the unknowns.
    pub u: Vec<(usize, f64)>,
    /// Sparse coefficients on the inputs.
    pub rhs: Vec<(usize, f64)>,
    /// Nonnegative weight.
    pub weight: f64,
    /// Origin of the row.
    pub kind: RowKind,
}

/// One exact constraint `u-part · u = rhs-part · v`.
#[derive(Clone, Debug)]
pub struct Constraint {
    /// Sparse coefficients on the unknowns.
    pub u: Vec<(usize, f64)>,
    /// Sparse coefficients on the inputs.
    pub rhs: Vec<(usize, f64)>,
}

/// A discretized variational problem.
#[derive(Clone, Debug)]
pub struct System {
    /// Number of unknowns.
    pub nu: usize,
    /// Number of inputs.
    pub nin: usize,
    /// Weighted residual rows.
    pub rows: Vec<Row>,
    /// Exact constraints.
    pub cons: Vec<Constraint>,
    /// Spline basis carrying the unknowns.
    pub basis: Arc<SplineBasis>,
}

/// An atom location with its weight; data values enter as inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecAtom {
    /// Location.
    pub x: Vec<f64>,
    /// Weight.
    pub w: Weight,
}

/// A variational problem before discretization.
///
/// Inputs are laid out as `[f_0, …, f_{N−1}, P_0 coefficients (if anchored),
/// constraint targets]`.
#[derive(Clone, Debug)]
pub struct SolveSpec {
    /// Smoothness order.
    pub m: usize,
    /// Dimension.
    pub n: usize,
    /// Exponent.
    pub p: f64,
    /// Atoms.
    pub atoms: Vec<SpecAtom>,
    /// Domain of integration; `None` means all of `R^n`.
    pub domain: Option<Rect>,
    /// Scale `δ` of the anchor term `‖F − P_0‖^p_{L^p(domain)} / δ^{mp}`.
    pub anchor: Option<f64>,
    /// Prescribed derivatives `∂^α F(x)`.
    pub jets: Vec<(Vec<f64>, MultiIndex)>,
}

impl SolveSpec {
    /// A problem with the atoms of `mu` and no anchor or jet constraints.
    pub fn from_measure(mu: &AtomicMeasure, m: usize, p: f64) -> Self {
        Self {
            m,
            n: mu.n,
            p,
            atoms: mu
                .atoms
                .iter()
                .map(|a| SpecAtom {
                    x: a.x.clone(),
                    w: a.w,
                })
                .collect(),
            domain: None,
            anchor: None,
            jets: Vec::new(),
        }
    }

    /// Dimension of the polynomial space.
    pub fn dim(&self) -> usize {
        index_set(self.m, self.n).len()
    }

    /// Offset of the anchor coefficients in the input vector.
    pub fn anchor_offset(&self) -> usize {
        self.atoms.len()
    }

    /// Offset of the constraint targets in the input vector.
    pub fn target_offset(&self) -> usize {
        self.atoms.len() + if self.anchor.is_some() { self.dim() } else { 0 }
    }

    /// Number of inputs.
    pub fn nin(&self) -> usize {
        self.target_offset() + self.jets.len()
    }

    /// Assembles an input vector.
    pub fn input(&self, f: &[f64], p0: Option<&Jet>, targets: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.atoms.len(), "one value per atom");
        assert_eq!(
            targets.len(),
            self.jets.len(),
            "one target per jet constraint"
        );
        let mut v = f.to_vec();
        if self.anchor.is_some() {
            match p0 {
                Some(j) => v.extend_from_slice(j.coeffs()),
                None => v.extend(std::iter::repeat_n(0.0, self.dim())),
            }
        }
        v.extend_from_slice(targets);
        v
    }

    fn validate(&self) -> Result<()> {
        if let (Some(d), Some(dom)) = (self.anchor, &self.domain) {
            if !(d > 0.0) {
                return Err(Error::Domain(format!(
                    "anchor scale must be positive, got {d}"
                )));
            }
            let _ = dom;
        }
        if self.anchor.is_some() && self.domain.is_none() {
            return Err(Error::Domain(
                "an anchor term needs a bounded domain".into(),
            ));
        }
        for (x, a) in &self.jets {
            if a.order() >= self.m {
                return Err(Error::Domain("jet constraints need |α| < m".into()));
            }
            if let Some(d) = &self.domain {
                if !d.contains_closed(x) {
                    return Err(Error::Domain(
                        "jet constraint point outside the domain".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Discretizes a problem with the back end selected by `cfg`.
pub fn build_system(spec: &SolveSpec, cfg: &RunConfig) -> Result<System> {
    spec.validate()?;
    match cfg.oracle {
        OraclePath::Exact if spec.n == 1 => Ok(exact::build(spec)),
        OraclePath::Exact => Err(Error::Config("the exact back end needs n = 1".into())),
        OraclePath::Irls => Ok(discrete::build(spec, cfg.effective_grid())),
    }
}

/// Discretization used for local operators: the exact back end in one
/// dimension, and a coarse tensor grid otherwise.
pub fn build_local_system(spec: &SolveSpec, cfg: &RunConfig) -> Result<System> {
    spec.validate()?;
    if spec.n == 1 {
        Ok(exact::build(spec))
    } else {
        Ok(discrete::build(spec, cfg.effective_grid().min(8)))
    }
}

/// Solution of the quadratic problem as linear maps of the input.
#[derive(Clone, Debug)]
pub struct LinearSolution {
    /// The discretized problem.
    pub system: System,
    /// `nu × nin`: unknowns as a function of the input.
    pub umap: DMatrix<f64>,
    /// `rows × nin`: unweighted residuals as a function of the input.
    pub resid: DMatrix<f64>,
    /// `k × nin`: constraint violation of the returned solution; nonzero
    /// exactly for inputs whose constraints are inconsistent.
    pub gap: DMatrix<f64>,
    /// Exponent used for the row weights of the quadratic surrogate.
    pub p: f64,
}

impl LinearSolution {
    /// `Σ weight · |r|^p` for input `v` with exponent `p`, or `+∞` when the
    /// constraints are inconsistent for `v`.
    pub fn value(&self, v: &[f64], p: f64) -> f64 {
        let vv = DVector::from_column_slice(v);
        if self.gap.nrows() > 0 {
            let g = &self.gap * &vv;
            let scale = 1.0 + v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if g.amax() > 1e-9 * scale {
                return f64::INFINITY;
            }
        }
        let r = &self.resid * &vv;
        self.system
            .rows
            .iter()
            .zip(r.iter())
            .map(|(row, ri)| {
                if *ri == 0.0 {
                    0.0
                } else {
                    row.weight * ri.abs().powf(p)
                }
            })
            .sum()
    }

    /// The minimizer as a field of the input.
    pub fn field(&self) -> Field {
        Field::Spline {
            basis: self.system.basis.clone(),
            coef: self.umap.clone(),
        }
    }
}

fn dense_rows(sys: &System, weights: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let nr = sys.rows.len();
    let mut a = DMatrix::zeros(nr, sys.nu);
    let mut b = DMatrix::zeros(nr, sys.nin);
    for (i, row) in sys.rows.iter().enumerate() {
        let s = weights[i].sqrt();
        for &(j, c) in &row.u {
            a[(i, j)] += s * c;
        }
        for &(j, c) in &row.rhs {
            b[(i, j)] += s * c;
        }
    }
    (a, b)
}

/// Orthonormalized constraints `C' u = E' v` plus the consistency map.
struct Reduced {
    c: DMatrix<f64>,
    e: DMatrix<f64>,
    gap: DMatrix<f64>,
}

fn reduce_constraints(sys: &System) -> Reduced {
    let k = sys.cons.len();
    if k == 0 {
        return Reduced {
            c: DMatrix::zeros(0, sys.nu),
            e: DMatrix::zeros(0, sys.nin),
            gap: DMatrix::zeros(0, sys.nin),
        };
    }
    let mut c = DMatrix::zeros(k, sys.nu);
    let mut e = DMatrix::zeros(k, sys.nin);
    for (i, con) in sys.cons.iter().enumerate() {
        for &(j, v) in &con.u {
            c[(i, j)] += v;
        }
        for &(j, v) in &con.rhs {
            e[(i, j)] += v;
        }
    }
    // Row scaling keeps the rank decision independent of units.
    for i in 0..k {
        let s = c.row(i).amax();
        if s > 0.0 {
            c.row_mut(i).scale_mut(1.0 / s);
            e.row_mut(i).scale_mut(1.0 / s);
        }
    }
    let svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> = c.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors");
    let vt = svd.v_t.expect("right singular vectors");
    let smax = svd.singular_values.amax();
    let r = svd
        .singular_values
        .iter()
        .filter(|s| **s > 1e-10 * smax.max(1e-300))
        .count();
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let keep = &idx[..r];
    let cr = DMatrix::from_fn(r, sys.nu, |i, j| {
        svd.singular_values[keep[i]] * vt[(keep[i], j)]
    });
    let ur = DMatrix::from_fn(k, r, |i, j| u[(i, keep[j])]);
    let er = ur.transpose() * &e;
    let gap = &e - &ur * &er;
    Reduced { c: cr, e: er, gap }
}

/// Largest system solved through the normal equations.
const DENSE_LIMIT: usize = 300;

/// True when a system is solved by SVD least squares on its rows.
///
/// One-dimensional grids always take this route: their normal equations have
/// a condition number near `cells^{2m}`, which at `m ≥ 2` is beyond what an LU
/// factorization can resolve for the polynomials the seminorm annihilates.
fn use_dense(sys: &System) -> bool {
    sys.nu <= DENSE_LIMIT || matches!(&*sys.basis, SplineBasis::Tensor(t) if t.n() == 1)
}

/// Solves the quadratic surrogate: rows weighted by `weight^{2/p}`.
pub fn solve_linear(sys: System, p: f64, damping: f64) -> Result<LinearSolution> {
    let weights: Vec<f64> = sys.rows.iter().map(|r| r.weight.powf(2.0 / p)).collect();
    let red = reduce_constraints(&sys);
    let umap = if use_dense(&sys) {
        solve_dense(&sys, &weights, &red)?
    } else {
        solve_kkt(&sys, &weights, &red, damping, None)?
    };
    let resid = residual_map(&sys, &umap);
    Ok(LinearSolution {
        system: sys,
        umap,
        resid,
        gap: red.gap,
        p,
    })
}

fn residual_map(sys: &System, umap: &DMatrix<f64>) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(sys.rows.len(), sys.nin);
    for (i, row) in sys.rows.iter().enumerate() {
        for &(j, c) in &row.u {
            for k in 0..sys.nin {
                r[(i, k)] += c * umap[(j, k)];
            }
        }
        for &(j, c) in &row.rhs {
            r[(i, j)] -= c;
        }
    }
    r
}

fn pinv_solve(a: DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let nc = a.ncols();
    if nc == 0 {
        return DMatrix::zeros(0, rhs.ncols());
    }
    let norms: Vec<f64> = (0..nc).map(|j| a.column(j).norm()).collect();
    let nmax = norms.iter().copied().fold(0.0f64, f64::max);
    // Columns at rounding level are left unscaled so that noise is not amplified.
    let scales: Vec<f64> = norms
        .iter()
        .map(|&s| if s > 1e-12 * nmax { 1.0 / s } else { 1.0 })
        .collect();
    let mut a = a;
    for (j, s) in scales.iter().enumerate() {
        a.column_mut(j).scale_mut(*s);
    }
    // Full-rank tall systems are solved by pivoted QR; the rest, and systems
    // whose triangular factor is numerically singular, by truncated SVD.
    if a.nrows() >= nc {
        let qr = a.clone().col_piv_qr();
        let r = qr.r();
        let r0 = r[(0, 0)].abs();
        if r0 > 0.0 && (0..nc).all(|i| r[(i, i)].abs() > 1e-12 * r0) {
            let mut qtb = rhs.clone();
            qr.q_tr_mul(&mut qtb);
            let mut z = qtb.rows(0, nc).into_owned();
            if r.view((0, 0), (nc, nc)).solve_upper_triangular_mut(&mut z) {
                qr.p().inv_permute_rows(&mut z);
                return DMatrix::from_fn(nc, rhs.ncols(), |i, k| z[(i, k)] * scales[i]);
            }
        }
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.amax();
    let tol = 1e-12 * smax.max(1e-300);
    let z = svd
        .solve(rhs, tol)
        .expect("singular vectors were requested");
    DMatrix::from_fn(nc, rhs.ncols(), |i, k| z[(i, k)] * scales[i])
}

fn solve_dense(sys: &System, weights: &[f64], red: &Reduced) -> Result<DMatrix<f64>> {
    let (a, b) = dense_rows(sys, weights);
    if red.c.nrows() == 0 {
        return Ok(pinv_solve(a, &b));
    }
    // Particular solution and null space of the reduced constraints.
    // The reduced constraints have full row rank; the trailing columns of a
    // complete QR factor of their transpose span the null space.
    let k = red.c.nrows();
    let nu = sys.nu;
    let up = pinv_solve(red.c.clone(), &red.e);
    if k >= nu {
        return Ok(up);
    }
    let qr = red.c.transpose().qr();
    let mut qt = DMatrix::identity(nu, nu);
    qr.q_tr_mul(&mut qt);
    let nmat = qt.rows(k, nu - k).transpose();
    let an = &a * &nmat;
    let rhs = &b - &a * &up;
    let z = pinv_solve(an, &rhs);
    Ok(up + nmat * z)
}

fn solve_kkt(
    sys: &System,
    weights: &[f64],
    red: &Reduced,
    damping: f64,
    fixed_rhs: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>> {
    let nu = sys.nu;
    let k = red.c.nrows();
    let ncols = if fixed_rhs.is_some() { 1 } else { sys.nin };
    let mut normal = DMatrix::zeros(nu, nu);
    let mut rhs = DMatrix::zeros(nu + k, ncols);
    for (row, &w) in sys.rows.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for &(i, ci) in &row.u {
            for &(j, cj) in &row.u {
                normal[(i, j)] += w * ci * cj;
            }
            match fixed_rhs {
                Some(b) => {
                    let bv: f64 = row.rhs.iter().map(|&(j, c)| c * b[j]).sum();
                    rhs[(i, 0)] += w * ci * bv;
                }
                None => {
                    for &(j, c) in &row.rhs {
                        rhs[(i, j)] += w * ci * c;
                    }
                }
            }
        }
    }
    // The seminorm part of the diagonal grows like `h^{n − mp}` on a grid of
    // spacing `h`, while the polynomials of degree `m − 1` it annihilates are
    // pinned only by the data terms. Dividing by `cells^{mp}` keeps the
    // damping a fixed multiple of `∫ |F|^2` at every resolution.
    let resolution = match &*sys.basis {
        SplineBasis::Tensor(t) => {
            let cells = t.cells.iter().copied().max().unwrap_or(1) as f64;
            cells.powi(2 * t.m as i32)
        }
        SplineBasis::Hermite(_) => 1.0,
    };
    let diag_max = (0..nu).map(|i| normal[(i, i)]).fold(0.0f64, f64::max);
    let lambda = damping * diag_max.max(1e-300) / resolution;
    for i in 0..nu {
        normal[(i, i)] += lambda;
    }
    let mut kkt = DMatrix::zeros(nu + k, nu + k);
    kkt.view_mut((0, 0), (nu, nu)).copy_from(&normal);
    if k > 0 {
        kkt.view_mut((nu, 0), (k, nu)).copy_from(&red.c);
        kkt.view_mut((0, nu), (nu, k)).copy_from(&red.c.transpose());
        match fixed_rhs {
            Some(b) => {
                let e = &red.e * b;
                rhs.view_mut((nu, 0), (k, 1)).copy_from(&e);
            }
            None => rhs.view_mut((nu, 0), (k, sys.nin)).copy_from(&red.e),
        }
    }
    let lu = kkt.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("KKT system is singular".into()))?;
    Ok(sol.rows(0, nu).into_owned())
}

/// Outcome of a single nonlinear or quadratic solve.
#[derive(Clone, Debug, Serialize)]
pub struct SolveResult {
    /// Optimal value of the `p`-th power functional.
    pub value: f64,
    /// Spline unknowns of the minimizer.
    #[serde(skip)]
    pub u: Vec<f64>,
    /// Objective after each IRLS iteration (empty for direct solves).
    pub history: Vec<f64>,
    /// Largest violation of an exact constraint by the minimizer.
    pub constraint_residual: f64,
    /// Back end that produced the value.
    pub path: OraclePath,
    /// Spline basis of the minimizer.
    #[serde(skip)]
    pub basis: Option<Arc<SplineBasis>>,
}

impl SolveResult {
    /// `value^{1/p}`.
    pub fn norm(&self, p: f64) -> f64 {
        self.value.powf(1.0 / p)
    }

    /// Evaluates the minimizer at `y`.
    pub fn eval(&self, y: &[f64]) -> f64 {
        match &self.basis {
            Some(b) => b
                .taylor_rows(y, 0)
                .iter()
                .map(|(i, t)| self.u[*i] * t[0])
                .sum(),
            None => 0.0,
        }
    }

    /// The minimizer as a field with a single input equal to one.
    pub fn field(&self) -> Option<Field> {
        self.basis.as_ref().map(|b| Field::Spline {
            basis: b.clone(),
            coef: DMatrix::from_column_slice(self.u.len(), 1, &self.u),
        })
    }
}

fn objective(sys: &System, u: &DVector<f64>, v: &DVector<f64>, p: f64) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut res = Vec::with_capacity(sys.rows.len());
    for row in &sys.rows {
        let r: f64 = row.u.iter().map(|&(j, c)| c * u[j]).sum::<f64>()
            - row.rhs.iter().map(|&(j, c)| c * v[j]).sum::<f64>();
        if r != 0.0 {
            total += row.weight * r.abs().powf(p);
        }
        res.push(r);
    }
    (total, res)
}

fn constraint_violation(sys: &System, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    sys.cons
        .iter()
        .map(|c| {
            let lhs: f64 = c.u.iter().map(|&(j, a)| a * u[j]).sum();
            let rhs: f64 = c.rhs.iter().map(|&(j, a)| a * v[j]).sum();
            (lhs - rhs).abs()
        })
        .fold(0.0, f64::max)
}

/// Minimizes `Σ weight |r|^p` for the input `v`.
///
/// `p = 2` is solved directly. Other exponents start from the quadratic
/// surrogate and run IRLS with step halving; the iteration stops when the
/// relative decrease falls below `cfg.irls_tol` or after `cfg.irls_max_iter`
/// iterations.
pub fn solve_value(sys: System, v: &[f64], cfg: &RunConfig, p: f64) -> Result<SolveResult> {
    let path = if matches!(&*sys.basis, SplineBasis::Hermite(_)) {
        OraclePath::Exact
    } else {
        OraclePath::Irls
    };
    let vv = DVector::from_column_slice(v);
    let red = reduce_constraints(&sys);
    if red.gap.nrows() > 0 {
        let g = &red.gap * &vv;
        let scale = 1.0 + v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if g.amax() > 1e-9 * scale {
            return Ok(SolveResult {
                value: f64::INFINITY,
                u: vec![0.0; sys.nu],
                history: Vec::new(),
                constraint_residual: g.amax(),
                path,
                basis: Some(sys.basis.clone()),
            });
        }
    }
    let weights0: Vec<f64> = sys.rows.iter().map(|r| r.weight.powf(2.0 / p)).collect();
    let solve_weighted = |w: &[f64]| -> Result<DVector<f64>> {
        if use_dense(&sys) {
            let um = solve_dense(&sys, w, &red)?;
            Ok(um * &vv)
        } else {
            let um = solve_kkt(&sys, w, &red, cfg.irls_damping, Some(&vv))?;
            Ok(um.column(0).into_owned())
        }
    };
    let mut u = solve_weighted(&weights0)?;
    let (mut best, mut res) = objective(&sys, &u, &vv, p);
    let mut history = Vec::new();
    if p != 2.0 {
        for _ in 0..cfg.irls_max_iter {
            let rmax = res.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let eta = 1e-8 * rmax.max(1e-300);
            let w: Vec<f64> = sys
                .rows
                .iter()
                .zip(&res)
                .map(|(row, r)| row.weight * r.abs().max(eta).powf(p - 2.0))
                .collect();
            let cand = solve_weighted(&w)?;
            let mut t = 1.0;
            let mut accepted = None;
            while t > 1.0 / 1024.0 {
                let trial = &u + (&cand - &u) * t;
                let (val, r) = objective(&sys, &trial, &vv, p);
                if val <= best {
                    accepted = Some((trial, val, r));
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some((trial, val, r)) => {
                    let rel = (best - val) / best.max(1e-300);
                    u = trial;
                    best = val;
                    res = r;
                    history.push(best);
                    if rel < cfg.irls_tol {
                        break;
                    }
                }
                None => break,
            }
        }
    }
    let constraint_residual = constraint_violation(&sys, &u, &vv);
    Ok(SolveResult {
        value: best,
        u: u.iter().copied().collect(),
        history,
        constraint_residual,
        path,
        basis: Some(sys.basis.clone()),
    })
}

/// `inf_F ‖F‖^p_{L^{m,p}} + Σ w |F(x) − f|^p` over `R^n` (the `p`-th power
/// of `‖f‖_{𝒥(μ)}`).
pub fn j_norm(mu: &AtomicMeasure, cfg: &RunConfig) -> Result<SolveResult> {
    let spec = SolveSpec::from_measure(mu, cfg.m, cfg.p);
    let v = spec.input(&mu.values(), None, &[]);
    solve_value(build_system(&spec, cfg)?, &v, cfg, cfg.p)
}

/// `inf_F ‖F‖^p_{L^{m,p}(B)} + Σ w |F(x) − f|^p + ‖F − P_0‖^p_{L^p(B)} / δ^{mp}`
/// over functions on the box `B`.
pub fn j_norm_with_jet(
    mu: &AtomicMeasure,
    p0: &Jet,
    delta: f64,
    domain: &Rect,
    cfg: &RunConfig,
) -> Result<SolveResult> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("δ must be positive, got {delta}")));
    }
    let local = restrict_closed(mu, domain);
    let mut spec = SolveSpec::from_measure(&local, cfg.m, cfg.p);
    spec.domain = Some(domain.clone());
    spec.anchor = Some(delta);
    let v = spec.input(&local.values(), Some(p0), &[]);
    solve_value(build_system(&spec, cfg)?, &v, cfg, cfg.p)
}

/// `inf { ‖F‖_{𝒥(0, μ|scope)} : J_x F = P }`, the gauge of `P` for `σ_J(x, μ|scope)`.
pub fn gauge(
    p_jet: &Jet,
    x: &[f64],
    mu: &AtomicMeasure,
    scope: &Rect,
    cfg: &RunConfig,
) -> Result<f64> {
    let local = restrict_closed(mu, scope);
    let set = index_set(cfg.m, mu.n);
    let mut spec = SolveSpec::from_measure(&local, cfg.m, cfg.p);
    spec.jets = set.items.iter().map(|a| (x.to_vec(), *a)).collect();
    let targets = p_jet.derivs_at(x);
    let v = spec.input(&vec![0.0; local.len()], None, &targets);
    let r = solve_value(build_system(&spec, cfg)?, &v, cfg, cfg.p)?;
    Ok(r.norm(cfg.p))
}

/// Outcome of [`has_basis`].
#[derive(Clone, Debug, Serialize)]
pub struct BasisResult {
    /// True when every gauge is within its threshold.
    pub ok: bool,
    /// Minimal gauge per member of the label.
    pub gauges: Vec<f64>,
    /// Threshold `ε δ^{n/p + |α| − m}` per member.
    pub thresholds: Vec<f64>,
    /// Jets `J_x F` of the minimizers (the candidate basis).
    #[serde(skip)]
    pub jets: Vec<Jet>,
}

/// Tests whether `σ_J(x, μ|scope)` contains an `(A, x, ε, δ)`-basis.
///
/// For each `α ∈ A` the gauge is minimized subject to `∂^β F(x) = δ_{αβ}` for
/// `β ∈ A` and `∂^β F(x) = 0` for `β > α` outside `A`; the label passes when
/// every minimum is at most `ε δ^{n/p + |α| − m}`.
pub fn has_basis(
    a: &Label,
    x: &[f64],
    eps: f64,
    delta: f64,
    mu: &AtomicMeasure,
    scope: &Rect,
    cfg: &RunConfig,
) -> Result<BasisResult> {
    let local = restrict_closed(mu, scope);
    has_basis_local(a, x, eps, delta, &local, cfg, true)
}

fn has_basis_local(
    a: &Label,
    x: &[f64],
    eps: f64,
    delta: f64,
    local: &AtomicMeasure,
    cfg: &RunConfig,
    early_exit: bool,
) -> Result<BasisResult> {
    let (m, n, p) = (cfg.m, local.n, cfg.p);
    let set = index_set(m, n);
    let mut out = BasisResult {
        ok: true,
        gauges: Vec::new(),
        thresholds: Vec::new(),
        jets: Vec::new(),
    };
    for alpha in a.members() {
        let mut spec = SolveSpec::from_measure(local, m, p);
        let mut targets = Vec::new();
        for beta in &set.items {
            let fixed = a.contains(beta) || crate::jets::multiindex_less(&alpha, beta);
            if fixed {
                spec.jets.push((x.to_vec(), *beta));
                targets.push(if *beta == alpha { 1.0 } else { 0.0 });
            }
        }
        let v = spec.input(&vec![0.0; local.len()], None, &targets);
        let sys = build_system(&spec, cfg)?;
        let r = solve_value(sys, &v, cfg, p)?;
        let g = r.norm(p);
        let thr = eps * delta.powf(n as f64 / p + alpha.order() as f64 - m as f64);
        out.gauges.push(g);
        out.thresholds.push(thr);
        let jet = match &r.basis {
            Some(b) => {
                let t: Vec<f64> = {
                    let mut acc = vec![0.0; set.len()];
                    for (i, tv) in b.taylor_rows(x, m - 1) {
                        for (k, val) in tv.iter().enumerate() {
                            acc[k] += r.u[i] * val;
                        }
                    }
                    acc
                };
                Jet::from_taylor_at(m, n, x, &t)
            }
            None => Jet::zero(m, n),
        };
        out.jets.push(jet);
        if !(g <= thr) {
            out.ok = false;
            if early_exit {
                break;
            }
        }
    }
    Ok(out)
}

/// Why a cube is OK.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Witness {
    /// The mass of `3Q` is below the small-mass threshold.
    SmallMass,
    /// A monotonic label strictly below the current one admits bases at every atom of `3Q`.
    Label(Label),
}

/// Outcome of [`ok_test`].
#[derive(Clone, Debug, Serialize)]
pub struct OkResult {
    /// True when the cube is OK.
    pub ok: bool,
    /// The easiest witness, when OK.
    pub witness: Option<Witness>,
    /// Mass of the closed box `3Q`.
    pub mass: f64,
}

/// The small-mass threshold `ε (30 δ_Q)^{n/p − m}` compared against `μ(3Q)^{1/p}`.
pub fn small_mass_threshold(delta_q: f64, cfg: &RunConfig) -> f64 {
    cfg.eps_basis * (30.0 * delta_q).powf(cfg.n as f64 / cfg.p - cfg.m as f64)
}

/// Decides whether the cube `q` is OK for label `a`.
///
/// The cube is OK when the mass of `3Q` is small, or when some monotonic
/// label `Ā < A` (tried in ascending order) admits an `(Ā, x, ε, 30 δ_Q)`-basis
/// for `σ_J(x, μ|_{3Q})` at every atom `x ∈ 3Q`.
pub fn ok_test(q: &Rect, a: &Label, mu: &AtomicMeasure, cfg: &RunConfig) -> Result<OkResult> {
    let delta = q.max_side();
    let q3 = q.dilate(3.0);
    let mass = mass_closed(mu, &q3);
    if mass == 0.0 || mass.powf(1.0 / cfg.p) <= small_mass_threshold(delta, cfg) {
        return Ok(OkResult {
            ok: true,
            witness: Some(Witness::SmallMass),
            mass,
        });
    }
    let local = restrict_closed(mu, &q3);
    let found = find_label(a, &local, 30.0 * delta, cfg)?;
    Ok(OkResult {
        ok: found.is_some(),
        witness: found.map(Witness::Label),
        mass,
    })
}

/// The first monotonic `Ā < A` admitting an `(Ā, x, ε, δ)`-basis for
/// `σ_J(x, μ)` at every atom of `μ`.
pub fn find_label(
    a: &Label,
    mu: &AtomicMeasure,
    delta: f64,
    cfg: &RunConfig,
) -> Result<Option<Label>> {
    for cand in monotonic_labels(cfg.m, mu.n) {
        if !cand.less(a) {
            continue;
        }
        let mut all = true;
        for atom in &mu.atoms {
            let r = has_basis_local(&cand, &atom.x, cfg.eps_basis, delta, mu, cfg, true)?;
            if !r.ok {
                all = false;
                break;
            }
        }
        if all {
            return Ok(Some(cand));
        }
    }
    Ok(None)
}

/// Residual maps of a local quadratic solve used by the operator.
#[derive(Clone, Debug)]
pub struct LocalSolve {
    /// The solved problem.
    pub solution: LinearSolution,
    /// Number of atoms (leading inputs).
    pub natoms: usize,
    /// Number of anchor coefficients following the atoms.
    pub ndim: usize,
}

/// Solves `min ‖F‖^p_{L^{m,p}(B)} + Σ w |F − f|^p + ‖F − P‖^p_{L^p(B)}/δ^{mp}`
/// in its quadratic surrogate form, returning maps of `(f, P)`.
pub fn local_solve(
    atoms: &[SpecAtom],
    domain: &Rect,
    delta: f64,
    cfg: &RunConfig,
) -> Result<LocalSolve> {
    let spec = SolveSpec {
        m: cfg.m,
        n: domain.n(),
        p: cfg.p,
        atoms: atoms.to_vec(),
        domain: Some(domain.clone()),
        anchor: Some(delta),
        jets: Vec::new(),
    };
    let sys = build_local_system(&spec, cfg)?;
    let solution = solve_linear(sys, cfg.p, cfg.irls_damping)?;
    Ok(LocalSolve {
        solution,
        natoms: atoms.len(),
        ndim: spec.dim(),
    })
}
