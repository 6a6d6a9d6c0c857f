//! Linear selection of near-minimizers over finite-dimensional blocks.
//!
//! A [`QuadraticBlockProblem`] has residuals `λ_ℓ(v, w) = (A_v v + A_w w)_ℓ`
//! with weights `ν_ℓ` and objective `M(v, w) = Σ_ℓ ν_ℓ |λ_ℓ(v, w)|^p`. The
//! selectors return a matrix `W` such that `w = W v` nearly minimizes
//! `M(v, ·)`; `W` does not depend on `v`, so the selection is linear.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::Serialize;

/// Objective data of a selection problem.
#[derive(Clone, Debug)]
pub struct QuadraticBlockProblem {
    /// `T × nv` coefficients of the fixed block.
    pub av: DMatrix<f64>,
    /// `T × nw` coefficients of the selected block.
    pub aw: DMatrix<f64>,
    /// Nonnegative finite weights `ν_ℓ`.
    pub weights: Vec<f64>,
    /// Exponent `p ≥ 1`.
    pub p: f64,
    /// Optional constraint `Ψ_v v + Ψ_w w = 0`.
    pub constraint: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Which formula produced a selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Method {
    /// Coordinatewise weighted averages, eliminated in index order.
    Sequential,
    /// Joint weighted least squares (only for `p = 2`).
    Joint,
    /// Everything fixed by the constraint.
    Forced,
}

/// A linear selection `w = map · v`.
#[derive(Clone, Debug)]
pub struct Selection {
    /// `nw × nv` matrix.
    pub map: DMatrix<f64>,
    /// Formula used.
    pub method: Method,
}

impl QuadraticBlockProblem {
    /// An unconstrained problem.
    pub fn new(av: DMatrix<f64>, aw: DMatrix<f64>, weights: Vec<f64>, p: f64) -> Self {
        Self {
            av,
            aw,
            weights,
            p,
            constraint: None,
        }
    }

    /// Number of fixed parameters.
    pub fn nv(&self) -> usize {
        self.av.ncols()
    }

    /// Number of selected parameters.
    pub fn nw(&self) -> usize {
        self.aw.ncols()
    }

    /// `M(v, w)`.
    pub fn objective(&self, v: &[f64], w: &[f64]) -> f64 {
        objective(&self.av, &self.aw, &self.weights, self.p, v, w)
    }

    fn validate(&self) -> Result<()> {
        let t = self.av.nrows();
        if self.aw.nrows() != t || self.weights.len() != t {
            return Err(Error::Domain(
                "residual blocks have inconsistent lengths".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Domain(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if !(self.p >= 1.0) {
            return Err(Error::Domain(format!(
                "p must be at least 1, got {}",
                self.p
            )));
        }
        Ok(())
    }
}

fn objective(
    av: &DMatrix<f64>,
    aw: &DMatrix<f64>,
    weights: &[f64],
    p: f64,
    v: &[f64],
    w: &[f64],
) -> f64 {
    (0..av.nrows())
        .map(|l| {
            let r: f64 = (0..av.ncols()).map(|j| av[(l, j)] * v[j]).sum::<f64>()
                + (0..aw.ncols()).map(|j| aw[(l, j)] * w[j]).sum::<f64>();
            if r == 0.0 {
                0.0
            } else {
                weights[l] * r.abs().powf(p)
            }
        })
        .sum()
}

/// Sequential coordinate formula.
///
/// Coordinates are eliminated in index order. For coordinate `j`, with
/// `a_ℓ = −A_w[ℓ, j]` and `Λ̂_ℓ` the rest of residual `ℓ`,
/// `w_j = Σ ν|a|^p (Λ̂/a) / Σ ν|a|^p` (zero when every `a_ℓ` vanishes); the
/// formula is substituted into the remaining residuals and the coordinates
/// are recovered by back substitution.
pub fn sequential_map(
    av: &DMatrix<f64>,
    aw: &DMatrix<f64>,
    weights: &[f64],
    p: f64,
) -> DMatrix<f64> {
    let (t, nv, nw) = (av.nrows(), av.ncols(), aw.ncols());
    let mut r = DMatrix::zeros(t, nv + nw);
    r.view_mut((0, 0), (t, nv)).copy_from(av);
    r.view_mut((0, nv), (t, nw)).copy_from(aw);
    let mut rules: Vec<Vec<f64>> = Vec::with_capacity(nw);
    for j in 0..nw {
        let col = nv + j;
        let a: Vec<f64> = (0..t).map(|l| -r[(l, col)]).collect();
        let den: f64 = (0..t)
            .filter(|&l| a[l] != 0.0)
            .map(|l| weights[l] * a[l].abs().powf(p))
            .sum();
        let mut c = vec![0.0; nv + nw];
        if den > 0.0 {
            for l in 0..t {
                if a[l] == 0.0 || weights[l] == 0.0 {
                    continue;
                }
                let k = weights[l] * a[l].abs().powf(p) / a[l] / den;
                for (i, ci) in c.iter_mut().enumerate() {
                    if i != col {
                        *ci += k * r[(l, i)];
                    }
                }
            }
        }
        for l in 0..t {
            let al = a[l];
            r[(l, col)] = 0.0;
            if al != 0.0 {
                for (i, ci) in c.iter().enumerate() {
                    if *ci != 0.0 {
                        r[(l, i)] -= al * ci;
                    }
                }
            }
        }
        rules.push(c);
    }
    let mut w = DMatrix::zeros(nw, nv);
    for j in (0..nw).rev() {
        let c = &rules[j];
        for k in 0..nv {
            let mut s = c[k];
            for i in (j + 1)..nw {
                s += c[nv + i] * w[(i, k)];
            }
            w[(j, k)] = s;
        }
    }
    w
}

/// Joint weighted least squares `w = −(√ν A_w)^+ (√ν A_v) v`.
pub fn joint_map(av: &DMatrix<f64>, aw: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let t = av.nrows();
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let a = DMatrix::from_fn(t, aw.ncols(), |l, j| sw[l] * aw[(l, j)]);
    let b = DMatrix::from_fn(t, av.ncols(), |l, j| -sw[l] * av[(l, j)]);
    if a.ncols() == 0 || t == 0 {
        return DMatrix::zeros(aw.ncols(), av.ncols());
    }
    let svd = a.svd(true, true);
    let tol = 1e-12 * svd.singular_values.amax().max(1e-300);
    svd.solve(&b, tol).expect("singular vectors were requested")
}

fn probe_cost(
    av: &DMatrix<f64>,
    aw: &DMatrix<f64>,
    weights: &[f64],
    p: f64,
    map: &DMatrix<f64>,
) -> f64 {
    (0..av.ncols())
        .map(|k| {
            let mut v = vec![0.0; av.ncols()];
            v[k] = 1.0;
            let w: Vec<f64> = (0..map.nrows()).map(|i| map[(i, k)]).collect();
            objective(av, aw, weights, p, &v, &w)
        })
        .sum()
}

fn select_free(av: &DMatrix<f64>, aw: &DMatrix<f64>, weights: &[f64], p: f64) -> Selection {
    let seq = sequential_map(av, aw, weights, p);
    if p != 2.0 {
        return Selection {
            map: seq,
            method: Method::Sequential,
        };
    }
    let joint = joint_map(av, aw, weights);
    let cs = probe_cost(av, aw, weights, p, &seq);
    let cj = probe_cost(av, aw, weights, p, &joint);
    if cj <= cs {
        Selection {
            map: joint,
            method: Method::Joint,
        }
    } else {
        Selection {
            map: seq,
            method: Method::Sequential,
        }
    }
}

/// Unconstrained selection.
///
/// Returns the sequential coordinate formula; for `p = 2` the joint least
/// squares map is computed as well and whichever has the smaller summed
/// objective over the unit probes `v = e_k` is returned (the joint map on
/// ties). Both candidates are linear, so the result is linear.
pub fn select(problem: &QuadraticBlockProblem) -> Result<Selection> {
    problem.validate()?;
    if problem.constraint.is_some() {
        return select_constrained(problem);
    }
    Ok(select_free(
        &problem.av,
        &problem.aw,
        &problem.weights,
        problem.p,
    ))
}

/// Selection subject to `Ψ_v v + Ψ_w w = 0`.
///
/// Gaussian elimination with full pivoting on `Ψ_w` picks one pivot
/// coordinate per constraint; these are expressed through `v` and the free
/// coordinates, substituted into the residuals, and the free block is
/// selected with [`select`]. Fails when `Ψ_w` does not have full row rank.
pub fn select_constrained(problem: &QuadraticBlockProblem) -> Result<Selection> {
    problem.validate()?;
    let (psi_v, psi_w) = match &problem.constraint {
        Some(c) => c,
        None => return select(problem),
    };
    let (k, nw, nv) = (psi_w.nrows(), problem.nw(), problem.nv());
    if psi_v.nrows() != k || psi_v.ncols() != nv || psi_w.ncols() != nw {
        return Err(Error::Domain(
            "constraint blocks have inconsistent shapes".into(),
        ));
    }
    if k == 0 {
        return Ok(select_free(
            &problem.av,
            &problem.aw,
            &problem.weights,
            problem.p,
        ));
    }
    let pivots = full_pivot_columns(psi_w)?;
    let free: Vec<usize> = (0..nw).filter(|j| !pivots.contains(j)).collect();
    let psi_p = DMatrix::from_fn(k, k, |i, j| psi_w[(i, pivots[j])]);
    let psi_f = DMatrix::from_fn(k, free.len(), |i, j| psi_w[(i, free[j])]);
    let g = psi_p
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("constraint map not surjective".into()))?;
    // w_P = −G Ψ_v v − G Ψ_F w_F.
    let pv = -(&g * psi_v);
    let pf = -(&g * &psi_f);
    let t = problem.av.nrows();
    let aw_p = DMatrix::from_fn(t, k, |l, j| problem.aw[(l, pivots[j])]);
    let aw_f = DMatrix::from_fn(t, free.len(), |l, j| problem.aw[(l, free[j])]);
    let av_red = &problem.av + &aw_p * &pv;
    let aw_red = &aw_f + &aw_p * &pf;
    let (wf, method) = if free.is_empty() {
        (DMatrix::zeros(0, nv), Method::Forced)
    } else {
        let s = select_free(&av_red, &aw_red, &problem.weights, problem.p);
        (s.map, s.method)
    };
    let wp = &pv + &pf * &wf;
    let mut map = DMatrix::zeros(nw, nv);
    for (j, &c) in pivots.iter().enumerate() {
        map.row_mut(c).copy_from(&wp.row(j));
    }
    for (j, &c) in free.iter().enumerate() {
        map.row_mut(c).copy_from(&wf.row(j));
    }
    Ok(Selection { map, method })
}

/// Pivot columns chosen by Gaussian elimination with full pivoting.
fn full_pivot_columns(a: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (k, nw) = (a.nrows(), a.ncols());
    if k > nw {
        return Err(Error::Degenerate("constraint map not surjective".into()));
    }
    let mut m = a.clone();
    let scale = m.amax();
    let tol = 1e-12 * scale.max(1e-300);
    let mut rows: Vec<usize> = (0..k).collect();
    let mut cols: Vec<usize> = (0..nw).collect();
    let mut pivots = Vec::with_capacity(k);
    for step in 0..k {
        let mut best = (step, step, 0.0f64);
        for (ri, &r) in rows.iter().enumerate().skip(step) {
            for (ci, &c) in cols.iter().enumerate().skip(step) {
                let v = m[(r, c)].abs();
                if v > best.2 {
                    best = (ri, ci, v);
                }
            }
        }
        if !(best.2 > tol) || scale == 0.0 {
            return Err(Error::Degenerate("constraint map not surjective".into()));
        }
        rows.swap(step, best.0);
        cols.swap(step, best.1);
        let (pr, pc) = (rows[step], cols[step]);
        pivots.push(pc);
        let piv = m[(pr, pc)];
        for &r in rows.iter().skip(step + 1) {
            let f = m[(r, pc)] / piv;
            if f != 0.0 {
                for c in 0..nw {
                    let val = m[(pr, c)];
                    m[(r, c)] -= f * val;
                }
            }
        }
    }
    Ok(pivots)
}

/// The guarantee factor `(1 + 2^p)^k` for `k` selected coordinates.
pub fn guarantee_factor(p: f64, k: usize) -> f64 {
    (1.0 + 2f64.powf(p)).powi(k as i32)
}
