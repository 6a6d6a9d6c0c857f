//! Smooth cutoffs, partitions of unity and the gluing primitive.
//!
//! All bumps are tensor products of a one-dimensional profile that equals one
//! on an inner interval, zero outside an outer interval, and follows the
//! smoothstep `S(u) = u^{m+1} Σ_{k=0}^{m} C(m+k, k)(1−u)^k` in between. `S` has
//! degree `2m + 1` and its derivatives of order `1..=m` vanish at both ends,
//! so every bump is `C^m`.

use crate::error::{Error, Result};
use crate::field::{Blend, Field};
use crate::jets::{binomial, factorial, index_set, taylor_mul, taylor_recip};
use crate::measures::Rect;
use nalgebra::DMatrix;
use serde::Serialize;

/// Fraction of a cube's side used as collar on each side (support `1.1Q`).
pub const COLLAR: f64 = 0.05;

/// Ascending coefficients of the smoothstep of order `m`.
pub fn smoothstep_coeffs(m: usize) -> Vec<f64> {
    let mut c = vec![0.0; 2 * m + 2];
    for k in 0..=m {
        let a = binomial(m + k, k);
        for l in 0..=k {
            let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
            c[m + 1 + l] += a * binomial(k, l) * sign;
        }
    }
    c
}

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

/// A tensor-product cutoff: one on `inner`, zero outside `outer`.
#[derive(Clone, Debug, Serialize)]
pub struct Profile {
    /// Box where the cutoff equals one.
    pub inner: Rect,
    /// Box outside which the cutoff vanishes.
    pub outer: Rect,
}

impl Profile {
    /// Builds a profile; `inner` must lie inside `outer`.
    pub fn new(inner: Rect, outer: Rect) -> Self {
        Self { inner, outer }
    }

    /// Derivatives `g^{(i)}(t)`, `i ≤ order`, of the profile along axis `i`.
    fn axis_derivs(&self, axis: usize, t: f64, order: usize, m: usize) -> Vec<f64> {
        let (ilo, ihi) = (self.inner.lo[axis], self.inner.hi[axis]);
        let (olo, ohi) = (self.outer.lo[axis], self.outer.hi[axis]);
        let mut d = vec![0.0; order + 1];
        if t < olo || t > ohi {
            return d;
        }
        if t >= ilo && t <= ihi {
            d[0] = 1.0;
            return d;
        }
        let s = smoothstep_coeffs(m);
        if t > ihi {
            let w = ohi - ihi;
            let v = poly_derivs(&s, (t - ihi) / w, order);
            for (i, vi) in v.iter().enumerate() {
                d[i] = -vi / w.powi(i as i32);
            }
            d[0] += 1.0;
        } else {
            let w = ilo - olo;
            let v = poly_derivs(&s, (t - olo) / w, order);
            for (i, vi) in v.iter().enumerate() {
                d[i] = vi / w.powi(i as i32);
            }
        }
        d
    }

    /// Taylor coefficients of the cutoff at `y` up to `order`.
    pub fn taylor(&self, y: &[f64], order: usize, m: usize) -> Vec<f64> {
        let n = y.len();
        let set = index_set(order + 1, n);
        let axes: Vec<Vec<f64>> = (0..n)
            .map(|i| self.axis_derivs(i, y[i], order, m))
            .collect();
        set.items
            .iter()
            .map(|a| (0..n).map(|i| axes[i][a.get(i)]).product::<f64>() / a.factorial())
            .collect()
    }

    /// Value of the cutoff at `y`.
    pub fn value(&self, y: &[f64], m: usize) -> f64 {
        self.taylor(y, 0, m)[0]
    }

    /// Edges along axis `i` where the profile changes its formula.
    pub fn breakpoints(&self, i: usize, out: &mut Vec<f64>) {
        out.extend([
            self.outer.lo[i],
            self.inner.lo[i],
            self.inner.hi[i],
            self.outer.hi[i],
        ]);
    }
}

/// A partition of unity `θ_i = φ_i / Σ_j φ_j` subordinate to `{1.1 Q_i}`.
#[derive(Clone, Debug)]
pub struct BumpSystem {
    /// Cubes `Q_i`.
    pub cubes: Vec<Rect>,
    /// Bumps `φ_i`: one on `Q_i`, supported in `1.1 Q_i`.
    pub bumps: Vec<Profile>,
    /// Smoothness order.
    pub m: usize,
    /// Largest number of supports `1.1 Q_i` sharing a point.
    pub multiplicity: usize,
}

impl BumpSystem {
    /// Builds the partition of unity for the given cubes.
    ///
    /// Fails when the cube list is empty or when the supports overlap more
    /// than `4^n` times, which cannot happen for a decomposition with good
    /// geometry.
    pub fn build(cubes: &[Rect], m: usize) -> Result<Self> {
        if cubes.is_empty() {
            return Err(Error::Domain(
                "partition of unity needs at least one cube".into(),
            ));
        }
        let n = cubes[0].n();
        let bumps: Vec<Profile> = cubes
            .iter()
            .map(|q| Profile::new(q.clone(), q.dilate(1.0 + 2.0 * COLLAR)))
            .collect();
        let supports: Vec<crate::norms::Support> = bumps
            .iter()
            .map(|b| crate::norms::Support::Box(b.outer.clone()))
            .collect();
        let multiplicity = crate::norms::overlap_audit(&supports);
        if multiplicity > 4usize.pow(n as u32) {
            return Err(Error::Degenerate(format!(
                "supports overlap {multiplicity} times; geometry is not good"
            )));
        }
        Ok(Self {
            cubes: cubes.to_vec(),
            bumps,
            m,
            multiplicity,
        })
    }

    /// Taylor coefficients of every nonzero `θ_i` at `y`.
    pub fn theta_taylor(&self, y: &[f64], order: usize) -> Vec<(usize, Vec<f64>)> {
        let n = y.len();
        let set = index_set(order + 1, n);
        let mut phis: Vec<(usize, Vec<f64>)> = Vec::new();
        for (i, b) in self.bumps.iter().enumerate() {
            if !b.outer.contains_closed(y) {
                continue;
            }
            let t = b.taylor(y, order, self.m);
            if t.iter().any(|v| *v != 0.0) {
                phis.push((i, t));
            }
        }
        if phis.is_empty() {
            return phis;
        }
        let mut sum = vec![0.0; set.len()];
        for (_, t) in &phis {
            for (s, v) in sum.iter_mut().zip(t) {
                *s += v;
            }
        }
        if !(sum[0] > 0.0) {
            return Vec::new();
        }
        let recip = taylor_recip(set, &sum);
        phis.into_iter()
            .map(|(i, t)| (i, taylor_mul(set, &t, &recip)))
            .collect()
    }

    /// Values `θ_i(y)` of every nonzero bump.
    pub fn theta_values(&self, y: &[f64]) -> Vec<(usize, f64)> {
        self.theta_taylor(y, 0)
            .into_iter()
            .map(|(i, t)| (i, t[0]))
            .collect()
    }

    /// Breakpoints of all bumps along axis `i`.
    pub fn breakpoints(&self, i: usize, out: &mut Vec<f64>) {
        for b in &self.bumps {
            b.breakpoints(i, out);
        }
    }
}

/// Partition-of-unity audit on a sample grid.
#[derive(Clone, Debug, Serialize)]
pub struct PouAudit {
    /// Number of sample points inspected.
    pub samples: usize,
    /// `max |Σ θ_i − 1|` over samples inside the union of cubes.
    pub partition_error: f64,
    /// Largest `θ_i` found outside `1.1 Q_i`.
    pub support_violation: f64,
    /// Smallest and largest `θ_i` values seen.
    pub theta_range: (f64, f64),
    /// `max |∂^α θ_i| δ_i^{|α|}` for each order `|α| = 0..=m`.
    pub scaled_derivative_bound: Vec<f64>,
}

/// Checks the partition of unity on a uniform grid of `per_axis` points per
/// axis over `region` (points are cell midpoints).
pub fn audit_pou(sys: &BumpSystem, region: &Rect, per_axis: usize) -> PouAudit {
    let n = region.n();
    let m = sys.m;
    let set = index_set(m + 1, n);
    let mut audit = PouAudit {
        samples: 0,
        partition_error: 0.0,
        support_violation: 0.0,
        theta_range: (f64::INFINITY, f64::NEG_INFINITY),
        scaled_derivative_bound: vec![0.0; m + 1],
    };
    let coord =
        |i: usize, k: usize| region.lo[i] + (k as f64 + 0.5) / per_axis as f64 * region.side(i);
    let total = per_axis.pow(n as u32);
    for flat in 0..total {
        let y: Vec<f64> = (0..n)
            .map(|i| coord(i, (flat / per_axis.pow(i as u32)) % per_axis))
            .collect();
        audit.samples += 1;
        let thetas = sys.theta_taylor(&y, m);
        let inside = sys.cubes.iter().any(|q| q.contains_closed(&y));
        let s: f64 = thetas.iter().map(|(_, t)| t[0]).sum();
        if inside {
            audit.partition_error = audit.partition_error.max((s - 1.0).abs());
        }
        for (i, t) in &thetas {
            let delta = sys.cubes[*i].max_side();
            if !sys.bumps[*i].outer.contains_closed(&y) {
                audit.support_violation = audit.support_violation.max(t[0].abs());
            }
            audit.theta_range.0 = audit.theta_range.0.min(t[0]);
            audit.theta_range.1 = audit.theta_range.1.max(t[0]);
            for (k, a) in set.items.iter().enumerate() {
                let d = (t[k] * a.factorial()).abs() * delta.powi(a.order() as i32);
                let slot = &mut audit.scaled_derivative_bound[a.order()];
                *slot = slot.max(d);
            }
        }
    }
    if audit.theta_range.0 > audit.theta_range.1 {
        audit.theta_range = (0.0, 0.0);
    }
    audit
}

/// The glued function `F̄ = θ F + (1 − θ) P`, where `θ` is one on `q`,
/// zero outside `(1 + η) q`.
///
/// `poly` maps the inputs of `f` to the origin coefficients of `P`.
pub fn glue(f: Field, poly: DMatrix<f64>, q: &Rect, eta: f64, m: usize) -> Result<Field> {
    if !(0.001..=100.0).contains(&eta) {
        return Err(Error::Domain(format!(
            "η must lie in [0.001, 100], got {eta}"
        )));
    }
    if poly.ncols() != f.nin() || poly.nrows() != index_set(m, q.n()).len() {
        return Err(Error::Domain("polynomial map has the wrong shape".into()));
    }
    Ok(Field::Blend(Box::new(Blend {
        profile: Profile::new(q.clone(), q.dilate(1.0 + eta)),
        inner: f,
        poly,
        m,
    })))
}

/// Fraction of a root box on which the outer cutoff equals one.
pub const OUTER_CUTOFF_CORE: f64 = 0.5;

/// The outer cutoff of a root box: one on the concentric box of half the
/// side, zero outside `root`.
///
/// Every atom handled at a level lies in the central tenth of its root box,
/// so the cutoff never touches the data.
pub fn outer_cutoff(root: &Rect) -> Profile {
    Profile::new(root.dilate(OUTER_CUTOFF_CORE), root.clone())
}
