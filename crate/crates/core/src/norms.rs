//! Independent norm machinery: the Brudnyi packing estimator, the Whitney
//! field seminorm, the K-functional curve and support-overlap audits.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::jets::{index_set, jet_norm, Jet};
use crate::measures::{scale, AtomicMeasure, Rect};
use crate::quad::gauss_legendre;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// A support: a single point or a closed box.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Support {
    /// A point.
    Point(Vec<f64>),
    /// A closed box.
    Box(Rect),
}

impl Support {
    fn as_box(&self) -> Rect {
        match self {
            Support::Point(x) => Rect::new(x.clone(), x.clone()),
            Support::Box(b) => b.clone(),
        }
    }
}

/// Largest number of supports sharing a common point (closed sets).
///
/// In one dimension this is an interval sweep. In two dimensions a maximal
/// point can be chosen whose first coordinate is the largest lower edge of
/// the boxes containing it, so a sweep over `y` is run at every lower edge.
pub fn overlap_audit(supports: &[Support]) -> usize {
    if supports.is_empty() {
        return 0;
    }
    let boxes: Vec<Rect> = supports.iter().map(Support::as_box).collect();
    let n = boxes[0].n();
    let sweep = |ivs: &[(f64, f64)]| -> usize {
        let mut ev: Vec<(f64, i32)> = Vec::with_capacity(2 * ivs.len());
        for &(a, b) in ivs {
            ev.push((a, 0));
            ev.push((b, 1));
        }
        // Starts before ends at equal coordinates: closed intervals touch.
        ev.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let (mut cur, mut best) = (0i64, 0i64);
        for (_, kind) in ev {
            if kind == 0 {
                cur += 1;
                best = best.max(cur);
            } else {
                cur -= 1;
            }
        }
        best as usize
    };
    if n == 1 {
        let ivs: Vec<(f64, f64)> = boxes.iter().map(|b| (b.lo[0], b.hi[0])).collect();
        return sweep(&ivs);
    }
    let mut best = 0;
    for cand in &boxes {
        let x = cand.lo[0];
        let ivs: Vec<(f64, f64)> = boxes
            .iter()
            .filter(|b| b.lo[0] <= x && x <= b.hi[0])
            .map(|b| (b.lo[1], b.hi[1]))
            .collect();
        best = best.max(sweep(&ivs));
    }
    best
}

/// Result of [`brudnyi_estimate`].
#[derive(Clone, Debug, Serialize)]
pub struct PackingSweep {
    /// `(Σ_{Q̄} (E(F, Q̄)/δ^m)^p)^{1/p}` for each dyadic level `ℓ = 0..=L`.
    pub per_level: Vec<f64>,
    /// Supremum over the levels.
    pub value: f64,
}

/// Best `L^p` error of approximating sampled values by polynomials of degree
/// `m − 1`: `inf_P (Σ_k w_k |F_k − P(y_k)|^p)^{1/p}`.
fn local_poly_error(ys: &[Vec<f64>], ws: &[f64], fs: &[f64], m: usize, p: f64) -> f64 {
    let n = ys[0].len();
    let set = index_set(m, n);
    let center: Vec<f64> = (0..n)
        .map(|i| ys.iter().map(|y| y[i]).sum::<f64>() / ys.len() as f64)
        .collect();
    let spread = ys
        .iter()
        .flat_map(|y| y.iter().zip(&center).map(|(a, c)| (a - c).abs()))
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let a = DMatrix::from_fn(ys.len(), set.len(), |k, j| {
        let d: Vec<f64> = ys[k]
            .iter()
            .zip(&center)
            .map(|(a, c)| (a - c) / spread)
            .collect();
        set.items[j].monomial(&d)
    });
    let b = DVector::from_column_slice(fs);
    let fit = |w: &[f64]| -> DVector<f64> {
        let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        let aw = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * sw[i]);
        let bw = DVector::from_fn(b.len(), |i, _| b[i] * sw[i]);
        let svd = aw.svd(true, true);
        let tol = 1e-13 * svd.singular_values.amax().max(1e-300);
        svd.solve(&bw, tol)
            .expect("singular vectors were requested")
    };
    let err = |c: &DVector<f64>| -> (f64, Vec<f64>) {
        let r = &b - &a * c;
        let v: f64 = r.iter().zip(ws).map(|(ri, wi)| wi * ri.abs().powf(p)).sum();
        (v, r.iter().copied().collect())
    };
    let mut c = fit(ws);
    let (mut best, mut res) = err(&c);
    if p != 2.0 {
        for _ in 0..100 {
            let rmax = res.iter().fold(0.0f64, |x, y| x.max(y.abs()));
            let eta = 1e-10 * rmax.max(1e-300);
            let w: Vec<f64> = ws
                .iter()
                .zip(&res)
                .map(|(wi, ri)| wi * ri.abs().max(eta).powf(p - 2.0))
                .collect();
            let cand = fit(&w);
            let (val, r) = err(&cand);
            if val >= best * (1.0 - 1e-10) {
                break;
            }
            best = val;
            res = r;
            c = cand;
        }
    }
    let _ = c;
    best.max(0.0).powf(1.0 / p)
}

/// Brudnyi packing estimator on the aligned dyadic grids of `q`.
///
/// For every level `ℓ ≤ levels` the box is cut into `2^{ℓ n}` congruent
/// cubes; `E(F, Q̄)` is the unnormalized `L^p(Q̄)` error of the best
/// polynomial of degree `m − 1`, computed on `2m` Gauss–Legendre nodes per
/// axis (projection for `p = 2`, IRLS otherwise).
pub fn brudnyi_estimate(
    f: &dyn Fn(&[f64]) -> f64,
    q: &Rect,
    m: usize,
    p: f64,
    levels: usize,
) -> PackingSweep {
    let n = q.n();
    let mut per_level = Vec::with_capacity(levels + 1);
    for l in 0..=levels {
        let k = 1usize << l;
        let mut total = 0.0;
        let count = k.pow(n as u32);
        for flat in 0..count {
            let idx: Vec<usize> = (0..n).map(|i| (flat / k.pow(i as u32)) % k).collect();
            let lo: Vec<f64> = (0..n)
                .map(|i| q.lo[i] + q.side(i) * idx[i] as f64 / k as f64)
                .collect();
            let hi: Vec<f64> = (0..n)
                .map(|i| q.lo[i] + q.side(i) * (idx[i] + 1) as f64 / k as f64)
                .collect();
            let rules: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                .map(|i| gauss_legendre(2 * m, lo[i], hi[i]))
                .collect();
            let mut ys = Vec::new();
            let mut ws = Vec::new();
            if n == 1 {
                for (x, w) in rules[0].0.iter().zip(&rules[0].1) {
                    ys.push(vec![*x]);
                    ws.push(*w);
                }
            } else {
                for (a, wa) in rules[0].0.iter().zip(&rules[0].1) {
                    for (b, wb) in rules[1].0.iter().zip(&rules[1].1) {
                        ys.push(vec![*a, *b]);
                        ws.push(wa * wb);
                    }
                }
            }
            let fs: Vec<f64> = ys.iter().map(|y| f(y)).collect();
            let e = local_poly_error(&ys, &ws, &fs, m, p);
            let delta = (0..n).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
            total += (e / delta.powi(m as i32)).powf(p);
        }
        per_level.push(total.powf(1.0 / p));
    }
    let value = per_level.iter().copied().fold(0.0, f64::max);
    PackingSweep { per_level, value }
}

/// Default number of dyadic levels of the packing sweep in dimension `n`.
pub fn default_levels(n: usize) -> usize {
    if n == 1 {
        10
    } else {
        6
    }
}

/// `max_{x ≠ y} |P_x − P_y|_{x, |x − y|}` over a finite Whitney field.
///
/// Coincident points with different jets give `+∞`.
pub fn whitney_seminorm(field: &[(Vec<f64>, Jet)], p: f64) -> Result<f64> {
    if field.len() < 2 {
        return Err(Error::Domain(
            "a Whitney field needs at least two points".into(),
        ));
    }
    let mut best: f64 = 0.0;
    for i in 0..field.len() {
        for j in (i + 1)..field.len() {
            let (x, px) = &field[i];
            let (y, py) = &field[j];
            let d: f64 = x
                .iter()
                .zip(y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let diff = px.sub(py);
            if d == 0.0 {
                if diff.max_abs() > 0.0 {
                    return Ok(f64::INFINITY);
                }
                continue;
            }
            best = best.max(jet_norm(&diff, x, d, p)?);
        }
    }
    Ok(best)
}

/// One point of the K-functional curve.
#[derive(Clone, Debug, Serialize)]
pub struct KPoint {
    /// Parameter `t`.
    pub t: f64,
    /// `K(t) ≈ ‖f‖_{𝒥(t^p μ)}`.
    pub k: f64,
    /// `t ‖f‖_{L^p(dμ)}` (the cost of the splitting `f₁ = 0`).
    pub upper: f64,
    /// `‖T_t f‖_{𝒥(f, t^p μ)} / K(t)` for the operator built on the scaled measure.
    pub linearized_ratio: Option<f64>,
}

/// Evaluates the K-functional on a grid of `t` values via the oracle.
///
/// When `linearize` is set, the operator is also built for every scaled
/// measure and the ratio of its cost to `K(t)` is recorded.
pub fn k_curve(
    mu: &AtomicMeasure,
    ts: &[f64],
    cfg: &RunConfig,
    linearize: bool,
) -> Result<Vec<KPoint>> {
    let data = mu.data_norm_pow(cfg.p).powf(1.0 / cfg.p);
    ts.iter()
        .map(|&t| {
            let scaled = scale(mu, t, cfg.p)?;
            let k = crate::oracle::j_norm(&scaled, cfg)?.norm(cfg.p);
            let linearized_ratio = if linearize {
                let ext = crate::extension::top_extend(&scaled, cfg)?;
                let cost = ext.cost(&scaled.values())?;
                Some(if k > 0.0 { cost.total_norm / k } else { 0.0 })
            } else {
                None
            };
            Ok(KPoint {
                t,
                k,
                upper: t * data,
                linearized_ratio,
            })
        })
        .collect()
}

/// Logarithmic grid of `count` points between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Two-column CSV `t,K` of a K-curve.
pub fn k_curve_csv(points: &[KPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "K"]).expect("writing to memory");
    for pt in points {
        w.write_record([format!("{:e}", pt.t), format!("{:e}", pt.k)])
            .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("CSV is UTF-8")
}
