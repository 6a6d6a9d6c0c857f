//! Gauss–Legendre quadrature rules.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Nodes and weights of a quadrature rule.
type Rule = (Vec<f64>, Vec<f64>);

/// Nodes and weights of the `q`-point Gauss–Legendre rule on `[0, 1]`.
///
/// Nodes are computed by Newton iteration on the Legendre recurrence and
/// cached per `q`.
pub fn gauss_legendre_unit(q: usize) -> (Vec<f64>, Vec<f64>) {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = cache.lock().expect("quadrature cache poisoned").get(&q) {
        return r.clone();
    }
    let r = compute(q);
    cache
        .lock()
        .expect("quadrature cache poisoned")
        .insert(q, r.clone());
    r
}

fn compute(q: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(q >= 1, "quadrature needs at least one node");
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    for i in 0..q {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(q, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(q, x);
        if d != 0.0 {
            dp = d;
        }
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    let mut idx: Vec<usize> = (0..q).collect();
    idx.sort_by(|&a, &b| nodes[a].total_cmp(&nodes[b]));
    (
        idx.iter().map(|&i| nodes[i]).collect(),
        idx.iter().map(|&i| weights[i]).collect(),
    )
}

/// Value and derivative of the Legendre polynomial `P_q` at `x`.
fn legendre(q: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if q == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=q {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = q as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Nodes and weights of the `q`-point rule on `[a, b]`.
pub fn gauss_legendre(q: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre_unit(q);
    let h = b - a;
    (
        x.iter().map(|t| a + h * t).collect(),
        w.iter().map(|v| v * h).collect(),
    )
}
