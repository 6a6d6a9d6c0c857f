//! Finite atomic measures with optional infinite weights.
//!
//! Each atom carries a location, a weight in `(0, ∞]` and the datum `f` at that
//! location. Infinite weights encode exact interpolation constraints.
//! [`normalize`] maps raw data into the unit cube `(0, 1]^n` so that all atoms
//! lie in its central tenth, rescaling weights so that every functional
//! changes by the same factor.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Read;

/// Atom weight: a positive real or `+∞`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weight {
    /// A positive finite weight.
    Finite(f64),
    /// An exact interpolation constraint.
    Infinite,
}

impl Weight {
    /// True for `+∞`.
    pub fn is_infinite(&self) -> bool {
        matches!(self, Weight::Infinite)
    }

    /// The weight as a float (`f64::INFINITY` for infinite weights).
    pub fn value(&self) -> f64 {
        match self {
            Weight::Finite(w) => *w,
            Weight::Infinite => f64::INFINITY,
        }
    }

    /// Finite weight, or `None` for `+∞`.
    pub fn finite(&self) -> Option<f64> {
        match self {
            Weight::Finite(w) => Some(*w),
            Weight::Infinite => None,
        }
    }
}

impl Serialize for Weight {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Weight::Finite(w) => s.serialize_f64(*w),
            Weight::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Weight {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(w) => parse_weight_value(w).map_err(serde::de::Error::custom),
            Raw::Text(t) => parse_weight_text(&t).map_err(serde::de::Error::custom),
        }
    }
}

fn parse_weight_value(w: f64) -> std::result::Result<Weight, String> {
    if w.is_infinite() && w > 0.0 {
        Ok(Weight::Infinite)
    } else if w > 0.0 && w.is_finite() {
        Ok(Weight::Finite(w))
    } else {
        Err(format!("weight must be positive, got {w}"))
    }
}

fn parse_weight_text(t: &str) -> std::result::Result<Weight, String> {
    let t = t.trim();
    if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
        return Ok(Weight::Infinite);
    }
    let w: f64 = t.parse().map_err(|_| format!("invalid weight {t:?}"))?;
    parse_weight_value(w)
}

/// One atom of a measure together with its datum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    /// Location.
    pub x: Vec<f64>,
    /// Weight.
    pub w: Weight,
    /// Data value `f(x)`.
    pub f: f64,
}

/// An axis-parallel box with corners `lo` and `hi`.
///
/// Membership is half-open `(lo, hi]` by default, matching dyadic cubes;
/// [`Rect::contains_closed`] gives the closed variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    /// Lower corner.
    pub lo: Vec<f64>,
    /// Upper corner.
    pub hi: Vec<f64>,
}

impl Rect {
    /// Builds a box; corners must have equal dimension and `lo ≤ hi`.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        debug_assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    /// The unit cube `(0, 1]^n`.
    pub fn unit(n: usize) -> Self {
        Self::new(vec![0.0; n], vec![1.0; n])
    }

    /// Cube with the given center and side length.
    pub fn centered(center: &[f64], side: f64) -> Self {
        Self::new(
            center.iter().map(|c| c - side / 2.0).collect(),
            center.iter().map(|c| c + side / 2.0).collect(),
        )
    }

    /// Dimension.
    pub fn n(&self) -> usize {
        self.lo.len()
    }

    /// Half-open membership `lo < x ≤ hi`.
    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.n()).all(|i| self.lo[i] < x[i] && x[i] <= self.hi[i])
    }

    /// Closed membership `lo ≤ x ≤ hi`.
    pub fn contains_closed(&self, x: &[f64]) -> bool {
        (0..self.n()).all(|i| self.lo[i] <= x[i] && x[i] <= self.hi[i])
    }

    /// Center point.
    pub fn center(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| 0.5 * (self.lo[i] + self.hi[i]))
            .collect()
    }

    /// Largest side length.
    pub fn max_side(&self) -> f64 {
        (0..self.n())
            .map(|i| self.hi[i] - self.lo[i])
            .fold(0.0, f64::max)
    }

    /// Side length along axis `i`.
    pub fn side(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    /// The box scaled by `factor` about its center.
    pub fn dilate(&self, factor: f64) -> Self {
        let c = self.center();
        Self::new(
            (0..self.n())
                .map(|i| c[i] - factor * 0.5 * self.side(i))
                .collect(),
            (0..self.n())
                .map(|i| c[i] + factor * 0.5 * self.side(i))
                .collect(),
        )
    }

    /// Intersection, or `None` when the closed boxes are disjoint.
    pub fn intersect(&self, other: &Self) -> Option<Self> {
        let lo: Vec<f64> = (0..self.n()).map(|i| self.lo[i].max(other.lo[i])).collect();
        let hi: Vec<f64> = (0..self.n()).map(|i| self.hi[i].min(other.hi[i])).collect();
        (0..self.n())
            .all(|i| lo[i] <= hi[i])
            .then(|| Self::new(lo, hi))
    }

    /// True when the closed boxes share at least one point.
    pub fn closed_intersects(&self, other: &Self) -> bool {
        (0..self.n()).all(|i| self.lo[i] <= other.hi[i] && other.lo[i] <= self.hi[i])
    }

    /// True when the open boxes share a point.
    pub fn open_intersects(&self, other: &Self) -> bool {
        (0..self.n()).all(|i| self.lo[i] < other.hi[i] && other.lo[i] < self.hi[i])
    }

    /// Euclidean distance between the closed boxes.
    pub fn distance(&self, other: &Self) -> f64 {
        (0..self.n())
            .map(|i| {
                let gap = (other.lo[i] - self.hi[i])
                    .max(self.lo[i] - other.hi[i])
                    .max(0.0);
                gap * gap
            })
            .sum::<f64>()
            .sqrt()
    }

    /// The closest point of the closed box to `x`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| x[i].clamp(self.lo[i], self.hi[i]))
            .collect()
    }
}

/// Affine frame `x' = (x − c)/s` recording how raw data were normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Translation `c`.
    pub center: Vec<f64>,
    /// Scale `s > 0` (raw length per normalized length).
    pub scale: f64,
    /// Exponent `mp − n` applied to finite weights: `w' = w · s^{mp−n}`.
    pub weight_exponent: f64,
}

impl Frame {
    /// The identity frame in dimension `n`.
    pub fn identity(n: usize) -> Self {
        Self {
            center: vec![0.0; n],
            scale: 1.0,
            weight_exponent: 0.0,
        }
    }

    /// Raw to normalized coordinates.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) / self.scale)
            .collect()
    }

    /// Normalized to raw coordinates.
    pub fn inverse(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .map(|(a, c)| a * self.scale + c)
            .collect()
    }

    /// Factor relating functionals: normalized value = factor × raw value
    /// (for `p`-th powers).
    pub fn functional_factor(&self) -> f64 {
        self.scale.powf(self.weight_exponent)
    }
}

/// One entry of the duplicate-merge log written by [`normalize`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MergeRecord {
    /// Shared raw location.
    pub x: Vec<f64>,
    /// Number of merged atoms.
    pub count: usize,
    /// Resulting weight.
    pub w: Weight,
    /// Resulting value.
    pub f: f64,
}

/// A finite atomic measure with data values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AtomicMeasure {
    /// Atoms in input order (after merging).
    pub atoms: Vec<Atom>,
    /// Spatial dimension.
    pub n: usize,
    /// Normalization frame (identity when built directly).
    pub frame: Frame,
    /// Duplicate locations merged during normalization.
    pub merges: Vec<MergeRecord>,
}

impl AtomicMeasure {
    /// Builds a measure in an already normalized frame.
    pub fn new(n: usize, atoms: Vec<Atom>) -> Result<Self> {
        for (i, a) in atoms.iter().enumerate() {
            validate_atom(a, n).map_err(|msg| Error::Domain(format!("atom {i}: {msg}")))?;
        }
        Ok(Self {
            atoms,
            n,
            frame: Frame::identity(n),
            merges: Vec::new(),
        })
    }

    /// The measure with no atoms.
    pub fn empty(n: usize) -> Self {
        Self {
            atoms: Vec::new(),
            n,
            frame: Frame::identity(n),
            merges: Vec::new(),
        }
    }

    /// Number of atoms.
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    /// True when there are no atoms.
    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Data values in atom order.
    pub fn values(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.f).collect()
    }

    /// The same measure with new data values.
    pub fn with_values(&self, f: &[f64]) -> Self {
        assert_eq!(f.len(), self.len(), "value count mismatch");
        let mut out = self.clone();
        for (a, &v) in out.atoms.iter_mut().zip(f) {
            a.f = v;
        }
        out
    }

    /// True when some atom has infinite weight.
    pub fn has_infinite(&self) -> bool {
        self.atoms.iter().any(|a| a.w.is_infinite())
    }

    /// Indices of atoms in the half-open box.
    pub fn indices_in(&self, b: &Rect) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| b.contains(&self.atoms[i].x))
            .collect()
    }

    /// Indices of atoms in the closed box.
    pub fn indices_in_closed(&self, b: &Rect) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| b.contains_closed(&self.atoms[i].x))
            .collect()
    }

    /// Subset of atoms by index, keeping the frame.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            atoms: idx.iter().map(|&i| self.atoms[i].clone()).collect(),
            n: self.n,
            frame: self.frame.clone(),
            merges: Vec::new(),
        }
    }

    /// `p`-th power of the `L^p(dμ)` norm of the data, `Σ w |f|^p`.
    pub fn data_norm_pow(&self, p: f64) -> f64 {
        self.atoms
            .iter()
            .map(|a| {
                if a.f == 0.0 {
                    0.0
                } else {
                    a.w.value() * a.f.abs().powf(p)
                }
            })
            .sum()
    }
}

fn validate_atom(a: &Atom, n: usize) -> std::result::Result<(), String> {
    if a.x.len() != n {
        return Err(format!("expected {n} coordinates, got {}", a.x.len()));
    }
    if a.x.iter().any(|v| !v.is_finite()) {
        return Err("location must be finite".into());
    }
    if !a.f.is_finite() {
        return Err("value must be finite".into());
    }
    match a.w {
        Weight::Finite(w) if !(w > 0.0) || !w.is_finite() => {
            Err(format!("weight must be positive, got {w}"))
        }
        _ => Ok(()),
    }
}

/// Merges atoms sharing a location: weights add (infinite dominates) and
/// values are weight-averaged. Conflicting infinite-weight values are
/// infeasible.
pub fn merge_duplicates(atoms: Vec<Atom>) -> Result<(Vec<Atom>, Vec<MergeRecord>)> {
    let mut out: Vec<(Atom, usize, f64)> = Vec::new();
    for a in atoms {
        if let Some(slot) = out.iter_mut().find(|(b, _, _)| b.x == a.x) {
            let (b, count, fsum) = slot;
            match (b.w, a.w) {
                (Weight::Infinite, Weight::Infinite) => {
                    if b.f != a.f {
                        return Err(Error::Infeasible(format!(
                            "two exact constraints at {:?} with values {} and {}",
                            a.x, b.f, a.f
                        )));
                    }
                }
                (Weight::Infinite, Weight::Finite(_)) => {}
                (Weight::Finite(_), Weight::Infinite) => {
                    b.w = Weight::Infinite;
                    b.f = a.f;
                }
                (Weight::Finite(wb), Weight::Finite(wa)) => {
                    *fsum += wa * a.f;
                    b.w = Weight::Finite(wb + wa);
                    b.f = *fsum / (wb + wa);
                }
            }
            *count += 1;
        } else {
            let fsum = a.w.finite().map_or(0.0, |w| w * a.f);
            out.push((a, 1, fsum));
        }
    }
    let log = out
        .iter()
        .filter(|(_, c, _)| *c > 1)
        .map(|(a, c, _)| MergeRecord {
            x: a.x.clone(),
            count: *c,
            w: a.w,
            f: a.f,
        })
        .collect();
    Ok((out.into_iter().map(|(a, _, _)| a).collect(), log))
}

/// Maps raw atoms into the unit cube so that they occupy its central tenth.
///
/// The frame is `x' = (x − c)/s` with `s` equal to ten times the largest
/// coordinate extent (or `1` when all atoms coincide) and `c` chosen so that
/// the bounding box is centered at `(1/2, …, 1/2)`. Finite weights are
/// multiplied by `s^{mp − n}` so that for `F'(x') = F(c + s x')` every
/// functional of the form seminorm plus weighted data misfit is multiplied by
/// the same factor `s^{mp − n}`.
pub fn normalize(raw: Vec<Atom>, m: usize, p: f64) -> Result<AtomicMeasure> {
    if raw.is_empty() {
        return Err(Error::Domain("cannot normalize an empty measure".into()));
    }
    let n = raw[0].x.len();
    crate::jets::check_mn(m, n)?;
    for (i, a) in raw.iter().enumerate() {
        validate_atom(a, n).map_err(|msg| Error::Domain(format!("atom {i}: {msg}")))?;
    }
    let (atoms, merges) = merge_duplicates(raw)?;
    let lo: Vec<f64> = (0..n)
        .map(|i| atoms.iter().map(|a| a.x[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let hi: Vec<f64> = (0..n)
        .map(|i| {
            atoms
                .iter()
                .map(|a| a.x[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let extent = (0..n).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
    let scale = if extent > 0.0 { extent / 0.1 } else { 1.0 };
    let center: Vec<f64> = (0..n)
        .map(|i| 0.5 * (lo[i] + hi[i]) - 0.5 * scale)
        .collect();
    let frame = Frame {
        center,
        scale,
        weight_exponent: m as f64 * p - n as f64,
    };
    let factor = frame.functional_factor();
    let atoms = atoms
        .into_iter()
        .map(|a| Atom {
            x: frame.forward(&a.x),
            w: match a.w {
                Weight::Finite(w) => Weight::Finite(w * factor),
                Weight::Infinite => Weight::Infinite,
            },
            f: a.f,
        })
        .collect();
    Ok(AtomicMeasure {
        atoms,
        n,
        frame,
        merges,
    })
}

/// Restriction `μ|_B` to the half-open box `B`.
pub fn restrict(mu: &AtomicMeasure, b: &Rect) -> AtomicMeasure {
    mu.subset(&mu.indices_in(b))
}

/// Restriction to the closed box `B`.
pub fn restrict_closed(mu: &AtomicMeasure, b: &Rect) -> AtomicMeasure {
    mu.subset(&mu.indices_in_closed(b))
}

/// Total weight of atoms in the half-open box; `+∞` if any of them is infinite.
pub fn mass(mu: &AtomicMeasure, b: &Rect) -> f64 {
    mass_of(mu.atoms.iter().filter(|a| b.contains(&a.x)))
}

/// Total weight of atoms in the closed box.
pub fn mass_closed(mu: &AtomicMeasure, b: &Rect) -> f64 {
    mass_of(mu.atoms.iter().filter(|a| b.contains_closed(&a.x)))
}

fn mass_of<'a>(atoms: impl Iterator<Item = &'a Atom>) -> f64 {
    let mut s = 0.0;
    for a in atoms {
        match a.w {
            Weight::Infinite => return f64::INFINITY,
            Weight::Finite(w) => s += w,
        }
    }
    s
}

/// Multiplies every finite weight by `t^p`.
pub fn scale(mu: &AtomicMeasure, t: f64, p: f64) -> Result<AtomicMeasure> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!(
            "scale factor must be positive, got {t}"
        )));
    }
    let k = t.powf(p);
    let mut out = mu.clone();
    for a in &mut out.atoms {
        if let Weight::Finite(w) = a.w {
            a.w = Weight::Finite(w * k);
        }
    }
    Ok(out)
}

/// Parses CSV input with columns `x_1..x_n, weight, value`.
///
/// A header row is skipped when its first field is not numeric. Weights may
/// be the literal `inf`. Errors carry the one-based line number.
pub fn parse_csv<R: Read>(reader: R, n: usize) -> Result<Vec<Atom>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader);
    let mut atoms = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(k + 1, |p| p.line() as usize);
        if rec.iter().all(|s| s.is_empty()) {
            continue;
        }
        if atoms.is_empty() && k == 0 && rec.get(0).is_some_and(|s| s.parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() != n + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} columns, found {}", n + 2, rec.len()),
            });
        }
        let num = |i: usize, what: &str| -> Result<f64> {
            let s = &rec[i];
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid {what} {s:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("{what} must be finite"),
                });
            }
            Ok(v)
        };
        let x = (0..n)
            .map(|i| num(i, &format!("coordinate x_{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let w = parse_weight_text(&rec[n]).map_err(|msg| Error::Parse { line, msg })?;
        let f = num(n + 1, "value")?;
        atoms.push(Atom { x, w, f });
    }
    Ok(atoms)
}

/// Parses JSON input: a list of `{"x": [...], "w": number | "inf", "f": number}`.
pub fn parse_json(text: &str, n: usize) -> Result<Vec<Atom>> {
    let atoms: Vec<Atom> = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    for (i, a) in atoms.iter().enumerate() {
        validate_atom(a, n).map_err(|msg| Error::Parse {
            line: 0,
            msg: format!("atom {i}: {msg}"),
        })?;
    }
    Ok(atoms)
}
