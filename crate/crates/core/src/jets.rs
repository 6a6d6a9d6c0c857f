//! Multi-indices, labels, jets and truncated Taylor arithmetic.
//!
//! A [`Jet`] is a polynomial of degree at most `m - 1` in `n` variables,
//! stored by its monomial coefficients about the origin. Every other
//! representation (derivatives at a point, Taylor coefficients about a point)
//! is computed from that canonical form on demand.
//!
//! Multi-indices of order at most `m - 1` are enumerated once per `(m, n)` in
//! ascending [`multiindex_less`] order. Coefficient vectors everywhere in the
//! crate are aligned with that enumeration.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::sync::OnceLock;

/// Largest supported spatial dimension.
pub const MAX_N: usize = 2;
/// Largest supported smoothness order for user-facing jets.
pub const MAX_M: usize = 4;
/// Largest index-set order used internally (Taylor arithmetic needs degree `m`).
const MAX_TABLE_M: usize = 2 * MAX_M + 2;

/// A multi-index `α = (α_1, …, α_n)` with `n ≤ 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MultiIndex {
    n: u8,
    e: [u8; MAX_N],
}

impl MultiIndex {
    /// Builds a multi-index from its entries.
    ///
    /// # Panics
    /// Panics if `entries` is empty or longer than [`MAX_N`].
    pub fn new(entries: &[usize]) -> Self {
        assert!(
            !entries.is_empty() && entries.len() <= MAX_N,
            "multi-index dimension must be 1 or 2"
        );
        let mut e = [0u8; MAX_N];
        for (slot, &v) in e.iter_mut().zip(entries) {
            *slot = u8::try_from(v).expect("multi-index entry too large");
        }
        Self {
            n: entries.len() as u8,
            e,
        }
    }

    /// The zero multi-index in dimension `n`.
    pub fn zero(n: usize) -> Self {
        Self::new(&vec![0; n])
    }

    /// Spatial dimension.
    pub fn n(&self) -> usize {
        self.n as usize
    }

    /// Entries `α_1, …, α_n`.
    pub fn entries(&self) -> Vec<usize> {
        self.e[..self.n()].iter().map(|&v| v as usize).collect()
    }

    /// Entry `α_i`.
    pub fn get(&self, i: usize) -> usize {
        self.e[i] as usize
    }

    /// Order `|α| = Σ α_i`.
    pub fn order(&self) -> usize {
        self.e[..self.n()].iter().map(|&v| v as usize).sum()
    }

    /// `α!` as a float.
    pub fn factorial(&self) -> f64 {
        self.e[..self.n()]
            .iter()
            .map(|&v| factorial(v as usize))
            .product()
    }

    /// Componentwise sum `α + β`.
    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.n, other.n);
        let mut e = [0u8; MAX_N];
        for i in 0..self.n() {
            e[i] = self.e[i] + other.e[i];
        }
        Self { n: self.n, e }
    }

    /// Componentwise difference `α − β`, or `None` if some entry would be negative.
    pub fn checked_sub(&self, other: &Self) -> Option<Self> {
        let mut e = [0u8; MAX_N];
        for i in 0..self.n() {
            e[i] = self.e[i].checked_sub(other.e[i])?;
        }
        Some(Self { n: self.n, e })
    }

    /// `x^α` for a point `x`.
    pub fn monomial(&self, x: &[f64]) -> f64 {
        (0..self.n()).map(|i| x[i].powi(self.e[i] as i32)).product()
    }

    /// Product of binomial coefficients `Π C(α_i, β_i)`.
    pub fn binomial(&self, beta: &Self) -> f64 {
        (0..self.n())
            .map(|i| binomial(self.e[i] as usize, beta.e[i] as usize))
            .product()
    }

    fn prefix_sums(&self) -> [usize; MAX_N + 1] {
        let mut s = [0usize; MAX_N + 1];
        for i in 0..self.n() {
            s[i + 1] = s[i] + self.e[i] as usize;
        }
        s
    }
}

impl Serialize for MultiIndex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.entries().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MultiIndex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<usize>::deserialize(d)?;
        if v.is_empty() || v.len() > MAX_N || v.iter().any(|&x| x > u8::MAX as usize) {
            return Err(serde::de::Error::custom("invalid multi-index"));
        }
        Ok(MultiIndex::new(&v))
    }
}

/// `k!` as a float.
pub fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Binomial coefficient `C(a, b)` as a float (zero when `b > a`).
pub fn binomial(a: usize, b: usize) -> f64 {
    if b > a {
        return 0.0;
    }
    let b = b.min(a - b);
    let mut r = 1.0;
    for i in 0..b {
        r = r * (a - i) as f64 / (i + 1) as f64;
    }
    r
}

/// Compares two multi-indices in the order used for labels.
///
/// Let `k ∈ {0, …, n}` be the largest index at which the prefix sums
/// `Σ_{i ≤ k} α_i` and `Σ_{i ≤ k} β_i` differ; then `α < β` iff the prefix sum
/// of `α` is smaller there. Equal multi-indices compare as [`Ordering::Equal`].
pub fn multiindex_cmp(a: &MultiIndex, b: &MultiIndex) -> Ordering {
    debug_assert_eq!(a.n, b.n, "multi-indices of different dimension");
    let sa = a.prefix_sums();
    let sb = b.prefix_sums();
    for k in (0..=a.n()).rev() {
        match sa[k].cmp(&sb[k]) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// Strict order on multi-indices; `false` when `a == b`.
pub fn multiindex_less(a: &MultiIndex, b: &MultiIndex) -> bool {
    multiindex_cmp(a, b) == Ordering::Less
}

/// The multi-indices of order at most `m − 1` in dimension `n`, sorted by
/// [`multiindex_less`], with a dense position table.
#[derive(Debug)]
pub struct IndexSet {
    /// Exclusive order bound.
    pub m: usize,
    /// Dimension.
    pub n: usize,
    /// Members in ascending order.
    pub items: Vec<MultiIndex>,
    pos: Vec<usize>,
}

impl IndexSet {
    fn build(m: usize, n: usize) -> Self {
        let mut items = Vec::new();
        if m > 0 {
            match n {
                1 => items.extend((0..m).map(|a| MultiIndex::new(&[a]))),
                2 => {
                    for a in 0..m {
                        for b in 0..m - a {
                            items.push(MultiIndex::new(&[a, b]));
                        }
                    }
                }
                _ => unreachable!("dimension checked by caller"),
            }
        }
        items.sort_by(multiindex_cmp);
        let side = m.max(1);
        let mut pos = vec![usize::MAX; side.pow(n as u32)];
        for (k, a) in items.iter().enumerate() {
            pos[Self::slot(side, a)] = k;
        }
        Self { m, n, items, pos }
    }

    fn slot(side: usize, a: &MultiIndex) -> usize {
        let mut s = 0;
        for i in (0..a.n()).rev() {
            s = s * side + a.get(i);
        }
        s
    }

    /// Number of members (the dimension `D` of the polynomial space).
    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// True when the set is empty (only for `m = 0`).
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Position of `a` in the enumeration, if `|a| < m`.
    pub fn position(&self, a: &MultiIndex) -> Option<usize> {
        if a.order() >= self.m {
            return None;
        }
        let k = self.pos[Self::slot(self.m.max(1), a)];
        (k != usize::MAX).then_some(k)
    }
}

/// Cached index set for exclusive order bound `m` and dimension `n`.
///
/// # Panics
/// Panics if `n ∉ {1, 2}` or `m` exceeds the internal table size.
pub fn index_set(m: usize, n: usize) -> &'static IndexSet {
    static TABLE: OnceLock<Vec<IndexSet>> = OnceLock::new();
    assert!((1..=MAX_N).contains(&n), "dimension must be 1 or 2");
    assert!(m <= MAX_TABLE_M, "order too large");
    let table = TABLE.get_or_init(|| {
        let mut v = Vec::new();
        for n in 1..=MAX_N {
            for m in 0..=MAX_TABLE_M {
                v.push(IndexSet::build(m, n));
            }
        }
        v
    });
    &table[(n - 1) * (MAX_TABLE_M + 1) + m]
}

/// Dimension of the space of polynomials of degree at most `m − 1` in `n` variables.
pub fn poly_dim(m: usize, n: usize) -> usize {
    index_set(m, n).len()
}

/// Multi-indices of order exactly `k` in dimension `n`, ascending.
pub fn indices_of_order(k: usize, n: usize) -> Vec<MultiIndex> {
    index_set(k + 1, n)
        .items
        .iter()
        .copied()
        .filter(|a| a.order() == k)
        .collect()
}

/// A label: a subset of the multi-indices of order at most `m − 1`.
///
/// Stored as a bit mask over the ascending enumeration, so the minimal element
/// of a set is its lowest set bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Label {
    m: u8,
    n: u8,
    bits: u32,
}

impl Label {
    /// The empty label (maximal in the label order).
    pub fn empty(m: usize, n: usize) -> Self {
        Self {
            m: m as u8,
            n: n as u8,
            bits: 0,
        }
    }

    /// The full label `M` (minimal in the label order).
    pub fn full(m: usize, n: usize) -> Self {
        let d = poly_dim(m, n);
        Self {
            m: m as u8,
            n: n as u8,
            bits: if d == 32 { u32::MAX } else { (1u32 << d) - 1 },
        }
    }

    /// Builds a label from members.
    pub fn from_members(m: usize, n: usize, members: &[MultiIndex]) -> Result<Self> {
        let set = index_set(m, n);
        let mut bits = 0u32;
        for a in members {
            let k = set.position(a).ok_or_else(|| {
                Error::Domain(format!(
                    "multi-index {:?} is not of order < {m}",
                    a.entries()
                ))
            })?;
            bits |= 1 << k;
        }
        Ok(Self {
            m: m as u8,
            n: n as u8,
            bits,
        })
    }

    /// Builds a label from a raw bit mask over the ascending enumeration.
    pub fn from_bits(m: usize, n: usize, bits: u32) -> Self {
        Self {
            m: m as u8,
            n: n as u8,
            bits,
        }
    }

    /// Raw bit mask.
    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Smoothness parameter `m`.
    pub fn m(&self) -> usize {
        self.m as usize
    }

    /// Dimension `n`.
    pub fn n(&self) -> usize {
        self.n as usize
    }

    /// Membership test.
    pub fn contains(&self, a: &MultiIndex) -> bool {
        index_set(self.m(), self.n())
            .position(a)
            .is_some_and(|k| self.bits & (1 << k) != 0)
    }

    /// Members in ascending order.
    pub fn members(&self) -> Vec<MultiIndex> {
        index_set(self.m(), self.n())
            .items
            .iter()
            .enumerate()
            .filter(|(k, _)| self.bits & (1 << k) != 0)
            .map(|(_, a)| *a)
            .collect()
    }

    /// Number of members.
    pub fn len(&self) -> usize {
        self.bits.count_ones() as usize
    }

    /// True for the empty label.
    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    /// True when the label is all of `M`.
    pub fn is_full(&self) -> bool {
        *self == Self::full(self.m(), self.n())
    }

    /// Monotonicity: `α ∈ A` and `|γ| ≤ m − 1 − |α|` imply `α + γ ∈ A`.
    pub fn is_monotonic(&self) -> bool {
        let set = index_set(self.m(), self.n());
        self.members().iter().all(|a| {
            set.items
                .iter()
                .filter(|g| g.order() + a.order() < self.m())
                .all(|g| self.contains(&a.add(g)))
        })
    }

    /// Strict label order: `A < B` iff the minimal element of `A Δ B` lies in `A`.
    pub fn less(&self, other: &Self) -> bool {
        label_less(self, other)
    }

    /// Human-readable form such as `{(0,1),(1,0)}`.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .members()
            .iter()
            .map(|a| {
                let e: Vec<String> = a.entries().iter().map(|v| v.to_string()).collect();
                format!("({})", e.join(","))
            })
            .collect();
        format!("{{{}}}", parts.join(","))
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.members().serialize(s)
    }
}

/// Strict label order; `false` when `a == b`.
pub fn label_less(a: &Label, b: &Label) -> bool {
    let sym = a.bits ^ b.bits;
    if sym == 0 {
        return false;
    }
    let lowest = sym & sym.wrapping_neg();
    a.bits & lowest != 0
}

/// Total order on labels as an [`Ordering`].
pub fn label_cmp(a: &Label, b: &Label) -> Ordering {
    if a == b {
        Ordering::Equal
    } else if label_less(a, b) {
        Ordering::Less
    } else {
        Ordering::Greater
    }
}

/// All monotonic labels for `(m, n)`, in ascending label order (`M` first, `∅` last).
pub fn monotonic_labels(m: usize, n: usize) -> Vec<Label> {
    let d = poly_dim(m, n);
    let mut out: Vec<Label> = (0..(1u64 << d))
        .map(|bits| Label::from_bits(m, n, bits as u32))
        .filter(Label::is_monotonic)
        .collect();
    out.sort_by(label_cmp);
    out
}

/// A polynomial of degree at most `m − 1` in `n` variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    m: usize,
    n: usize,
    coeffs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JetCoeffRepr {
    alpha: MultiIndex,
    c: f64,
}

#[derive(Serialize, Deserialize)]
struct JetRepr {
    m: usize,
    n: usize,
    coeffs: Vec<JetCoeffRepr>,
}

impl Serialize for Jet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let set = index_set(self.m, self.n);
        JetRepr {
            m: self.m,
            n: self.n,
            coeffs: set
                .items
                .iter()
                .zip(&self.coeffs)
                .map(|(a, &c)| JetCoeffRepr { alpha: *a, c })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Jet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = JetRepr::deserialize(d)?;
        check_mn(r.m, r.n).map_err(serde::de::Error::custom)?;
        let set = index_set(r.m, r.n);
        let mut coeffs = vec![0.0; set.len()];
        for e in r.coeffs {
            if e.alpha.n() != r.n {
                return Err(serde::de::Error::custom("multi-index dimension mismatch"));
            }
            let k = set
                .position(&e.alpha)
                .ok_or_else(|| serde::de::Error::custom("multi-index order too large"))?;
            coeffs[k] += e.c;
        }
        Ok(Jet {
            m: r.m,
            n: r.n,
            coeffs,
        })
    }
}

/// Validates the user-facing caps `1 ≤ m ≤ 4`, `1 ≤ n ≤ 2`.
pub fn check_mn(m: usize, n: usize) -> Result<()> {
    if !(1..=MAX_M).contains(&m) {
        return Err(Error::Config(format!("m must lie in 1..={MAX_M}, got {m}")));
    }
    if !(1..=MAX_N).contains(&n) {
        return Err(Error::Config(format!("n must lie in 1..={MAX_N}, got {n}")));
    }
    Ok(())
}

impl Jet {
    /// The zero polynomial.
    pub fn zero(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            coeffs: vec![0.0; poly_dim(m, n)],
        }
    }

    /// The constant polynomial `c`.
    pub fn constant(m: usize, n: usize, c: f64) -> Self {
        let mut j = Self::zero(m, n);
        j.coeffs[0] = c;
        j
    }

    /// Builds a jet from monomial coefficients aligned with [`index_set`]`(m, n)`.
    pub fn from_coeffs(m: usize, n: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != poly_dim(m, n) {
            return Err(Error::Domain(format!(
                "expected {} coefficients, got {}",
                poly_dim(m, n),
                coeffs.len()
            )));
        }
        Ok(Self { m, n, coeffs })
    }

    /// The `k`-th basis monomial `x^{α_k}`.
    pub fn basis(m: usize, n: usize, k: usize) -> Self {
        let mut j = Self::zero(m, n);
        j.coeffs[k] = 1.0;
        j
    }

    /// Smoothness parameter (degree bound plus one).
    pub fn m(&self) -> usize {
        self.m
    }

    /// Dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Monomial coefficients about the origin.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient of `x^α`.
    pub fn coeff(&self, a: &MultiIndex) -> f64 {
        index_set(self.m, self.n)
            .position(a)
            .map_or(0.0, |k| self.coeffs[k])
    }

    /// Evaluates `P(x)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        index_set(self.m, self.n)
            .items
            .iter()
            .zip(&self.coeffs)
            .map(|(a, c)| c * a.monomial(x))
            .sum()
    }

    /// `∂^α P(x)`.
    pub fn deriv(&self, a: &MultiIndex, x: &[f64]) -> f64 {
        let set = index_set(self.m, self.n);
        let mut s = 0.0;
        for (b, &c) in set.items.iter().zip(&self.coeffs) {
            if c == 0.0 {
                continue;
            }
            if let Some(d) = b.checked_sub(a) {
                s += c * b.binomial(a) * a.factorial() * d.monomial(x);
            }
        }
        s
    }

    /// All derivatives `∂^α P(x)` for `α ∈ M`, aligned with [`index_set`].
    pub fn derivs_at(&self, x: &[f64]) -> Vec<f64> {
        let set = index_set(self.m, self.n);
        set.items.iter().map(|a| self.deriv(a, x)).collect()
    }

    /// Taylor coefficients `∂^α P(x) / α!` about `x`.
    pub fn taylor_at(&self, x: &[f64]) -> Vec<f64> {
        let set = index_set(self.m, self.n);
        set.items
            .iter()
            .map(|a| self.deriv(a, x) / a.factorial())
            .collect()
    }

    /// The polynomial with prescribed derivatives `∂^α P(x) = d_α`.
    pub fn from_derivs_at(m: usize, n: usize, x: &[f64], d: &[f64]) -> Self {
        let set = index_set(m, n);
        let taylor: Vec<f64> = set
            .items
            .iter()
            .zip(d)
            .map(|(a, v)| v / a.factorial())
            .collect();
        Self::from_taylor_at(m, n, x, &taylor)
    }

    /// The polynomial `Σ c_α (y − x)^α` re-expanded about the origin.
    pub fn from_taylor_at(m: usize, n: usize, x: &[f64], c: &[f64]) -> Self {
        let set = index_set(m, n);
        let mut coeffs = vec![0.0; set.len()];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        for (a, &ca) in set.items.iter().zip(c) {
            if ca == 0.0 {
                continue;
            }
            for (kb, b) in set.items.iter().enumerate() {
                if let Some(d) = a.checked_sub(b) {
                    coeffs[kb] += ca * a.binomial(b) * d.monomial(&neg);
                }
            }
        }
        Self { m, n, coeffs }
    }

    /// `self + other`.
    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    /// `self − other`.
    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    /// `t · self`.
    pub fn scale(&self, t: f64) -> Self {
        Self {
            m: self.m,
            n: self.n,
            coeffs: self.coeffs.iter().map(|c| c * t).collect(),
        }
    }

    /// `self + t · other`.
    pub fn axpy(&self, t: f64, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + t * b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.m, self.n), (other.m, other.n), "jet shape mismatch");
        Self {
            m: self.m,
            n: self.n,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Largest absolute coefficient.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |a, c| a.max(c.abs()))
    }
}

/// A polynomial expanded about an explicit center: `P(y) = Σ c_α (y − x)^α`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CenteredJet {
    /// Expansion point `x`.
    pub center: Vec<f64>,
    /// Smoothness parameter.
    pub m: usize,
    /// Taylor coefficients aligned with [`index_set`]`(m, n)`.
    pub coeffs: Vec<f64>,
}

impl CenteredJet {
    /// Expands `p` about `x`.
    pub fn from_jet(p: &Jet, x: &[f64]) -> Self {
        Self {
            center: x.to_vec(),
            m: p.m(),
            coeffs: p.taylor_at(x),
        }
    }

    /// Returns the same polynomial in origin form.
    pub fn to_jet(&self) -> Jet {
        Jet::from_taylor_at(self.m, self.center.len(), &self.center, &self.coeffs)
    }

    /// Evaluates the polynomial at `y`.
    pub fn eval(&self, y: &[f64]) -> f64 {
        let set = index_set(self.m, self.center.len());
        let d: Vec<f64> = y.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        set.items
            .iter()
            .zip(&self.coeffs)
            .map(|(a, c)| c * a.monomial(&d))
            .sum()
    }
}

/// Re-expands a centered polynomial about a new point; values are unchanged.
pub fn transport(p: &CenteredJet, to: &[f64]) -> CenteredJet {
    CenteredJet::from_jet(&p.to_jet(), to)
}

/// The norm `|P|_{x,δ} = (Σ_α |∂^α P(x)|^p δ^{n + (|α| − m)p})^{1/p}`.
pub fn jet_norm(p_jet: &Jet, x: &[f64], delta: f64, p: f64) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!("jet_norm needs δ > 0, got {delta}")));
    }
    let (m, n) = (p_jet.m() as f64, p_jet.n() as f64);
    let set = index_set(p_jet.m(), p_jet.n());
    let mut s = 0.0;
    for a in &set.items {
        let d = p_jet.deriv(a, x);
        if d != 0.0 {
            s += d.abs().powf(p) * delta.powf(n + (a.order() as f64 - m) * p);
        }
    }
    Ok(s.powf(1.0 / p))
}

/// The truncated product `P ⊙_x Q = J_x(P·Q)`.
pub fn jet_product(a: &Jet, b: &Jet, x: &[f64]) -> Jet {
    assert_eq!((a.m(), a.n()), (b.m(), b.n()), "jet shape mismatch");
    let set = index_set(a.m(), a.n());
    let prod = taylor_mul(set, &a.taylor_at(x), &b.taylor_at(x));
    Jet::from_taylor_at(a.m(), a.n(), x, &prod)
}

/// Truncated product of two Taylor coefficient vectors aligned with `set`.
pub fn taylor_mul(set: &IndexSet, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; set.len()];
    for (i, ai) in set.items.iter().enumerate() {
        if a[i] == 0.0 {
            continue;
        }
        for (j, bj) in set.items.iter().enumerate() {
            if b[j] == 0.0 || ai.order() + bj.order() >= set.m {
                continue;
            }
            if let Some(k) = set.position(&ai.add(bj)) {
                out[k] += a[i] * b[j];
            }
        }
    }
    out
}

/// Truncated reciprocal `1/a` of a Taylor vector with nonzero constant term.
pub fn taylor_recip(set: &IndexSet, a: &[f64]) -> Vec<f64> {
    let a0 = a[0];
    assert!(a0 != 0.0, "reciprocal of a series with zero constant term");
    // 1/a = (1/a0) Σ_k (−r/a0)^k with r = a − a0, truncated at the set order.
    let mut r: Vec<f64> = a.iter().map(|v| -v / a0).collect();
    r[0] = 0.0;
    let mut term = vec![0.0; set.len()];
    term[0] = 1.0;
    let mut acc = term.clone();
    for _ in 1..set.m.max(1) {
        term = taylor_mul(set, &term, &r);
        for (s, t) in acc.iter_mut().zip(&term) {
            *s += t;
        }
    }
    acc.iter().map(|v| v / a0).collect()
}

/// Result of [`rectify_basis`].
#[derive(Clone, Debug)]
pub struct Rectified {
    /// Mixing matrix `B` with `P̃^α = Σ_β B_{αβ} P^β`.
    pub mixing: DMatrix<f64>,
    /// The rectified jets, in the order of `label.members()`.
    pub jets: Vec<Jet>,
    /// Largest deviation `|B_{αβ} − δ_{αβ}|` over `β ≥ α`.
    pub upper_deviation: f64,
}

/// Turns near-dual candidates `P^α` (`α ∈ A`) into exactly dual jets.
///
/// The matrix `G_{αβ} = ∂^β P^α(x)` is inverted by LU with partial pivoting on
/// rows ordered by the label order; the returned jets satisfy
/// `∂^β P̃^α(x) = δ_{αβ}` for `α, β ∈ A`.
pub fn rectify_basis(candidates: &[Jet], label: &Label, x: &[f64]) -> Result<Rectified> {
    let members = label.members();
    if candidates.len() != members.len() {
        return Err(Error::Domain(format!(
            "expected {} candidates, got {}",
            members.len(),
            candidates.len()
        )));
    }
    let k = members.len();
    if k == 0 {
        return Ok(Rectified {
            mixing: DMatrix::zeros(0, 0),
            jets: Vec::new(),
            upper_deviation: 0.0,
        });
    }
    let g = DMatrix::from_fn(k, k, |i, j| candidates[i].deriv(&members[j], x));
    let scale = g.amax().max(1.0);
    let lu = g.clone().full_piv_lu();
    let u = lu.u();
    let min_pivot = (0..k)
        .map(|i| u[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * scale) {
        return Err(Error::Degenerate(
            "candidate jets do not form a basis dual to the label".into(),
        ));
    }
    let b = lu
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("duality matrix is singular".into()))?;
    let jets: Vec<Jet> = (0..k)
        .map(|a| {
            let mut acc = Jet::zero(candidates[0].m(), candidates[0].n());
            for (bidx, cand) in candidates.iter().enumerate() {
                acc = acc.axpy(b[(a, bidx)], cand);
            }
            acc
        })
        .collect();
    let mut dev: f64 = 0.0;
    for a in 0..k {
        for bb in a..k {
            let target = if a == bb { 1.0 } else { 0.0 };
            dev = dev.max((b[(a, bb)] - target).abs());
        }
    }
    Ok(Rectified {
        mixing: b,
        jets,
        upper_deviation: dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn index_set_sizes() {
        assert_eq!(poly_dim(1, 1), 1);
        assert_eq!(poly_dim(3, 1), 3);
        assert_eq!(poly_dim(3, 2), 6);
        assert_eq!(poly_dim(4, 2), 10);
    }

    #[test]
    fn enumeration_is_sorted_by_order() {
        let set = index_set(4, 2);
        for w in set.items.windows(2) {
            assert!(multiindex_less(&w[0], &w[1]));
        }
        assert_eq!(set.items[0], MultiIndex::zero(2));
    }

    #[test]
    fn recip_inverts() {
        let set = index_set(4, 1);
        let a = vec![2.0, 1.0, -0.5, 0.25];
        let r = taylor_recip(set, &a);
        let one = taylor_mul(set, &a, &r);
        assert_abs_diff_eq!(one[0], 1.0, epsilon = 1e-14);
        for v in &one[1..] {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-14);
        }
    }
}
