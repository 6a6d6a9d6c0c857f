//! The extension operator `T`, the functional `M` and the functional ledger.
//!
//! Every operator built here is linear in its inputs. A level of the
//! recursion takes the data values `f` of its atoms together with the
//! origin coefficients of an anchoring polynomial `P` and returns:
//!
//! * a [`Field`] evaluating `T(f, P)` and its jets anywhere,
//! * a list of [`Terms`]: weighted linear residuals whose `p`-th powers add
//!   up to `M(f, P)^p`.
//!
//! A level is one of three kinds. The base case returns `T = P` with the
//! misfit `P(x) − f` at every atom. A leaf solves the local variational
//! problem directly. A CZ level decomposes its root box, computes coherent
//! keystone jets with a constrained linear selection, hands every cube the
//! jet of its keystone and patches the cube operators with a partition of
//! unity. At the top level the anchoring polynomial itself is chosen as a
//! linear function `ξ(f)` of the data.

use crate::config::RunConfig;
use crate::dyadic::{cz_decompose, CubeStatus, CzTree, Grid};
use crate::error::{Error, Result};
use crate::field::{seminorm_pow, Blend, Field, Part, Patched};
use crate::jets::{index_set, Jet, Label};
use crate::linmap::{select, Method, QuadraticBlockProblem};
use crate::measures::{AtomicMeasure, Rect};
use crate::norms::{overlap_audit, Support};
use crate::oracle::{find_label, local_solve, RowKind, SpecAtom, Witness};
use crate::pou::{outer_cutoff, BumpSystem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::sync::Arc;

/// Side of a nested root box in units of the cube side.
pub const NESTED_ROOT_FACTOR: f64 = 11.0;

/// Dilation of a keystone cube bounding its local jet problem.
pub const KEYSTONE_SUPPORT: f64 = 9.0;

/// Origin of an M-term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TermKind {
    /// Misfit at an atom (a `ζ` term integrated against `μ`).
    Data {
        /// Atom index at the level owning the terms.
        atom: usize,
    },
    /// A quadrature sample of an `m`-th derivative.
    Seminorm,
    /// A quadrature sample of the anchoring misfit `F − P`.
    Anchor,
    /// A derivative of `R_i − R_{i′}` for neighboring cubes.
    Neighbor,
    /// A derivative of `R_b − P` for a cube touching the root boundary.
    Boundary,
}

/// Weighted linear residuals `weight · |row · u|^p`.
#[derive(Clone, Debug)]
pub struct Terms {
    /// One row per term over the level inputs.
    pub rows: DMatrix<f64>,
    /// Nonnegative finite weights.
    pub weights: Vec<f64>,
    /// Origin of every term.
    pub kinds: Vec<TermKind>,
}

impl Terms {
    /// Number of terms.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    /// True when there are no terms.
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Substitutes `u = map · v`; data terms are renumbered through `atoms`.
    fn compose(&self, map: &DMatrix<f64>, atoms: &[usize]) -> Self {
        Self {
            rows: &self.rows * map,
            weights: self.weights.clone(),
            kinds: self
                .kinds
                .iter()
                .map(|k| match k {
                    TermKind::Data { atom } => TermKind::Data { atom: atoms[*atom] },
                    other => *other,
                })
                .collect(),
        }
    }

    /// Residuals `rows · u`.
    pub fn residuals(&self, u: &[f64]) -> Vec<f64> {
        (&self.rows * DVector::from_column_slice(u))
            .iter()
            .copied()
            .collect()
    }

    /// `(Σ_data weight |r|^p, Σ_other weight |r|^p)`.
    pub fn split_pow(&self, u: &[f64], p: f64) -> (f64, f64) {
        let r = self.residuals(u);
        let (mut zeta, mut psi) = (0.0, 0.0);
        for ((ri, w), k) in r.iter().zip(&self.weights).zip(&self.kinds) {
            if *ri == 0.0 || *w == 0.0 {
                continue;
            }
            let v = w * ri.abs().powf(p);
            match k {
                TermKind::Data { .. } => zeta += v,
                _ => psi += v,
            }
        }
        (zeta, psi)
    }
}

#[derive(Default)]
struct TermsBuilder {
    blocks: Vec<Terms>,
}

impl TermsBuilder {
    fn push(&mut self, t: Terms) {
        if !t.is_empty() {
            self.blocks.push(t);
        }
    }

    fn push_rows(&mut self, rows: Vec<Vec<f64>>, weights: Vec<f64>, kind: TermKind, nin: usize) {
        if rows.is_empty() {
            return;
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        self.blocks.push(Terms {
            rows: DMatrix::from_row_slice(rows.len(), nin, &flat),
            kinds: vec![kind; weights.len()],
            weights,
        });
    }

    fn finish(self, nin: usize) -> Terms {
        let total: usize = self.blocks.iter().map(Terms::len).sum();
        let mut rows = DMatrix::zeros(total, nin);
        let mut weights = Vec::with_capacity(total);
        let mut kinds = Vec::with_capacity(total);
        let mut at = 0;
        for b in self.blocks {
            rows.view_mut((at, 0), (b.len(), nin)).copy_from(&b.rows);
            at += b.len();
            weights.extend(b.weights);
            kinds.extend(b.kinds);
        }
        Terms {
            rows,
            weights,
            kinds,
        }
    }
}

/// Kind of a level operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum OperatorKind {
    /// `T(f, P) = P`.
    Base,
    /// A direct local solve.
    Leaf,
    /// A decomposition with patched cube operators.
    Cz,
}

/// A keystone jet `R′_s` as a linear map of the level inputs.
#[derive(Clone, Debug, Serialize)]
pub struct KeystoneMap {
    /// Cube index in the level's decomposition.
    pub cube: usize,
    /// Center `x_s`.
    pub center: Vec<f64>,
    /// Support `9Q_s` of the jet functional.
    pub support: Rect,
    /// `D × (N + D)`: origin coefficients of `R′_s` from `(f, P)`.
    #[serde(skip)]
    pub map: DMatrix<f64>,
    /// Number of cubes entering the local jet problem.
    pub members: usize,
    /// Selection formula used.
    pub method: Method,
}

/// A linear operator for one level of the recursion.
#[derive(Clone, Debug)]
pub struct LocalOperator {
    /// `T`. Inputs are `(f, P)`, or `(f, ω, P)` when keystone jets are exposed.
    pub field: Field,
    /// `M` terms over `(f, P)`.
    pub terms: Terms,
    /// Number of atoms.
    pub natoms: usize,
    /// Dimension of the polynomial space.
    pub dim: usize,
    /// Exposed keystone jets (in the order of the `ω` inputs).
    pub keystones: Vec<KeystoneMap>,
    /// Kind of operator.
    pub kind: OperatorKind,
}

impl LocalOperator {
    /// `T(f, P)(y)`.
    pub fn eval(&self, y: &[f64], f: &[f64], p0: &Jet) -> f64 {
        let u = self.inputs(f, p0);
        self.field.value(y, &u)
    }

    /// `M(f, P)`.
    pub fn m_value(&self, f: &[f64], p0: &Jet, p: f64) -> f64 {
        let mut u = f.to_vec();
        u.extend_from_slice(p0.coeffs());
        let (z, s) = self.terms.split_pow(&u, p);
        (z + s).powf(1.0 / p)
    }

    fn inputs(&self, f: &[f64], p0: &Jet) -> Vec<f64> {
        let mut v = f.to_vec();
        v.extend_from_slice(p0.coeffs());
        if self.keystones.is_empty() {
            return v;
        }
        let mut u = f.to_vec();
        let vv = DVector::from_column_slice(&v);
        for k in &self.keystones {
            let mut kf = k.map.clone();
            for c in 0..self.dim {
                kf.column_mut(self.natoms + c).fill(0.0);
            }
            u.extend((&kf * &vv).iter());
        }
        u.extend_from_slice(p0.coeffs());
        u
    }
}

/// A decomposition built during the recursion.
#[derive(Clone, Debug, Serialize)]
pub struct TreeRecord {
    /// Recursion level (0 for the top).
    pub nest: usize,
    /// Root box of the decomposition.
    pub root: Rect,
    /// The decomposition.
    pub tree: CzTree,
}

/// Counters collected while building an operator.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    /// Base-case operators.
    pub bases: usize,
    /// Leaf operators.
    pub leaves: usize,
    /// Decompositions.
    pub decompositions: usize,
    /// Label delegations `(level, label)`.
    pub delegations: Vec<(usize, String)>,
    /// Deepest recursion level reached.
    pub max_nest: usize,
    /// Keystone jets computed.
    pub keystones: usize,
    /// Largest `|∂^α R′_s(x_s) − ∂^α P(x_s)|` over `α ∈ A` and all keystones.
    pub coherence_error: f64,
}

#[derive(Default)]
struct BuildLog {
    trees: Vec<TreeRecord>,
    diag: Diagnostics,
}

fn derivative_matrix(m: usize, n: usize, x: &[f64]) -> DMatrix<f64> {
    let d = index_set(m, n).len();
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d {
        let col = Jet::basis(m, n, k).derivs_at(x);
        for (r, v) in col.iter().enumerate() {
            out[(r, k)] = *v;
        }
    }
    out
}

/// Origin coefficients of `Σ_α w_α δ^{−|α|} (y − x)^α` as a `D × D` matrix.
fn scaled_taylor_matrix(m: usize, n: usize, x: &[f64], delta: f64) -> DMatrix<f64> {
    let set = index_set(m, n);
    let d = set.len();
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut c = vec![0.0; d];
        c[k] = delta.powi(-(set.items[k].order() as i32));
        let j = Jet::from_taylor_at(m, n, x, &c);
        for (r, v) in j.coeffs().iter().enumerate() {
            out[(r, k)] = *v;
        }
    }
    out
}

fn jet_weights(m: usize, n: usize, delta: f64, p: f64) -> Vec<f64> {
    index_set(m, n)
        .items
        .iter()
        .map(|a| delta.powf(n as f64 + (a.order() as f64 - m as f64) * p))
        .collect()
}

fn spec_atoms(mu: &AtomicMeasure) -> Vec<SpecAtom> {
    mu.atoms
        .iter()
        .map(|a| SpecAtom {
            x: a.x.clone(),
            w: a.w,
        })
        .collect()
}

fn base_operator(mu: &AtomicMeasure, cfg: &RunConfig, log: &mut BuildLog) -> Result<LocalOperator> {
    let set = index_set(cfg.m, mu.n);
    let (nat, d) = (mu.len(), set.len());
    let nin = nat + d;
    let mut coeffs = DMatrix::zeros(d, nin);
    for k in 0..d {
        coeffs[(k, nat + k)] = 1.0;
    }
    let mut rows = DMatrix::zeros(nat, nin);
    let mut weights = Vec::with_capacity(nat);
    for (i, a) in mu.atoms.iter().enumerate() {
        let w = a.w.finite().ok_or_else(|| {
            Error::Degenerate("base case reached with an infinite-weight atom".into())
        })?;
        rows[(i, i)] = -1.0;
        for (k, alpha) in set.items.iter().enumerate() {
            rows[(i, nat + k)] = alpha.monomial(&a.x);
        }
        weights.push(w);
    }
    log.diag.bases += 1;
    Ok(LocalOperator {
        field: Field::Poly {
            m: cfg.m,
            n: mu.n,
            coeffs,
        },
        terms: Terms {
            rows,
            weights,
            kinds: (0..nat).map(|atom| TermKind::Data { atom }).collect(),
        },
        natoms: nat,
        dim: d,
        keystones: Vec::new(),
        kind: OperatorKind::Base,
    })
}

fn leaf_operator(
    mu: &AtomicMeasure,
    domain: &Rect,
    delta: f64,
    cfg: &RunConfig,
    log: &mut BuildLog,
) -> Result<LocalOperator> {
    let ls = local_solve(&spec_atoms(mu), domain, delta, cfg)?;
    let sol = &ls.solution;
    let kinds = sol
        .system
        .rows
        .iter()
        .map(|r| match r.kind {
            RowKind::Data(i) => TermKind::Data { atom: i },
            RowKind::Seminorm => TermKind::Seminorm,
            RowKind::Anchor => TermKind::Anchor,
        })
        .collect();
    let weights = sol.system.rows.iter().map(|r| r.weight).collect();
    log.diag.leaves += 1;
    Ok(LocalOperator {
        field: sol.field(),
        terms: Terms {
            rows: sol.resid.clone(),
            weights,
            kinds,
        },
        natoms: ls.natoms,
        dim: ls.ndim,
        keystones: Vec::new(),
        kind: OperatorKind::Leaf,
    })
}

fn is_small_mass(mu: &AtomicMeasure, delta: f64, cfg: &RunConfig) -> bool {
    if mu.has_infinite() {
        return false;
    }
    let mass: f64 = mu.atoms.iter().map(|a| a.w.value()).sum();
    mass == 0.0
        || mass.powf(1.0 / cfg.p) <= cfg.eps_basis * delta.powf(cfg.n as f64 / cfg.p - cfg.m as f64)
}

#[allow(clippy::too_many_arguments)]
fn build_operator(
    mu: &AtomicMeasure,
    a: Label,
    root: &Rect,
    delta: f64,
    nest: usize,
    expose: bool,
    cfg: &RunConfig,
    log: &mut BuildLog,
) -> Result<LocalOperator> {
    log.diag.max_nest = log.diag.max_nest.max(nest);
    if a.is_full() || mu.is_empty() || is_small_mass(mu, delta, cfg) {
        return base_operator(mu, cfg, log);
    }
    match find_label(&a, mu, delta, cfg)? {
        Some(b) if b.is_full() => base_operator(mu, cfg, log),
        Some(b) => {
            log.diag.delegations.push((nest, b.describe()));
            build_operator(mu, b, root, delta, nest, expose, cfg, log)
        }
        None => cz_operator(mu, a, root, delta, nest, expose, cfg, log),
    }
}

/// Builds the level operator for `μ` with label `A` on `root` at scale `δ`
/// (base case, label delegation or decomposition).
pub fn extend_local(
    mu: &AtomicMeasure,
    a: &Label,
    root: &Rect,
    delta: f64,
    cfg: &RunConfig,
) -> Result<LocalOperator> {
    cfg.validate()?;
    let mut log = BuildLog::default();
    build_operator(mu, *a, root, delta, 0, false, cfg, &mut log)
}

fn keystone_map(
    mu: &AtomicMeasure,
    tree: &CzTree,
    s: usize,
    a: &Label,
    cfg: &RunConfig,
) -> Result<KeystoneMap> {
    let (m, n, p) = (cfg.m, mu.n, cfg.p);
    let set = index_set(m, n);
    let d = set.len();
    let nat = mu.len();
    let nv = nat + d;
    let qs = &tree.cubes[s];
    let (xs, ds) = (qs.center(), qs.delta());
    let support = qs.rect.dilate(KEYSTONE_SUPPORT);
    let members: Vec<usize> = (0..tree.len())
        .filter(|&j| tree.cubes[j].rect.dilate(1.1).closed_intersects(&support))
        .collect();
    let pos_s = members
        .iter()
        .position(|&j| j == s)
        .expect("a keystone belongs to its own neighborhood");
    let nw = d * members.len();
    let local_atoms = mu.indices_in_closed(&support);
    let anchor_point: Vec<f64> = if local_atoms.is_empty() {
        xs.clone()
    } else {
        (0..n)
            .map(|i| {
                local_atoms.iter().map(|&k| mu.atoms[k].x[i]).sum::<f64>()
                    / local_atoms.len() as f64
            })
            .collect()
    };
    let b = scaled_taylor_matrix(m, n, &anchor_point, ds);

    let mut av_rows: Vec<Vec<f64>> = Vec::new();
    let mut aw_rows: Vec<Vec<f64>> = Vec::new();
    let mut weights = Vec::new();
    for (bj, &j) in members.iter().enumerate() {
        let qj = &tree.cubes[j];
        let Some(dom) = qj.rect.dilate(1.1).intersect(&support) else {
            continue;
        };
        if (0..n).any(|i| dom.side(i) <= 1e-12 * qj.delta()) {
            continue;
        }
        let idx = mu.indices_in_closed(&dom);
        let sub = mu.subset(&idx);
        let ls = local_solve(&spec_atoms(&sub), &dom, qj.delta(), cfg)?;
        let sol = &ls.solution;
        let pb = sol.resid.columns(idx.len(), d) * &b;
        for (t, row) in sol.system.rows.iter().enumerate() {
            if row.weight == 0.0 {
                continue;
            }
            let mut av = vec![0.0; nv];
            for (k, &atom) in idx.iter().enumerate() {
                av[atom] = sol.resid[(t, k)];
            }
            let mut aw = vec![0.0; nw];
            for c in 0..d {
                aw[bj * d + c] = pb[(t, c)];
            }
            av_rows.push(av);
            aw_rows.push(aw);
            weights.push(row.weight);
        }
    }
    for (bj, &j) in members.iter().enumerate() {
        let qj = &tree.cubes[j];
        let g = derivative_matrix(m, n, &qj.center()) * &b;
        let wj = jet_weights(m, n, qj.delta(), p);
        for &jj in &tree.neighbors[j] {
            let Some(bk) = members.iter().position(|&x| x == jj) else {
                continue;
            };
            for r in 0..d {
                let mut aw = vec![0.0; nw];
                for c in 0..d {
                    aw[bj * d + c] += g[(r, c)];
                    aw[bk * d + c] -= g[(r, c)];
                }
                av_rows.push(vec![0.0; nv]);
                aw_rows.push(aw);
                weights.push(wj[r]);
            }
        }
    }
    let t = weights.len();
    let av = DMatrix::from_fn(t, nv, |i, k| av_rows[i][k]);
    let aw = DMatrix::from_fn(t, nw, |i, k| aw_rows[i][k]);
    let mut problem = QuadraticBlockProblem::new(av, aw, weights, p);
    let members_a = a.members();
    if !members_a.is_empty() {
        let dxs = derivative_matrix(m, n, &xs);
        let g = &dxs * &b;
        let k = members_a.len();
        let mut psi_v = DMatrix::zeros(k, nv);
        let mut psi_w = DMatrix::zeros(k, nw);
        for (r, alpha) in members_a.iter().enumerate() {
            let ai = set
                .position(alpha)
                .expect("label members are multi-indices of order < m");
            for c in 0..d {
                psi_w[(r, pos_s * d + c)] = g[(ai, c)];
                psi_v[(r, nat + c)] = -dxs[(ai, c)];
            }
        }
        problem.constraint = Some((psi_v, psi_w));
    }
    let sel = select(&problem)?;
    let map = &b * sel.map.rows(pos_s * d, d);
    Ok(KeystoneMap {
        cube: s,
        center: xs,
        support,
        map,
        members: members.len(),
        method: sel.method,
    })
}

fn touches_boundary(r: &Rect, root: &Rect) -> bool {
    (0..r.n()).any(|i| r.lo[i] <= root.lo[i] || r.hi[i] >= root.hi[i])
}

#[allow(clippy::too_many_arguments)]
fn cz_operator(
    mu: &AtomicMeasure,
    a: Label,
    root: &Rect,
    delta: f64,
    nest: usize,
    expose: bool,
    cfg: &RunConfig,
    log: &mut BuildLog,
) -> Result<LocalOperator> {
    let (m, n, p) = (cfg.m, mu.n, cfg.p);
    let set = index_set(m, n);
    let d = set.len();
    let nat = mu.len();
    let nin = nat + d;
    let tree = cz_decompose(mu, &a, &Grid::from_rect(root), cfg)?;
    log.diag.decompositions += 1;

    let ks = tree.keystones();
    let mut kmaps: Vec<Option<KeystoneMap>> = vec![None; tree.len()];
    for &s in &ks {
        let km = keystone_map(mu, &tree, s, &a, cfg)?;
        let dxs = derivative_matrix(m, n, &km.center);
        let lhs = &dxs * &km.map;
        for alpha in a.members() {
            let ai = set
                .position(&alpha)
                .expect("label members are multi-indices of order < m");
            for c in 0..nin {
                let want = if c >= nat { dxs[(ai, c - nat)] } else { 0.0 };
                let scale = 1.0 + want.abs();
                log.diag.coherence_error = log
                    .diag
                    .coherence_error
                    .max((lhs[(ai, c)] - want).abs() / scale);
            }
        }
        kmaps[s] = Some(km);
        log.diag.keystones += 1;
    }
    let rmap = |i: usize| -> &DMatrix<f64> {
        &kmaps[tree.kappa[i]]
            .as_ref()
            .expect("κ maps to keystone cubes")
            .map
    };
    let exposed: Vec<usize> = if expose { ks.clone() } else { Vec::new() };
    let nin_field = nat + d * exposed.len() + d;

    let mut terms = TermsBuilder::default();
    let mut parts = Vec::with_capacity(tree.len());
    for (i, c) in tree.cubes.iter().enumerate() {
        let b11 = c.rect.dilate(1.1);
        let idx = mu.indices_in_closed(&b11);
        let sub = mu.subset(&idx);
        let child = match c.status {
            CubeStatus::Ok(Witness::SmallMass) => base_operator(&sub, cfg, log)?,
            CubeStatus::Terminal => leaf_operator(&sub, &b11, c.delta(), cfg, log)?,
            CubeStatus::Ok(Witness::Label(l)) => {
                if nest + 1 >= cfg.max_nesting {
                    leaf_operator(&sub, &b11, c.delta(), cfg, log)?
                } else {
                    let sub_root = Rect::centered(&c.center(), NESTED_ROOT_FACTOR * c.delta());
                    build_operator(&sub, l, &sub_root, c.delta(), nest + 1, false, cfg, log)?
                }
            }
        };
        let ni = idx.len();
        let mut cmap = DMatrix::zeros(ni + d, nin);
        for (k, &at) in idx.iter().enumerate() {
            cmap[(k, at)] = 1.0;
        }
        cmap.view_mut((ni, 0), (d, nin)).copy_from(rmap(i));
        terms.push(child.terms.compose(&cmap, &idx));
        let fmap = if expose {
            let mut fm = DMatrix::zeros(ni + d, nin_field);
            for (k, &at) in idx.iter().enumerate() {
                fm[(k, at)] = 1.0;
            }
            let s = tree.kappa[i];
            let pos = exposed
                .iter()
                .position(|&x| x == s)
                .expect("κ maps to keystone cubes");
            let km = rmap(i);
            for r in 0..d {
                fm[(ni + r, nat + pos * d + r)] = 1.0;
                for c in 0..d {
                    fm[(ni + r, nat + exposed.len() * d + c)] = km[(r, nat + c)];
                }
            }
            fm
        } else {
            cmap
        };
        parts.push(Part {
            field: child.field,
            map: fmap,
        });
    }

    let mut p_select = DMatrix::zeros(d, nin);
    for k in 0..d {
        p_select[(k, nat + k)] = 1.0;
    }
    for (i, c) in tree.cubes.iter().enumerate() {
        let dx = derivative_matrix(m, n, &c.center());
        let wi = jet_weights(m, n, c.delta(), p);
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for &j in &tree.neighbors[i] {
            if tree.kappa[i] == tree.kappa[j] {
                continue;
            }
            let diff = &dx * (rmap(i) - rmap(j));
            for r in 0..d {
                rows.push(diff.row(r).iter().copied().collect());
                weights.push(wi[r]);
            }
        }
        terms.push_rows(rows, weights, TermKind::Neighbor, nin);
        if touches_boundary(&c.rect, root) {
            let diff = &dx * (rmap(i) - &p_select);
            let wb = jet_weights(m, n, delta, p);
            let rows = (0..d)
                .map(|r| diff.row(r).iter().copied().collect())
                .collect();
            terms.push_rows(rows, wb, TermKind::Boundary, nin);
        }
    }

    let rects: Vec<Rect> = tree.cubes.iter().map(|c| c.rect.clone()).collect();
    let pou = Arc::new(BumpSystem::build(&rects, m)?);
    let mut poly = DMatrix::zeros(d, nin_field);
    for k in 0..d {
        poly[(k, nin_field - d + k)] = 1.0;
    }
    let field = Field::Blend(Box::new(Blend {
        profile: outer_cutoff(root),
        inner: Field::Patched(Box::new(Patched {
            pou,
            parts,
            nin: nin_field,
        })),
        poly,
        m,
    }));
    let keystones = exposed
        .iter()
        .map(|&s| kmaps[s].clone().expect("keystone maps were computed"))
        .collect();
    log.trees.push(TreeRecord {
        nest,
        root: root.clone(),
        tree,
    });
    Ok(LocalOperator {
        field,
        terms: terms.finish(nin),
        natoms: nat,
        dim: d,
        keystones,
        kind: OperatorKind::Cz,
    })
}

/// Kind of a ledger functional.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum FunctionalKind {
    /// `f ↦ f(x_a)`.
    PointEvaluation {
        /// Atom index.
        atom: usize,
    },
    /// One origin coefficient of the data part of a keystone jet.
    KeystoneJet {
        /// Keystone cube index in the top decomposition.
        cube: usize,
        /// Coefficient index.
        component: usize,
    },
    /// One origin coefficient of the anchoring polynomial `ξ(f)`.
    Anchor {
        /// Coefficient index.
        component: usize,
    },
}

/// A linear functional of the data with its support.
#[derive(Clone, Debug, Serialize)]
pub struct FunctionalRecord {
    /// Position in the extended input vector.
    pub id: usize,
    /// Kind.
    pub kind: FunctionalKind,
    /// Support.
    pub support: Support,
    /// Sparse coefficients `(atom, c)`.
    pub coefficients: Vec<(usize, f64)>,
}

/// Value of `M` with its split into measure terms and scalar terms.
#[derive(Clone, Debug, Serialize)]
pub struct MValue {
    /// `Mf`.
    pub value: f64,
    /// `Σ ∫ |ζ_ℓ|^p dμ`.
    pub zeta_pow: f64,
    /// `Σ |ψ_ℓ|^p`.
    pub psi_pow: f64,
    /// Number of terms.
    pub terms: usize,
}

/// `‖Tf‖_{𝒥(f, μ)}` and its parts.
#[derive(Clone, Debug, Serialize)]
pub struct Cost {
    /// `∫ Σ_{|α|=m} |∂^α Tf|^p`.
    pub seminorm_pow: f64,
    /// `Σ w |Tf(x) − f|^p` over finite atoms.
    pub data_pow: f64,
    /// Largest `|Tf(x) − f|` at infinite-weight atoms.
    pub max_trace_residual: f64,
    /// `(seminorm_pow + data_pow)^{1/p}`, or `+∞` when an infinite-weight
    /// atom is missed.
    pub total_norm: f64,
}

/// Outcome of [`constructibility_report`].
#[derive(Clone, Debug, Serialize)]
pub struct LedgerAudit {
    /// Sample points inspected.
    pub samples: usize,
    /// Largest `|Υ_y|`: functionals needed for the jet at one point.
    pub max_active: usize,
    /// Largest relative difference between reconstructed and direct jets.
    pub max_reconstruction_error: f64,
    /// Largest point multiplicity of the functional supports.
    pub overlap: usize,
    /// Functionals with coefficients outside their support.
    pub support_violations: usize,
    /// Largest deviation from linearity on two random probes.
    pub linearity_error: f64,
    /// True when reconstruction, support and linearity checks pass.
    pub passed: bool,
}

/// The top-level operator `f ↦ Tf` with its functional `M` and ledger.
#[derive(Clone, Debug)]
pub struct ExtensionResult {
    /// Configuration.
    pub config: RunConfig,
    /// The measure.
    pub measure: AtomicMeasure,
    /// Root box `(0, 1]^n`.
    pub root: Rect,
    /// `T` over the extended inputs `(f, ω, ξ)`.
    pub field: Field,
    /// `f ↦ (f, ω(f), ξ(f))`.
    pub input_map: DMatrix<f64>,
    /// `D × N`: origin coefficients of `ξ(f)`.
    pub xi: DMatrix<f64>,
    /// M terms over `(f, P_0)`.
    pub terms: Terms,
    /// Top-level keystone jets.
    pub keystones: Vec<KeystoneMap>,
    /// Functional ledger, one record per extended input.
    pub ledger: Vec<FunctionalRecord>,
    /// Every decomposition built.
    pub trees: Vec<TreeRecord>,
    /// Kind of the top operator.
    pub kind: OperatorKind,
    /// Build counters.
    pub diagnostics: Diagnostics,
    /// Selection formula used for `ξ`.
    pub xi_method: Method,
}

/// Builds `T` and `M` for a normalized measure.
///
/// The level operator is built on `(0, 1]^n` at scale 1 with the empty
/// label, exposing the top keystone jets as separate inputs. The anchoring
/// polynomial is then selected linearly from the M terms' dependence on it.
pub fn top_extend(mu: &AtomicMeasure, cfg: &RunConfig) -> Result<ExtensionResult> {
    cfg.validate()?;
    if mu.n != cfg.n {
        return Err(Error::Config(format!(
            "measure has dimension {} but the configuration has n = {}",
            mu.n, cfg.n
        )));
    }
    if mu.is_empty() {
        return Err(Error::Domain("the measure has no atoms".into()));
    }
    let root = Rect::unit(mu.n);
    if let Some(a) = mu.atoms.iter().find(|a| !root.contains_closed(&a.x)) {
        return Err(Error::Domain(format!(
            "atom at {:?} lies outside the unit cube; normalize the measure first",
            a.x
        )));
    }
    let mut log = BuildLog::default();
    let op = build_operator(
        mu,
        Label::empty(cfg.m, cfg.n),
        &root,
        1.0,
        0,
        true,
        cfg,
        &mut log,
    )?;
    let (nat, d) = (mu.len(), op.dim);
    let problem = QuadraticBlockProblem::new(
        op.terms.rows.columns(0, nat).into_owned(),
        op.terms.rows.columns(nat, d).into_owned(),
        op.terms.weights.clone(),
        cfg.p,
    );
    let sel = select(&problem)?;
    let xi = sel.map;
    let nks = op.keystones.len();
    let nin_ext = nat + d * nks + d;
    let mut input_map = DMatrix::zeros(nin_ext, nat);
    for i in 0..nat {
        input_map[(i, i)] = 1.0;
    }
    for (k, km) in op.keystones.iter().enumerate() {
        input_map
            .view_mut((nat + k * d, 0), (d, nat))
            .copy_from(&km.map.columns(0, nat));
    }
    input_map
        .view_mut((nat + nks * d, 0), (d, nat))
        .copy_from(&xi);

    let hull = atom_hull(mu);
    let mut ledger = Vec::with_capacity(nin_ext);
    for (i, a) in mu.atoms.iter().enumerate() {
        ledger.push(FunctionalRecord {
            id: i,
            kind: FunctionalKind::PointEvaluation { atom: i },
            support: Support::Point(a.x.clone()),
            coefficients: vec![(i, 1.0)],
        });
    }
    let sparse = |row: usize| -> Vec<(usize, f64)> {
        (0..nat)
            .filter(|&k| input_map[(row, k)] != 0.0)
            .map(|k| (k, input_map[(row, k)]))
            .collect()
    };
    for (k, km) in op.keystones.iter().enumerate() {
        for c in 0..d {
            let id = nat + k * d + c;
            ledger.push(FunctionalRecord {
                id,
                kind: FunctionalKind::KeystoneJet {
                    cube: km.cube,
                    component: c,
                },
                support: Support::Box(km.support.clone()),
                coefficients: sparse(id),
            });
        }
    }
    for c in 0..d {
        let id = nat + nks * d + c;
        ledger.push(FunctionalRecord {
            id,
            kind: FunctionalKind::Anchor { component: c },
            support: Support::Box(hull.clone()),
            coefficients: sparse(id),
        });
    }
    Ok(ExtensionResult {
        config: cfg.clone(),
        measure: mu.clone(),
        root,
        field: op.field,
        input_map,
        xi,
        terms: op.terms,
        keystones: op.keystones,
        ledger,
        trees: log.trees,
        kind: op.kind,
        diagnostics: log.diag,
        xi_method: sel.method,
    })
}

fn atom_hull(mu: &AtomicMeasure) -> Rect {
    let n = mu.n;
    let lo = (0..n)
        .map(|i| {
            mu.atoms
                .iter()
                .map(|a| a.x[i])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let hi = (0..n)
        .map(|i| {
            mu.atoms
                .iter()
                .map(|a| a.x[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Rect::new(lo, hi)
}

impl ExtensionResult {
    fn check_len(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.measure.len() {
            return Err(Error::Domain(format!(
                "expected {} data values, got {}",
                self.measure.len(),
                f.len()
            )));
        }
        Ok(())
    }

    /// Extended inputs `(f, ω(f), ξ(f))`.
    pub fn extended_inputs(&self, f: &[f64]) -> Vec<f64> {
        (&self.input_map * DVector::from_column_slice(f))
            .iter()
            .copied()
            .collect()
    }

    /// `ξ(f)` as a jet.
    pub fn anchor(&self, f: &[f64]) -> Jet {
        let c = &self.xi * DVector::from_column_slice(f);
        Jet::from_coeffs(self.config.m, self.measure.n, c.iter().copied().collect())
            .expect("ξ has one coefficient per multi-index")
    }

    /// `Tf(y)`.
    pub fn value(&self, y: &[f64], f: &[f64]) -> f64 {
        self.field.value(y, &self.extended_inputs(f))
    }

    /// Taylor coefficients of `Tf` at `y` up to `order`.
    pub fn taylor(&self, y: &[f64], order: usize, f: &[f64]) -> Vec<f64> {
        self.field.taylor_at(y, order, &self.extended_inputs(f))
    }

    /// The jet `J_y Tf`.
    pub fn jet(&self, y: &[f64], f: &[f64]) -> Jet {
        self.field.jet(y, self.config.m, &self.extended_inputs(f))
    }

    /// `Tf` as a field with the data values as inputs.
    pub fn tf_field(&self) -> Field {
        self.field.clone().compose(&self.input_map)
    }

    /// Values of `Tf` at the midpoints of a `per_axis^n` grid on the root.
    pub fn sample(&self, f: &[f64], per_axis: usize) -> Vec<(Vec<f64>, f64)> {
        let n = self.measure.n;
        let u = self.extended_inputs(f);
        (0..per_axis.pow(n as u32))
            .map(|flat| {
                let y: Vec<f64> = (0..n)
                    .map(|i| {
                        ((flat / per_axis.pow(i as u32)) % per_axis) as f64 / per_axis as f64
                            + 0.5 / per_axis as f64
                    })
                    .collect();
                let v = self.field.value(&y, &u);
                (y, v)
            })
            .collect()
    }

    /// `Mf` with its parts.
    pub fn m_functional(&self, f: &[f64]) -> Result<MValue> {
        self.check_len(f)?;
        let p = self.config.p;
        let mut u = f.to_vec();
        u.extend(self.anchor(f).coeffs());
        let (zeta_pow, psi_pow) = self.terms.split_pow(&u, p);
        Ok(MValue {
            value: (zeta_pow + psi_pow).powf(1.0 / p),
            zeta_pow,
            psi_pow,
            terms: self.terms.len(),
        })
    }

    /// Cells on which the seminorm integral is split.
    fn cells(&self) -> Vec<Rect> {
        match self.trees.iter().rev().find(|t| t.nest == 0) {
            Some(t) if self.kind == OperatorKind::Cz => {
                t.tree.cubes.iter().map(|c| c.rect.clone()).collect()
            }
            _ => vec![self.root.clone()],
        }
    }

    /// `‖Tf‖_{𝒥(f, μ)}`: the seminorm of `Tf` over the root (outside it
    /// `Tf` is a polynomial of degree `m − 1`) plus the data misfit.
    pub fn cost(&self, f: &[f64]) -> Result<Cost> {
        self.check_len(f)?;
        let (m, p) = (self.config.m, self.config.p);
        let u = self.extended_inputs(f);
        let seminorm: f64 = self
            .cells()
            .iter()
            .map(|c| seminorm_pow(&self.field, &u, c, m, p, 2))
            .sum();
        let scale = 1.0 + f.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let (mut data, mut trace) = (0.0, 0.0f64);
        for (a, fa) in self.measure.atoms.iter().zip(f) {
            let r = self.field.value(&a.x, &u) - fa;
            match a.w.finite() {
                Some(w) => {
                    if r != 0.0 {
                        data += w * r.abs().powf(p);
                    }
                }
                None => trace = trace.max(r.abs()),
            }
        }
        let total = if trace > 1e-9 * scale {
            f64::INFINITY
        } else {
            (seminorm + data).powf(1.0 / p)
        };
        Ok(Cost {
            seminorm_pow: seminorm,
            data_pow: data,
            max_trace_residual: trace,
            total_norm: total,
        })
    }

    /// Audits the functional ledger; see [`constructibility_report`].
    pub fn constructibility_report(&self, samples: usize, seed: u64) -> LedgerAudit {
        let n = self.measure.n;
        let m = self.config.m;
        let nat = self.measure.len();
        let nin = self.input_map.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..nat).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = self.extended_inputs(&f);
        let tf = self.tf_field();
        let ident = DMatrix::<f64>::identity(nin, nin);
        let (mut max_active, mut max_err) = (0usize, 0.0f64);
        for _ in 0..samples {
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let g = self.field.taylor(&y, m - 1, &ident);
            let gmax = g.amax();
            let active: Vec<usize> = (0..nin)
                .filter(|&r| g.column(r).amax() > 1e-13 * gmax.max(1e-300))
                .collect();
            max_active = max_active.max(active.len());
            let direct = tf.taylor_at(&y, m - 1, &f);
            let scale = 1.0 + direct.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            for (k, dk) in direct.iter().enumerate() {
                let rec: f64 = active.iter().map(|&r| u[r] * g[(k, r)]).sum();
                max_err = max_err.max((rec - dk).abs() / scale);
            }
        }
        let supports: Vec<Support> = self.ledger.iter().map(|r| r.support.clone()).collect();
        let overlap = overlap_audit(&supports);
        let support_violations = self
            .ledger
            .iter()
            .filter(|r| {
                r.coefficients.iter().any(|(k, _)| {
                    let x = &self.measure.atoms[*k].x;
                    match &r.support {
                        Support::Point(p) => p != x,
                        Support::Box(b) => !b.contains_closed(x),
                    }
                })
            })
            .count();
        let f2: Vec<f64> = (0..nat).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lambda: f64 = rng.gen_range(-2.0..2.0);
        let mix: Vec<f64> = f.iter().zip(&f2).map(|(a, b)| a + lambda * b).collect();
        let (u1, u2, um) = (
            self.extended_inputs(&f),
            self.extended_inputs(&f2),
            self.extended_inputs(&mix),
        );
        let mut lin = 0.0f64;
        for r in 0..nin {
            lin = lin.max((um[r] - u1[r] - lambda * u2[r]).abs());
        }
        let passed = max_err <= 1e-8 && support_violations == 0 && lin <= 1e-8;
        LedgerAudit {
            samples,
            max_active,
            max_reconstruction_error: max_err,
            overlap,
            support_violations,
            linearity_error: lin,
            passed,
        }
    }
}

/// `Mf` for an operator built on the same measure.
pub fn m_functional(result: &ExtensionResult, f: &[f64]) -> Result<MValue> {
    result.m_functional(f)
}

/// Audits the ledger: jets of `Tf` at `samples` random points are rebuilt
/// from the functionals active there, supports are checked against the
/// coefficients, the support overlap is measured and linearity is probed.
pub fn constructibility_report(result: &ExtensionResult, samples: usize, seed: u64) -> LedgerAudit {
    result.constructibility_report(samples, seed)
}
