//! Dyadic cubes and the Calderón–Zygmund decomposition.
//!
//! Cubes live on a [`Grid`]: the root box `origin + (0, side]^n` is level 0,
//! and the cube of level `k ≤ 0` and index `j` is
//! `Π_i origin_i + side · (j_i 2^k, (j_i + 1) 2^k]`. The decomposition keeps
//! the maximal OK cubes below the root; cubes that can never become OK
//! because a single infinite-weight atom sits in their `3Q` are kept as
//! terminal cubes instead of being refined forever.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::jets::Label;
use crate::measures::{AtomicMeasure, Rect};
use crate::norms::{overlap_audit, Support};
use crate::oracle::{ok_test, Witness};
use serde::Serialize;
use std::collections::{BTreeMap, VecDeque};

/// Decay rate used for the chain certificate `δ_{Q^k} ≤ C c^{k−ℓ} δ_{Q^ℓ}`.
pub const CHAIN_DECAY: f64 = 0.9;

/// Dilation defining the keystone neighborhood.
pub const KEYSTONE_REACH: f64 = 100.0;

/// Embedding of the dyadic hierarchy: the root box and its side.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    /// Lower corner of the root.
    pub origin: Vec<f64>,
    /// Side of the root.
    pub side: f64,
}

impl Grid {
    /// The grid whose root is the unit cube `(0, 1]^n`.
    pub fn unit(n: usize) -> Self {
        Self {
            origin: vec![0.0; n],
            side: 1.0,
        }
    }

    /// The grid rooted at a cube-shaped box.
    pub fn from_rect(root: &Rect) -> Self {
        Self {
            origin: root.lo.clone(),
            side: root.max_side(),
        }
    }

    /// Dimension.
    pub fn n(&self) -> usize {
        self.origin.len()
    }

    /// The root box.
    pub fn root(&self) -> Rect {
        DyadicCube::root(self.n()).rect(self)
    }
}

/// A dyadic cube of level `k ≤ 0` and integer index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct DyadicCube {
    /// Level `k ≤ 0`; the side is `2^k` times the root side.
    pub level: i32,
    /// Integer index per axis.
    pub index: Vec<i64>,
}

impl DyadicCube {
    /// The root cube.
    pub fn root(n: usize) -> Self {
        Self {
            level: 0,
            index: vec![0; n],
        }
    }

    /// Number of halvings below the root.
    pub fn depth(&self) -> usize {
        (-self.level) as usize
    }

    /// Side relative to the root side.
    pub fn relative_side(&self) -> f64 {
        2f64.powi(self.level)
    }

    /// The box of this cube on `grid`.
    pub fn rect(&self, grid: &Grid) -> Rect {
        let s = self.relative_side();
        let lo = (0..self.index.len())
            .map(|i| grid.origin[i] + grid.side * (self.index[i] as f64 * s))
            .collect();
        let hi = (0..self.index.len())
            .map(|i| grid.origin[i] + grid.side * ((self.index[i] + 1) as f64 * s))
            .collect();
        Rect::new(lo, hi)
    }

    /// The dyadic parent.
    pub fn parent(&self) -> Option<Self> {
        (self.level < 0).then(|| Self {
            level: self.level + 1,
            index: self.index.iter().map(|j| j.div_euclid(2)).collect(),
        })
    }

    /// The `2^n` children in lexicographic index order.
    pub fn children(&self) -> Vec<Self> {
        let n = self.index.len();
        (0..(1usize << n))
            .map(|bits| Self {
                level: self.level - 1,
                index: (0..n)
                    .map(|i| 2 * self.index[i] + ((bits >> (n - 1 - i)) & 1) as i64)
                    .collect(),
            })
            .collect()
    }

    /// Integer corners `[lo, hi]` in units of `2^{-depth}` of the root side.
    fn integer_box(&self, depth: usize) -> (Vec<i64>, Vec<i64>) {
        let shift = depth - self.depth();
        (
            self.index.iter().map(|j| j << shift).collect(),
            self.index.iter().map(|j| (j + 1) << shift).collect(),
        )
    }
}

/// How a cube entered the decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CubeStatus {
    /// The cube is OK with the given witness.
    Ok(Witness),
    /// The cube is not OK but cannot be refined usefully: exactly one
    /// infinite-weight atom lies in its `3Q`.
    Terminal,
}

/// One cube of the decomposition.
#[derive(Clone, Debug, Serialize)]
pub struct CzCube {
    /// Dyadic address.
    #[serde(flatten)]
    pub cube: DyadicCube,
    /// Geometric box.
    pub rect: Rect,
    /// Witness or terminal flag.
    pub status: CubeStatus,
    /// Mass of the closed `3Q`.
    pub mass: f64,
}

impl CzCube {
    /// Side length `δ_Q`.
    pub fn delta(&self) -> f64 {
        self.rect.max_side()
    }

    /// Center `x_Q`.
    pub fn center(&self) -> Vec<f64> {
        self.rect.center()
    }
}

/// A Calderón–Zygmund decomposition with its derived structure.
#[derive(Clone, Debug, Serialize)]
pub struct CzTree {
    /// The grid.
    pub grid: Grid,
    /// Label the decomposition was built for.
    pub label: Label,
    /// The cubes, in breadth-first discovery order.
    pub cubes: Vec<CzCube>,
    /// Neighbor lists (closures intersect), ascending.
    pub neighbors: Vec<Vec<usize>>,
    /// Keystone flags.
    pub keystone: Vec<bool>,
    /// Keystone chain of every cube.
    pub chains: Vec<Vec<usize>>,
    /// Terminal cube of every chain.
    pub kappa: Vec<usize>,
    /// Decay rate `c` of the chain certificate.
    pub chain_c: f64,
    /// Smallest `C` with `δ_{Q^k} ≤ C c^{k−ℓ} δ_{Q^ℓ}` on every chain.
    pub chain_big_c: f64,
}

impl CzTree {
    /// Builds the derived structure (neighbors, keystones, chains, κ) for a
    /// given set of cubes.
    pub fn from_cubes(grid: Grid, label: Label, cubes: Vec<CzCube>) -> Self {
        let neighbors = neighbor_lists(&cubes);
        let keystone = keystone_flags(&cubes);
        let mut tree = Self {
            grid,
            label,
            cubes,
            neighbors,
            keystone,
            chains: Vec::new(),
            kappa: Vec::new(),
            chain_c: CHAIN_DECAY,
            chain_big_c: 1.0,
        };
        tree.chains = (0..tree.cubes.len())
            .map(|i| build_chain(&tree, i))
            .collect();
        tree.kappa = tree
            .chains
            .iter()
            .map(|c| *c.last().expect("chains are nonempty"))
            .collect();
        tree.chain_big_c = tree
            .chains
            .iter()
            .map(|c| chain_constant(&tree, c, CHAIN_DECAY))
            .fold(1.0, f64::max);
        tree
    }

    /// Number of cubes.
    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    /// True when there are no cubes.
    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    /// Indices of the keystone cubes.
    pub fn keystones(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.keystone[i]).collect()
    }

    /// Largest number of halvings below the root.
    pub fn max_depth(&self) -> usize {
        self.cubes.iter().map(|c| c.cube.depth()).max().unwrap_or(0)
    }

    /// Index of the cube containing `x` (half-open), if any.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        self.cubes.iter().position(|c| c.rect.contains(x))
    }

    /// JSON rendering.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("tree serializes")
    }
}

fn neighbor_lists(cubes: &[CzCube]) -> Vec<Vec<usize>> {
    let depth = cubes.iter().map(|c| c.cube.depth()).max().unwrap_or(0);
    let boxes: Vec<(Vec<i64>, Vec<i64>)> =
        cubes.iter().map(|c| c.cube.integer_box(depth)).collect();
    let mut out = vec![Vec::new(); cubes.len()];
    for i in 0..cubes.len() {
        for j in (i + 1)..cubes.len() {
            let (a, b) = (&boxes[i], &boxes[j]);
            let touch = (0..a.0.len()).all(|k| a.0[k] <= b.1[k] && b.0[k] <= a.1[k]);
            if touch {
                out[i].push(j);
                out[j].push(i);
            }
        }
    }
    out
}

fn keystone_flags(cubes: &[CzCube]) -> Vec<bool> {
    cubes
        .iter()
        .map(|q| {
            let reach = q.rect.dilate(KEYSTONE_REACH);
            cubes
                .iter()
                .filter(|o| o.rect.open_intersects(&reach))
                .all(|o| q.delta() <= o.delta())
        })
        .collect()
}

/// The keystone cubes: `δ_Q ≤ δ_{Q′}` for every cube `Q′` meeting `100Q`.
pub fn keystone_cubes(tree: &CzTree) -> Vec<usize> {
    tree.keystones()
}

/// Closest points of two closed boxes (midpoint of the overlap on shared axes).
fn closest_points(a: &Rect, b: &Rect) -> (Vec<f64>, Vec<f64>) {
    let n = a.n();
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    for i in 0..n {
        if a.hi[i] < b.lo[i] {
            pa[i] = a.hi[i];
            pb[i] = b.lo[i];
        } else if b.hi[i] < a.lo[i] {
            pa[i] = a.lo[i];
            pb[i] = b.hi[i];
        } else {
            let m = 0.5 * (a.lo[i].max(b.lo[i]) + a.hi[i].min(b.hi[i]));
            pa[i] = m;
            pb[i] = m;
        }
    }
    (pa, pb)
}

/// Parameter interval where the segment `a + t (b − a)` meets a closed box.
fn segment_hit(a: &[f64], b: &[f64], r: &Rect) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for i in 0..a.len() {
        let d = b[i] - a[i];
        if d == 0.0 {
            if a[i] < r.lo[i] || a[i] > r.hi[i] {
                return None;
            }
        } else {
            let (mut s0, mut s1) = ((r.lo[i] - a[i]) / d, (r.hi[i] - a[i]) / d);
            if s0 > s1 {
                std::mem::swap(&mut s0, &mut s1);
            }
            t0 = t0.max(s0);
            t1 = t1.min(s1);
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// The junior partner of a non-keystone cube: the nearest cube with at most
/// half its side (ties by smaller cube address).
fn junior_partner(tree: &CzTree, i: usize) -> Option<usize> {
    let q = &tree.cubes[i];
    let mut best: Option<(f64, usize)> = None;
    for (j, o) in tree.cubes.iter().enumerate() {
        if o.delta() > 0.5 * q.delta() * (1.0 + 1e-12) {
            continue;
        }
        let d = q.rect.distance(&o.rect);
        best = match best {
            None => Some((d, j)),
            Some((bd, bj)) => {
                if d < bd || (d == bd && o.cube < tree.cubes[bj].cube) {
                    Some((d, j))
                } else {
                    Some((bd, bj))
                }
            }
        };
    }
    best.map(|(_, j)| j)
}

/// Shortest neighbor path from `i` to `j` through cubes meeting the segment
/// between their closest points; neighbors are explored in order of entry
/// along the segment.
fn segment_path(tree: &CzTree, i: usize, j: usize) -> Vec<usize> {
    let (a, b) = closest_points(&tree.cubes[i].rect, &tree.cubes[j].rect);
    let mut entry = BTreeMap::new();
    for (k, c) in tree.cubes.iter().enumerate() {
        if let Some((t0, _)) = segment_hit(&a, &b, &c.rect) {
            entry.insert(k, t0);
        }
    }
    entry.insert(i, 0.0);
    entry.insert(j, 1.0);
    let mut prev: BTreeMap<usize, usize> = BTreeMap::new();
    let mut queue = VecDeque::from([i]);
    let mut seen = std::collections::BTreeSet::from([i]);
    while let Some(k) = queue.pop_front() {
        if k == j {
            break;
        }
        let mut next: Vec<usize> = tree.neighbors[k]
            .iter()
            .copied()
            .filter(|l| entry.contains_key(l) && !seen.contains(l))
            .collect();
        next.sort_by(|x, y| entry[x].total_cmp(&entry[y]).then(x.cmp(y)));
        for l in next {
            seen.insert(l);
            prev.insert(l, k);
            queue.push_back(l);
        }
    }
    let mut path = vec![j];
    let mut cur = j;
    while cur != i {
        match prev.get(&cur) {
            Some(&p) => {
                path.push(p);
                cur = p;
            }
            None => return vec![i, j],
        }
    }
    path.reverse();
    path
}

fn build_chain(tree: &CzTree, i: usize) -> Vec<usize> {
    let mut chain = vec![i];
    let mut cur = i;
    while !tree.keystone[cur] {
        let Some(j) = junior_partner(tree, cur) else {
            break;
        };
        let path = segment_path(tree, cur, j);
        chain.extend_from_slice(&path[1..]);
        cur = j;
    }
    chain
}

/// Chain of `i`: a neighbor path ending at a keystone cube, obtained by
/// repeatedly walking to the junior partner.
pub fn chain(tree: &CzTree, i: usize) -> Vec<usize> {
    tree.chains[i].clone()
}

/// The keystone cube at the end of the chain of `i`.
pub fn kappa(tree: &CzTree, i: usize) -> usize {
    tree.kappa[i]
}

fn chain_constant(tree: &CzTree, chain: &[usize], c: f64) -> f64 {
    let mut big = 1.0f64;
    for l in 0..chain.len() {
        for k in l..chain.len() {
            let ratio = tree.cubes[chain[k]].delta()
                / (c.powi((k - l) as i32) * tree.cubes[chain[l]].delta());
            big = big.max(ratio);
        }
    }
    big
}

/// Builds the decomposition of the grid root for label `a`.
///
/// The root is always subdivided. Cubes are processed breadth first; an OK
/// cube is kept with its witness, a cube whose `3Q` holds exactly one
/// infinite-weight atom is kept as terminal, and any other cube is split.
/// A terminal cube with a neighbor of less than half its side is split
/// again, so that neighboring sides stay within a factor 2.
/// Fails when a cube deeper than `cfg.max_depth` would be needed.
pub fn cz_decompose(mu: &AtomicMeasure, a: &Label, grid: &Grid, cfg: &RunConfig) -> Result<CzTree> {
    let mut cubes = Vec::new();
    let mut queue: VecDeque<DyadicCube> = DyadicCube::root(grid.n()).children().into();
    loop {
        refine(&mut queue, &mut cubes, mu, a, grid, cfg)?;
        let neighbors = neighbor_lists(&cubes);
        let unbalanced: Vec<usize> = (0..cubes.len())
            .filter(|&i| {
                matches!(cubes[i].status, CubeStatus::Terminal)
                    && neighbors[i]
                        .iter()
                        .any(|&j| cubes[j].cube.depth() > cubes[i].cube.depth() + 1)
            })
            .collect();
        if unbalanced.is_empty() {
            break;
        }
        for &i in unbalanced.iter().rev() {
            queue.extend(cubes.remove(i).cube.children());
        }
    }
    Ok(CzTree::from_cubes(grid.clone(), *a, cubes))
}

fn refine(
    queue: &mut VecDeque<DyadicCube>,
    cubes: &mut Vec<CzCube>,
    mu: &AtomicMeasure,
    a: &Label,
    grid: &Grid,
    cfg: &RunConfig,
) -> Result<()> {
    while let Some(q) = queue.pop_front() {
        if q.depth() > cfg.max_depth {
            return Err(Error::NonTermination(format!(
                "cube at level {} with index {:?} exceeds max depth {}",
                q.level, q.index, cfg.max_depth
            )));
        }
        let rect = q.rect(grid);
        let ok = ok_test(&rect, a, mu, cfg)?;
        if let (true, Some(w)) = (ok.ok, ok.witness) {
            cubes.push(CzCube {
                cube: q,
                rect,
                status: CubeStatus::Ok(w),
                mass: ok.mass,
            });
            continue;
        }
        let q3 = rect.dilate(3.0);
        let infinite = mu
            .atoms
            .iter()
            .filter(|at| at.w.is_infinite() && q3.contains_closed(&at.x))
            .count();
        if infinite == 1 {
            cubes.push(CzCube {
                cube: q,
                rect,
                status: CubeStatus::Terminal,
                mass: ok.mass,
            });
            continue;
        }
        queue.extend(q.children());
    }
    Ok(())
}

/// Re-checks maximality with the oracle: every cube is OK (or terminal) and
/// its parent, when below the root, is not OK. Returns the offending cubes.
pub fn verify_maximality(tree: &CzTree, mu: &AtomicMeasure, cfg: &RunConfig) -> Result<Vec<usize>> {
    let mut bad = Vec::new();
    for (i, c) in tree.cubes.iter().enumerate() {
        let own = ok_test(&c.rect, &tree.label, mu, cfg)?;
        let own_ok = matches!(c.status, CubeStatus::Terminal) || own.ok;
        let parent_ok = match c.cube.parent() {
            Some(p) if p.level < 0 => ok_test(&p.rect(&tree.grid), &tree.label, mu, cfg)?.ok,
            _ => false,
        };
        if !own_ok || parent_ok {
            bad.push(i);
        }
    }
    Ok(bad)
}

/// Shape statistics of the κ map.
#[derive(Clone, Debug, Serialize)]
pub struct KeystoneGeometry {
    /// Smallest `|x_i − x_{κ(i)}| / δ_i` over cubes with `κ(i) ≠ i`.
    pub min_distance_ratio: f64,
    /// Largest `|x_i − x_{κ(i)}| / δ_i` over cubes with `κ(i) ≠ i`.
    pub max_distance_ratio: f64,
    /// Smallest `δ_i / δ_{κ(i)}`.
    pub min_size_ratio: f64,
    /// Largest `|κ^{-1}(s) ∩ {δ_i = δ}|` over keystones `s` and sides `δ`.
    pub max_preimage: usize,
}

/// Result of [`geometry_audit`]; every violation list must be empty.
#[derive(Clone, Debug, Serialize)]
pub struct GeometryReport {
    /// Number of cubes.
    pub cubes: usize,
    /// Neighbor pairs whose side ratio is not in `{1/2, 1, 2}`.
    pub ratio_violations: Vec<(usize, usize)>,
    /// Largest point multiplicity of `{1.3 Q}`.
    pub multiplicity: usize,
    /// Bound `4^n` applied to the multiplicity.
    pub multiplicity_bound: usize,
    /// Cubes touching the root boundary with `δ_Q < δ_root / 20`.
    pub boundary_violations: Vec<usize>,
    /// Sample points of the root used for the partition check.
    pub partition_samples: usize,
    /// Samples covered by more than one cube.
    pub overlapping_samples: usize,
    /// Samples covered by no cube (points of `K_p`).
    pub uncovered_samples: usize,
    /// Chains that are not neighbor paths ending at a keystone.
    pub chain_violations: Vec<usize>,
    /// Decay rate `c` of the chain certificate.
    pub chain_c: f64,
    /// Recorded constant `C` of the chain certificate.
    pub chain_big_c: f64,
    /// Number of keystone cubes.
    pub keystones: usize,
    /// Largest `|{s′ : 10Q_s ∩ 10Q_{s′} ≠ ∅}|` over keystones.
    pub keystone_overlap: usize,
    /// Statistics of κ.
    pub kappa: KeystoneGeometry,
    /// True when every check passed.
    pub passed: bool,
}

/// Audits neighbor ratios, `1.3Q` overlap, boundary sizes, the partition
/// property on a sample grid, the chains and the κ map.
pub fn geometry_audit(tree: &CzTree) -> GeometryReport {
    let n = tree.grid.n();
    let root = tree.grid.root();
    let mut ratio_violations = Vec::new();
    for (i, nb) in tree.neighbors.iter().enumerate() {
        for &j in nb {
            if j > i {
                let r = tree.cubes[i].cube.level - tree.cubes[j].cube.level;
                if r.abs() > 1 {
                    ratio_violations.push((i, j));
                }
            }
        }
    }
    let supports: Vec<Support> = tree
        .cubes
        .iter()
        .map(|c| Support::Box(c.rect.dilate(1.3)))
        .collect();
    let multiplicity = overlap_audit(&supports);
    let multiplicity_bound = 4usize.pow(n as u32);
    let boundary_violations: Vec<usize> = tree
        .cubes
        .iter()
        .enumerate()
        .filter(|(_, c)| touches_boundary(&c.rect, &root) && c.delta() < root.max_side() / 20.0)
        .map(|(i, _)| i)
        .collect();
    let per_axis: usize = if n == 1 { 4096 } else { 128 };
    let total = per_axis.pow(n as u32);
    let (mut overlapping, mut uncovered) = (0, 0);
    for flat in 0..total {
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let k = (flat / per_axis.pow(i as u32)) % per_axis;
                root.lo[i] + (k as f64 + 0.5) / per_axis as f64 * root.side(i)
            })
            .collect();
        let count = tree.cubes.iter().filter(|c| c.rect.contains(&y)).count();
        if count == 0 {
            uncovered += 1;
        } else if count > 1 {
            overlapping += 1;
        }
    }
    let chain_violations: Vec<usize> = tree
        .chains
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            c.first() != Some(i)
                || !tree.keystone[*c.last().expect("chains are nonempty")]
                || c.windows(2).any(|w| !tree.neighbors[w[0]].contains(&w[1]))
        })
        .map(|(i, _)| i)
        .collect();
    let ks = tree.keystones();
    let keystone_overlap = ks
        .iter()
        .map(|&s| {
            let b = tree.cubes[s].rect.dilate(10.0);
            ks.iter()
                .filter(|&&t| tree.cubes[t].rect.dilate(10.0).open_intersects(&b))
                .count()
        })
        .max()
        .unwrap_or(0);
    let kappa = kappa_geometry(tree);
    let passed = ratio_violations.is_empty()
        && multiplicity <= multiplicity_bound
        && boundary_violations.is_empty()
        && overlapping == 0
        && uncovered == 0
        && chain_violations.is_empty()
        && tree.chain_big_c.is_finite();
    GeometryReport {
        cubes: tree.len(),
        ratio_violations,
        multiplicity,
        multiplicity_bound,
        boundary_violations,
        partition_samples: total,
        overlapping_samples: overlapping,
        uncovered_samples: uncovered,
        chain_violations,
        chain_c: tree.chain_c,
        chain_big_c: tree.chain_big_c,
        keystones: ks.len(),
        keystone_overlap,
        kappa,
        passed,
    }
}

fn touches_boundary(r: &Rect, root: &Rect) -> bool {
    (0..r.n()).any(|i| r.lo[i] <= root.lo[i] || r.hi[i] >= root.hi[i])
}

fn kappa_geometry(tree: &CzTree) -> KeystoneGeometry {
    let mut g = KeystoneGeometry {
        min_distance_ratio: f64::INFINITY,
        max_distance_ratio: 0.0,
        min_size_ratio: f64::INFINITY,
        max_preimage: 0,
    };
    let mut counts: BTreeMap<(usize, i32), usize> = BTreeMap::new();
    for (i, c) in tree.cubes.iter().enumerate() {
        let s = tree.kappa[i];
        *counts.entry((s, c.cube.level)).or_default() += 1;
        g.min_size_ratio = g.min_size_ratio.min(c.delta() / tree.cubes[s].delta());
        if s != i {
            let (xi, xs) = (c.center(), tree.cubes[s].center());
            let d = xi
                .iter()
                .zip(&xs)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / c.delta();
            g.min_distance_ratio = g.min_distance_ratio.min(d);
            g.max_distance_ratio = g.max_distance_ratio.max(d);
        }
    }
    g.max_preimage = counts.values().copied().max().unwrap_or(0);
    if g.min_distance_ratio.is_infinite() {
        g.min_distance_ratio = 0.0;
    }
    if g.min_size_ratio.is_infinite() {
        g.min_size_ratio = 1.0;
    }
    g
}
