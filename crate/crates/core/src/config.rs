//! Run configuration shared by the library and the command-line tool.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which variational back end answers oracle queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OraclePath {
    /// Piecewise Hermite splines with knots at the data (one dimension, `p = 2`).
    Exact,
    /// Uniform tensor B-splines with iteratively reweighted least squares.
    Irls,
}

/// All tunable constants of a run. Every report echoes this structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Smoothness order `m`.
    pub m: usize,
    /// Spatial dimension `n`.
    pub n: usize,
    /// Integrability exponent `p > n`.
    pub p: f64,
    /// Basis tolerance used by every OK test.
    pub eps_basis: f64,
    /// Maximal dyadic depth of a decomposition.
    pub max_depth: usize,
    /// Cells per axis of the discretized back end.
    pub grid: usize,
    /// Back end for oracle queries.
    pub oracle: OraclePath,
    /// Seed for randomized generators.
    pub seed: u64,
    /// Maximal number of nested decompositions before local solves take over.
    pub max_nesting: usize,
    /// Maximal IRLS iterations.
    pub irls_max_iter: usize,
    /// IRLS relative stopping tolerance.
    pub irls_tol: f64,
    /// IRLS damping added to the reweighted normal equations.
    pub irls_damping: f64,
}

impl RunConfig {
    /// Default configuration for the given `(m, n, p)`.
    ///
    /// The exact back end is chosen whenever `(n, p) = (1, 2)`.
    pub fn new(m: usize, n: usize, p: f64) -> Self {
        let oracle = if n == 1 && p == 2.0 {
            OraclePath::Exact
        } else {
            OraclePath::Irls
        };
        Self {
            m,
            n,
            p,
            eps_basis: 0.1,
            max_depth: 40,
            grid: 512,
            oracle,
            seed: 0,
            max_nesting: 2,
            irls_max_iter: 200,
            irls_tol: 1e-6,
            irls_damping: 1e-8,
        }
    }

    /// Checks the invariants `1 ≤ m ≤ 4`, `n ∈ {1, 2}`, `p > n`, and that the
    /// exact back end is only requested for `(n, p) = (1, 2)`.
    pub fn validate(&self) -> Result<()> {
        crate::jets::check_mn(self.m, self.n)?;
        if !(self.p > self.n as f64) || !self.p.is_finite() {
            return Err(Error::Config(format!(
                "p must be finite and exceed n = {}, got {}",
                self.n, self.p
            )));
        }
        if self.oracle == OraclePath::Exact && !(self.n == 1 && self.p == 2.0) {
            return Err(Error::Config(
                "the exact back end requires n = 1 and p = 2".into(),
            ));
        }
        if !(self.eps_basis > 0.0) || !self.eps_basis.is_finite() {
            return Err(Error::Config("eps must be positive and finite".into()));
        }
        if self.max_depth == 0 || self.max_depth > 60 {
            return Err(Error::Config("max-depth must lie in 1..=60".into()));
        }
        if self.grid < 2 {
            return Err(Error::Config("grid must be at least 2".into()));
        }
        Ok(())
    }

    /// Cells per axis actually used by the discretized back end.
    pub fn effective_grid(&self) -> usize {
        if self.n == 1 {
            self.grid
        } else {
            self.grid.min(32)
        }
    }
}
