//! Communication topology: adjacency, Laplacian, connectivity and the
//! Kronecker product used to lift per-robot matrices to the stacked team.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Absolute tolerance for the zero-row-sum property of a Laplacian.
pub const LAPLACIAN_ROW_SUM_TOL: f64 = 1e-12;

/// Weighted, possibly directed communication graph over `n` robots.
///
/// `schedule` holds piecewise-constant overrides: the entry with the largest
/// key `s <= k` is the adjacency in effect at step `k`; steps before the
/// first key use the base adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    adjacency: DMatrix<f64>,
    schedule: BTreeMap<usize, DMatrix<f64>>,
}

impl Topology {
    pub fn new(adjacency: DMatrix<f64>) -> Result<Self> {
        validate_adjacency(&adjacency, "topology.adjacency")?;
        Ok(Self {
            adjacency,
            schedule: BTreeMap::new(),
        })
    }

    /// Unit-weight complete graph.
    pub fn complete(n: usize) -> Self {
        let adjacency = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
        Self {
            adjacency,
            schedule: BTreeMap::new(),
        }
    }

    /// Undirected unit-weight cycle `0 - 1 - ... - (n-1) - 0`.
    pub fn ring(n: usize) -> Self {
        let mut adjacency = DMatrix::zeros(n, n);
        if n >= 2 {
            for i in 0..n {
                let j = (i + 1) % n;
                if i != j {
                    adjacency[(i, j)] = 1.0;
                    adjacency[(j, i)] = 1.0;
                }
            }
        }
        Self {
            adjacency,
            schedule: BTreeMap::new(),
        }
    }

    /// Undirected unit-weight path `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Self {
        let mut adjacency = DMatrix::zeros(n, n);
        for i in 1..n {
            adjacency[(i - 1, i)] = 1.0;
            adjacency[(i, i - 1)] = 1.0;
        }
        Self {
            adjacency,
            schedule: BTreeMap::new(),
        }
    }

    pub fn with_schedule_entry(mut self, from_step: usize, adjacency: DMatrix<f64>) -> Result<Self> {
        let field = format!("topology.schedule[{from_step}]");
        if adjacency.shape() != self.adjacency.shape() {
            return Err(Error::config(
                field,
                format!(
                    "adjacency is {}x{}, expected {n}x{n}",
                    adjacency.nrows(),
                    adjacency.ncols(),
                    n = self.n()
                ),
            ));
        }
        validate_adjacency(&adjacency, &field)?;
        self.schedule.insert(from_step, adjacency);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn base_adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn schedule(&self) -> &BTreeMap<usize, DMatrix<f64>> {
        &self.schedule
    }

    pub fn is_time_varying(&self) -> bool {
        !self.schedule.is_empty()
    }

    pub fn adjacency_at(&self, k: usize) -> &DMatrix<f64> {
        self.schedule
            .range(..=k)
            .next_back()
            .map(|(_, a)| a)
            .unwrap_or(&self.adjacency)
    }

    pub fn laplacian(&self, k: usize) -> LaplacianMatrix {
        LaplacianMatrix::from_adjacency(self.adjacency_at(k))
    }

    /// Connectivity of the undirected support of the base adjacency and of
    /// every scheduled adjacency.
    pub fn is_connected(&self) -> bool {
        undirected_connected(&self.adjacency) && self.schedule.values().all(undirected_connected)
    }

    pub fn is_connected_at(&self, k: usize) -> bool {
        undirected_connected(self.adjacency_at(k))
    }

    pub fn is_symmetric(&self) -> bool {
        is_symmetric(&self.adjacency) && self.schedule.values().all(is_symmetric)
    }
}

fn validate_adjacency(a: &DMatrix<f64>, field: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::config(field, "adjacency must be square"));
    }
    if a.nrows() == 0 {
        return Err(Error::config(field, "adjacency must be non-empty"));
    }
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let w = a[(i, j)];
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(
                    field,
                    format!("entry ({i},{j}) = {w} must be finite and nonnegative"),
                ));
            }
            if i == j && w != 0.0 {
                return Err(Error::config(field, format!("diagonal entry ({i},{i}) must be zero")));
            }
        }
    }
    Ok(())
}

fn is_symmetric(a: &DMatrix<f64>) -> bool {
    a == &a.transpose()
}

fn undirected_connected(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for j in 0..n {
            if !seen[j] && (a[(i, j)] > 0.0 || a[(j, i)] > 0.0) {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Graph Laplacian `l_ii = sum_{j != i} a_ij`, `l_ij = -a_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianMatrix(DMatrix<f64>);

impl LaplacianMatrix {
    pub fn from_adjacency(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut degree = 0.0;
            for j in 0..n {
                if i != j {
                    l[(i, j)] = -a[(i, j)];
                    degree += a[(i, j)];
                }
            }
            l[(i, i)] = degree;
        }
        Self(l)
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// `L v`, i.e. the per-robot neighbour-difference sums
    /// `sum_j a_ij (v_i - v_j)`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.0 * v
    }

    pub fn max_row_sum_abs(&self) -> f64 {
        self.0
            .row_iter()
            .map(|r| r.sum().abs())
            .fold(0.0, f64::max)
    }
}

/// Kronecker product `a ⊗ b`, an `(m p) x (n q)` block matrix whose
/// `(i, j)` block is `a_ij b`.
pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let (p, q) = b.shape();
    let mut out = DMatrix::zeros(m * p, n * q);
    for i in 0..m {
        for j in 0..n {
            let aij = a[(i, j)];
            out.view_mut((i * p, j * q), (p, q)).copy_from(&(b * aij));
        }
    }
    out
}
