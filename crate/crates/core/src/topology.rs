//! Communication graph among the followers and the leader.
//!
//! Followers are indexed `0..N` internally; the leader is not a row of the
//! adjacency matrix and only appears through the pinning vector.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("adjacency matrix is {rows}x{cols}, expected square")]
    NonSquareAdjacency { rows: usize, cols: usize },
    #[error("pinning vector has length {got}, expected {expected}")]
    PinningLength { expected: usize, got: usize },
    #[error("adjacency entry ({row},{col}) = {value} is not 0 or 1")]
    NonBinaryEntry { row: usize, col: usize, value: f64 },
    #[error("agent {0} has a self-loop")]
    SelfLoopPresent(usize),
    #[error("agent {0} receives information from nobody (pinned degree is zero)")]
    IsolatedAgent(usize),
    #[error("pinned degree matrix is singular")]
    SingularPinnedDegree,
    #[error("topology has no followers")]
    Empty,
}

/// An information source for a follower: the leader or another follower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Peer {
    Leader,
    Follower(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    follower_count: usize,
    adjacency: DMatrix<f64>,
    pinning: DVector<f64>,
    degree: DMatrix<f64>,
    laplacian: DMatrix<f64>,
    pinned_degree: DMatrix<f64>,
    pinned_laplacian: DMatrix<f64>,
    in_neighbors: Vec<Vec<usize>>,
    out_neighbors: Vec<Vec<usize>>,
    pinned_in_neighbors: Vec<Vec<Peer>>,
}

impl Topology {
    /// Builds the graph from a 0/1 adjacency (`a[i][j] = 1` when follower
    /// `i` hears follower `j`) and a 0/1 pinning vector.
    pub fn new(adjacency: &[Vec<u8>], pinning: &[u8]) -> Result<Self, TopologyError> {
        let n = adjacency.len();
        let mut a = DMatrix::zeros(n, n);
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(TopologyError::NonSquareAdjacency {
                    rows: n,
                    cols: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                a[(i, j)] = f64::from(v);
            }
        }
        let b = DVector::from_iterator(pinning.len(), pinning.iter().map(|&v| f64::from(v)));
        Self::from_matrices(a, b)
    }

    pub fn from_matrices(adjacency: DMatrix<f64>, pinning: DVector<f64>) -> Result<Self, TopologyError> {
        let (rows, cols) = adjacency.shape();
        if rows != cols {
            return Err(TopologyError::NonSquareAdjacency { rows, cols });
        }
        let n = rows;
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        if pinning.len() != n {
            return Err(TopologyError::PinningLength {
                expected: n,
                got: pinning.len(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let v = adjacency[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(TopologyError::NonBinaryEntry { row: i, col: j, value: v });
                }
            }
            if adjacency[(i, i)] != 0.0 {
                return Err(TopologyError::SelfLoopPresent(i));
            }
            let p = pinning[i];
            if p != 0.0 && p != 1.0 {
                return Err(TopologyError::NonBinaryEntry { row: i, col: n, value: p });
            }
        }

        let degree = DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            adjacency.row_iter().map(|r| r.sum()),
        ));
        let laplacian = &degree - &adjacency;
        let pin = DMatrix::from_diagonal(&pinning);
        let pinned_degree = &degree + &pin;
        let pinned_laplacian = &laplacian + &pin;

        let in_neighbors: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| adjacency[(i, j)] == 1.0).collect())
            .collect();
        let out_neighbors: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| adjacency[(j, i)] == 1.0).collect())
            .collect();
        let pinned_in_neighbors: Vec<Vec<Peer>> = (0..n)
            .map(|i| {
                let mut peers = Vec::new();
                if pinning[i] == 1.0 {
                    peers.push(Peer::Leader);
                }
                peers.extend(in_neighbors[i].iter().map(|&j| Peer::Follower(j)));
                peers
            })
            .collect();
        if let Some(i) = pinned_in_neighbors.iter().position(|p| p.is_empty()) {
            return Err(TopologyError::IsolatedAgent(i));
        }

        Ok(Self {
            follower_count: n,
            adjacency,
            pinning,
            degree,
            laplacian,
            pinned_degree,
            pinned_laplacian,
            in_neighbors,
            out_neighbors,
            pinned_in_neighbors,
        })
    }

    pub fn follower_count(&self) -> usize {
        self.follower_count
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn pinning(&self) -> &DVector<f64> {
        &self.pinning
    }

    pub fn degree(&self) -> &DMatrix<f64> {
        &self.degree
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn pinned_degree(&self) -> &DMatrix<f64> {
        &self.pinned_degree
    }

    pub fn pinned_laplacian(&self) -> &DMatrix<f64> {
        &self.pinned_laplacian
    }

    /// Followers whose information agent `i` receives.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    /// Followers that receive agent `i`'s information.
    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_neighbors[i]
    }

    pub fn is_pinned(&self, i: usize) -> bool {
        self.pinning[i] == 1.0
    }

    /// The leader when agent `i` is pinned, nothing otherwise.
    pub fn pinning_set(&self, i: usize) -> &[Peer] {
        if self.is_pinned(i) {
            &self.pinned_in_neighbors[i][..1]
        } else {
            &[]
        }
    }

    /// Every source agent `i` listens to (leader first when pinned).
    pub fn pinned_in_neighbors(&self, i: usize) -> &[Peer] {
        &self.pinned_in_neighbors[i]
    }

    /// Breadth-first search from a virtual leader node along the
    /// information-flow edges.
    pub fn has_leader_rooted_spanning_tree(&self) -> bool {
        let n = self.follower_count;
        let mut seen = vec![false; n];
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| self.is_pinned(i)).collect();
        for &i in &queue {
            seen[i] = true;
        }
        while let Some(j) = queue.pop_front() {
            for &i in &self.out_neighbors[j] {
                if !seen[i] {
                    seen[i] = true;
                    queue.push_back(i);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// `𝒟_B⁻¹ℒ_B`, the normalized pinned Laplacian.
    pub fn normalized_pinned_laplacian(&self) -> Result<DMatrix<f64>, TopologyError> {
        Ok(self.pinned_degree_inverse()? * &self.pinned_laplacian)
    }

    /// `𝒟_B⁻¹𝒜`.
    pub fn normalized_adjacency(&self) -> Result<DMatrix<f64>, TopologyError> {
        Ok(self.pinned_degree_inverse()? * &self.adjacency)
    }

    /// `max |λ(𝒟_B⁻¹𝒜)|`; strictly below one whenever the leader roots a
    /// spanning tree.
    pub fn spectral_radius_pinned(&self) -> Result<f64, TopologyError> {
        Ok(linalg::spectral_radius(&self.normalized_adjacency()?))
    }

    fn pinned_degree_inverse(&self) -> Result<DMatrix<f64>, TopologyError> {
        let d = self.pinned_degree.diagonal();
        if d.iter().any(|&v| v == 0.0) {
            return Err(TopologyError::SingularPinnedDegree);
        }
        Ok(DMatrix::from_diagonal(&d.map(|v| 1.0 / v)))
    }
}
