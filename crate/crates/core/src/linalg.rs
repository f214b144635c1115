//! Small dense linear-algebra helpers shared across the controller modules.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

/// Eigenvalues of a square matrix over the complex field.
///
/// The matrix is first split into the irreducible diagonal blocks of its
/// block-triangular form (strongly connected components of the sparsity
/// graph); only blocks larger than 1x1 go through a Schur decomposition.
/// Shift-register structures such as DAG topologies otherwise stall the
/// unshifted QR sweep.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let n = m.nrows();
    let mut graph = DiGraph::<usize, ()>::with_capacity(n, n * n);
    let nodes: Vec<_> = (0..n).map(|i| graph.add_node(i)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)] != 0.0 {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for component in tarjan_scc(&graph) {
        let idx: Vec<usize> = component.iter().map(|v| graph[*v]).collect();
        if idx.len() == 1 {
            out.push(Complex::new(m[(idx[0], idx[0])], 0.0));
            continue;
        }
        let block = m.select_rows(&idx).select_columns(&idx);
        out.extend(block_eigenvalues(block));
    }
    out
}

fn block_eigenvalues(block: DMatrix<f64>) -> Vec<Complex<f64>> {
    let n = block.nrows();
    if let Some(s) = Schur::try_new(block.clone(), f64::EPSILON, 10_000 * n) {
        return s.complex_eigenvalues().iter().cloned().collect();
    }
    // an orthogonal similarity keeps the spectrum but breaks exact
    // structure that can stall the iteration
    for seed in 1..=4 {
        let v = DVector::from_fn(n, |i, _| 1.0 + ((i * 7 + seed * 13) % 11) as f64);
        let h = DMatrix::identity(n, n) - (&v * v.transpose()) * (2.0 / v.norm_squared());
        if let Some(s) = Schur::try_new(&h * &block * &h, f64::EPSILON, 10_000 * n) {
            return s.complex_eigenvalues().iter().cloned().collect();
        }
    }
    panic!("Schur iteration did not converge on a {n}x{n} block");
}

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Eigenvalue magnitudes of a square matrix.
pub fn eigen_magnitudes(m: &DMatrix<f64>) -> Vec<f64> {
    eigenvalues(m).iter().map(|z| z.norm()).collect()
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * aij));
            }
        }
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Numerical rank via singular values relative to the largest one.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel_tol * max).count()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Factor `L` with `LᵀL = W` for a symmetric psd weight, dropping the null
/// space. Rows scale as `√λ` so `‖L v‖₂ = √(vᵀWv)`.
pub fn psd_factor(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = symmetrize(w).symmetric_eigen();
    let scale = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 1e-14 * scale.max(f64::MIN_POSITIVE))
        .collect();
    let mut l = DMatrix::zeros(keep.len(), n);
    for (row, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for c in 0..n {
            l[(row, c)] = s * eig.eigenvectors[(c, i)];
        }
    }
    l
}

/// Weighted seminorm `√(vᵀWv)`; negative round-off under the root is clamped.
pub fn weighted_norm(v: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (v.dot(&(w * v))).max(0.0).sqrt()
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Controllability matrix `[B, AB, …, A^{n-1}B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}
