//! Truncated right singular vectors of a sparse binary matrix by randomized
//! subspace iteration on `XᵀX`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::BipartiteGraph;
use crate::rng::rng_from_seed;

/// Singular values below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-8;
/// Standard deviation of the noise used for columns beyond the rank.
const NOISE_SCALE: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// `n × d`, orthonormal columns.
    pub right_vectors: Array2<f64>,
    /// Columns at or beyond this index were below the rank tolerance.
    pub numerical_rank: usize,
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

fn from_nalgebra(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(r, c)| a[(r, c)])
}

fn orthonormalize(a: &Array2<f64>) -> Array2<f64> {
    from_nalgebra(&to_nalgebra(a).qr().q())
}

/// `X q` for `q: n × l`.
fn times(g: &BipartiteGraph, q: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((g.num_patients(), q.ncols()));
    for i in 0..g.num_patients() {
        let mut row = out.row_mut(i);
        for &j in g.patient_neighbors(i) {
            row += &q.row(j);
        }
    }
    out
}

/// `Xᵀ y` for `y: m × l`.
fn times_transpose(g: &BipartiteGraph, y: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((g.num_events(), y.ncols()));
    for j in 0..g.num_events() {
        let mut row = out.row_mut(j);
        for &i in g.event_neighbors(j) {
            row += &y.row(i);
        }
    }
    out
}

/// Top-`d` right singular vectors of the patient × event matrix of `g`.
pub fn truncated_right_svd(g: &BipartiteGraph, d: usize, power_iters: usize, seed: u64) -> TruncatedSvd {
    let n = g.num_events();
    let l = (2 * d + 10).min(n).max(d.min(n));
    let mut rng = rng_from_seed(seed);
    let omega = Array2::from_shape_simple_fn((n, l), || StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(&omega);
    for _ in 0..power_iters.max(1) {
        q = orthonormalize(&times_transpose(g, &times(g, &q)));
    }
    let b = times(g, &q);
    let gram = to_nalgebra(&b.t().dot(&b));
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let w = from_nalgebra(&eig.eigenvectors);
    let v_all = q.dot(&w);
    let keep = d.min(l);
    let mut right = Array2::zeros((n, d));
    let mut sigma = vec![0.0; d];
    for (k, &col) in order.iter().take(keep).enumerate() {
        sigma[k] = eig.eigenvalues[col].max(0.0).sqrt();
        let mut v = v_all.column(col).to_owned();
        let pivot = v.iter().fold(0.0f64, |acc, &x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        right.column_mut(k).assign(&v);
    }
    let top = sigma.first().copied().unwrap_or(0.0);
    let numerical_rank = sigma
        .iter()
        .take_while(|&&s| top > 0.0 && s > RANK_TOLERANCE * top)
        .count();
    TruncatedSvd {
        singular_values: sigma,
        right_vectors: right,
        numerical_rank,
    }
}

/// Event embedding table `V · diag(σ^{1/2})`. Columns beyond the numerical
/// rank are replaced with small Gaussian noise.
pub fn svd_event_embeddings(g: &BipartiteGraph, d: usize, power_iters: usize, seed: u64) -> Array2<f64> {
    let svd = truncated_right_svd(g, d, power_iters, seed);
    let mut emb = svd.right_vectors.clone();
    for (k, mut col) in emb.columns_mut().into_iter().enumerate() {
        col *= svd.singular_values[k].sqrt();
    }
    if svd.numerical_rank < d {
        log::warn!(
            "embedding dimension {d} exceeds numerical rank {}; filling remaining columns with noise",
            svd.numerical_rank
        );
        let mut rng = rng_from_seed(seed ^ 0x5eed);
        for k in svd.numerical_rank..d {
            for x in emb.column_mut(k) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = NOISE_SCALE * z;
            }
        }
    }
    emb
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Largest principal angle between the column spans of two orthonormal bases.
    fn max_subspace_angle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let cross = to_nalgebra(&a.t().dot(b));
        let s = cross.svd(false, false).singular_values;
        s.iter().fold(1.0f64, |acc, &x| acc.min(x)).min(1.0).acos()
    }

    #[test]
    fn identity_matrix() {
        let g = BipartiteGraph::build(&[(0, 0), (1, 1), (2, 2)], 3, 3).unwrap();
        let svd = truncated_right_svd(&g, 2, 5, 1);
        for &s in &svd.singular_values {
            assert!((s - 1.0).abs() < 1e-10);
        }
        let gram = svd.right_vectors.t().dot(&svd.right_vectors);
        for r in 0..2 {
            for c in 0..2 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((gram[[r, c]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_one_recovers_direction() {
        // u = 1{i<4}, v = 1{j in {1,3,4}}
        let v_idx = [1usize, 3, 4];
        let edges: Vec<_> = (0..4).flat_map(|i| v_idx.iter().map(move |&j| (i, j))).collect();
        let g = BipartiteGraph::build(&edges, 6, 5).unwrap();
        let svd = truncated_right_svd(&g, 1, 5, 2);
        let v = svd.right_vectors.column(0);
        let cos: f64 = v_idx.iter().map(|&j| v[j]).sum::<f64>() / (3f64.sqrt() * v.dot(&v).sqrt());
        assert!(cos.abs() > 0.999);
        assert!((svd.singular_values[0] - 12f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn matches_dense_svd_subspace() {
        let (m, n, d) = (200, 50, 10);
        let mut rng = rng_from_seed(3);
        let edges: Vec<_> = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|_| rng.random_bool(0.1))
            .collect();
        let g = BipartiteGraph::build(&edges, m, n).unwrap();

        let mut dense = DMatrix::<f64>::zeros(m, n);
        for &(i, j) in &edges {
            dense[(i, j)] = 1.0;
        }
        let full = dense.svd(false, true);
        let vt = full.v_t.unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| full.singular_values[b].total_cmp(&full.singular_values[a]));
        let oracle = Array2::from_shape_fn((n, d), |(r, c)| vt[(idx[c], r)]);

        let svd = truncated_right_svd(&g, d, 20, 4);
        let angle = max_subspace_angle(&svd.right_vectors, &oracle);
        assert!(angle < 1e-3, "angle {angle}");
        for k in 0..d {
            assert!((svd.singular_values[k] - full.singular_values[idx[k]]).abs() < 1e-6);
        }
    }

    #[test]
    fn rank_deficient_columns_get_noise() {
        let g = BipartiteGraph::build(&[(0, 0), (1, 0)], 4, 4).unwrap();
        let emb = svd_event_embeddings(&g, 3, 3, 5);
        assert!(emb.iter().all(|x| x.is_finite()));
        assert!(emb.column(2).iter().any(|&x| x != 0.0));
        assert!(emb.column(2).iter().all(|&x| x.abs() < 0.1));
    }

    #[test]
    fn deterministic_given_seed() {
        let g = BipartiteGraph::build(&[(0, 1), (1, 2), (2, 0), (2, 2)], 3, 3).unwrap();
        assert_eq!(svd_event_embeddings(&g, 2, 4, 9), svd_event_embeddings(&g, 2, 4, 9));
    }
}
