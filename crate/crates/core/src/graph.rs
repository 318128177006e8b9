//! Dynamic K-nearest-neighbor graph construction over node features.
//!
//! Nodes are rows of an N x D feature matrix; edges connect each node to
//! its K nearest neighbors under squared Euclidean distance, optionally
//! thinned by a dilation stride over the sorted candidate list. Neighbor
//! selection is deterministic: candidates are ordered by (distance,
//! index) ascending, so ties break toward the lower node id. Self-loops
//! are never produced. Selection is not differentiated; the table is
//! fixed for the duration of one forward pass.
//!
//! Selection rule, shared by the production path and the verification
//! oracle (the two are implemented independently): walk the sorted
//! candidate ranks 0, d, 2d, ... collecting until K neighbors are taken;
//! if the stride walk runs off the end of the candidate list first, fill
//! the remainder with the not-yet-taken candidates in ascending rank
//! order. The effective K is therefore min(K, N - 1) and is recorded on
//! the table; it is never an error for K * d to exceed N - 1.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major N x K neighbor index table. Entry (i, j) is the node id of
/// the j-th selected neighbor of node i.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    n: usize,
    k: usize,
    requested_k: usize,
    dilation: usize,
    indices: Vec<usize>,
}

impl NeighborTable {
    /// Builds a table from explicit row-major indices, validating the
    /// structural invariants (length, bounds, no self-loops).
    pub fn from_indices(
        n: usize,
        requested_k: usize,
        dilation: usize,
        indices: Vec<usize>,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::DegenerateGraph(format!("need at least 2 nodes to build a graph, got {}", n)));
        }
        if requested_k == 0 || dilation == 0 {
            return Err(Error::contract("neighbor_table", "k and dilation must be at least 1"));
        }
        let k = requested_k.min(n - 1);
        if indices.len() != n * k {
            return Err(Error::contract(
                "neighbor_table",
                format!("expected {} indices for {} nodes with effective k {}, got {}", n * k, n, k, indices.len()),
            ));
        }
        for (pos, &j) in indices.iter().enumerate() {
            let i = pos / k;
            if j >= n {
                return Err(Error::contract("neighbor_table", format!("neighbor id {} out of range for {} nodes", j, n)));
            }
            if j == i {
                return Err(Error::contract("neighbor_table", format!("self-loop at node {}", i)));
            }
        }
        Ok(NeighborTable { n, k, requested_k, dilation, indices })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Effective neighbors per node after clamping to the candidate count.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn requested_k(&self) -> usize {
        self.requested_k
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// All pairwise squared Euclidean distances between rows of `x` (N x D).
/// The result is symmetric with a zero diagonal.
pub fn pairwise_sq_dist<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape("pairwise_sq_dist", format!("expected N x D features, got {:?}", x.shape())));
    }
    if !x.is_all_finite() {
        return Err(Error::NonFinite { op: "pairwise_sq_dist" });
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let xv = x.data();
    let mut out = vec![T::ZERO; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::ZERO;
            let (ri, rj) = (&xv[i * d..(i + 1) * d], &xv[j * d..(j + 1) * d]);
            for c in 0..d {
                let diff = ri[c] - rj[c];
                acc += diff * diff;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(vec![n, n], out)
}

/// Production KNN with dilation. Requires at least two nodes, k >= 1,
/// dilation >= 1.
pub fn knn_dilated<T: Scalar>(x: &Tensor<T>, k: usize, dilation: usize) -> Result<NeighborTable> {
    if x.rank() != 2 {
        return Err(Error::shape("knn_dilated", format!("expected N x D features, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n < 2 {
        return Err(Error::DegenerateGraph(format!("need at least 2 nodes to build a graph, got {}", n)));
    }
    if k == 0 {
        return Err(Error::contract("knn_dilated", "k must be at least 1"));
    }
    if dilation == 0 {
        return Err(Error::contract("knn_dilated", "dilation must be at least 1"));
    }
    if !x.is_all_finite() {
        return Err(Error::NonFinite { op: "knn_dilated" });
    }
    let xv = x.data();
    let k_eff = k.min(n - 1);
    let mut indices = Vec::with_capacity(n * k_eff);
    let mut cands: Vec<(T, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cands.clear();
        let ri = &xv[i * d..(i + 1) * d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let rj = &xv[j * d..(j + 1) * d];
            let mut acc = T::ZERO;
            for c in 0..d {
                let diff = ri[c] - rj[c];
                acc += diff * diff;
            }
            cands.push((acc, j));
        }
        // Finite inputs cannot produce NaN distances, so the comparator
        // is total.
        cands.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut taken = vec![false; cands.len()];
        let mut picked = 0;
        let mut rank = 0;
        while picked < k_eff && rank < cands.len() {
            taken[rank] = true;
            picked += 1;
            rank += dilation;
        }
        if picked < k_eff {
            for r in 0..cands.len() {
                if picked == k_eff {
                    break;
                }
                if !taken[r] {
                    taken[r] = true;
                    picked += 1;
                }
            }
        }
        for (r, t) in taken.iter().enumerate() {
            if *t {
                indices.push(cands[r].1);
            }
        }
    }
    Ok(NeighborTable { n, k: k_eff, requested_k: k, dilation, indices })
}

/// Verification oracle: same documented selection rule, implemented
/// independently of the production path (full distance matrix, stable
/// index sort, literal rank walk). Intended for tests that demand exact
/// agreement with `knn_dilated`.
pub fn knn_bruteforce_oracle<T: Scalar>(x: &Tensor<T>, k: usize, dilation: usize) -> Result<NeighborTable> {
    if x.rank() != 2 {
        return Err(Error::shape("knn_bruteforce_oracle", format!("expected N x D features, got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    if n < 2 {
        return Err(Error::DegenerateGraph(format!("need at least 2 nodes to build a graph, got {}", n)));
    }
    if k == 0 || dilation == 0 {
        return Err(Error::contract("knn_bruteforce_oracle", "k and dilation must be at least 1"));
    }
    let dist = pairwise_sq_dist(x)?;
    let dv = dist.data();
    let k_eff = k.min(n - 1);
    let mut indices = Vec::with_capacity(n * k_eff);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            dv[i * n + a].partial_cmp(&dv[i * n + b]).unwrap().then(a.cmp(&b))
        });
        let mut selected_ranks = Vec::with_capacity(k_eff);
        let mut r = 0;
        while selected_ranks.len() < k_eff && r < order.len() {
            selected_ranks.push(r);
            r += dilation;
        }
        if selected_ranks.len() < k_eff {
            for rank in 0..order.len() {
                if selected_ranks.len() == k_eff {
                    break;
                }
                if !selected_ranks.contains(&rank) {
                    selected_ranks.push(rank);
                }
            }
            selected_ranks.sort_unstable();
        }
        for rank in selected_ranks {
            indices.push(order[rank]);
        }
    }
    Ok(NeighborTable { n, k: k_eff, requested_k: k, dilation, indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn feat(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn pairwise_three_four_five() {
        let x = feat(&[2, 2], &[0.0, 0.0, 3.0, 4.0]);
        let d = pairwise_sq_dist(&x).unwrap();
        assert_eq!(d.data(), &[0.0, 25.0, 25.0, 0.0]);
    }

    #[test]
    fn pairwise_is_symmetric_with_zero_diagonal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::rand_uniform(vec![7, 3], -5.0, 5.0, &mut rng);
        let d = pairwise_sq_dist(&x).unwrap();
        let n = 7;
        for i in 0..n {
            assert_eq!(d.data()[i * n + i], 0.0);
            for j in 0..n {
                assert_eq!(d.data()[i * n + j], d.data()[j * n + i]);
            }
        }
    }

    #[test]
    fn pairwise_rejects_non_finite() {
        let x = feat(&[2, 1], &[0.0, f64::NAN]);
        assert!(matches!(pairwise_sq_dist(&x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn nearest_on_a_line() {
        let x = feat(&[3, 1], &[0.0, 1.0, 3.0]);
        let t = knn_dilated(&x, 1, 1).unwrap();
        assert_eq!(t.neighbors(0), &[1]);
        assert_eq!(t.neighbors(1), &[0]);
        assert_eq!(t.neighbors(2), &[1]);
    }

    #[test]
    fn dilation_strides_over_candidates() {
        // Positions 0..6 on a line; from node 0 the sorted candidates are
        // 1,2,3,4,5 and a stride of 2 picks ranks 0 and 2.
        let x = feat(&[6, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let t = knn_dilated(&x, 2, 2).unwrap();
        assert_eq!(t.neighbors(0), &[1, 3]);
        assert_eq!(t.k(), 2);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        // All nodes coincide: every distance ties at 0.
        let x = Tensor::<f64>::zeros(vec![4, 2]);
        let t = knn_dilated(&x, 2, 1).unwrap();
        assert_eq!(t.neighbors(0), &[1, 2]);
        assert_eq!(t.neighbors(3), &[0, 1]);
    }

    #[test]
    fn no_self_loops_anywhere() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::rand_uniform(vec![12, 4], -1.0, 1.0, &mut rng);
        let t = knn_dilated(&x, 5, 2).unwrap();
        for i in 0..12 {
            assert!(!t.neighbors(i).contains(&i));
        }
    }

    #[test]
    fn k_clamps_to_candidate_count() {
        let x = feat(&[3, 1], &[0.0, 1.0, 2.0]);
        let t = knn_dilated(&x, 9, 1).unwrap();
        assert_eq!(t.k(), 2);
        assert_eq!(t.requested_k(), 9);
        assert_eq!(t.neighbors(0), &[1, 2]);
    }

    #[test]
    fn stride_walk_fills_from_skipped_ranks() {
        // 4 nodes: 3 candidates each. K=3, dilation=2 walks ranks 0, 2 and
        // must come back for rank 1.
        let x = feat(&[4, 1], &[0.0, 1.0, 2.0, 3.0]);
        let t = knn_dilated(&x, 3, 2).unwrap();
        assert_eq!(t.k(), 3);
        // From node 0 the candidates sorted are [1, 2, 3]; all selected.
        assert_eq!(t.neighbors(0), &[1, 2, 3]);
    }

    #[test]
    fn single_node_is_degenerate() {
        let x = feat(&[1, 2], &[0.0, 0.0]);
        assert!(matches!(knn_dilated(&x, 1, 1), Err(Error::DegenerateGraph(_))));
        assert!(matches!(knn_bruteforce_oracle(&x, 1, 1), Err(Error::DegenerateGraph(_))));
    }

    #[test]
    fn zero_k_or_dilation_is_a_contract_error() {
        let x = feat(&[2, 1], &[0.0, 1.0]);
        assert!(knn_dilated(&x, 0, 1).is_err());
        assert!(knn_dilated(&x, 1, 0).is_err());
    }

    #[test]
    fn oracle_agrees_on_tie_cases() {
        let zero = Tensor::<f64>::zeros(vec![5, 2]);
        for k in 1..=4 {
            for d in 1..=3 {
                assert_eq!(knn_dilated(&zero, k, d).unwrap(), knn_bruteforce_oracle(&zero, k, d).unwrap());
            }
        }
        // Mirror-symmetric coordinates produce exact distance ties.
        let x = feat(&[4, 1], &[-1.0, 1.0, -1.0, 1.0]);
        for k in 1..=3 {
            assert_eq!(knn_dilated(&x, k, 2).unwrap(), knn_bruteforce_oracle(&x, k, 2).unwrap());
        }
    }

    #[test]
    fn tiny_perturbation_preserves_structure() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::rand_uniform(vec![10, 3], -2.0, 2.0, &mut rng);
        let t0 = knn_dilated(&x, 4, 2).unwrap();
        let x2 = x.map(|v| v + 1e-12);
        let t1 = knn_dilated(&x2, 4, 2).unwrap();
        assert_eq!(t0, t1);
    }
}
