//! Exact discrete Wasserstein-1: a transportation-simplex solver for
//! arbitrary ground costs and the closed-form CDF method for 1-D marginals.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("distributions must share length, got {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("weights must be nonnegative and sum to 1 (sum {0})")]
    BadWeights(f64),
    #[error("transport solver failed to converge")]
    NoConvergence,
}

/// A feasible transport plan between two categorical distributions.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub weights: Array2<f64>,
    pub cost: f64,
}

impl TransportPlan {
    /// Largest violation of the marginal constraints.
    pub fn marginal_error(&self, supply: &[f64], demand: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (i, &s) in supply.iter().enumerate() {
            let row: f64 = self.weights.row(i).sum();
            worst = worst.max((row - s).abs());
        }
        for (j, &d) in demand.iter().enumerate() {
            let col: f64 = self.weights.column(j).sum();
            worst = worst.max((col - d).abs());
        }
        worst
    }
}

fn check_simplex(w: &[f64]) -> Result<(), TransportError> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&x| x < -1e-12) || (sum - 1.0).abs() > 1e-6 {
        return Err(TransportError::BadWeights(sum));
    }
    Ok(())
}

/// Closed-form 1-D Wasserstein-1 between categorical distributions on a
/// shared increasing support: the integral of |CDF difference|.
pub fn wasserstein1_1d(p: &[f64], q: &[f64], support: &[f64]) -> Result<f64, TransportError> {
    if p.len() != q.len() || p.len() != support.len() {
        return Err(TransportError::LengthMismatch(p.len(), q.len()));
    }
    check_simplex(p)?;
    check_simplex(q)?;
    let mut cum = 0.0;
    let mut total = 0.0;
    for i in 0..p.len().saturating_sub(1) {
        cum += p[i] - q[i];
        total += cum.abs() * (support[i + 1] - support[i]);
    }
    Ok(total)
}

/// Exact minimum-cost transport via the transportation simplex (northwest
/// corner start, MODI pivoting on a spanning-tree basis).
///
/// `cost(i, j)` is the ground cost between source bin `i` and sink bin `j`.
/// Zero-mass bins are trimmed before solving, so sparsity is cheap.
pub fn solve_transport(
    supply: &[f64],
    demand: &[f64],
    cost: &dyn Fn(usize, usize) -> f64,
) -> Result<TransportPlan, TransportError> {
    check_simplex(supply)?;
    check_simplex(demand)?;
    let src: Vec<usize> = (0..supply.len()).filter(|&i| supply[i] > 0.0).collect();
    let snk: Vec<usize> = (0..demand.len()).filter(|&j| demand[j] > 0.0).collect();
    let m = src.len();
    let n = snk.len();
    let mut plan = Array2::zeros((supply.len(), demand.len()));
    if m == 0 || n == 0 {
        return Ok(TransportPlan {
            weights: plan,
            cost: 0.0,
        });
    }
    let mut a: Vec<f64> = src.iter().map(|&i| supply[i]).collect();
    let total_a: f64 = a.iter().sum();
    // rescale demand so both sides balance exactly
    let total_b: f64 = snk.iter().map(|&j| demand[j]).sum();
    let mut b: Vec<f64> = snk.iter().map(|&j| demand[j] * total_a / total_b).collect();
    let c = |i: usize, j: usize| cost(src[i], snk[j]);

    // northwest-corner initial basis: m + n - 1 cells forming a tree
    let mut basis: Vec<(usize, usize, f64)> = Vec::with_capacity(m + n - 1);
    {
        let (mut i, mut j) = (0, 0);
        while basis.len() < m + n - 1 {
            let theta = a[i].min(b[j]);
            basis.push((i, j, theta));
            a[i] -= theta;
            b[j] -= theta;
            if i + 1 < m && (a[i] <= b[j] || j + 1 == n) {
                i += 1;
            } else if j + 1 < n {
                j += 1;
            } else {
                break;
            }
        }
    }

    let nodes = m + n;
    let max_iters = 200 * (nodes * nodes).max(64);
    let mut converged = false;
    for _ in 0..max_iters {
        // adjacency over the basis tree: node k<m is source k, else sink k-m
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        for (idx, &(i, j, _)) in basis.iter().enumerate() {
            adj[i].push((m + j, idx));
            adj[m + j].push((i, idx));
        }
        // potentials from u_0 = 0 over the tree
        let mut u = vec![f64::NAN; m];
        let mut v = vec![f64::NAN; n];
        u[0] = 0.0;
        let mut stack = vec![0usize];
        let mut seen = vec![false; nodes];
        seen[0] = true;
        while let Some(node) = stack.pop() {
            for &(next, cell) in &adj[node] {
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                let (i, j, _) = basis[cell];
                if next >= m {
                    v[next - m] = c(i, j) - u[i];
                } else {
                    u[next] = c(i, j) - v[j];
                }
                stack.push(next);
            }
        }

        // entering cell: most negative reduced cost
        let mut best = (-1e-12, None);
        for i in 0..m {
            for j in 0..n {
                let reduced = c(i, j) - u[i] - v[j];
                if reduced < best.0 {
                    best = (reduced, Some((i, j)));
                }
            }
        }
        let Some((ei, ej)) = best.1 else {
            converged = true;
            break;
        };

        // unique tree path from source node ei to sink node m + ej
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; nodes];
        let mut seen = vec![false; nodes];
        seen[ei] = true;
        let mut queue = std::collections::VecDeque::from([ei]);
        while let Some(node) = queue.pop_front() {
            if node == m + ej {
                break;
            }
            for &(next, cell) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, cell));
                    queue.push_back(next);
                }
            }
        }
        let mut path_cells = Vec::new();
        let mut node = m + ej;
        while node != ei {
            let (prev, cell) = parent[node].expect("tree is connected");
            path_cells.push(cell);
            node = prev;
        }
        path_cells.reverse();

        // alternate signs along the cycle, starting negative in row ei
        let mut theta = f64::INFINITY;
        let mut leaving = None;
        for (pos, &cell) in path_cells.iter().enumerate() {
            if pos % 2 == 0 {
                let flow = basis[cell].2;
                if flow < theta {
                    theta = flow;
                    leaving = Some(cell);
                }
            }
        }
        let leaving = leaving.ok_or(TransportError::NoConvergence)?;
        for (pos, &cell) in path_cells.iter().enumerate() {
            if pos % 2 == 0 {
                basis[cell].2 -= theta;
            } else {
                basis[cell].2 += theta;
            }
        }
        basis[leaving] = (ei, ej, theta);
    }

    if !converged {
        return Err(TransportError::NoConvergence);
    }
    let mut total_cost = 0.0;
    for &(i, j, flow) in &basis {
        if flow > 0.0 {
            plan[[src[i], snk[j]]] += flow;
            total_cost += flow * c(i, j);
        }
    }
    Ok(TransportPlan {
        weights: plan,
        cost: total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|&x| x / sum).collect()
    }

    #[test]
    fn identical_distributions_cost_zero() {
        let p = vec![0.2, 0.3, 0.5];
        let reps = vec![0.0, 1.0, 2.0];
        assert_eq!(wasserstein1_1d(&p, &p, &reps).unwrap(), 0.0);
        let plan = solve_transport(&p, &p, &|i, j| (reps[i] - reps[j]).abs()).unwrap();
        assert!(plan.cost.abs() < 1e-15);
    }

    #[test]
    fn point_masses_move_their_distance() {
        let p = vec![1.0, 0.0];
        let q = vec![0.0, 1.0];
        let reps = vec![0.0, 3.0];
        assert_eq!(wasserstein1_1d(&p, &q, &reps).unwrap(), 3.0);
        let plan = solve_transport(&p, &q, &|i, j| (reps[i] - reps[j]).abs()).unwrap();
        assert!((plan.cost - 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_bin_shift_costs_full_gap() {
        // every half unit of mass must travel one support step
        let p = vec![0.5, 0.5, 0.0];
        let q = vec![0.0, 0.5, 0.5];
        let reps = vec![0.0, 1.0, 2.0];
        let closed = wasserstein1_1d(&p, &q, &reps).unwrap();
        let plan = solve_transport(&p, &q, &|i, j| (reps[i] - reps[j]).abs()).unwrap();
        assert!((closed - 1.0).abs() < 1e-12);
        assert!((plan.cost - closed).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_simplex_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.random_range(2..=9);
            let reps: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 + 0.1).collect();
            let p = random_simplex(&mut rng, n);
            let q = random_simplex(&mut rng, n);
            let closed = wasserstein1_1d(&p, &q, &reps).unwrap();
            let plan = solve_transport(&p, &q, &|i, j| (reps[i] - reps[j]).abs()).unwrap();
            assert!(
                (closed - plan.cost).abs() < 1e-10,
                "closed {closed} vs simplex {}",
                plan.cost
            );
            assert!(plan.marginal_error(&p, &q) < 1e-8);
        }
    }

    #[test]
    fn sparse_distributions_are_trimmed() {
        let p = vec![0.0, 1.0, 0.0, 0.0];
        let q = vec![0.25, 0.0, 0.0, 0.75];
        let reps: Vec<f64> = vec![0.0, 1.0, 2.0, 3.0];
        let plan = solve_transport(&p, &q, &|i, j| (reps[i] - reps[j]).abs()).unwrap();
        // 0.25 moves distance 1 left, 0.75 moves distance 2 right
        assert!((plan.cost - (0.25 + 1.5)).abs() < 1e-12);
        assert!(plan.marginal_error(&p, &q) < 1e-12);
    }

    #[test]
    fn metric_axioms_on_small_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reps: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let dist = |p: &[f64], q: &[f64]| {
            solve_transport(p, q, &|i, j| (reps[i] - reps[j]).abs())
                .unwrap()
                .cost
        };
        for _ in 0..50 {
            let p = random_simplex(&mut rng, 5);
            let q = random_simplex(&mut rng, 5);
            let r = random_simplex(&mut rng, 5);
            let pq = dist(&p, &q);
            let qp = dist(&q, &p);
            assert!((pq - qp).abs() < 1e-10, "symmetry");
            assert!(dist(&p, &p) < 1e-10, "identity");
            assert!(pq >= 0.0);
            assert!(pq <= dist(&p, &r) + dist(&r, &q) + 1e-9, "triangle");
        }
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(matches!(
            wasserstein1_1d(&[0.5, 0.2], &[0.5, 0.5], &[0.0, 1.0]),
            Err(TransportError::BadWeights(_))
        ));
        assert!(matches!(
            solve_transport(&[2.0], &[1.0], &|_, _| 0.0),
            Err(TransportError::BadWeights(_))
        ));
    }
}
