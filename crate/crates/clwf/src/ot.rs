//! Mini-batch optimal transport coupling under squared-Euclidean cost.
//!
//! Pairs of (noise, target) batches are projected into the Wasserstein space
//! by solving the discrete Kantorovich problem on the flattened full state:
//! exactly via an O(n³) shortest-augmenting-path assignment solver, or
//! approximately via log-domain Sinkhorn iterations for the
//! entropy-regularized variant.

use rand::Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Half squared-Euclidean costs between two equal-size batches.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Shape(format!(
                "cost matrix: expected {n}x{n} entries, got {}",
                entries.len()
            )));
        }
        Ok(CostMatrix { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    fn check_finite(&self) -> Result<()> {
        if self.entries.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(Error::Domain("cost matrix has non-finite entries".to_string()))
        }
    }
}

/// How source rows are matched to target columns.
#[derive(Debug, Clone)]
pub enum CouplingKind {
    /// Permutation: row i pairs with column assignment[i].
    Assignment(Vec<usize>),
    /// Dense n×n transport plan with uniform 1/n marginals.
    Plan(Tensor),
}

/// An optimal (or entropic) coupling and its transport cost.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub kind: CouplingKind,
    pub total_cost: f64,
    /// Max absolute deviation of the plan marginals from 1/n (0 for exact).
    pub marginal_violation: f64,
}

/// Batch pairing mode used during training and experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouplingMode {
    Exact,
    Sinkhorn { epsilon: f64 },
    Independent,
}

impl CouplingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(CouplingMode::Exact),
            "sinkhorn" => Ok(CouplingMode::Sinkhorn {
                epsilon: DEFAULT_SINKHORN_EPSILON,
            }),
            "independent" => Ok(CouplingMode::Independent),
            other => Err(Error::Config(format!(
                "coupling mode '{other}' not one of exact|sinkhorn|independent"
            ))),
        }
    }
}

pub const DEFAULT_SINKHORN_EPSILON: f64 = 0.01;
const SINKHORN_MAX_ITERS: usize = 5_000;
const SINKHORN_TOL: f64 = 1e-9;

/// entries[i][j] = ½‖x0_i − xT_j‖² over the flattened state.
pub fn pairwise_sq_cost(x0_batch: &[Tensor], xt_batch: &[Tensor]) -> Result<CostMatrix> {
    if x0_batch.len() != xt_batch.len() {
        return Err(Error::Shape(format!(
            "pairwise_sq_cost: batch sizes differ ({} vs {})",
            x0_batch.len(),
            xt_batch.len()
        )));
    }
    let n = x0_batch.len();
    if n == 0 {
        return Err(Error::Domain("pairwise_sq_cost: empty batch".to_string()));
    }
    let dim = x0_batch[0].len();
    for t in x0_batch.iter().chain(xt_batch.iter()) {
        if t.len() != dim {
            return Err(Error::Shape(format!(
                "pairwise_sq_cost: state sizes differ ({} vs {dim})",
                t.len()
            )));
        }
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        let xi = x0_batch[i].data();
        for j in 0..n {
            let yj = xt_batch[j].data();
            let mut s = 0.0;
            for d in 0..dim {
                let diff = xi[d] - yj[d];
                s += diff * diff;
            }
            entries[i * n + j] = 0.5 * s;
        }
    }
    CostMatrix::new(n, entries)
}

/// Exact minimum-cost assignment by shortest augmenting paths (O(n³)).
///
/// Among equal-cost optima the lexicographically smallest assignment is
/// returned, so degenerate inputs (duplicated points, constant costs) stay
/// deterministic.
pub fn solve_exact(cost: &CostMatrix) -> Result<Coupling> {
    cost.check_finite()?;
    let n = cost.n;
    let (mut assignment, u, v) = augmenting_path_assignment(cost);
    let total: f64 = (0..n).map(|i| cost.at(i, assignment[i])).sum();

    if let Some(canonical) = lexicographic_tight_matching(cost, &u, &v) {
        let canon_total: f64 = (0..n).map(|i| cost.at(i, canonical[i])).sum();
        // Only adopt when the totals agree exactly; ε-loose "tight" edges
        // must never perturb the reported optimum.
        if canon_total == total && canonical < assignment {
            assignment = canonical;
        }
    }

    Ok(Coupling {
        kind: CouplingKind::Assignment(assignment),
        total_cost: total,
        marginal_violation: 0.0,
    })
}

/// Jonker-Volgenant style shortest augmenting path solve.
/// Returns (row -> col assignment, row duals, col duals).
fn augmenting_path_assignment(cost: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.n;
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; n];

    for cur_row in 0..n {
        let mut shortest = vec![f64::INFINITY; n];
        let mut path = vec![cur_row; n];
        let mut scanned_row = vec![false; n];
        let mut scanned_col = vec![false; n];
        let mut min_val = 0.0;
        let mut i = cur_row;
        let sink = loop {
            scanned_row[i] = true;
            let mut lowest = f64::INFINITY;
            let mut next_col = NONE;
            for j in 0..n {
                if scanned_col[j] {
                    continue;
                }
                let r = min_val + cost.at(i, j) - u[i] - v[j];
                if r < shortest[j] {
                    shortest[j] = r;
                    path[j] = i;
                }
                // On ties prefer an unassigned column so the path terminates.
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row4col[j] == NONE && next_col != NONE
                        && row4col[next_col] != NONE)
                {
                    lowest = shortest[j];
                    next_col = j;
                }
            }
            min_val = lowest;
            scanned_col[next_col] = true;
            if row4col[next_col] == NONE {
                break next_col;
            }
            i = row4col[next_col];
        };

        u[cur_row] += min_val;
        for r in 0..n {
            if scanned_row[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for j in 0..n {
            if scanned_col[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    (col4row, u, v)
}

/// Lexicographically smallest perfect matching within the zero-reduced-cost
/// (tight) subgraph of the solved problem. Complementary slackness makes any
/// such matching optimal, so this is a pure tie-breaking pass. Returns None
/// when the float duals leave no exactly tight perfect matching.
fn lexicographic_tight_matching(cost: &CostMatrix, u: &[f64], v: &[f64]) -> Option<Vec<usize>> {
    let n = cost.n;
    let scale = (0..n * n)
        .map(|k| cost.entries[k].abs())
        .fold(1.0_f64, f64::max);
    let tol = scale * 1e-12;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (cost.at(i, j) - u[i] - v[j]).abs() <= tol)
                .collect()
        })
        .collect();

    let mut chosen = vec![usize::MAX; n];
    let mut col_used = vec![false; n];
    for i in 0..n {
        let mut fixed = false;
        for &j in &tight[i] {
            if col_used[j] {
                continue;
            }
            col_used[j] = true;
            if rows_matchable(&tight, i + 1, &col_used) {
                chosen[i] = j;
                fixed = true;
                break;
            }
            col_used[j] = false;
        }
        if !fixed {
            return None;
        }
    }
    Some(chosen)
}

/// Kuhn's algorithm: can rows from..n all be matched into unused columns?
fn rows_matchable(tight: &[Vec<usize>], from: usize, col_used: &[bool]) -> bool {
    let n = tight.len();
    let mut match_col = vec![usize::MAX; n];
    fn try_row(
        r: usize,
        tight: &[Vec<usize>],
        col_used: &[bool],
        match_col: &mut [usize],
        visited: &mut [bool],
    ) -> bool {
        for &j in &tight[r] {
            if col_used[j] || visited[j] {
                continue;
            }
            visited[j] = true;
            if match_col[j] == usize::MAX
                || try_row(match_col[j], tight, col_used, match_col, visited)
            {
                match_col[j] = r;
                return true;
            }
        }
        false
    }
    for r in from..n {
        let mut visited = vec![false; n];
        if !try_row(r, tight, col_used, &mut match_col, &mut visited) {
            return false;
        }
    }
    true
}

/// Entropy-regularized coupling by log-domain Sinkhorn iterations with
/// uniform 1/n marginals. Stops once the worst marginal deviation drops
/// below `tol` or after `max_iters` sweeps; the achieved violation is
/// reported on the returned coupling.
pub fn solve_sinkhorn(
    cost: &CostMatrix,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<Coupling> {
    cost.check_finite()?;
    if epsilon <= 0.0 {
        return Err(Error::Domain(format!(
            "sinkhorn: epsilon must be positive, got {epsilon}"
        )));
    }
    let n = cost.n;
    let log_marginal = -(n as f64).ln(); // log(1/n)
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];

    // log sum exp((g_j - C_ij)/eps) with the usual max shift
    let lse_over_j = |i: usize, g: &[f64]| -> f64 {
        let mut m = f64::NEG_INFINITY;
        for j in 0..n {
            m = m.max((g[j] - cost.at(i, j)) / epsilon);
        }
        let s: f64 = (0..n)
            .map(|j| ((g[j] - cost.at(i, j)) / epsilon - m).exp())
            .sum();
        m + s.ln()
    };
    let lse_over_i = |j: usize, f: &[f64]| -> f64 {
        let mut m = f64::NEG_INFINITY;
        for i in 0..n {
            m = m.max((f[i] - cost.at(i, j)) / epsilon);
        }
        let s: f64 = (0..n)
            .map(|i| ((f[i] - cost.at(i, j)) / epsilon - m).exp())
            .sum();
        m + s.ln()
    };

    let mut violation = f64::INFINITY;
    for _ in 0..max_iters {
        for i in 0..n {
            f[i] = epsilon * (log_marginal - lse_over_j(i, &g));
        }
        for j in 0..n {
            g[j] = epsilon * (log_marginal - lse_over_i(j, &f));
        }
        violation = marginal_violation(cost, &f, &g, epsilon);
        if violation < tol {
            break;
        }
    }

    let mut plan = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = ((f[i] + g[j] - cost.at(i, j)) / epsilon).exp();
            plan[i * n + j] = p;
            total += p * cost.at(i, j);
        }
    }
    let plan = Tensor::new(vec![n, n], plan)
        .map_err(|_| Error::Domain("sinkhorn: plan has non-finite entries".to_string()))?;
    Ok(Coupling {
        kind: CouplingKind::Plan(plan),
        total_cost: total,
        marginal_violation: violation,
    })
}

fn marginal_violation(cost: &CostMatrix, f: &[f64], g: &[f64], epsilon: f64) -> f64 {
    let n = cost.n;
    let target = 1.0 / n as f64;
    let mut worst = 0.0_f64;
    for i in 0..n {
        let row: f64 = (0..n)
            .map(|j| ((f[i] + g[j] - cost.at(i, j)) / epsilon).exp())
            .sum();
        worst = worst.max((row - target).abs());
    }
    for j in 0..n {
        let col: f64 = (0..n)
            .map(|i| ((f[i] + g[j] - cost.at(i, j)) / epsilon).exp())
            .sum();
        worst = worst.max((col - target).abs());
    }
    worst
}

/// A minibatch pairing: row i of the source batch goes with target index
/// `pairing[i]`.
#[derive(Debug, Clone)]
pub struct MinibatchCoupling {
    pub pairing: Vec<usize>,
    pub coupling: Coupling,
}

/// Compute the pairing indices for a (noise, target) minibatch under the
/// requested mode. Only the Sinkhorn mode consumes randomness (one column
/// draw per row, proportional to the plan row).
pub fn couple_indices<R: Rng + ?Sized>(
    x0_batch: &[Tensor],
    xt_batch: &[Tensor],
    mode: CouplingMode,
    rng: &mut R,
) -> Result<MinibatchCoupling> {
    let n = x0_batch.len();
    match mode {
        CouplingMode::Independent => {
            let cost = pairwise_sq_cost(x0_batch, xt_batch)?;
            let total: f64 = (0..n).map(|i| cost.at(i, i)).sum();
            Ok(MinibatchCoupling {
                pairing: (0..n).collect(),
                coupling: Coupling {
                    kind: CouplingKind::Assignment((0..n).collect()),
                    total_cost: total,
                    marginal_violation: 0.0,
                },
            })
        }
        CouplingMode::Exact => {
            let cost = pairwise_sq_cost(x0_batch, xt_batch)?;
            let coupling = solve_exact(&cost)?;
            let pairing = match &coupling.kind {
                CouplingKind::Assignment(a) => a.clone(),
                CouplingKind::Plan(_) => unreachable!(),
            };
            Ok(MinibatchCoupling { pairing, coupling })
        }
        CouplingMode::Sinkhorn { epsilon } => {
            let cost = pairwise_sq_cost(x0_batch, xt_batch)?;
            let coupling = solve_sinkhorn(&cost, epsilon, SINKHORN_MAX_ITERS, SINKHORN_TOL)?;
            let plan = match &coupling.kind {
                CouplingKind::Plan(p) => p,
                CouplingKind::Assignment(_) => unreachable!(),
            };
            let mut pairing = Vec::with_capacity(n);
            for i in 0..n {
                let row: Vec<f64> = (0..n).map(|j| plan.at2(i, j)).collect();
                let norm: f64 = row.iter().sum();
                let u: f64 = rng.gen_range(0.0..1.0) * norm;
                let mut cum = 0.0;
                let mut pick = n - 1;
                for (j, p) in row.iter().enumerate() {
                    cum += p;
                    if u < cum {
                        pick = j;
                        break;
                    }
                }
                pairing.push(pick);
            }
            Ok(MinibatchCoupling { pairing, coupling })
        }
    }
}

/// Reorder a (noise, target) minibatch into coupled pairs.
pub fn couple_minibatch<R: Rng + ?Sized>(
    x0_batch: &[Tensor],
    xt_batch: &[Tensor],
    mode: CouplingMode,
    rng: &mut R,
) -> Result<Vec<(Tensor, Tensor)>> {
    let mc = couple_indices(x0_batch, xt_batch, mode, rng)?;
    Ok(mc
        .pairing
        .iter()
        .enumerate()
        .map(|(i, &j)| (x0_batch[i].clone(), xt_batch[j].clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force_min(cost: &CostMatrix) -> (Vec<usize>, f64) {
        let n = cost.n();
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut perm: Vec<usize> = (0..n).collect();
        permute(&mut perm, 0, &mut |p| {
            let total: f64 = (0..n).map(|i| cost.at(i, p[i])).sum();
            match &best {
                Some((_, b)) if *b <= total => {}
                _ => best = Some((p.to_vec(), total)),
            }
        });
        best.unwrap()
    }

    fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            visit(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(perm, k + 1, visit);
            perm.swap(k, i);
        }
    }

    fn assignment(c: &Coupling) -> &[usize] {
        match &c.kind {
            CouplingKind::Assignment(a) => a,
            CouplingKind::Plan(_) => panic!("expected assignment"),
        }
    }

    #[test]
    fn cost_one_dim() {
        let x0 = [Tensor::scalar(0.0)];
        let xt = [Tensor::scalar(2.0)];
        let c = pairwise_sq_cost(&x0, &xt).unwrap();
        assert_eq!(c.at(0, 0), 2.0);
    }

    #[test]
    fn cost_zero_diagonal_on_identical_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<Tensor> = (0..5).map(|_| Tensor::randn(&[3], 1.0, &mut rng)).collect();
        let c = pairwise_sq_cost(&batch, &batch).unwrap();
        for i in 0..5 {
            assert_eq!(c.at(i, i), 0.0);
        }
    }

    #[test]
    fn cost_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[3], 1.0, &mut rng)).collect();
        let xt: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[3], 1.0, &mut rng)).collect();
        let c = pairwise_sq_cost(&x0, &xt).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for d in 0..3 {
                    let diff = x0[i].data()[d] - xt[j].data()[d];
                    s += diff * diff;
                }
                assert_eq!(c.at(i, j), 0.5 * s);
            }
        }
    }

    #[test]
    fn exact_prefers_diagonal() {
        let c = CostMatrix::new(2, vec![0.0, 5.0, 5.0, 0.0]).unwrap();
        let coupling = solve_exact(&c).unwrap();
        assert_eq!(assignment(&coupling), &[0, 1]);
        assert_eq!(coupling.total_cost, 0.0);
    }

    #[test]
    fn exact_prefers_antidiagonal() {
        let c = CostMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let coupling = solve_exact(&c).unwrap();
        assert_eq!(assignment(&coupling), &[1, 0]);
        assert_eq!(coupling.total_cost, 0.0);
    }

    #[test]
    fn exact_matches_brute_force_on_random_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let entries: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..10.0)).collect();
            let c = CostMatrix::new(6, entries).unwrap();
            let coupling = solve_exact(&c).unwrap();
            let (_, best) = brute_force_min(&c);
            assert_eq!(coupling.total_cost, best);
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        // All-equal costs: every permutation is optimal; identity is the
        // lexicographically smallest.
        let c = CostMatrix::new(4, vec![3.0; 16]).unwrap();
        let coupling = solve_exact(&c).unwrap();
        assert_eq!(assignment(&coupling), &[0, 1, 2, 3]);

        // Block of duplicated rows: first row should grab the smallest column.
        let c = CostMatrix::new(3, vec![1.0, 1.0, 9.0, 1.0, 1.0, 9.0, 9.0, 9.0, 0.0]).unwrap();
        let coupling = solve_exact(&c).unwrap();
        assert_eq!(assignment(&coupling), &[0, 1, 2]);
    }

    #[test]
    fn exact_rejects_non_finite() {
        let c = CostMatrix::new(2, vec![0.0, f64::INFINITY, 1.0, 0.0]).unwrap();
        assert!(solve_exact(&c).is_err());
    }

    #[test]
    fn sinkhorn_single_point() {
        let c = CostMatrix::new(1, vec![4.2]).unwrap();
        let coupling = solve_sinkhorn(&c, 0.5, 100, 1e-9).unwrap();
        match &coupling.kind {
            CouplingKind::Plan(p) => assert!((p.at2(0, 0) - 1.0).abs() < 1e-12),
            _ => panic!(),
        }
    }

    #[test]
    fn sinkhorn_uniform_cost_gives_uniform_plan() {
        let n = 4;
        let c = CostMatrix::new(n, vec![2.5; 16]).unwrap();
        let coupling = solve_sinkhorn(&c, 0.1, 1000, 1e-10).unwrap();
        match &coupling.kind {
            CouplingKind::Plan(p) => {
                for i in 0..n {
                    for j in 0..n {
                        assert!((p.at2(i, j) - 1.0 / 16.0).abs() < 1e-9);
                    }
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn sinkhorn_small_epsilon_concentrates_on_exact_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let entries: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let c = CostMatrix::new(4, entries).unwrap();
        let exact = solve_exact(&c).unwrap();
        let sigma = assignment(&exact).to_vec();
        let coupling = solve_sinkhorn(&c, 0.001, 10_000, 1e-10).unwrap();
        match &coupling.kind {
            CouplingKind::Plan(p) => {
                let mass: f64 = (0..4).map(|i| p.at2(i, sigma[i])).sum();
                assert!(mass > 0.95, "mass on exact assignment = {mass}");
            }
            _ => panic!(),
        }
    }

    #[test]
    fn sinkhorn_rejects_nonpositive_epsilon() {
        let c = CostMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(solve_sinkhorn(&c, 0.0, 10, 1e-6).is_err());
        assert!(solve_sinkhorn(&c, -0.5, 10, 1e-6).is_err());
    }

    #[test]
    fn sinkhorn_marginals_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let entries: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..3.0)).collect();
        let c = CostMatrix::new(5, entries).unwrap();
        let coupling = solve_sinkhorn(&c, 0.05, 5000, 1e-9).unwrap();
        assert!(coupling.marginal_violation < 1e-9);
    }

    #[test]
    fn independent_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2], 1.0, &mut rng)).collect();
        let xt: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2], 1.0, &mut rng)).collect();
        let mc = couple_indices(&x0, &xt, CouplingMode::Independent, &mut rng).unwrap();
        assert_eq!(mc.pairing, vec![0, 1, 2, 3]);
    }

    #[test]
    fn separated_clusters_pair_within_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Two well-separated clusters, both present in noise and target.
        let mut x0 = Vec::new();
        let mut xt = Vec::new();
        for k in 0..8 {
            let center = if k < 4 { -10.0 } else { 10.0 };
            x0.push(
                Tensor::new(vec![2], vec![center + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
                    .unwrap(),
            );
            xt.push(
                Tensor::new(vec![2], vec![center + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
                    .unwrap(),
            );
        }
        let mc = couple_indices(&x0, &xt, CouplingMode::Exact, &mut rng).unwrap();
        for (i, &j) in mc.pairing.iter().enumerate() {
            let same_side = (i < 4) == (j < 4);
            assert!(same_side, "row {i} paired across clusters with {j}");
        }
    }

    #[test]
    fn coupled_cost_never_exceeds_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0: Vec<Tensor> = (0..64).map(|_| Tensor::randn(&[4], 1.0, &mut rng)).collect();
        let xt: Vec<Tensor> = (0..64)
            .map(|_| Tensor::randn(&[4], 1.0, &mut rng).add(&Tensor::full(&[4], 1.0)).unwrap())
            .collect();
        let exact = couple_indices(&x0, &xt, CouplingMode::Exact, &mut rng).unwrap();
        let indep = couple_indices(&x0, &xt, CouplingMode::Independent, &mut rng).unwrap();
        assert!(exact.coupling.total_cost <= indep.coupling.total_cost);
    }

    #[test]
    fn coupling_invariant_under_common_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0: Vec<Tensor> = (0..6).map(|_| Tensor::randn(&[3], 1.0, &mut rng)).collect();
        let xt: Vec<Tensor> = (0..6).map(|_| Tensor::randn(&[3], 1.0, &mut rng)).collect();
        let base = couple_indices(&x0, &xt, CouplingMode::Exact, &mut rng).unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let x0p: Vec<Tensor> = perm.iter().map(|&i| x0[i].clone()).collect();
        let xtp: Vec<Tensor> = perm.iter().map(|&i| xt[i].clone()).collect();
        let permuted = couple_indices(&x0p, &xtp, CouplingMode::Exact, &mut rng).unwrap();
        assert!((base.coupling.total_cost - permuted.coupling.total_cost).abs() < 1e-12);
    }
}
