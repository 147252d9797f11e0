//! Exact optimal transport between discrete measures.
//!
//! Equal-size uniform measures go through a shortest-augmenting-path
//! Hungarian solver followed by a lexicographic refinement over the
//! optimal face, so ties between equal-cost matchings always resolve the
//! same way. Anything else is solved as a min-cost flow (successive
//! shortest paths with potentials), bounded by [`OtConfig::lp_cap`].

use super::{dist_sq, DiscreteMeasure, TransportPlan};
use crate::error::{Error, Result};

pub const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtConfig {
    /// Largest total support (`|supp a| + |supp b|`) handed to the flow solver.
    pub lp_cap: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self { lp_cap: 512 }
    }
}

/// Exact 2-Wasserstein distance and an optimal plan.
pub fn w2(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<(f64, TransportPlan)> {
    w2_with(a, b, &OtConfig::default())
}

pub fn w2_with(a: &DiscreteMeasure, b: &DiscreteMeasure, cfg: &OtConfig) -> Result<(f64, TransportPlan)> {
    let plan = solve(a, b, cfg, dist_sq)?;
    Ok((plan.cost.max(0.0).sqrt(), plan))
}

/// Exact 1-Wasserstein distance (Euclidean ground cost).
pub fn w1(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    let plan = solve(a, b, &OtConfig::default(), |x, y| dist_sq(x, y).sqrt())?;
    Ok(plan.cost.max(0.0))
}

/// Minimum root-mean-square matching cost over all `N!` permutations.
pub fn w2_brute_force(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let n = a.len();
    if n != b.len() || !a.is_uniform() || !b.is_uniform() {
        return Err(Error::InvalidArgument("brute force needs equal-size uniform measures".into()));
    }
    if n > BRUTE_FORCE_MAX {
        return Err(Error::TooLarge { got: n, max: BRUTE_FORCE_MAX });
    }
    let cost = cost_matrix(a, b, dist_sq);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        best = best.min(matching_cost(&cost, n, p));
    });
    Ok((best / n as f64).sqrt())
}

fn permute(perm: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == perm.len() {
        visit(perm);
        return;
    }
    for i in start..perm.len() {
        perm.swap(start, i);
        permute(perm, start + 1, visit);
        perm.swap(start, i);
    }
}

fn matching_cost(cost: &[f64], n: usize, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

fn cost_matrix(a: &DiscreteMeasure, b: &DiscreteMeasure, c: impl Fn(&[f64], &[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for p in a.points() {
        out.extend(b.points().map(|q| c(p, q)));
    }
    out
}

fn solve(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    cfg: &OtConfig,
    c: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<TransportPlan> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let cost = cost_matrix(a, b, c);
    if a.len() == b.len() && a.is_uniform() && b.is_uniform() {
        let n = a.len();
        let perm = assignment(&cost, n);
        let total = matching_cost(&cost, n, &perm);
        let mass = 1.0 / n as f64;
        return Ok(TransportPlan {
            pairs: perm.iter().enumerate().map(|(i, &j)| (i, j, mass)).collect(),
            cost: total / n as f64,
        });
    }
    let support = a.len() + b.len();
    if support > cfg.lp_cap {
        return Err(Error::SolverCapExceeded { support, cap: cfg.lp_cap });
    }
    let flow = min_cost_flow(&cost, a.weights(), b.weights())?;
    let nb = b.len();
    let mut pairs = Vec::new();
    let mut total = 0.0;
    for (idx, &mass) in flow.iter().enumerate() {
        if mass > 0.0 {
            pairs.push((idx / nb, idx % nb, mass));
            total += mass * cost[idx];
        }
    }
    Ok(TransportPlan { pairs, cost: total })
}

/// Minimum-cost perfect matching on a dense `n × n` cost matrix; returns
/// the column assigned to each row.
///
/// Among all optimal matchings the lexicographically smallest column
/// sequence is returned.
pub(crate) fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let (row_to_col, u, v) = hungarian(cost, n);
    let scale = cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-12 * (1.0 + scale);
    let refined = lex_refine(cost, n, &row_to_col, &u, &v, tol);
    if matching_cost(cost, n, &refined) <= matching_cost(cost, n, &row_to_col) + n as f64 * tol {
        refined
    } else {
        row_to_col
    }
}

/// Shortest augmenting path Hungarian algorithm with row/column potentials.
fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Walks rows in order and moves each to the smallest tight column that
/// still admits a perfect matching of the remaining rows inside the tight
/// subgraph.
fn lex_refine(cost: &[f64], n: usize, start: &[usize], u: &[f64], v: &[f64], tol: f64) -> Vec<usize> {
    let tight = |i: usize, j: usize| cost[i * n + j] - u[i] - v[j] <= tol;
    let mut row_to_col = start.to_vec();
    let mut col_to_row = vec![0; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    for i in 0..n {
        for j in 0..row_to_col[i] {
            // Columns held by earlier rows are frozen.
            if col_to_row[j] < i || !tight(i, j) {
                continue;
            }
            let target = row_to_col[i];
            let mut seen = vec![false; n];
            seen[j] = true;
            let mut path = Vec::new();
            if reroute(col_to_row[j], target, i, &tight, &row_to_col, &col_to_row, &mut seen, &mut path) {
                // path holds (row, new column) pairs along the alternating path.
                for &(r, c) in &path {
                    row_to_col[r] = c;
                    col_to_row[c] = r;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
    }
    row_to_col
}

#[allow(clippy::too_many_arguments)]
fn reroute(
    row: usize,
    target: usize,
    pivot: usize,
    tight: &impl Fn(usize, usize) -> bool,
    row_to_col: &[usize],
    col_to_row: &[usize],
    seen: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    let n = row_to_col.len();
    for c in 0..n {
        if seen[c] || c == row_to_col[row] || !tight(row, c) {
            continue;
        }
        let holder = col_to_row[c];
        if c != target && holder <= pivot {
            continue;
        }
        seen[c] = true;
        path.push((row, c));
        if c == target || reroute(holder, target, pivot, tight, row_to_col, col_to_row, seen, path) {
            return true;
        }
        path.pop();
    }
    false
}

/// Transportation problem as min-cost flow, solved by successive shortest
/// paths with Johnson potentials on the dense bipartite residual graph.
/// Returns the flow matrix (row-major, `|a| × |b|`).
fn min_cost_flow(cost: &[f64], supply: &[f64], demand: &[f64]) -> Result<Vec<f64>> {
    const MASS_EPS: f64 = 1e-15;
    let (na, nb) = (supply.len(), demand.len());
    let nodes = na + nb;
    let mut flow = vec![0.0; na * nb];
    let mut supply = supply.to_vec();
    let mut demand = demand.to_vec();
    let mut pot = vec![0.0; nodes];
    for j in 0..nb {
        pot[na + j] = (0..na).map(|i| cost[i * nb + j]).fold(f64::INFINITY, f64::min);
    }
    let max_iters = 64 * nodes * nodes + 64;
    for _ in 0..max_iters {
        if supply.iter().all(|&s| s <= MASS_EPS) || demand.iter().all(|&d| d <= MASS_EPS) {
            return Ok(flow);
        }
        // Dense Dijkstra from every source with remaining supply.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut parent = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        for i in 0..na {
            if supply[i] > MASS_EPS {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut best = usize::MAX;
            for node in 0..nodes {
                if !done[node] && dist[node].is_finite() && (best == usize::MAX || dist[node] < dist[best]) {
                    best = node;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < na {
                let i = best;
                for j in 0..nb {
                    let to = na + j;
                    let reduced = (cost[i * nb + j] + pot[i] - pot[to]).max(0.0);
                    if dist[i] + reduced < dist[to] {
                        dist[to] = dist[i] + reduced;
                        parent[to] = i;
                    }
                }
            } else {
                let j = best - na;
                for i in 0..na {
                    if flow[i * nb + j] > 0.0 {
                        let reduced = (-cost[i * nb + j] + pot[best] - pot[i]).max(0.0);
                        if dist[best] + reduced < dist[i] {
                            dist[i] = dist[best] + reduced;
                            parent[i] = best;
                        }
                    }
                }
            }
        }
        let sink = (0..nb)
            .filter(|&j| demand[j] > MASS_EPS && dist[na + j].is_finite())
            .min_by(|&x, &y| dist[na + x].total_cmp(&dist[na + y]))
            .ok_or_else(|| Error::NonFinite("transport residual graph".into()))?;
        let cap = dist[na + sink];
        for node in 0..nodes {
            pot[node] += dist[node].min(cap);
        }
        // Bottleneck along the path back to its source.
        let mut amount = demand[sink];
        let mut node = na + sink;
        while parent[node] != usize::MAX {
            let prev = parent[node];
            if prev >= na {
                amount = amount.min(flow[node * nb + (prev - na)]);
            }
            node = prev;
        }
        amount = amount.min(supply[node]);
        let origin = node;
        let mut node = na + sink;
        while parent[node] != usize::MAX {
            let prev = parent[node];
            if prev < na {
                flow[prev * nb + (node - na)] += amount;
            } else {
                let slot = &mut flow[node * nb + (prev - na)];
                *slot -= amount;
                if *slot < MASS_EPS {
                    *slot = 0.0;
                }
            }
            node = prev;
        }
        supply[origin] -= amount;
        demand[sink] -= amount;
    }
    Err(Error::NonFinite("transport solver did not terminate".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(points: &[&[f64]]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(points.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    #[test]
    fn identity_plan_on_equal_measures() {
        let a = uniform(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        let (d, plan) = w2(&a, &a).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(plan.as_permutation(3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn single_particles_give_euclidean_distance() {
        let (d, _) = w2(&uniform(&[&[1.0, 2.0]]), &uniform(&[&[4.0, 6.0]])).unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn antipodal_pair_brute_force() {
        let a = uniform(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let b = uniform(&[&[0.0, 1.0], &[0.0, -1.0]]);
        // Both matchings cost 2 per point.
        assert!((w2_brute_force(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let (d, plan) = w2(&a, &b).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        // Tie resolves to the lexicographically smallest matching.
        assert_eq!(plan.as_permutation(2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // Four identical targets: every matching is optimal.
        let a = uniform(&[&[0.0], &[0.0], &[0.0], &[0.0]]);
        let b = uniform(&[&[1.0], &[1.0], &[1.0], &[1.0]]);
        let (_, plan) = w2(&a, &b).unwrap();
        assert_eq!(plan.as_permutation(4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn brute_force_rejects_large() {
        let pts: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        let a = DiscreteMeasure::uniform(pts).unwrap();
        assert!(matches!(w2_brute_force(&a, &a), Err(Error::TooLarge { got: 9, .. })));
    }

    #[test]
    fn dimension_mismatch() {
        let a = uniform(&[&[0.0]]);
        let b = uniform(&[&[0.0, 1.0]]);
        assert!(matches!(w2(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn weighted_flow_solver_matches_marginals() {
        let a = DiscreteMeasure::new(vec![vec![0.0], vec![1.0], vec![3.0]], vec![0.5, 0.25, 0.25]).unwrap();
        let b = DiscreteMeasure::new(vec![vec![0.5], vec![2.0]], vec![0.3, 0.7]).unwrap();
        let (d, plan) = w2(&a, &b).unwrap();
        let (ma, mb) = plan.marginals(3, 2);
        for (x, y) in ma.iter().zip(a.weights()) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in mb.iter().zip(b.weights()) {
            assert!((x - y).abs() < 1e-10);
        }
        // 1-D optimal transport is the monotone (quantile) coupling.
        let monotone = 0.3 * 0.25 + 0.2 * 4.0 + 0.25 * 1.0 + 0.25 * 1.0;
        assert!((d * d - monotone).abs() < 1e-12, "{} vs {}", d * d, monotone);
    }

    #[test]
    fn flow_solver_agrees_with_assignment() {
        // Non-uniform representation of a uniform problem: split each atom in two.
        let a = uniform(&[&[0.0, 0.0], &[1.0, 2.0], &[-1.0, 0.5]]);
        let b = uniform(&[&[0.3, 0.1], &[2.0, 2.0], &[-0.5, -1.0]]);
        let (exact, _) = w2(&a, &b).unwrap();
        let split = DiscreteMeasure::new(
            a.points().flat_map(|p| [p.to_vec(), p.to_vec()]).collect(),
            vec![1.0 / 6.0; 6],
        )
        .unwrap();
        let (via_flow, plan) = w2(&split, &b).unwrap();
        assert!((exact - via_flow).abs() < 1e-12);
        assert!(plan.cost >= 0.0);
    }

    #[test]
    fn cap_is_enforced() {
        let a = DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        let b = DiscreteMeasure::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let err = w2_with(&a, &b, &OtConfig { lp_cap: 2 }).unwrap_err();
        assert_eq!(err, Error::SolverCapExceeded { support: 3, cap: 2 });
    }
}
