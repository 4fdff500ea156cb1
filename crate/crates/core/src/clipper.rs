//! Consistency-graph data association between two object maps.
//!
//! Nodes of the graph are putative object-to-object associations. Two
//! associations are consistent when they preserve the distance between the
//! objects they pair up; the affinity matrix `M` scores that consistency in
//! `[0, 1]`. The solver looks for the inlier set maximizing the density
//! `u'Mu / u'u` over binary indicators `u`, subject to never selecting two
//! associations whose affinity is zero.
//!
//! A node whose diagonal entry is zero is treated as removed from the graph.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::object_map::ObjectMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PutativeAssociation {
    pub idx_i: usize,
    pub idx_j: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipperParams {
    /// Consistency gate on the distance residual (m).
    pub epsilon: f64,
    /// Width of the Gaussian affinity kernel (m).
    pub sigma: f64,
    /// Width/height tolerance for putative associations (m).
    pub wh_tol: f64,
    /// Iteration cap for each inner ascent of the relaxed solver.
    pub max_solver_iters: usize,
    pub solver_tol: f64,
    /// Problems with at most this many live associations are solved exactly.
    pub exhaustive_max: usize,
}

impl Default for ClipperParams {
    fn default() -> Self {
        Self {
            epsilon: 0.4,
            sigma: 0.15,
            wh_tol: 0.3,
            max_solver_iters: 1000,
            solver_tol: 1e-8,
            exhaustive_max: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipperProblem {
    pub affinity: DMatrix<f64>,
    pub associations: Vec<PutativeAssociation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClipperSolution {
    /// Indices into `ClipperProblem::associations`, ascending.
    pub inliers: Vec<usize>,
    pub density: f64,
}

/// All pairs of objects whose widths and heights agree within `wh_tol`,
/// sorted by `(idx_i, idx_j)`.
pub fn putative_associations(
    map_i: &ObjectMap,
    map_j: &ObjectMap,
    params: &ClipperParams,
) -> Vec<PutativeAssociation> {
    let mut out = Vec::new();
    for (idx_i, a) in map_i.objects.iter().enumerate() {
        for (idx_j, b) in map_j.objects.iter().enumerate() {
            if (a.width - b.width).abs() <= params.wh_tol
                && (a.height - b.height).abs() <= params.wh_tol
            {
                out.push(PutativeAssociation { idx_i, idx_j });
            }
        }
    }
    out
}

/// `| ||p_i - q_i|| - ||p_j - q_j|| |` on 3D centroids.
pub fn consistency_distance(
    a_p: &PutativeAssociation,
    a_q: &PutativeAssociation,
    map_i: &ObjectMap,
    map_j: &ObjectMap,
) -> f64 {
    let di = (map_i.objects[a_p.idx_i].centroid - map_i.objects[a_q.idx_i].centroid).norm();
    let dj = (map_j.objects[a_p.idx_j].centroid - map_j.objects[a_q.idx_j].centroid).norm();
    (di - dj).abs()
}

pub fn build_problem(
    map_i: &ObjectMap,
    map_j: &ObjectMap,
    assocs: Vec<PutativeAssociation>,
    params: &ClipperParams,
) -> ClipperProblem {
    let m = assocs.len();
    let two_sigma_sq = 2.0 * params.sigma * params.sigma;
    let mut affinity = DMatrix::<f64>::identity(m, m);
    for p in 0..m {
        for q in (p + 1)..m {
            let (a, b) = (&assocs[p], &assocs[q]);
            if a.idx_i == b.idx_i || a.idx_j == b.idx_j {
                continue;
            }
            let d = consistency_distance(a, b, map_i, map_j);
            if d < params.epsilon {
                let s = (-d * d / two_sigma_sq).exp();
                affinity[(p, q)] = s;
                affinity[(q, p)] = s;
            }
        }
    }
    ClipperProblem {
        affinity,
        associations: assocs,
    }
}

impl ClipperProblem {
    pub fn len(&self) -> usize {
        self.associations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.associations.is_empty()
    }

    pub fn is_active(&self, p: usize) -> bool {
        self.affinity[(p, p)] > 0.0
    }

    /// `u'Mu / u'u` for the binary indicator of `set`; zero for an empty set.
    pub fn density(&self, set: &[usize]) -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for &p in set {
            for &q in set {
                total += self.affinity[(p, q)];
            }
        }
        total / set.len() as f64
    }

    /// True when every pair in `set` (including each node with itself) has
    /// positive affinity.
    pub fn is_consistent(&self, set: &[usize]) -> bool {
        set.iter()
            .all(|&p| set.iter().all(|&q| self.affinity[(p, q)] > 0.0))
    }

    /// Zeroes every entry `M[p, q]` with `p, q` in `set`, removing those
    /// associations from later solves.
    pub fn zero_block(&mut self, set: &[usize]) {
        for &p in set {
            for &q in set {
                self.affinity[(p, q)] = 0.0;
            }
        }
    }

    fn active_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.is_active(p)).collect()
    }
}

/// Densest consistent inlier set. Small problems are searched exhaustively;
/// larger ones go through the continuous relaxation and rounding.
pub fn solve(problem: &ClipperProblem, params: &ClipperParams) -> ClipperSolution {
    let live = (0..problem.len()).filter(|&p| problem.is_active(p)).count();
    if live <= params.exhaustive_max {
        solve_exhaustive(problem)
    } else {
        solve_relaxed(problem, params)
    }
}

const TIE_EPS: f64 = 1e-12;

/// Enumerates every consistent subset (clique of the consistency graph)
/// and returns the densest one. Ties prefer the larger set, then the set
/// found first in lexicographic order.
pub fn solve_exhaustive(problem: &ClipperProblem) -> ClipperSolution {
    let active = problem.active_nodes();
    let mut best = ClipperSolution::default();
    let mut current = Vec::with_capacity(active.len());
    extend_cliques(problem, &active, &mut current, 0.0, &mut best);
    best
}

fn extend_cliques(
    problem: &ClipperProblem,
    candidates: &[usize],
    current: &mut Vec<usize>,
    current_sum: f64,
    best: &mut ClipperSolution,
) {
    let m = &problem.affinity;
    for (k, &p) in candidates.iter().enumerate() {
        let added = m[(p, p)] + 2.0 * current.iter().map(|&q| m[(p, q)]).sum::<f64>();
        let sum = current_sum + added;
        current.push(p);
        let density = sum / current.len() as f64;
        let better = density > best.density + TIE_EPS
            || (density > best.density - TIE_EPS && current.len() > best.inliers.len());
        if better {
            best.density = density;
            best.inliers.clone_from(current);
        }
        let next: Vec<usize> = candidates[k + 1..]
            .iter()
            .copied()
            .filter(|&q| m[(p, q)] > 0.0)
            .collect();
        if !next.is_empty() {
            extend_cliques(problem, &next, current, sum, best);
        }
        current.pop();
    }
}

/// Sparse view of the live part of the consistency graph.
struct Graph {
    active: Vec<bool>,
    diag: Vec<f64>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl Graph {
    fn new(problem: &ClipperProblem) -> Self {
        let n = problem.len();
        let m = &problem.affinity;
        let active: Vec<bool> = (0..n).map(|p| problem.is_active(p)).collect();
        let neighbors = (0..n)
            .map(|p| {
                if !active[p] {
                    return Vec::new();
                }
                (0..n)
                    .filter(|&q| q != p && active[q] && m[(p, q)] > 0.0)
                    .map(|q| (q, m[(p, q)]))
                    .collect()
            })
            .collect();
        let diag = (0..n).map(|p| m[(p, p)]).collect();
        Self {
            active,
            diag,
            neighbors,
        }
    }

    /// `M_d u` with `M_d = M - d (J - C)`, where `C` marks consistent pairs.
    fn apply(&self, u: &[f64], d: f64, out: &mut [f64]) {
        let total: f64 = u.iter().sum();
        for p in 0..u.len() {
            if !self.active[p] {
                out[p] = 0.0;
                continue;
            }
            let mut mu = self.diag[p] * u[p];
            let mut consistent = u[p];
            for &(q, w) in &self.neighbors[p] {
                mu += w * u[q];
                consistent += u[q];
            }
            out[p] = mu - d * (total - consistent);
        }
    }

    /// Largest `u_p * sum_{q inconsistent with p} u_q`.
    fn violation(&self, u: &[f64]) -> f64 {
        let total: f64 = u.iter().sum();
        (0..u.len())
            .filter(|&p| self.active[p])
            .map(|p| {
                let consistent = u[p] + self.neighbors[p].iter().map(|&(q, _)| u[q]).sum::<f64>();
                u[p] * (total - consistent).max(0.0)
            })
            .fold(0.0, f64::max)
    }

    fn adjacent(&self, p: usize, q: usize) -> bool {
        self.neighbors[p].iter().any(|&(r, _)| r == q)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected gradient ascent of `u' M_d u` on the unit sphere intersected
/// with the nonnegative orthant, with backtracking on the step size.
fn ascend(graph: &Graph, u: &mut Vec<f64>, d: f64, params: &ClipperParams) {
    let n = u.len();
    let mut g = vec![0.0; n];
    let mut gv = vec![0.0; n];
    let mut v = vec![0.0; n];
    graph.apply(u, d, &mut g);
    let mut f = dot(u, &g);
    let mut alpha = 1.0;
    for _ in 0..params.max_solver_iters {
        for p in 0..n {
            v[p] = if graph.active[p] {
                (u[p] + alpha * g[p]).max(0.0)
            } else {
                0.0
            };
        }
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            alpha *= 0.5;
            if alpha < 1e-14 {
                break;
            }
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        graph.apply(&v, d, &mut gv);
        let fv = dot(&v, &gv);
        if fv >= f {
            let change = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            std::mem::swap(u, &mut v);
            std::mem::swap(&mut g, &mut gv);
            f = fv;
            if change < params.solver_tol {
                break;
            }
            alpha = (alpha * 2.0).min(1e8);
        } else {
            alpha *= 0.5;
            if alpha < 1e-14 {
                break;
            }
        }
    }
}

/// Continuous relaxation with a penalty homotopy on inconsistent pairs,
/// followed by greedy rounding and local augmentation. Deterministic: the
/// ascent starts from the normalized all-ones vector over live nodes.
pub fn solve_relaxed(problem: &ClipperProblem, params: &ClipperParams) -> ClipperSolution {
    let graph = Graph::new(problem);
    let n = problem.len();
    let live = graph.active.iter().filter(|&&a| a).count();
    if live == 0 {
        return ClipperSolution::default();
    }
    let start = 1.0 / (live as f64).sqrt();
    let mut u: Vec<f64> = graph
        .active
        .iter()
        .map(|&a| if a { start } else { 0.0 })
        .collect();

    let mut d = 0.0;
    for _ in 0..40 {
        ascend(&graph, &mut u, d, params);
        if graph.violation(&u) < params.solver_tol {
            break;
        }
        d = if d == 0.0 { 1e-2 } else { d * 2.0 };
    }

    let mut order: Vec<usize> = (0..n).filter(|&p| graph.active[p]).collect();
    order.sort_by(|&a, &b| u[b].partial_cmp(&u[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    round(problem, &graph, &order)
}

fn round(problem: &ClipperProblem, graph: &Graph, order: &[usize]) -> ClipperSolution {
    let m = &problem.affinity;

    // greedy consistent selection in order of relaxed weight
    let mut kept: Vec<usize> = Vec::new();
    for &p in order {
        if kept.iter().all(|&q| graph.adjacent(p, q)) {
            kept.push(p);
        }
    }

    // best prefix of the greedy sequence
    let mut sum = 0.0;
    let mut best_len = 0;
    let mut best_density = f64::NEG_INFINITY;
    for (k, &p) in kept.iter().enumerate() {
        sum += m[(p, p)] + 2.0 * kept[..k].iter().map(|&q| m[(p, q)]).sum::<f64>();
        let density = sum / (k + 1) as f64;
        if density > best_density + TIE_EPS {
            best_density = density;
            best_len = k + 1;
        }
    }
    kept.truncate(best_len);
    let mut sum = best_density * best_len as f64;

    // add any node that is consistent with the set and raises the density
    loop {
        let k = kept.len() as f64;
        let current = sum / k;
        let mut best: Option<(usize, f64)> = None;
        for &q in order {
            if kept.contains(&q) || !kept.iter().all(|&p| graph.adjacent(p, q)) {
                continue;
            }
            let new_sum = sum + m[(q, q)] + 2.0 * kept.iter().map(|&p| m[(p, q)]).sum::<f64>();
            let gain = new_sum / (k + 1.0) - current;
            if gain > TIE_EPS && best.is_none_or(|(_, g)| gain > g) {
                best = Some((q, new_sum));
            }
        }
        match best {
            Some((q, new_sum)) => {
                kept.push(q);
                sum = new_sum;
            }
            None => break,
        }
    }

    kept.sort_unstable();
    let density = problem.density(&kept);
    ClipperSolution {
        inliers: kept,
        density,
    }
}
