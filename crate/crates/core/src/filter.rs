//! Multi-hypothesis frame alignment filter.
//!
//! Every leaf of a hypothesis tree is a Kalman belief over the alignment
//! `[x, y, theta]` reached by one sequence of measurement selections. Each
//! step a leaf branches into a "no measurement" child and one child per
//! measurement that passes its gate. Node costs are negative log
//! likelihoods:
//!
//! ```text
//! measurement:     0.5 * (|z - Hx|^2_S + ln|S|)
//! no measurement:  -ln(p_nm) - 0.5 * d_z * ln(2 pi)
//! ```
//!
//! so the lowest cumulative cost leaf is the most likely selection sequence
//! inside the window. Trees are cut back to the lag-`window` ancestor of the
//! best leaf and to the `max_branches` cheapest leaves after every step.
//!
//! While no alignment is trusted the filter runs one exploring tree per
//! recent measurement; a tree whose best full-window leaf is cheap enough
//! becomes the main tree and its best leaf is published as the estimate.

use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{Cholesky, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, symmetrize, Gaussian3, Pose2};
use crate::registration::AlignmentMeasurement;

/// Dimension of the measurement vector `[x, y, theta]`.
pub const MEAS_DIM: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("invalid filter configuration: {0}")]
    Config(String),
}

/// Random-walk process with a direct observation of the state (`H = I`).
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanModel {
    pub q: Matrix3<f64>,
    pub r: Matrix3<f64>,
}

impl Default for KalmanModel {
    fn default() -> Self {
        Self::from_diagonals(
            [1e-4, 1e-4, 1e-5],
            [0.04, 0.04, 2.0f64.to_radians().powi(2)],
        )
        .expect("default noise is positive")
    }
}

impl KalmanModel {
    pub fn new(q: Matrix3<f64>, r: Matrix3<f64>) -> Result<Self, FilterError> {
        let psd = |m: &Matrix3<f64>, strict: bool| {
            (m - m.transpose()).abs().max() <= 1e-12
                && m.symmetric_eigenvalues()
                    .iter()
                    .all(|&l| if strict { l > 0.0 } else { l >= 0.0 })
        };
        if !psd(&q, false) {
            return Err(FilterError::Config("Q must be symmetric positive semidefinite".into()));
        }
        if !psd(&r, true) {
            return Err(FilterError::Config("R must be symmetric positive definite".into()));
        }
        Ok(Self { q, r })
    }

    pub fn from_diagonals(q: [f64; 3], r: [f64; 3]) -> Result<Self, FilterError> {
        Self::new(
            Matrix3::from_diagonal(&Vector3::from(q)),
            Matrix3::from_diagonal(&Vector3::from(r)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterParams {
    /// Probability of receiving no correct measurement in a step.
    pub p_nm: f64,
    /// Gate radius in Mahalanobis units; `f64::INFINITY` disables gating.
    pub nu: f64,
    /// Cumulative-cost threshold for promoting an exploring tree.
    pub tau: f64,
    /// Sliding window length in steps.
    pub window: usize,
    /// Leaves kept per tree after pruning.
    pub max_branches: usize,
    /// Steps without a measurement on the best lineage before the main
    /// tree is abandoned.
    pub max_no_meas_steps: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            p_nm: 0.001,
            nu: 3.0,
            tau: 8.0,
            window: 8,
            max_branches: 200,
            max_no_meas_steps: 10,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: &str| Err(FilterError::Config(m.into()));
        if !(self.p_nm > 0.0 && self.p_nm < 1.0) {
            return bad("p_nm must lie in (0, 1)");
        }
        if !(self.nu > 0.0) || !(self.tau > 0.0) {
            return bad("nu and tau must be positive");
        }
        if self.window == 0 || self.max_branches == 0 {
            return bad("window and max_branches must be at least 1");
        }
        Ok(())
    }

    /// Measurements a promoted path must contain: `ceil(window / 2)`.
    pub fn min_accept_measurements(&self) -> usize {
        self.window.div_ceil(2)
    }
}

/// Cost of a step that selects no measurement. Independent of the belief.
pub fn no_measurement_cost(p_nm: f64) -> f64 {
    -p_nm.ln() - 0.5 * MEAS_DIM as f64 * TAU.ln()
}

struct Innovation {
    residual: Vector3<f64>,
    chol: Cholesky<f64, nalgebra::U3>,
}

impl Innovation {
    fn new(belief: &Gaussian3, z: &Pose2, model: &KalmanModel) -> Result<Self, FilterError> {
        let mut residual = z.to_vector() - belief.mean;
        residual[2] = normalize_angle(residual[2]);
        let s = symmetrize(&(belief.cov + model.r));
        let chol = Cholesky::new(s).ok_or(FilterError::SingularInnovation)?;
        Ok(Self { residual, chol })
    }

    fn mahalanobis_sq(&self) -> f64 {
        let w = self.chol.l().solve_lower_triangular(&self.residual).expect("L is invertible");
        w.norm_squared()
    }

    fn log_det(&self) -> f64 {
        2.0 * self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Step cost of selecting `z` (or nothing) for a node whose predicted
/// belief is `belief`.
pub fn node_cost(
    belief: &Gaussian3,
    z: Option<&AlignmentMeasurement>,
    model: &KalmanModel,
    p_nm: f64,
) -> Result<f64, FilterError> {
    match z {
        None => Ok(no_measurement_cost(p_nm)),
        Some(z) => {
            let inn = Innovation::new(belief, &z.pose, model)?;
            Ok(0.5 * (inn.mahalanobis_sq() + inn.log_det()))
        }
    }
}

pub fn kalman_predict(belief: &Gaussian3, model: &KalmanModel) -> Gaussian3 {
    Gaussian3 {
        mean: belief.mean,
        cov: symmetrize(&(belief.cov + model.q)),
    }
}

/// Standard update with the heading innovation wrapped; the covariance is
/// formed in Joseph form to stay symmetric positive definite.
pub fn kalman_update(
    belief: &Gaussian3,
    z: &AlignmentMeasurement,
    model: &KalmanModel,
) -> Result<Gaussian3, FilterError> {
    let inn = Innovation::new(belief, &z.pose, model)?;
    // K = P S^-1, S symmetric
    let gain = inn.chol.solve(&belief.cov).transpose();
    let mut mean = belief.mean + gain * inn.residual;
    mean[2] = normalize_angle(mean[2]);
    let i_k = Matrix3::identity() - gain;
    let cov = i_k * belief.cov * i_k.transpose() + gain * model.r * gain.transpose();
    Ok(Gaussian3 {
        mean,
        cov: symmetrize(&cov),
    })
}

/// Squared Mahalanobis innovation within `nu^2`, boundary inclusive.
pub fn gate(
    belief: &Gaussian3,
    z: &AlignmentMeasurement,
    model: &KalmanModel,
    params: &FilterParams,
) -> Result<bool, FilterError> {
    let inn = Innovation::new(belief, &z.pose, model)?;
    Ok(inn.mahalanobis_sq() <= params.nu * params.nu)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeKind {
    Exploring,
    Main,
}

#[derive(Debug, Clone)]
pub struct HypothesisNode {
    pub belief: Gaussian3,
    pub step_cost: f64,
    pub cumulative_cost: f64,
    pub parent: Option<usize>,
    /// Absolute step depth; the original root has depth 0.
    pub depth: usize,
    pub measurement: Option<Arc<AlignmentMeasurement>>,
    /// Measurements selected on the path from the original root.
    pub measurement_count: usize,
    /// Consecutive no-measurement steps ending at this node.
    pub steps_since_measurement: usize,
}

/// Window-bounded tree of measurement-selection hypotheses stored as an
/// arena. Node indices follow creation order, which breaks cost ties.
#[derive(Debug, Clone)]
pub struct HypothesisTree {
    nodes: Vec<HypothesisNode>,
    root: usize,
    leaves: Vec<usize>,
    pub kind: TreeKind,
    pub created_at: u64,
}

impl HypothesisTree {
    pub fn new(root_belief: Gaussian3, kind: TreeKind, created_at: u64) -> Self {
        let root = HypothesisNode {
            belief: root_belief,
            step_cost: 0.0,
            cumulative_cost: 0.0,
            parent: None,
            depth: 0,
            measurement: None,
            measurement_count: 0,
            steps_since_measurement: 0,
        };
        Self {
            nodes: vec![root],
            root: 0,
            leaves: vec![0],
            kind,
            created_at,
        }
    }

    /// Tree rooted at a measurement, with the measurement noise as its
    /// covariance.
    pub fn seeded(z: &AlignmentMeasurement, model: &KalmanModel, created_at: u64) -> Self {
        let belief = Gaussian3 {
            mean: z.pose.to_vector(),
            cov: model.r,
        };
        Self::new(belief, TreeKind::Exploring, created_at)
    }

    pub fn node(&self, idx: usize) -> &HypothesisNode {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[HypothesisNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    /// Steps between the root and the leaves.
    pub fn span(&self) -> usize {
        self.nodes[self.leaves[0]].depth - self.nodes[self.root].depth
    }

    /// Leaf with the lowest cumulative cost; ties go to the earliest created.
    pub fn best_leaf(&self) -> usize {
        let mut best = self.leaves[0];
        for &l in &self.leaves[1..] {
            if self.nodes[l].cumulative_cost < self.nodes[best].cumulative_cost {
                best = l;
            }
        }
        best
    }

    /// Node indices from the root down to `leaf`.
    pub fn path(&self, leaf: usize) -> Vec<usize> {
        let mut path = vec![leaf];
        let mut cur = leaf;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn extend(
        &mut self,
        measurements: &[Arc<AlignmentMeasurement>],
        model: &KalmanModel,
        params: &FilterParams,
    ) -> Result<(), FilterError> {
        let nm_cost = no_measurement_cost(params.p_nm);
        let mut new_leaves = Vec::with_capacity(self.leaves.len() * (1 + measurements.len()));
        for li in 0..self.leaves.len() {
            let leaf = self.leaves[li];
            let parent = &self.nodes[leaf];
            let predicted = kalman_predict(&parent.belief, model);
            let (base, depth, count, since) = (
                parent.cumulative_cost,
                parent.depth + 1,
                parent.measurement_count,
                parent.steps_since_measurement,
            );
            let mut children = Vec::with_capacity(1 + measurements.len());
            children.push(HypothesisNode {
                belief: predicted.clone(),
                step_cost: nm_cost,
                cumulative_cost: base + nm_cost,
                parent: Some(leaf),
                depth,
                measurement: None,
                measurement_count: count,
                steps_since_measurement: since + 1,
            });
            for z in measurements {
                let inn = Innovation::new(&predicted, &z.pose, model)?;
                let maha = inn.mahalanobis_sq();
                if maha > params.nu * params.nu {
                    continue;
                }
                let cost = 0.5 * (maha + inn.log_det());
                children.push(HypothesisNode {
                    belief: kalman_update(&predicted, z, model)?,
                    step_cost: cost,
                    cumulative_cost: base + cost,
                    parent: Some(leaf),
                    depth,
                    measurement: Some(Arc::clone(z)),
                    measurement_count: count + 1,
                    steps_since_measurement: 0,
                });
            }
            for child in children {
                new_leaves.push(self.nodes.len());
                self.nodes.push(child);
            }
        }
        self.leaves = new_leaves;
        Ok(())
    }

    /// Sliding-window collapse followed by max-branches pruning.
    pub fn prune(&mut self, params: &FilterParams) {
        let leaf_depth = self.nodes[self.leaves[0]].depth;
        if leaf_depth - self.nodes[self.root].depth > params.window {
            let target = leaf_depth - params.window;
            let new_root = self.ancestor_at(self.best_leaf(), target);
            self.root = new_root;
            let leaves = std::mem::take(&mut self.leaves);
            self.leaves = leaves
                .into_iter()
                .filter(|&l| self.ancestor_at(l, target) == new_root)
                .collect();
        }
        if self.leaves.len() > params.max_branches {
            let mut ranked = self.leaves.clone();
            ranked.sort_by(|&a, &b| {
                self.nodes[a]
                    .cumulative_cost
                    .total_cmp(&self.nodes[b].cumulative_cost)
                    .then(a.cmp(&b))
            });
            ranked.truncate(params.max_branches);
            ranked.sort_unstable();
            self.leaves = ranked;
        }
        self.compact();
    }

    fn ancestor_at(&self, mut idx: usize, depth: usize) -> usize {
        while self.nodes[idx].depth > depth {
            idx = self.nodes[idx].parent.expect("ancestor above root");
        }
        idx
    }

    /// Drops nodes that no surviving leaf descends from and renumbers the
    /// rest in creation order.
    fn compact(&mut self) {
        let mut live = vec![false; self.nodes.len()];
        live[self.root] = true;
        for &l in &self.leaves {
            let mut cur = l;
            while !live[cur] {
                live[cur] = true;
                cur = self.nodes[cur].parent.expect("leaf detached from root");
            }
        }
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut kept = Vec::with_capacity(live.iter().filter(|&&b| b).count());
        for (old, node) in std::mem::take(&mut self.nodes).into_iter().enumerate() {
            if live[old] {
                remap[old] = kept.len();
                kept.push(node);
            }
        }
        self.root = remap[self.root];
        for node in &mut kept {
            node.parent = node.parent.map(|p| remap[p]).filter(|&p| p != usize::MAX);
        }
        kept[self.root].parent = None;
        for l in &mut self.leaves {
            *l = remap[*l];
        }
        self.nodes = kept;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exploring,
    Locked,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Exploring => "exploring",
            Mode::Locked => "locked",
        }
    }
}

/// Per-neighbor alignment filter. Call [`TcaffFilter::step`] once per
/// received map with the measurements extracted from it.
#[derive(Debug, Clone)]
pub struct TcaffFilter {
    model: KalmanModel,
    params: FilterParams,
    mode: Mode,
    exploring: Vec<HypothesisTree>,
    main: Option<HypothesisTree>,
    buffer: VecDeque<Vec<Arc<AlignmentMeasurement>>>,
    estimate: Option<Gaussian3>,
    steps: u64,
}

impl TcaffFilter {
    pub fn new(model: KalmanModel, params: FilterParams) -> Result<Self, FilterError> {
        params.validate()?;
        Ok(Self {
            model,
            params,
            mode: Mode::Exploring,
            exploring: Vec::new(),
            main: None,
            buffer: VecDeque::with_capacity(params.window + 1),
            estimate: None,
            steps: 0,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn estimate(&self) -> Option<&Gaussian3> {
        self.estimate.as_ref()
    }

    pub fn exploring_trees(&self) -> &[HypothesisTree] {
        &self.exploring
    }

    pub fn main_tree(&self) -> Option<&HypothesisTree> {
        self.main.as_ref()
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn model(&self) -> &KalmanModel {
        &self.model
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, measurements: &[AlignmentMeasurement]) -> Result<(), FilterError> {
        let k = self.steps;
        self.steps += 1;
        let zs: Vec<Arc<AlignmentMeasurement>> =
            measurements.iter().cloned().map(Arc::new).collect();
        self.buffer.push_back(zs.clone());
        while self.buffer.len() > self.params.window + 1 {
            self.buffer.pop_front();
        }

        match self.mode {
            Mode::Locked => {
                let main = self.main.as_mut().expect("locked without a main tree");
                main.extend(&zs, &self.model, &self.params)?;
                main.prune(&self.params);
                let best = main.node(main.best_leaf());
                if best.steps_since_measurement >= self.params.max_no_meas_steps {
                    self.mode = Mode::Exploring;
                    self.main = None;
                    self.estimate = None;
                    self.reseed_from_buffer(k)?;
                    self.promote_if_ready();
                } else {
                    self.estimate = Some(best.belief.clone());
                }
            }
            Mode::Exploring => {
                for tree in &mut self.exploring {
                    tree.extend(&zs, &self.model, &self.params)?;
                    tree.prune(&self.params);
                }
                for z in &zs {
                    self.exploring.push(HypothesisTree::seeded(z, &self.model, k));
                }
                self.promote_if_ready();
            }
        }
        Ok(())
    }

    /// Rebuilds exploring trees from the buffered measurement sets, as if
    /// the filter had been exploring through the whole window.
    fn reseed_from_buffer(&mut self, k: u64) -> Result<(), FilterError> {
        self.exploring.clear();
        let sets: Vec<_> = self.buffer.iter().cloned().collect();
        let last = sets.len() - 1;
        for (offset, seeds) in sets.iter().enumerate() {
            for z in seeds {
                let created = k - (last - offset) as u64;
                let mut tree = HypothesisTree::seeded(z, &self.model, created);
                for later in &sets[offset + 1..] {
                    tree.extend(later, &self.model, &self.params)?;
                    tree.prune(&self.params);
                }
                self.exploring.push(tree);
            }
        }
        Ok(())
    }

    /// Evaluates exploring trees that span a full window. The cheapest one
    /// whose best leaf beats `tau` with enough selected measurements becomes
    /// the main tree; the other full-window trees are discarded.
    fn promote_if_ready(&mut self) {
        let window = self.params.window;
        let min_meas = self.params.min_accept_measurements();
        let mut winner: Option<(usize, f64)> = None;
        for (t, tree) in self.exploring.iter().enumerate() {
            if tree.span() < window {
                continue;
            }
            let leaf = tree.node(tree.best_leaf());
            if leaf.cumulative_cost < self.params.tau
                && leaf.measurement_count >= min_meas
                && winner.is_none_or(|(_, c)| leaf.cumulative_cost < c)
            {
                winner = Some((t, leaf.cumulative_cost));
            }
        }
        match winner {
            Some((t, _)) => {
                let mut main = self.exploring.swap_remove(t);
                main.kind = TreeKind::Main;
                self.estimate = Some(main.node(main.best_leaf()).belief.clone());
                self.main = Some(main);
                self.mode = Mode::Locked;
                self.exploring.clear();
            }
            None => self.exploring.retain(|tree| tree.span() < window),
        }
    }
}
