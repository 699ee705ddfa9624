//! Nonlinear least-squares optimization of a subgraph with Powell Dog-Leg
//! trust-region steps over the pose manifold.
//!
//! The minimized objective is the scaled form
//!
//! ```text
//! sum_{odometry} s * e^T O e  +  sum_{loops} e^T O e
//! ```
//!
//! with the subgraph's first vertex anchored to remove the gauge freedom.
//! The scale `s > 1` stiffens the odometry chain so the local trajectory
//! shape resists being bent toward a contested loop closure; stored edge
//! information matrices are never mutated.

use crate::graph::{Edge, PoseGraph};
use crate::se2::Pose2;
use crate::sparse::TripletBuilder;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("normal equations are not positive definite (gauge or data defect)")]
    LinearSolveFailure,
    #[error("non-finite residual encountered at the initial estimates")]
    NonFiniteResidual,
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
}

/// Which factorization backs the Gauss-Newton solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LinearSolverKind {
    /// Dense below [`SolverConfig::dense_limit`] variables, sparse above.
    #[default]
    Auto,
    Dense,
    Sparse,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Odometry information scale `s`.
    pub scale: f64,
    pub max_iterations: usize,
    /// Stop when an accepted step decreases the objective by less than this
    /// fraction.
    pub rel_decrease_tol: f64,
    /// Stop when the gradient infinity norm falls below this.
    pub abs_grad_tol: f64,
    pub trust_radius_init: f64,
    pub trust_radius_max: f64,
    pub linear_solver: LinearSolverKind,
    /// Variable count at or below which `Auto` picks the dense path.
    pub dense_limit: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            scale: 3.0,
            max_iterations: 25,
            rel_decrease_tol: 1e-6,
            abs_grad_tol: 1e-9,
            trust_radius_init: 1.0,
            trust_radius_max: 1e4,
            linear_solver: LinearSolverKind::Auto,
            dense_limit: 300,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.scale >= 1.0) {
            return Err(SolveError::BadConfig(format!(
                "scale must be >= 1, got {}",
                self.scale
            )));
        }
        for (name, v) in [
            ("rel_decrease_tol", self.rel_decrease_tol),
            ("abs_grad_tol", self.abs_grad_tol),
            ("trust_radius_init", self.trust_radius_init),
            ("trust_radius_max", self.trust_radius_max),
        ] {
            if !(v > 0.0) {
                return Err(SolveError::BadConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A contiguous vertex interval with its odometry chain, the loop closures
/// fully inside it, and any candidate edges not yet stored in the graph.
/// The anchor (gauge-fixed vertex) is the interval start.
#[derive(Clone, Debug)]
pub struct SubgraphProblem {
    start: usize,
    end: usize,
    loop_ids: Vec<usize>,
    extra_edges: Vec<Edge>,
}

impl SubgraphProblem {
    /// Problem over `[start, end]` using the odometry chain and the given
    /// stored loop edges. Endpoint containment is asserted.
    pub fn interval(graph: &PoseGraph, start: usize, end: usize, loop_ids: Vec<usize>) -> Self {
        assert!(start < end, "interval needs at least two vertices");
        assert!(end < graph.n_poses(), "interval end out of range");
        for &id in &loop_ids {
            let e = graph.loop_edge(id);
            assert!(
                e.from >= start && e.to <= end,
                "loop edge {id} ({}, {}) escapes interval [{start}, {end}]",
                e.from,
                e.to
            );
        }
        SubgraphProblem {
            start,
            end,
            loop_ids,
            extra_edges: Vec::new(),
        }
    }

    /// The whole graph as one problem: used for batch optimization of a
    /// dataset (reference trajectories, oracle checks).
    pub fn full_batch(graph: &PoseGraph) -> Self {
        SubgraphProblem {
            start: 0,
            end: graph.n_poses() - 1,
            loop_ids: (0..graph.loop_edges().len()).collect(),
            extra_edges: Vec::new(),
        }
    }

    /// Adds an edge that is not stored in the graph (the candidate under
    /// test). Endpoints must lie inside the interval.
    pub fn push_extra_edge(&mut self, edge: Edge) {
        assert!(edge.from >= self.start && edge.to <= self.end);
        self.extra_edges.push(edge);
    }

    pub fn anchor(&self) -> usize {
        self.start
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn vertex_count(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn loop_ids(&self) -> &[usize] {
        &self.loop_ids
    }

    pub fn extra_edges(&self) -> &[Edge] {
        &self.extra_edges
    }

    /// Chain indices covered by the interval.
    pub fn odom_ids(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// All edges of the problem with their odometry flag, in deterministic
    /// order: chain, stored loops, extras.
    pub fn edges<'g>(&'g self, graph: &'g PoseGraph) -> impl Iterator<Item = (&'g Edge, bool)> {
        let odom = self.odom_ids().map(|i| (&graph.odom_edges()[i], true));
        let loops = self
            .loop_ids
            .iter()
            .map(|&i| (graph.loop_edge(i), false));
        let extras = self.extra_edges.iter().map(|e| (e, false));
        odom.chain(loops).chain(extras)
    }
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub converged: bool,
    pub final_step_norm: f64,
    pub final_grad_norm: f64,
}

/// Residual and Jacobians of one edge with respect to body-frame
/// perturbations of its endpoints.
///
/// With `e = vec(inverse(z) . inverse(x_a) . x_b)` and the retraction
/// `x ⊞ d = x . Pose2(d)`, the closed forms are
///
/// ```text
/// d e / d d_b = [ R(e_theta)  0 ]        d e / d d_a = [ -R(z_theta)^T  -R(z_theta)^T S t_h ]
///               [ 0           1 ]                      [  0             -1                  ]
/// ```
///
/// where `t_h` is the translation of `inverse(x_a) . x_b` and `S` the 2D
/// skew generator.
pub fn linearize_edge(
    graph: &PoseGraph,
    edge: &Edge,
) -> (Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let xa = graph.pose(edge.from);
    let xb = graph.pose(edge.to);
    let h = xa.relative(&xb);
    let e = h.boxminus(&edge.z);

    let (se, ce) = e.dtheta.sin_cos();
    let j_to = Matrix3::new(ce, -se, 0.0, se, ce, 0.0, 0.0, 0.0, 1.0);

    let (sz, cz) = edge.z.theta().sin_cos();
    // -R(z)^T and -R(z)^T * S * t_h with S = [[0,-1],[1,0]].
    let s_th = Vector3::new(-h.y(), h.x(), 0.0);
    let j_from = Matrix3::new(
        -cz,
        -sz,
        -(cz * s_th.x + sz * s_th.y),
        sz,
        -cz,
        -(-sz * s_th.x + cz * s_th.y),
        0.0,
        0.0,
        -1.0,
    );

    (e.as_vector(), j_from, j_to)
}

/// The scaled objective value at the current estimates.
pub fn objective(problem: &SubgraphProblem, graph: &PoseGraph, config: &SolverConfig) -> f64 {
    problem
        .edges(graph)
        .map(|(e, is_odom)| {
            let chi2 = graph.edge_chi2(e);
            if is_odom {
                config.scale * chi2
            } else {
                chi2
            }
        })
        .sum()
}

enum Normal {
    Dense(DMatrix<f64>),
    Sparse(crate::sparse::CscMatrix),
}

impl Normal {
    fn solve_neg(&self, g: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            Normal::Dense(h) => h.clone().cholesky().map(|c| c.solve(&(-g))),
            Normal::Sparse(h) => {
                let b: Vec<f64> = g.iter().map(|v| -v).collect();
                h.cholesky().map(|f| DVector::from_vec(f.solve(&b)))
            }
        }
    }

    fn mul(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Normal::Dense(h) => h * v,
            Normal::Sparse(h) => DVector::from_vec(h.mul_vec_sym(v.as_slice())),
        }
    }
}

struct Linearization {
    normal: Normal,
    gradient: DVector<f64>,
}

/// Gauss-Newton normal equations of the half objective at the current
/// estimates. Variable `k` is vertex `start + 1 + k/3`, component `k % 3`.
fn assemble(
    problem: &SubgraphProblem,
    graph: &PoseGraph,
    config: &SolverConfig,
    use_dense: bool,
) -> Linearization {
    let start = problem.start;
    let n_vars = 3 * (problem.end - problem.start);
    let var_of = |vertex: usize| -> Option<usize> {
        (vertex > start).then(|| 3 * (vertex - start - 1))
    };

    let mut gradient = DVector::zeros(n_vars);
    let mut dense = use_dense.then(|| DMatrix::zeros(n_vars, n_vars));
    let mut triplets = (!use_dense).then(|| TripletBuilder::new(n_vars));

    let mut add_block = |r: usize, c: usize, block: &Matrix3<f64>| {
        if let Some(h) = dense.as_mut() {
            for i in 0..3 {
                for j in 0..3 {
                    h[(r + i, c + j)] += block[(i, j)];
                    if r != c {
                        h[(c + j, r + i)] += block[(i, j)];
                    }
                }
            }
        }
        if let Some(t) = triplets.as_mut() {
            for i in 0..3 {
                for j in 0..3 {
                    // Diagonal blocks contribute their lower half only; the
                    // builder mirrors symmetric positions.
                    if r != c || i >= j {
                        t.add(r + i, c + j, block[(i, j)]);
                    }
                }
            }
        }
    };

    for (edge, is_odom) in problem.edges(graph) {
        let (e, j_from, j_to) = linearize_edge(graph, edge);
        let w = if is_odom { config.scale } else { 1.0 };
        let omega = edge.info.matrix() * w;
        let va = var_of(edge.from);
        let vb = var_of(edge.to);

        if let Some(va) = va {
            let jt_w = j_from.transpose() * omega;
            add_block(va, va, &(jt_w * j_from));
            let gseg = jt_w * e;
            for i in 0..3 {
                gradient[va + i] += gseg[i];
            }
        }
        if let Some(vb) = vb {
            let jt_w = j_to.transpose() * omega;
            add_block(vb, vb, &(jt_w * j_to));
            let gseg = jt_w * e;
            for i in 0..3 {
                gradient[vb + i] += gseg[i];
            }
        }
        if let (Some(va), Some(vb)) = (va, vb) {
            // One off-diagonal block, placed in the lower triangle.
            let block = j_to.transpose() * omega * j_from;
            if vb > va {
                add_block(vb, va, &block);
            } else {
                add_block(va, vb, &block.transpose());
            }
        }
    }

    let normal = match (dense, triplets) {
        (Some(h), _) => Normal::Dense(h),
        (_, Some(t)) => Normal::Sparse(t.build()),
        _ => unreachable!(),
    };
    Linearization { normal, gradient }
}

fn half_cost(problem: &SubgraphProblem, graph: &PoseGraph, config: &SolverConfig) -> f64 {
    0.5 * objective(problem, graph, config)
}

fn apply_step(graph: &mut PoseGraph, problem: &SubgraphProblem, h: &DVector<f64>) {
    for (k, vertex) in (problem.start + 1..=problem.end).enumerate() {
        let delta = Vector3::new(h[3 * k], h[3 * k + 1], h[3 * k + 2]);
        let updated = graph.pose(vertex).boxplus(&delta);
        graph.set_pose(vertex, updated);
    }
}

/// Minimizes the scaled objective over the problem's non-anchor vertices,
/// updating the graph estimates in place.
///
/// The anchor pose is never touched. Running out of iterations is reported
/// via `converged = false`, not as an error; the consensus gate judges the
/// result either way. On `Err` the interval estimates may be mid-update —
/// callers that need rollback snapshot beforehand.
pub fn solve(
    problem: &SubgraphProblem,
    graph: &mut PoseGraph,
    config: &SolverConfig,
) -> Result<SolveReport, SolveError> {
    config.validate()?;
    let n_vars = 3 * (problem.end - problem.start);
    let use_dense = match config.linear_solver {
        LinearSolverKind::Dense => true,
        LinearSolverKind::Sparse => false,
        LinearSolverKind::Auto => n_vars <= config.dense_limit,
    };

    let mut cost = half_cost(problem, graph, config);
    if !cost.is_finite() {
        return Err(SolveError::NonFiniteResidual);
    }
    let initial_objective = 2.0 * cost;
    let mut report = SolveReport {
        iterations: 0,
        initial_objective,
        final_objective: initial_objective,
        converged: false,
        final_step_norm: 0.0,
        final_grad_norm: 0.0,
    };

    let mut radius = config.trust_radius_init;
    let mut saved: Vec<Pose2> = Vec::with_capacity(problem.end - problem.start);

    'outer: while report.iterations < config.max_iterations {
        let lin = assemble(problem, graph, config, use_dense);
        let grad_inf = lin.gradient.amax();
        report.final_grad_norm = grad_inf;
        if grad_inf <= config.abs_grad_tol {
            report.converged = true;
            break;
        }

        let gn = lin
            .normal
            .solve_neg(&lin.gradient)
            .ok_or(SolveError::LinearSolveFailure)?;
        let gn_norm = gn.norm();
        let g_sq = lin.gradient.norm_squared();
        let g_h_g = lin.gradient.dot(&lin.normal.mul(&lin.gradient));
        let alpha = if g_h_g > 0.0 { g_sq / g_h_g } else { 0.0 };
        let sd_norm = alpha * g_sq.sqrt();

        loop {
            report.iterations += 1;

            // Dog-leg step for the current radius.
            let h = if gn_norm <= radius {
                gn.clone()
            } else if sd_norm >= radius {
                &lin.gradient * (-radius / g_sq.sqrt())
            } else {
                // Blend point where |sd + beta (gn - sd)| = radius.
                let sd = &lin.gradient * (-alpha);
                let d = &gn - &sd;
                let a = d.norm_squared();
                let b = 2.0 * sd.dot(&d);
                let c = sd.norm_squared() - radius * radius;
                let beta = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
                sd + d * beta
            };
            let step_norm = h.norm();
            report.final_step_norm = step_norm;
            if step_norm < 1e-15 {
                report.converged = true;
                break 'outer;
            }

            let predicted = -lin.gradient.dot(&h) - 0.5 * h.dot(&lin.normal.mul(&h));

            saved.clear();
            saved.extend((problem.start + 1..=problem.end).map(|v| graph.pose(v)));
            apply_step(graph, problem, &h);
            let new_cost = half_cost(problem, graph, config);

            let decrease = cost - new_cost;
            let rho = if !new_cost.is_finite() {
                -1.0
            } else if predicted > 0.0 {
                decrease / predicted
            } else if decrease > 0.0 {
                1.0
            } else {
                -1.0
            };

            let accepted = rho > 0.0;
            if !accepted {
                for (k, vertex) in (problem.start + 1..=problem.end).enumerate() {
                    graph.set_pose(vertex, saved[k]);
                }
            }

            if rho < 0.25 {
                radius *= 0.5;
            } else if rho > 0.75 {
                radius = (radius * 2.0).min(config.trust_radius_max);
            }

            if accepted {
                let stalled = decrease <= config.rel_decrease_tol * cost;
                cost = new_cost;
                if stalled {
                    report.converged = true;
                    break 'outer;
                }
                continue 'outer; // re-linearize
            }
            if radius < 1e-14 {
                break 'outer; // trust region collapsed without progress
            }
            if report.iterations >= config.max_iterations {
                break 'outer;
            }
        }
    }

    report.final_objective = 2.0 * cost;
    Ok(report)
}
