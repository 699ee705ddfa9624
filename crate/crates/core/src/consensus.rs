//! Incremental consensus gating of loop closures.
//!
//! Odometry measurements extend the trajectory; each incoming loop closure
//! is tested on the smallest independent subgraph it influences. The
//! subgraph is optimized under the scaled objective and the closure is
//! accepted only when every edge of the solved subgraph, previously
//! accepted closures included, stays below the chi-square gate; each past
//! acceptance thereby holds veto power over new candidates. Rejected
//! closures are discarded and the touched estimates are restored bit for
//! bit. Accepted solutions are propagated rigidly to the rest of the
//! trajectory.

use crate::graph::{Edge, GraphError, PoseGraph};
use crate::se2::{InfoMat3, Pose2};
use crate::solver::{self, SolveError, SolverConfig, SubgraphProblem};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

/// The `alpha` quantile of the chi-square distribution with `dof` degrees
/// of freedom. Domain violations panic.
pub fn chi2_quantile(alpha: f64, dof: usize) -> f64 {
    assert!(
        alpha > 0.0 && alpha < 1.0,
        "chi2_quantile: alpha must be in (0, 1), got {alpha}"
    );
    assert!(dof >= 1, "chi2_quantile: dof must be >= 1");
    ChiSquared::new(dof as f64)
        .expect("valid dof")
        .inverse_cdf(alpha)
}

#[derive(Clone, Debug)]
pub struct ConsensusConfig {
    /// Confidence of the acceptance gate.
    pub alpha: f64,
    /// Degrees of freedom per edge; 3 for planar problems.
    pub dof: usize,
    pub solver: SolverConfig,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            alpha: 0.95,
            dof: 3,
            solver: SolverConfig::default(),
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(EngineError::BadConfig(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.dof < 1 {
            return Err(EngineError::BadConfig("dof must be >= 1".into()));
        }
        self.solver.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("loop closure references future vertex {id}; the graph has {len} vertices")]
    FutureVertex { id: usize, len: usize },
    #[error("measurement endpoints ({from}, {to}) are invalid")]
    BadEndpoints { from: usize, to: usize },
    #[error("odometry must extend the chain: expected ({expected}, {next}), got ({from}, {to})", next = expected + 1)]
    NonSequentialOdometry {
        expected: usize,
        from: usize,
        to: usize,
    },
    #[error("invalid engine configuration: {0}")]
    BadConfig(String),
    #[error("decision log line {line}: {reason}")]
    BadDecisionLog { line: usize, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Per-loop-closure verdict; one line of the decision log.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionRecord {
    /// Caller-assigned ordinal of the measurement, matching the label
    /// manifest of the input stream.
    pub loop_id: usize,
    pub accepted: bool,
    pub subgraph_vertices: usize,
    pub worst_chi2: f64,
    pub threshold: f64,
    pub seconds: f64,
}

/// Identifies the worst edge found by the gate, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeRef {
    Odometry(usize),
    Loop(usize),
    Candidate(usize),
}

#[derive(Clone, Debug)]
pub struct GateOutcome {
    pub pass: bool,
    pub worst_edge: Option<EdgeRef>,
    pub worst_chi2: f64,
}

/// Grows the candidate interval `[i, j]` leftward until no accepted edge
/// crosses into it: while an accepted `(k, g)` with `k < a` and
/// `a < g < j` exists, the interval extends to the smallest such `k`,
/// absorbing the crossing edge and the odometry between. The closure of
/// this process is unique, so taking the minimum each round is
/// order-independent.
pub fn find_independent_subgraph(graph: &PoseGraph, i: usize, j: usize) -> SubgraphProblem {
    assert!(i < j && j < graph.n_poses());
    let mut a = i;
    loop {
        let next = graph
            .consensus()
            .iter()
            .map(|&id| graph.loop_edge(id))
            .filter(|e| e.from < a && e.to > a && e.to < j)
            .map(|e| e.from)
            .min();
        match next {
            Some(k) => a = k,
            None => break,
        }
    }
    let loop_ids: Vec<usize> = graph
        .consensus()
        .iter()
        .copied()
        .filter(|&id| {
            let e = graph.loop_edge(id);
            e.from >= a && e.to <= j
        })
        .collect();
    SubgraphProblem::interval(graph, a, j, loop_ids)
}

/// Checks every edge of the solved problem, odometry and loops alike,
/// against the gate with unscaled information. Strict inequality: an edge
/// exactly at the threshold fails.
pub fn consensus_test(
    problem: &SubgraphProblem,
    graph: &PoseGraph,
    config: &ConsensusConfig,
) -> GateOutcome {
    let threshold = chi2_quantile(config.alpha, config.dof);
    let mut worst_chi2 = f64::NEG_INFINITY;
    let mut worst_edge = None;

    let mut consider = |edge_ref: EdgeRef, chi2: f64| {
        if chi2 > worst_chi2 {
            worst_chi2 = chi2;
            worst_edge = Some(edge_ref);
        }
    };
    for id in problem.odom_ids() {
        consider(EdgeRef::Odometry(id), graph.edge_chi2(&graph.odom_edges()[id]));
    }
    for &id in problem.loop_ids() {
        consider(EdgeRef::Loop(id), graph.edge_chi2(graph.loop_edge(id)));
    }
    for (k, e) in problem.extra_edges().iter().enumerate() {
        consider(EdgeRef::Candidate(k), graph.edge_chi2(e));
    }

    GateOutcome {
        pass: worst_chi2 < threshold,
        worst_edge,
        worst_chi2: worst_chi2.max(0.0),
    }
}

/// Rigidly carries a boundary-vertex update to everything after it: each
/// vertex `k > boundary` becomes `delta . x_k` with
/// `delta = new . inverse(old)`, preserving all relative poses among the
/// moved vertices and between the boundary and each of them.
pub fn propagate(graph: &mut PoseGraph, boundary: usize, old_pose: &Pose2, new_pose: &Pose2) {
    let delta = new_pose.compose(&old_pose.inverse());
    for v in boundary + 1..graph.n_poses() {
        let moved = delta.compose(&graph.pose(v));
        graph.set_pose(v, moved);
    }
}

/// Outcome of dispatching one measurement.
#[derive(Clone, Debug)]
pub enum ProcessOutcome {
    /// An odometry measurement created this vertex.
    NewVertex(usize),
    /// A loop closure was gated.
    Decision(DecisionRecord),
}

#[cfg(not(target_arch = "wasm32"))]
mod stopwatch {
    pub struct Stopwatch(std::time::Instant);
    impl Stopwatch {
        pub fn start() -> Self {
            Stopwatch(std::time::Instant::now())
        }
        pub fn seconds(&self) -> f64 {
            self.0.elapsed().as_secs_f64()
        }
    }
}

#[cfg(target_arch = "wasm32")]
mod stopwatch {
    // No monotonic clock on bare wasm; decisions report zero seconds.
    pub struct Stopwatch;
    impl Stopwatch {
        pub fn start() -> Self {
            Stopwatch
        }
        pub fn seconds(&self) -> f64 {
            0.0
        }
    }
}

use stopwatch::Stopwatch;

/// Owns a pose graph and feeds measurements through the gate. Strictly
/// serial: the acceptance order defines the result.
pub struct Engine {
    graph: PoseGraph,
    config: ConsensusConfig,
    threshold: f64,
}

impl Engine {
    pub fn new(origin: Pose2, config: ConsensusConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let threshold = chi2_quantile(config.alpha, config.dof);
        Ok(Engine {
            graph: PoseGraph::with_origin(origin),
            config,
            threshold,
        })
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.graph
    }

    pub fn into_graph(self) -> PoseGraph {
        self.graph
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.config
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Dispatches one measurement. Consecutive endpoints are odometry, no
    /// matter how the front-end labeled them; anything else is gated as a
    /// loop closure. `stream_id` tags the resulting decision record and has
    /// no influence on the outcome.
    pub fn process_measurement(
        &mut self,
        stream_id: usize,
        from: usize,
        to: usize,
        z: Pose2,
        info: InfoMat3,
    ) -> Result<ProcessOutcome, EngineError> {
        if from == to {
            return Err(EngineError::BadEndpoints { from, to });
        }
        // Canonical orientation first, so a reversed chain step still
        // counts as odometry.
        let (from, to, z, info) = if from < to {
            (from, to, z, info)
        } else {
            let e = Edge::new(from, to, z, info).canonicalized();
            (e.from, e.to, e.z, e.info)
        };
        if to == from + 1 {
            self.process_odometry(from, z, info).map(ProcessOutcome::NewVertex)
        } else {
            self.process_loop(stream_id, from, to, z, info)
                .map(ProcessOutcome::Decision)
        }
    }

    fn process_odometry(
        &mut self,
        from: usize,
        z: Pose2,
        info: InfoMat3,
    ) -> Result<usize, EngineError> {
        let expected = self.graph.n_poses() - 1;
        if from != expected {
            return Err(EngineError::NonSequentialOdometry {
                expected,
                from,
                to: from + 1,
            });
        }
        Ok(self.graph.append_odometry(z, info)?)
    }

    fn process_loop(
        &mut self,
        stream_id: usize,
        from: usize,
        to: usize,
        z: Pose2,
        info: InfoMat3,
    ) -> Result<DecisionRecord, EngineError> {
        let n = self.graph.n_poses();
        if to >= n {
            return Err(EngineError::FutureVertex { id: to, len: n });
        }
        if !info.is_positive_definite() {
            return Err(EngineError::Graph(GraphError::NotPositiveDefinite));
        }

        let clock = Stopwatch::start();
        let mut problem = find_independent_subgraph(&self.graph, from, to);
        let candidate = Edge::new(from, to, z, info);
        problem.push_extra_edge(candidate.clone());

        let snapshot = self.graph.take_snapshot(problem.start()..=problem.end())?;
        let old_boundary = self.graph.pose(to);

        if let Err(e) = solver::solve(&problem, &mut self.graph, &self.config.solver) {
            // Leave the graph exactly as it was before surfacing the defect.
            self.graph.restore(&snapshot)?;
            return Err(e.into());
        }
        let gate = consensus_test(&problem, &self.graph, &self.config);

        if gate.pass {
            let loop_id = self.graph.add_loop(candidate)?;
            self.graph.mark_consensus(loop_id);
            let new_boundary = self.graph.pose(to);
            propagate(&mut self.graph, to, &old_boundary, &new_boundary);
        } else {
            self.graph.restore(&snapshot)?;
        }

        Ok(DecisionRecord {
            loop_id: stream_id,
            accepted: gate.pass,
            subgraph_vertices: problem.vertex_count(),
            worst_chi2: gate.worst_chi2,
            threshold: self.threshold,
            seconds: clock.seconds(),
        })
    }
}

/// Serializes decision records: one comma-separated line per loop closure
/// with `index, accepted, subgraph size, worst chi2, threshold, seconds`.
pub fn decision_log(records: &[DecisionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.loop_id,
            u8::from(r.accepted),
            r.subgraph_vertices,
            r.worst_chi2,
            r.threshold,
            r.seconds
        ));
    }
    out
}

pub fn parse_decision_log(text: &str) -> Result<Vec<DecisionRecord>, EngineError> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(EngineError::BadDecisionLog {
                line: idx + 1,
                reason: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let bad = |what: &str| EngineError::BadDecisionLog {
            line: idx + 1,
            reason: format!("could not parse {what}"),
        };
        records.push(DecisionRecord {
            loop_id: fields[0].parse().map_err(|_| bad("index"))?,
            accepted: match fields[1] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("accepted flag")),
            },
            subgraph_vertices: fields[2].parse().map_err(|_| bad("subgraph size"))?,
            worst_chi2: fields[3].parse().map_err(|_| bad("worst chi2"))?,
            threshold: fields[4].parse().map_err(|_| bad("threshold"))?,
            seconds: fields[5].parse().map_err(|_| bad("seconds"))?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EdgeKind;
    use std::f64::consts::PI;

    #[test]
    fn quantile_known_values() {
        assert!((chi2_quantile(0.5, 2) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((chi2_quantile(0.95, 3) - 7.8147).abs() < 1e-3);
        assert!((chi2_quantile(0.95, 1) - 3.8415).abs() < 1e-3);
    }

    #[test]
    #[should_panic(expected = "alpha")]
    fn quantile_domain_checked() {
        chi2_quantile(1.0, 3);
    }

    /// A chain of `n` unit steps east with identity information.
    fn chain(n: usize) -> PoseGraph {
        let mut g = PoseGraph::with_origin(Pose2::identity());
        for _ in 0..n {
            g.append_odometry(Pose2::new(1.0, 0.0, 0.0), InfoMat3::identity())
                .unwrap();
        }
        g
    }

    fn exact_loop(g: &PoseGraph, a: usize, b: usize) -> Edge {
        Edge::new(a, b, g.pose(a).relative(&g.pose(b)), InfoMat3::identity())
    }

    #[test]
    fn subgraph_without_consensus_is_the_candidate_interval() {
        let g = chain(8);
        let p = find_independent_subgraph(&g, 1, 5);
        assert_eq!((p.start(), p.end()), (1, 5));
        assert_eq!(p.anchor(), 1);
        assert!(p.loop_ids().is_empty());
        let p2 = find_independent_subgraph(&g, 3, 5);
        assert_eq!(p2.vertex_count(), 3);
    }

    #[test]
    fn cross_edges_fuse_subgraphs() {
        let mut g = chain(14);
        let id1 = g.add_loop(exact_loop(&g, 3, 8)).unwrap();
        let id2 = g.add_loop(exact_loop(&g, 6, 11)).unwrap();
        g.mark_consensus(id1);
        g.mark_consensus(id2);
        // Candidate (7, 13): edge (6, 11) crosses a = 7, pulling a to 6;
        // then (3, 8) crosses a = 6, pulling a to 3.
        let p = find_independent_subgraph(&g, 7, 13);
        assert_eq!((p.start(), p.end()), (3, 13));
        assert_eq!(p.loop_ids(), &[id1, id2]);
    }

    #[test]
    fn accepted_edge_ending_at_anchor_does_not_expand() {
        let mut g = chain(14);
        let id = g.add_loop(exact_loop(&g, 2, 5)).unwrap();
        g.mark_consensus(id);
        // Edge (2,5) touches the candidate interval only at its anchor; both
        // of its endpoints stay fixed during the solve, so no fusion.
        let p = find_independent_subgraph(&g, 5, 9);
        assert_eq!((p.start(), p.end()), (5, 9));
        assert!(p.loop_ids().is_empty());
    }

    #[test]
    fn gate_passes_zero_residuals_and_fails_at_threshold() {
        let mut g = chain(6);
        let id = g.add_loop(exact_loop(&g, 0, 4)).unwrap();
        g.mark_consensus(id);
        let p = find_independent_subgraph(&g, 0, 5);
        let cfg = ConsensusConfig::default();
        let out = consensus_test(&p, &g, &cfg);
        assert!(out.pass);
        assert!(out.worst_chi2 < 1e-20);

        // An edge whose chi2 equals the threshold exactly must fail the
        // strict inequality.
        let th = chi2_quantile(cfg.alpha, cfg.dof);
        let mut g2 = chain(4);
        let bad = Edge::new(
            0,
            2,
            g2.pose(0)
                .relative(&g2.pose(2))
                .compose(&Pose2::new(-1.0, 0.0, 0.0)),
            InfoMat3::diagonal(th, 1.0, 1.0),
        );
        let lid = g2.add_loop(bad).unwrap();
        g2.mark_consensus(lid);
        let p2 = SubgraphProblem::interval(&g2, 0, 2, vec![lid]);
        let chi = g2.edge_chi2(g2.loop_edge(lid));
        assert_eq!(chi, th, "constructed chi2 must hit the threshold exactly");
        let out2 = consensus_test(&p2, &g2, &cfg);
        assert!(!out2.pass);
        assert_eq!(out2.worst_edge, Some(EdgeRef::Loop(lid)));
    }

    #[test]
    fn propagate_identity_and_shift() {
        let mut g = chain(6);
        let before: Vec<Pose2> = g.poses().to_vec();
        let p3 = g.pose(3);
        propagate(&mut g, 3, &p3.clone(), &p3.clone());
        for (a, b) in before.iter().zip(g.poses()) {
            assert_eq!(a, b);
        }
        // Pure translation of the boundary shifts all later poses.
        let old = g.pose(3);
        let new = Pose2::new(old.x() + 1.0, old.y(), old.theta());
        propagate(&mut g, 3, &old, &new);
        for v in 0..=3 {
            assert_eq!(g.pose(v), before[v]);
        }
        for v in 4..6 {
            assert!((g.pose(v).x() - (before[v].x() + 1.0)).abs() < 1e-12);
            assert!((g.pose(v).y() - before[v].y()).abs() < 1e-12);
            assert_eq!(g.pose(v).theta(), before[v].theta());
        }
    }

    #[test]
    fn propagate_preserves_relative_poses() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let mut g = chain(10);
            let before: Vec<Pose2> = g.poses().to_vec();
            let old = g.pose(4);
            let new = Pose2::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-PI..PI),
            );
            propagate(&mut g, 4, &old, &new);
            for p in 5..10 {
                for q in p + 1..10 {
                    let was = before[p].relative(&before[q]);
                    let now = g.pose(p).relative(&g.pose(q));
                    assert!((was.x() - now.x()).abs() < 1e-12);
                    assert!((was.y() - now.y()).abs() < 1e-12);
                    assert!(
                        crate::se2::normalize_angle(was.theta() - now.theta()).abs() < 1e-12
                    );
                }
            }
        }
    }

    fn square_engine() -> Engine {
        let mut engine = Engine::new(Pose2::identity(), ConsensusConfig::default()).unwrap();
        for i in 0..4 {
            engine
                .process_measurement(0, i, i + 1, Pose2::new(1.0, 0.0, PI / 2.0), InfoMat3::identity())
                .unwrap();
        }
        engine
    }

    #[test]
    fn odometry_dispatch_creates_vertices() {
        let engine = square_engine();
        assert_eq!(engine.graph().n_poses(), 5);
        assert!(engine.graph().consensus().is_empty());
    }

    #[test]
    fn consistent_closure_accepted_and_outlier_rolled_back() {
        let mut engine = square_engine();
        let out = engine
            .process_measurement(0, 0, 4, Pose2::identity(), InfoMat3::identity())
            .unwrap();
        match out {
            ProcessOutcome::Decision(d) => {
                assert!(d.accepted);
                assert_eq!(d.subgraph_vertices, 5);
                assert!(d.worst_chi2 < 1e-12);
            }
            other => panic!("expected decision, got {other:?}"),
        }
        assert_eq!(engine.graph().consensus().len(), 1);

        let digest = engine.graph().state_digest();
        let out = engine
            .process_measurement(1, 0, 4, Pose2::new(5.0, 0.0, 0.0), InfoMat3::identity())
            .unwrap();
        match out {
            ProcessOutcome::Decision(d) => assert!(!d.accepted),
            other => panic!("expected decision, got {other:?}"),
        }
        assert_eq!(
            engine.graph().state_digest(),
            digest,
            "rejection must leave the graph bit-identical"
        );
    }

    #[test]
    fn future_vertex_rejected() {
        let mut engine = square_engine();
        let err = engine
            .process_measurement(0, 0, 9, Pose2::identity(), InfoMat3::identity())
            .unwrap_err();
        assert!(matches!(err, EngineError::FutureVertex { id: 9, .. }));
    }

    #[test]
    fn reversed_loop_measurement_canonicalized() {
        let mut engine = square_engine();
        let out = engine
            .process_measurement(0, 4, 0, Pose2::identity(), InfoMat3::identity())
            .unwrap();
        match out {
            ProcessOutcome::Decision(d) => assert!(d.accepted),
            other => panic!("expected decision, got {other:?}"),
        }
        let e = engine.graph().loop_edge(0);
        assert_eq!((e.from, e.to, e.kind), (0, 4, EdgeKind::Loop));
    }

    #[test]
    fn vertices_before_subgraph_never_move() {
        let mut engine = square_engine();
        // Extend the chain past the square before closing the square loop.
        for i in 4..8 {
            engine
                .process_measurement(0, i, i + 1, Pose2::new(1.0, 0.0, 0.0), InfoMat3::identity())
                .unwrap();
        }
        // Perturb nothing; close (1, 5) with its exact relative transform.
        let z = engine.graph().pose(1).relative(&engine.graph().pose(5));
        let before: Vec<Pose2> = engine.graph().poses().to_vec();
        engine
            .process_measurement(0, 1, 5, z, InfoMat3::identity())
            .unwrap();
        assert_eq!(engine.graph().pose(0), before[0]);
        assert_eq!(engine.graph().pose(1), before[1]);
    }

    #[test]
    fn decision_log_roundtrip() {
        let records = vec![
            DecisionRecord {
                loop_id: 0,
                accepted: true,
                subgraph_vertices: 5,
                worst_chi2: 0.123456789,
                threshold: 7.814727903251179,
                seconds: 0.002,
            },
            DecisionRecord {
                loop_id: 3,
                accepted: false,
                subgraph_vertices: 12,
                worst_chi2: 151.25,
                threshold: 7.814727903251179,
                seconds: 0.004,
            },
        ];
        let text = decision_log(&records);
        assert_eq!(parse_decision_log(&text).unwrap(), records);
    }
}
