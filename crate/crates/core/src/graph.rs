//! The pose-graph data model: an odometry chain, loop-closure edges, the
//! running consensus set, and snapshot/restore for exact rollback.
//!
//! Vertex ids are contiguous ordinals `0..n` in temporal order; vertex 0 is
//! the gauge origin. Edges partition by the consecutive-index rule: an edge
//! `(a, a+1)` is odometry, everything else is a loop closure.

use crate::se2::{InfoMat3, Pose2, Residual3};
use std::collections::BTreeSet;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("information matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("odometry edge must extend the chain: expected from={expected}, got from={got}")]
    NonSequentialOdometry { expected: usize, got: usize },
    #[error("odometry chain is broken: no edge between vertices {from} and {next}", next = from + 1)]
    MissingChainEdge { from: usize },
    #[error("duplicate odometry edge between vertices {from} and {next}", next = from + 1)]
    DuplicateChainEdge { from: usize },
    #[error("edge references vertex {id} but the graph has {len} vertices")]
    DanglingVertex { id: usize, len: usize },
    #[error("loop edge endpoints must satisfy from + 1 < to, got ({from}, {to})")]
    BadLoopEndpoints { from: usize, to: usize },
    #[error("snapshot refers to vertex {id} outside the graph (len {len})")]
    SnapshotMismatch { id: usize, len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// One relative-pose measurement `z` with its information matrix.
#[derive(Clone, Debug)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub z: Pose2,
    pub info: InfoMat3,
    pub kind: EdgeKind,
}

impl Edge {
    pub fn new(from: usize, to: usize, z: Pose2, info: InfoMat3) -> Self {
        let kind = if to == from + 1 {
            EdgeKind::Odometry
        } else {
            EdgeKind::Loop
        };
        Edge {
            from,
            to,
            z,
            info,
            kind,
        }
    }

    /// Canonical orientation has `from < to`. A reversed edge is rewritten by
    /// inverting the measurement and mapping the information matrix through
    /// the adjoint of the inverted measurement, which preserves the quadratic
    /// error to first order.
    pub fn canonicalized(&self) -> Edge {
        if self.from < self.to {
            return self.clone();
        }
        let z_new = self.z.inverse();
        let ad = z_new.adjoint();
        Edge::new(self.to, self.from, z_new, self.info.congruence(&ad))
    }
}

/// Captured estimates for a stated vertex subset; `restore` puts back the
/// exact bits.
#[derive(Clone, Debug)]
pub struct Snapshot {
    entries: Vec<(usize, Pose2)>,
}

impl Snapshot {
    pub fn vertex_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(id, _)| *id)
    }

    pub fn pose_of(&self, id: usize) -> Option<Pose2> {
        self.entries
            .iter()
            .find(|(v, _)| *v == id)
            .map(|(_, p)| *p)
    }
}

/// Ordered poses, odometry chain, loop closures and the consensus set.
///
/// The chain is unique and complete: `odom_edges[i]` is the edge
/// `(i, i+1)`, so chain indices coincide with their `from` vertex.
#[derive(Clone, Debug)]
pub struct PoseGraph {
    poses: Vec<Pose2>,
    odom_edges: Vec<Edge>,
    loop_edges: Vec<Edge>,
    consensus: BTreeSet<usize>,
}

impl PoseGraph {
    /// A graph holding only the gauge origin.
    pub fn with_origin(origin: Pose2) -> Self {
        PoseGraph {
            poses: vec![origin],
            odom_edges: Vec::new(),
            loop_edges: Vec::new(),
            consensus: BTreeSet::new(),
        }
    }

    /// Assembles a graph from parts, validating the chain invariant. Used by
    /// the file reader and the synthetic generators.
    pub fn from_parts(
        poses: Vec<Pose2>,
        odom_edges: Vec<Edge>,
        loop_edges: Vec<Edge>,
    ) -> Result<Self, GraphError> {
        let n = poses.len();
        let mut seen = vec![false; n.saturating_sub(1)];
        for e in &odom_edges {
            if e.to >= n {
                return Err(GraphError::DanglingVertex { id: e.to, len: n });
            }
            if e.to != e.from + 1 {
                return Err(GraphError::NonSequentialOdometry {
                    expected: e.from + 1,
                    got: e.to,
                });
            }
            if !e.info.is_positive_definite() {
                return Err(GraphError::NotPositiveDefinite);
            }
            if seen[e.from] {
                return Err(GraphError::DuplicateChainEdge { from: e.from });
            }
            seen[e.from] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(GraphError::MissingChainEdge { from: missing });
        }
        for e in &loop_edges {
            if e.from + 1 >= e.to {
                return Err(GraphError::BadLoopEndpoints {
                    from: e.from,
                    to: e.to,
                });
            }
            if e.to >= n {
                return Err(GraphError::DanglingVertex { id: e.to, len: n });
            }
            if !e.info.is_positive_definite() {
                return Err(GraphError::NotPositiveDefinite);
            }
        }
        Ok(PoseGraph {
            poses,
            odom_edges,
            loop_edges,
            consensus: BTreeSet::new(),
        })
    }

    pub fn n_poses(&self) -> usize {
        self.poses.len()
    }

    pub fn pose(&self, id: usize) -> Pose2 {
        self.poses[id]
    }

    pub fn poses(&self) -> &[Pose2] {
        &self.poses
    }

    pub fn set_pose(&mut self, id: usize, p: Pose2) {
        self.poses[id] = p;
    }

    pub fn odom_edges(&self) -> &[Edge] {
        &self.odom_edges
    }

    pub fn loop_edges(&self) -> &[Edge] {
        &self.loop_edges
    }

    pub fn loop_edge(&self, id: usize) -> &Edge {
        &self.loop_edges[id]
    }

    /// Ids (positions within the loop list) of accepted loop closures.
    pub fn consensus(&self) -> &BTreeSet<usize> {
        &self.consensus
    }

    pub fn mark_consensus(&mut self, loop_id: usize) {
        debug_assert!(loop_id < self.loop_edges.len());
        self.consensus.insert(loop_id);
    }

    /// Integrates one odometry measurement: appends the new vertex at
    /// `x_i . z` and the chain edge `(i, i+1)`. Returns the new vertex id.
    pub fn append_odometry(&mut self, z: Pose2, info: InfoMat3) -> Result<usize, GraphError> {
        if !info.is_positive_definite() {
            return Err(GraphError::NotPositiveDefinite);
        }
        let i = self.poses.len() - 1;
        let new_pose = self.poses[i].compose(&z);
        self.poses.push(new_pose);
        self.odom_edges.push(Edge::new(i, i + 1, z, info));
        Ok(i + 1)
    }

    /// Inserts a validated loop edge and returns its id.
    pub fn add_loop(&mut self, edge: Edge) -> Result<usize, GraphError> {
        if edge.from + 1 >= edge.to {
            return Err(GraphError::BadLoopEndpoints {
                from: edge.from,
                to: edge.to,
            });
        }
        if edge.to >= self.poses.len() {
            return Err(GraphError::DanglingVertex {
                id: edge.to,
                len: self.poses.len(),
            });
        }
        if !edge.info.is_positive_definite() {
            return Err(GraphError::NotPositiveDefinite);
        }
        self.loop_edges.push(edge);
        Ok(self.loop_edges.len() - 1)
    }

    /// Measurement discrepancy of an edge at the current estimates:
    /// `relative(x_from, x_to) boxminus z`.
    pub fn edge_error(&self, edge: &Edge) -> Residual3 {
        let a = &self.poses[edge.from];
        let b = &self.poses[edge.to];
        a.relative(b).boxminus(&edge.z)
    }

    /// Chi-square contribution of one edge (unscaled information).
    pub fn edge_chi2(&self, edge: &Edge) -> f64 {
        edge.info.quadratic_form(&self.edge_error(edge))
    }

    /// Sum of `edge_chi2` over every edge: the unscaled objective value at
    /// the current estimates.
    pub fn total_chi2(&self) -> f64 {
        self.odom_edges
            .iter()
            .chain(self.loop_edges.iter())
            .map(|e| self.edge_chi2(e))
            .sum()
    }

    pub fn take_snapshot(
        &self,
        ids: impl IntoIterator<Item = usize>,
    ) -> Result<Snapshot, GraphError> {
        let mut entries = Vec::new();
        for id in ids {
            if id >= self.poses.len() {
                return Err(GraphError::SnapshotMismatch {
                    id,
                    len: self.poses.len(),
                });
            }
            entries.push((id, self.poses[id]));
        }
        Ok(Snapshot { entries })
    }

    /// Puts back the captured estimates bit-for-bit; vertices outside the
    /// snapshot are untouched.
    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<(), GraphError> {
        for (id, _) in &snapshot.entries {
            if *id >= self.poses.len() {
                return Err(GraphError::SnapshotMismatch {
                    id: *id,
                    len: self.poses.len(),
                });
            }
        }
        for (id, pose) in &snapshot.entries {
            self.poses[*id] = *pose;
        }
        Ok(())
    }

    /// Order-sensitive digest of the full graph state (pose bits, edges,
    /// consensus). Two graphs with equal digests are bitwise-identical for
    /// rollback-purity purposes.
    pub fn state_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.poses {
            p.x().to_bits().hash(&mut h);
            p.y().to_bits().hash(&mut h);
            p.theta().to_bits().hash(&mut h);
        }
        for e in self.odom_edges.iter().chain(self.loop_edges.iter()) {
            e.from.hash(&mut h);
            e.to.hash(&mut h);
            e.z.x().to_bits().hash(&mut h);
            e.z.y().to_bits().hash(&mut h);
            e.z.theta().to_bits().hash(&mut h);
            for v in e.info.upper() {
                v.to_bits().hash(&mut h);
            }
        }
        for id in &self.consensus {
            id.hash(&mut h);
        }
        h.finish()
    }
}
