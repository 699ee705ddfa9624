//! Reader and writer for the planar g2o text format, plus the sidecar label
//! manifest that marks injected loop closures.
//!
//! Supported records:
//!
//! ```text
//! VERTEX_SE2 id x y theta
//! EDGE_SE2 i j dx dy dtheta i11 i12 i13 i22 i23 i33
//! ```
//!
//! The six information tokens fill the upper triangle row-major. Unknown
//! tags are skipped and reported in the load report. Non-contiguous vertex
//! ids are remapped to temporal ordinals; the permutation is recorded.
//!
//! Label manifest format: a `# name=<text> seed=<int>` header line followed
//! by one decimal loop-edge index per line.

use crate::graph::{Edge, EdgeKind, PoseGraph};
use crate::se2::{InfoMat3, Pose2};
use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: expected {expected} tokens for {tag}, found {found}")]
    TokenCount {
        line: usize,
        tag: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: could not parse '{token}' as a number")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: edge references unknown vertex id {id}")]
    UnknownVertex { line: usize, id: i64 },
    #[error("line {line}: information matrix is not positive definite")]
    NotPositiveDefinite { line: usize },
    #[error("line {line}: duplicate vertex id {id}")]
    DuplicateVertex { line: usize, id: i64 },
    #[error("label index {index} out of range for a graph with {len} loop edges")]
    LabelOutOfRange { index: usize, len: usize },
    #[error("malformed label header: {0}")]
    BadLabelHeader(String),
    #[error("graph has no vertices")]
    EmptyGraph,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

/// Everything the parser observed besides the graph itself.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub warnings: Vec<String>,
    /// `(original id, new ordinal)` pairs, present when ids were remapped.
    pub id_remap: Option<Vec<(i64, usize)>>,
}

/// A parsed graph together with its load report.
#[derive(Debug)]
pub struct Loaded {
    pub graph: PoseGraph,
    pub report: LoadReport,
}

fn parse_f64(line: usize, tok: &str) -> Result<f64, IoError> {
    tok.parse::<f64>().map_err(|_| IoError::BadNumber {
        line,
        token: tok.to_string(),
    })
}

fn parse_i64(line: usize, tok: &str) -> Result<i64, IoError> {
    tok.parse::<i64>().map_err(|_| IoError::BadNumber {
        line,
        token: tok.to_string(),
    })
}

/// Parses g2o text into a pose graph. Vertex and edge records may be
/// interleaved in any order; all referenced vertices must appear somewhere.
pub fn parse_g2o(input: &str) -> Result<Loaded, IoError> {
    struct RawEdge {
        line: usize,
        from: i64,
        to: i64,
        z: Pose2,
        info: InfoMat3,
    }

    let mut raw_vertices: Vec<(usize, i64, Pose2)> = Vec::new();
    let mut raw_edges: Vec<RawEdge> = Vec::new();
    let mut report = LoadReport::default();

    for (idx, text) in input.lines().enumerate() {
        let line = idx + 1;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let Some(&tag) = tokens.first() else {
            continue;
        };
        match tag {
            "VERTEX_SE2" => {
                if tokens.len() != 5 {
                    return Err(IoError::TokenCount {
                        line,
                        tag: tag.into(),
                        expected: 5,
                        found: tokens.len(),
                    });
                }
                let id = parse_i64(line, tokens[1])?;
                let x = parse_f64(line, tokens[2])?;
                let y = parse_f64(line, tokens[3])?;
                let t = parse_f64(line, tokens[4])?;
                raw_vertices.push((line, id, Pose2::new(x, y, t)));
            }
            "EDGE_SE2" => {
                if tokens.len() != 12 {
                    return Err(IoError::TokenCount {
                        line,
                        tag: tag.into(),
                        expected: 12,
                        found: tokens.len(),
                    });
                }
                let from = parse_i64(line, tokens[1])?;
                let to = parse_i64(line, tokens[2])?;
                let mut vals = [0.0; 9];
                for (k, v) in vals.iter_mut().enumerate() {
                    *v = parse_f64(line, tokens[3 + k])?;
                }
                let z = Pose2::new(vals[0], vals[1], vals[2]);
                let info =
                    InfoMat3::from_upper([vals[3], vals[4], vals[5], vals[6], vals[7], vals[8]]);
                if !info.is_positive_definite() {
                    return Err(IoError::NotPositiveDefinite { line });
                }
                raw_edges.push(RawEdge {
                    line,
                    from,
                    to,
                    z,
                    info,
                });
            }
            _ if tag.starts_with('#') => {}
            _ => {
                report
                    .warnings
                    .push(format!("line {line}: skipped unknown tag '{tag}'"));
            }
        }
    }

    if raw_vertices.is_empty() {
        return Err(IoError::EmptyGraph);
    }

    // Remap ids to contiguous temporal ordinals, ordered by original id.
    raw_vertices.sort_by_key(|(_, id, _)| *id);
    let mut id_map: HashMap<i64, usize> = HashMap::new();
    let mut poses = Vec::with_capacity(raw_vertices.len());
    let mut contiguous = true;
    for (new_id, (line, orig, pose)) in raw_vertices.iter().enumerate() {
        if id_map.insert(*orig, new_id).is_some() {
            return Err(IoError::DuplicateVertex {
                line: *line,
                id: *orig,
            });
        }
        if *orig != new_id as i64 {
            contiguous = false;
        }
        poses.push(*pose);
    }
    if !contiguous {
        report.id_remap = Some(raw_vertices.iter().map(|(_, id, _)| *id).zip(0..).collect());
    }

    let mut odom_edges = Vec::new();
    let mut loop_edges = Vec::new();
    for raw in raw_edges {
        let from = *id_map
            .get(&raw.from)
            .ok_or(IoError::UnknownVertex {
                line: raw.line,
                id: raw.from,
            })?;
        let to = *id_map
            .get(&raw.to)
            .ok_or(IoError::UnknownVertex {
                line: raw.line,
                id: raw.to,
            })?;
        let edge = Edge::new(from, to, raw.z, raw.info).canonicalized();
        match edge.kind {
            EdgeKind::Odometry => odom_edges.push(edge),
            EdgeKind::Loop => loop_edges.push(edge),
        }
    }

    // Keep the chain sorted regardless of file order; `from_parts` verifies
    // chain connectivity.
    odom_edges.sort_by_key(|e| e.from);
    let graph = PoseGraph::from_parts(poses, odom_edges, loop_edges)?;
    Ok(Loaded { graph, report })
}

fn fmt_f64(buf: &mut String, v: f64) {
    // 17 significant digits: enough to reproduce any f64 exactly.
    write!(buf, " {:.16e}", v).expect("string write");
}

/// Serializes a graph to g2o text: vertices first, then the odometry chain,
/// then loop closures, all in index order.
pub fn write_g2o(graph: &PoseGraph) -> String {
    let mut out = String::new();
    for (id, p) in graph.poses().iter().enumerate() {
        write!(out, "VERTEX_SE2 {id}").expect("string write");
        fmt_f64(&mut out, p.x());
        fmt_f64(&mut out, p.y());
        fmt_f64(&mut out, p.theta());
        out.push('\n');
    }
    let mut write_edge = |out: &mut String, e: &Edge| {
        write!(out, "EDGE_SE2 {} {}", e.from, e.to).expect("string write");
        fmt_f64(out, e.z.x());
        fmt_f64(out, e.z.y());
        fmt_f64(out, e.z.theta());
        for v in e.info.upper() {
            fmt_f64(out, v);
        }
        out.push('\n');
    };
    for e in graph.odom_edges() {
        write_edge(&mut out, e);
    }
    for e in graph.loop_edges() {
        write_edge(&mut out, e);
    }
    out
}

/// Names which loop-edge ordinals of a companion graph were injected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelManifest {
    pub dataset: String,
    pub seed: u64,
    pub injected: BTreeSet<usize>,
}

impl LabelManifest {
    pub fn new(dataset: impl Into<String>, seed: u64) -> Self {
        LabelManifest {
            dataset: dataset.into(),
            seed,
            injected: BTreeSet::new(),
        }
    }

    /// All indices must be valid loop-edge ordinals of `graph`.
    pub fn validate(&self, graph: &PoseGraph) -> Result<(), IoError> {
        let len = graph.loop_edges().len();
        for &i in &self.injected {
            if i >= len {
                return Err(IoError::LabelOutOfRange { index: i, len });
            }
        }
        Ok(())
    }
}

pub fn write_labels(manifest: &LabelManifest) -> String {
    let mut out = format!("# name={} seed={}\n", manifest.dataset, manifest.seed);
    for i in &manifest.injected {
        writeln!(out, "{i}").expect("string write");
    }
    out
}

pub fn parse_labels(input: &str) -> Result<LabelManifest, IoError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| IoError::BadLabelHeader("empty input".into()))?;
    let rest = header
        .strip_prefix("# name=")
        .ok_or_else(|| IoError::BadLabelHeader(header.into()))?;
    let (name, seed_part) = rest
        .rsplit_once(" seed=")
        .ok_or_else(|| IoError::BadLabelHeader(header.into()))?;
    let seed = seed_part
        .trim()
        .parse::<u64>()
        .map_err(|_| IoError::BadLabelHeader(header.into()))?;
    let mut manifest = LabelManifest::new(name, seed);
    for (idx, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v = line.parse::<usize>().map_err(|_| IoError::BadNumber {
            line: idx + 2,
            token: line.to_string(),
        })?;
        manifest.injected.insert(v);
    }
    Ok(manifest)
}

pub fn read_g2o_path(path: impl AsRef<Path>) -> Result<Loaded, IoError> {
    parse_g2o(&std::fs::read_to_string(path)?)
}

pub fn write_g2o_path(graph: &PoseGraph, path: impl AsRef<Path>) -> Result<(), IoError> {
    std::fs::write(path, write_g2o(graph))?;
    Ok(())
}

pub fn read_labels_path(path: impl AsRef<Path>) -> Result<LabelManifest, IoError> {
    parse_labels(&std::fs::read_to_string(path)?)
}

pub fn write_labels_path(manifest: &LabelManifest, path: impl AsRef<Path>) -> Result<(), IoError> {
    std::fs::write(path, write_labels(manifest))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_vertex_line() {
        let loaded = parse_g2o("VERTEX_SE2 0 0.0 0.0 0.0\n").unwrap();
        assert_eq!(loaded.graph.n_poses(), 1);
        assert_eq!(loaded.graph.pose(0), Pose2::identity());
    }

    #[test]
    fn identity_information_edge() {
        let text = "VERTEX_SE2 0 0 0 0\nVERTEX_SE2 1 1 0 0\nEDGE_SE2 0 1 1 0 0 1 0 0 1 0 1\n";
        let g = parse_g2o(text).unwrap().graph;
        assert_eq!(g.odom_edges().len(), 1);
        let e = &g.odom_edges()[0];
        assert_eq!(e.kind, EdgeKind::Odometry);
        assert_eq!(e.z, Pose2::new(1.0, 0.0, 0.0));
        assert_eq!(e.info, InfoMat3::identity());
    }

    #[test]
    fn empty_graph_errors() {
        assert!(matches!(parse_g2o(""), Err(IoError::EmptyGraph)));
    }

    #[test]
    fn unknown_tags_warn() {
        let text = "VERTEX_SE2 0 0 0 0\nVERTEX_SE3:QUAT 1 0 0 0 0 0 0 1\n";
        let loaded = parse_g2o(text).unwrap();
        assert_eq!(loaded.report.warnings.len(), 1);
        assert!(loaded.report.warnings[0].contains("VERTEX_SE3:QUAT"));
    }

    #[test]
    fn bad_token_count_reports_line() {
        let text = "VERTEX_SE2 0 0 0 0\nEDGE_SE2 0 1 1 0 0\n";
        match parse_g2o(text) {
            Err(IoError::TokenCount { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected token-count error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_rejected() {
        let text = "VERTEX_SE2 0 0 zero 0\n";
        assert!(matches!(parse_g2o(text), Err(IoError::BadNumber { .. })));
    }

    #[test]
    fn dangling_edge_rejected() {
        let text = "VERTEX_SE2 0 0 0 0\nEDGE_SE2 0 7 1 0 0 1 0 0 1 0 1\n";
        assert!(matches!(
            parse_g2o(text),
            Err(IoError::UnknownVertex { id: 7, .. })
        ));
    }

    #[test]
    fn non_pd_information_rejected_with_line() {
        let text = "VERTEX_SE2 0 0 0 0\nVERTEX_SE2 1 1 0 0\nEDGE_SE2 0 1 1 0 0 0 0 0 0 0 0\n";
        match parse_g2o(text) {
            Err(IoError::NotPositiveDefinite { line }) => assert_eq!(line, 3),
            other => panic!("expected PD error, got {other:?}"),
        }
    }

    #[test]
    fn interleaved_vertex_edge_order_ok() {
        let a = "VERTEX_SE2 0 0 0 0\nEDGE_SE2 0 1 1 0 0 1 0 0 1 0 1\nVERTEX_SE2 1 1 0 0\n";
        let b = "VERTEX_SE2 0 0 0 0\nVERTEX_SE2 1 1 0 0\nEDGE_SE2 0 1 1 0 0 1 0 0 1 0 1\n";
        let ga = parse_g2o(a).unwrap().graph;
        let gb = parse_g2o(b).unwrap().graph;
        assert_eq!(write_g2o(&ga), write_g2o(&gb));
    }

    #[test]
    fn noncontiguous_ids_remapped() {
        let text = "VERTEX_SE2 10 0 0 0\nVERTEX_SE2 20 1 0 0\nEDGE_SE2 10 20 1 0 0 1 0 0 1 0 1\n";
        let loaded = parse_g2o(text).unwrap();
        assert_eq!(loaded.graph.n_poses(), 2);
        let remap = loaded.report.id_remap.expect("remap recorded");
        assert_eq!(remap, vec![(10, 0), (20, 1)]);
    }

    #[test]
    fn reversed_edges_canonicalized() {
        let text = "VERTEX_SE2 0 0 0 0\nVERTEX_SE2 1 1 0 0\nVERTEX_SE2 2 2 0 0\n\
                    EDGE_SE2 0 1 1 0 0 1 0 0 1 0 1\nEDGE_SE2 1 2 1 0 0 1 0 0 1 0 1\n\
                    EDGE_SE2 2 0 -2 0 0 1 0 0 1 0 1\n";
        let g = parse_g2o(text).unwrap().graph;
        assert_eq!(g.loop_edges().len(), 1);
        let e = &g.loop_edges()[0];
        assert_eq!((e.from, e.to), (0, 2));
        assert!(g.edge_chi2(e) < 1e-20);
    }

    #[test]
    fn broken_chain_detected() {
        let text = "VERTEX_SE2 0 0 0 0\nVERTEX_SE2 1 1 0 0\nVERTEX_SE2 2 2 0 0\n\
                    EDGE_SE2 0 1 1 0 0 1 0 0 1 0 1\n";
        assert!(matches!(
            parse_g2o(text),
            Err(IoError::Graph(crate::graph::GraphError::MissingChainEdge { from: 1 }))
        ));
    }

    #[test]
    fn labels_roundtrip() {
        let mut m = LabelManifest::new("demo", 7);
        m.injected.extend([2usize, 5, 7]);
        let text = write_labels(&m);
        assert_eq!(parse_labels(&text).unwrap(), m);
        let empty = LabelManifest::new("none", 0);
        assert_eq!(write_labels(&empty), "# name=none seed=0\n");
        assert_eq!(parse_labels(&write_labels(&empty)).unwrap(), empty);
    }

    #[test]
    fn label_range_validated() {
        let g = parse_g2o("VERTEX_SE2 0 0 0 0\n").unwrap().graph;
        let mut m = LabelManifest::new("x", 1);
        m.injected.insert(0);
        assert!(matches!(
            m.validate(&g),
            Err(IoError::LabelOutOfRange { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn parse_write_roundtrip(
            n in 2usize..12,
            seed_x in -10.0..10.0f64,
            angles in proptest::collection::vec(-3.0..3.0f64, 16),
            loops in proptest::collection::vec((0usize..10, 2usize..11), 0..4),
        ) {
            let mut g = PoseGraph::with_origin(Pose2::new(seed_x, 0.5, angles[0]));
            for k in 1..n {
                g.append_odometry(
                    Pose2::new(1.0 + 0.1 * k as f64, -0.2, angles[k % angles.len()]),
                    InfoMat3::diagonal(2.0, 3.0, 4.0),
                ).unwrap();
            }
            for (a, b) in loops {
                let (a, b) = (a % n, b % n);
                if a + 1 < b {
                    let z = g.pose(a).relative(&g.pose(b));
                    let _ = g.add_loop(Edge::new(a, b, z, InfoMat3::identity()));
                }
            }
            let text = write_g2o(&g);
            let parsed = parse_g2o(&text).unwrap().graph;
            // Value-exact round trip on every field.
            prop_assert_eq!(parsed.n_poses(), g.n_poses());
            for id in 0..g.n_poses() {
                prop_assert_eq!(parsed.pose(id), g.pose(id));
            }
            prop_assert_eq!(parsed.odom_edges().len(), g.odom_edges().len());
            prop_assert_eq!(parsed.loop_edges().len(), g.loop_edges().len());
            for (pe, ge) in parsed
                .odom_edges()
                .iter()
                .chain(parsed.loop_edges().iter())
                .zip(g.odom_edges().iter().chain(g.loop_edges().iter()))
            {
                prop_assert_eq!(pe.from, ge.from);
                prop_assert_eq!(pe.to, ge.to);
                prop_assert_eq!(pe.z, ge.z);
                prop_assert_eq!(pe.info, ge.info);
            }
        }
    }
}
