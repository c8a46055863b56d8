//! Flow-network topology: nodes, pipes, consumers and the single source.
//!
//! The reference orientation of a pipe is fixed by its `from`/`to` nodes. A
//! negative velocity means the fluid moves against that orientation, so flux
//! reversals never change the graph itself.
//!
//! A spanning tree is grown breadth-first from the source, visiting incident
//! pipes in file order. Every pipe outside the tree (a chord) closes exactly
//! one fundamental loop, so the loop basis is reproducible for a given file.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    pub id: String,
    /// Elevation in meters.
    pub z: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipe<T> {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub length: T,
    pub diameter: T,
    pub roughness: T,
}

impl<T: Scalar> Pipe<T> {
    /// Cross-section area in m².
    pub fn area(&self) -> T {
        T::pi() * self.diameter * self.diameter / lit(4.0)
    }

    /// The node the pipe leaves when fluid flows with sign `sign`.
    pub fn upstream_node(&self, sign: i8) -> usize {
        if sign >= 0 {
            self.from
        } else {
            self.to
        }
    }

    pub fn downstream_node(&self, sign: i8) -> usize {
        if sign >= 0 {
            self.to
        } else {
            self.from
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consumer<T> {
    pub id: String,
    pub node: usize,
    pub class_id: String,
    /// Estimated daily energy demand in J.
    pub daily_energy: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceEdge {
    pub node: usize,
}

/// A pipe traversed either along (`sign = 1`) or against (`sign = -1`) its
/// reference orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrientedEdge {
    pub pipe: usize,
    pub sign: i8,
}

/// Fundamental cycle closed by one chord of the spanning tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loop {
    pub chord: usize,
    pub edges: Vec<OrientedEdge>,
}

#[derive(Debug, Clone)]
struct SpanningTree {
    /// Pipe connecting each node to its parent, `None` for the root.
    parent_pipe: Vec<Option<usize>>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    chords: Vec<usize>,
}

/// Validated network; immutable after construction.
#[derive(Debug, Clone)]
pub struct NetworkTopology<T> {
    nodes: Vec<Node<T>>,
    pipes: Vec<Pipe<T>>,
    consumers: Vec<Consumer<T>>,
    source: SourceEdge,
    incidence: Vec<Vec<usize>>,
    tree: SpanningTree,
}

impl<T: Scalar> NetworkTopology<T> {
    pub fn new(
        nodes: Vec<Node<T>>,
        pipes: Vec<Pipe<T>>,
        consumers: Vec<Consumer<T>>,
        source: SourceEdge,
    ) -> Result<Self> {
        let invalid = |msg: String| Err(Error::InvalidNetwork(msg));
        if nodes.is_empty() {
            return invalid("network has no nodes".into());
        }
        check_unique(nodes.iter().map(|n| n.id.as_str()), "node")?;
        check_unique(pipes.iter().map(|p| p.id.as_str()), "pipe")?;
        check_unique(consumers.iter().map(|c| c.id.as_str()), "consumer")?;
        if source.node >= nodes.len() {
            return invalid("source node out of range".into());
        }
        for node in &nodes {
            if !node.z.is_finite() {
                return invalid(format!("node {} has a non-finite elevation", node.id));
            }
        }
        for p in &pipes {
            if p.from >= nodes.len() || p.to >= nodes.len() {
                return invalid(format!("pipe {} references an unknown node", p.id));
            }
            if p.from == p.to {
                return invalid(format!("pipe {} starts and ends at the same node", p.id));
            }
            if !(p.length > T::zero()) || !p.length.is_finite() {
                return invalid(format!("pipe {} has nonpositive length", p.id));
            }
            if !(p.diameter > T::zero()) || !p.diameter.is_finite() {
                return invalid(format!("pipe {} has nonpositive diameter", p.id));
            }
            if !(p.roughness >= T::zero()) || !p.roughness.is_finite() {
                return invalid(format!("pipe {} has negative roughness", p.id));
            }
        }
        for c in &consumers {
            if c.node >= nodes.len() {
                return invalid(format!("consumer {} references an unknown node", c.id));
            }
            if !(c.daily_energy > T::zero()) || !c.daily_energy.is_finite() {
                return invalid(format!("consumer {} has nonpositive daily energy", c.id));
            }
        }

        let mut incidence = vec![Vec::new(); nodes.len()];
        for (k, p) in pipes.iter().enumerate() {
            incidence[p.from].push(k);
            incidence[p.to].push(k);
        }

        let tree = bfs_tree(&pipes, &incidence, source.node, nodes.len());
        if let Some(lost) = tree.depth.iter().position(|&d| d == usize::MAX) {
            return invalid(format!(
                "network is disconnected: node {} is unreachable from the source",
                nodes[lost].id
            ));
        }

        Ok(Self {
            nodes,
            pipes,
            consumers,
            source,
            incidence,
            tree,
        })
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn pipes(&self) -> &[Pipe<T>] {
        &self.pipes
    }

    pub fn consumers(&self) -> &[Consumer<T>] {
        &self.consumers
    }

    pub fn source(&self) -> SourceEdge {
        self.source
    }

    /// Pipes touching `node`, in file order.
    pub fn incident(&self, node: usize) -> &[usize] {
        &self.incidence[node]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn consumer_index(&self, id: &str) -> Option<usize> {
        self.consumers.iter().position(|c| c.id == id)
    }

    /// Cycle rank |pipes| - |nodes| + 1 of the connected graph.
    pub fn cycle_rank(&self) -> usize {
        self.pipes.len() + 1 - self.nodes.len()
    }

    /// Chords of the BFS spanning tree in file order.
    pub fn chords(&self) -> &[usize] {
        &self.tree.chords
    }

    pub fn is_chord(&self, pipe: usize) -> bool {
        self.tree.chords.contains(&pipe)
    }

    /// One oriented cycle per chord; the chord is traversed along its
    /// reference orientation and the cycle closes through the tree.
    pub fn fundamental_loops(&self) -> Vec<Loop> {
        self.tree
            .chords
            .iter()
            .map(|&chord| {
                let p = &self.pipes[chord];
                let mut edges = vec![OrientedEdge { pipe: chord, sign: 1 }];
                edges.extend(self.tree_walk(p.to, p.from));
                Loop { chord, edges }
            })
            .collect()
    }

    /// Tree path from the source to `node`, oriented in the walking direction.
    pub fn path_to_node(&self, node: usize) -> Vec<OrientedEdge> {
        self.tree_walk(self.source.node, node)
    }

    /// Tree path from the source to the attachment node of consumer `h`.
    pub fn path_to_consumer(&self, h: usize) -> Result<Vec<OrientedEdge>> {
        let consumer = self
            .consumers
            .get(h)
            .ok_or_else(|| Error::InvalidNetwork(format!("no consumer with index {h}")))?;
        Ok(self.path_to_node(consumer.node))
    }

    /// Walks the spanning tree from `a` to `b` through their lowest common
    /// ancestor.
    fn tree_walk(&self, a: usize, b: usize) -> Vec<OrientedEdge> {
        let mut up_a = Vec::new();
        let mut up_b = Vec::new();
        let (mut x, mut y) = (a, b);
        while self.tree.depth[x] > self.tree.depth[y] {
            up_a.push(x);
            x = self.tree.parent[x].expect("non-root node has a parent");
        }
        while self.tree.depth[y] > self.tree.depth[x] {
            up_b.push(y);
            y = self.tree.parent[y].expect("non-root node has a parent");
        }
        while x != y {
            up_a.push(x);
            up_b.push(y);
            x = self.tree.parent[x].expect("non-root node has a parent");
            y = self.tree.parent[y].expect("non-root node has a parent");
        }

        let mut edges = Vec::with_capacity(up_a.len() + up_b.len());
        for &node in &up_a {
            let pipe = self.tree.parent_pipe[node].expect("tree edge");
            let sign = if self.pipes[pipe].from == node { 1 } else { -1 };
            edges.push(OrientedEdge { pipe, sign });
        }
        for &node in up_b.iter().rev() {
            let pipe = self.tree.parent_pipe[node].expect("tree edge");
            let sign = if self.pipes[pipe].to == node { 1 } else { -1 };
            edges.push(OrientedEdge { pipe, sign });
        }
        edges
    }

    /// Converts to the serializable file representation.
    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id.clone(),
                    z_m: to_f64(n.z),
                })
                .collect(),
            pipes: self
                .pipes
                .iter()
                .map(|p| PipeRecord {
                    id: p.id.clone(),
                    from: self.nodes[p.from].id.clone(),
                    to: self.nodes[p.to].id.clone(),
                    length_m: to_f64(p.length),
                    diameter_m: to_f64(p.diameter),
                    roughness_m: to_f64(p.roughness),
                })
                .collect(),
            consumers: self
                .consumers
                .iter()
                .map(|c| ConsumerRecord {
                    id: c.id.clone(),
                    node: self.nodes[c.node].id.clone(),
                    class: c.class_id.clone(),
                    daily_energy_j: to_f64(c.daily_energy),
                })
                .collect(),
            source: SourceRecord {
                node: self.nodes[self.source.node].id.clone(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("network serializes")
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>, what: &str) -> Result<()> {
    let mut seen = HashMap::new();
    for id in ids {
        if seen.insert(id, ()).is_some() {
            return Err(Error::InvalidNetwork(format!("duplicate {what} id {id}")));
        }
    }
    Ok(())
}

fn bfs_tree<T>(pipes: &[Pipe<T>], incidence: &[Vec<usize>], root: usize, n: usize) -> SpanningTree {
    let mut parent_pipe = vec![None; n];
    let mut parent = vec![None; n];
    let mut depth = vec![usize::MAX; n];
    let mut in_tree = vec![false; pipes.len()];
    let mut queue = VecDeque::from([root]);
    depth[root] = 0;
    while let Some(node) = queue.pop_front() {
        for &k in &incidence[node] {
            let other = if pipes[k].from == node { pipes[k].to } else { pipes[k].from };
            if depth[other] == usize::MAX {
                depth[other] = depth[node] + 1;
                parent[other] = Some(node);
                parent_pipe[other] = Some(k);
                in_tree[k] = true;
                queue.push_back(other);
            }
        }
    }
    let chords = (0..pipes.len()).filter(|&k| !in_tree[k]).collect();
    SpanningTree {
        parent_pipe,
        parent,
        depth,
        chords,
    }
}

/// Identifiers may be written as JSON strings or numbers.
fn ident<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        S(String),
        I(i64),
        F(f64),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::S(s) => s,
        Raw::I(i) => i.to_string(),
        Raw::F(f) => f.to_string(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    #[serde(deserialize_with = "ident")]
    pub id: String,
    pub z_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PipeRecord {
    #[serde(deserialize_with = "ident")]
    pub id: String,
    #[serde(deserialize_with = "ident")]
    pub from: String,
    #[serde(deserialize_with = "ident")]
    pub to: String,
    pub length_m: f64,
    pub diameter_m: f64,
    pub roughness_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConsumerRecord {
    #[serde(deserialize_with = "ident")]
    pub id: String,
    #[serde(deserialize_with = "ident")]
    pub node: String,
    #[serde(deserialize_with = "ident")]
    pub class: String,
    #[serde(rename = "daily_energy_J")]
    pub daily_energy_j: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SourceRecord {
    #[serde(deserialize_with = "ident")]
    pub node: String,
}

/// On-disk network description. Units are SI and embedded in key names.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub nodes: Vec<NodeRecord>,
    pub pipes: Vec<PipeRecord>,
    #[serde(default)]
    pub consumers: Vec<ConsumerRecord>,
    pub source: SourceRecord,
}

impl NetworkFile {
    pub fn into_topology<T: Scalar>(self) -> Result<NetworkTopology<T>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(k, n)| (n.id.as_str(), k))
            .collect();
        let lookup = |id: &str, what: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::InvalidNetwork(format!("{what} references unknown node {id}")))
        };
        let pipes = self
            .pipes
            .iter()
            .map(|p| {
                Ok(Pipe {
                    id: p.id.clone(),
                    from: lookup(&p.from, &format!("pipe {}", p.id))?,
                    to: lookup(&p.to, &format!("pipe {}", p.id))?,
                    length: lit(p.length_m),
                    diameter: lit(p.diameter_m),
                    roughness: lit(p.roughness_m),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let consumers = self
            .consumers
            .iter()
            .map(|c| {
                Ok(Consumer {
                    id: c.id.clone(),
                    node: lookup(&c.node, &format!("consumer {}", c.id))?,
                    class_id: c.class.clone(),
                    daily_energy: lit(c.daily_energy_j),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let source = SourceEdge {
            node: lookup(&self.source.node, "source")?,
        };
        let nodes = self
            .nodes
            .into_iter()
            .map(|n| Node {
                id: n.id,
                z: lit(n.z_m),
            })
            .collect();
        NetworkTopology::new(nodes, pipes, consumers, source)
    }
}

/// Parses and validates a network from JSON text.
pub fn parse_network<T: Scalar>(json: &str, origin: &str) -> Result<NetworkTopology<T>> {
    let file: NetworkFile = serde_json::from_str(json).map_err(|e| Error::Parse {
        origin: origin.to_string(),
        message: e.to_string(),
    })?;
    file.into_topology()
}

/// Reads, parses and validates a network file.
pub fn load_network<T: Scalar>(path: impl AsRef<Path>) -> Result<NetworkTopology<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_network(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE: &str = r#"{
        "nodes": [{"id": "S", "z_m": 0.0}, {"id": "H", "z_m": 0.0}],
        "pipes": [{"id": "p", "from": "S", "to": "H", "length_m": 100.0, "diameter_m": 0.1, "roughness_m": 1e-4}],
        "consumers": [{"id": "h", "node": "H", "class": 0, "daily_energy_J": 1e9}],
        "source": {"node": "S"}
    }"#;

    const DIAMOND: &str = r#"{
        "nodes": [{"id": 1, "z_m": 0}, {"id": 2, "z_m": 0}, {"id": 3, "z_m": 0}, {"id": 4, "z_m": 0}],
        "pipes": [
            {"id": "a", "from": 1, "to": 2, "length_m": 100, "diameter_m": 0.1, "roughness_m": 0},
            {"id": "b", "from": 1, "to": 3, "length_m": 100, "diameter_m": 0.1, "roughness_m": 0},
            {"id": "c", "from": 2, "to": 4, "length_m": 100, "diameter_m": 0.1, "roughness_m": 0},
            {"id": "d", "from": 3, "to": 4, "length_m": 100, "diameter_m": 0.1, "roughness_m": 0}
        ],
        "consumers": [{"id": "h", "node": 4, "class": "res", "daily_energy_J": 1e9}],
        "source": {"node": 1}
    }"#;

    #[test]
    fn single_pipe_is_a_tree() {
        let net: NetworkTopology<f64> = parse_network(SINGLE, "single").unwrap();
        assert_eq!(net.cycle_rank(), 0);
        assert!(net.fundamental_loops().is_empty());
        assert_eq!(
            net.path_to_consumer(0).unwrap(),
            vec![OrientedEdge { pipe: 0, sign: 1 }]
        );
    }

    #[test]
    fn diamond_has_one_loop() {
        let net: NetworkTopology<f64> = parse_network(DIAMOND, "diamond").unwrap();
        assert_eq!(net.cycle_rank(), 1);
        let loops = net.fundamental_loops();
        assert_eq!(loops.len(), 1);
        // chord d (3 -> 4) closes through 4 -> 2 -> 1 -> 3
        assert_eq!(loops[0].chord, 3);
        let signed: Vec<(usize, i8)> = loops[0].edges.iter().map(|e| (e.pipe, e.sign)).collect();
        assert_eq!(signed, vec![(3, 1), (2, -1), (0, -1), (1, 1)]);
    }

    #[test]
    fn zero_diameter_is_rejected() {
        let bad = SINGLE.replace("\"diameter_m\": 0.1", "\"diameter_m\": 0.0");
        let err = parse_network::<f64>(&bad, "bad").unwrap_err();
        assert!(matches!(err, Error::InvalidNetwork(ref m) if m.contains("diameter")), "{err}");
    }

    #[test]
    fn disconnected_and_duplicate_inputs_are_rejected() {
        let extra = SINGLE.replace(
            r#"{"id": "H", "z_m": 0.0}"#,
            r#"{"id": "H", "z_m": 0.0}, {"id": "X", "z_m": 0.0}"#,
        );
        assert!(matches!(
            parse_network::<f64>(&extra, "x"),
            Err(Error::InvalidNetwork(m)) if m.contains("disconnected")
        ));
        let dup = SINGLE.replace(r#""id": "H""#, r#""id": "S""#);
        assert!(parse_network::<f64>(&dup, "x").is_err());
        assert!(matches!(
            parse_network::<f64>("{nodes: ", "x"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn consumer_at_source_has_empty_path() {
        let at_source = SINGLE.replace(r#""node": "H", "class""#, r#""node": "S", "class""#);
        let net: NetworkTopology<f64> = parse_network(&at_source, "x").unwrap();
        assert!(net.path_to_consumer(0).unwrap().is_empty());
    }

    #[test]
    fn file_round_trip() {
        let net: NetworkTopology<f64> = parse_network(DIAMOND, "diamond").unwrap();
        let again: NetworkTopology<f64> = parse_network(&net.to_json(), "again").unwrap();
        assert_eq!(net.to_file(), again.to_file());
    }
}
