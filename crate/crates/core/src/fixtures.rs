//! Synthetic test networks.
//!
//! All fixtures are built as [`NetworkFile`]s so they can be written to disk
//! and loaded back through the regular parser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::{
    ConsumerRecord, NetworkFile, NetworkTopology, NodeRecord, PipeRecord, SourceRecord,
};

/// Environment variable holding the seed of randomized fixtures.
pub const SEED_VAR: &str = "HEATNET_SEED";

/// Seed from `HEATNET_SEED`, or `default` when unset or unparsable.
pub fn seed_from_env(default: u64) -> u64 {
    std::env::var(SEED_VAR)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(default)
}

/// Incremental construction of a network description.
#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    file: NetworkFile,
}

impl NetworkBuilder {
    pub fn new(source: &str) -> Self {
        Self {
            file: NetworkFile {
                nodes: vec![NodeRecord {
                    id: source.into(),
                    z_m: 0.0,
                }],
                pipes: Vec::new(),
                consumers: Vec::new(),
                source: SourceRecord { node: source.into() },
            },
        }
    }

    pub fn node(mut self, id: &str, z_m: f64) -> Self {
        self.file.nodes.push(NodeRecord { id: id.into(), z_m });
        self
    }

    pub fn pipe(mut self, id: &str, from: &str, to: &str, length_m: f64, diameter_m: f64) -> Self {
        self.file.pipes.push(PipeRecord {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            length_m,
            diameter_m,
            roughness_m: 4e-5,
        });
        self
    }

    pub fn consumer(mut self, id: &str, node: &str, class: &str, daily_energy_j: f64) -> Self {
        self.file.consumers.push(ConsumerRecord {
            id: id.into(),
            node: node.into(),
            class: class.into(),
            daily_energy_j,
        });
        self
    }

    pub fn file(self) -> NetworkFile {
        self.file
    }

    pub fn build(self) -> Result<NetworkTopology<f64>> {
        self.file.into_topology()
    }
}

/// Daily energy of a consumer with mean demand `kw` at the reference
/// daily temperature of the default scenario.
pub fn daily(kw: f64) -> f64 {
    kw * 1e3 * 86400.0 / 0.84
}

/// One pipe from the source to a single consumer.
pub fn single_pipe(length_m: f64, diameter_m: f64) -> NetworkFile {
    NetworkBuilder::new("S")
        .node("H", 0.0)
        .pipe("p", "S", "H", length_m, diameter_m)
        .consumer("h", "H", "flat", daily(200.0))
        .file()
}

/// Branched tree with five pipes and three consumers.
pub fn tree() -> NetworkFile {
    NetworkBuilder::new("S")
        .node("a", 2.0)
        .node("b", 4.0)
        .node("c", -1.0)
        .node("d", 6.0)
        .node("e", 3.0)
        .pipe("sa", "S", "a", 300.0, 0.1)
        .pipe("ab", "a", "b", 200.0, 0.08)
        .pipe("ac", "a", "c", 250.0, 0.05)
        .pipe("bd", "b", "d", 150.0, 0.05)
        .pipe("be", "b", "e", 180.0, 0.05)
        .consumer("hc", "c", "residential", daily(150.0))
        .consumer("hd", "d", "commercial", daily(120.0))
        .consumer("he", "e", "residential", daily(100.0))
        .file()
}

/// Two parallel routes joining before a consumer, plus a side branch.
pub fn diamond() -> NetworkFile {
    NetworkBuilder::new("S")
        .node("a", 0.0)
        .node("b", 0.0)
        .node("H", 1.0)
        .node("T", 2.0)
        .pipe("sa", "S", "a", 200.0, 0.08)
        .pipe("sb", "S", "b", 350.0, 0.08)
        .pipe("ah", "a", "H", 250.0, 0.08)
        .pipe("bh", "b", "H", 150.0, 0.08)
        .pipe("ht", "H", "T", 200.0, 0.05)
        .consumer("hh", "H", "residential", daily(200.0))
        .consumer("ht", "T", "commercial", daily(100.0))
        .file()
}

/// Ladder with two independent loops.
pub fn two_loop() -> NetworkFile {
    NetworkBuilder::new("S")
        .node("a", 1.0)
        .node("b", 2.0)
        .node("c", 0.0)
        .node("d", 3.0)
        .node("e", 1.0)
        .pipe("sa", "S", "a", 250.0, 0.08)
        .pipe("ab", "a", "b", 300.0, 0.065)
        .pipe("sc", "S", "c", 200.0, 0.08)
        .pipe("cd", "c", "d", 350.0, 0.065)
        .pipe("ac", "a", "c", 150.0, 0.05)
        .pipe("bd", "b", "d", 180.0, 0.05)
        .pipe("be", "b", "e", 120.0, 0.05)
        .consumer("hb", "b", "residential", daily(120.0))
        .consumer("hd", "d", "commercial", daily(150.0))
        .consumer("he", "e", "residential", daily(80.0))
        .consumer("hc", "c", "flat", daily(60.0))
        .file()
}

/// Two branches merging into a common pipe.
pub fn merge() -> NetworkFile {
    NetworkBuilder::new("S")
        .node("a", 0.0)
        .node("b", 0.0)
        .node("M", 0.0)
        .node("H", 0.0)
        .pipe("sa", "S", "a", 200.0, 0.065)
        .pipe("sb", "S", "b", 320.0, 0.065)
        .pipe("am", "a", "M", 240.0, 0.065)
        .pipe("bm", "b", "M", 120.0, 0.065)
        .pipe("mh", "M", "H", 160.0, 0.08)
        .consumer("ha", "a", "commercial", daily(60.0))
        .consumer("hh", "H", "residential", daily(220.0))
        .file()
}

/// Ten pipes in series with consumers along the way; 20 cells per pipe give
/// 200 cells.
pub fn chain() -> NetworkFile {
    let mut b = NetworkBuilder::new("n0");
    for k in 1..=10 {
        b = b.node(&format!("n{k}"), k as f64 * 0.5);
    }
    for k in 0..10 {
        let d = 0.1 - 0.005 * k as f64;
        b = b.pipe(&format!("p{k}"), &format!("n{k}"), &format!("n{}", k + 1), 100.0, d);
    }
    for k in [3, 6, 8, 10] {
        let class = if k % 2 == 0 { "residential" } else { "commercial" };
        b = b.consumer(&format!("h{k}"), &format!("n{k}"), class, daily(90.0));
    }
    b.file()
}

/// Twenty pipes with two loops formed by parallel routes, seven consumers.
/// Parallel routes carry no consumers, so their flows never reverse.
pub fn looped20() -> NetworkFile {
    NetworkBuilder::new("S")
        .node("n1", 1.0)
        .node("a1", 1.0)
        .node("b1", 2.0)
        .node("n2", 2.0)
        .node("n3", 3.0)
        .node("a2", 3.0)
        .node("b2", 4.0)
        .node("n4", 4.0)
        .node("c1", 1.0)
        .node("c2", 2.0)
        .node("d1", 2.0)
        .node("d2", 3.0)
        .node("e1", 3.0)
        .node("e2", 4.0)
        .node("f1", 5.0)
        .node("f2", 5.0)
        .node("g1", 4.0)
        .node("g2", 6.0)
        .pipe("p01", "S", "n1", 300.0, 0.15)
        .pipe("p02", "n1", "a1", 200.0, 0.1)
        .pipe("p03", "a1", "n2", 200.0, 0.1)
        .pipe("p04", "n1", "b1", 250.0, 0.1)
        .pipe("p05", "b1", "n2", 250.0, 0.1)
        .pipe("p06", "n2", "n3", 300.0, 0.125)
        .pipe("p07", "n3", "a2", 150.0, 0.08)
        .pipe("p08", "a2", "n4", 200.0, 0.08)
        .pipe("p09", "n3", "b2", 200.0, 0.08)
        .pipe("p10", "b2", "n4", 200.0, 0.08)
        .pipe("p11", "n1", "c1", 150.0, 0.05)
        .pipe("p12", "c1", "c2", 150.0, 0.04)
        .pipe("p13", "n2", "d1", 200.0, 0.065)
        .pipe("p14", "d1", "d2", 150.0, 0.05)
        .pipe("p15", "n3", "e1", 150.0, 0.05)
        .pipe("p16", "n4", "f1", 200.0, 0.065)
        .pipe("p17", "f1", "f2", 150.0, 0.05)
        .pipe("p18", "n4", "g1", 150.0, 0.065)
        .pipe("p19", "g1", "g2", 200.0, 0.05)
        .pipe("p20", "e1", "e2", 120.0, 0.04)
        .consumer("hc1", "c1", "residential", daily(120.0))
        .consumer("hc2", "c2", "commercial", daily(90.0))
        .consumer("hd2", "d2", "residential", daily(200.0))
        .consumer("he2", "e2", "residential", daily(80.0))
        .consumer("hf2", "f2", "commercial", daily(220.0))
        .consumer("hg1", "g1", "flat", daily(100.0))
        .consumer("hg2", "g2", "residential", daily(250.0))
        .file()
}

/// A long-distance tree for timing comparisons: few pipes, several
/// kilometers long, so that fine discretizations give many cells.
pub fn bench() -> NetworkFile {
    NetworkBuilder::new("S")
        .node("t1", 2.0)
        .node("t2", 4.0)
        .node("t3", 6.0)
        .node("x1", 3.0)
        .node("x2", 5.0)
        .node("x3", 8.0)
        .node("y3", 7.0)
        .pipe("trunk1", "S", "t1", 1500.0, 0.2)
        .pipe("trunk2", "t1", "t2", 1200.0, 0.175)
        .pipe("trunk3", "t2", "t3", 1000.0, 0.15)
        .pipe("br1", "t1", "x1", 800.0, 0.1)
        .pipe("br2", "t2", "x2", 900.0, 0.1)
        .pipe("br3", "t3", "x3", 700.0, 0.1)
        .pipe("br4", "t3", "y3", 600.0, 0.1)
        .consumer("h1", "x1", "residential", daily(600.0))
        .consumer("h2", "x2", "commercial", daily(500.0))
        .consumer("h3", "x3", "residential", daily(550.0))
        .consumer("h4", "y3", "residential", daily(450.0))
        .file()
}

/// Random connected network: a random tree on `n_nodes` nodes plus
/// `n_chords` extra pipes, random elevations in [-20, 20] m and consumers on
/// roughly half of the nodes.
pub fn random_network(seed: u64, n_nodes: usize, n_chords: usize) -> NetworkFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_nodes = n_nodes.max(2);
    let mut b = NetworkBuilder::new("n0");
    for k in 1..n_nodes {
        b = b.node(&format!("n{k}"), rng.gen_range(-20.0..20.0));
    }
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for k in 1..n_nodes {
        let parent = rng.gen_range(0..k);
        edges.push((parent, k));
    }
    let mut tries = 0;
    while edges.len() < n_nodes - 1 + n_chords && tries < 100 * (n_chords + 1) {
        tries += 1;
        let a = rng.gen_range(0..n_nodes);
        let c = rng.gen_range(0..n_nodes);
        if a != c && !edges.iter().any(|&(x, y)| (x, y) == (a, c) || (x, y) == (c, a)) {
            edges.push((a.min(c), a.max(c)));
        }
    }
    for (k, &(from, to)) in edges.iter().enumerate() {
        b = b.pipe(
            &format!("p{k}"),
            &format!("n{from}"),
            &format!("n{to}"),
            rng.gen_range(50.0..400.0),
            rng.gen_range(0.05..0.15),
        );
    }
    let mut any = false;
    for k in 1..n_nodes {
        if rng.gen_bool(0.5) || (!any && k == n_nodes - 1) {
            any = true;
            b = b.consumer(&format!("h{k}"), &format!("n{k}"), "residential", daily(rng.gen_range(20.0..200.0)));
        }
    }
    b.file()
}
