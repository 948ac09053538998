//! Random diffusion graphs, sensitive subgraphs and stimulus seed sets.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MIN_NODES: usize = 10;
pub const MIN_OUT_DEGREE: usize = 3;
pub const MAX_OUT_DEGREE: usize = 5;
pub const DEFAULT_WINDOW: usize = 3;
pub const DEFAULT_SEED_COUNT: usize = 3;
pub const STIMULUS_COUNT: u32 = 20;

/// Upper clip applied after rescaling so every probability stays below 1.
const P_CEIL: f64 = 0.999;
/// Lower clip; Beta(2,5) samples can be arbitrarily close to 0.
const P_FLOOR: f64 = 1e-6;

/// How out-neighbour candidates are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    /// Nodes on a line; targets drawn among the `2 * window` nearest positions.
    Lattice { window: usize },
    /// Targets drawn uniformly from all other nodes.
    Uniform,
}

impl Default for Topology {
    fn default() -> Self {
        Topology::Lattice {
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub p: f64,
}

/// Directed graph with per-edge activation probabilities and a sensitive subset.
///
/// Regions are nodes: the region map is the identity and `region_count() == node_count()`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionGraph {
    seed: u64,
    branching_target: f64,
    edges: Vec<Edge>,
    out_offsets: Vec<usize>,
    in_edges: Vec<Vec<usize>>,
    sensitive: Vec<bool>,
    sensitive_nodes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: usize,
    edges: Vec<Edge>,
    sensitive: Vec<usize>,
    seed: u64,
    branching_target: f64,
}

impl DiffusionGraph {
    /// Build a graph from explicit edges. Edge order within a source node is kept.
    pub fn from_parts(
        nodes: usize,
        mut edges: Vec<Edge>,
        sensitive_nodes: &[usize],
        seed: u64,
        branching_target: f64,
    ) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::invalid("graph has no nodes"));
        }
        for e in &edges {
            if e.u >= nodes || e.v >= nodes {
                return Err(Error::invalid(format!("edge {}->{} out of range", e.u, e.v)));
            }
            if !(e.p > 0.0 && e.p < 1.0) {
                return Err(Error::invalid(format!("edge {}->{} has p = {}", e.u, e.v, e.p)));
            }
        }
        // stable sort keeps per-node insertion order
        edges.sort_by_key(|e| e.u);
        let mut out_offsets = vec![0usize; nodes + 1];
        for e in &edges {
            out_offsets[e.u + 1] += 1;
        }
        for i in 0..nodes {
            out_offsets[i + 1] += out_offsets[i];
        }
        let mut in_edges = vec![Vec::new(); nodes];
        for (idx, e) in edges.iter().enumerate() {
            in_edges[e.v].push(idx);
        }
        let mut graph = DiffusionGraph {
            seed,
            branching_target,
            edges,
            out_offsets,
            in_edges,
            sensitive: vec![false; nodes],
            sensitive_nodes: Vec::new(),
        };
        graph.set_sensitive(sensitive_nodes)?;
        Ok(graph)
    }

    fn set_sensitive(&mut self, nodes: &[usize]) -> Result<()> {
        let n = self.node_count();
        let mut mask = vec![false; n];
        for &v in nodes {
            if v >= n {
                return Err(Error::invalid(format!("sensitive node {v} out of range")));
            }
            mask[v] = true;
        }
        self.sensitive_nodes = (0..n).filter(|&v| mask[v]).collect();
        self.sensitive = mask;
        Ok(())
    }

    /// Copy of this graph with `nodes` as its sensitive set.
    pub fn with_sensitive(mut self, nodes: &[usize]) -> Result<Self> {
        self.set_sensitive(nodes)?;
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.sensitive.len()
    }

    pub fn region_count(&self) -> usize {
        self.node_count()
    }

    pub fn region_of(&self, node: usize) -> usize {
        node
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn branching_target(&self) -> f64 {
        self.branching_target
    }

    /// All edges, grouped by source node in ascending order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn out_edges(&self, u: usize) -> &[Edge] {
        &self.edges[self.out_offsets[u]..self.out_offsets[u + 1]]
    }

    pub fn out_degree(&self, u: usize) -> usize {
        self.out_offsets[u + 1] - self.out_offsets[u]
    }

    /// Indices into [`Self::edges`] of the edges entering `v`.
    pub fn in_edge_indices(&self, v: usize) -> &[usize] {
        &self.in_edges[v]
    }

    pub fn is_sensitive(&self, v: usize) -> bool {
        self.sensitive[v]
    }

    pub fn sensitive_nodes(&self) -> &[usize] {
        &self.sensitive_nodes
    }

    pub fn sensitive_mask(&self) -> &[bool] {
        &self.sensitive
    }

    pub fn mean_out_degree(&self) -> f64 {
        self.edges.len() as f64 / self.node_count() as f64
    }

    pub fn mean_probability(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges.iter().map(|e| e.p).sum::<f64>() / self.edges.len() as f64
    }

    /// Sorted neighbour lists of the underlying undirected graph.
    pub fn undirected_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for e in &self.edges {
            if e.u != e.v {
                adj[e.u].push(e.v);
                adj[e.v].push(e.u);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Directed BFS hop distances from a source set; `None` marks unreachable nodes.
    pub fn hop_distances_from(&self, sources: &[usize]) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.node_count()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s].is_none() {
                dist[s] = Some(0);
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or(0);
            for e in self.out_edges(u) {
                if dist[e.v].is_none() {
                    dist[e.v] = Some(d + 1);
                    queue.push_back(e.v);
                }
            }
        }
        dist
    }

    /// True when the sensitive set is connected in the undirected sense.
    pub fn sensitive_connected(&self) -> bool {
        let Some(&start) = self.sensitive_nodes.first() else {
            return true;
        };
        let adj = self.undirected_adjacency();
        let mut seen = vec![false; self.node_count()];
        seen[start] = true;
        let mut stack = vec![start];
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if self.sensitive[v] && !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.sensitive_nodes.len()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GraphFile {
            nodes: self.node_count(),
            edges: self.edges.clone(),
            sensitive: self.sensitive_nodes.clone(),
            seed: self.seed,
            branching_target: self.branching_target,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        Self::from_parts(
            file.nodes,
            file.edges,
            &file.sensitive,
            file.seed,
            file.branching_target,
        )
    }
}

/// Graph generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphParams {
    pub nodes: usize,
    pub branching_target: f64,
    pub sens_frac: f64,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default = "default_seed_count")]
    pub seeds_per_stimulus: usize,
}

fn default_seed_count() -> usize {
    DEFAULT_SEED_COUNT
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            nodes: 50,
            branching_target: 0.12,
            sens_frac: 0.2,
            topology: Topology::default(),
            seeds_per_stimulus: DEFAULT_SEED_COUNT,
        }
    }
}

/// Generate a graph on the default lattice topology without a sensitive set.
pub fn generate_graph(node_count: usize, branching_target: f64, seed: u64) -> Result<DiffusionGraph> {
    generate_graph_with(node_count, branching_target, Topology::default(), seed)
}

pub fn generate_graph_with(
    node_count: usize,
    branching_target: f64,
    topology: Topology,
    seed: u64,
) -> Result<DiffusionGraph> {
    if node_count < MIN_NODES {
        return Err(Error::invalid(format!(
            "node_count must be at least {MIN_NODES}, got {node_count}"
        )));
    }
    if !(branching_target.is_finite() && branching_target > 0.0) {
        return Err(Error::invalid(format!(
            "branching_target must be positive, got {branching_target}"
        )));
    }
    if let Topology::Lattice { window } = topology {
        if 2 * window < MAX_OUT_DEGREE {
            return Err(Error::invalid(format!(
                "lattice window {window} cannot supply {MAX_OUT_DEGREE} distinct targets"
            )));
        }
    }

    let mut rng = rng::stream(rng::derive(seed, "graph"));
    let beta = Beta::new(2.0, 5.0).expect("valid Beta parameters");
    let mut raw = Vec::new();
    for u in 0..node_count {
        let degree = rng.random_range(MIN_OUT_DEGREE..=MAX_OUT_DEGREE);
        let candidates = candidate_targets(u, node_count, topology);
        let mut picks: Vec<usize> = index::sample(&mut rng, candidates.len(), degree)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        picks.sort_unstable();
        for v in picks {
            raw.push(Edge {
                u,
                v,
                p: beta.sample(&mut rng),
            });
        }
    }

    let mean_p = raw.iter().map(|e| e.p).sum::<f64>() / raw.len() as f64;
    let mean_deg = raw.len() as f64 / node_count as f64;
    let factor = branching_target / (mean_p * mean_deg);
    if raw.iter().all(|e| e.p * factor >= 1.0) {
        return Err(Error::invalid(format!(
            "branching_target {branching_target} pushes every activation probability to 1"
        )));
    }
    for e in &mut raw {
        e.p = (e.p * factor).clamp(P_FLOOR, P_CEIL);
    }
    DiffusionGraph::from_parts(node_count, raw, &[], seed, branching_target)
}

fn candidate_targets(u: usize, n: usize, topology: Topology) -> Vec<usize> {
    match topology {
        Topology::Uniform => (0..n).filter(|&v| v != u).collect(),
        Topology::Lattice { window } => {
            let want = (2 * window).min(n - 1);
            let mut others: Vec<usize> = (0..n).filter(|&v| v != u).collect();
            // nearest positions first, ties to the lower index
            others.sort_by_key(|&v| (v.abs_diff(u), v));
            others.truncate(want);
            others.sort_unstable();
            others
        }
    }
}

/// Result of growing a sensitive set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensitiveSelection {
    pub nodes: Vec<usize>,
    pub start: usize,
    /// Set when the start node's component was smaller than the requested size.
    pub truncated: bool,
}

/// Grow a connected sensitive set of `round(fraction * n)` nodes by BFS.
///
/// The start node is drawn from the middle half of the index range; neighbours
/// are visited in ascending index order.
pub fn select_sensitive_subgraph(
    graph: &DiffusionGraph,
    fraction: f64,
    seed: u64,
) -> Result<SensitiveSelection> {
    if !(0.15..=0.25).contains(&fraction) {
        return Err(Error::invalid(format!(
            "sensitive fraction must lie in [0.15, 0.25], got {fraction}"
        )));
    }
    let n = graph.node_count();
    let target = (fraction * n as f64).round() as usize;
    let mut rng = rng::stream(rng::derive(seed, "sensitive"));
    let lo = n / 4;
    let hi = (3 * n / 4).max(lo + 1);
    let start = rng.random_range(lo..hi);
    let (nodes, truncated) = bfs_grow(&graph.undirected_adjacency(), start, target);
    let mut nodes = nodes;
    nodes.sort_unstable();
    Ok(SensitiveSelection {
        nodes,
        start,
        truncated,
    })
}

fn bfs_grow(adj: &[Vec<usize>], start: usize, target: usize) -> (Vec<usize>, bool) {
    let mut seen = vec![false; adj.len()];
    let mut order = vec![start];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    'outer: while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if order.len() >= target {
                break 'outer;
            }
            if !seen[v] {
                seen[v] = true;
                order.push(v);
                queue.push_back(v);
            }
        }
    }
    order.truncate(target.max(1));
    let truncated = order.len() < target;
    (order, truncated)
}

/// Generate a graph and attach its sensitive set.
pub fn build_graph(params: &GraphParams, seed: u64) -> Result<(DiffusionGraph, SensitiveSelection)> {
    let graph = generate_graph_with(params.nodes, params.branching_target, params.topology, seed)?;
    let selection = select_sensitive_subgraph(&graph, params.sens_frac, seed)?;
    let graph = graph.with_sensitive(&selection.nodes)?;
    Ok((graph, selection))
}

/// The fixed seed set of stimulus `z`.
///
/// An anchor is drawn among non-sensitive nodes, then the remaining seeds come
/// from its non-sensitive out-neighbours (falling back to the rest of the pool).
pub fn stimulus_seed_set(z: u32, graph: &DiffusionGraph, seed_count: usize) -> Result<Vec<usize>> {
    if !(1..=STIMULUS_COUNT).contains(&z) {
        return Err(Error::invalid(format!("stimulus id must lie in 1..=20, got {z}")));
    }
    let n = graph.node_count();
    if seed_count == 0 || seed_count > n {
        return Err(Error::invalid(format!("seed count {seed_count} invalid for {n} nodes")));
    }
    let mut rng = rng::stream(rng::derive_index(rng::derive(graph.seed(), "stimulus"), u64::from(z)));
    let mut pool: Vec<usize> = (0..n).filter(|&v| !graph.is_sensitive(v)).collect();
    if pool.len() < seed_count {
        pool = (0..n).collect();
    }
    let anchor = pool[rng.random_range(0..pool.len())];
    let mut chosen = vec![anchor];

    let mut near: Vec<usize> = graph
        .out_edges(anchor)
        .iter()
        .map(|e| e.v)
        .filter(|&v| v != anchor && pool.binary_search(&v).is_ok())
        .collect();
    near.dedup();
    let take = (seed_count - 1).min(near.len());
    for i in index::sample(&mut rng, near.len(), take) {
        chosen.push(near[i]);
    }
    let rest: Vec<usize> = pool.iter().copied().filter(|v| !chosen.contains(v)).collect();
    let missing = seed_count - chosen.len();
    for i in index::sample(&mut rng, rest.len(), missing.min(rest.len())) {
        chosen.push(rest[i]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}
