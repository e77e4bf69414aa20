//! Graph representation and multi-way walk sequence extraction.
//!
//! Each node yields length-K walk sequences under three traversals (BFS,
//! DFS, random walk), each repeated M times. BFS/DFS randomize neighbor
//! expansion order per repetition; traversals that exhaust a small
//! component restart from the source, and isolated nodes stall in place,
//! so every sequence has exactly K entries.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge file {path}: line {line}: {reason}")]
    BadEdgeFile {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("node index {0} out of range for {1} nodes")]
    NodeOutOfRange(usize, usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Undirected-by-default adjacency structure with sorted neighbor lists.
#[derive(Debug, Clone)]
pub struct Graph {
    n_nodes: usize,
    adjacency: Vec<Vec<usize>>,
    directed: bool,
}

impl Graph {
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)], directed: bool) -> Self {
        let mut adjacency = vec![Vec::new(); n_nodes];
        for &(a, b) in edges {
            assert!(a < n_nodes && b < n_nodes, "edge ({a},{b}) out of range");
            adjacency[a].push(b);
            if !directed && a != b {
                adjacency[b].push(a);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Graph {
            n_nodes,
            adjacency,
            directed,
        }
    }

    pub fn ring(n_nodes: usize) -> Self {
        let edges: Vec<(usize, usize)> = (0..n_nodes).map(|i| (i, (i + 1) % n_nodes)).collect();
        Graph::from_edges(n_nodes, &edges, false)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        let total: usize = self.adjacency.iter().map(|l| l.len()).sum();
        if self.directed {
            total
        } else {
            total / 2
        }
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Edge-list CSV: two integer columns `src,dst`, optional header,
    /// zero-based ids. N is inferred as max id + 1 unless given.
    pub fn load_edge_csv(path: &Path, n_nodes: Option<usize>) -> Result<Graph, GraphError> {
        let file = std::fs::File::open(path).map_err(GraphError::Io)?;
        let reader = std::io::BufReader::new(file);
        let mut edges = Vec::new();
        let mut max_id = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (a, b) = (cols.next().unwrap_or(""), cols.next().unwrap_or(""));
            match (a.parse::<usize>(), b.parse::<usize>()) {
                (Ok(src), Ok(dst)) => {
                    max_id = max_id.max(src).max(dst);
                    edges.push((src, dst));
                }
                _ if lineno == 0 => continue, // header row
                _ => {
                    return Err(GraphError::BadEdgeFile {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        reason: format!("expected two integers, got {line:?}"),
                    });
                }
            }
        }
        let n = n_nodes.unwrap_or(if edges.is_empty() { 0 } else { max_id + 1 });
        if max_id >= n && !edges.is_empty() {
            return Err(GraphError::NodeOutOfRange(max_id, n));
        }
        Ok(Graph::from_edges(n, &edges, false))
    }

    pub fn save_edge_csv(&self, path: &Path) -> Result<(), GraphError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "src,dst")?;
        for (a, list) in self.adjacency.iter().enumerate() {
            for &b in list {
                if self.directed || a <= b {
                    writeln!(f, "{a},{b}")?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WalkType {
    Bfs,
    Dfs,
    RandomWalk,
}

impl WalkType {
    pub const ALL: [WalkType; 3] = [WalkType::Bfs, WalkType::Dfs, WalkType::RandomWalk];

    pub fn label(&self) -> &'static str {
        match self {
            WalkType::Bfs => "bfs",
            WalkType::Dfs => "dfs",
            WalkType::RandomWalk => "rw",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            WalkType::Bfs => 0,
            WalkType::Dfs => 1,
            WalkType::RandomWalk => 2,
        }
    }
}

/// 3 x M x N collection of length-K node-index sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkSet {
    pub k: usize,
    pub m: usize,
    pub n_nodes: usize,
    pub seed: u64,
    /// walks[walk_type][m][node]
    walks: Vec<Vec<Vec<Vec<usize>>>>,
}

impl WalkSet {
    pub fn sequence(&self, walk_type: WalkType, m: usize, node: usize) -> &[usize] {
        &self.walks[walk_type.index()][m][node]
    }

    pub fn set_sequence(&mut self, walk_type: WalkType, m: usize, node: usize, seq: Vec<usize>) {
        assert_eq!(seq.len(), self.k);
        self.walks[walk_type.index()][m][node] = seq;
    }

    pub fn dump_csv(&self, path: &Path) -> Result<(), GraphError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for wt in WalkType::ALL {
            for m in 0..self.m {
                for node in 0..self.n_nodes {
                    let seq = self
                        .sequence(wt, m, node)
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(",");
                    writeln!(f, "{},{m},{node},{seq}", wt.label())?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// First K nodes in breadth-first visitation order, neighbor expansion in
/// seeded-random order; restarts from `start` when the component runs out.
pub fn bfs_walk(g: &Graph, start: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(start < g.n_nodes(), "start node out of range");
    let mut walk = Vec::with_capacity(k);
    while walk.len() < k {
        let mut visited = vec![false; g.n_nodes()];
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(node) = queue.pop_front() {
            walk.push(node);
            if walk.len() == k {
                return walk;
            }
            let mut order: Vec<usize> = g.neighbors(node).to_vec();
            order.shuffle(rng);
            for nb in order {
                if !visited[nb] {
                    visited[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
    }
    walk
}

/// Depth-first preorder, seeded-random neighbor order, same restart rule.
pub fn dfs_walk(g: &Graph, start: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(start < g.n_nodes(), "start node out of range");
    let mut walk = Vec::with_capacity(k);
    while walk.len() < k {
        let mut visited = vec![false; g.n_nodes()];
        let mut stack = vec![start];
        while let Some(node) = stack.pop() {
            if visited[node] {
                continue;
            }
            visited[node] = true;
            walk.push(node);
            if walk.len() == k {
                return walk;
            }
            let mut order: Vec<usize> = g
                .neighbors(node)
                .iter()
                .copied()
                .filter(|&nb| !visited[nb])
                .collect();
            order.shuffle(rng);
            // pushed in reverse so the first of `order` is expanded next
            for nb in order.into_iter().rev() {
                stack.push(nb);
            }
        }
    }
    walk
}

/// Uniform random walk; a degree-0 node stalls in place.
pub fn random_walk(g: &Graph, start: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(start < g.n_nodes(), "start node out of range");
    let mut walk = Vec::with_capacity(k);
    let mut cur = start;
    for _ in 0..k {
        walk.push(cur);
        let nbs = g.neighbors(cur);
        if !nbs.is_empty() {
            cur = nbs[rng.gen_range(0..nbs.len())];
        }
    }
    walk
}

fn substream(seed: u64, walk_type: WalkType, m: usize, node: usize) -> ChaCha8Rng {
    // splitmix64-style mixing so (type, m, node) triples get independent streams
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(1 + walk_type.index() as u64))
        .wrapping_add((m as u64).wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add((node as u64).wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// All 3*M*N walk sequences, deterministic under `seed`.
pub fn generate_walks(g: &Graph, k: usize, m: usize, seed: u64) -> WalkSet {
    assert!(k >= 1 && m >= 1, "K and M must be at least 1");
    let n = g.n_nodes();
    let mut walks = Vec::with_capacity(3);
    for wt in WalkType::ALL {
        let mut per_type = Vec::with_capacity(m);
        for rep in 0..m {
            let mut per_rep = Vec::with_capacity(n);
            for node in 0..n {
                let mut rng = substream(seed, wt, rep, node);
                let seq = match wt {
                    WalkType::Bfs => bfs_walk(g, node, k, &mut rng),
                    WalkType::Dfs => dfs_walk(g, node, k, &mut rng),
                    WalkType::RandomWalk => random_walk(g, node, k, &mut rng),
                };
                per_rep.push(seq);
            }
            per_type.push(per_rep);
        }
        walks.push(per_type);
    }
    WalkSet {
        k,
        m,
        n_nodes: n,
        seed,
        walks,
    }
}

/// BFS depth of every node from `start`, usize::MAX when unreachable.
/// Used by tests to check depth monotonicity.
pub fn bfs_depths(g: &Graph, start: usize) -> Vec<usize> {
    let mut depth = vec![usize::MAX; g.n_nodes()];
    let mut queue = VecDeque::new();
    depth[start] = 0;
    queue.push_back(start);
    while let Some(node) = queue.pop_front() {
        for &nb in g.neighbors(node) {
            if depth[nb] == usize::MAX {
                depth[nb] = depth[node] + 1;
                queue.push_back(nb);
            }
        }
    }
    depth
}
