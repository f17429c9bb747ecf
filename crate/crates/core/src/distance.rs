//! Capped breadth-first hop distances from a set of source nodes.

use std::collections::VecDeque;

use crate::error::{DealError, Result};
use crate::graph::{Adjacency, AttributedGraph, NodeId};

pub const DEFAULT_D_MAX: u32 = 5;

/// Shortest-path hop count; `Infinite` covers both unreachable pairs and pairs
/// beyond the cache cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HopDistance {
    Finite(u32),
    Infinite,
}

impl HopDistance {
    pub fn finite(self) -> Option<u32> {
        match self {
            HopDistance::Finite(d) => Some(d),
            HopDistance::Infinite => None,
        }
    }
}

impl std::fmt::Display for HopDistance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HopDistance::Finite(d) => write!(f, "{d}"),
            HopDistance::Infinite => f.write_str("inf"),
        }
    }
}

/// Per-source sparse distance tables, stored contiguously. Each source's
/// reached nodes are sorted by id for binary-search lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceCache {
    d_max: u32,
    slot: Vec<Option<u32>>,
    sources: Vec<NodeId>,
    offsets: Vec<usize>,
    nodes: Vec<u32>,
    dists: Vec<u8>,
}

impl DistanceCache {
    pub fn d_max(&self) -> u32 {
        self.d_max
    }

    pub fn sources(&self) -> &[NodeId] {
        &self.sources
    }

    pub fn is_source(&self, u: NodeId) -> bool {
        self.slot.get(u).is_some_and(|s| s.is_some())
    }

    /// Number of stored (source, node) entries, including the zero-distance self entries.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn lookup(&self, src: NodeId, v: NodeId) -> Option<HopDistance> {
        let s = (*self.slot.get(src)?)? as usize;
        let range = self.offsets[s]..self.offsets[s + 1];
        let nodes = &self.nodes[range.clone()];
        Some(match nodes.binary_search(&(v as u32)) {
            Ok(i) => HopDistance::Finite(self.dists[range.start + i] as u32),
            Err(_) => HopDistance::Infinite,
        })
    }

    /// Distance between `u` and `v`, looked up from whichever endpoint is a
    /// cached source. Pairs with neither endpoint cached count as infinite.
    pub fn distance(&self, u: NodeId, v: NodeId) -> HopDistance {
        if u == v {
            return HopDistance::Finite(0);
        }
        self.lookup(u, v)
            .or_else(|| self.lookup(v, u))
            .unwrap_or(HopDistance::Infinite)
    }
}

/// BFS from `source` over `adj`, truncated at `d_max`; returns `(node, dist)`
/// for every node reached (source included), in discovery order.
pub(crate) fn bfs_capped(adj: &Adjacency, source: NodeId, d_max: u32, seen: &mut [u32], stamp: u32) -> Vec<(NodeId, u32)> {
    let mut out = vec![(source, 0)];
    let mut queue = VecDeque::new();
    seen[source] = stamp;
    queue.push_back((source, 0u32));
    while let Some((u, d)) = queue.pop_front() {
        if d == d_max {
            continue;
        }
        for &w in adj.neighbors(u) {
            if seen[w] != stamp {
                seen[w] = stamp;
                out.push((w, d + 1));
                queue.push_back((w, d + 1));
            }
        }
    }
    out
}

/// Builds a [`DistanceCache`] over an arbitrary adjacency.
pub fn distances_over(adj: &Adjacency, sources: &[NodeId], d_max: u32) -> Result<DistanceCache> {
    let n = adj.num_nodes();
    if d_max == 0 {
        return Err(DealError::Argument("d_max must be at least 1".into()));
    }
    if d_max > u8::MAX as u32 {
        return Err(DealError::Argument(format!("d_max {d_max} exceeds {}", u8::MAX)));
    }
    let mut srcs = sources.to_vec();
    srcs.sort_unstable();
    srcs.dedup();
    if let Some(&bad) = srcs.iter().find(|&&s| s >= n) {
        return Err(DealError::Argument(format!(
            "source node {bad} out of range (n = {n})"
        )));
    }
    let mut slot = vec![None; n];
    let mut offsets = Vec::with_capacity(srcs.len() + 1);
    offsets.push(0);
    let mut nodes = Vec::new();
    let mut dists = Vec::new();
    let mut seen = vec![u32::MAX; n];
    for (i, &s) in srcs.iter().enumerate() {
        slot[s] = Some(i as u32);
        let mut reached = bfs_capped(adj, s, d_max, &mut seen, i as u32);
        reached.sort_unstable_by_key(|&(v, _)| v);
        for (v, d) in reached {
            nodes.push(v as u32);
            dists.push(d as u8);
        }
        offsets.push(nodes.len());
    }
    nodes.shrink_to_fit();
    dists.shrink_to_fit();
    Ok(DistanceCache {
        d_max,
        slot,
        sources: srcs,
        offsets,
        nodes,
        dists,
    })
}

/// Hop distances from each of `sources` over the graph's edges, capped at `d_max`.
pub fn shortest_path_distances(
    graph: &AttributedGraph,
    sources: &[NodeId],
    d_max: u32,
) -> Result<DistanceCache> {
    distances_over(graph.adjacency(), sources, d_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SparseRows;
    use proptest::prelude::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> AttributedGraph {
        let f = SparseRows::from_triplets(n, 1, vec![]).unwrap();
        AttributedGraph::new(n, 1, edges.iter().copied(), f).unwrap().0
    }

    fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<Option<u32>>> {
        let mut d = vec![vec![None; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = Some(0);
        }
        for &(u, v) in edges {
            if u != v {
                d[u][v] = Some(1);
                d[v][u] = Some(1);
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                        if d[i][j].is_none_or(|c| a + b < c) {
                            d[i][j] = Some(a + b);
                        }
                    }
                }
            }
        }
        d
    }

    #[test]
    fn path_graph() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let c = shortest_path_distances(&g, &[0], 5).unwrap();
        assert_eq!(c.distance(0, 0), HopDistance::Finite(0));
        assert_eq!(c.distance(0, 1), HopDistance::Finite(1));
        assert_eq!(c.distance(0, 2), HopDistance::Finite(2));
        assert_eq!(c.distance(2, 0), HopDistance::Finite(2));
    }

    #[test]
    fn disconnected_is_infinite() {
        let g = graph(3, &[(1, 2)]);
        let c = shortest_path_distances(&g, &[0], 5).unwrap();
        assert_eq!(c.distance(0, 1), HopDistance::Infinite);
    }

    #[test]
    fn cap_truncates_five_cycle() {
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)];
        let g = graph(5, &edges);
        // brute-force oracle says the true distance is 2
        assert_eq!(floyd_warshall(5, &edges)[0][2], Some(2));
        let c = shortest_path_distances(&g, &[0], 1).unwrap();
        assert_eq!(c.distance(0, 2), HopDistance::Infinite);
        assert_eq!(c.distance(0, 4), HopDistance::Finite(1));
    }

    #[test]
    fn invalid_arguments() {
        let g = graph(3, &[(0, 1)]);
        assert!(matches!(
            shortest_path_distances(&g, &[3], 5),
            Err(DealError::Argument(_))
        ));
        assert!(matches!(
            shortest_path_distances(&g, &[0], 0),
            Err(DealError::Argument(_))
        ));
    }

    #[test]
    fn non_source_pairs_are_misses() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let c = shortest_path_distances(&g, &[0], 5).unwrap();
        assert_eq!(c.distance(1, 2), HopDistance::Infinite);
        assert!(c.is_source(0) && !c.is_source(1));
    }

    proptest! {
        #[test]
        fn bfs_matches_floyd_warshall(
            n in 2usize..50,
            raw in proptest::collection::vec((0usize..50, 0usize..50), 1..120),
            d_max in 1u32..8,
        ) {
            let edges: Vec<_> = raw.into_iter().map(|(u, v)| (u % n, v % n)).filter(|(u, v)| u != v).collect();
            prop_assume!(!edges.is_empty());
            let g = graph(n, &edges);
            let all: Vec<_> = (0..n).collect();
            let c = shortest_path_distances(&g, &all, d_max).unwrap();
            let oracle = floyd_warshall(n, &edges);
            for u in 0..n {
                for v in 0..n {
                    let want = match oracle[u][v] {
                        Some(d) if d <= d_max => HopDistance::Finite(d),
                        _ => HopDistance::Infinite,
                    };
                    prop_assert_eq!(c.distance(u, v), want);
                    prop_assert_eq!(c.distance(u, v) == HopDistance::Finite(1), g.has_edge(u, v));
                }
            }
        }
    }
}
