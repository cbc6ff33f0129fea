//! Road-network shortest paths: snap endpoints to nodes, run one-to-many
//! Dijkstra from each distinct source, add straight-line access legs.
//!
//! The graph is compact CSR over internal u32 indices; external node ids
//! appear only at the edges of the API. Dijkstra always settles the whole
//! component (no early exit), which is what makes results independent of
//! how callers batch their target sets.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::collections::HashMap;

use crate::geo::{haversine, CellIndex, LatLon};
use crate::ingest::RawEdge;
use crate::{Error, Result};

/// Distance tie tolerance for snapping: candidates within this of the
/// minimum count as tied and resolve to the smallest node id.
const SNAP_TIE_M: f64 = 1e-9;

pub struct RoadGraph {
    ids: Vec<u64>,
    pos: Vec<LatLon>,
    idx_of: HashMap<u64, u32>,
    offsets: Vec<u32>,
    edge_to: Vec<u32>,
    edge_len: Vec<f64>,
    node_index: CellIndex,
    max_snap_m: f64,
}

impl RoadGraph {
    // `!(x > 0.0)` rather than `x <= 0.0` so NaN lengths are rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn build(nodes: Vec<(u64, LatLon)>, edges: Vec<RawEdge>, max_snap_m: f64) -> Result<Self> {
        let mut idx_of = HashMap::with_capacity(nodes.len());
        for (i, (id, _)) in nodes.iter().enumerate() {
            if idx_of.insert(*id, i as u32).is_some() {
                return Err(Error::Graph(format!("duplicate node_id {id}")));
            }
        }
        // Directed arc list; oneway=0 rows contribute both directions.
        let mut arcs: Vec<(u32, u32, f64)> = Vec::with_capacity(edges.len() * 2);
        for (i, e) in edges.iter().enumerate() {
            if !(e.length_m > 0.0) || !e.length_m.is_finite() {
                return Err(Error::Graph(format!(
                    "edge {i}: non-positive length {}",
                    e.length_m
                )));
            }
            let from = *idx_of
                .get(&e.from)
                .ok_or_else(|| Error::Graph(format!("edge {i}: unknown endpoint {}", e.from)))?;
            let to = *idx_of
                .get(&e.to)
                .ok_or_else(|| Error::Graph(format!("edge {i}: unknown endpoint {}", e.to)))?;
            arcs.push((from, to, e.length_m));
            if !e.oneway {
                arcs.push((to, from, e.length_m));
            }
        }
        let n = nodes.len();
        let mut offsets = vec![0u32; n + 1];
        for &(from, _, _) in &arcs {
            offsets[from as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut edge_to = vec![0u32; arcs.len()];
        let mut edge_len = vec![0.0f64; arcs.len()];
        for (from, to, len) in arcs {
            let slot = cursor[from as usize] as usize;
            edge_to[slot] = to;
            edge_len[slot] = len;
            cursor[from as usize] += 1;
        }
        let positions: Vec<LatLon> = nodes.iter().map(|(_, p)| *p).collect();
        Ok(RoadGraph {
            ids: nodes.iter().map(|(id, _)| *id).collect(),
            node_index: CellIndex::build(&positions, max_snap_m),
            pos: positions,
            idx_of,
            offsets,
            edge_to,
            edge_len,
            max_snap_m,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn node_id(&self, idx: u32) -> u64 {
        self.ids[idx as usize]
    }

    pub fn node_pos(&self, idx: u32) -> LatLon {
        self.pos[idx as usize]
    }

    pub fn index_of(&self, id: u64) -> Option<u32> {
        self.idx_of.get(&id).copied()
    }

    /// Nearest node within max_snap_m, or None. Near-ties (within 1e-9 m)
    /// resolve to the smallest external node id.
    pub fn snap(&self, p: LatLon) -> Option<Snap> {
        let candidates = self
            .node_index
            .query_within(p, self.max_snap_m)
            .expect("index sized for max_snap_m");
        let mut best: Option<(u64, u32, f64)> = None;
        let mut best_d = f64::INFINITY;
        for &idx in &candidates {
            best_d = best_d.min(haversine(p, self.pos[idx]));
        }
        for idx in candidates {
            let d = haversine(p, self.pos[idx]);
            if d <= best_d + SNAP_TIE_M {
                let id = self.ids[idx];
                let take = match best {
                    None => true,
                    Some((bid, _, _)) => id < bid,
                };
                if take {
                    best = Some((id, idx as u32, d));
                }
            }
        }
        best.map(|(_, idx, d)| Snap { node: idx, dist_m: d })
    }

    /// Shortest-path distance from `source` to every node; unreachable
    /// entries are +inf. Exact Dijkstra, full settle.
    pub fn one_to_many(&self, source: u32) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.n_nodes()];
        let mut heap: BinaryHeap<Reverse<(OrdF64, u32)>> = BinaryHeap::new();
        dist[source as usize] = 0.0;
        heap.push(Reverse((OrdF64(0.0), source)));
        while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
            if d > dist[u as usize] {
                continue;
            }
            let (lo, hi) = (self.offsets[u as usize] as usize, self.offsets[u as usize + 1] as usize);
            for k in lo..hi {
                let v = self.edge_to[k];
                let nd = d + self.edge_len[k];
                if nd < dist[v as usize] {
                    dist[v as usize] = nd;
                    heap.push(Reverse((OrdF64(nd), v)));
                }
            }
        }
        dist
    }

    /// Home-to-outlet network distance: snapped path plus straight-line
    /// access legs at both ends. None when either endpoint fails to snap or
    /// no path exists.
    pub fn network_distance(&self, from: LatLon, to: LatLon) -> Option<f64> {
        let s = self.snap(from)?;
        let t = self.snap(to)?;
        let path = self.one_to_many(s.node)[t.node as usize];
        compose_network_distance(path, s.dist_m, t.dist_m)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Snap {
    pub node: u32,
    pub dist_m: f64,
}

/// Single composition point so batched and one-shot paths produce
/// bit-identical sums: (path + origin leg) + destination leg.
pub fn compose_network_distance(path_m: f64, leg_from_m: f64, leg_to_m: f64) -> Option<f64> {
    if path_m.is_finite() {
        Some((path_m + leg_from_m) + leg_to_m)
    } else {
        None
    }
}

/// Totally ordered f64 for the heap (distances are finite, non-negative).
#[derive(PartialEq, Copy, Clone)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalFrame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame() -> LocalFrame {
        LocalFrame::new(LatLon::new(30.2, -81.8))
    }

    fn edge(from: u64, to: u64, length_m: f64) -> RawEdge {
        RawEdge { from, to, length_m, oneway: false }
    }

    #[test]
    fn minimal_graph_both_directions() {
        let f = frame();
        let nodes = vec![(1, f.unproject(0.0, 0.0)), (2, f.unproject(1_000.0, 0.0))];
        let g = RoadGraph::build(nodes, vec![edge(1, 2, 1_000.0)], 500.0).unwrap();
        let a = g.index_of(1).unwrap();
        let b = g.index_of(2).unwrap();
        assert_eq!(g.one_to_many(a)[b as usize], 1_000.0);
        assert_eq!(g.one_to_many(b)[a as usize], 1_000.0);
        assert_eq!(g.one_to_many(a)[a as usize], 0.0);
    }

    #[test]
    fn dangling_edge_is_fatal_with_index() {
        let f = frame();
        let nodes = vec![(1, f.unproject(0.0, 0.0))];
        let err = match RoadGraph::build(nodes, vec![edge(1, 9, 10.0)], 500.0) {
            Err(e) => e,
            Ok(_) => panic!("dangling edge accepted"),
        };
        assert!(err.to_string().contains("edge 0"), "{err}");
    }

    #[test]
    fn nonpositive_length_is_fatal() {
        let f = frame();
        let nodes = vec![(1, f.unproject(0.0, 0.0)), (2, f.unproject(10.0, 0.0))];
        assert!(RoadGraph::build(nodes, vec![edge(1, 2, 0.0)], 500.0).is_err());
    }

    #[test]
    fn square_grid_adjacency() {
        let f = frame();
        let nodes = vec![
            (1, f.unproject(0.0, 0.0)),
            (2, f.unproject(100.0, 0.0)),
            (3, f.unproject(100.0, 100.0)),
            (4, f.unproject(0.0, 100.0)),
        ];
        let edges = vec![edge(1, 2, 100.0), edge(2, 3, 100.0), edge(3, 4, 100.0), edge(4, 1, 100.0)];
        let g = RoadGraph::build(nodes, edges, 500.0).unwrap();
        let d = g.one_to_many(g.index_of(1).unwrap());
        assert_eq!(d[g.index_of(2).unwrap() as usize], 100.0);
        assert_eq!(d[g.index_of(4).unwrap() as usize], 100.0);
        // Opposite corner: two hops either way.
        assert_eq!(d[g.index_of(3).unwrap() as usize], 200.0);
    }

    #[test]
    fn snap_rules() {
        let f = frame();
        let nodes = vec![
            (7, f.unproject(0.0, 0.0)),
            (3, f.unproject(200.0, 0.0)),
        ];
        let g = RoadGraph::build(nodes, vec![edge(7, 3, 200.0)], 500.0).unwrap();
        // Exactly at a node.
        let s = g.snap(f.unproject(0.0, 0.0)).unwrap();
        assert_eq!(g.node_id(s.node), 7);
        assert_eq!(s.dist_m, 0.0);
        // Beyond max_snap_m from every node.
        assert!(g.snap(f.unproject(0.0, 5_000.0)).is_none());
        // Equidistant between nodes 7 and 3: the smaller id wins.
        let mid = f.unproject(100.0, 0.0);
        let s = g.snap(mid).unwrap();
        assert_eq!(g.node_id(s.node), 3);
    }

    #[test]
    fn chain_network_distance() {
        let f = frame();
        let nodes = vec![
            (1, f.unproject(0.0, 0.0)),
            (2, f.unproject(400.0, 0.0)),
            (3, f.unproject(1_000.0, 0.0)),
        ];
        let edges = vec![edge(1, 2, 400.0), edge(2, 3, 600.0)];
        let g = RoadGraph::build(nodes, edges, 500.0).unwrap();
        let home = f.unproject(0.0, 0.0);
        let outlet = f.unproject(1_000.0, 0.0);
        let d = g.network_distance(home, outlet).unwrap();
        // Zero-length access legs: the path alone.
        assert_eq!(d, 1_000.0);

        // Same snap node for both endpoints: access legs only.
        let near_a = f.unproject(10.0, 0.0);
        let near_b = f.unproject(0.0, 10.0);
        let node = f.unproject(0.0, 0.0);
        let d = g.network_distance(near_a, near_b).unwrap();
        let legs = (0.0 + haversine(near_a, node)) + haversine(near_b, node);
        assert_eq!(d, legs);
    }

    #[test]
    fn unreachable_is_none() {
        let f = frame();
        let nodes = vec![
            (1, f.unproject(0.0, 0.0)),
            (2, f.unproject(100.0, 0.0)),
            (3, f.unproject(10_000.0, 0.0)),
            (4, f.unproject(10_100.0, 0.0)),
        ];
        let edges = vec![edge(1, 2, 100.0), edge(3, 4, 100.0)];
        let g = RoadGraph::build(nodes, edges, 500.0).unwrap();
        assert!(g
            .network_distance(f.unproject(0.0, 0.0), f.unproject(10_000.0, 0.0))
            .is_none());
    }

    #[test]
    fn oneway_respected() {
        let f = frame();
        let nodes = vec![(1, f.unproject(0.0, 0.0)), (2, f.unproject(100.0, 0.0))];
        let edges = vec![RawEdge { from: 1, to: 2, length_m: 100.0, oneway: true }];
        let g = RoadGraph::build(nodes, edges, 500.0).unwrap();
        assert_eq!(g.one_to_many(g.index_of(1).unwrap())[g.index_of(2).unwrap() as usize], 100.0);
        assert!(g.one_to_many(g.index_of(2).unwrap())[g.index_of(1).unwrap() as usize].is_infinite());
    }

    /// Bellman-Ford oracle: same relaxation arithmetic, no ordering
    /// assumptions. Must match Dijkstra bit-for-bit.
    fn bellman_ford(g: &RoadGraph, source: u32) -> Vec<f64> {
        let n = g.n_nodes();
        let mut dist = vec![f64::INFINITY; n];
        dist[source as usize] = 0.0;
        loop {
            let mut changed = false;
            for u in 0..n {
                if !dist[u].is_finite() {
                    continue;
                }
                for k in g.offsets[u] as usize..g.offsets[u + 1] as usize {
                    let v = g.edge_to[k] as usize;
                    let nd = dist[u] + g.edge_len[k];
                    if nd < dist[v] {
                        dist[v] = nd;
                        changed = true;
                    }
                }
            }
            if !changed {
                return dist;
            }
        }
    }

    #[test]
    fn dijkstra_matches_bellman_ford_on_random_graphs() {
        let f = frame();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for round in 0..40 {
            let n = rng.gen_range(2..80u64);
            let nodes: Vec<(u64, LatLon)> = (0..n)
                .map(|i| (i, f.unproject(rng.gen::<f64>() * 5_000.0, rng.gen::<f64>() * 5_000.0)))
                .collect();
            let mut edges = Vec::new();
            // Random spanning chain plus extra arcs.
            for i in 1..n {
                edges.push(RawEdge {
                    from: rng.gen_range(0..i),
                    to: i,
                    length_m: rng.gen::<f64>() * 900.0 + 1.0,
                    oneway: rng.gen_bool(0.3),
                });
            }
            for _ in 0..rng.gen_range(0..3 * n) {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                if a != b {
                    edges.push(RawEdge {
                        from: a,
                        to: b,
                        length_m: rng.gen::<f64>() * 900.0 + 1.0,
                        oneway: rng.gen_bool(0.5),
                    });
                }
            }
            let g = RoadGraph::build(nodes, edges, 500.0).unwrap();
            let source = rng.gen_range(0..n) as u32;
            let got = g.one_to_many(source);
            let want = bellman_ford(&g, source);
            for v in 0..g.n_nodes() {
                assert!(
                    got[v] == want[v] || (got[v].is_infinite() && want[v].is_infinite()),
                    "round {round}: node {v}: {} vs {}",
                    got[v],
                    want[v]
                );
            }
        }
    }

    // Batching transparency: distances to a target set never depend on how
    // the set is partitioned, because the full component is settled.
    #[test]
    fn partition_independence() {
        let f = frame();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let nodes: Vec<(u64, LatLon)> = (0..50)
            .map(|i| (i, f.unproject(rng.gen::<f64>() * 3_000.0, rng.gen::<f64>() * 3_000.0)))
            .collect();
        let mut edges = Vec::new();
        for i in 1..50 {
            edges.push(edge(rng.gen_range(0..i), i, rng.gen::<f64>() * 500.0 + 1.0));
        }
        let g = RoadGraph::build(nodes, edges, 500.0).unwrap();
        let all = g.one_to_many(0);
        let again = g.one_to_many(0);
        assert_eq!(all, again);
    }

    // Near-metric bound: network distance can't beat the straight line by
    // more than the two access legs allow.
    #[test]
    fn network_lower_bound() {
        let f = frame();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let k = 6;
        let mut nodes = Vec::new();
        for r in 0..k {
            for c in 0..k {
                nodes.push(((r * k + c) as u64, f.unproject(c as f64 * 400.0, r as f64 * 400.0)));
            }
        }
        let mut edges = Vec::new();
        for r in 0..k {
            for c in 0..k {
                let id = (r * k + c) as u64;
                if c + 1 < k {
                    let right = f.unproject((c + 1) as f64 * 400.0, r as f64 * 400.0);
                    edges.push(edge(id, id + 1, haversine(f.unproject(c as f64 * 400.0, r as f64 * 400.0), right)));
                }
                if r + 1 < k {
                    let up = f.unproject(c as f64 * 400.0, (r + 1) as f64 * 400.0);
                    edges.push(edge(id, id + k as u64, haversine(f.unproject(c as f64 * 400.0, r as f64 * 400.0), up)));
                }
            }
        }
        let g = RoadGraph::build(nodes, edges, 500.0).unwrap();
        for _ in 0..200 {
            let a = f.unproject(rng.gen::<f64>() * 2_000.0, rng.gen::<f64>() * 2_000.0);
            let b = f.unproject(rng.gen::<f64>() * 2_000.0, rng.gen::<f64>() * 2_000.0);
            if let Some(d) = g.network_distance(a, b) {
                assert!(d >= haversine(a, b) - 2.0 * 500.0 - 1e-9);
            }
        }
    }
}
