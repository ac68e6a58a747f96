use std::collections::VecDeque;

use crate::error::GraphError;

/// Node identifier. Ids are dense integers `1..=n`.
pub type NodeId = u32;

/// Undirected simple connected graph with ids `1..=n`.
///
/// Adjacency lists are kept sorted by neighbor id; for planar inputs the
/// per-node order is replaced by the embedding's cyclic order (see
/// [`crate::embedding::PlanarEmbedding::apply_rotation`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: u32,
    adj: Vec<Vec<NodeId>>, // index 0 unused
    m: usize,
}

impl Graph {
    /// Builds a graph from an explicit edge list. Rejects self-loops,
    /// parallel edges, out-of-range ids and disconnected inputs.
    pub fn new(n: u32, edges: &[(NodeId, NodeId)]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Invalid("graph must have at least one node".into()));
        }
        let mut adj = vec![Vec::new(); n as usize + 1];
        for &(u, v) in edges {
            if u == 0 || u > n {
                return Err(GraphError::UnknownNode(u));
            }
            if v == 0 || v > n {
                return Err(GraphError::UnknownNode(v));
            }
            if u == v {
                return Err(GraphError::Invalid(format!("self-loop at {u}")));
            }
            adj[u as usize].push(v);
            adj[v as usize].push(u);
        }
        for (id, list) in adj.iter_mut().enumerate().skip(1) {
            list.sort_unstable();
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(GraphError::Invalid(format!("parallel edge at {id}")));
            }
        }
        let g = Graph { n, adj, m: edges.len() };
        if !g.is_connected() {
            return Err(GraphError::Invalid("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn node_count(&self) -> u32 {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.m
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        1..=self.n
    }

    pub fn check_id(&self, v: NodeId) -> Result<(), GraphError> {
        if v == 0 || v > self.n {
            Err(GraphError::UnknownNode(v))
        } else {
            Ok(())
        }
    }

    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.adj[v as usize]
    }

    pub fn degree(&self, v: NodeId) -> u32 {
        self.adj[v as usize].len() as u32
    }

    pub fn max_degree(&self) -> u32 {
        self.nodes().map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.adj[u as usize].binary_search(&v).is_ok() || self.adj[u as usize].contains(&v)
    }

    /// All edges as `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::with_capacity(self.m);
        for u in self.nodes() {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Replaces the adjacency order of `v`. The new order must be a
    /// permutation of the old. Used to align ports with an embedding.
    pub(crate) fn set_neighbor_order(&mut self, v: NodeId, order: Vec<NodeId>) -> Result<(), GraphError> {
        let mut a = self.adj[v as usize].clone();
        let mut b = order.clone();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(GraphError::Embedding(format!(
                "rotation at {v} is not a permutation of its incident edges"
            )));
        }
        self.adj[v as usize] = order;
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n as usize + 1];
        let mut queue = VecDeque::new();
        seen[1] = true;
        queue.push_back(1u32);
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &w in self.neighbors(u) {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n
    }

    /// Hop distances from `src` to every node (index 0 unused).
    pub fn bfs_depths(&self, src: NodeId) -> Vec<u32> {
        let mut depth = vec![u32::MAX; self.n as usize + 1];
        let mut queue = VecDeque::new();
        depth[src as usize] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &w in self.neighbors(u) {
                if depth[w as usize] == u32::MAX {
                    depth[w as usize] = depth[u as usize] + 1;
                    queue.push_back(w);
                }
            }
        }
        depth
    }

    /// Exact shortest-path hop count between `u` and `v`.
    pub fn distance(&self, u: NodeId, v: NodeId) -> Result<u32, GraphError> {
        self.check_id(u)?;
        self.check_id(v)?;
        Ok(self.bfs_depths(u)[v as usize])
    }

    /// Nodes within `k` hops of `v`, sorted by id.
    pub fn ball_nodes(&self, v: NodeId, k: u32) -> Result<Vec<NodeId>, GraphError> {
        self.check_id(v)?;
        let depth = self.bfs_depths(v);
        Ok(self
            .nodes()
            .filter(|&w| depth[w as usize] <= k)
            .collect())
    }

    /// The induced subgraph on `nodes` (which must be sorted, deduped and
    /// nonempty), with a mapping back to original ids. The result may be
    /// disconnected; it is returned as raw adjacency, not a `Graph`.
    pub fn induced(&self, nodes: &[NodeId]) -> InducedSubgraph {
        let mut index = std::collections::HashMap::new();
        for (i, &v) in nodes.iter().enumerate() {
            index.insert(v, i);
        }
        let mut adj = vec![Vec::new(); nodes.len()];
        let mut m = 0;
        for (i, &v) in nodes.iter().enumerate() {
            for &w in self.neighbors(v) {
                if let Some(&j) = index.get(&w) {
                    adj[i].push(j);
                    if i < j {
                        m += 1;
                    }
                }
            }
        }
        InducedSubgraph {
            original: nodes.to_vec(),
            adj,
            m,
        }
    }

    /// `k_ball`: the induced subgraph on the `k`-neighborhood, rooted at `v`.
    pub fn k_ball(&self, v: NodeId, k: u32) -> Result<RootedBall, GraphError> {
        let nodes = self.ball_nodes(v, k)?;
        let sub = self.induced(&nodes);
        let root = nodes.binary_search(&v).expect("center in own ball");
        Ok(RootedBall {
            center: v,
            radius: k,
            root,
            sub,
        })
    }
}

/// An induced subgraph with local indices `0..len` and the original ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InducedSubgraph {
    pub original: Vec<NodeId>,
    pub adj: Vec<Vec<usize>>,
    pub m: usize,
}

impl InducedSubgraph {
    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].contains(&j)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    /// Hop distances within the subgraph from local index `src`.
    pub fn bfs_depths(&self, src: usize) -> Vec<u32> {
        let mut depth = vec![u32::MAX; self.len()];
        let mut queue = VecDeque::new();
        depth[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &w in &self.adj[u] {
                if depth[w] == u32::MAX {
                    depth[w] = depth[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        depth
    }

    /// True iff the subgraph contains a cycle (checked per component).
    pub fn has_cycle(&self) -> bool {
        // n_c - 1 edges per acyclic component; any extra edge closes a cycle.
        let mut seen = vec![false; self.len()];
        for start in 0..self.len() {
            if seen[start] {
                continue;
            }
            let mut nodes = 0usize;
            let mut half_edges = 0usize;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                nodes += 1;
                half_edges += self.adj[u].len();
                for &w in &self.adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            if half_edges / 2 >= nodes && nodes > 0 {
                return true;
            }
        }
        false
    }
}

/// A rooted ball: the induced subgraph on `N_radius(center)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootedBall {
    pub center: NodeId,
    pub radius: u32,
    /// Local index of the center inside `sub`.
    pub root: usize,
    pub sub: InducedSubgraph,
}

impl RootedBall {
    pub fn node_count(&self) -> usize {
        self.sub.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k3() -> Graph {
        Graph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap()
    }

    fn p5() -> Graph {
        Graph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5)]).unwrap()
    }

    fn c6() -> Graph {
        Graph::new(6, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 1)]).unwrap()
    }

    fn k4() -> Graph {
        Graph::new(4, &[(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]).unwrap()
    }

    /// Floyd–Warshall oracle, independent of the BFS implementation.
    fn fw_distances(g: &Graph) -> Vec<Vec<u32>> {
        let n = g.node_count() as usize;
        let inf = u32::MAX / 4;
        let mut d = vec![vec![inf; n + 1]; n + 1];
        for v in 1..=n {
            d[v][v] = 0;
        }
        for (u, v) in g.edges() {
            d[u as usize][v as usize] = 1;
            d[v as usize][u as usize] = 1;
        }
        for k in 1..=n {
            for i in 1..=n {
                for j in 1..=n {
                    let alt = d[i][k].saturating_add(d[k][j]);
                    if alt < d[i][j] {
                        d[i][j] = alt;
                    }
                }
            }
        }
        d
    }

    #[test]
    fn distance_adjacent_in_k3() {
        assert_eq!(k3().distance(1, 2).unwrap(), 1);
    }

    #[test]
    fn distance_path_ends() {
        assert_eq!(p5().distance(1, 5).unwrap(), 4);
    }

    #[test]
    fn distance_identity() {
        for g in [k3(), p5(), c6()] {
            for v in g.nodes() {
                assert_eq!(g.distance(v, v).unwrap(), 0);
            }
        }
    }

    #[test]
    fn distance_matches_floyd_warshall() {
        for g in [k3(), p5(), c6(), k4()] {
            let fw = fw_distances(&g);
            for u in g.nodes() {
                for v in g.nodes() {
                    assert_eq!(g.distance(u, v).unwrap(), fw[u as usize][v as usize]);
                }
            }
        }
    }

    #[test]
    fn distance_unknown_id() {
        assert!(matches!(k3().distance(1, 9), Err(GraphError::UnknownNode(9))));
    }

    #[test]
    fn ball_c6_radius1_is_path3() {
        let b = c6().k_ball(1, 1).unwrap();
        assert_eq!(b.sub.original, vec![1, 2, 6]);
        assert_eq!(b.sub.m, 2);
        // rooted at the middle of the path
        assert_eq!(b.sub.degree(b.root), 2);
    }

    #[test]
    fn ball_radius0_is_single_vertex() {
        for g in [k3(), p5(), c6()] {
            for v in g.nodes() {
                let b = g.k_ball(v, 0).unwrap();
                assert_eq!(b.node_count(), 1);
                assert_eq!(b.sub.m, 0);
            }
        }
    }

    #[test]
    fn ball_k4_radius1_is_all() {
        let g = k4();
        for v in g.nodes() {
            let b = g.k_ball(v, 1).unwrap();
            assert_eq!(b.node_count(), 4);
            assert_eq!(b.sub.m, 6);
        }
    }

    #[test]
    fn ball_nesting() {
        let g = c6();
        for v in g.nodes() {
            let mut prev: Option<Vec<NodeId>> = None;
            for k in 0..=4 {
                let nodes = g.ball_nodes(v, k).unwrap();
                if let Some(p) = &prev {
                    assert!(p.iter().all(|x| nodes.contains(x)));
                }
                prev = Some(nodes);
            }
            // eccentricity of any C6 node is 3
            assert_eq!(g.ball_nodes(v, 3).unwrap().len(), 6);
            assert_eq!(g.ball_nodes(v, 4).unwrap(), g.ball_nodes(v, 3).unwrap());
        }
    }

    #[test]
    fn rejects_disconnected() {
        assert!(Graph::new(4, &[(1, 2), (3, 4)]).is_err());
    }

    #[test]
    fn rejects_self_loop_and_parallel() {
        assert!(Graph::new(2, &[(1, 1), (1, 2)]).is_err());
        assert!(Graph::new(2, &[(1, 2), (2, 1)]).is_err());
    }

    #[test]
    fn cycle_detection_in_induced() {
        let g = c6();
        let all: Vec<NodeId> = g.nodes().collect();
        assert!(g.induced(&all).has_cycle());
        assert!(!g.induced(&[1, 2, 3]).has_cycle());
    }
}
