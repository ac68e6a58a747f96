use crate::graph::{Graph, NodeId};

/// State of a port (an incident edge endpoint) with respect to a BFS tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PortState {
    /// Tree edge to the parent.
    Parent,
    /// Tree edge to a child.
    Child,
    /// Non-tree edge to a node of equal depth.
    Horizon,
    /// Non-tree edge to a shallower node.
    Upward,
    /// Non-tree edge to a deeper node.
    Downward,
}

/// A breadth-first-search tree rooted at the requesting node, with per-port
/// states. Ports at node `v` are indices into `graph.neighbors(v)`.
#[derive(Debug, Clone)]
pub struct BfsTree {
    pub root: NodeId,
    pub depth: Vec<u32>,            // index 0 unused
    pub parent: Vec<Option<NodeId>>, // index 0 unused; None at root
    /// `port_state[v][p]` for the p-th neighbor of v.
    pub port_state: Vec<Vec<PortState>>,
    pub tree_depth: u32,
}

impl BfsTree {
    pub fn depth_of(&self, v: NodeId) -> u32 {
        self.depth[v as usize]
    }

    pub fn parent_of(&self, v: NodeId) -> Option<NodeId> {
        self.parent[v as usize]
    }

    /// Ancestors of `v` from `v` itself up to (and including) the ancestor at
    /// `min_depth`. Empty when `depth(v) < min_depth`.
    pub fn ancestors_to_depth(&self, v: NodeId, min_depth: u32) -> Vec<NodeId> {
        let mut out = Vec::new();
        if self.depth_of(v) < min_depth {
            return out;
        }
        let mut cur = v;
        loop {
            out.push(cur);
            if self.depth_of(cur) == min_depth {
                break;
            }
            cur = self.parent_of(cur).expect("non-root has parent");
        }
        out
    }
}

/// Builds the BFS tree rooted at `root`. Tie-break: a node's parent is its
/// smallest-id neighbor at depth-1 (adjacency lists are scanned in graph
/// order, but parent selection is by minimum id so rotation order does not
/// change the tree).
pub fn build_bfs_tree(g: &Graph, root: NodeId) -> BfsTree {
    let n = g.node_count() as usize;
    let depth = g.bfs_depths(root);
    let mut parent = vec![None; n + 1];
    for v in g.nodes() {
        if v == root {
            continue;
        }
        let dv = depth[v as usize];
        let p = g
            .neighbors(v)
            .iter()
            .copied()
            .filter(|&u| depth[u as usize] + 1 == dv)
            .min()
            .expect("connected graph: some neighbor is shallower");
        parent[v as usize] = Some(p);
    }
    let mut port_state = vec![Vec::new(); n + 1];
    for v in g.nodes() {
        let dv = depth[v as usize];
        let states = g
            .neighbors(v)
            .iter()
            .map(|&u| {
                let du = depth[u as usize];
                if parent[v as usize] == Some(u) {
                    PortState::Parent
                } else if parent[u as usize] == Some(v) {
                    PortState::Child
                } else if du == dv {
                    PortState::Horizon
                } else if du < dv {
                    PortState::Upward
                } else {
                    PortState::Downward
                }
            })
            .collect();
        port_state[v as usize] = states;
    }
    let tree_depth = g.nodes().map(|v| depth[v as usize]).max().unwrap_or(0);
    BfsTree {
        root,
        depth,
        parent,
        port_state,
        tree_depth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p3_rooted_at_end() {
        let g = Graph::new(3, &[(1, 2), (2, 3)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        assert_eq!(t.depth_of(1), 0);
        assert_eq!(t.depth_of(2), 1);
        assert_eq!(t.depth_of(3), 2);
        assert_eq!(t.tree_depth, 2);
        for v in g.nodes() {
            for s in &t.port_state[v as usize] {
                assert!(matches!(s, PortState::Parent | PortState::Child));
            }
        }
    }

    #[test]
    fn c4_downward_upward() {
        // 1-2-3-4-1 rooted at 1: depths 0,1,2,1; edge (2,3): downward at 2, upward at 3
        let g = Graph::new(4, &[(1, 2), (2, 3), (3, 4), (4, 1)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        assert_eq!(
            (t.depth_of(1), t.depth_of(2), t.depth_of(3), t.depth_of(4)),
            (0, 1, 2, 1)
        );
        // parent of 3 is min(2,4)=2, so (2,3) is a tree edge; (3,4) is the non-tree one
        let p34_at3 = g.neighbors(3).iter().position(|&u| u == 4).unwrap();
        let p34_at4 = g.neighbors(4).iter().position(|&u| u == 3).unwrap();
        assert_eq!(t.port_state[3][p34_at3], PortState::Upward);
        assert_eq!(t.port_state[4][p34_at4], PortState::Downward);
    }

    #[test]
    fn c5_horizon() {
        // 1-2-3-4-5-1 rooted at 1: nodes 3 and 4 both at depth 2, edge (3,4) horizon
        let g = Graph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 1)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let p = g.neighbors(3).iter().position(|&u| u == 4).unwrap();
        let q = g.neighbors(4).iter().position(|&u| u == 3).unwrap();
        assert_eq!(t.port_state[3][p], PortState::Horizon);
        assert_eq!(t.port_state[4][q], PortState::Horizon);
    }

    #[test]
    fn non_tree_edges_depth_gap_at_most_one() {
        let g = Graph::new(
            8,
            &[
                (1, 2),
                (1, 3),
                (2, 4),
                (3, 4),
                (4, 5),
                (5, 6),
                (6, 7),
                (7, 8),
                (8, 5),
                (2, 3),
            ],
        )
        .unwrap();
        let t = build_bfs_tree(&g, 1);
        for v in g.nodes() {
            for (p, &u) in g.neighbors(v).iter().enumerate() {
                let dv = t.depth_of(v) as i64;
                let du = t.depth_of(u) as i64;
                assert!((dv - du).abs() <= 1);
                let st = t.port_state[v as usize][p];
                match st {
                    PortState::Horizon => assert_eq!(dv, du),
                    PortState::Downward => assert_eq!(du, dv + 1),
                    PortState::Upward => assert_eq!(du, dv - 1),
                    PortState::Parent => assert_eq!(du, dv - 1),
                    PortState::Child => assert_eq!(du, dv + 1),
                }
            }
        }
    }

    #[test]
    fn ancestors_to_depth() {
        let g = Graph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        assert_eq!(t.ancestors_to_depth(5, 2), vec![5, 4, 3]);
        assert_eq!(t.ancestors_to_depth(5, 4), vec![5]);
        assert_eq!(t.ancestors_to_depth(3, 0), vec![3, 2, 1]);
    }
}
