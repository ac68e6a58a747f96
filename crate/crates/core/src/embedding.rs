use std::collections::HashMap;

use crate::error::GraphError;
use crate::graph::{Graph, NodeId};

/// Combinatorial embedding: per node, the cyclic order of its incident edges.
///
/// Port numbering and the embedding's cyclic order are treated as one
/// structure: after [`apply_rotation`](PlanarEmbedding::apply_rotation), the
/// p-th neighbor in the graph adjacency list is the p-th edge of the rotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanarEmbedding {
    /// `rotation[v]` lists v's neighbors in counterclockwise cyclic order.
    pub rotation: Vec<Vec<NodeId>>, // index 0 unused
}

impl PlanarEmbedding {
    pub fn new(g: &Graph, rotation: Vec<Vec<NodeId>>) -> Result<Self, GraphError> {
        if rotation.len() != g.node_count() as usize + 1 {
            return Err(GraphError::Embedding(
                "rotation table size does not match node count".into(),
            ));
        }
        for v in g.nodes() {
            let mut a = rotation[v as usize].clone();
            let mut b = g.neighbors(v).to_vec();
            a.sort_unstable();
            b.sort_unstable();
            if a != b {
                return Err(GraphError::Embedding(format!(
                    "rotation at {v} does not list exactly its incident edges"
                )));
            }
        }
        Ok(PlanarEmbedding { rotation })
    }

    /// Reorders the graph's adjacency lists to match the rotation, so ports
    /// and cyclic order coincide.
    pub fn apply_rotation(&self, g: &mut Graph) -> Result<(), GraphError> {
        for v in g.nodes() {
            g.set_neighbor_order(v, self.rotation[v as usize].clone())?;
        }
        Ok(())
    }

    /// Position of neighbor `u` in v's rotation.
    pub fn port_of(&self, v: NodeId, u: NodeId) -> Option<usize> {
        self.rotation[v as usize].iter().position(|&w| w == u)
    }
}

/// One face boundary walk, as a list of directed arcs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceWalk {
    pub arcs: Vec<(NodeId, NodeId)>,
}

/// Result of tracing all faces of an embedding.
#[derive(Debug, Clone)]
pub struct FaceTrace {
    pub faces: Vec<FaceWalk>,
    /// Euler relation n - m + f = 2 holds.
    pub valid: bool,
}

/// Traces every face of the embedding. Each directed edge appears in exactly
/// one face walk. The successor of arc `(u,v)` is `(v,w)` where `(v,w)` is
/// immediately before `(v,u)` in v's cyclic ordering.
pub fn trace_faces(g: &Graph, emb: &PlanarEmbedding) -> Result<FaceTrace, GraphError> {
    // index every directed arc
    let mut arc_index: HashMap<(NodeId, NodeId), usize> = HashMap::new();
    let mut arcs: Vec<(NodeId, NodeId)> = Vec::with_capacity(2 * g.edge_count());
    for v in g.nodes() {
        for &u in &emb.rotation[v as usize] {
            arc_index.insert((v, u), arcs.len());
            arcs.push((v, u));
        }
    }
    if arcs.len() != 2 * g.edge_count() {
        return Err(GraphError::Embedding(
            "rotation arcs do not match edge count".into(),
        ));
    }
    let successor = |(u, v): (NodeId, NodeId)| -> Result<(NodeId, NodeId), GraphError> {
        let rot = &emb.rotation[v as usize];
        let pos = rot
            .iter()
            .position(|&w| w == u)
            .ok_or_else(|| GraphError::Embedding(format!("arc ({u},{v}) missing at {v}")))?;
        // immediately before (v,u) in cyclic order
        let prev = if pos == 0 { rot.len() - 1 } else { pos - 1 };
        Ok((v, rot[prev]))
    };
    let mut visited = vec![false; arcs.len()];
    let mut faces = Vec::new();
    for start in 0..arcs.len() {
        if visited[start] {
            continue;
        }
        let mut walk = Vec::new();
        let mut cur = arcs[start];
        loop {
            let idx = arc_index[&cur];
            if visited[idx] {
                return Err(GraphError::Embedding(format!(
                    "rotation inconsistency: arc ({},{}) revisited",
                    cur.0, cur.1
                )));
            }
            visited[idx] = true;
            walk.push(cur);
            cur = successor(cur)?;
            if cur == arcs[start] {
                break;
            }
        }
        faces.push(FaceWalk { arcs: walk });
    }
    let n = g.node_count() as i64;
    let m = g.edge_count() as i64;
    let f = faces.len() as i64;
    Ok(FaceTrace {
        faces,
        valid: n - m + f == 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> (Graph, PlanarEmbedding) {
        let g = Graph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap();
        let rot = vec![vec![], vec![2, 3], vec![3, 1], vec![1, 2]];
        let emb = PlanarEmbedding::new(&g, rot).unwrap();
        (g, emb)
    }

    #[test]
    fn triangle_two_faces() {
        let (g, emb) = triangle();
        let t = trace_faces(&g, &emb).unwrap();
        assert_eq!(t.faces.len(), 2);
        assert!(t.valid);
    }

    #[test]
    fn single_edge_one_face() {
        let g = Graph::new(2, &[(1, 2)]).unwrap();
        let emb = PlanarEmbedding::new(&g, vec![vec![], vec![2], vec![1]]).unwrap();
        let t = trace_faces(&g, &emb).unwrap();
        assert_eq!(t.faces.len(), 1);
        assert!(t.valid);
        assert_eq!(t.faces[0].arcs.len(), 2);
    }

    #[test]
    fn k4_four_faces() {
        // standard planar K4: node 4 inside triangle 1-2-3
        let g = Graph::new(4, &[(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]).unwrap();
        let rot = vec![
            vec![],
            vec![2, 4, 3],
            vec![3, 4, 1],
            vec![1, 4, 2],
            vec![1, 2, 3],
        ];
        let emb = PlanarEmbedding::new(&g, rot).unwrap();
        let t = trace_faces(&g, &emb).unwrap();
        assert_eq!(t.faces.len(), 4, "Euler: 4 - 6 + f = 2 forces f = 4");
        assert!(t.valid);
    }

    #[test]
    fn walk_lengths_sum_to_2m() {
        let (g, emb) = triangle();
        let t = trace_faces(&g, &emb).unwrap();
        let total: usize = t.faces.iter().map(|f| f.arcs.len()).sum();
        assert_eq!(total, 2 * g.edge_count());
    }

    #[test]
    fn inconsistent_rotation_rejected() {
        let g = Graph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap();
        let rot = vec![vec![], vec![2, 2], vec![3, 1], vec![1, 2]];
        assert!(PlanarEmbedding::new(&g, rot).is_err());
    }
}
