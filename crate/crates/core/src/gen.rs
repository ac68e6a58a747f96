//! Seeded instance generators. Planar families also emit a combinatorial
//! embedding whose face trace must pass the Euler check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::PlanarEmbedding;
use crate::error::GraphError;
use crate::graph::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Cycle,
    Path,
    Grid,
    TriangulatedGrid,
    RandomDRegular { d: u32 },
    RandomTree,
}

pub struct Instance {
    pub graph: Graph,
    pub embedding: Option<PlanarEmbedding>,
}

pub fn generate(family: Family, size: u32, seed: u64) -> Result<Instance, GraphError> {
    if size < 2 {
        return Err(GraphError::Invalid("size must be at least 2".into()));
    }
    match family {
        Family::Cycle => cycle(size),
        Family::Path => path(size),
        Family::Grid => grid(size, false),
        Family::TriangulatedGrid => grid(size, true),
        Family::RandomDRegular { d } => random_regular(size, d, seed),
        Family::RandomTree => random_tree(size, seed),
    }
}

fn cycle(n: u32) -> Result<Instance, GraphError> {
    if n < 3 {
        return Err(GraphError::Invalid("cycle needs at least 3 nodes".into()));
    }
    let edges: Vec<(NodeId, NodeId)> = (1..n).map(|i| (i, i + 1)).chain([(n, 1)]).collect();
    let graph = Graph::new(n, &edges)?;
    let mut rotation = vec![Vec::new()];
    for v in 1..=n {
        let prev = if v == 1 { n } else { v - 1 };
        let next = if v == n { 1 } else { v + 1 };
        rotation.push(vec![prev, next]);
    }
    let embedding = PlanarEmbedding::new(&graph, rotation)?;
    Ok(Instance {
        graph,
        embedding: Some(embedding),
    })
}

fn path(n: u32) -> Result<Instance, GraphError> {
    let edges: Vec<(NodeId, NodeId)> = (1..n).map(|i| (i, i + 1)).collect();
    let graph = Graph::new(n, &edges)?;
    let mut rotation = vec![Vec::new()];
    for v in 1..=n {
        let mut r = Vec::new();
        if v > 1 {
            r.push(v - 1);
        }
        if v < n {
            r.push(v + 1);
        }
        rotation.push(r);
    }
    let embedding = PlanarEmbedding::new(&graph, rotation)?;
    Ok(Instance {
        graph,
        embedding: Some(embedding),
    })
}

/// side x side grid, row-major ids. With `triangulate`, each cell gains the
/// diagonal toward the lower-right.
fn grid(side: u32, triangulate: bool) -> Result<Instance, GraphError> {
    let n = side * side;
    let id = |r: u32, c: u32| r * side + c + 1;
    let mut edges = Vec::new();
    for r in 0..side {
        for c in 0..side {
            if c + 1 < side {
                edges.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < side {
                edges.push((id(r, c), id(r + 1, c)));
            }
            if triangulate && r + 1 < side && c + 1 < side {
                edges.push((id(r, c), id(r + 1, c + 1)));
            }
        }
    }
    let graph = Graph::new(n, &edges)?;
    // rotation in counterclockwise order with north up:
    // E, NE?, N, NW-diag, W, SW?, S, SE-diag — only present neighbors listed.
    let mut rotation = vec![Vec::new()];
    for r in 0..side {
        for c in 0..side {
            let mut rot = Vec::new();
            // east
            if c + 1 < side {
                rot.push(id(r, c + 1));
            }
            // north
            if r > 0 {
                rot.push(id(r - 1, c));
            }
            // northwest diagonal (from cell (r-1,c-1))
            if triangulate && r > 0 && c > 0 {
                rot.push(id(r - 1, c - 1));
            }
            // west
            if c > 0 {
                rot.push(id(r, c - 1));
            }
            // south
            if r + 1 < side {
                rot.push(id(r + 1, c));
            }
            // southeast diagonal
            if triangulate && r + 1 < side && c + 1 < side {
                rot.push(id(r + 1, c + 1));
            }
            rotation.push(rot);
        }
    }
    let embedding = PlanarEmbedding::new(&graph, rotation)?;
    Ok(Instance {
        graph,
        embedding: Some(embedding),
    })
}

/// Configuration-model d-regular graph, resampled until simple and
/// connected. Not planar in general, so no embedding is emitted.
fn random_regular(n: u32, d: u32, seed: u64) -> Result<Instance, GraphError> {
    if (n as u64 * d as u64) % 2 != 0 {
        return Err(GraphError::Invalid(format!(
            "d*n must be even, got d={d} n={n}"
        )));
    }
    if d >= n {
        return Err(GraphError::Invalid("degree must be below node count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..10_000 {
        let mut stubs: Vec<NodeId> = Vec::with_capacity((n * d) as usize);
        for v in 1..=n {
            for _ in 0..d {
                stubs.push(v);
            }
        }
        stubs.shuffle(&mut rng);
        let mut edges = Vec::with_capacity(stubs.len() / 2);
        let mut ok = true;
        let mut seen = std::collections::HashSet::new();
        for pair in stubs.chunks(2) {
            let (u, v) = (pair[0], pair[1]);
            if u == v || !seen.insert((u.min(v), u.max(v))) {
                ok = false;
                break;
            }
            edges.push((u, v));
        }
        if !ok {
            continue;
        }
        match Graph::new(n, &edges) {
            Ok(graph) => {
                return Ok(Instance {
                    graph,
                    embedding: None,
                })
            }
            Err(_) => continue, // disconnected; resample
        }
    }
    Err(GraphError::Invalid(format!(
        "could not sample a connected {d}-regular graph on {n} nodes"
    )))
}

/// Uniform random labeled tree from a Prüfer sequence. Trees are planar with
/// any rotation, so the sorted adjacency is used as the embedding.
fn random_tree(n: u32, seed: u64) -> Result<Instance, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(NodeId, NodeId)> = if n == 2 {
        vec![(1, 2)]
    } else {
        let seq: Vec<u32> = (0..n - 2).map(|_| rng.gen_range(1..=n)).collect();
        let mut degree = vec![1u32; n as usize + 1];
        for &v in &seq {
            degree[v as usize] += 1;
        }
        let mut edges = Vec::with_capacity(n as usize - 1);
        let mut leaves: std::collections::BinaryHeap<std::cmp::Reverse<u32>> = (1..=n)
            .filter(|&v| degree[v as usize] == 1)
            .map(std::cmp::Reverse)
            .collect();
        for &v in &seq {
            let std::cmp::Reverse(leaf) = leaves.pop().expect("leaf available");
            edges.push((leaf, v));
            degree[v as usize] -= 1;
            if degree[v as usize] == 1 {
                leaves.push(std::cmp::Reverse(v));
            }
        }
        let std::cmp::Reverse(a) = leaves.pop().unwrap();
        let std::cmp::Reverse(b) = leaves.pop().unwrap();
        edges.push((a, b));
        edges
    };
    let graph = Graph::new(n, &edges)?;
    let rotation: Vec<Vec<NodeId>> = std::iter::once(Vec::new())
        .chain((1..=n).map(|v| graph.neighbors(v).to_vec()))
        .collect();
    let embedding = PlanarEmbedding::new(&graph, rotation)?;
    Ok(Instance {
        graph,
        embedding: Some(embedding),
    })
}

pub fn parse_family(s: &str, d: Option<u32>) -> Result<Family, GraphError> {
    match s {
        "cycle" => Ok(Family::Cycle),
        "path" => Ok(Family::Path),
        "grid" => Ok(Family::Grid),
        "triangulated-grid" => Ok(Family::TriangulatedGrid),
        "random-d-regular" => Ok(Family::RandomDRegular {
            d: d.ok_or_else(|| GraphError::Invalid("random-d-regular requires -d".into()))?,
        }),
        "random-tree" => Ok(Family::RandomTree),
        other => Err(GraphError::Invalid(format!("unknown family '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::trace_faces;

    #[test]
    fn grid5_counts() {
        let inst = generate(Family::Grid, 5, 0).unwrap();
        assert_eq!(inst.graph.node_count(), 25);
        assert_eq!(inst.graph.edge_count(), 40);
    }

    #[test]
    fn cycle6_rotations() {
        let inst = generate(Family::Cycle, 6, 0).unwrap();
        let emb = inst.embedding.unwrap();
        for v in inst.graph.nodes() {
            assert_eq!(emb.rotation[v as usize].len(), 2);
        }
    }

    #[test]
    fn seeded_regular_deterministic() {
        let a = generate(Family::RandomDRegular { d: 3 }, 20, 7).unwrap();
        let b = generate(Family::RandomDRegular { d: 3 }, 20, 7).unwrap();
        assert_eq!(a.graph, b.graph);
        for v in a.graph.nodes() {
            assert_eq!(a.graph.degree(v), 3);
        }
    }

    #[test]
    fn regular_odd_product_rejected() {
        assert!(generate(Family::RandomDRegular { d: 3 }, 21, 7).is_err());
    }

    #[test]
    fn planar_families_pass_euler() {
        let cases = [
            generate(Family::Cycle, 12, 0).unwrap(),
            generate(Family::Path, 9, 0).unwrap(),
            generate(Family::Grid, 4, 0).unwrap(),
            generate(Family::Grid, 7, 0).unwrap(),
            generate(Family::TriangulatedGrid, 4, 0).unwrap(),
            generate(Family::TriangulatedGrid, 6, 0).unwrap(),
            generate(Family::RandomTree, 30, 3).unwrap(),
        ];
        for inst in cases {
            let emb = inst.embedding.as_ref().expect("planar family");
            let trace = trace_faces(&inst.graph, emb).unwrap();
            assert!(trace.valid, "Euler check failed");
            let total: usize = trace.faces.iter().map(|f| f.arcs.len()).sum();
            assert_eq!(total, 2 * inst.graph.edge_count());
        }
    }

    #[test]
    fn random_tree_is_tree() {
        for seed in 0..5 {
            let inst = generate(Family::RandomTree, 24, seed).unwrap();
            assert_eq!(inst.graph.edge_count(), 23);
        }
    }
}
