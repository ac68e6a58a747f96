use crate::error::GraphError;
use crate::graph::RootedBall;

/// Default cap on ball size for exhaustive canonicalization.
pub const DEFAULT_CANON_CAP: usize = 32;

/// Canonical code of a rooted graph: two balls get equal codes iff there is a
/// root-preserving isomorphism between them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalCode(pub Vec<u8>);

impl CanonicalCode {
    pub fn bit_len(&self) -> usize {
        self.0.len() * 8
    }
}

/// Exhaustive root-fixing canonicalization with pruning by degree/distance
/// signatures. Vertices are first partitioned by (distance from root, degree)
/// and only permutations respecting that partition are tried; the
/// lexicographically smallest adjacency matrix wins.
pub fn canonical_r_type(ball: &RootedBall) -> Result<CanonicalCode, GraphError> {
    canonical_r_type_capped(ball, DEFAULT_CANON_CAP)
}

pub fn canonical_r_type_capped(ball: &RootedBall, cap: usize) -> Result<CanonicalCode, GraphError> {
    let n = ball.node_count();
    if n > cap {
        return Err(GraphError::Capacity(format!(
            "ball has {n} nodes, canonicalization cap is {cap}"
        )));
    }
    let sub = &ball.sub;
    let dist = sub.bfs_depths(ball.root);
    // signature per vertex: (distance from root, degree)
    let sig: Vec<(u32, usize)> = (0..n).map(|i| (dist[i], sub.degree(i))).collect();

    // group vertices by signature; root is forced into its own first cell
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (i != ball.root, sig[i]));
    // cells of equal signature (root alone first)
    let mut cells: Vec<Vec<usize>> = Vec::new();
    for &v in &order {
        if v == ball.root {
            cells.push(vec![v]);
        } else if let Some(last) = cells.last_mut() {
            if last[0] != ball.root && sig[last[0]] == sig[v] {
                last.push(v);
                continue;
            } else {
                cells.push(vec![v]);
            }
        } else {
            cells.push(vec![v]);
        }
    }

    let mut best: Option<Vec<u8>> = None;
    let mut perm: Vec<usize> = Vec::with_capacity(n); // perm[new_index] = old vertex
    search(sub, &cells, 0, &mut perm, &mut best);
    let mut bytes = vec![n as u8];
    bytes.extend(best.expect("at least one labeling"));
    Ok(CanonicalCode(bytes))
}

fn matrix_bits(sub: &crate::graph::InducedSubgraph, perm: &[usize]) -> Vec<u8> {
    let n = perm.len();
    let mut bits = vec![0u8; (n * n + 7) / 8];
    for i in 0..n {
        for j in (i + 1)..n {
            if sub.has_edge(perm[i], perm[j]) {
                let k = i * n + j;
                bits[k / 8] |= 1 << (k % 8);
            }
        }
    }
    bits
}

fn search(
    sub: &crate::graph::InducedSubgraph,
    cells: &[Vec<usize>],
    cell_idx: usize,
    perm: &mut Vec<usize>,
    best: &mut Option<Vec<u8>>,
) {
    if cell_idx == cells.len() {
        let bits = matrix_bits(sub, perm);
        match best {
            None => *best = Some(bits),
            Some(b) => {
                if bits < *b {
                    *best = Some(bits);
                }
            }
        }
        return;
    }
    // try all orderings within the current cell
    let cell = &cells[cell_idx];
    permute_cell(sub, cells, cell_idx, cell, &mut Vec::new(), &mut vec![false; cell.len()], perm, best);
}

#[allow(clippy::too_many_arguments)]
fn permute_cell(
    sub: &crate::graph::InducedSubgraph,
    cells: &[Vec<usize>],
    cell_idx: usize,
    cell: &[usize],
    chosen: &mut Vec<usize>,
    used: &mut Vec<bool>,
    perm: &mut Vec<usize>,
    best: &mut Option<Vec<u8>>,
) {
    if chosen.len() == cell.len() {
        let len_before = perm.len();
        perm.extend(chosen.iter().copied());
        search(sub, cells, cell_idx + 1, perm, best);
        perm.truncate(len_before);
        return;
    }
    for i in 0..cell.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        chosen.push(cell[i]);
        permute_cell(sub, cells, cell_idx, cell, chosen, used, perm, best);
        chosen.pop();
        used[i] = false;
    }
}

/// Brute-force root-preserving isomorphism test, used as the test oracle.
pub fn rooted_isomorphic(a: &RootedBall, b: &RootedBall) -> bool {
    let n = a.node_count();
    if n != b.node_count() || a.sub.m != b.sub.m {
        return false;
    }
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    map[a.root] = b.root;
    used[b.root] = true;
    fn extend(
        a: &RootedBall,
        b: &RootedBall,
        map: &mut Vec<usize>,
        used: &mut Vec<bool>,
        v: usize,
    ) -> bool {
        let n = a.node_count();
        let next = (0..n).find(|&i| map[i] == usize::MAX && i != v);
        let next = match next {
            Some(x) => x,
            None => return check(a, b, map),
        };
        for cand in 0..n {
            if used[cand] {
                continue;
            }
            if a.sub.degree(next) != b.sub.degree(cand) {
                continue;
            }
            map[next] = cand;
            used[cand] = true;
            if extend(a, b, map, used, v) {
                return true;
            }
            map[next] = usize::MAX;
            used[cand] = false;
        }
        false
    }
    fn check(a: &RootedBall, b: &RootedBall, map: &[usize]) -> bool {
        let n = a.node_count();
        for i in 0..n {
            for j in (i + 1)..n {
                if a.sub.has_edge(i, j) != b.sub.has_edge(map[i], map[j]) {
                    return false;
                }
            }
        }
        true
    }
    extend(a, b, &mut map, &mut used, usize::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn c6_one_balls_equal() {
        let g = Graph::new(6, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 1)]).unwrap();
        let codes: Vec<_> = g
            .nodes()
            .map(|v| canonical_r_type(&g.k_ball(v, 1).unwrap()).unwrap())
            .collect();
        assert!(codes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn star_hub_vs_leaf_differ() {
        let g = Graph::new(4, &[(1, 2), (1, 3), (1, 4)]).unwrap();
        let hub = canonical_r_type(&g.k_ball(1, 1).unwrap()).unwrap();
        let leaf = canonical_r_type(&g.k_ball(2, 1).unwrap()).unwrap();
        assert_ne!(hub, leaf);
    }

    #[test]
    fn single_vertex_balls_equal() {
        let g1 = Graph::new(3, &[(1, 2), (2, 3)]).unwrap();
        let g2 = Graph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
        let a = canonical_r_type(&g1.k_ball(1, 0).unwrap()).unwrap();
        let b = canonical_r_type(&g2.k_ball(4, 0).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cap_enforced() {
        let edges: Vec<(u32, u32)> = (1..40).map(|i| (i, i + 1)).collect();
        let g = Graph::new(40, &edges).unwrap();
        let ball = g.k_ball(20, 39).unwrap();
        assert!(matches!(
            canonical_r_type(&ball),
            Err(GraphError::Capacity(_))
        ));
    }

    #[test]
    fn code_equality_matches_isomorphism_oracle() {
        // a small pool of rooted balls from assorted graphs
        let graphs = vec![
            Graph::new(6, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 1)]).unwrap(),
            Graph::new(6, &[(1, 2), (2, 3), (3, 1), (3, 4), (4, 5), (5, 6)]).unwrap(),
            Graph::new(5, &[(1, 2), (1, 3), (1, 4), (4, 5)]).unwrap(),
            Graph::new(4, &[(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]).unwrap(),
        ];
        let mut balls = Vec::new();
        for g in &graphs {
            for v in g.nodes() {
                for r in 0..=2 {
                    balls.push(g.k_ball(v, r).unwrap());
                }
            }
        }
        for a in &balls {
            for b in &balls {
                let ca = canonical_r_type(a).unwrap();
                let cb = canonical_r_type(b).unwrap();
                assert_eq!(
                    ca == cb,
                    rooted_isomorphic(a, b),
                    "code equality must match root-preserving isomorphism"
                );
            }
        }
    }

    #[test]
    fn invariant_under_relabeling() {
        // relabel C6 and compare ball codes
        let g = Graph::new(6, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 1)]).unwrap();
        let relabeled = Graph::new(6, &[(3, 5), (5, 1), (1, 6), (6, 2), (2, 4), (4, 3)]).unwrap();
        let a = canonical_r_type(&g.k_ball(1, 2).unwrap()).unwrap();
        let b = canonical_r_type(&relabeled.k_ball(3, 2).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
