use std::collections::{HashMap, HashSet};

use crate::graph::NodeId;

/// Rooted labeled tree of fixed-arity bags. Bag tuples may repeat vertices;
/// `arity` is the tuple length (width bound + 1 in the spec's sense).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderedTreeDecomposition {
    pub arity: usize,
    /// Bag tuples, indexed by tree vertex.
    pub bags: Vec<Vec<NodeId>>,
    /// Parent index per tree vertex; `None` exactly at the root.
    pub parent: Vec<Option<usize>>,
    pub root: usize,
}

impl OrderedTreeDecomposition {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.len()];
        for (t, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                ch[*p].push(t);
            }
        }
        ch
    }

    /// Distinct vertices of a bag.
    pub fn bag_set(&self, t: usize) -> Vec<NodeId> {
        let mut s = self.bags[t].clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Maximal number of children over all tree vertices.
    pub fn rank(&self) -> usize {
        self.children().iter().map(|c| c.len()).max().unwrap_or(0)
    }

    /// Width: max distinct bag size - 1.
    pub fn width(&self) -> usize {
        (0..self.len())
            .map(|t| self.bag_set(t).len())
            .max()
            .unwrap_or(1)
            .saturating_sub(1)
    }

    /// Post-order traversal (children before parents).
    pub fn post_order(&self) -> Vec<usize> {
        let ch = self.children();
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![(self.root, false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                out.push(t);
            } else {
                stack.push((t, true));
                for &c in ch[t].iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        out
    }
}

/// Validity report from [`check_tree_decomposition`].
#[derive(Debug, Clone, Default)]
pub struct TdReport {
    /// Edges of the graph not contained in any bag.
    pub uncovered_edges: Vec<(NodeId, NodeId)>,
    /// Vertices whose occurrence set is not connected in the tree.
    pub disconnected_vertices: Vec<NodeId>,
    /// Structural problems (bad parent pointers, bags exceeding arity, ...).
    pub structure_errors: Vec<String>,
    pub width: usize,
}

impl TdReport {
    pub fn is_valid(&self) -> bool {
        self.uncovered_edges.is_empty()
            && self.disconnected_vertices.is_empty()
            && self.structure_errors.is_empty()
    }
}

/// Checks a decomposition against a vertex/edge set: every listed edge must
/// be inside some bag, every listed vertex's occurrence set must be connected
/// in the tree, and the tree structure itself must be sound. Vertices in bags
/// that are not in `vertices` are reported as structure errors.
pub fn check_tree_decomposition_over(
    vertices: &[NodeId],
    edges: &[(NodeId, NodeId)],
    td: &OrderedTreeDecomposition,
) -> TdReport {
    let mut report = TdReport::default();
    let nverts: HashSet<NodeId> = vertices.iter().copied().collect();

    if td.is_empty() {
        if !edges.is_empty() {
            report.structure_errors.push("empty decomposition for nonempty edge set".into());
        }
        return report;
    }
    if td.root >= td.len() {
        report.structure_errors.push("root out of range".into());
        return report;
    }
    if td.parent.len() != td.len() {
        report.structure_errors.push("parent table size mismatch".into());
        return report;
    }
    // tree soundness: exactly one root, acyclic, all reachable from root
    let mut root_count = 0;
    for (t, p) in td.parent.iter().enumerate() {
        match p {
            None => {
                root_count += 1;
                if t != td.root {
                    report.structure_errors.push(format!("vertex {t} has no parent but is not the root"));
                }
            }
            Some(p) => {
                if *p >= td.len() {
                    report.structure_errors.push(format!("parent of {t} out of range"));
                }
            }
        }
    }
    if root_count != 1 {
        report.structure_errors.push(format!("{root_count} roots"));
    }
    if !report.structure_errors.is_empty() {
        return report;
    }
    // reachability / acyclicity
    let ch = td.children();
    let mut seen = vec![false; td.len()];
    let mut stack = vec![td.root];
    seen[td.root] = true;
    let mut reached = 1;
    while let Some(t) = stack.pop() {
        for &c in &ch[t] {
            if seen[c] {
                report.structure_errors.push("cycle in tree".into());
                return report;
            }
            seen[c] = true;
            reached += 1;
            stack.push(c);
        }
    }
    if reached != td.len() {
        report.structure_errors.push(format!(
            "{} tree vertices unreachable from root",
            td.len() - reached
        ));
        return report;
    }

    for (t, bag) in td.bags.iter().enumerate() {
        if bag.len() != td.arity {
            report
                .structure_errors
                .push(format!("bag {t} has length {} != arity {}", bag.len(), td.arity));
        }
        for &v in bag {
            if !nverts.contains(&v) {
                report
                    .structure_errors
                    .push(format!("bag {t} mentions foreign vertex {v}"));
            }
        }
    }

    // edge coverage
    for &(u, v) in edges {
        let covered = (0..td.len()).any(|t| {
            let s = &td.bags[t];
            s.contains(&u) && s.contains(&v)
        });
        if !covered {
            report.uncovered_edges.push((u, v));
        }
    }

    // occurrence connectivity per vertex
    let mut occ: HashMap<NodeId, Vec<usize>> = HashMap::new();
    for (t, bag) in td.bags.iter().enumerate() {
        let mut bag_sorted = bag.clone();
        bag_sorted.sort_unstable();
        bag_sorted.dedup();
        for v in bag_sorted {
            occ.entry(v).or_default().push(t);
        }
    }
    for &v in vertices {
        let Some(set) = occ.get(&v) else { continue };
        if set.len() <= 1 {
            continue;
        }
        let in_set: HashSet<usize> = set.iter().copied().collect();
        // connected iff all occurrence vertices minus one have their parent in the set,
        // except exactly one "top" vertex
        let tops = set
            .iter()
            .filter(|&&t| match td.parent[t] {
                None => true,
                Some(p) => !in_set.contains(&p),
            })
            .count();
        if tops != 1 {
            report.disconnected_vertices.push(v);
        }
    }

    report.width = td.width();
    report
}

/// Checks against a whole [`crate::graph::Graph`].
pub fn check_tree_decomposition(
    g: &crate::graph::Graph,
    td: &OrderedTreeDecomposition,
) -> TdReport {
    let vertices: Vec<NodeId> = g.nodes().collect();
    check_tree_decomposition_over(&vertices, &g.edges(), td)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn td(arity: usize, bags: Vec<Vec<NodeId>>, parent: Vec<Option<usize>>, root: usize) -> OrderedTreeDecomposition {
        OrderedTreeDecomposition { arity, bags, parent, root }
    }

    #[test]
    fn p3_chain_valid_width1() {
        let g = Graph::new(3, &[(1, 2), (2, 3)]).unwrap();
        let d = td(2, vec![vec![1, 2], vec![2, 3]], vec![None, Some(0)], 0);
        let r = check_tree_decomposition(&g, &d);
        assert!(r.is_valid(), "{r:?}");
        assert_eq!(r.width, 1);
    }

    #[test]
    fn p3_uncovered_edge() {
        let g = Graph::new(3, &[(1, 2), (2, 3)]).unwrap();
        let d = td(2, vec![vec![1, 2], vec![3, 3]], vec![None, Some(0)], 0);
        let r = check_tree_decomposition(&g, &d);
        assert!(!r.is_valid());
        assert_eq!(r.uncovered_edges, vec![(2, 3)]);
    }

    #[test]
    fn triangle_single_bag_width2() {
        let g = Graph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap();
        let d = td(3, vec![vec![1, 2, 3]], vec![None], 0);
        let r = check_tree_decomposition(&g, &d);
        assert!(r.is_valid());
        assert_eq!(r.width, 2);
    }

    #[test]
    fn disconnected_occurrence_detected() {
        let g = Graph::new(4, &[(1, 2), (2, 3), (3, 4), (4, 1)]).unwrap();
        // vertex 1 occurs in bags 0 and 2 but not 1 — occurrence set disconnected
        let d = td(
            2,
            vec![vec![1, 2], vec![2, 3], vec![3, 4], vec![4, 1]],
            vec![None, Some(0), Some(1), Some(2)],
            0,
        );
        let r = check_tree_decomposition(&g, &d);
        assert!(r.disconnected_vertices.contains(&1) || r.disconnected_vertices.contains(&4));
    }

    #[test]
    fn repetition_allowed_in_tuples() {
        let g = Graph::new(2, &[(1, 2)]).unwrap();
        let d = td(3, vec![vec![1, 2, 2]], vec![None], 0);
        let r = check_tree_decomposition(&g, &d);
        assert!(r.is_valid());
        assert_eq!(r.width, 1);
    }
}
