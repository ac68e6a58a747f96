//! Centralized brute-force evaluation used as ground truth for every
//! distributed run.

use std::collections::HashMap;

use crate::error::QueryError;
use crate::graph::{Graph, NodeId};
use crate::query::{BasicLocalSentence, CountAtom, CountCmp, Psi, QueryExpr};

/// Default node-count cap for exhaustive evaluation.
pub const DEFAULT_ORACLE_CAP: u32 = 400;

/// Per-node unary labels, e.g. the P label of the witness phase.
pub type LabelMap = HashMap<String, Vec<bool>>; // label -> indexed by node id

pub struct Oracle<'g> {
    g: &'g Graph,
    labels: LabelMap,
    cap: u32,
}

#[derive(Debug, Clone, Default)]
pub struct CountAudit {
    /// (term value, symbol count, bound n^|t|) for every evaluated term.
    pub terms: Vec<(u64, u32, u64)>,
}

impl<'g> Oracle<'g> {
    pub fn new(g: &'g Graph) -> Result<Self, QueryError> {
        Self::with_cap(g, DEFAULT_ORACLE_CAP)
    }

    pub fn with_cap(g: &'g Graph, cap: u32) -> Result<Self, QueryError> {
        if g.node_count() > cap {
            return Err(QueryError::Capacity(format!(
                "oracle cap is {cap} nodes, graph has {}",
                g.node_count()
            )));
        }
        Ok(Oracle {
            g,
            labels: LabelMap::new(),
            cap,
        })
    }

    pub fn set_label(&mut self, name: &str, flags: Vec<bool>) {
        self.labels.insert(name.to_string(), flags);
    }

    fn label_of(&self, name: &str, v: NodeId) -> bool {
        self.labels
            .get(name)
            .map(|f| f[v as usize])
            .unwrap_or(false)
    }

    /// psi within the r-ball of v, with labels threaded through.
    pub fn psi_holds_at(&self, psi: &Psi, r: u32, v: NodeId) -> Result<bool, QueryError> {
        let ball = self
            .g
            .k_ball(v, r)
            .map_err(|e| QueryError::Input(e.to_string()))?;
        let originals = ball.sub.original.clone();
        Ok(psi.eval_on_ball(&ball, &|name, idx| self.label_of(name, originals[idx])))
    }

    /// The set {v : psi^(r)(v)} over the whole graph.
    pub fn psi_set(&self, psi: &Psi, r: u32) -> Result<Vec<bool>, QueryError> {
        let mut out = vec![false; self.g.node_count() as usize + 1];
        for v in self.g.nodes() {
            out[v as usize] = self.psi_holds_at(psi, r, v)?;
        }
        Ok(out)
    }

    /// Largest number of candidates pairwise more than `gap` apart, capped at
    /// `want`. Exact via backtracking over candidate subsets.
    pub fn max_scattered(&self, candidates: &[NodeId], gap: u32, want: u32) -> u32 {
        max_scattered_in(
            &|u, w| self.g.distance(u, w).expect("valid ids"),
            candidates,
            gap,
            want,
        )
    }

    pub fn eval_local(&self, leaf: &BasicLocalSentence) -> Result<bool, QueryError> {
        let set = self.psi_set(&leaf.psi, leaf.r)?;
        let candidates: Vec<NodeId> = self.g.nodes().filter(|&v| set[v as usize]).collect();
        Ok(self.max_scattered(&candidates, 2 * leaf.r, leaf.s) >= leaf.s)
    }

    fn eval_count_atom(&self, atom: &CountAtom, audit: &mut CountAudit) -> Result<bool, QueryError> {
        let n = self.g.node_count() as u64;
        let mut term_value = |t: &crate::query::CountTerm| -> Result<u64, QueryError> {
            let mut counts = Vec::new();
            for body in t.bodies() {
                let r = body.intrinsic_radius();
                let set = self.psi_set(body, r)?;
                counts.push(self.g.nodes().filter(|&v| set[v as usize]).count() as u64);
            }
            let value = t.eval_with(&mut counts.into_iter());
            let bound = n.saturating_pow(t.symbol_count());
            audit.terms.push((value, t.symbol_count(), bound));
            if value > bound {
                return Err(QueryError::Input(format!(
                    "term value {value} exceeds n^|t| = {bound}"
                )));
            }
            Ok(value)
        };
        let l = term_value(&atom.left)?;
        let r = term_value(&atom.right)?;
        Ok(match atom.cmp {
            CountCmp::Eq => l == r,
            CountCmp::Lt => l < r,
        })
    }

    pub fn eval_expr(&self, q: &QueryExpr, audit: &mut CountAudit) -> Result<bool, QueryError> {
        match q {
            QueryExpr::Local(leaf) => self.eval_local(leaf),
            QueryExpr::Count(atom) => self.eval_count_atom(atom, audit),
            QueryExpr::Not(a) => Ok(!self.eval_expr(a, audit)?),
            QueryExpr::And(a, b) => Ok(self.eval_expr(a, audit)? && self.eval_expr(b, audit)?),
            QueryExpr::Or(a, b) => Ok(self.eval_expr(a, audit)? || self.eval_expr(b, audit)?),
        }
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }
}

/// Exact truth value of a query by brute-force semantics.
pub fn oracle_eval(g: &Graph, q: &QueryExpr) -> Result<bool, QueryError> {
    let oracle = Oracle::new(g)?;
    let mut audit = CountAudit::default();
    oracle.eval_expr(q, &mut audit)
}

pub fn oracle_eval_audited(g: &Graph, q: &QueryExpr) -> Result<(bool, CountAudit), QueryError> {
    let oracle = Oracle::new(g)?;
    let mut audit = CountAudit::default();
    let v = oracle.eval_expr(q, &mut audit)?;
    Ok((v, audit))
}

/// Backtracking search for `want` elements of `candidates` pairwise more than
/// `gap` apart under the given metric. Returns the best count found, capped.
pub fn max_scattered_in(
    dist: &dyn Fn(NodeId, NodeId) -> u32,
    candidates: &[NodeId],
    gap: u32,
    want: u32,
) -> u32 {
    fn rec(
        dist: &dyn Fn(NodeId, NodeId) -> u32,
        cand: &[NodeId],
        gap: u32,
        want: u32,
        chosen: &mut Vec<NodeId>,
        from: usize,
        best: &mut u32,
    ) {
        if *best >= want {
            return;
        }
        *best = (*best).max(chosen.len() as u32);
        if chosen.len() as u32 >= want {
            return;
        }
        // not enough candidates left to beat best
        if chosen.len() + (cand.len() - from) <= *best as usize {
            return;
        }
        for i in from..cand.len() {
            let c = cand[i];
            if chosen.iter().all(|&x| dist(x, c) > gap) {
                chosen.push(c);
                rec(dist, cand, gap, want, chosen, i + 1, best);
                chosen.pop();
                if *best >= want {
                    return;
                }
            }
        }
    }
    let mut best = 0;
    rec(dist, candidates, gap, want, &mut Vec::new(), 0, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::{BasicLocalSentence, CountTerm};

    /// Two triangles {1,2,3} and {7,8,9} joined by the path 3-4-5-6-7.
    pub(crate) fn two_triangles_path() -> Graph {
        Graph::new(
            9,
            &[
                (1, 2),
                (1, 3),
                (2, 3),
                (3, 4),
                (4, 5),
                (5, 6),
                (6, 7),
                (7, 8),
                (7, 9),
                (8, 9),
            ],
        )
        .unwrap()
    }

    /// One triangle {1,2,3} with pendant path 3-4-5.
    fn one_triangle_pendant() -> Graph {
        Graph::new(5, &[(1, 2), (1, 3), (2, 3), (3, 4), (4, 5)]).unwrap()
    }

    #[test]
    fn two_triangles_leaf_true() {
        let g = two_triangles_path();
        let leaf = BasicLocalSentence::new(1, 2, Psi::Triangle).unwrap();
        assert!(oracle_eval(&g, &QueryExpr::Local(leaf)).unwrap());
    }

    #[test]
    fn one_triangle_leaf_false() {
        let g = one_triangle_pendant();
        let leaf = BasicLocalSentence::new(1, 2, Psi::Triangle).unwrap();
        assert!(!oracle_eval(&g, &QueryExpr::Local(leaf)).unwrap());
    }

    #[test]
    fn c4_count_atom_true() {
        let g = Graph::new(4, &[(1, 2), (2, 3), (3, 4), (4, 1)]).unwrap();
        // #x.(deg>=2 within ball) = #y.(true): both are 4
        let atom = CountAtom {
            left: CountTerm::Count(Psi::MinDeg(2)),
            cmp: CountCmp::Eq,
            right: CountTerm::Count(Psi::True),
        };
        assert!(oracle_eval(&g, &QueryExpr::Count(atom)).unwrap());
    }

    #[test]
    fn compositionality() {
        let g = two_triangles_path();
        let a = QueryExpr::Local(BasicLocalSentence::new(1, 2, Psi::Triangle).unwrap());
        let b = QueryExpr::Local(BasicLocalSentence::new(1, 3, Psi::Triangle).unwrap());
        let va = oracle_eval(&g, &a).unwrap();
        let vb = oracle_eval(&g, &b).unwrap();
        let and = QueryExpr::And(Box::new(a.clone()), Box::new(b.clone()));
        let or = QueryExpr::Or(Box::new(a.clone()), Box::new(b.clone()));
        let not = QueryExpr::Not(Box::new(a.clone()));
        assert_eq!(oracle_eval(&g, &and).unwrap(), va && vb);
        assert_eq!(oracle_eval(&g, &or).unwrap(), va || vb);
        assert_eq!(oracle_eval(&g, &not).unwrap(), !va);
    }

    #[test]
    fn capacity_cap() {
        let edges: Vec<(u32, u32)> = (1..500).map(|i| (i, i + 1)).collect();
        let g = Graph::new(500, &edges).unwrap();
        let leaf = QueryExpr::Local(BasicLocalSentence::new(0, 1, Psi::True).unwrap());
        assert!(matches!(
            oracle_eval(&g, &leaf),
            Err(QueryError::Capacity(_))
        ));
    }

    #[test]
    fn scattered_on_c8() {
        let g = Graph::new(
            8,
            &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8), (8, 1)],
        )
        .unwrap();
        let all: Vec<NodeId> = g.nodes().collect();
        let o = Oracle::new(&g).unwrap();
        assert!(o.max_scattered(&all, 2, 2) >= 2);
        // C6: at distance > 2 at most 2 nodes fit
        let g6 = Graph::new(6, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 1)]).unwrap();
        let all6: Vec<NodeId> = g6.nodes().collect();
        let o6 = Oracle::new(&g6).unwrap();
        assert_eq!(o6.max_scattered(&all6, 2, 3), 2);
    }

    /// Relativization soundness: global evaluation of the guarded formula
    /// equals ball evaluation of the original, for the FO catalog entries,
    /// over assorted small graphs.
    #[test]
    fn relativize_soundness_small_graphs() {
        use crate::query::{relativize, LocalFormula};
        let graphs = vec![
            Graph::new(3, &[(1, 2), (2, 3)]).unwrap(),
            Graph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap(),
            Graph::new(4, &[(1, 2), (2, 3), (3, 4), (4, 1)]).unwrap(),
            Graph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 1), (1, 3)]).unwrap(),
            Graph::new(6, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 1), (1, 4)]).unwrap(),
        ];
        let psis = [Psi::Triangle, Psi::MinDeg(2), Psi::MinDeg(3)];
        for g in &graphs {
            let all: Vec<NodeId> = g.nodes().collect();
            let whole = g.induced(&all);
            // distances in the whole graph, by local index
            let dist_tables: Vec<Vec<u32>> = (0..whole.len()).map(|i| whole.bfs_depths(i)).collect();
            for psi in &psis {
                let f = psi.as_formula().unwrap();
                for r in 1..=2u32 {
                    let guarded = relativize(&f, r, "a").unwrap();
                    // bind the anchor and the free variable x to the same node
                    for v in g.nodes() {
                        let idx = (v - 1) as usize;
                        let mut env = std::collections::HashMap::new();
                        env.insert("x".to_string(), idx);
                        env.insert("a".to_string(), idx);
                        let global = guarded.eval(
                            &whole,
                            &|i, j| dist_tables[i][j],
                            &|_, _| false,
                            &mut env,
                        );
                        let on_ball = Oracle::new(g).unwrap().psi_holds_at(psi, r, v).unwrap();
                        assert_eq!(global, on_ball, "psi={psi:?} r={r} v={v}");
                        // also the dual reading: universals guarded by implication
                        let n = LocalFormula::not(f.clone());
                        let guarded_neg = relativize(&n, r, "a").unwrap();
                        let mut env2 = std::collections::HashMap::new();
                        env2.insert("x".to_string(), idx);
                        env2.insert("a".to_string(), idx);
                        let global_neg = guarded_neg.eval(
                            &whole,
                            &|i, j| dist_tables[i][j],
                            &|_, _| false,
                            &mut env2,
                        );
                        assert_eq!(global_neg, !on_ball);
                    }
                }
            }
        }
    }
}
