//! Query ASTs: first-order local formulas, basic local sentences, Boolean
//! combinations with counting atoms, plus relativization, quantifier rank
//! and locality-radius bounds.

pub mod oracle;
pub mod parse;

use std::collections::HashMap;

use crate::error::QueryError;
use crate::graph::{InducedSubgraph, NodeId};

pub type Var = String;

/// First-order formula over {E, =, dist<=c, unary labels}, plus structural
/// ball predicates that are not finitely expressible in FO but are local by
/// construction (they only inspect a fixed-radius ball).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LocalFormula {
    True,
    False,
    Edge(Var, Var),
    Eq(Var, Var),
    DistLe(Var, Var, u32),
    /// Unary label atom; labels are assigned externally (e.g. the P label).
    Label(String, Var),
    Not(Box<LocalFormula>),
    And(Box<LocalFormula>, Box<LocalFormula>),
    Or(Box<LocalFormula>, Box<LocalFormula>),
    Exists(Var, Box<LocalFormula>),
    Forall(Var, Box<LocalFormula>),
}

impl LocalFormula {
    pub fn not(f: LocalFormula) -> Self {
        LocalFormula::Not(Box::new(f))
    }
    pub fn and(a: LocalFormula, b: LocalFormula) -> Self {
        LocalFormula::And(Box::new(a), Box::new(b))
    }
    pub fn or(a: LocalFormula, b: LocalFormula) -> Self {
        LocalFormula::Or(Box::new(a), Box::new(b))
    }
    pub fn exists(v: &str, f: LocalFormula) -> Self {
        LocalFormula::Exists(v.into(), Box::new(f))
    }
    pub fn forall(v: &str, f: LocalFormula) -> Self {
        LocalFormula::Forall(v.into(), Box::new(f))
    }

    /// Maximal number of nested quantifiers.
    pub fn quantifier_rank(&self) -> u32 {
        use LocalFormula::*;
        match self {
            True | False | Edge(..) | Eq(..) | DistLe(..) | Label(..) => 0,
            Not(f) => f.quantifier_rank(),
            And(a, b) | Or(a, b) => a.quantifier_rank().max(b.quantifier_rank()),
            Exists(_, f) | Forall(_, f) => 1 + f.quantifier_rank(),
        }
    }

    /// Free variables, in first-occurrence order.
    pub fn free_vars(&self) -> Vec<Var> {
        fn walk(f: &LocalFormula, bound: &mut Vec<Var>, out: &mut Vec<Var>) {
            use LocalFormula::*;
            let touch = |v: &Var, bound: &Vec<Var>, out: &mut Vec<Var>| {
                if !bound.contains(v) && !out.contains(v) {
                    out.push(v.clone());
                }
            };
            match f {
                True | False => {}
                Edge(a, b) | Eq(a, b) | DistLe(a, b, _) => {
                    touch(a, bound, out);
                    touch(b, bound, out);
                }
                Label(_, a) => touch(a, bound, out),
                Not(g) => walk(g, bound, out),
                And(a, b) | Or(a, b) => {
                    walk(a, bound, out);
                    walk(b, bound, out);
                }
                Exists(v, g) | Forall(v, g) => {
                    bound.push(v.clone());
                    walk(g, bound, out);
                    bound.pop();
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut Vec::new(), &mut out);
        out
    }

    fn mentions(&self, v: &str) -> bool {
        use LocalFormula::*;
        match self {
            True | False => false,
            Edge(a, b) | Eq(a, b) | DistLe(a, b, _) => a == v || b == v,
            Label(_, a) => a == v,
            Not(f) => f.mentions(v),
            And(a, b) | Or(a, b) => a.mentions(v) || b.mentions(v),
            Exists(x, f) | Forall(x, f) => x == v || f.mentions(v),
        }
    }

    /// Evaluates over an arbitrary graph structure given an assignment of the
    /// free variables to local node indices. Quantifiers range over all nodes
    /// of the structure; `dist<=c` is measured in the structure.
    pub fn eval(
        &self,
        sub: &InducedSubgraph,
        dist: &dyn Fn(usize, usize) -> u32,
        labels: &dyn Fn(&str, usize) -> bool,
        env: &mut HashMap<Var, usize>,
    ) -> bool {
        use LocalFormula::*;
        match self {
            True => true,
            False => false,
            Edge(a, b) => {
                let (x, y) = (env[a], env[b]);
                sub.has_edge(x, y)
            }
            Eq(a, b) => env[a] == env[b],
            DistLe(a, b, c) => dist(env[a], env[b]) <= *c,
            Label(l, a) => labels(l, env[a]),
            Not(f) => !f.eval(sub, dist, labels, env),
            And(a, b) => a.eval(sub, dist, labels, env) && b.eval(sub, dist, labels, env),
            Or(a, b) => a.eval(sub, dist, labels, env) || b.eval(sub, dist, labels, env),
            Exists(v, f) => (0..sub.len()).any(|i| {
                let old = env.insert(v.clone(), i);
                let r = f.eval(sub, dist, labels, env);
                match old {
                    Some(o) => {
                        env.insert(v.clone(), o);
                    }
                    None => {
                        env.remove(v);
                    }
                }
                r
            }),
            Forall(v, f) => (0..sub.len()).all(|i| {
                let old = env.insert(v.clone(), i);
                let r = f.eval(sub, dist, labels, env);
                match old {
                    Some(o) => {
                        env.insert(v.clone(), o);
                    }
                    None => {
                        env.remove(v);
                    }
                }
                r
            }),
        }
    }
}

/// Bounds all quantifiers of `f` to the `r`-neighborhood of `anchor`:
/// existentials gain a conjoined distance guard, universals an implication.
pub fn relativize(f: &LocalFormula, r: u32, anchor: &str) -> Result<LocalFormula, QueryError> {
    if f.mentions(anchor) {
        return Err(QueryError::Input(format!(
            "anchor variable '{anchor}' already occurs in the formula"
        )));
    }
    Ok(relativize_inner(f, r, anchor))
}

fn relativize_inner(f: &LocalFormula, r: u32, anchor: &str) -> LocalFormula {
    use LocalFormula::*;
    match f {
        True | False | Edge(..) | Eq(..) | DistLe(..) | Label(..) => f.clone(),
        Not(g) => LocalFormula::not(relativize_inner(g, r, anchor)),
        And(a, b) => LocalFormula::and(relativize_inner(a, r, anchor), relativize_inner(b, r, anchor)),
        Or(a, b) => LocalFormula::or(relativize_inner(a, r, anchor), relativize_inner(b, r, anchor)),
        Exists(v, g) => Exists(
            v.clone(),
            Box::new(LocalFormula::and(
                DistLe(anchor.to_string(), v.clone(), r),
                relativize_inner(g, r, anchor),
            )),
        ),
        Forall(v, g) => Forall(
            v.clone(),
            Box::new(LocalFormula::or(
                LocalFormula::not(DistLe(anchor.to_string(), v.clone(), r)),
                relativize_inner(g, r, anchor),
            )),
        ),
    }
}

/// Locality bounds from quantifier rank `k` and free-variable count `p`:
/// `(r_max, s_max, t_max)`. With `improved`, `r_max = 4^k - 1`.
pub fn gaifman_bounds(k: u32, p: u32, improved: bool) -> (u64, u64, u64) {
    assert!(k >= 1, "rank must be at least 1");
    let r = if improved {
        4u64.pow(k) - 1
    } else {
        7u64.pow(k - 1)
    };
    let s = p as u64 + k as u64;
    let t = (7u64.pow(k) - 1) / 2;
    (r, s, t)
}

/// The shipped catalog of one-free-variable formulas, plus structural ball
/// predicates. Protocol code evaluates these on collected balls or through
/// the tree-decomposition machinery.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Psi {
    True,
    False,
    /// x lies on a triangle.
    Triangle,
    /// x has at least `d` neighbors.
    MinDeg(u32),
    /// x's rho-ball contains a cycle.
    BallCycle(u32),
    /// x's rho-ball is a tree.
    BallTree(u32),
    /// x carries the given unary label.
    Label(String),
}

impl Psi {
    /// The radius this predicate actually inspects.
    pub fn intrinsic_radius(&self) -> u32 {
        match self {
            Psi::True | Psi::False | Psi::Label(_) => 0,
            Psi::Triangle | Psi::MinDeg(_) => 1,
            Psi::BallCycle(r) | Psi::BallTree(r) => *r,
        }
    }

    /// As a first-order formula with free variable `x`, when one exists.
    pub fn as_formula(&self) -> Option<LocalFormula> {
        use LocalFormula::*;
        match self {
            Psi::True => Some(True),
            Psi::False => Some(False),
            Psi::Label(l) => Some(Label(l.clone(), "x".into())),
            Psi::Triangle => Some(LocalFormula::exists(
                "u",
                LocalFormula::exists(
                    "w",
                    LocalFormula::and(
                        LocalFormula::and(Edge("x".into(), "u".into()), Edge("x".into(), "w".into())),
                        Edge("u".into(), "w".into()),
                    ),
                ),
            )),
            Psi::MinDeg(d) => {
                // exists y1..yd pairwise distinct, all adjacent to x
                let d = *d as usize;
                if d == 0 {
                    return Some(True);
                }
                let names: Vec<String> = (0..d).map(|i| format!("y{i}")).collect();
                let mut body = LocalFormula::True;
                for (i, yi) in names.iter().enumerate() {
                    body = LocalFormula::and(body, Edge("x".into(), yi.clone()));
                    for yj in names.iter().take(i) {
                        body = LocalFormula::and(
                            body,
                            LocalFormula::not(Eq(yj.clone(), yi.clone())),
                        );
                    }
                }
                let mut f = body;
                for yi in names.iter().rev() {
                    f = LocalFormula::Exists(yi.clone(), Box::new(f));
                }
                Some(f)
            }
            Psi::BallCycle(_) | Psi::BallTree(_) => None,
        }
    }

    /// Evaluates the predicate for the root of a ball. `ball` must have
    /// radius at least [`intrinsic_radius`](Self::intrinsic_radius). Labels
    /// are looked up per local index.
    pub fn eval_on_ball(
        &self,
        ball: &crate::graph::RootedBall,
        labels: &dyn Fn(&str, usize) -> bool,
    ) -> bool {
        match self {
            Psi::True => true,
            Psi::False => false,
            Psi::Label(l) => labels(l, ball.root),
            Psi::Triangle => {
                let adj = &ball.sub.adj[ball.root];
                for (i, &u) in adj.iter().enumerate() {
                    for &w in adj.iter().skip(i + 1) {
                        if ball.sub.has_edge(u, w) {
                            return true;
                        }
                    }
                }
                false
            }
            Psi::MinDeg(d) => ball.sub.degree(ball.root) as u32 >= *d,
            Psi::BallCycle(rho) => {
                let inner = inner_ball(ball, *rho);
                inner.has_cycle()
            }
            Psi::BallTree(rho) => {
                let inner = inner_ball(ball, *rho);
                // an induced ball is always connected, so tree == acyclic
                !inner.has_cycle()
            }
        }
    }
}

/// The induced subgraph on nodes within `rho` of the ball's root, measured
/// inside the ball. Exact for the true rho-ball whenever `rho <= ball.radius`.
fn inner_ball(ball: &crate::graph::RootedBall, rho: u32) -> InducedSubgraph {
    let d = ball.sub.bfs_depths(ball.root);
    let keep: Vec<usize> = (0..ball.sub.len()).filter(|&i| d[i] <= rho).collect();
    let orig: Vec<NodeId> = keep.iter().map(|&i| ball.sub.original[i]).collect();
    // re-induce over local structure
    let mut index = HashMap::new();
    for (new, &old) in keep.iter().enumerate() {
        index.insert(old, new);
    }
    let mut adj = vec![Vec::new(); keep.len()];
    let mut m = 0;
    for (new, &old) in keep.iter().enumerate() {
        for &w in &ball.sub.adj[old] {
            if let Some(&j) = index.get(&w) {
                adj[new].push(j);
                if new < j {
                    m += 1;
                }
            }
        }
    }
    InducedSubgraph { original: orig, adj, m }
}

/// A basic local sentence: s witnesses, pairwise more than 2r apart, each
/// satisfying psi within its r-ball.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicLocalSentence {
    pub r: u32,
    pub s: u32,
    pub psi: Psi,
}

impl BasicLocalSentence {
    pub fn new(r: u32, s: u32, psi: Psi) -> Result<Self, QueryError> {
        if s < 1 {
            return Err(QueryError::Input("witness count s must be >= 1".into()));
        }
        if psi.intrinsic_radius() > r {
            return Err(QueryError::Input(format!(
                "psi inspects radius {} but the sentence radius is {r}",
                psi.intrinsic_radius()
            )));
        }
        Ok(BasicLocalSentence { r, s, psi })
    }
}

/// Second-sort term: counts of unary predicates combined arithmetically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CountTerm {
    Count(Psi),
    Add(Box<CountTerm>, Box<CountTerm>),
    Mul(Box<CountTerm>, Box<CountTerm>),
    /// Truncated (floor-at-zero) subtraction; flagged in reports.
    Sub(Box<CountTerm>, Box<CountTerm>),
}

impl CountTerm {
    /// Symbol count |t|; term values are bounded by n^|t|.
    pub fn symbol_count(&self) -> u32 {
        match self {
            CountTerm::Count(_) => 1,
            CountTerm::Add(a, b) | CountTerm::Mul(a, b) | CountTerm::Sub(a, b) => {
                a.symbol_count() + b.symbol_count() + 1
            }
        }
    }

    pub fn uses_subtraction(&self) -> bool {
        match self {
            CountTerm::Count(_) => false,
            CountTerm::Sub(..) => true,
            CountTerm::Add(a, b) | CountTerm::Mul(a, b) => {
                a.uses_subtraction() || b.uses_subtraction()
            }
        }
    }

    /// All basic count bodies, left to right.
    pub fn bodies(&self) -> Vec<&Psi> {
        match self {
            CountTerm::Count(p) => vec![p],
            CountTerm::Add(a, b) | CountTerm::Mul(a, b) | CountTerm::Sub(a, b) => {
                let mut v = a.bodies();
                v.extend(b.bodies());
                v
            }
        }
    }

    /// Evaluates given per-body counts (in [`bodies`](Self::bodies) order).
    pub fn eval_with(&self, counts: &mut impl Iterator<Item = u64>) -> u64 {
        match self {
            CountTerm::Count(_) => counts.next().expect("count supplied per body"),
            CountTerm::Add(a, b) => a.eval_with(counts) + b.eval_with(counts),
            CountTerm::Mul(a, b) => a.eval_with(counts) * b.eval_with(counts),
            CountTerm::Sub(a, b) => {
                let x = a.eval_with(counts);
                let y = b.eval_with(counts);
                x.saturating_sub(y)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountCmp {
    Eq,
    Lt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountAtom {
    pub left: CountTerm,
    pub cmp: CountCmp,
    pub right: CountTerm,
}

/// Boolean combination tree whose leaves are basic local sentences or
/// counting atoms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryExpr {
    Local(BasicLocalSentence),
    Count(CountAtom),
    Not(Box<QueryExpr>),
    And(Box<QueryExpr>, Box<QueryExpr>),
    Or(Box<QueryExpr>, Box<QueryExpr>),
}

impl QueryExpr {
    pub fn leaves(&self) -> Vec<&QueryExpr> {
        match self {
            QueryExpr::Local(_) | QueryExpr::Count(_) => vec![self],
            QueryExpr::Not(a) => a.leaves(),
            QueryExpr::And(a, b) | QueryExpr::Or(a, b) => {
                let mut v = a.leaves();
                v.extend(b.leaves());
                v
            }
        }
    }
}

/// Result of [`normalize_count`]: the normalized expression plus notes about
/// constructs handled with non-default semantics.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub expr: QueryExpr,
    pub notes: Vec<String>,
}

/// Brings a raw FO(#) expression into normal form: a Boolean combination of
/// pure-FO leaves and counting atoms over first-order unary bodies. Our input
/// grammar is already normal-form shaped, so this validates leaf bodies,
/// collapses double negations, and flags truncated subtraction.
pub fn normalize_count(raw: &QueryExpr) -> Result<Normalized, QueryError> {
    let mut notes = Vec::new();
    let expr = normalize_inner(raw, &mut notes)?;
    Ok(Normalized { expr, notes })
}

fn normalize_inner(raw: &QueryExpr, notes: &mut Vec<String>) -> Result<QueryExpr, QueryError> {
    match raw {
        QueryExpr::Local(l) => Ok(QueryExpr::Local(l.clone())),
        QueryExpr::Count(atom) => {
            for term in [&atom.left, &atom.right] {
                if term.uses_subtraction() {
                    notes.push(
                        "count term uses truncated (floor-at-zero) subtraction".to_string(),
                    );
                }
                for body in term.bodies() {
                    if body.intrinsic_radius() > 0 && body.as_formula().is_none() {
                        // structural predicate: allowed, but note it
                        notes.push(format!(
                            "count body {body:?} is a structural ball predicate"
                        ));
                    }
                }
            }
            Ok(QueryExpr::Count(atom.clone()))
        }
        QueryExpr::Not(a) => match normalize_inner(a, notes)? {
            QueryExpr::Not(inner) => Ok(*inner),
            other => Ok(QueryExpr::Not(Box::new(other))),
        },
        QueryExpr::And(a, b) => Ok(QueryExpr::And(
            Box::new(normalize_inner(a, notes)?),
            Box::new(normalize_inner(b, notes)?),
        )),
        QueryExpr::Or(a, b) => Ok(QueryExpr::Or(
            Box::new(normalize_inner(a, notes)?),
            Box::new(normalize_inner(b, notes)?),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use LocalFormula::*;

    #[test]
    fn rank_examples() {
        let e = Edge("x".into(), "y".into());
        assert_eq!(e.quantifier_rank(), 0);
        let f = LocalFormula::exists("x", LocalFormula::exists("y", Edge("x".into(), "y".into())));
        assert_eq!(f.quantifier_rank(), 2);
        let g = LocalFormula::and(
            LocalFormula::exists("x", Edge("x".into(), "x".into())),
            LocalFormula::exists("z", LocalFormula::exists("w", Edge("z".into(), "w".into()))),
        );
        assert_eq!(g.quantifier_rank(), 2);
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(gaifman_bounds(1, 0, false), (1, 1, 3));
        assert_eq!(gaifman_bounds(2, 0, false), (7, 2, 24));
        assert_eq!(gaifman_bounds(2, 0, true).0, 15);
    }

    #[test]
    fn bounds_monotone() {
        for k in 1..6 {
            for p in 0..4 {
                let a = gaifman_bounds(k, p, false);
                let b = gaifman_bounds(k + 1, p, false);
                let c = gaifman_bounds(k, p + 1, false);
                assert!(b.0 >= a.0 && b.1 >= a.1 && b.2 >= a.2);
                assert!(c.1 >= a.1);
            }
        }
    }

    #[test]
    fn relativize_quantifier_free_unchanged() {
        let f = Edge("y".into(), "z".into());
        assert_eq!(relativize(&f, 3, "x").unwrap(), f);
    }

    #[test]
    fn relativize_exists_guards() {
        let f = LocalFormula::exists("y", Label("P".into(), "y".into()));
        let rel = relativize(&f, 2, "x").unwrap();
        match rel {
            Exists(v, body) => {
                assert_eq!(v, "y");
                match *body {
                    And(a, _) => assert_eq!(*a, DistLe("x".into(), "y".into(), 2)),
                    other => panic!("expected guard, got {other:?}"),
                }
            }
            other => panic!("expected exists, got {other:?}"),
        }
    }

    #[test]
    fn relativize_anchor_collision() {
        let f = LocalFormula::exists("x", Label("P".into(), "x".into()));
        assert!(relativize(&f, 1, "x").is_err());
    }

    #[test]
    fn mindeg_formula_matches_structural() {
        let g = crate::graph::Graph::new(4, &[(1, 2), (1, 3), (1, 4), (2, 3)]).unwrap();
        for d in 0..5u32 {
            let psi = Psi::MinDeg(d);
            for v in g.nodes() {
                let ball = g.k_ball(v, 1).unwrap();
                let structural = psi.eval_on_ball(&ball, &|_, _| false);
                let f = psi.as_formula().unwrap();
                let dist_fn = |a: usize, b: usize| ball.sub.bfs_depths(a)[b];
                let mut env = HashMap::new();
                env.insert("x".to_string(), ball.root);
                let by_formula = f.eval(&ball.sub, &dist_fn, &|_, _| false, &mut env);
                assert_eq!(structural, by_formula, "v={v} d={d}");
            }
        }
    }

    #[test]
    fn ball_cycle_radius1_equals_triangle() {
        let graphs = vec![
            crate::graph::Graph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap(),
            crate::graph::Graph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 1)]).unwrap(),
            crate::graph::Graph::new(4, &[(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]).unwrap(),
        ];
        for g in graphs {
            for v in g.nodes() {
                let ball = g.k_ball(v, 1).unwrap();
                let tri = Psi::Triangle.eval_on_ball(&ball, &|_, _| false);
                let cyc = Psi::BallCycle(1).eval_on_ball(&ball, &|_, _| false);
                assert_eq!(tri, cyc);
                let tree = Psi::BallTree(1).eval_on_ball(&ball, &|_, _| false);
                assert_eq!(tree, !cyc);
            }
        }
    }

    #[test]
    fn normalize_fixpoint_and_double_negation() {
        let atom = CountAtom {
            left: CountTerm::Count(Psi::MinDeg(2)),
            cmp: CountCmp::Lt,
            right: CountTerm::Count(Psi::True),
        };
        let q = QueryExpr::Count(atom.clone());
        let n = normalize_count(&q).unwrap();
        assert_eq!(n.expr, q);
        let qq = QueryExpr::Not(Box::new(QueryExpr::Not(Box::new(q.clone()))));
        assert_eq!(normalize_count(&qq).unwrap().expr, q);
    }

    #[test]
    fn subtraction_flagged() {
        let atom = CountAtom {
            left: CountTerm::Sub(
                Box::new(CountTerm::Count(Psi::True)),
                Box::new(CountTerm::Count(Psi::Triangle)),
            ),
            cmp: CountCmp::Eq,
            right: CountTerm::Count(Psi::True),
        };
        let n = normalize_count(&QueryExpr::Count(atom)).unwrap();
        assert!(n.notes.iter().any(|s| s.contains("subtraction")));
    }

    #[test]
    fn symbol_count() {
        let t = CountTerm::Mul(
            Box::new(CountTerm::Add(
                Box::new(CountTerm::Count(Psi::True)),
                Box::new(CountTerm::Count(Psi::True)),
            )),
            Box::new(CountTerm::Count(Psi::True)),
        );
        assert_eq!(t.symbol_count(), 5);
    }
}
