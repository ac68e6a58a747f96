//! S-expression query files.
//!
//! ```text
//! file  := (bounded :d <deg> EXPR) | (planar EXPR)
//! EXPR  := (and E E) | (or E E) | (not E)
//!        | (local :r R :s S :psi PSI)
//!        | (count= T T) | (count< T T)
//!        | (hanf :r R :m M PRED)            ; bounded protocol only
//! T     := (# PSI) | (+ T T) | (* T T) | (- T T)
//! PSI   := true | false | triangle | (mindeg D) | (ballcycle R) | (balltree R)
//! PRED  := (atleast C TYPE) | (present TYPE) | (and P P) | (or P P) | (not P)
//! TYPE  := path3mid | pathend | (ball :root R :n N :edges (u v) ...)
//! ```
//!
//! Comments run from `;` to end of line.

use crate::error::QueryError;
use crate::graph::Graph;
use crate::query::{BasicLocalSentence, CountAtom, CountCmp, CountTerm, Psi, QueryExpr};

/// Which protocol family evaluates the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolKind {
    Bounded { degree_bound: u32 },
    Planar,
}

/// Hanf-style decision predicate over a capped type table.
#[derive(Debug, Clone, PartialEq)]
pub enum TypePredicate {
    AtLeast(u64, ExemplarBall),
    Present(ExemplarBall),
    And(Box<TypePredicate>, Box<TypePredicate>),
    Or(Box<TypePredicate>, Box<TypePredicate>),
    Not(Box<TypePredicate>),
}

impl TypePredicate {
    /// Largest threshold used anywhere in the predicate.
    pub fn max_threshold(&self) -> u64 {
        match self {
            TypePredicate::AtLeast(c, _) => *c,
            TypePredicate::Present(_) => 1,
            TypePredicate::And(a, b) | TypePredicate::Or(a, b) => {
                a.max_threshold().max(b.max_threshold())
            }
            TypePredicate::Not(a) => a.max_threshold(),
        }
    }
}

/// A small rooted graph used to denote an r-type by example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarBall {
    pub n: u32,
    pub root: u32,
    pub edges: Vec<(u32, u32)>,
}

impl ExemplarBall {
    pub fn to_ball(&self) -> Result<crate::graph::RootedBall, QueryError> {
        let g = Graph::new(self.n, &self.edges).map_err(|e| QueryError::Input(e.to_string()))?;
        let ecc = (1..=self.n)
            .map(|v| g.distance(self.root, v).unwrap())
            .max()
            .unwrap_or(0);
        g.k_ball(self.root, ecc)
            .map_err(|e| QueryError::Input(e.to_string()))
    }
}

/// One leaf kind that is not part of `QueryExpr`: a Hanf table decision.
#[derive(Debug, Clone, PartialEq)]
pub struct HanfQuery {
    pub r: u32,
    pub m: u64,
    pub predicate: TypePredicate,
}

/// A parsed query file: either a normal-form expression or a Hanf decision.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFile {
    pub protocol: ProtocolKind,
    pub body: QueryBody,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryBody {
    Expr(QueryExpr),
    Hanf(HanfQuery),
}

#[derive(Debug, Clone, PartialEq)]
enum Sexp {
    Atom(String),
    List(Vec<Sexp>),
}

fn tokenize(text: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut start = 0;
    let mut in_comment = false;
    for (i, c) in text.char_indices() {
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        match c {
            ';' => {
                if !cur.is_empty() {
                    out.push((start, std::mem::take(&mut cur)));
                }
                in_comment = true;
            }
            '(' | ')' => {
                if !cur.is_empty() {
                    out.push((start, std::mem::take(&mut cur)));
                }
                out.push((i, c.to_string()));
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    out.push((start, std::mem::take(&mut cur)));
                }
            }
            c => {
                if cur.is_empty() {
                    start = i;
                }
                cur.push(c);
            }
        }
    }
    if !cur.is_empty() {
        out.push((start, cur));
    }
    out
}

struct Parser<'a> {
    file: &'a str,
    toks: Vec<(usize, String)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> QueryError {
        let pos = self.toks.get(self.pos).map(|t| t.0).unwrap_or(0);
        QueryError::Parse {
            file: self.file.to_string(),
            pos,
            msg: msg.into(),
        }
    }

    fn parse_sexp(&mut self) -> Result<Sexp, QueryError> {
        let (_, tok) = self
            .toks
            .get(self.pos)
            .cloned()
            .ok_or_else(|| self.err("unexpected end of input"))?;
        self.pos += 1;
        match tok.as_str() {
            "(" => {
                let mut items = Vec::new();
                loop {
                    match self.toks.get(self.pos) {
                        Some((_, t)) if t == ")" => {
                            self.pos += 1;
                            return Ok(Sexp::List(items));
                        }
                        Some(_) => items.push(self.parse_sexp()?),
                        None => return Err(self.err("missing ')'")),
                    }
                }
            }
            ")" => Err(self.err("unexpected ')'")),
            a => Ok(Sexp::Atom(a.to_string())),
        }
    }
}

fn atom(s: &Sexp) -> Option<&str> {
    match s {
        Sexp::Atom(a) => Some(a),
        _ => None,
    }
}

fn parse_u32(file: &str, s: &Sexp, what: &str) -> Result<u32, QueryError> {
    atom(s)
        .and_then(|a| a.parse().ok())
        .ok_or_else(|| QueryError::Parse {
            file: file.into(),
            pos: 0,
            msg: format!("expected {what}"),
        })
}

fn parse_u64(file: &str, s: &Sexp, what: &str) -> Result<u64, QueryError> {
    atom(s)
        .and_then(|a| a.parse().ok())
        .ok_or_else(|| QueryError::Parse {
            file: file.into(),
            pos: 0,
            msg: format!("expected {what}"),
        })
}

/// Reads keyword arguments `:k v` pairs from the front of `items`, returning
/// the rest.
fn keywords<'s>(
    file: &str,
    items: &'s [Sexp],
) -> Result<(Vec<(String, &'s Sexp)>, &'s [Sexp]), QueryError> {
    let mut kws = Vec::new();
    let mut i = 0;
    while i + 1 < items.len() + 1 {
        match items.get(i) {
            Some(Sexp::Atom(a)) if a.starts_with(':') => {
                let v = items.get(i + 1).ok_or_else(|| QueryError::Parse {
                    file: file.into(),
                    pos: 0,
                    msg: format!("keyword {a} missing value"),
                })?;
                kws.push((a[1..].to_string(), v));
                i += 2;
            }
            _ => break,
        }
    }
    Ok((kws, &items[i..]))
}

fn parse_psi(file: &str, s: &Sexp) -> Result<Psi, QueryError> {
    match s {
        Sexp::Atom(a) => match a.as_str() {
            "true" => Ok(Psi::True),
            "false" => Ok(Psi::False),
            "triangle" => Ok(Psi::Triangle),
            other => Err(QueryError::Unsupported(format!("psi '{other}'"))),
        },
        Sexp::List(items) => {
            let head = items.first().and_then(atom).ok_or_else(|| QueryError::Parse {
                file: file.into(),
                pos: 0,
                msg: "empty psi form".into(),
            })?;
            match head {
                "triangle" => Ok(Psi::Triangle),
                "true" => Ok(Psi::True),
                "false" => Ok(Psi::False),
                "mindeg" => Ok(Psi::MinDeg(parse_u32(file, &items[1], "degree")?)),
                "ballcycle" => Ok(Psi::BallCycle(parse_u32(file, &items[1], "radius")?)),
                "balltree" => Ok(Psi::BallTree(parse_u32(file, &items[1], "radius")?)),
                other => Err(QueryError::Unsupported(format!("psi '{other}'"))),
            }
        }
    }
}

fn parse_term(file: &str, s: &Sexp) -> Result<CountTerm, QueryError> {
    let Sexp::List(items) = s else {
        return Err(QueryError::Parse {
            file: file.into(),
            pos: 0,
            msg: "count term must be a list".into(),
        });
    };
    let head = items.first().and_then(atom).ok_or_else(|| QueryError::Parse {
        file: file.into(),
        pos: 0,
        msg: "empty count term".into(),
    })?;
    match head {
        "#" => Ok(CountTerm::Count(parse_psi(file, &items[1])?)),
        "+" | "*" | "-" => {
            if items.len() != 3 {
                return Err(QueryError::Parse {
                    file: file.into(),
                    pos: 0,
                    msg: format!("'{head}' takes two terms"),
                });
            }
            let a = Box::new(parse_term(file, &items[1])?);
            let b = Box::new(parse_term(file, &items[2])?);
            Ok(match head {
                "+" => CountTerm::Add(a, b),
                "*" => CountTerm::Mul(a, b),
                _ => CountTerm::Sub(a, b),
            })
        }
        other => Err(QueryError::Unsupported(format!("count term '{other}'"))),
    }
}

fn parse_exemplar(file: &str, s: &Sexp) -> Result<ExemplarBall, QueryError> {
    match s {
        Sexp::Atom(a) => match a.as_str() {
            // 1-ball of a degree-2 node on an induced path
            "path3mid" => Ok(ExemplarBall {
                n: 3,
                root: 2,
                edges: vec![(1, 2), (2, 3)],
            }),
            // 1-ball of a path end
            "pathend" => Ok(ExemplarBall {
                n: 2,
                root: 1,
                edges: vec![(1, 2)],
            }),
            other => Err(QueryError::Unsupported(format!("exemplar '{other}'"))),
        },
        Sexp::List(items) => {
            let head = items.first().and_then(atom);
            if head != Some("ball") {
                return Err(QueryError::Parse {
                    file: file.into(),
                    pos: 0,
                    msg: "expected (ball :root R :n N :edges (u v) ...)".into(),
                });
            }
            let (kws, rest) = keywords(file, &items[1..])?;
            let mut n = None;
            let mut root = None;
            for (k, v) in kws {
                match k.as_str() {
                    "n" => n = Some(parse_u32(file, v, "node count")?),
                    "root" => root = Some(parse_u32(file, v, "root id")?),
                    "edges" => {}
                    other => {
                        return Err(QueryError::Parse {
                            file: file.into(),
                            pos: 0,
                            msg: format!("unknown ball keyword :{other}"),
                        })
                    }
                }
            }
            let mut edges = Vec::new();
            // edges come as trailing (u v) pairs, possibly after :edges marker
            for item in rest {
                if let Sexp::List(pair) = item {
                    if pair.len() == 2 {
                        edges.push((
                            parse_u32(file, &pair[0], "edge endpoint")?,
                            parse_u32(file, &pair[1], "edge endpoint")?,
                        ));
                        continue;
                    }
                }
                return Err(QueryError::Parse {
                    file: file.into(),
                    pos: 0,
                    msg: "ball edges must be (u v) pairs".into(),
                });
            }
            Ok(ExemplarBall {
                n: n.ok_or_else(|| QueryError::Parse {
                    file: file.into(),
                    pos: 0,
                    msg: "ball missing :n".into(),
                })?,
                root: root.ok_or_else(|| QueryError::Parse {
                    file: file.into(),
                    pos: 0,
                    msg: "ball missing :root".into(),
                })?,
                edges,
            })
        }
    }
}

fn parse_pred(file: &str, s: &Sexp) -> Result<TypePredicate, QueryError> {
    let Sexp::List(items) = s else {
        return Err(QueryError::Parse {
            file: file.into(),
            pos: 0,
            msg: "predicate must be a list".into(),
        });
    };
    let head = items.first().and_then(atom).ok_or_else(|| QueryError::Parse {
        file: file.into(),
        pos: 0,
        msg: "empty predicate".into(),
    })?;
    match head {
        "atleast" => Ok(TypePredicate::AtLeast(
            parse_u64(file, &items[1], "count")?,
            parse_exemplar(file, &items[2])?,
        )),
        "present" => Ok(TypePredicate::Present(parse_exemplar(file, &items[1])?)),
        "and" | "or" => {
            let a = Box::new(parse_pred(file, &items[1])?);
            let b = Box::new(parse_pred(file, &items[2])?);
            Ok(if head == "and" {
                TypePredicate::And(a, b)
            } else {
                TypePredicate::Or(a, b)
            })
        }
        "not" => Ok(TypePredicate::Not(Box::new(parse_pred(file, &items[1])?))),
        other => Err(QueryError::Unsupported(format!("predicate '{other}'"))),
    }
}

enum ExprOrHanf {
    Expr(QueryExpr),
    Hanf(HanfQuery),
}

fn parse_expr(file: &str, s: &Sexp) -> Result<ExprOrHanf, QueryError> {
    let Sexp::List(items) = s else {
        return Err(QueryError::Parse {
            file: file.into(),
            pos: 0,
            msg: "expression must be a list".into(),
        });
    };
    let head = items.first().and_then(atom).ok_or_else(|| QueryError::Parse {
        file: file.into(),
        pos: 0,
        msg: "empty expression".into(),
    })?;
    let sub = |s: &Sexp| -> Result<QueryExpr, QueryError> {
        match parse_expr(file, s)? {
            ExprOrHanf::Expr(e) => Ok(e),
            ExprOrHanf::Hanf(_) => Err(QueryError::Unsupported(
                "hanf decisions cannot nest inside boolean expressions".into(),
            )),
        }
    };
    match head {
        "and" | "or" => {
            if items.len() != 3 {
                return Err(QueryError::Parse {
                    file: file.into(),
                    pos: 0,
                    msg: format!("'{head}' takes two expressions"),
                });
            }
            let a = Box::new(sub(&items[1])?);
            let b = Box::new(sub(&items[2])?);
            Ok(ExprOrHanf::Expr(if head == "and" {
                QueryExpr::And(a, b)
            } else {
                QueryExpr::Or(a, b)
            }))
        }
        "not" => Ok(ExprOrHanf::Expr(QueryExpr::Not(Box::new(sub(&items[1])?)))),
        "local" => {
            let (kws, _) = keywords(file, &items[1..])?;
            let mut r = None;
            let mut s_count = None;
            let mut psi = None;
            for (k, v) in kws {
                match k.as_str() {
                    "r" => r = Some(parse_u32(file, v, "radius")?),
                    "s" => s_count = Some(parse_u32(file, v, "witness count")?),
                    "psi" => psi = Some(parse_psi(file, v)?),
                    other => {
                        return Err(QueryError::Parse {
                            file: file.into(),
                            pos: 0,
                            msg: format!("unknown local keyword :{other}"),
                        })
                    }
                }
            }
            let leaf = BasicLocalSentence::new(
                r.ok_or_else(|| QueryError::Input("local missing :r".into()))?,
                s_count.ok_or_else(|| QueryError::Input("local missing :s".into()))?,
                psi.ok_or_else(|| QueryError::Input("local missing :psi".into()))?,
            )?;
            Ok(ExprOrHanf::Expr(QueryExpr::Local(leaf)))
        }
        "count=" | "count<" => {
            let left = parse_term(file, &items[1])?;
            let right = parse_term(file, &items[2])?;
            Ok(ExprOrHanf::Expr(QueryExpr::Count(CountAtom {
                left,
                cmp: if head == "count=" {
                    CountCmp::Eq
                } else {
                    CountCmp::Lt
                },
                right,
            })))
        }
        "hanf" => {
            let (kws, rest) = keywords(file, &items[1..])?;
            let mut r = None;
            let mut m = None;
            for (k, v) in kws {
                match k.as_str() {
                    "r" => r = Some(parse_u32(file, v, "radius")?),
                    "m" => m = Some(parse_u64(file, v, "threshold")?),
                    other => {
                        return Err(QueryError::Parse {
                            file: file.into(),
                            pos: 0,
                            msg: format!("unknown hanf keyword :{other}"),
                        })
                    }
                }
            }
            let pred = parse_pred(
                file,
                rest.first().ok_or_else(|| QueryError::Input("hanf missing predicate".into()))?,
            )?;
            Ok(ExprOrHanf::Hanf(HanfQuery {
                r: r.ok_or_else(|| QueryError::Input("hanf missing :r".into()))?,
                m: m.ok_or_else(|| QueryError::Input("hanf missing :m".into()))?,
                predicate: pred,
            }))
        }
        other => Err(QueryError::Unsupported(format!("expression '{other}'"))),
    }
}

/// Parses a whole query file.
pub fn parse_query(file: &str, text: &str) -> Result<QueryFile, QueryError> {
    let toks = tokenize(text);
    let mut p = Parser { file, toks, pos: 0 };
    let top = p.parse_sexp()?;
    if p.pos != p.toks.len() {
        return Err(p.err("trailing tokens after query"));
    }
    let Sexp::List(items) = &top else {
        return Err(p.err("query must be a list"));
    };
    let head = items.first().and_then(atom).ok_or_else(|| p.err("empty query"))?;
    match head {
        "bounded" => {
            let (kws, rest) = keywords(file, &items[1..])?;
            let mut d = None;
            for (k, v) in kws {
                match k.as_str() {
                    "d" => d = Some(parse_u32(file, v, "degree bound")?),
                    other => {
                        return Err(QueryError::Parse {
                            file: file.into(),
                            pos: 0,
                            msg: format!("unknown bounded keyword :{other}"),
                        })
                    }
                }
            }
            let d = d.ok_or_else(|| QueryError::Input("bounded protocol requires :d".into()))?;
            finish(file, ProtocolKind::Bounded { degree_bound: d }, rest)
        }
        "planar" => finish(file, ProtocolKind::Planar, &items[1..]),
        other => Err(QueryError::Unsupported(format!(
            "protocol '{other}' (expected 'bounded' or 'planar')"
        ))),
    }
}

fn finish(file: &str, protocol: ProtocolKind, rest: &[Sexp]) -> Result<QueryFile, QueryError> {
    let body_sexp = rest
        .first()
        .ok_or_else(|| QueryError::Input("query missing body expression".into()))?;
    let body = match parse_expr(file, body_sexp)? {
        ExprOrHanf::Expr(e) => QueryBody::Expr(e),
        ExprOrHanf::Hanf(h) => {
            if matches!(protocol, ProtocolKind::Planar) {
                return Err(QueryError::Unsupported(
                    "hanf decisions require the bounded protocol".into(),
                ));
            }
            QueryBody::Hanf(h)
        }
    };
    Ok(QueryFile { protocol, body })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_local_query() {
        let q = parse_query(
            "t",
            "(bounded :d 3 (and (local :r 1 :s 2 :psi triangle) (not (count< (# (mindeg 2)) (# true)))))",
        )
        .unwrap();
        assert_eq!(q.protocol, ProtocolKind::Bounded { degree_bound: 3 });
        match q.body {
            QueryBody::Expr(QueryExpr::And(a, b)) => {
                assert!(matches!(*a, QueryExpr::Local(_)));
                assert!(matches!(*b, QueryExpr::Not(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_planar_query() {
        let q = parse_query("t", "(planar (local :r 2 :s 3 :psi (mindeg 4)))").unwrap();
        assert_eq!(q.protocol, ProtocolKind::Planar);
    }

    #[test]
    fn parse_hanf_query() {
        let q = parse_query("t", "(bounded :d 2 (hanf :r 1 :m 5 (atleast 3 path3mid)))").unwrap();
        match q.body {
            QueryBody::Hanf(h) => {
                assert_eq!(h.r, 1);
                assert_eq!(h.m, 5);
                assert_eq!(h.predicate.max_threshold(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hanf_rejected_on_planar() {
        assert!(parse_query("t", "(planar (hanf :r 1 :m 5 (present path3mid)))").is_err());
    }

    #[test]
    fn unsupported_construct_named() {
        let e = parse_query("t", "(bounded :d 3 (xor (local :r 1 :s 1 :psi true) (local :r 1 :s 1 :psi true)))");
        match e {
            Err(QueryError::Unsupported(msg)) => assert!(msg.contains("xor")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_ok() {
        let q = parse_query("t", "; header\n(planar ; protocol\n (local :r 1 :s 1 :psi true))").unwrap();
        assert_eq!(q.protocol, ProtocolKind::Planar);
    }

    #[test]
    fn psi_radius_enforced() {
        assert!(parse_query("t", "(planar (local :r 1 :s 1 :psi (ballcycle 2)))").is_err());
    }

    #[test]
    fn explicit_exemplar() {
        let q = parse_query(
            "t",
            "(bounded :d 3 (hanf :r 1 :m 4 (present (ball :root 2 :n 3 (1 2) (2 3)))))",
        )
        .unwrap();
        match q.body {
            QueryBody::Hanf(h) => match h.predicate {
                TypePredicate::Present(b) => {
                    assert_eq!(b.n, 3);
                    assert_eq!(b.root, 2);
                    assert_eq!(b.edges.len(), 2);
                }
                other => panic!("unexpected {other:?}"),
            },
            other => panic!("unexpected {other:?}"),
        }
    }
}
