//! Line-oriented text formats.
//!
//! Graph file: header `graph <n> <m>`, then `e <u> <v>` lines.
//! Embedding file: per node, `rot <v> <u1> <u2> ... <uk>` in cyclic order.
//! Both whitespace-separated; comments start with `#`.
//! Decomposition dump: `td <arity>` header, then `bag <id> <parent> v1 ... vA`
//! lines (`parent` is `-` at the root).

use crate::embedding::PlanarEmbedding;
use crate::error::GraphError;
use crate::graph::{Graph, NodeId};
use crate::td::OrderedTreeDecomposition;

fn tokens(line: &str) -> Vec<&str> {
    match line.find('#') {
        Some(i) => line[..i].split_whitespace().collect(),
        None => line.split_whitespace().collect(),
    }
}

pub fn parse_graph(name: &str, text: &str) -> Result<Graph, GraphError> {
    let mut n: Option<u32> = None;
    let mut m: Option<usize> = None;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let t = tokens(line);
        if t.is_empty() {
            continue;
        }
        let err = |msg: &str| GraphError::Parse {
            file: name.to_string(),
            line: lineno + 1,
            msg: msg.to_string(),
        };
        match t[0] {
            "graph" => {
                if t.len() != 3 {
                    return Err(err("expected: graph <n> <m>"));
                }
                n = Some(t[1].parse().map_err(|_| err("bad node count"))?);
                m = Some(t[2].parse().map_err(|_| err("bad edge count"))?);
            }
            "e" => {
                if t.len() != 3 {
                    return Err(err("expected: e <u> <v>"));
                }
                let u: NodeId = t[1].parse().map_err(|_| err("bad node id"))?;
                let v: NodeId = t[2].parse().map_err(|_| err("bad node id"))?;
                edges.push((u, v));
            }
            other => return Err(err(&format!("unknown directive '{other}'"))),
        }
    }
    let n = n.ok_or_else(|| GraphError::Parse {
        file: name.to_string(),
        line: 0,
        msg: "missing 'graph <n> <m>' header".into(),
    })?;
    if let Some(m) = m {
        if m != edges.len() {
            return Err(GraphError::Parse {
                file: name.to_string(),
                line: 0,
                msg: format!("header declares {m} edges, found {}", edges.len()),
            });
        }
    }
    Graph::new(n, &edges)
}

pub fn write_graph(g: &Graph) -> String {
    let mut out = format!("graph {} {}\n", g.node_count(), g.edge_count());
    for (u, v) in g.edges() {
        out.push_str(&format!("e {u} {v}\n"));
    }
    out
}

pub fn parse_embedding(name: &str, text: &str, g: &Graph) -> Result<PlanarEmbedding, GraphError> {
    let mut rotation: Vec<Vec<NodeId>> = vec![Vec::new(); g.node_count() as usize + 1];
    let mut seen = vec![false; g.node_count() as usize + 1];
    for (lineno, line) in text.lines().enumerate() {
        let t = tokens(line);
        if t.is_empty() {
            continue;
        }
        let err = |msg: String| GraphError::Parse {
            file: name.to_string(),
            line: lineno + 1,
            msg,
        };
        if t[0] != "rot" {
            return Err(err(format!("unknown directive '{}'", t[0])));
        }
        if t.len() < 2 {
            return Err(err("expected: rot <v> <u1> ...".into()));
        }
        let v: NodeId = t[1].parse().map_err(|_| err("bad node id".into()))?;
        g.check_id(v)?;
        if seen[v as usize] {
            return Err(err(format!("duplicate rotation for {v}")));
        }
        seen[v as usize] = true;
        let mut rot = Vec::with_capacity(t.len() - 2);
        for s in &t[2..] {
            rot.push(s.parse().map_err(|_| err("bad neighbor id".into()))?);
        }
        rotation[v as usize] = rot;
    }
    for v in g.nodes() {
        if !seen[v as usize] {
            return Err(GraphError::Embedding(format!("missing rotation for {v}")));
        }
    }
    PlanarEmbedding::new(g, rotation)
}

pub fn write_embedding(emb: &PlanarEmbedding) -> String {
    let mut out = String::new();
    for (v, rot) in emb.rotation.iter().enumerate().skip(1) {
        out.push_str(&format!("rot {v}"));
        for u in rot {
            out.push_str(&format!(" {u}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_td(td: &OrderedTreeDecomposition) -> String {
    let mut out = format!("td {}\n", td.arity);
    for (t, bag) in td.bags.iter().enumerate() {
        let parent = match td.parent[t] {
            Some(p) => p.to_string(),
            None => "-".to_string(),
        };
        out.push_str(&format!("bag {t} {parent}"));
        for v in bag {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_roundtrip() {
        let g = Graph::new(4, &[(1, 2), (2, 3), (3, 4), (4, 1)]).unwrap();
        let text = write_graph(&g);
        let g2 = parse_graph("t", &text).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = "# a square\ngraph 4 4\n\ne 1 2 # first\ne 2 3\ne 3 4\ne 4 1\n";
        let g = parse_graph("t", text).unwrap();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.edge_count(), 4);
    }

    #[test]
    fn header_edge_count_checked() {
        let text = "graph 3 5\ne 1 2\ne 2 3\n";
        assert!(parse_graph("t", text).is_err());
    }

    #[test]
    fn embedding_roundtrip() {
        let g = Graph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap();
        let text = "rot 1 2 3\nrot 2 3 1\nrot 3 1 2\n";
        let emb = parse_embedding("t", text, &g).unwrap();
        let text2 = write_embedding(&emb);
        let emb2 = parse_embedding("t", &text2, &g).unwrap();
        assert_eq!(emb, emb2);
    }

    #[test]
    fn embedding_missing_rotation() {
        let g = Graph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap();
        assert!(parse_embedding("t", "rot 1 2 3\nrot 2 3 1\n", &g).is_err());
    }
}
