//! Tree-decomposition evaluation: binarization, position labelings, explicit
//! deterministic bottom-up tree automata, the three-pass computation of
//! satisfying assignments, element/set encodings, and a dedicated dynamic
//! program for scattered witness sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::TdError;
use crate::graph::NodeId;
use crate::td::OrderedTreeDecomposition;

pub mod scattered;

pub use scattered::{scattered_dp, scattered_dp_count};

// ---------------------------------------------------------------------------
// Binarization
// ---------------------------------------------------------------------------

/// Reduces the rank to at most 2 by chaining surplus children under copies of
/// their parent's bag. Width and validity are preserved.
pub fn binarize(td: &OrderedTreeDecomposition) -> Result<OrderedTreeDecomposition, TdError> {
    if td.is_empty() {
        return Err(TdError::Input("empty decomposition".into()));
    }
    let mut bags = td.bags.clone();
    let mut parent = td.parent.clone();
    let children = td.children();
    let mut queue: Vec<usize> = (0..td.len()).collect();
    let mut kids: Vec<Vec<usize>> = children;
    while let Some(t) = queue.pop() {
        while kids[t].len() > 2 {
            // keep the first child, move the rest under a copy bag
            let keep = kids[t][0];
            let rest: Vec<usize> = kids[t][1..].to_vec();
            let copy = bags.len();
            bags.push(bags[t].clone());
            parent.push(Some(t));
            kids.push(rest.clone());
            for &c in &rest {
                parent[c] = Some(copy);
            }
            kids[t] = vec![keep, copy];
            queue.push(copy);
        }
    }
    Ok(OrderedTreeDecomposition {
        arity: td.arity,
        bags,
        parent,
        root: td.root,
    })
}

// ---------------------------------------------------------------------------
// Position labelings
// ---------------------------------------------------------------------------

/// Per-vertex labeling of a rank<=2 ordered decomposition: lambda1 records
/// edges between positions, lambda2 equalities within the bag, lambda3
/// position sharing with the parent bag (empty exactly at the root).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SigmaLabel {
    pub l1: BTreeSet<(u8, u8)>,
    pub l2: BTreeSet<(u8, u8)>,
    pub l3: BTreeSet<(u8, u8)>,
}

/// Computes the three position labelings against an explicit edge set.
pub fn sigma_labels(
    td: &OrderedTreeDecomposition,
    edges: &[(NodeId, NodeId)],
) -> Result<Vec<SigmaLabel>, TdError> {
    if td.rank() > 2 {
        return Err(TdError::Input(format!(
            "labeling requires rank <= 2, got {}",
            td.rank()
        )));
    }
    let eset: BTreeSet<(NodeId, NodeId)> = edges
        .iter()
        .flat_map(|&(u, v)| [(u, v), (v, u)])
        .collect();
    let mut out = Vec::with_capacity(td.len());
    for (t, bag) in td.bags.iter().enumerate() {
        let k = bag.len();
        let mut lab = SigmaLabel::default();
        for i in 0..k {
            for j in 0..k {
                if eset.contains(&(bag[i], bag[j])) {
                    lab.l1.insert((i as u8, j as u8));
                }
                if bag[i] == bag[j] {
                    lab.l2.insert((i as u8, j as u8));
                }
            }
        }
        if let Some(p) = td.parent[t] {
            let pbag = &td.bags[p];
            for i in 0..k {
                for j in 0..pbag.len() {
                    if bag[i] == pbag[j] {
                        lab.l3.insert((i as u8, j as u8));
                    }
                }
            }
        }
        out.push(lab);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tree automata
// ---------------------------------------------------------------------------

pub type StateId = usize;
pub type SymId = usize;

/// Deterministic bottom-up tree automaton with explicit transition tables,
/// totalized with a sink state.
#[derive(Debug, Clone)]
pub struct TreeAutomaton {
    pub states: Vec<String>,
    pub alphabet: Vec<String>,
    pub init: HashMap<SymId, StateId>,
    pub delta1: HashMap<(StateId, SymId), StateId>,
    pub delta2: HashMap<(StateId, StateId, SymId), StateId>,
    pub finals: BTreeSet<StateId>,
    pub sink: StateId,
}

impl TreeAutomaton {
    pub fn state_id(&self, name: &str) -> Option<StateId> {
        self.states.iter().position(|s| s == name)
    }

    pub fn sym_id(&self, name: &str) -> Option<SymId> {
        self.alphabet.iter().position(|s| s == name)
    }

    pub fn f0(&self, sym: SymId) -> StateId {
        self.init.get(&sym).copied().unwrap_or(self.sink)
    }

    pub fn d1(&self, q: StateId, sym: SymId) -> StateId {
        self.delta1.get(&(q, sym)).copied().unwrap_or(self.sink)
    }

    pub fn d2(&self, q1: StateId, q2: StateId, sym: SymId) -> StateId {
        self.delta2
            .get(&(q1, q2, sym))
            .copied()
            .unwrap_or(self.sink)
    }
}

/// A rooted labeled tree, children ordered, rank unconstrained at build time.
#[derive(Debug, Clone)]
pub struct LabeledTree {
    pub parent: Vec<Option<usize>>,
    pub root: usize,
    pub labels: Vec<SymId>,
}

impl LabeledTree {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
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

/// The unique bottom-up run; accept iff the root state is final.
pub fn run_automaton(a: &TreeAutomaton, tree: &LabeledTree) -> Result<bool, TdError> {
    let states = run_states(a, tree)?;
    Ok(a.finals.contains(&states[tree.root]))
}

/// The run's state at every tree vertex.
pub fn run_states(a: &TreeAutomaton, tree: &LabeledTree) -> Result<Vec<StateId>, TdError> {
    let ch = tree.children();
    let mut state = vec![a.sink; tree.len()];
    for t in tree.post_order() {
        let sym = tree.labels[t];
        if sym >= a.alphabet.len() {
            return Err(TdError::Alphabet(format!(
                "label {sym} outside alphabet of size {}",
                a.alphabet.len()
            )));
        }
        state[t] = match ch[t].len() {
            0 => a.f0(sym),
            1 => a.d1(state[ch[t][0]], sym),
            2 => a.d2(state[ch[t][0]], state[ch[t][1]], sym),
            n => {
                return Err(TdError::Input(format!(
                    "automaton runs need rank <= 2, vertex {t} has {n} children"
                )))
            }
        };
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Three-pass evaluation of free variables
// ---------------------------------------------------------------------------

/// An assignment tuple: per coordinate (slot x position), a set of tree
/// vertices as a bitmask. Coordinates: l set slots then m element slots, each
/// `arity` wide.
pub type AssignmentTuple = Vec<u64>;

#[derive(Debug, Clone)]
pub struct ThreePass {
    pub pot: Vec<BTreeSet<StateId>>,
    pub suc: Vec<BTreeSet<StateId>>,
    pub assignments: BTreeSet<AssignmentTuple>,
}

/// Hard cap on stored Sat tuples across the whole tree.
pub const SAT_TUPLE_CAP: usize = 2_000_000;

/// Interprets the extended alphabet: symbol = base * 2^bits_width + bits.
pub fn extended_symbol(base: SymId, bits: u64, bits_width: u32) -> SymId {
    base * (1usize << bits_width) + bits as usize
}

/// Runs the automaton over the extended alphabet three times — potential
/// states bottom-up, successful states top-down, satisfying assignments
/// bottom-up — and returns the accepted assignment family.
pub fn three_pass(
    a: &TreeAutomaton,
    tree: &LabeledTree,
    arity: usize,
    l: usize,
    m: usize,
) -> Result<ThreePass, TdError> {
    let bits_width = (arity * (l + m)) as u32;
    if bits_width > 20 {
        return Err(TdError::Capacity(format!(
            "assignment bit width {bits_width} too large"
        )));
    }
    let nbits = 1u64 << bits_width;
    if tree.len() > 64 {
        return Err(TdError::Capacity("tree too large for bitmask tuples".into()));
    }
    let expected_alphabet = {
        let base = tree.labels.iter().max().map(|&s| s + 1).unwrap_or(1);
        base * (1 << bits_width)
    };
    if a.alphabet.len() < expected_alphabet {
        return Err(TdError::Alphabet(format!(
            "extended alphabet needs at least {expected_alphabet} symbols, automaton has {}",
            a.alphabet.len()
        )));
    }
    let ch = tree.children();
    for kids in &ch {
        if kids.len() > 2 {
            return Err(TdError::Input("three-pass needs rank <= 2".into()));
        }
    }
    let order = tree.post_order();

    // Pass 1, bottom-up: potential states.
    let mut pot: Vec<BTreeSet<StateId>> = vec![BTreeSet::new(); tree.len()];
    for &t in &order {
        let base = tree.labels[t];
        let mut states = BTreeSet::new();
        for bits in 0..nbits {
            let sym = extended_symbol(base, bits, bits_width);
            match ch[t].len() {
                0 => {
                    states.insert(a.f0(sym));
                }
                1 => {
                    for &q in &pot[ch[t][0]] {
                        states.insert(a.d1(q, sym));
                    }
                }
                _ => {
                    for &q1 in &pot[ch[t][0]] {
                        for &q2 in &pot[ch[t][1]] {
                            states.insert(a.d2(q1, q2, sym));
                        }
                    }
                }
            }
        }
        pot[t] = states;
    }

    // Pass 2, top-down: successful states.
    let mut suc: Vec<BTreeSet<StateId>> = vec![BTreeSet::new(); tree.len()];
    suc[tree.root] = a
        .finals
        .intersection(&pot[tree.root])
        .copied()
        .collect();
    for &t in order.iter().rev() {
        let base = tree.labels[t];
        for (ci, &c) in ch[t].iter().enumerate() {
            let mut s = BTreeSet::new();
            for &q in &pot[c] {
                'search: for bits in 0..nbits {
                    let sym = extended_symbol(base, bits, bits_width);
                    match ch[t].len() {
                        1 => {
                            if suc[t].contains(&a.d1(q, sym)) {
                                s.insert(q);
                                break 'search;
                            }
                        }
                        _ => {
                            let sibling = ch[t][1 - ci];
                            for &qs in &pot[sibling] {
                                let res = if ci == 0 {
                                    a.d2(q, qs, sym)
                                } else {
                                    a.d2(qs, q, sym)
                                };
                                if suc[t].contains(&res) {
                                    s.insert(q);
                                    break 'search;
                                }
                            }
                        }
                    }
                }
            }
            suc[c] = s;
        }
    }

    // Pass 3, bottom-up: satisfying assignments restricted to subtrees.
    let width = arity * (l + m);
    let tuple_of_bits = |t: usize, bits: u64| -> AssignmentTuple {
        (0..width)
            .map(|j| if bits >> j & 1 == 1 { 1u64 << t } else { 0 })
            .collect()
    };
    let merge =
        |a_: &AssignmentTuple, b: &AssignmentTuple| -> Result<AssignmentTuple, TdError> {
            let mut out = Vec::with_capacity(width);
            for j in 0..width {
                if a_[j] & b[j] != 0 {
                    return Err(TdError::Invalid(
                        "sibling subtree assignments overlap".into(),
                    ));
                }
                out.push(a_[j] | b[j]);
            }
            Ok(out)
        };
    let mut sat: Vec<BTreeMap<StateId, BTreeSet<AssignmentTuple>>> =
        vec![BTreeMap::new(); tree.len()];
    let mut total_tuples = 0usize;
    for &t in &order {
        let base = tree.labels[t];
        let mut table: BTreeMap<StateId, BTreeSet<AssignmentTuple>> = BTreeMap::new();
        for bits in 0..nbits {
            let sym = extended_symbol(base, bits, bits_width);
            let own = tuple_of_bits(t, bits);
            match ch[t].len() {
                0 => {
                    let q = a.f0(sym);
                    if suc[t].contains(&q) {
                        table.entry(q).or_default().insert(own.clone());
                    }
                }
                1 => {
                    let c = ch[t][0];
                    for (&qc, tuples) in &sat[c] {
                        let q = a.d1(qc, sym);
                        if suc[t].contains(&q) {
                            for tup in tuples {
                                let merged = merge(tup, &own)?;
                                table.entry(q).or_default().insert(merged);
                            }
                        }
                    }
                }
                _ => {
                    let (c1, c2) = (ch[t][0], ch[t][1]);
                    for (&q1, t1) in &sat[c1] {
                        for (&q2, t2) in &sat[c2] {
                            let q = a.d2(q1, q2, sym);
                            if suc[t].contains(&q) {
                                for x in t1 {
                                    for y in t2 {
                                        let merged = merge(&merge(x, y)?, &own)?;
                                        table.entry(q).or_default().insert(merged);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        total_tuples += table.values().map(|s| s.len()).sum::<usize>();
        if total_tuples > SAT_TUPLE_CAP {
            return Err(TdError::Capacity(format!(
                "assignment table exceeded {SAT_TUPLE_CAP} tuples"
            )));
        }
        sat[t] = table;
    }

    let mut assignments = BTreeSet::new();
    for q in &suc[tree.root] {
        if let Some(tuples) = sat[tree.root].get(q) {
            assignments.extend(tuples.iter().cloned());
        }
    }
    // monotonicity invariants
    for t in 0..tree.len() {
        debug_assert!(suc[t].is_subset(&pot[t]));
    }
    Ok(ThreePass {
        pot,
        suc,
        assignments,
    })
}

/// Reference oracle: enumerates every per-vertex bit assignment, labels the
/// tree with the extended alphabet, and filters through plain automaton runs.
/// Exponential; only for small instances.
pub fn assignments_by_enumeration(
    a: &TreeAutomaton,
    tree: &LabeledTree,
    arity: usize,
    l: usize,
    m: usize,
) -> Result<BTreeSet<AssignmentTuple>, TdError> {
    let bits_width = (arity * (l + m)) as u32;
    let per_vertex = 1u64 << bits_width;
    let n = tree.len();
    let total = per_vertex.checked_pow(n as u32).ok_or_else(|| {
        TdError::Capacity("enumeration space overflow".into())
    })?;
    if total > 200_000_000 {
        return Err(TdError::Capacity(format!(
            "enumeration space {total} too large"
        )));
    }
    let width = arity * (l + m);
    let mut out = BTreeSet::new();
    let mut counter = vec![0u64; n];
    loop {
        let mut labels = Vec::with_capacity(n);
        for t in 0..n {
            labels.push(extended_symbol(tree.labels[t], counter[t], bits_width));
        }
        let candidate = LabeledTree {
            parent: tree.parent.clone(),
            root: tree.root,
            labels,
        };
        if run_automaton(a, &candidate)? {
            let mut tuple = vec![0u64; width];
            for (t, bits) in counter.iter().enumerate() {
                for (j, coord) in tuple.iter_mut().enumerate() {
                    if bits >> j & 1 == 1 {
                        *coord |= 1 << t;
                    }
                }
            }
            out.insert(tuple);
        }
        // increment the mixed-radix counter
        let mut t = 0;
        loop {
            if t == n {
                return Ok(out);
            }
            counter[t] += 1;
            if counter[t] < per_vertex {
                break;
            }
            counter[t] = 0;
            t += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Element and set encodings
// ---------------------------------------------------------------------------

/// Encoding of one graph element as a tuple of tree-vertex sets, one per bag
/// position: a single set is a singleton holding the canonical bag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElementEncoding {
    /// Per position: bitmask over tree vertices.
    pub sets: Vec<u64>,
}

/// The canonical bag of `v`: the unique shallowest tree vertex whose bag
/// contains `v`, with the minimal position.
pub fn canonical_position(
    td: &OrderedTreeDecomposition,
    v: NodeId,
) -> Result<(usize, usize), TdError> {
    let occ: Vec<usize> = (0..td.len())
        .filter(|&t| td.bags[t].contains(&v))
        .collect();
    if occ.is_empty() {
        return Err(TdError::Input(format!("vertex {v} absent from all bags")));
    }
    let tops: Vec<usize> = occ
        .iter()
        .copied()
        .filter(|&t| match td.parent[t] {
            None => true,
            Some(p) => !td.bags[p].contains(&v),
        })
        .collect();
    if tops.len() != 1 {
        return Err(TdError::Invalid(format!(
            "vertex {v} has {} occurrence tops; decomposition invalid",
            tops.len()
        )));
    }
    let t = tops[0];
    let pos = td.bags[t].iter().position(|&x| x == v).expect("occurs");
    Ok((t, pos))
}

pub fn encode_element(
    td: &OrderedTreeDecomposition,
    v: NodeId,
) -> Result<ElementEncoding, TdError> {
    if td.len() > 64 {
        return Err(TdError::Capacity("tree too large for bitmask encoding".into()));
    }
    let (t, pos) = canonical_position(td, v)?;
    let mut sets = vec![0u64; td.arity];
    sets[pos] = 1u64 << t;
    Ok(ElementEncoding { sets })
}

pub fn decode_element(
    td: &OrderedTreeDecomposition,
    enc: &ElementEncoding,
) -> Result<NodeId, TdError> {
    let mut found = None;
    for (pos, &mask) in enc.sets.iter().enumerate() {
        if mask == 0 {
            continue;
        }
        if mask.count_ones() != 1 || found.is_some() {
            return Err(TdError::Input("encoding is not a singleton".into()));
        }
        let t = mask.trailing_zeros() as usize;
        if t >= td.len() {
            return Err(TdError::Input("encoding points outside the tree".into()));
        }
        found = Some(td.bags[t][pos]);
    }
    found.ok_or_else(|| TdError::Input("empty encoding".into()))
}

/// Conditions (1)-(3) for an element encoding: the union is a singleton, the
/// position is first within its bag, and the vertex is absent from the parent
/// bag.
pub fn elem_check(labels: &[SigmaLabel], enc: &ElementEncoding) -> bool {
    let union: u64 = enc.sets.iter().copied().fold(0, |a, b| a | b);
    if union.count_ones() != 1 {
        return false;
    }
    set_check(labels, enc)
}

/// Conditions (2)-(3) only: valid set encodings.
pub fn set_check(labels: &[SigmaLabel], enc: &ElementEncoding) -> bool {
    for (j, &mask) in enc.sets.iter().enumerate() {
        let mut m = mask;
        while m != 0 {
            let t = m.trailing_zeros() as usize;
            m &= m - 1;
            let lab = &labels[t];
            // (2): no earlier equal position within the bag
            for i in 0..j {
                if lab.l2.contains(&(i as u8, j as u8)) {
                    return false;
                }
            }
            // (3): no shared position with the parent
            for (a, _) in lab.l3.iter() {
                if *a as usize == j {
                    return false;
                }
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Automaton text format
// ---------------------------------------------------------------------------

/// Parses the automaton text format: `states`, `alphabet`, `init`, `delta1`,
/// `delta2`, `final` directives, whitespace separated, `#` comments.
pub fn parse_automaton(name: &str, text: &str) -> Result<TreeAutomaton, TdError> {
    let mut states: Vec<String> = Vec::new();
    let mut alphabet: Vec<String> = Vec::new();
    let mut init: Vec<(String, String)> = Vec::new();
    let mut d1: Vec<(String, String, String)> = Vec::new();
    let mut d2: Vec<(String, String, String, String)> = Vec::new();
    let mut finals: Vec<String> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        };
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.is_empty() {
            continue;
        }
        let err = |msg: &str| TdError::Input(format!("{name}:{}: {msg}", lineno + 1));
        match t[0] {
            "states" => states.extend(t[1..].iter().map(|s| s.to_string())),
            "alphabet" => alphabet.extend(t[1..].iter().map(|s| s.to_string())),
            "init" => {
                if t.len() != 3 {
                    return Err(err("expected: init <sym> <state>"));
                }
                init.push((t[1].into(), t[2].into()));
            }
            "delta1" => {
                if t.len() != 4 {
                    return Err(err("expected: delta1 <state> <sym> <state>"));
                }
                d1.push((t[1].into(), t[2].into(), t[3].into()));
            }
            "delta2" => {
                if t.len() != 5 {
                    return Err(err("expected: delta2 <q1> <q2> <sym> <state>"));
                }
                d2.push((t[1].into(), t[2].into(), t[3].into(), t[4].into()));
            }
            "final" => finals.extend(t[1..].iter().map(|s| s.to_string())),
            other => return Err(err(&format!("unknown directive '{other}'"))),
        }
    }
    // implicit sink for totalization
    let sink_name = "__sink".to_string();
    if !states.contains(&sink_name) {
        states.push(sink_name.clone());
    }
    let sid = |name: &str| -> Result<StateId, TdError> {
        states
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| TdError::Input(format!("unknown state '{name}'")))
    };
    let alphabet_names = alphabet.clone();
    let symid = |name: &str| -> Result<SymId, TdError> {
        alphabet_names
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| TdError::Input(format!("unknown symbol '{name}'")))
    };
    let sink = sid(&sink_name)?;
    let mut a = TreeAutomaton {
        states: states.clone(),
        alphabet,
        init: HashMap::new(),
        delta1: HashMap::new(),
        delta2: HashMap::new(),
        finals: BTreeSet::new(),
        sink,
    };
    for (s, q) in init {
        a.init.insert(symid(&s)?, sid(&q)?);
    }
    for (q, s, q2) in d1 {
        a.delta1.insert((sid(&q)?, symid(&s)?), sid(&q2)?);
    }
    for (q1, q2, s, q3) in d2 {
        a.delta2
            .insert((sid(&q1)?, sid(&q2)?, symid(&s)?), sid(&q3)?);
    }
    for f in finals {
        a.finals.insert(sid(&f)?);
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::td::check_tree_decomposition;

    fn chain_tree(labels: Vec<SymId>) -> LabeledTree {
        let n = labels.len();
        LabeledTree {
            parent: (0..n)
                .map(|i| if i == 0 { None } else { Some(i - 1) })
                .collect(),
            root: 0,
            labels,
        }
    }

    #[test]
    fn binarize_single_bag_unchanged() {
        let td = OrderedTreeDecomposition {
            arity: 2,
            bags: vec![vec![1, 2]],
            parent: vec![None],
            root: 0,
        };
        let b = binarize(&td).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn binarize_three_children() {
        let g = Graph::new(4, &[(1, 2), (1, 3), (1, 4)]).unwrap();
        let td = OrderedTreeDecomposition {
            arity: 2,
            bags: vec![vec![1, 1], vec![1, 2], vec![1, 3], vec![1, 4]],
            parent: vec![None, Some(0), Some(0), Some(0)],
            root: 0,
        };
        assert!(check_tree_decomposition(&g, &td).is_valid());
        let b = binarize(&td).unwrap();
        assert!(b.rank() <= 2);
        assert!(check_tree_decomposition(&g, &b).is_valid());
        assert_eq!(b.width(), td.width());
    }

    #[test]
    fn binarize_chain_unchanged() {
        let td = OrderedTreeDecomposition {
            arity: 2,
            bags: vec![vec![1, 2], vec![2, 3], vec![3, 4]],
            parent: vec![None, Some(0), Some(1)],
            root: 0,
        };
        let b = binarize(&td).unwrap();
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn sigma_label_examples() {
        // bag (v,v,w) with edge (v,w); v=1, w=2
        let td = OrderedTreeDecomposition {
            arity: 3,
            bags: vec![vec![1, 1, 2]],
            parent: vec![None],
            root: 0,
        };
        let labs = sigma_labels(&td, &[(1, 2)]).unwrap();
        let lab = &labs[0];
        assert!(lab.l2.contains(&(0, 1)) && lab.l2.contains(&(1, 0)));
        assert!(lab.l2.contains(&(0, 0)), "diagonal present");
        assert!(lab.l1.contains(&(0, 2)) && lab.l1.contains(&(2, 0)));
        assert!(lab.l1.contains(&(1, 2)) && lab.l1.contains(&(2, 1)));
        assert!(lab.l3.is_empty(), "root lambda3 empty");
    }

    #[test]
    fn sigma_label_child_sharing() {
        let td = OrderedTreeDecomposition {
            arity: 2,
            bags: vec![vec![1, 2], vec![2, 3], vec![4, 4]],
            parent: vec![None, Some(0), Some(1)],
            root: 0,
        };
        let labs = sigma_labels(&td, &[(1, 2), (2, 3), (3, 4)]).unwrap();
        assert!(labs[1].l3.contains(&(0, 1)), "shared vertex 2");
        assert!(labs[2].l3.is_empty(), "no sharing with parent");
    }

    fn universal_automaton() -> TreeAutomaton {
        parse_automaton(
            "t",
            "states ok\nalphabet a b\ninit a ok\ninit b ok\ndelta1 ok a ok\ndelta1 ok b ok\ndelta2 ok ok a ok\ndelta2 ok ok b ok\nfinal ok\n",
        )
        .unwrap()
    }

    #[test]
    fn universal_accepts_all() {
        let a = universal_automaton();
        let t = chain_tree(vec![0, 1, 0]);
        assert!(run_automaton(&a, &t).unwrap());
    }

    /// Accepts iff some leaf is labeled `a`.
    fn leaf_a_automaton() -> TreeAutomaton {
        parse_automaton(
            "t",
            concat!(
                "states no yes\n",
                "alphabet a b\n",
                "init a yes\ninit b no\n",
                "delta1 no a no\ndelta1 no b no\ndelta1 yes a yes\ndelta1 yes b yes\n",
                "delta2 no no a no\ndelta2 no no b no\n",
                "delta2 yes no a yes\ndelta2 yes no b yes\n",
                "delta2 no yes a yes\ndelta2 no yes b yes\n",
                "delta2 yes yes a yes\ndelta2 yes yes b yes\n",
                "final yes\n"
            ),
        )
        .unwrap()
    }

    #[test]
    fn leaf_a_detection() {
        let a = leaf_a_automaton();
        // chain with leaf labeled b (leaf is the last vertex in the chain)
        let t = chain_tree(vec![0, 0, 1]);
        assert!(!run_automaton(&a, &t).unwrap());
        let t2 = chain_tree(vec![1, 1, 0]);
        assert!(run_automaton(&a, &t2).unwrap());
        // branching tree: root 0 with children 1, 2
        let t3 = LabeledTree {
            parent: vec![None, Some(0), Some(0)],
            root: 0,
            labels: vec![1, 1, 0],
        };
        assert!(run_automaton(&a, &t3).unwrap());
    }

    #[test]
    fn single_vertex_run_is_f0() {
        let a = leaf_a_automaton();
        let t = chain_tree(vec![0]);
        assert!(run_automaton(&a, &t).unwrap());
        let t2 = chain_tree(vec![1]);
        assert!(!run_automaton(&a, &t2).unwrap());
    }

    /// Extended-alphabet automaton over base syms {a} with one marker bit:
    /// accepts iff exactly one vertex is marked. States: 0 seen, 1 seen, sink.
    fn exactly_one_marker(arity: usize) -> TreeAutomaton {
        // alphabet: a0, a1, .. a(2^arity - 1); bit 0 of the suffix is the marker
        let width = arity;
        let syms: Vec<String> = (0..(1 << width)).map(|b| format!("a{b}")).collect();
        let mut text = String::from("states zero one\n");
        text.push_str(&format!("alphabet {}\n", syms.join(" ")));
        let marked = |b: usize| b & 1 == 1;
        for (b, s) in syms.iter().enumerate() {
            text.push_str(&format!(
                "init {s} {}\n",
                if marked(b) { "one" } else { "zero" }
            ));
        }
        for (b, s) in syms.iter().enumerate() {
            for (qn, q) in [("zero", 0usize), ("one", 1)] {
                let total = q + usize::from(marked(b));
                if total <= 1 {
                    text.push_str(&format!(
                        "delta1 {qn} {s} {}\n",
                        if total == 1 { "one" } else { "zero" }
                    ));
                }
                for (qn2, q2) in [("zero", 0usize), ("one", 1)] {
                    let total2 = q + q2 + usize::from(marked(b));
                    if total2 <= 1 {
                        text.push_str(&format!(
                            "delta2 {qn} {qn2} {s} {}\n",
                            if total2 == 1 { "one" } else { "zero" }
                        ));
                    }
                }
            }
        }
        text.push_str("final one\n");
        parse_automaton("gen", &text).unwrap()
    }

    #[test]
    fn three_pass_degenerate_no_slots() {
        // l = m = 0: A(S) is {()} iff the plain run accepts
        let a = universal_automaton();
        let t = chain_tree(vec![0, 1]);
        let res = three_pass(&a, &t, 1, 0, 0).unwrap();
        assert_eq!(res.assignments.len(), 1);
        assert!(res.assignments.contains(&Vec::new()));
    }

    #[test]
    fn three_pass_single_marker_two_vertices() {
        let a = exactly_one_marker(1);
        let t = chain_tree(vec![0, 0]);
        let res = three_pass(&a, &t, 1, 0, 1).unwrap();
        // all singleton placements accepted: vertex 0 or vertex 1
        let expect: BTreeSet<AssignmentTuple> =
            [vec![1u64 << 0], vec![1u64 << 1]].into_iter().collect();
        assert_eq!(res.assignments, expect);
        let brute = assignments_by_enumeration(&a, &t, 1, 0, 1).unwrap();
        assert_eq!(res.assignments, brute);
    }

    #[test]
    fn three_pass_suc_subset_pot() {
        let a = exactly_one_marker(1);
        let t = LabeledTree {
            parent: vec![None, Some(0), Some(0), Some(1)],
            root: 0,
            labels: vec![0, 0, 0, 0],
        };
        let res = three_pass(&a, &t, 1, 0, 1).unwrap();
        for v in 0..t.len() {
            assert!(res.suc[v].is_subset(&res.pot[v]));
        }
        assert!(res.suc[t.root].iter().all(|q| a.finals.contains(q)));
    }

    #[test]
    fn encode_decode_roundtrip() {
        let td = OrderedTreeDecomposition {
            arity: 3,
            bags: vec![vec![1, 2, 2], vec![2, 3, 3]],
            parent: vec![None, Some(0)],
            root: 0,
        };
        for v in [1u32, 2, 3] {
            let enc = encode_element(&td, v).unwrap();
            assert_eq!(decode_element(&td, &enc).unwrap(), v);
        }
        // single bag (v,w,w): encode(w) at position 1
        let td2 = OrderedTreeDecomposition {
            arity: 3,
            bags: vec![vec![7, 9, 9]],
            parent: vec![None],
            root: 0,
        };
        let enc = encode_element(&td2, 9).unwrap();
        assert_eq!(enc.sets[0], 0);
        assert_eq!(enc.sets[1], 1);
        assert_eq!(enc.sets[2], 0);
    }

    #[test]
    fn elem_check_accepts_canonical_rejects_violation() {
        let td = OrderedTreeDecomposition {
            arity: 3,
            bags: vec![vec![1, 2, 2], vec![2, 3, 3]],
            parent: vec![None, Some(0)],
            root: 0,
        };
        let labels = sigma_labels(&td, &[(1, 2), (2, 3)]).unwrap();
        for v in [1u32, 2, 3] {
            let enc = encode_element(&td, v).unwrap();
            assert!(elem_check(&labels, &enc), "v={v}");
        }
        // violation: mark position 2 of bag 0 (a repeated occurrence of 2)
        let bad = ElementEncoding {
            sets: vec![0, 0, 1],
        };
        assert!(!elem_check(&labels, &bad));
        // violation: vertex 2 marked at bag 1 where parent also holds 2
        let bad2 = ElementEncoding {
            sets: vec![2, 0, 0],
        };
        assert!(!elem_check(&labels, &bad2));
    }

    #[test]
    fn three_pass_matches_enumeration_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for case in 0..60 {
            let n = rng.gen_range(1..=6);
            let mut parent = vec![None];
            for t in 1..n {
                // keep rank <= 2
                let mut p;
                loop {
                    p = rng.gen_range(0..t);
                    let count = parent.iter().filter(|&&x| x == Some(p)).count();
                    if count < 2 {
                        break;
                    }
                }
                parent.push(Some(p));
            }
            let (l, m) = match case % 3 {
                0 => (0, 1),
                1 => (1, 0),
                _ => (0, 2),
            };
            let arity = 1;
            let base_syms = 2usize;
            let width = arity * (l + m);
            let nsyms = base_syms << width;
            let nstates = rng.gen_range(1..=3);
            // random total automaton
            let mut text = String::new();
            let state_names: Vec<String> = (0..nstates).map(|i| format!("q{i}")).collect();
            text.push_str(&format!("states {}\n", state_names.join(" ")));
            let sym_names: Vec<String> = (0..nsyms).map(|i| format!("s{i}")).collect();
            text.push_str(&format!("alphabet {}\n", sym_names.join(" ")));
            for s in &sym_names {
                text.push_str(&format!("init {s} q{}\n", rng.gen_range(0..nstates)));
            }
            for q in 0..nstates {
                for s in &sym_names {
                    text.push_str(&format!("delta1 q{q} {s} q{}\n", rng.gen_range(0..nstates)));
                }
            }
            for q1 in 0..nstates {
                for q2 in 0..nstates {
                    for s in &sym_names {
                        text.push_str(&format!(
                            "delta2 q{q1} q{q2} {s} q{}\n",
                            rng.gen_range(0..nstates)
                        ));
                    }
                }
            }
            for q in 0..nstates {
                if rng.gen_bool(0.5) {
                    text.push_str(&format!("final q{q}\n"));
                }
            }
            let a = parse_automaton("rand", &text).unwrap();
            let labels: Vec<SymId> = (0..n).map(|_| rng.gen_range(0..base_syms)).collect();
            let tree = LabeledTree {
                parent,
                root: 0,
                labels,
            };
            let fast = three_pass(&a, &tree, arity, l, m).unwrap();
            let brute = assignments_by_enumeration(&a, &tree, arity, l, m).unwrap();
            assert_eq!(fast.assignments, brute, "case {case}");
        }
    }
}
