//! Bounded-degree protocols: r-ball collection by round-wise neighbor
//! exchange, capped r-type aggregation with a table decision, and direct
//! basic-local-sentence evaluation over collected balls plus the shared
//! scattered-set phase.

use std::collections::BTreeMap;

use crate::bfs::BfsTree;
use crate::canon::{canonical_r_type_capped, CanonicalCode};
use crate::error::ProtoError;
use crate::graph::{Graph, InducedSubgraph, NodeId, RootedBall};
use crate::netsim::{self, LinkStats, NodeView, Outbox, Payload, Protocol, RunConfig};
use crate::proto::common::{
    count_aggregate_protocol, selected_witnesses, CappedMultisetAgg, Convergecast,
    ScatterSelect, SumAgg,
};
use crate::query::parse::{HanfQuery, TypePredicate};
use crate::query::{BasicLocalSentence, CountCmp, Psi, QueryExpr};

/// Hanf parameters: radius, saturation threshold, degree bound.
#[derive(Debug, Clone, Copy)]
pub struct HanfParams {
    pub r: u32,
    pub m: u64,
    pub d: u32,
}

/// Capped count per canonical r-type code.
pub type TypeTable = BTreeMap<Vec<u8>, u64>;

// ---------------------------------------------------------------------------
// Ball collection
// ---------------------------------------------------------------------------

type AdjItem = (NodeId, bool, Vec<NodeId>); // id, p-bit (or spare), neighbor list

#[derive(Clone, Debug)]
pub enum BallMsg {
    Start,
    Round { k: u32, items: Vec<AdjItem> },
    Done,
}

impl Payload for BallMsg {
    fn kind(&self) -> &'static str {
        match self {
            BallMsg::Start => "BALLSTART",
            BallMsg::Round { .. } => "BALLROUND",
            BallMsg::Done => "BALLDONE",
        }
    }
    fn size_bits(&self, idb: u64) -> u64 {
        match self {
            BallMsg::Start | BallMsg::Done => 4,
            BallMsg::Round { items, .. } => {
                // per item: id + flag + neighbor count + neighbor ids
                4 + 8
                    + items
                        .iter()
                        .map(|(_, _, adj)| idb + 1 + 8 + adj.len() as u64 * idb)
                        .sum::<u64>()
            }
        }
    }
}

#[derive(Clone)]
pub struct BallState {
    /// Everything learned so far: id -> (flag, neighbors).
    pub known: BTreeMap<NodeId, (bool, Vec<NodeId>)>,
    fresh: Vec<AdjItem>,
    next_round: u32,
    recv: BTreeMap<u32, usize>,
    buffered: BTreeMap<u32, Vec<Vec<AdjItem>>>,
    rounds_complete: bool,
    kids_done: usize,
    reported: bool,
    pub all_done: bool,
}

/// Collects `<N_r(v)>` at every node in `r` exchange rounds: each node sends
/// its current increment to all neighbors once per round.
pub struct BallCollect {
    pub r: u32,
    pub degree_bound: u32,
}

impl BallCollect {
    fn begin(&self, node: &NodeView, st: &mut BallState, out: &mut Outbox<BallMsg>) {
        for p in node.child_ports() {
            out.send(p, BallMsg::Start);
        }
        // round 1 carries own adjacency
        let own: AdjItem = (node.id, false, node.neighbors.to_vec());
        st.fresh = vec![own];
        self.send_round(node, st, out);
        self.try_consume(node, st, out);
    }

    fn send_round(&self, node: &NodeView, st: &mut BallState, out: &mut Outbox<BallMsg>) {
        let k = st.next_round;
        let items = std::mem::take(&mut st.fresh);
        out.send_all(0..node.degree(), BallMsg::Round { k, items });
        st.next_round += 1;
    }

    fn try_consume(&self, node: &NodeView, st: &mut BallState, out: &mut Outbox<BallMsg>) {
        loop {
            if st.next_round == 1 || st.rounds_complete {
                break;
            }
            let waiting = st.next_round - 1;
            if st.recv.get(&waiting).copied().unwrap_or(0) != node.degree() {
                break;
            }
            let batches = st.buffered.remove(&waiting).unwrap_or_default();
            let mut fresh = Vec::new();
            for batch in batches {
                for (id, flag, adj) in batch {
                    if let std::collections::btree_map::Entry::Vacant(e) = st.known.entry(id) {
                        e.insert((flag, adj.clone()));
                        fresh.push((id, flag, adj));
                    }
                }
            }
            st.fresh = fresh;
            st.recv.remove(&waiting);
            if st.next_round <= self.r {
                self.send_round(node, st, out);
            } else {
                st.rounds_complete = true;
                self.try_report(node, st, out);
            }
        }
    }

    fn try_report(&self, node: &NodeView, st: &mut BallState, out: &mut Outbox<BallMsg>) {
        if st.rounds_complete && st.kids_done == node.child_ports().len() && !st.reported {
            st.reported = true;
            if node.is_requester {
                st.all_done = true;
            } else if let Some(p) = node.parent_port {
                out.send(p, BallMsg::Done);
            }
        }
    }
}

impl Protocol for BallCollect {
    type State = BallState;
    type Msg = BallMsg;

    fn init(&self, node: &NodeView) -> BallState {
        let mut known = BTreeMap::new();
        known.insert(node.id, (false, node.neighbors.to_vec()));
        BallState {
            known,
            fresh: Vec::new(),
            next_round: 1,
            recv: BTreeMap::new(),
            buffered: BTreeMap::new(),
            rounds_complete: false,
            kids_done: 0,
            reported: false,
            all_done: false,
        }
    }

    fn start(&self, node: &NodeView, st: &mut BallState, out: &mut Outbox<BallMsg>) {
        self.begin(node, st, out);
    }

    fn handle(
        &self,
        node: &NodeView,
        st: &mut BallState,
        _port: usize,
        msg: BallMsg,
        out: &mut Outbox<BallMsg>,
    ) -> Result<(), String> {
        if node.degree() as u32 > self.degree_bound {
            return Err(format!(
                "degree bound {} violated (degree {})",
                self.degree_bound,
                node.degree()
            ));
        }
        match msg {
            BallMsg::Start => {
                if st.next_round == 1 {
                    self.begin(node, st, out);
                }
            }
            BallMsg::Round { k, items } => {
                *st.recv.entry(k).or_default() += 1;
                st.buffered.entry(k).or_default().push(items);
                if st.next_round == 1 {
                    // rounds can overtake the start broadcast
                    self.begin(node, st, out);
                } else {
                    self.try_consume(node, st, out);
                }
            }
            BallMsg::Done => {
                st.kids_done += 1;
                self.try_report(node, st, out);
            }
        }
        Ok(())
    }

    fn requester_final(&self, st: &BallState) -> Option<bool> {
        st.all_done.then_some(true)
    }
}

/// Rebuilds the rooted r-ball of `v` from its collected adjacency knowledge.
pub fn ball_from_known(
    v: NodeId,
    r: u32,
    known: &BTreeMap<NodeId, (bool, Vec<NodeId>)>,
) -> RootedBall {
    // BFS from v over collected lists, truncated at r
    let mut dist: BTreeMap<NodeId, u32> = BTreeMap::new();
    dist.insert(v, 0);
    let mut queue = std::collections::VecDeque::from([v]);
    while let Some(u) = queue.pop_front() {
        let du = dist[&u];
        if du == r {
            continue;
        }
        if let Some((_, adj)) = known.get(&u) {
            for &w in adj {
                if !dist.contains_key(&w) {
                    dist.insert(w, du + 1);
                    queue.push_back(w);
                }
            }
        }
    }
    let nodes: Vec<NodeId> = dist.keys().copied().collect();
    let index: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let mut adj = vec![Vec::new(); nodes.len()];
    let mut m = 0;
    for (i, &x) in nodes.iter().enumerate() {
        if let Some((_, xs)) = known.get(&x) {
            for &w in xs {
                if let Some(&j) = index.get(&w) {
                    if !adj[i].contains(&j) {
                        adj[i].push(j);
                        if i < j {
                            m += 1;
                        }
                    }
                }
            }
        }
    }
    let root = index[&v];
    RootedBall {
        center: v,
        radius: r,
        root,
        sub: InducedSubgraph {
            original: nodes,
            adj,
            m,
        },
    }
}

// ---------------------------------------------------------------------------
// I-component gathering (bounded-degree only)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum GatherMsg {
    Start,
    Hello { i: bool },
    Round { k: u32 },
    Exchange { k: u32, items: Vec<AdjItem> },
    RoundDone { changed: bool },
    Finish,
    FinishAck,
}

impl Payload for GatherMsg {
    fn kind(&self) -> &'static str {
        match self {
            GatherMsg::Start => "IGSTART",
            GatherMsg::Hello { .. } => "IHELLO",
            GatherMsg::Round { .. } => "IROUND",
            GatherMsg::Exchange { .. } => "IEXCH",
            GatherMsg::RoundDone { .. } => "IRDONE",
            GatherMsg::Finish => "IFIN",
            GatherMsg::FinishAck => "IFINACK",
        }
    }
    fn size_bits(&self, idb: u64) -> u64 {
        match self {
            GatherMsg::Start | GatherMsg::Finish | GatherMsg::FinishAck => 4,
            GatherMsg::Hello { .. } | GatherMsg::RoundDone { .. } => 5,
            GatherMsg::Round { .. } => 4 + 8,
            GatherMsg::Exchange { items, .. } => {
                4 + 8
                    + items
                        .iter()
                        .map(|(_, _, adj)| idb + 1 + 8 + adj.len() as u64 * idb)
                        .sum::<u64>()
            }
        }
    }
}

#[derive(Clone)]
pub struct GatherState {
    pub i: bool,
    i_ports: Vec<usize>,
    hello_pending: usize,
    started: bool,
    /// Component knowledge: id -> (P flag, I-restricted adjacency).
    pub known: BTreeMap<NodeId, (bool, Vec<NodeId>)>,
    fresh: Vec<AdjItem>,
    round_recv: BTreeMap<u32, usize>,
    buffered: BTreeMap<u32, Vec<Vec<AdjItem>>>,
    current_round: u32,
    kids_pending: usize,
    own_pending: bool,
    changed_acc: bool,
    reported_round: u32,
    fin_pending: usize,
    pub done: bool,
}

/// Rounds of exchange restricted to the induced I-subgraph, driven by the
/// requester over the BFS tree until no node learns anything new. Every
/// I-node ends up knowing its whole component (with P flags).
pub struct IGather {
    pub i_flags: Vec<bool>,
    pub p_flags: Vec<bool>,
    /// Component size cap; exceeding it is a protocol defect.
    pub size_cap: usize,
}

impl IGather {
    fn maybe_exchange(&self, node: &NodeView, st: &mut GatherState, out: &mut Outbox<GatherMsg>) {
        if st.current_round == 0 || st.hello_pending > 0 || !st.own_pending {
            return;
        }
        if st.i {
            let items = std::mem::take(&mut st.fresh);
            let ports = st.i_ports.clone();
            for &p in &ports {
                out.send(
                    p,
                    GatherMsg::Exchange {
                        k: st.current_round,
                        items: items.clone(),
                    },
                );
            }
            self.try_finish_round(node, st, out);
        } else {
            st.own_pending = false;
            self.try_report_round(node, st, out);
        }
    }

    fn try_finish_round(&self, node: &NodeView, st: &mut GatherState, out: &mut Outbox<GatherMsg>) {
        if !st.own_pending || !st.i || st.hello_pending > 0 || st.current_round == 0 {
            return;
        }
        let k = st.current_round;
        if st.round_recv.get(&k).copied().unwrap_or(0) != st.i_ports.len() {
            return;
        }
        let batches = st.buffered.remove(&k).unwrap_or_default();
        let mut changed = false;
        let mut fresh = Vec::new();
        for batch in batches {
            for (id, p, adj) in batch {
                if let std::collections::btree_map::Entry::Vacant(e) = st.known.entry(id) {
                    e.insert((p, adj.clone()));
                    fresh.push((id, p, adj));
                    changed = true;
                }
            }
        }
        st.fresh = fresh;
        st.round_recv.remove(&k);
        st.changed_acc |= changed;
        st.own_pending = false;
        self.try_report_round(node, st, out);
    }

    fn try_report_round(&self, node: &NodeView, st: &mut GatherState, out: &mut Outbox<GatherMsg>) {
        if st.own_pending || st.kids_pending > 0 || st.reported_round == st.current_round {
            return;
        }
        st.reported_round = st.current_round;
        if node.is_requester {
            if st.changed_acc {
                self.broadcast_round(node, st, out, st.current_round + 1);
            } else {
                st.fin_pending = node.child_ports().len();
                if st.fin_pending == 0 {
                    st.done = true;
                } else {
                    out.send_all(node.child_ports(), GatherMsg::Finish);
                }
            }
        } else if let Some(p) = node.parent_port {
            out.send(
                p,
                GatherMsg::RoundDone {
                    changed: st.changed_acc,
                },
            );
        }
    }

    fn broadcast_round(
        &self,
        node: &NodeView,
        st: &mut GatherState,
        out: &mut Outbox<GatherMsg>,
        k: u32,
    ) {
        st.current_round = k;
        st.changed_acc = false;
        st.kids_pending = node.child_ports().len();
        st.own_pending = true;
        out.send_all(node.child_ports(), GatherMsg::Round { k });
        self.maybe_exchange(node, st, out);
        self.try_finish_round(node, st, out);
    }
}

impl Protocol for IGather {
    type State = GatherState;
    type Msg = GatherMsg;

    fn init(&self, node: &NodeView) -> GatherState {
        GatherState {
            i: self.i_flags[node.id as usize],
            i_ports: Vec::new(),
            hello_pending: node.degree(),
            started: false,
            known: BTreeMap::new(),
            fresh: Vec::new(),
            round_recv: BTreeMap::new(),
            buffered: BTreeMap::new(),
            current_round: 0,
            kids_pending: 0,
            own_pending: false,
            changed_acc: false,
            reported_round: 0,
            fin_pending: 0,
            done: false,
        }
    }

    fn start(&self, node: &NodeView, st: &mut GatherState, out: &mut Outbox<GatherMsg>) {
        st.started = true;
        out.send_all(node.child_ports(), GatherMsg::Start);
        out.send_all(0..node.degree(), GatherMsg::Hello { i: st.i });
    }

    fn handle(
        &self,
        node: &NodeView,
        st: &mut GatherState,
        port: usize,
        msg: GatherMsg,
        out: &mut Outbox<GatherMsg>,
    ) -> Result<(), String> {
        match msg {
            GatherMsg::Start => {
                if !st.started {
                    st.started = true;
                    out.send_all(node.child_ports(), GatherMsg::Start);
                    out.send_all(0..node.degree(), GatherMsg::Hello { i: st.i });
                }
            }
            GatherMsg::Hello { i } => {
                if i {
                    st.i_ports.push(port);
                    st.i_ports.sort_unstable();
                }
                st.hello_pending -= 1;
                if st.hello_pending == 0 {
                    if st.i {
                        let adj: Vec<NodeId> =
                            st.i_ports.iter().map(|&p| node.neighbor(p)).collect();
                        st.known
                            .insert(node.id, (self.p_flags[node.id as usize], adj.clone()));
                        st.fresh = vec![(node.id, self.p_flags[node.id as usize], adj)];
                    }
                    if node.is_requester && st.current_round == 0 {
                        self.broadcast_round(node, st, out, 1);
                    } else {
                        self.maybe_exchange(node, st, out);
                        self.try_finish_round(node, st, out);
                    }
                }
            }
            GatherMsg::Round { k } => {
                st.current_round = k;
                st.changed_acc = false;
                st.kids_pending = node.child_ports().len();
                st.own_pending = true;
                out.send_all(node.child_ports(), GatherMsg::Round { k });
                self.maybe_exchange(node, st, out);
                self.try_finish_round(node, st, out);
            }
            GatherMsg::Exchange { k, items } => {
                if st.known.len() + items.len() > self.size_cap {
                    return Err(format!(
                        "I-component exceeded the size cap {}",
                        self.size_cap
                    ));
                }
                *st.round_recv.entry(k).or_default() += 1;
                st.buffered.entry(k).or_default().push(items);
                self.try_finish_round(node, st, out);
            }
            GatherMsg::RoundDone { changed } => {
                st.changed_acc |= changed;
                st.kids_pending -= 1;
                self.try_report_round(node, st, out);
            }
            GatherMsg::Finish => {
                st.fin_pending = node.child_ports().len();
                if st.fin_pending == 0 {
                    st.done = true;
                    if let Some(p) = node.parent_port {
                        out.send(p, GatherMsg::FinishAck);
                    }
                } else {
                    out.send_all(node.child_ports(), GatherMsg::Finish);
                }
            }
            GatherMsg::FinishAck => {
                st.fin_pending -= 1;
                if st.fin_pending == 0 {
                    st.done = true;
                    if !node.is_requester {
                        if let Some(p) = node.parent_port {
                            out.send(p, GatherMsg::FinishAck);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn requester_final(&self, st: &GatherState) -> Option<bool> {
        st.done.then_some(true)
    }
}

// ---------------------------------------------------------------------------
// Pipeline driver
// ---------------------------------------------------------------------------

/// Outcome of a distributed evaluation, with per-phase link statistics.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub decision: bool,
    pub stats: LinkStats,
    pub phases: Vec<(String, LinkStats)>,
    pub notes: Vec<String>,
    pub transcript: Option<String>,
}

pub struct BoundedPipeline<'g> {
    pub g: &'g Graph,
    pub bfs: &'g BfsTree,
    pub d: u32,
    pub requester: NodeId,
    pub seed: u64,
    pub record_transcript: bool,
    /// Canonicalization cap for r-type codes.
    pub canon_cap: usize,
}

impl<'g> BoundedPipeline<'g> {
    pub fn new(g: &'g Graph, bfs: &'g BfsTree, d: u32, requester: NodeId, seed: u64) -> Self {
        BoundedPipeline {
            g,
            bfs,
            d,
            requester,
            seed,
            record_transcript: false,
            canon_cap: 64,
        }
    }

    fn check_degrees(&self) -> Result<(), ProtoError> {
        for v in self.g.nodes() {
            if self.g.degree(v) > self.d {
                return Err(ProtoError::DegreeBound {
                    bound: self.d,
                    node: v,
                    deg: self.g.degree(v),
                });
            }
        }
        Ok(())
    }

    fn cfg(&self, phase: u64) -> RunConfig {
        RunConfig {
            seed: self.seed.wrapping_add(phase),
            record_transcript: self.record_transcript,
            ..Default::default()
        }
    }

    fn run_phase<P: Protocol>(
        &self,
        name: &str,
        prog: &P,
        run: &mut PipelineRun,
    ) -> Result<Vec<P::State>, ProtoError> {
        let phase_idx = run.phases.len() as u64;
        let res = netsim::run(self.g, self.bfs, prog, self.requester, &self.cfg(phase_idx))
            .map_err(|e| ProtoError::Defect(e.to_string()))?;
        run.stats.merge(&res.outcome.stats);
        run.phases.push((name.to_string(), res.outcome.stats.clone()));
        if let Some(t) = run.transcript.as_mut() {
            if let Some(nt) = res.outcome.transcript {
                t.push_str(&format!("phase {name}\n"));
                t.push_str(&nt);
            }
        }
        Ok(res.states)
    }

    pub fn new_run(&self) -> PipelineRun {
        PipelineRun {
            decision: false,
            stats: LinkStats::default(),
            phases: Vec::new(),
            notes: Vec::new(),
            transcript: self.record_transcript.then(String::new),
        }
    }

    /// Collects r-balls at every node; returns them indexed by node id.
    pub fn collect_balls(
        &self,
        r: u32,
        run: &mut PipelineRun,
    ) -> Result<Vec<Option<RootedBall>>, ProtoError> {
        self.check_degrees()?;
        if r == 0 {
            // zero rounds: the ball is the node itself, no messages
            let mut out = vec![None];
            for v in self.g.nodes() {
                out.push(Some(ball_from_known(
                    v,
                    0,
                    &BTreeMap::from([(v, (false, self.g.neighbors(v).to_vec()))]),
                )));
            }
            return Ok(out);
        }
        let prog = BallCollect {
            r,
            degree_bound: self.d,
        };
        let states = self.run_phase("ball-collect", &prog, run)?;
        let mut out = vec![None];
        for v in self.g.nodes() {
            out.push(Some(ball_from_known(v, r, &states[v as usize].known)));
        }
        Ok(out)
    }

    /// Per-node truth of psi on its own collected ball (in-node, no messages).
    fn p_flags_from_balls(&self, psi: &Psi, balls: &[Option<RootedBall>]) -> Vec<bool> {
        let mut p = vec![false; self.g.node_count() as usize + 1];
        for v in self.g.nodes() {
            let ball = balls[v as usize].as_ref().expect("ball collected");
            p[v as usize] = psi.eval_on_ball(ball, &|_, _| false);
        }
        p
    }

    /// Evaluates one basic local sentence distributively.
    pub fn eval_leaf(
        &self,
        leaf: &BasicLocalSentence,
        run: &mut PipelineRun,
    ) -> Result<bool, ProtoError> {
        let balls = self.collect_balls(leaf.r, run)?;
        let p_flags = self.p_flags_from_balls(&leaf.psi, &balls);

        let scatter = ScatterSelect {
            r: leaf.r,
            s: leaf.s,
            p_flags: p_flags.clone(),
        };
        let states = self.run_phase("scatter-select", &scatter, run)?;
        let witnesses = selected_witnesses(&states[self.requester as usize]);
        if witnesses.len() as u32 >= leaf.s {
            for (i, &a) in witnesses.iter().enumerate() {
                for &b in witnesses.iter().skip(i + 1) {
                    let dist = self
                        .g
                        .distance(a, b)
                        .map_err(|e| ProtoError::Defect(e.to_string()))?;
                    if dist <= 2 * leaf.r {
                        return Err(ProtoError::Defect(format!(
                            "witnesses {a},{b} at distance {dist} <= 2r"
                        )));
                    }
                }
            }
            run.notes
                .push(format!("accepted with witnesses {witnesses:?}"));
            return Ok(true);
        }
        let l = witnesses.len() as u32;
        if l == 0 {
            return Ok(false);
        }

        let i_flags: Vec<bool> = (0..=self.g.node_count())
            .map(|v| v != 0 && states[v as usize].flags.i)
            .collect();
        self.flag_i_diameter(&i_flags, l, leaf.r, run);

        let size_cap = component_size_cap(self.d, 4 * leaf.s * leaf.r);
        let gather = IGather {
            i_flags,
            p_flags,
            size_cap,
        };
        let gstates = self.run_phase("i-gather", &gather, run)?;
        let mut contrib_counts = vec![0u64; self.g.node_count() as usize + 1];
        for v in self.g.nodes() {
            let gs = &gstates[v as usize];
            if !gs.i {
                continue;
            }
            let min_id = *gs.known.keys().min().expect("component nonempty");
            if min_id != v {
                continue;
            }
            contrib_counts[v as usize] =
                component_scattered_count(&gs.known, leaf.r, leaf.s) as u64;
        }
        let sum = Convergecast {
            agg: SumAgg,
            local: contrib_counts,
        };
        let sstates = self.run_phase("verdict-sum", &sum, run)?;
        let total = sstates[self.requester as usize]
            .result
            .expect("sum completed");
        Ok(total >= leaf.s as u64)
    }

    fn flag_i_diameter(&self, i_flags: &[bool], l: u32, r: u32, run: &mut PipelineRun) {
        let nodes: Vec<NodeId> = self.g.nodes().filter(|&v| i_flags[v as usize]).collect();
        if nodes.is_empty() {
            return;
        }
        let sub = self.g.induced(&nodes);
        let mut seen = vec![false; sub.len()];
        for start in 0..sub.len() {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                comp.push(u);
                for &w in &sub.adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            let mut diameter = 0;
            for &u in &comp {
                let d = sub.bfs_depths(u);
                for &w in &comp {
                    if d[w] != u32::MAX {
                        diameter = diameter.max(d[w]);
                    }
                }
            }
            if diameter as u64 >= 4 * l as u64 * r as u64 {
                run.notes.push(format!(
                    "flag: I-component diameter {diameter} >= 4*l*r = {}",
                    4 * l * r
                ));
            }
        }
    }

    /// Hanf protocol: ball collection, capped type aggregation, decision.
    pub fn eval_hanf(&self, q: &HanfQuery, run: &mut PipelineRun) -> Result<bool, ProtoError> {
        let table = self.hanf_table(q.r, q.m, run)?;
        decide_hanf(&table, q.m, &q.predicate, self.canon_cap)
    }

    /// Phases I-III: collect balls, aggregate capped r-type counts.
    pub fn hanf_table(
        &self,
        r: u32,
        m: u64,
        run: &mut PipelineRun,
    ) -> Result<TypeTable, ProtoError> {
        let balls = self.collect_balls(r, run)?;
        let mut local: Vec<BTreeMap<Vec<u8>, u64>> = vec![BTreeMap::new()];
        let mut max_code_bits = 1u64;
        for v in self.g.nodes() {
            let ball = balls[v as usize].as_ref().unwrap();
            let code = canonical_r_type_capped(ball, self.canon_cap)
                .map_err(|e| ProtoError::Defect(e.to_string()))?;
            max_code_bits = max_code_bits.max(code.bit_len() as u64);
            local.push(BTreeMap::from([(code.0, 1u64)]));
        }
        let agg = CappedMultisetAgg {
            cap: m,
            key_bits: max_code_bits,
        };
        let cc = Convergecast { agg, local };
        let states = self.run_phase("hanf-aggregate", &cc, run)?;
        Ok(states[self.requester as usize]
            .result
            .clone()
            .expect("aggregate completed"))
    }

    /// Distributed count of a unary predicate: per-node bits from collected
    /// balls plus one sum convergecast.
    pub fn count_unary(&self, psi: &Psi, run: &mut PipelineRun) -> Result<u64, ProtoError> {
        let balls = self.collect_balls(psi.intrinsic_radius(), run)?;
        let flags = self.p_flags_from_balls(psi, &balls);
        let prog = count_aggregate_protocol(&flags);
        let states = self.run_phase("count-aggregate", &prog, run)?;
        Ok(states[self.requester as usize]
            .result
            .expect("sum completed"))
    }

    /// Full normal-form expression: leaves evaluated sequentially, combined
    /// in-node at the requester. Counting terms are audited against n^|t|.
    pub fn eval_expr(&self, q: &QueryExpr, run: &mut PipelineRun) -> Result<bool, ProtoError> {
        match q {
            QueryExpr::Local(leaf) => self.eval_leaf(leaf, run),
            QueryExpr::Count(atom) => {
                let n = self.g.node_count() as u64;
                let eval_term = |t: &crate::query::CountTerm,
                                     run: &mut PipelineRun|
                 -> Result<u64, ProtoError> {
                    let mut counts = Vec::new();
                    for body in t.bodies() {
                        counts.push(self.count_unary(body, run)?);
                    }
                    let value = t.eval_with(&mut counts.into_iter());
                    let bound = n.saturating_pow(t.symbol_count());
                    if value > bound {
                        return Err(ProtoError::Defect(format!(
                            "term value {value} exceeds n^|t| = {bound}"
                        )));
                    }
                    Ok(value)
                };
                let l = eval_term(&atom.left, run)?;
                let r = eval_term(&atom.right, run)?;
                Ok(match atom.cmp {
                    CountCmp::Eq => l == r,
                    CountCmp::Lt => l < r,
                })
            }
            QueryExpr::Not(a) => Ok(!self.eval_expr(a, run)?),
            QueryExpr::And(a, b) => {
                let x = self.eval_expr(a, run)?;
                let y = self.eval_expr(b, run)?;
                Ok(x && y)
            }
            QueryExpr::Or(a, b) => {
                let x = self.eval_expr(a, run)?;
                let y = self.eval_expr(b, run)?;
                Ok(x || y)
            }
        }
    }

    /// Top-level entry: evaluates and stores the decision in the run.
    pub fn evaluate(&self, q: &QueryExpr) -> Result<PipelineRun, ProtoError> {
        let mut run = self.new_run();
        run.decision = self.eval_expr(q, &mut run)?;
        Ok(run)
    }

    pub fn evaluate_hanf(&self, q: &HanfQuery) -> Result<PipelineRun, ProtoError> {
        let mut run = self.new_run();
        run.decision = self.eval_hanf(q, &mut run)?;
        Ok(run)
    }
}

/// 1 + d + d^2 + ... + d^k: every I-component fits under a degree bound.
pub fn component_size_cap(d: u32, k: u32) -> usize {
    let mut total: u128 = 1;
    let mut layer: u128 = 1;
    for _ in 0..k {
        layer = layer.saturating_mul(d as u128);
        total = total.saturating_add(layer);
    }
    total.min(1_000_000) as usize
}

/// Exact max-scattered count within a gathered component, capped at `s`.
fn component_scattered_count(
    known: &BTreeMap<NodeId, (bool, Vec<NodeId>)>,
    r: u32,
    s: u32,
) -> u32 {
    let ids: Vec<NodeId> = known.keys().copied().collect();
    let index: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let mut adj = vec![Vec::new(); ids.len()];
    for (&id, (_, ns)) in known {
        let i = index[&id];
        for w in ns {
            if let Some(&j) = index.get(w) {
                adj[i].push(j);
            }
        }
    }
    let sub = InducedSubgraph {
        original: ids.clone(),
        adj,
        m: 0,
    };
    let dists: Vec<Vec<u32>> = (0..sub.len()).map(|i| sub.bfs_depths(i)).collect();
    let candidates: Vec<NodeId> = ids.iter().copied().filter(|id| known[id].0).collect();
    crate::query::oracle::max_scattered_in(
        &|a, b| dists[index[&a]][index[&b]],
        &candidates,
        2 * r,
        s,
    )
}

/// Applies a decision predicate to a capped type table. Any threshold at or
/// above the saturation cap is a configuration error (the cap would hide the
/// answer).
pub fn decide_hanf(
    table: &TypeTable,
    m: u64,
    predicate: &TypePredicate,
    canon_cap: usize,
) -> Result<bool, ProtoError> {
    if predicate.max_threshold() >= m {
        return Err(ProtoError::Config(format!(
            "threshold {} >= saturation cap {m}",
            predicate.max_threshold()
        )));
    }
    fn code_of(
        ex: &crate::query::parse::ExemplarBall,
        cap: usize,
    ) -> Result<CanonicalCode, ProtoError> {
        let ball = ex.to_ball().map_err(|e| ProtoError::Config(e.to_string()))?;
        canonical_r_type_capped(&ball, cap).map_err(|e| ProtoError::Config(e.to_string()))
    }
    fn eval(table: &TypeTable, pred: &TypePredicate, cap: usize) -> Result<bool, ProtoError> {
        Ok(match pred {
            TypePredicate::AtLeast(c, ex) => {
                let code = code_of(ex, cap)?;
                table.get(&code.0).copied().unwrap_or(0) >= *c
            }
            TypePredicate::Present(ex) => {
                let code = code_of(ex, cap)?;
                table.get(&code.0).copied().unwrap_or(0) >= 1
            }
            TypePredicate::And(a, b) => eval(table, a, cap)? && eval(table, b, cap)?,
            TypePredicate::Or(a, b) => eval(table, a, cap)? || eval(table, b, cap)?,
            TypePredicate::Not(a) => !eval(table, a, cap)?,
        })
    }
    eval(table, predicate, canon_cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfs::build_bfs_tree;
    use crate::canon::rooted_isomorphic;
    use crate::query::parse::ExemplarBall;

    fn cycle(n: u32) -> Graph {
        let edges: Vec<(NodeId, NodeId)> = (1..n).map(|i| (i, i + 1)).chain([(n, 1)]).collect();
        Graph::new(n, &edges).unwrap()
    }

    fn pipeline<'g>(g: &'g Graph, bfs: &'g BfsTree, d: u32) -> BoundedPipeline<'g> {
        BoundedPipeline::new(g, bfs, d, 1, 0)
    }

    #[test]
    fn collected_balls_match_oracle() {
        let g = cycle(6);
        let t = build_bfs_tree(&g, 1);
        let p = pipeline(&g, &t, 2);
        let mut run = p.new_run();
        let balls = p.collect_balls(1, &mut run).unwrap();
        for v in g.nodes() {
            let collected = balls[v as usize].as_ref().unwrap();
            let oracle = g.k_ball(v, 1).unwrap();
            assert_eq!(collected.sub.original, oracle.sub.original);
            assert!(rooted_isomorphic(collected, &oracle));
            assert_eq!(collected.node_count(), 3);
            assert_eq!(collected.sub.m, 2);
        }
    }

    #[test]
    fn ball_rounds_count_exactly_r_per_direction() {
        // 3-regular: the cube graph
        let g = Graph::new(
            8,
            &[
                (1, 2),
                (2, 3),
                (3, 4),
                (4, 1),
                (5, 6),
                (6, 7),
                (7, 8),
                (8, 5),
                (1, 5),
                (2, 6),
                (3, 7),
                (4, 8),
            ],
        )
        .unwrap();
        let t = build_bfs_tree(&g, 1);
        let p = pipeline(&g, &t, 3);
        let mut run = p.new_run();
        let balls = p.collect_balls(2, &mut run).unwrap();
        for v in g.nodes() {
            let oracle = g.k_ball(v, 2).unwrap();
            assert_eq!(
                balls[v as usize].as_ref().unwrap().sub.original,
                oracle.sub.original
            );
            assert!(rooted_isomorphic(balls[v as usize].as_ref().unwrap(), &oracle));
        }
        let (_, stats) = &run.phases[0];
        for (_, dir) in &stats.links {
            assert_eq!(dir.per_kind.get("BALLROUND").copied().unwrap_or(0), 2);
        }
    }

    #[test]
    fn ball_r0_no_messages() {
        let g = cycle(5);
        let t = build_bfs_tree(&g, 1);
        let p = pipeline(&g, &t, 2);
        let mut run = p.new_run();
        let balls = p.collect_balls(0, &mut run).unwrap();
        assert!(run.phases.is_empty());
        for v in g.nodes() {
            assert_eq!(balls[v as usize].as_ref().unwrap().node_count(), 1);
        }
    }

    #[test]
    fn degree_bound_violation_detected() {
        let g = Graph::new(4, &[(1, 2), (1, 3), (1, 4)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let p = pipeline(&g, &t, 2);
        let mut run = p.new_run();
        assert!(matches!(
            p.collect_balls(1, &mut run),
            Err(ProtoError::DegreeBound { .. })
        ));
    }

    #[test]
    fn hanf_c6_tables() {
        let g = cycle(6);
        let t = build_bfs_tree(&g, 1);
        let p = pipeline(&g, &t, 2);
        let mut run = p.new_run();
        let table = p.hanf_table(1, 3, &mut run).unwrap();
        assert_eq!(table.len(), 1, "all six 1-types identical");
        assert_eq!(*table.values().next().unwrap(), 3, "capped at 3");
        let mut run2 = p.new_run();
        let table2 = p.hanf_table(1, 10, &mut run2).unwrap();
        assert_eq!(*table2.values().next().unwrap(), 6, "below cap, exact");
    }

    #[test]
    fn hanf_p2_both_ends_same_type() {
        let g = Graph::new(2, &[(1, 2)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let p = pipeline(&g, &t, 1);
        let mut run = p.new_run();
        let table = p.hanf_table(1, 5, &mut run).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(*table.values().next().unwrap(), 2);
    }

    #[test]
    fn decide_hanf_thresholds() {
        let g = cycle(6);
        let t = build_bfs_tree(&g, 1);
        let p = pipeline(&g, &t, 2);
        let mut run = p.new_run();
        let table = p.hanf_table(1, 3, &mut run).unwrap();
        let path3 = ExemplarBall {
            n: 3,
            root: 2,
            edges: vec![(1, 2), (2, 3)],
        };
        assert!(decide_hanf(&table, 3, &TypePredicate::AtLeast(2, path3.clone()), 64).unwrap());
        assert!(matches!(
            decide_hanf(&table, 3, &TypePredicate::AtLeast(4, path3.clone()), 64),
            Err(ProtoError::Config(_))
        ));
        assert!(matches!(
            decide_hanf(&table, 3, &TypePredicate::AtLeast(3, path3), 64),
            Err(ProtoError::Config(_))
        ));
    }

    #[test]
    fn hanf_c20_c30_same_tables_and_decisions() {
        let preds: Vec<TypePredicate> = vec![
            TypePredicate::AtLeast(
                4,
                ExemplarBall {
                    n: 3,
                    root: 2,
                    edges: vec![(1, 2), (2, 3)],
                },
            ),
            TypePredicate::Present(ExemplarBall {
                n: 3,
                root: 2,
                edges: vec![(1, 2), (2, 3)],
            }),
            TypePredicate::Not(Box::new(TypePredicate::Present(ExemplarBall {
                n: 2,
                root: 1,
                edges: vec![(1, 2)],
            }))),
        ];
        let g20 = cycle(20);
        let g30 = cycle(30);
        let t20 = build_bfs_tree(&g20, 1);
        let t30 = build_bfs_tree(&g30, 1);
        let p20 = pipeline(&g20, &t20, 2);
        let p30 = pipeline(&g30, &t30, 2);
        let mut r20 = p20.new_run();
        let mut r30 = p30.new_run();
        let tab20 = p20.hanf_table(1, 5, &mut r20).unwrap();
        let tab30 = p30.hanf_table(1, 5, &mut r30).unwrap();
        assert_eq!(tab20, tab30);
        for pred in &preds {
            assert_eq!(
                decide_hanf(&tab20, 5, pred, 64).unwrap(),
                decide_hanf(&tab30, 5, pred, 64).unwrap()
            );
        }
    }

    #[test]
    fn leaf_two_triangles_accept() {
        let g = Graph::new(
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
        .unwrap();
        let t = build_bfs_tree(&g, 1);
        let p = pipeline(&g, &t, 3);
        let leaf = BasicLocalSentence::new(1, 2, Psi::Triangle).unwrap();
        let mut run = p.new_run();
        assert!(p.eval_leaf(&leaf, &mut run).unwrap());
    }

    #[test]
    fn leaf_one_triangle_reject() {
        let g = Graph::new(5, &[(1, 2), (1, 3), (2, 3), (3, 4), (4, 5)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let p = pipeline(&g, &t, 3);
        let leaf = BasicLocalSentence::new(1, 2, Psi::Triangle).unwrap();
        let mut run = p.new_run();
        assert!(!p.eval_leaf(&leaf, &mut run).unwrap());
    }

    #[test]
    fn leaf_s1_true_accepts() {
        for g in [cycle(5), cycle(9)] {
            let t = build_bfs_tree(&g, 1);
            let p = pipeline(&g, &t, 2);
            let leaf = BasicLocalSentence::new(1, 1, Psi::True).unwrap();
            let mut run = p.new_run();
            assert!(p.eval_leaf(&leaf, &mut run).unwrap());
        }
    }

    #[test]
    fn leaf_matches_oracle_on_small_cases() {
        let graphs = vec![
            cycle(6),
            cycle(7),
            Graph::new(5, &[(1, 2), (1, 3), (2, 3), (3, 4), (4, 5)]).unwrap(),
            Graph::new(
                7,
                &[(1, 2), (2, 3), (3, 1), (3, 4), (4, 5), (5, 6), (6, 7), (7, 5)],
            )
            .unwrap(),
        ];
        let leaves = vec![
            BasicLocalSentence::new(1, 1, Psi::Triangle).unwrap(),
            BasicLocalSentence::new(1, 2, Psi::Triangle).unwrap(),
            BasicLocalSentence::new(1, 2, Psi::MinDeg(2)).unwrap(),
            BasicLocalSentence::new(2, 2, Psi::BallCycle(2)).unwrap(),
            BasicLocalSentence::new(1, 3, Psi::True).unwrap(),
        ];
        for g in &graphs {
            let t = build_bfs_tree(g, 1);
            let p = pipeline(g, &t, 4);
            for leaf in &leaves {
                let mut run = p.new_run();
                let dist = p.eval_leaf(leaf, &mut run).unwrap();
                let oracle =
                    crate::query::oracle::oracle_eval(g, &QueryExpr::Local(leaf.clone())).unwrap();
                assert_eq!(dist, oracle, "leaf {leaf:?} on {g:?}");
            }
        }
    }

    #[test]
    fn count_aggregate_matches_oracle() {
        let g = Graph::new(
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
        .unwrap();
        let t = build_bfs_tree(&g, 1);
        let p = pipeline(&g, &t, 3);
        let mut run = p.new_run();
        let count = p.count_unary(&Psi::Triangle, &mut run).unwrap();
        assert_eq!(count, 6, "six triangle vertices");
        let mut run2 = p.new_run();
        assert_eq!(p.count_unary(&Psi::False, &mut run2).unwrap(), 0);
        let mut run3 = p.new_run();
        assert_eq!(p.count_unary(&Psi::True, &mut run3).unwrap(), 9);
    }
}
