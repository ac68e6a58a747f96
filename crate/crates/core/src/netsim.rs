//! Deterministic asynchronous message-passing simulator with per-link
//! directed message counting and payload-size accounting in bits.
//!
//! Delivery order is adversarial: among all in-flight messages the seeded RNG
//! picks the next one to deliver, so protocols must be correct under
//! arbitrary interleaving (per-link FIFO is not assumed). Identical inputs
//! and seed give byte-identical transcripts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bfs::{BfsTree, PortState};
use crate::error::SimError;
use crate::graph::{Graph, NodeId};

/// Default event cap: converts livelocks into diagnosable errors.
pub const DEFAULT_EVENT_CAP: u64 = 100_000_000;

/// Message payloads must report a kind tag and their serialized size given
/// the id width in bits. Ids cost `id_bits` each; kind tags and small
/// constants are charged as per-protocol constants.
pub trait Payload: Clone {
    fn kind(&self) -> &'static str;
    fn size_bits(&self, id_bits: u64) -> u64;
}

/// Read-only view of a node's local environment: its id, ports (aligned with
/// the embedding's rotation when one was applied), BFS data, and nothing
/// else — handlers have no access to global topology.
pub struct NodeView<'a> {
    pub id: NodeId,
    pub n: u32,
    pub neighbors: &'a [NodeId],
    pub port_states: &'a [PortState],
    pub depth: u32,
    pub parent_port: Option<usize>,
    pub is_requester: bool,
}

impl<'a> NodeView<'a> {
    pub fn degree(&self) -> usize {
        self.neighbors.len()
    }

    pub fn ports_with(&self, state: PortState) -> impl Iterator<Item = usize> + '_ {
        self.port_states
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == state)
            .map(|(p, _)| p)
    }

    pub fn child_ports(&self) -> Vec<usize> {
        self.ports_with(PortState::Child).collect()
    }

    pub fn is_leaf(&self) -> bool {
        self.child_ports().is_empty()
    }

    pub fn neighbor(&self, port: usize) -> NodeId {
        self.neighbors[port]
    }
}

/// Sends queued by a handler: (port, message) pairs.
pub struct Outbox<M> {
    pub(crate) sends: Vec<(usize, M)>,
}

impl<M> Outbox<M> {
    pub fn new() -> Self {
        Outbox { sends: Vec::new() }
    }
    pub fn send(&mut self, port: usize, msg: M) {
        self.sends.push((port, msg));
    }
    pub fn send_all<I: IntoIterator<Item = usize>>(&mut self, ports: I, msg: M)
    where
        M: Clone,
    {
        for p in ports {
            self.sends.push((p, msg.clone()));
        }
    }
}

impl<M> Default for Outbox<M> {
    fn default() -> Self {
        Self::new()
    }
}

/// A node program: deterministic state transitions driven by messages.
pub trait Protocol {
    type State;
    type Msg: Payload;

    fn init(&self, node: &NodeView) -> Self::State;

    /// Init hook for the requesting node, run once before any delivery.
    fn start(&self, node: &NodeView, state: &mut Self::State, out: &mut Outbox<Self::Msg>);

    fn handle(
        &self,
        node: &NodeView,
        state: &mut Self::State,
        port: usize,
        msg: Self::Msg,
        out: &mut Outbox<Self::Msg>,
    ) -> Result<(), String>;

    /// Decision at the requesting node, once it has reached a final state.
    fn requester_final(&self, state: &Self::State) -> Option<bool>;
}

/// Per-directed-link statistics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DirStats {
    pub count: u64,
    pub max_bits: u64,
    pub per_kind: BTreeMap<&'static str, u64>,
}

/// Message statistics per directed edge.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub links: BTreeMap<(NodeId, NodeId), DirStats>,
}

impl LinkStats {
    fn record(&mut self, src: NodeId, dst: NodeId, kind: &'static str, bits: u64) {
        let e = self.links.entry((src, dst)).or_default();
        e.count += 1;
        e.max_bits = e.max_bits.max(bits);
        *e.per_kind.entry(kind).or_default() += 1;
    }

    pub fn merge(&mut self, other: &LinkStats) {
        for (k, v) in &other.links {
            let e = self.links.entry(*k).or_default();
            e.count += v.count;
            e.max_bits = e.max_bits.max(v.max_bits);
            for (kind, c) in &v.per_kind {
                *e.per_kind.entry(kind).or_default() += c;
            }
        }
    }

    pub fn max_count(&self) -> u64 {
        self.links.values().map(|d| d.count).max().unwrap_or(0)
    }

    pub fn max_bits(&self) -> u64 {
        self.links.values().map(|d| d.max_bits).max().unwrap_or(0)
    }

    pub fn total_messages(&self) -> u64 {
        self.links.values().map(|d| d.count).sum()
    }

    /// CSV export: `u,v,dir,count,max_bits` with edges canonical u < v.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,v,dir,count,max_bits\n");
        for ((src, dst), st) in &self.links {
            let (u, v, dir) = if src < dst {
                (src, dst, "fwd")
            } else {
                (dst, src, "rev")
            };
            out.push_str(&format!("{u},{v},{dir},{},{}\n", st.count, st.max_bits));
        }
        out
    }
}

/// Outcome of a run: the requester's decision, stats at requester finality
/// and at quiescence, event counts, and an optional transcript.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub decision: Option<bool>,
    /// Stats frozen when the requester first reached a final state.
    pub stats_at_final: LinkStats,
    /// Stats at quiescence (all messages delivered).
    pub stats: LinkStats,
    pub total_events: u64,
    pub quiescent: bool,
    pub transcript: Option<String>,
}

/// ceil(log2(n)), at least 1.
pub fn id_bits(n: u32) -> u64 {
    (32 - (n.max(2) - 1).leading_zeros()) as u64
}

struct Envelope<M> {
    src: NodeId,
    dst: NodeId,
    dst_port: usize,
    msg: M,
}

pub struct RunResult<S> {
    pub outcome: RunOutcome,
    pub states: Vec<S>, // indexed by node id, 0 unused
}

pub struct RunConfig {
    pub seed: u64,
    pub event_cap: u64,
    pub record_transcript: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            event_cap: DEFAULT_EVENT_CAP,
            record_transcript: false,
        }
    }
}

/// Runs `prog` over the graph with the pre-computed BFS tree (an uncounted
/// setup structure). Returns the outcome and every node's final state.
pub fn run<P: Protocol>(
    g: &Graph,
    bfs: &BfsTree,
    prog: &P,
    requester: NodeId,
    cfg: &RunConfig,
) -> Result<RunResult<P::State>, SimError> {
    run_observed(g, bfs, prog, requester, cfg, &mut |_, _, _, _| Ok(()))
}

/// As [`run`], with an observer invoked after every delivery; the observer
/// sees all node states and the delivered (src, dst, kind). Observer errors
/// become invariant violations.
pub fn run_observed<P: Protocol>(
    g: &Graph,
    bfs: &BfsTree,
    prog: &P,
    requester: NodeId,
    cfg: &RunConfig,
    observer: &mut dyn FnMut(&[P::State], NodeId, NodeId, &'static str) -> Result<(), String>,
) -> Result<RunResult<P::State>, SimError> {
    assert_eq!(bfs.root, requester, "BFS tree must be rooted at the requester");
    let n = g.node_count();
    let idb = id_bits(n);
    let view = |v: NodeId| NodeView {
        id: v,
        n,
        neighbors: g.neighbors(v),
        port_states: &bfs.port_state[v as usize],
        depth: bfs.depth_of(v),
        parent_port: bfs.parent_of(v).map(|p| {
            g.neighbors(v)
                .iter()
                .position(|&u| u == p)
                .expect("parent among neighbors")
        }),
        is_requester: v == requester,
    };

    // init all states, then the requester's start hook
    let mut states: Vec<P::State> = Vec::with_capacity(n as usize + 1);
    states.push(prog.init(&view(1))); // slot 0 placeholder, never read
    for v in g.nodes() {
        states.push(prog.init(&view(v)));
    }

    let mut pool: Vec<Envelope<P::Msg>> = Vec::new();
    let mut stats = LinkStats::default();
    let mut transcript = if cfg.record_transcript {
        Some(String::new())
    } else {
        None
    };
    let mut sends: u64 = 0;
    let mut deliveries: u64 = 0;

    let push_sends = |from: NodeId,
                          out: Outbox<P::Msg>,
                          pool: &mut Vec<Envelope<P::Msg>>,
                          sends: &mut u64| {
        for (port, msg) in out.sends {
            let dst = g.neighbors(from)[port];
            let dst_port = g
                .neighbors(dst)
                .iter()
                .position(|&u| u == from)
                .expect("symmetric adjacency");
            pool.push(Envelope {
                src: from,
                dst,
                dst_port,
                msg,
            });
            *sends += 1;
        }
    };

    {
        let v = view(requester);
        let mut out = Outbox::new();
        let st = &mut states[requester as usize];
        prog.start(&v, st, &mut out);
        push_sends(requester, out, &mut pool, &mut sends);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut total_events: u64 = 0;
    let mut stats_at_final: Option<LinkStats> = None;
    let mut decision: Option<bool> = None;

    if let Some(d) = prog.requester_final(&states[requester as usize]) {
        decision = Some(d);
        stats_at_final = Some(stats.clone());
    }

    while !pool.is_empty() {
        if total_events >= cfg.event_cap {
            return Err(SimError::Livelock { cap: cfg.event_cap });
        }
        let idx = rng.gen_range(0..pool.len());
        let env = pool.swap_remove(idx);
        total_events += 1;
        deliveries += 1;
        let kind = env.msg.kind();
        let bits = env.msg.size_bits(idb);
        stats.record(env.src, env.dst, kind, bits);
        if let Some(t) = transcript.as_mut() {
            let (u, v, dir) = if env.src < env.dst {
                (env.src, env.dst, "fwd")
            } else {
                (env.dst, env.src, "rev")
            };
            t.push_str(&format!("deliver {u}-{v} {dir} {kind} {bits}\n"));
        }
        {
            let v = view(env.dst);
            let mut out = Outbox::new();
            let st = &mut states[env.dst as usize];
            prog.handle(&v, st, env.dst_port, env.msg, &mut out)
                .map_err(|msg| SimError::Handler {
                    node: env.dst,
                    kind,
                    msg,
                })?;
            push_sends(env.dst, out, &mut pool, &mut sends);
        }
        observer(&states, env.src, env.dst, kind).map_err(SimError::Invariant)?;
        if decision.is_none() {
            if let Some(d) = prog.requester_final(&states[requester as usize]) {
                decision = Some(d);
                stats_at_final = Some(stats.clone());
            }
        }
    }

    debug_assert_eq!(sends, deliveries, "conservation: sends equal deliveries");

    Ok(RunResult {
        outcome: RunOutcome {
            decision,
            stats_at_final: stats_at_final.unwrap_or_else(|| stats.clone()),
            stats,
            total_events,
            quiescent: true,
            transcript,
        },
        states,
    })
}

/// Frugality verdict against explicit caps.
#[derive(Debug, Clone)]
pub struct FrugalityReport {
    pub pass: bool,
    pub count_cap: u64,
    pub size_cap_bits: u64,
    pub worst_count_link: Option<((NodeId, NodeId), u64)>,
    pub worst_size: Option<((NodeId, NodeId), &'static str, u64)>,
}

/// Pass iff every directed link carried at most `k_cap` messages and every
/// payload fits in `c_cap * ceil(log2 n)` bits. Reports the argmax link and
/// message kind.
pub fn frugality_report(outcome: &RunOutcome, n: u32, k_cap: u64, c_cap: u64) -> FrugalityReport {
    let size_cap = c_cap * id_bits(n);
    let mut pass = true;
    let mut worst_count: Option<((NodeId, NodeId), u64)> = None;
    let mut worst_size: Option<((NodeId, NodeId), &'static str, u64)> = None;
    for (link, st) in &outcome.stats.links {
        if worst_count.map(|(_, c)| st.count > c).unwrap_or(true) {
            worst_count = Some((*link, st.count));
        }
        if st.count > k_cap {
            pass = false;
        }
        if worst_size.map(|(_, _, b)| st.max_bits > b).unwrap_or(true) {
            let kind = st
                .per_kind
                .keys()
                .next()
                .copied()
                .unwrap_or("?");
            worst_size = Some((*link, kind, st.max_bits));
        }
        if st.max_bits > size_cap {
            pass = false;
        }
    }
    FrugalityReport {
        pass,
        count_cap: k_cap,
        size_cap_bits: size_cap,
        worst_count_link: worst_count,
        worst_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfs::build_bfs_tree;

    #[derive(Clone, Debug)]
    enum EchoMsg {
        Ping,
        Pong,
    }

    impl Payload for EchoMsg {
        fn kind(&self) -> &'static str {
            match self {
                EchoMsg::Ping => "PING",
                EchoMsg::Pong => "PONG",
            }
        }
        fn size_bits(&self, _idb: u64) -> u64 {
            8
        }
    }

    struct Echo;

    #[derive(Clone)]
    struct EchoState {
        done: bool,
        requester: bool,
    }

    impl Protocol for Echo {
        type State = EchoState;
        type Msg = EchoMsg;
        fn init(&self, node: &NodeView) -> EchoState {
            EchoState {
                done: false,
                requester: node.is_requester,
            }
        }
        fn start(&self, node: &NodeView, _st: &mut EchoState, out: &mut Outbox<EchoMsg>) {
            for p in 0..node.degree() {
                out.send(p, EchoMsg::Ping);
            }
        }
        fn handle(
            &self,
            _node: &NodeView,
            st: &mut EchoState,
            port: usize,
            msg: EchoMsg,
            out: &mut Outbox<EchoMsg>,
        ) -> Result<(), String> {
            match msg {
                EchoMsg::Ping => out.send(port, EchoMsg::Pong),
                EchoMsg::Pong => st.done = true,
            }
            Ok(())
        }
        fn requester_final(&self, st: &EchoState) -> Option<bool> {
            if st.requester && st.done {
                Some(true)
            } else {
                None
            }
        }
    }

    #[test]
    fn echo_counts_one_per_direction() {
        let g = Graph::new(2, &[(1, 2)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let res = run(&g, &t, &Echo, 1, &RunConfig::default()).unwrap();
        assert_eq!(res.outcome.decision, Some(true));
        assert_eq!(res.outcome.stats.links[&(1, 2)].count, 1);
        assert_eq!(res.outcome.stats.links[&(2, 1)].count, 1);
    }

    /// Broadcast one message down every link, one ack back: 2 per link on a star.
    struct BroadcastAck;

    #[derive(Clone)]
    struct BaState {
        acks: usize,
        want: usize,
        requester: bool,
    }

    impl Protocol for BroadcastAck {
        type State = BaState;
        type Msg = EchoMsg;
        fn init(&self, node: &NodeView) -> BaState {
            BaState {
                acks: 0,
                want: node.degree(),
                requester: node.is_requester,
            }
        }
        fn start(&self, node: &NodeView, _st: &mut BaState, out: &mut Outbox<EchoMsg>) {
            for p in 0..node.degree() {
                out.send(p, EchoMsg::Ping);
            }
        }
        fn handle(
            &self,
            _node: &NodeView,
            st: &mut BaState,
            port: usize,
            msg: EchoMsg,
            out: &mut Outbox<EchoMsg>,
        ) -> Result<(), String> {
            match msg {
                EchoMsg::Ping => out.send(port, EchoMsg::Pong),
                EchoMsg::Pong => st.acks += 1,
            }
            Ok(())
        }
        fn requester_final(&self, st: &BaState) -> Option<bool> {
            (st.requester && st.acks == st.want).then_some(true)
        }
    }

    #[test]
    fn star_broadcast_ack_two_per_link() {
        let g = Graph::new(5, &[(1, 2), (1, 3), (1, 4), (1, 5)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let res = run(&g, &t, &BroadcastAck, 1, &RunConfig::default()).unwrap();
        assert_eq!(res.outcome.decision, Some(true));
        for leaf in 2..=5u32 {
            let down = res.outcome.stats.links[&(1, leaf)].count;
            let up = res.outcome.stats.links[&(leaf, 1)].count;
            assert_eq!(down + up, 2);
        }
    }

    #[test]
    fn same_seed_identical_transcripts() {
        let g = Graph::new(5, &[(1, 2), (1, 3), (1, 4), (1, 5)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let cfg = RunConfig {
            seed: 42,
            record_transcript: true,
            ..Default::default()
        };
        let a = run(&g, &t, &BroadcastAck, 1, &cfg).unwrap();
        let b = run(&g, &t, &BroadcastAck, 1, &cfg).unwrap();
        assert_eq!(a.outcome.transcript, b.outcome.transcript);
        assert_eq!(a.outcome.stats, b.outcome.stats);
    }

    #[test]
    fn frugality_caps() {
        let g = Graph::new(2, &[(1, 2)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let res = run(&g, &t, &Echo, 1, &RunConfig::default()).unwrap();
        let ok = frugality_report(&res.outcome, 2, 1, 100);
        assert!(ok.pass);
        let bad = frugality_report(&res.outcome, 2, 0, 100);
        assert!(!bad.pass);
        assert_eq!(bad.worst_count_link.unwrap().1, 1);
    }

    #[test]
    fn id_bits_examples() {
        assert_eq!(id_bits(2), 1);
        assert_eq!(id_bits(3), 2);
        assert_eq!(id_bits(9), 4);
        assert_eq!(id_bits(512), 9);
        assert_eq!(id_bits(513), 10);
    }

    #[test]
    fn event_cap_livelock() {
        // a program that ping-pongs forever
        struct Forever;
        impl Protocol for Forever {
            type State = ();
            type Msg = EchoMsg;
            fn init(&self, _n: &NodeView) {}
            fn start(&self, _n: &NodeView, _s: &mut (), out: &mut Outbox<EchoMsg>) {
                out.send(0, EchoMsg::Ping);
            }
            fn handle(
                &self,
                _n: &NodeView,
                _s: &mut (),
                port: usize,
                _m: EchoMsg,
                out: &mut Outbox<EchoMsg>,
            ) -> Result<(), String> {
                out.send(port, EchoMsg::Ping);
                Ok(())
            }
            fn requester_final(&self, _s: &()) -> Option<bool> {
                None
            }
        }
        let g = Graph::new(2, &[(1, 2)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let cfg = RunConfig {
            event_cap: 100,
            ..Default::default()
        };
        assert!(matches!(
            run(&g, &t, &Forever, 1, &cfg),
            Err(SimError::Livelock { .. })
        ));
    }
}
