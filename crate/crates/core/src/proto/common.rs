//! Shared distributed primitives over the pre-computed BFS tree: broadcast
//! with convergecast aggregation (including capped multisets and counting)
//! and greedy scattered-set selection.

use std::collections::BTreeMap;

use crate::graph::NodeId;
use crate::netsim::{id_bits, NodeView, Outbox, Payload, Protocol};

/// Commutative, associative fold with an optional per-key cap.
pub trait Aggregate {
    type Value: Clone + std::fmt::Debug;
    fn identity(&self) -> Self::Value;
    fn combine(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn size_bits(&self, v: &Self::Value, idb: u64) -> u64;
}

/// Plain u64 sum.
pub struct SumAgg;
impl Aggregate for SumAgg {
    type Value = u64;
    fn identity(&self) -> u64 {
        0
    }
    fn combine(&self, a: &u64, b: &u64) -> u64 {
        a + b
    }
    fn size_bits(&self, _v: &u64, idb: u64) -> u64 {
        idb + 1
    }
}

/// u32 max (e.g. tree depth).
pub struct MaxAgg;
impl Aggregate for MaxAgg {
    type Value = u32;
    fn identity(&self) -> u32 {
        0
    }
    fn combine(&self, a: &u32, b: &u32) -> u32 {
        *a.max(b)
    }
    fn size_bits(&self, _v: &u32, idb: u64) -> u64 {
        idb
    }
}

/// Minimum node id, `None` as identity.
pub struct MinIdAgg;
impl Aggregate for MinIdAgg {
    type Value = Option<NodeId>;
    fn identity(&self) -> Option<NodeId> {
        None
    }
    fn combine(&self, a: &Option<NodeId>, b: &Option<NodeId>) -> Option<NodeId> {
        match (a, b) {
            (Some(x), Some(y)) => Some(*x.min(y)),
            (Some(x), None) | (None, Some(x)) => Some(*x),
            (None, None) => None,
        }
    }
    fn size_bits(&self, _v: &Option<NodeId>, idb: u64) -> u64 {
        idb + 1
    }
}

/// Multiset union with per-key saturation at `cap`. Keys are opaque byte
/// strings (canonical type codes); every count stays in `[0, cap]`.
pub struct CappedMultisetAgg {
    pub cap: u64,
    /// Bit size charged per key, a per-protocol constant (codes of
    /// degree/radius-bounded types have bounded size).
    pub key_bits: u64,
}

impl Aggregate for CappedMultisetAgg {
    type Value = BTreeMap<Vec<u8>, u64>;
    fn identity(&self) -> Self::Value {
        BTreeMap::new()
    }
    fn combine(&self, a: &Self::Value, b: &Self::Value) -> Self::Value {
        let mut out = a.clone();
        for (k, v) in b {
            let e = out.entry(k.clone()).or_insert(0);
            *e = (*e + v).min(self.cap);
        }
        out
    }
    fn size_bits(&self, v: &Self::Value, idb: u64) -> u64 {
        // per entry: key + saturated count
        v.len() as u64 * (self.key_bits + idb + 1)
    }
}

#[derive(Clone, Debug)]
pub enum TreeMsg<V: Clone> {
    Down,
    Up(V),
}

impl<V: Clone + std::fmt::Debug> Payload for TreeMsg<V> {
    fn kind(&self) -> &'static str {
        match self {
            TreeMsg::Down => "BCAST",
            TreeMsg::Up(_) => "AGG",
        }
    }
    fn size_bits(&self, _idb: u64) -> u64 {
        8 // sized properly by the wrapper below
    }
}

/// Broadcast + convergecast: one message down and one up per tree edge, with
/// the requester ending up holding the fold of all per-node contributions.
pub struct Convergecast<A: Aggregate> {
    pub agg: A,
    /// Per-node contribution, indexed by node id.
    pub local: Vec<A::Value>,
}

#[derive(Clone)]
pub struct CcState<V> {
    pub acc: V,
    pending: usize,
    reported: bool,
    pub result: Option<V>,
}

#[derive(Clone, Debug)]
pub struct SizedMsg<V: Clone> {
    msg: TreeMsg<V>,
    bits: u64,
}

impl<V: Clone + std::fmt::Debug> Payload for SizedMsg<V> {
    fn kind(&self) -> &'static str {
        self.msg.kind()
    }
    fn size_bits(&self, _idb: u64) -> u64 {
        self.bits
    }
}

impl<A: Aggregate> Convergecast<A> {
    fn up_msg(&self, v: &A::Value, n: u32) -> SizedMsg<A::Value> {
        SizedMsg {
            bits: self.agg.size_bits(v, id_bits(n)),
            msg: TreeMsg::Up(v.clone()),
        }
    }
}

impl<A: Aggregate> Protocol for Convergecast<A>
where
    A::Value: std::fmt::Debug,
{
    type State = CcState<A::Value>;
    type Msg = SizedMsg<A::Value>;

    fn init(&self, node: &NodeView) -> Self::State {
        CcState {
            acc: self.local[node.id as usize].clone(),
            pending: node.child_ports().len(),
            reported: false,
            result: None,
        }
    }

    fn start(&self, node: &NodeView, state: &mut Self::State, out: &mut Outbox<Self::Msg>) {
        for p in node.child_ports() {
            out.send(
                p,
                SizedMsg {
                    msg: TreeMsg::Down,
                    bits: 1,
                },
            );
        }
        if state.pending == 0 {
            state.result = Some(state.acc.clone());
        }
    }

    fn handle(
        &self,
        node: &NodeView,
        state: &mut Self::State,
        _port: usize,
        msg: Self::Msg,
        out: &mut Outbox<Self::Msg>,
    ) -> Result<(), String> {
        match msg.msg {
            TreeMsg::Down => {
                for p in node.child_ports() {
                    out.send(
                        p,
                        SizedMsg {
                            msg: TreeMsg::Down,
                            bits: 1,
                        },
                    );
                }
                if state.pending == 0 && !state.reported {
                    state.reported = true;
                    let parent = node.parent_port.ok_or("non-root leaf must have parent")?;
                    out.send(parent, self.up_msg(&state.acc, node.n));
                }
            }
            TreeMsg::Up(v) => {
                state.acc = self.agg.combine(&state.acc, &v);
                state.pending = state
                    .pending
                    .checked_sub(1)
                    .ok_or("unexpected extra aggregate message")?;
                if state.pending == 0 {
                    if node.is_requester {
                        state.result = Some(state.acc.clone());
                    } else if !state.reported {
                        state.reported = true;
                        let parent = node.parent_port.ok_or("non-root must have parent")?;
                        out.send(parent, self.up_msg(&state.acc, node.n));
                    }
                }
            }
        }
        Ok(())
    }

    fn requester_final(&self, state: &Self::State) -> Option<bool> {
        state.result.as_ref().map(|_| true)
    }
}

/// Exact count of set flags, aggregated to the requester: one integer of at
/// most `ceil(log2 n)+1` bits per tree message.
pub fn count_aggregate_protocol(flags: &[bool]) -> Convergecast<SumAgg> {
    Convergecast {
        agg: SumAgg,
        local: flags.iter().map(|&b| if b { 1 } else { 0 }).collect(),
    }
}

// ---------------------------------------------------------------------------
// Greedy scattered-set selection (the witness phase).
// ---------------------------------------------------------------------------

/// Node-side outcome of the selection phase.
#[derive(Clone, Debug, Default)]
pub struct ScatterFlags {
    pub p: bool,
    pub q: bool,
    pub i: bool,
}

#[derive(Clone, Debug)]
pub enum ScatterMsg {
    /// Select round: request the minimum id with P and not Q.
    SelGo,
    SelVal(Option<NodeId>),
    /// Announce the chosen origin and flood kind (Q: 2r hops, I: 4r hops).
    Announce { origin: NodeId, mark_i: bool },
    AnnAck,
    /// Hop-synchronized flood expansion.
    Wave { hop: u32 },
    WaveDone { any_new: bool },
    Expand { hop: u32 },
    ExpandAck { joined: bool },
    /// Selection finished (carries l so every node learns the outcome).
    Finish { l: u32 },
    FinishAck,
}

impl Payload for ScatterMsg {
    fn kind(&self) -> &'static str {
        match self {
            ScatterMsg::SelGo => "SELGO",
            ScatterMsg::SelVal(_) => "SELVAL",
            ScatterMsg::Announce { .. } => "ANNOUNCE",
            ScatterMsg::AnnAck => "ANNACK",
            ScatterMsg::Wave { .. } => "WAVE",
            ScatterMsg::WaveDone { .. } => "WAVEDONE",
            ScatterMsg::Expand { .. } => "EXPAND",
            ScatterMsg::ExpandAck { .. } => "EXPANDACK",
            ScatterMsg::Finish { .. } => "FINISH",
            ScatterMsg::FinishAck => "FINISHACK",
        }
    }
    fn size_bits(&self, idb: u64) -> u64 {
        match self {
            ScatterMsg::SelGo | ScatterMsg::AnnAck => 4,
            ScatterMsg::SelVal(_) => 4 + idb + 1,
            ScatterMsg::Announce { .. } => 4 + idb + 1,
            // hop counts are bounded by 4r, charged as a protocol constant
            ScatterMsg::Wave { .. } | ScatterMsg::Expand { .. } => 4 + 8,
            ScatterMsg::WaveDone { .. } | ScatterMsg::ExpandAck { .. } => 4 + 1,
            ScatterMsg::Finish { .. } => 4 + idb,
            ScatterMsg::FinishAck => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum ReqPhase {
    SelectRound,
    Flooding { qflood: bool },
    IFloodQueue,
    Done,
}

#[derive(Clone, Debug)]
pub struct ScatterState {
    pub flags: ScatterFlags,
    // convergecast scratch (select rounds, wave-done, announce acks, finish acks)
    sel_acc: Option<NodeId>,
    sel_pending: usize,
    ann_pending: usize,
    wave_pending: usize,
    wave_any_new: bool,
    fin_pending: usize,
    // flood scratch
    flood_dist: Option<u32>,
    flood_mark_i: bool,
    expand_acks: usize,
    expanded: bool,
    // requester bookkeeping
    req: Option<ReqState>,
    /// Local BFS parent within the current flood, for I-component use later.
    pub i_flood_origin: Option<NodeId>,
}

#[derive(Clone, Debug)]
struct ReqState {
    phase: ReqPhase,
    hop: u32,
    selected: Vec<NodeId>,
    i_queue: Vec<NodeId>,
    finished: bool,
}

/// Greedy scattered-set selection: repeatedly pick the smallest-id P-node
/// not yet Q-marked, flood Q over its 2r-neighborhood, stop at `s` picks or
/// exhaustion; if short, flood I over 4r-neighborhoods of all picks.
pub struct ScatterSelect {
    pub r: u32,
    pub s: u32,
    /// P flags per node id.
    pub p_flags: Vec<bool>,
}

impl ScatterSelect {
    fn exhausted_or_full(req: &ReqState, s: u32) -> bool {
        req.selected.len() as u32 >= s
    }

    fn begin_select(&self, node: &NodeView, st: &mut ScatterState, out: &mut Outbox<ScatterMsg>) {
        let kids = node.child_ports();
        st.sel_pending = kids.len();
        st.sel_acc = self.own_candidate(node.id, st);
        if kids.is_empty() {
            self.requester_select_done(node, st, out);
        } else {
            out.send_all(kids, ScatterMsg::SelGo);
        }
    }

    fn own_candidate(&self, id: NodeId, st: &ScatterState) -> Option<NodeId> {
        (st.flags.p && !st.flags.q).then_some(id)
    }

    fn requester_select_done(
        &self,
        node: &NodeView,
        st: &mut ScatterState,
        out: &mut Outbox<ScatterMsg>,
    ) {
        let candidate = st.sel_acc;
        let full = {
            let req = st.req.as_ref().expect("requester state");
            Self::exhausted_or_full(req, self.s)
        };
        match candidate {
            Some(w) if !full => {
                {
                    let req = st.req.as_mut().unwrap();
                    req.selected.push(w);
                    req.phase = ReqPhase::Flooding { qflood: true };
                    req.hop = 0;
                }
                // announce w; everyone resets flood scratch, w seeds itself
                let kids = node.child_ports();
                st.ann_pending = kids.len();
                self.apply_announce(node.id, st, w, false);
                if kids.is_empty() {
                    self.after_announce(node, st, out);
                } else {
                    out.send_all(kids, ScatterMsg::Announce { origin: w, mark_i: false });
                }
            }
            _ => {
                // selection over: either full or no candidate remains
                let short = {
                    let req = st.req.as_mut().unwrap();
                    if (req.selected.len() as u32) < self.s {
                        req.phase = ReqPhase::IFloodQueue;
                        req.i_queue = req.selected.clone();
                        true
                    } else {
                        false
                    }
                };
                if short {
                    self.advance_i_queue(node, st, out);
                } else {
                    self.finish(node, st, out);
                }
            }
        }
    }

    fn apply_announce(&self, id: NodeId, st: &mut ScatterState, origin: NodeId, mark_i: bool) {
        st.flood_dist = None;
        st.flood_mark_i = mark_i;
        st.expand_acks = 0;
        st.expanded = false;
        if id == origin {
            st.flood_dist = Some(0);
            if mark_i {
                st.flags.i = true;
                st.i_flood_origin = Some(origin);
            } else {
                st.flags.q = true;
            }
        }
    }

    fn after_announce(&self, node: &NodeView, st: &mut ScatterState, out: &mut Outbox<ScatterMsg>) {
        // hops: Q floods run 2r waves, I floods 4r
        let req = st.req.as_mut().expect("requester");
        let max_hop = match req.phase {
            ReqPhase::Flooding { qflood: true } => 2 * self.r,
            ReqPhase::Flooding { qflood: false } => 4 * self.r,
            _ => unreachable!("announce outside flood phase"),
        };
        if max_hop == 0 {
            self.flood_finished(node, st, out);
        } else {
            req.hop = 1;
            self.begin_wave(node, st, out);
        }
    }

    fn begin_wave(&self, node: &NodeView, st: &mut ScatterState, out: &mut Outbox<ScatterMsg>) {
        let hop = st.req.as_ref().unwrap().hop;
        st.wave_pending = node.child_ports().len();
        st.wave_any_new = false;
        self.local_wave(node, st, hop, out);
        if st.wave_pending == 0 {
            self.requester_wave_done(node, st, out);
        } else {
            out.send_all(node.child_ports(), ScatterMsg::Wave { hop });
        }
    }

    /// Frontier nodes expand to all neighbors; non-frontiers are instantly done.
    fn local_wave(&self, node: &NodeView, st: &mut ScatterState, hop: u32, out: &mut Outbox<ScatterMsg>) {
        if st.flood_dist == Some(hop - 1) && node.degree() > 0 {
            st.expand_acks = node.degree();
            st.expanded = true;
            out.send_all(0..node.degree(), ScatterMsg::Expand { hop });
        } else {
            st.expanded = false;
            st.expand_acks = 0;
        }
    }

    fn node_wave_ready(st: &ScatterState) -> bool {
        st.wave_pending == 0 && st.expand_acks == 0
    }

    fn requester_wave_done(&self, node: &NodeView, st: &mut ScatterState, out: &mut Outbox<ScatterMsg>) {
        if !Self::node_wave_ready(st) {
            return;
        }
        let req = st.req.as_mut().unwrap();
        let max_hop = match req.phase {
            ReqPhase::Flooding { qflood: true } => 2 * self.r,
            ReqPhase::Flooding { qflood: false } => 4 * self.r,
            _ => return,
        };
        if st.wave_any_new && req.hop < max_hop {
            req.hop += 1;
            self.begin_wave(node, st, out);
        } else {
            self.flood_finished(node, st, out);
        }
    }

    fn flood_finished(&self, node: &NodeView, st: &mut ScatterState, out: &mut Outbox<ScatterMsg>) {
        let req = st.req.as_mut().unwrap();
        match req.phase {
            ReqPhase::Flooding { qflood: true } => {
                req.phase = ReqPhase::SelectRound;
                self.begin_select(node, st, out);
            }
            ReqPhase::Flooding { qflood: false } => {
                self.advance_i_queue(node, st, out);
            }
            _ => {}
        }
    }

    fn advance_i_queue(&self, node: &NodeView, st: &mut ScatterState, out: &mut Outbox<ScatterMsg>) {
        let next = {
            let req = st.req.as_mut().unwrap();
            if req.i_queue.is_empty() {
                None
            } else {
                Some(req.i_queue.remove(0))
            }
        };
        if let Some(w) = next {
            {
                let req = st.req.as_mut().unwrap();
                req.phase = ReqPhase::Flooding { qflood: false };
                req.hop = 0;
            }
            let kids = node.child_ports();
            st.ann_pending = kids.len();
            self.apply_announce(node.id, st, w, true);
            if kids.is_empty() {
                self.after_announce(node, st, out);
            } else {
                out.send_all(kids, ScatterMsg::Announce { origin: w, mark_i: true });
            }
        } else {
            self.finish(node, st, out);
        }
    }

    fn finish(&self, node: &NodeView, st: &mut ScatterState, out: &mut Outbox<ScatterMsg>) {
        let req = st.req.as_mut().unwrap();
        req.phase = ReqPhase::Done;
        let l = req.selected.len() as u32;
        st.fin_pending = node.child_ports().len();
        if st.fin_pending == 0 {
            st.req.as_mut().unwrap().finished = true;
        } else {
            out.send_all(node.child_ports(), ScatterMsg::Finish { l });
        }
    }
}

impl Protocol for ScatterSelect {
    type State = ScatterState;
    type Msg = ScatterMsg;

    fn init(&self, node: &NodeView) -> ScatterState {
        ScatterState {
            flags: ScatterFlags {
                p: self.p_flags[node.id as usize],
                q: false,
                i: false,
            },
            sel_acc: None,
            sel_pending: 0,
            ann_pending: 0,
            wave_pending: 0,
            wave_any_new: false,
            fin_pending: 0,
            flood_dist: None,
            flood_mark_i: false,
            expand_acks: 0,
            expanded: false,
            req: node.is_requester.then_some(ReqState {
                phase: ReqPhase::SelectRound,
                hop: 0,
                selected: Vec::new(),
                i_queue: Vec::new(),
                finished: false,
            }),
            i_flood_origin: None,
        }
    }

    fn start(&self, node: &NodeView, state: &mut ScatterState, out: &mut Outbox<ScatterMsg>) {
        self.begin_select(node, state, out);
    }

    fn handle(
        &self,
        node: &NodeView,
        st: &mut ScatterState,
        port: usize,
        msg: ScatterMsg,
        out: &mut Outbox<ScatterMsg>,
    ) -> Result<(), String> {
        match msg {
            ScatterMsg::SelGo => {
                let kids = node.child_ports();
                st.sel_pending = kids.len();
                st.sel_acc = self.own_candidate(node.id, st);
                if kids.is_empty() {
                    let parent = node.parent_port.ok_or("leaf without parent")?;
                    out.send(parent, ScatterMsg::SelVal(st.sel_acc));
                } else {
                    out.send_all(kids, ScatterMsg::SelGo);
                }
            }
            ScatterMsg::SelVal(v) => {
                st.sel_acc = MinIdAgg.combine(&st.sel_acc, &v);
                st.sel_pending -= 1;
                if st.sel_pending == 0 {
                    if node.is_requester {
                        self.requester_select_done(node, st, out);
                    } else {
                        let parent = node.parent_port.ok_or("inner node without parent")?;
                        out.send(parent, ScatterMsg::SelVal(st.sel_acc));
                    }
                }
            }
            ScatterMsg::Announce { origin, mark_i } => {
                self.apply_announce(node.id, st, origin, mark_i);
                let kids = node.child_ports();
                st.ann_pending = kids.len();
                if kids.is_empty() {
                    let parent = node.parent_port.ok_or("leaf without parent")?;
                    out.send(parent, ScatterMsg::AnnAck);
                } else {
                    out.send_all(kids, ScatterMsg::Announce { origin, mark_i });
                }
            }
            ScatterMsg::AnnAck => {
                st.ann_pending -= 1;
                if st.ann_pending == 0 {
                    if node.is_requester {
                        self.after_announce(node, st, out);
                    } else {
                        let parent = node.parent_port.ok_or("inner node without parent")?;
                        out.send(parent, ScatterMsg::AnnAck);
                    }
                }
            }
            ScatterMsg::Wave { hop } => {
                let kids = node.child_ports();
                st.wave_pending = kids.len();
                st.wave_any_new = false;
                self.local_wave(node, st, hop, out);
                out.send_all(kids, ScatterMsg::Wave { hop });
                if Self::node_wave_ready(st) && !node.is_requester {
                    let parent = node.parent_port.ok_or("node without parent")?;
                    out.send(
                        parent,
                        ScatterMsg::WaveDone {
                            any_new: st.wave_any_new,
                        },
                    );
                    st.wave_pending = usize::MAX; // reported
                }
            }
            ScatterMsg::Expand { hop } => {
                // join the flood if unvisited; distance is exact because wave
                // h runs only after every wave-(h-1) expansion was delivered
                let joined = st.flood_dist.is_none();
                if joined {
                    st.flood_dist = Some(hop);
                    if st.flood_mark_i {
                        st.flags.i = true;
                        st.i_flood_origin = None; // set only at origins
                    } else {
                        st.flags.q = true;
                    }
                }
                out.send(port, ScatterMsg::ExpandAck { joined });
            }
            ScatterMsg::ExpandAck { joined } => {
                st.wave_any_new |= joined;
                st.expand_acks -= 1;
                if Self::node_wave_ready(st) {
                    if node.is_requester {
                        self.requester_wave_done(node, st, out);
                    } else if st.wave_pending != usize::MAX {
                        let parent = node.parent_port.ok_or("node without parent")?;
                        out.send(
                            parent,
                            ScatterMsg::WaveDone {
                                any_new: st.wave_any_new,
                            },
                        );
                        st.wave_pending = usize::MAX;
                    }
                }
            }
            ScatterMsg::WaveDone { any_new } => {
                st.wave_any_new |= any_new;
                st.wave_pending -= 1;
                if Self::node_wave_ready(st) {
                    if node.is_requester {
                        self.requester_wave_done(node, st, out);
                    } else {
                        let parent = node.parent_port.ok_or("node without parent")?;
                        out.send(
                            parent,
                            ScatterMsg::WaveDone {
                                any_new: st.wave_any_new,
                            },
                        );
                        st.wave_pending = usize::MAX;
                    }
                }
            }
            ScatterMsg::Finish { l } => {
                let kids = node.child_ports();
                st.fin_pending = kids.len();
                if kids.is_empty() {
                    let parent = node.parent_port.ok_or("leaf without parent")?;
                    out.send(parent, ScatterMsg::FinishAck);
                } else {
                    out.send_all(kids, ScatterMsg::Finish { l });
                }
            }
            ScatterMsg::FinishAck => {
                st.fin_pending -= 1;
                if st.fin_pending == 0 {
                    if node.is_requester {
                        st.req.as_mut().unwrap().finished = true;
                    } else {
                        let parent = node.parent_port.ok_or("inner node without parent")?;
                        out.send(parent, ScatterMsg::FinishAck);
                    }
                }
            }
        }
        Ok(())
    }

    fn requester_final(&self, state: &ScatterState) -> Option<bool> {
        let req = state.req.as_ref()?;
        req.finished
            .then_some(req.selected.len() as u32 >= self.s)
    }
}

/// Witnesses selected by a finished run, read back from the requester state.
pub fn selected_witnesses(st: &ScatterState) -> Vec<NodeId> {
    st.req.as_ref().map(|r| r.selected.clone()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfs::build_bfs_tree;
    use crate::graph::Graph;
    use crate::netsim::{run, RunConfig};

    fn cycle(n: u32) -> Graph {
        let edges: Vec<(NodeId, NodeId)> = (1..n).map(|i| (i, i + 1)).chain([(n, 1)]).collect();
        Graph::new(n, &edges).unwrap()
    }

    #[test]
    fn sum_over_p3() {
        let g = Graph::new(3, &[(1, 2), (2, 3)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let prog = count_aggregate_protocol(&[false, true, true, true]);
        let res = run(&g, &t, &prog, 1, &RunConfig::default()).unwrap();
        assert_eq!(res.states[1].result, Some(3));
    }

    #[test]
    fn max_depth_equals_tree_depth() {
        for (g, root) in [
            (cycle(7), 1u32),
            (Graph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5)]).unwrap(), 2),
        ] {
            let t = build_bfs_tree(&g, root);
            let local: Vec<u32> = (0..=g.node_count()).map(|v| if v == 0 { 0 } else { t.depth_of(v) }).collect();
            let prog = Convergecast { agg: MaxAgg, local };
            let res = run(&g, &t, &prog, root, &RunConfig::default()).unwrap();
            assert_eq!(res.states[root as usize].result, Some(t.tree_depth));
        }
    }

    #[test]
    fn exactly_two_messages_per_tree_edge() {
        let g = cycle(8);
        let t = build_bfs_tree(&g, 1);
        let prog = count_aggregate_protocol(&vec![true; 9]);
        let res = run(&g, &t, &prog, 1, &RunConfig::default()).unwrap();
        assert_eq!(res.states[1].result, Some(8));
        for ((u, v), st) in &res.outcome.stats.links {
            let pu = g.neighbors(*u).iter().position(|x| x == v).unwrap();
            let is_tree = matches!(
                t.port_state[*u as usize][pu],
                crate::bfs::PortState::Parent | crate::bfs::PortState::Child
            );
            assert!(is_tree, "non-tree link carried a message");
            assert_eq!(st.count, 1, "one message per direction per tree edge");
        }
    }

    #[test]
    fn capped_multiset_saturates() {
        let agg = CappedMultisetAgg { cap: 2, key_bits: 8 };
        let one = BTreeMap::from([(vec![7u8], 1u64)]);
        let mut acc = agg.identity();
        for _ in 0..5 {
            acc = agg.combine(&acc, &one);
        }
        assert_eq!(acc[&vec![7u8]], 2);
        // cap idempotence: combining a saturated value with more stays put
        let again = agg.combine(&acc, &one);
        assert_eq!(again, acc);
    }

    #[test]
    fn capped_multiset_assoc_comm() {
        let agg = CappedMultisetAgg { cap: 3, key_bits: 8 };
        let a = BTreeMap::from([(vec![1u8], 2u64)]);
        let b = BTreeMap::from([(vec![1u8], 2u64), (vec![2u8], 1u64)]);
        let c = BTreeMap::from([(vec![2u8], 3u64)]);
        let ab_c = agg.combine(&agg.combine(&a, &b), &c);
        let a_bc = agg.combine(&a, &agg.combine(&b, &c));
        assert_eq!(ab_c, a_bc);
        assert_eq!(agg.combine(&a, &b), agg.combine(&b, &a));
    }

    #[test]
    fn scatter_c8_accepts_two() {
        // C8, all nodes P, r=1 (pairwise distance > 2), s=2
        let g = cycle(8);
        let t = build_bfs_tree(&g, 1);
        let prog = ScatterSelect {
            r: 1,
            s: 2,
            p_flags: vec![true; 9],
        };
        let res = run(&g, &t, &prog, 1, &RunConfig::default()).unwrap();
        assert_eq!(res.outcome.decision, Some(true));
        let w = selected_witnesses(&res.states[1]);
        assert_eq!(w.len(), 2);
        for i in 0..w.len() {
            for j in (i + 1)..w.len() {
                assert!(g.distance(w[i], w[j]).unwrap() > 2);
            }
        }
    }

    #[test]
    fn scatter_single_p_exhausts() {
        let g = cycle(8);
        let t = build_bfs_tree(&g, 1);
        let mut p = vec![false; 9];
        p[4] = true;
        let prog = ScatterSelect { r: 1, s: 2, p_flags: p };
        let res = run(&g, &t, &prog, 1, &RunConfig::default()).unwrap();
        assert_eq!(res.outcome.decision, Some(false));
        let w = selected_witnesses(&res.states[1]);
        assert_eq!(w, vec![4]);
        // I covers N_4r(4) = N_4(4): all of C8 within distance 4
        for v in g.nodes() {
            let expect = g.distance(4, v).unwrap() <= 4;
            assert_eq!(res.states[v as usize].flags.i, expect, "node {v}");
        }
    }

    #[test]
    fn scatter_no_p_rejects() {
        let g = cycle(6);
        let t = build_bfs_tree(&g, 1);
        let prog = ScatterSelect {
            r: 1,
            s: 1,
            p_flags: vec![false; 7],
        };
        let res = run(&g, &t, &prog, 1, &RunConfig::default()).unwrap();
        assert_eq!(res.outcome.decision, Some(false));
        assert!(selected_witnesses(&res.states[1]).is_empty());
    }

    #[test]
    fn scatter_q_marks_are_exact_balls() {
        let g = cycle(12);
        let t = build_bfs_tree(&g, 1);
        let prog = ScatterSelect {
            r: 2,
            s: 1,
            p_flags: vec![true; 13],
        };
        let res = run(&g, &t, &prog, 1, &RunConfig::default()).unwrap();
        assert_eq!(res.outcome.decision, Some(true));
        let w = selected_witnesses(&res.states[1]);
        assert_eq!(w, vec![1], "smallest-id P node selected first");
        for v in g.nodes() {
            let expect = g.distance(1, v).unwrap() <= 4; // 2r = 4
            assert_eq!(res.states[v as usize].flags.q, expect, "node {v}");
        }
    }

    #[test]
    fn scatter_counts_schedule_independent() {
        let g = cycle(10);
        let t = build_bfs_tree(&g, 1);
        let mut p = vec![true; 11];
        p[3] = false;
        let mut base: Option<crate::netsim::LinkStats> = None;
        for seed in 0..10 {
            let prog = ScatterSelect { r: 1, s: 3, p_flags: p.clone() };
            let cfg = RunConfig { seed, ..Default::default() };
            let res = run(&g, &t, &prog, 1, &cfg).unwrap();
            match &base {
                None => base = Some(res.outcome.stats.clone()),
                Some(b) => assert_eq!(*b, res.outcome.stats, "seed {seed}"),
            }
        }
    }
}
