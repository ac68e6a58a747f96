//! Planar pipeline driver: phase sequencing, the outer band walker (phase
//! IV), the component sequencer (phase V), runtime cross-checks against the
//! centralized oracles, and decomposition export.

use std::collections::BTreeMap;

use crate::bfs::{BfsTree, PortState};
use crate::error::ProtoError;
use crate::graph::{Graph, NodeId};
use crate::netsim::{self, LinkStats, NodeView, Outbox, Payload, Protocol, RunConfig};
use crate::proto::bounded::PipelineRun;
use crate::proto::common::{count_aggregate_protocol, selected_witnesses, ScatterSelect};
use crate::proto::planar::engine::{
    scope_ports, AncList, Engine, EngineCfg, EngineEvent, EngMsg, EvalTask, Slot,
};
use crate::proto::planar::{
    cover_interval, cover_oracle, kernel_oracle, CoverProtocol, IdxInterval, KernelProtocol,
};
use crate::query::{BasicLocalSentence, CountCmp, Psi, QueryExpr};
use crate::td::{check_tree_decomposition_over, OrderedTreeDecomposition, TdReport};

// ---------------------------------------------------------------------------
// Phase IV protocol: band triggers over a BFS post-order walk
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum P4Msg {
    OuterT,
    OuterBack,
    Eng(EngMsg),
}

impl Payload for P4Msg {
    fn kind(&self) -> &'static str {
        match self {
            P4Msg::OuterT => "POSTTRAVERSE",
            P4Msg::OuterBack => "BACKTRACK",
            P4Msg::Eng(m) => m.kind(),
        }
    }
    fn size_bits(&self, idb: u64) -> u64 {
        match self {
            P4Msg::OuterT | P4Msg::OuterBack => 4,
            P4Msg::Eng(m) => m.size_bits(idb),
        }
    }
}

pub struct Phase4 {
    pub r: u32,
    pub psi: Psi,
    pub tree_depth: u32,
    /// Full BFS ancestor chain (self first) per node.
    pub chains: Vec<Vec<NodeId>>,
    pub arity: usize,
    pub cfg: EngineCfg,
}

#[derive(Clone, Default)]
pub struct P4State {
    pub slots: BTreeMap<u32, Slot>,
    outer_children_pending: Vec<usize>,
    active_trigger: Option<u32>,
    pub outer_done: bool,
}

impl Phase4 {
    fn band_member(&self, depth: u32, band: u32) -> bool {
        cover_interval(depth, self.tree_depth, self.r).contains(band)
    }

    fn neighbor_depth(&self, node: &NodeView, p: usize) -> u32 {
        match node.port_states[p] {
            PortState::Parent | PortState::Upward => node.depth - 1,
            PortState::Child | PortState::Downward => node.depth + 1,
            PortState::Horizon => node.depth,
        }
    }

    fn slot<'s>(&self, st: &'s mut P4State, node: &NodeView, band: u32) -> &'s mut Slot {
        if !st.slots.contains_key(&band) {
            let member = self.band_member(node.depth, band);
            let ldepth = node.depth - band;
            let take = (ldepth + 1) as usize;
            let anc: AncList = self.chains[node.id as usize]
                .iter()
                .take(take)
                .map(|&v| (v, false))
                .collect();
            let member_fn = |nb: NodeId| {
                // neighbor depth is derivable from port states; find the port
                let p = node.neighbors.iter().position(|&u| u == nb).unwrap();
                self.band_member(self.neighbor_depth(node, p), band)
            };
            let sp = scope_ports(true, self.r, node, member, ldepth, &member_fn);
            let tree_port: Vec<bool> = node
                .port_states
                .iter()
                .map(|s| matches!(s, PortState::Parent | PortState::Child))
                .collect();
            st.slots
                .insert(band, Slot::new(member, ldepth, anc, sp, tree_port));
        }
        st.slots.get_mut(&band).expect("just inserted")
    }

    fn engine(&self, band: u32) -> Engine<'_> {
        Engine {
            cfg: &self.cfg,
            key: band,
        }
    }

    fn outer_visit(
        &self,
        node: &NodeView,
        st: &mut P4State,
        out: &mut Outbox<P4Msg>,
    ) -> Result<(), String> {
        // descend into remaining children while the subtree can root bands
        if node.depth + 2 * self.r < self.tree_depth {
            if let Some(p) = st.outer_children_pending.pop() {
                out.send(p, P4Msg::OuterT);
                return Ok(());
            }
        }
        // all children processed (or none): handle the own band, then back
        let band = node.depth;
        if !st.slots.contains_key(&band) && self.band_member(node.depth, band) {
            st.active_trigger = Some(band);
            let slot = self.slot(st, node, band);
            let eng = self.engine(band);
            let mut sends = crate::proto::planar::engine::Sends::new();
            eng.start_dfs(node, slot, &mut sends)?;
            return self.drain(node, st, sends, out);
        }
        self.outer_finish(node, st, out)
    }

    fn outer_finish(
        &self,
        node: &NodeView,
        st: &mut P4State,
        out: &mut Outbox<P4Msg>,
    ) -> Result<(), String> {
        st.active_trigger = None;
        if node.is_requester {
            st.outer_done = true;
        } else {
            let parent = node.parent_port.ok_or("outer walk at orphan")?;
            out.send(parent, P4Msg::OuterBack);
        }
        Ok(())
    }

    fn drain(
        &self,
        node: &NodeView,
        st: &mut P4State,
        sends: crate::proto::planar::engine::Sends,
        out: &mut Outbox<P4Msg>,
    ) -> Result<(), String> {
        for (p, m) in sends.msgs {
            out.send(p, P4Msg::Eng(m));
        }
        for ev in sends.events {
            match ev {
                EngineEvent::ScopeDone { key } => {
                    if st.active_trigger == Some(key) {
                        self.outer_finish(node, st, out)?;
                    }
                }
                EngineEvent::Count { .. } => {}
            }
        }
        Ok(())
    }

    fn dispatch(
        &self,
        node: &NodeView,
        st: &mut P4State,
        port: usize,
        msg: EngMsg,
        out: &mut Outbox<P4Msg>,
    ) -> Result<(), String> {
        let key = eng_key(&msg);
        let slot = self.slot(st, node, key);
        let eng = self.engine(key);
        let mut sends = crate::proto::planar::engine::Sends::new();
        dispatch_engine(&eng, node, slot, port, msg, &mut sends)?;
        self.drain(node, st, sends, out)
    }
}

pub fn eng_key(m: &EngMsg) -> u32 {
    match m {
        EngMsg::DfsFwd { key, .. }
        | EngMsg::DfsBack { key, .. }
        | EngMsg::DfsRestart { key, .. }
        | EngMsg::Inform { key, .. }
        | EngMsg::InformAck { key }
        | EngMsg::BlockPort { key, .. }
        | EngMsg::BlockPortAck { key }
        | EngMsg::BridgeQ { key, .. }
        | EngMsg::BridgeA { key, .. }
        | EngMsg::PostT { key, .. }
        | EngMsg::PostBack { key, .. }
        | EngMsg::Walk { key, .. }
        | EngMsg::WalkAck { key, .. }
        | EngMsg::WalkOver { key, .. }
        | EngMsg::CrossNote { key, .. }
        | EngMsg::Flush { key }
        | EngMsg::FlushAck { key }
        | EngMsg::BagMsg { key, .. }
        | EngMsg::Relay { key, .. } => *key,
    }
}

pub fn dispatch_engine(
    eng: &Engine,
    node: &NodeView,
    slot: &mut Slot,
    port: usize,
    msg: EngMsg,
    sends: &mut crate::proto::planar::engine::Sends,
) -> Result<(), String> {
    match msg {
        EngMsg::DfsFwd {
            root,
            next_block,
            parent_depth,
            ..
        } => eng.on_dfs_fwd(node, slot, port, root, next_block, parent_depth, sends),
        EngMsg::DfsBack {
            next_block,
            child_low,
            ..
        } => eng.on_dfs_back(node, slot, port, next_block, child_low, sends),
        EngMsg::DfsRestart {
            next_block,
            anc_depth,
            ..
        } => eng.on_dfs_restart(node, slot, port, next_block, anc_depth, sends),
        EngMsg::Inform { block, special, .. } => {
            eng.on_inform(node, slot, port, block, special, sends)
        }
        EngMsg::InformAck { .. } => eng.on_inform_ack(node, slot, sends),
        EngMsg::BlockPort { block, special, .. } => {
            eng.on_block_port(node, slot, port, block, special, sends)
        }
        EngMsg::BlockPortAck { .. } => eng.on_inform_ack(node, slot, sends),
        EngMsg::BridgeQ { block, bag, anc, .. } => {
            eng.on_bridge_q(node, slot, port, block, bag, anc, sends)
        }
        EngMsg::BridgeA {
            bag, child_bag, anc, ..
        } => eng.on_bridge_a(node, slot, port, bag, child_bag, anc, sends),
        EngMsg::PostT { pass, .. } => {
            if pass > slot.walk_pass {
                slot.walk_pass = pass;
                for f in slot.post_sent.iter_mut() {
                    *f = false;
                }
            }
            post_visit_entry(eng, node, slot, sends)
        }
        EngMsg::PostBack { .. } => post_visit_entry(eng, node, slot, sends),
        EngMsg::Walk {
            block,
            special,
            corner,
            corner_list,
            prev_bag,
            start,
            ..
        } => eng.on_walk(
            node, slot, port, block, special, corner, corner_list, prev_bag, start, sends,
        ),
        EngMsg::WalkAck {
            to_bag,
            my_list,
            new_bag,
            ..
        } => eng.on_walk_ack(node, slot, port, to_bag, my_list, new_bag, sends),
        EngMsg::WalkOver {
            block,
            closing_flank,
            ..
        } => eng.on_walk_over(node, slot, port, block, closing_flank, sends),
        EngMsg::CrossNote { to_bag, nbr, .. } => eng.on_cross_note(node, slot, to_bag, nbr),
        EngMsg::Flush { .. } => eng.on_flush(node, slot, port, sends),
        EngMsg::FlushAck { .. } => eng.on_flush_ack(node, slot, sends),
        EngMsg::BagMsg { to, body, .. } => eng.on_bag_msg(node, slot, to, body, sends),
        EngMsg::Relay {
            target,
            rest,
            inner,
            ..
        } => {
            if target == node.id && rest.is_empty() {
                dispatch_engine(eng, node, slot, port, *inner, sends)
            } else {
                eng.on_relay(node, target, rest, *inner, sends)
            }
        }
    }
}

/// PostT/PostBack entry shared by phases: re-enters the walk scheduler.
fn post_visit_entry(
    eng: &Engine,
    node: &NodeView,
    slot: &mut Slot,
    sends: &mut crate::proto::planar::engine::Sends,
) -> Result<(), String> {
    // continue post-order: descend to remaining children, else walk arcs
    for p in 0..node.degree() {
        if matches!(
            slot.dfs_state[p],
            crate::proto::planar::engine::DfsPort::Closed
                | crate::proto::planar::engine::DfsPort::Backtracked
                | crate::proto::planar::engine::DfsPort::ChildBridge
        ) && !slot.post_sent[p]
        {
            slot.post_sent[p] = true;
            sends
                .msgs
                .push((p, EngMsg::PostT { key: eng.key, pass: slot.walk_pass }));
            return Ok(());
        }
    }
    eng_next_walk(eng, node, slot, sends)
}

// small shims: the walk scheduler lives inside the engine, re-exposed here
fn eng_next_walk(
    eng: &Engine,
    node: &NodeView,
    slot: &mut Slot,
    sends: &mut crate::proto::planar::engine::Sends,
) -> Result<(), String> {
    eng.resume_walks(node, slot, sends)
}

impl Protocol for Phase4 {
    type State = P4State;
    type Msg = P4Msg;

    fn init(&self, node: &NodeView) -> P4State {
        P4State {
            slots: BTreeMap::new(),
            outer_children_pending: node.child_ports().into_iter().rev().collect(),
            active_trigger: None,
            outer_done: false,
        }
    }

    fn start(&self, node: &NodeView, st: &mut P4State, out: &mut Outbox<P4Msg>) {
        if let Err(e) = self.outer_visit(node, st, out) {
            panic!("phase IV start failed: {e}");
        }
    }

    fn handle(
        &self,
        node: &NodeView,
        st: &mut P4State,
        port: usize,
        msg: P4Msg,
        out: &mut Outbox<P4Msg>,
    ) -> Result<(), String> {
        match msg {
            P4Msg::OuterT => {
                st.outer_children_pending = node.child_ports().into_iter().rev().collect();
                self.outer_visit(node, st, out)
            }
            P4Msg::OuterBack => self.outer_visit(node, st, out),
            P4Msg::Eng(m) => self.dispatch(node, st, port, m, out),
        }
    }

    fn requester_final(&self, st: &P4State) -> Option<bool> {
        st.outer_done.then_some(true)
    }
}

// ---------------------------------------------------------------------------
// Phase V protocol: component stabilization, then per-component engines
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum P5Msg {
    Start,
    Hello { i: bool, p: bool },
    Round { k: u32 },
    Exchange { k: u32, lead: NodeId, dist: u32, parent: NodeId },
    RoundDone { changed: bool, maxd: u32 },
    ListsGo { arity: u32 },
    ListReq,
    ListGive { list: AncList },
    ListDone,
    PickGo,
    PickVal { leader: Option<NodeId> },
    EngineGo { leader: NodeId },
    CompDone { count: u32 },
    Eng(EngMsg),
}

impl Payload for P5Msg {
    fn kind(&self) -> &'static str {
        match self {
            P5Msg::Start => "P5START",
            P5Msg::Hello { .. } => "P5HELLO",
            P5Msg::Round { .. } => "P5ROUND",
            P5Msg::Exchange { .. } => "P5EXCH",
            P5Msg::RoundDone { .. } => "P5RDONE",
            P5Msg::ListsGo { .. } => "P5LISTSGO",
            P5Msg::ListReq => "P5LISTREQ",
            P5Msg::ListGive { .. } => "P5LIST",
            P5Msg::ListDone => "P5LISTDONE",
            P5Msg::PickGo => "P5PICKGO",
            P5Msg::PickVal { .. } => "P5PICKVAL",
            P5Msg::EngineGo { .. } => "P5ENGINEGO",
            P5Msg::CompDone { .. } => "P5COMPDONE",
            P5Msg::Eng(m) => m.kind(),
        }
    }
    fn size_bits(&self, idb: u64) -> u64 {
        match self {
            P5Msg::Start | P5Msg::ListReq | P5Msg::ListDone | P5Msg::PickGo => 4,
            P5Msg::Hello { .. } => 6,
            P5Msg::Round { .. } => 4 + 8,
            P5Msg::Exchange { .. } => 4 + 8 + idb * 2 + 8 + idb,
            P5Msg::RoundDone { .. } => 4 + 1 + 8,
            P5Msg::ListsGo { .. } => 4 + 16,
            P5Msg::ListGive { list } => 4 + 8 + list.len() as u64 * (idb + 1),
            P5Msg::PickVal { .. } => 4 + idb + 1,
            P5Msg::EngineGo { .. } => 4 + idb,
            P5Msg::CompDone { .. } => 4 + 8,
            P5Msg::Eng(m) => m.size_bits(idb),
        }
    }
}

pub struct Phase5 {
    pub r: u32,
    pub s: u32,
    pub i_flags: Vec<bool>,
    pub p_flags: Vec<bool>,
    pub cfg: EngineCfg,
}

#[derive(Clone, Default)]
pub struct P5State {
    started: bool,
    pub i: bool,
    p: bool,
    i_ports: Vec<usize>,
    nb_parent: BTreeMap<usize, NodeId>,
    hello_pending: usize,
    // stabilization
    pub lead: NodeId,
    pub dist: u32,
    pub parent_id: NodeId,
    cur_round: u32,
    round_recv: BTreeMap<u32, Vec<(usize, NodeId, u32, NodeId)>>,
    kids_pending: usize,
    own_pending: bool,
    changed: bool,
    maxd: u32,
    reported_round: u32,
    // lists
    pub list: Option<AncList>,
    list_kids: Vec<usize>,
    lists_arity: u32,
    list_done_kids: usize,
    list_done_sent: bool,
    // component sequencing at the requester
    pick_pending: usize,
    pick_acc: Option<NodeId>,
    processed: bool,
    comp_counts: Vec<u32>,
    // engine slot (single active component at a time; keyed anyway)
    pub slots: BTreeMap<u32, Slot>,
    pub total: Option<u32>,
    pub done: bool,
}

impl Phase5 {
    fn engine(&self, key: u32) -> Engine<'_> {
        Engine { cfg: &self.cfg, key }
    }

    fn slot<'s>(&self, st: &'s mut P5State, node: &NodeView, key: u32) -> &'s mut Slot {
        if !st.slots.contains_key(&key) {
            let member = st.i;
            let ldepth = st.dist;
            let anc = st.list.clone().unwrap_or_default();
            let sp: Vec<bool> = (0..node.degree())
                .map(|p| member && st.i_ports.contains(&p))
                .collect();
            let tree_port: Vec<bool> = (0..node.degree())
                .map(|p| {
                    let nb = node.neighbor(p);
                    (st.i_ports.contains(&p))
                        && (nb == st.parent_id || st.nb_parent.get(&p) == Some(&node.id))
                })
                .collect();
            st.slots
                .insert(key, Slot::new(member, ldepth, anc, sp, tree_port));
        }
        st.slots.get_mut(&key).expect("just inserted")
    }

    fn begin(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>) {
        if st.started {
            return;
        }
        st.started = true;
        out.send_all(node.child_ports(), P5Msg::Start);
        out.send_all(0..node.degree(), P5Msg::Hello { i: st.i, p: st.p });
    }

    fn maybe_exchange(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>) {
        if st.cur_round == 0 || st.hello_pending > 0 || !st.own_pending {
            return;
        }
        if st.i {
            for &p in &st.i_ports {
                out.send(
                    p,
                    P5Msg::Exchange {
                        k: st.cur_round,
                        lead: st.lead,
                        dist: st.dist,
                        parent: st.parent_id,
                    },
                );
            }
            self.try_round_finish(node, st, out);
        } else {
            st.own_pending = false;
            self.try_round_report(node, st, out);
        }
    }

    fn try_round_finish(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>) {
        if !st.own_pending || !st.i || st.cur_round == 0 || st.hello_pending > 0 {
            return;
        }
        let k = st.cur_round;
        let got = st.round_recv.get(&k).map(|v| v.len()).unwrap_or(0);
        if got != st.i_ports.len() {
            return;
        }
        let mut entries = st.round_recv.remove(&k).unwrap();
        entries.sort_by_key(|(p, lead, dist, _)| (*lead, *dist, node.neighbor(*p)));
        for (p, lead, dist, _their_parent) in &entries {
            let cand = (*lead, dist + 1, node.neighbor(*p));
            if (cand.0, cand.1) < (st.lead, st.dist)
                || ((cand.0, cand.1) == (st.lead, st.dist)
                    && st.parent_id != node.id
                    && cand.2 < st.parent_id)
            {
                st.lead = cand.0;
                st.dist = cand.1;
                st.parent_id = cand.2;
                st.changed = true;
            }
        }
        for (p, _, _, their_parent) in entries {
            st.nb_parent.insert(p, their_parent);
        }
        st.maxd = st.maxd.max(st.dist);
        st.own_pending = false;
        self.try_round_report(node, st, out);
    }

    fn try_round_report(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>) {
        if st.own_pending || st.kids_pending > 0 || st.reported_round == st.cur_round {
            return;
        }
        st.reported_round = st.cur_round;
        if node.is_requester {
            if st.changed {
                self.broadcast_round(node, st, out, st.cur_round + 1);
            } else {
                // stabilized: distribute arity and start the list wave
                let arity = 3 * (st.maxd + 1) + 1;
                st.lists_arity = arity;
                out.send_all(node.child_ports(), P5Msg::ListsGo { arity });
                self.lists_begin(node, st, out);
            }
        } else if let Some(p) = node.parent_port {
            out.send(
                p,
                P5Msg::RoundDone {
                    changed: st.changed,
                    maxd: st.maxd,
                },
            );
        }
    }

    fn broadcast_round(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>, k: u32) {
        st.cur_round = k;
        st.changed = false;
        st.kids_pending = node.child_ports().len();
        st.own_pending = true;
        out.send_all(node.child_ports(), P5Msg::Round { k });
        self.maybe_exchange(node, st, out);
        self.try_round_finish(node, st, out);
    }

    fn lists_begin(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>) {
        st.list_done_kids = 0;
        if st.i {
            if st.lead == node.id {
                st.list = Some(vec![(node.id, st.p)]);
                self.lists_serve(node, st, out);
            } else {
                let pp = node
                    .neighbors
                    .iter()
                    .position(|&u| u == st.parent_id)
                    .expect("parent is a neighbor");
                out.send(pp, P5Msg::ListReq);
            }
        }
        self.lists_try_done(node, st, out);
    }

    fn lists_serve(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>) {
        if st.list.is_none() {
            return;
        }
        let list = st.list.clone().unwrap();
        for p in std::mem::take(&mut st.list_kids) {
            out.send(p, P5Msg::ListGive { list: list.clone() });
        }
        self.lists_try_done(node, st, out);
    }

    fn lists_try_done(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>) {
        if st.list_done_sent {
            return;
        }
        let ready = (!st.i || st.list.is_some())
            && st.list_done_kids == node.child_ports().len()
            && st.lists_arity > 0;
        if !ready {
            return;
        }
        st.list_done_sent = true;
        if node.is_requester {
            // lists everywhere: start picking components
            self.pick_round(node, st, out);
        } else if let Some(p) = node.parent_port {
            out.send(p, P5Msg::ListDone);
        }
    }

    fn pick_round(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>) {
        st.pick_pending = node.child_ports().len();
        st.pick_acc = self.own_pick(node, st);
        out.send_all(node.child_ports(), P5Msg::PickGo);
        if st.pick_pending == 0 {
            self.pick_done(node, st, out);
        }
    }

    fn own_pick(&self, node: &NodeView, st: &P5State) -> Option<NodeId> {
        (st.i && st.lead == node.id && !st.processed).then_some(node.id)
    }

    fn pick_done(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>) {
        match st.pick_acc {
            Some(leader) => {
                out.send_all(node.child_ports(), P5Msg::EngineGo { leader });
                if leader == node.id {
                    st.processed = true;
                    let key = leader;
                    let slot = self.slot(st, node, key);
                    let eng = self.engine(key);
                    let mut sends = crate::proto::planar::engine::Sends::new();
                    if let Err(e) = eng.start_dfs(node, slot, &mut sends) {
                        panic!("phase V engine start: {e}");
                    }
                    let _ = self.drain(node, st, sends, out);
                }
            }
            None => {
                // all components processed
                let total: u32 = st.comp_counts.iter().sum();
                st.total = Some(total);
                st.done = true;
            }
        }
    }

    fn drain(
        &self,
        node: &NodeView,
        st: &mut P5State,
        sends: crate::proto::planar::engine::Sends,
        out: &mut Outbox<P5Msg>,
    ) -> Result<(), String> {
        for (p, m) in sends.msgs {
            out.send(p, P5Msg::Eng(m));
        }
        for ev in sends.events {
            match ev {
                EngineEvent::Count { count, .. } => {
                    // report to the requester along the BFS tree
                    if node.is_requester {
                        st.comp_counts.push(count);
                        self.pick_round(node, st, out);
                    } else {
                        let p = node.parent_port.ok_or("count at orphan")?;
                        out.send(p, P5Msg::CompDone { count });
                    }
                }
                EngineEvent::ScopeDone { .. } => {}
            }
        }
        Ok(())
    }
}

impl Protocol for Phase5 {
    type State = P5State;
    type Msg = P5Msg;

    fn init(&self, node: &NodeView) -> P5State {
        P5State {
            i: self.i_flags[node.id as usize],
            p: self.p_flags[node.id as usize],
            hello_pending: node.degree(),
            lead: node.id,
            dist: 0,
            parent_id: node.id,
            ..Default::default()
        }
    }

    fn start(&self, node: &NodeView, st: &mut P5State, out: &mut Outbox<P5Msg>) {
        self.begin(node, st, out);
    }

    fn handle(
        &self,
        node: &NodeView,
        st: &mut P5State,
        port: usize,
        msg: P5Msg,
        out: &mut Outbox<P5Msg>,
    ) -> Result<(), String> {
        match msg {
            P5Msg::Start => {
                self.begin(node, st, out);
            }
            P5Msg::Hello { i, p } => {
                if i {
                    st.i_ports.push(port);
                    st.i_ports.sort_unstable();
                }
                let _ = p;
                st.hello_pending -= 1;
                if st.hello_pending == 0 {
                    if node.is_requester {
                        self.broadcast_round(node, st, out, 1);
                    } else {
                        self.maybe_exchange(node, st, out);
                        self.try_round_finish(node, st, out);
                    }
                }
            }
            P5Msg::Round { k } => {
                st.cur_round = k;
                st.changed = false;
                st.kids_pending = node.child_ports().len();
                st.own_pending = true;
                out.send_all(node.child_ports(), P5Msg::Round { k });
                self.maybe_exchange(node, st, out);
                self.try_round_finish(node, st, out);
            }
            P5Msg::Exchange { k, lead, dist, parent } => {
                st.round_recv
                    .entry(k)
                    .or_default()
                    .push((port, lead, dist, parent));
                self.try_round_finish(node, st, out);
            }
            P5Msg::RoundDone { changed, maxd } => {
                st.changed |= changed;
                st.maxd = st.maxd.max(maxd);
                st.kids_pending -= 1;
                self.try_round_report(node, st, out);
            }
            P5Msg::ListsGo { arity } => {
                st.lists_arity = arity;
                out.send_all(node.child_ports(), P5Msg::ListsGo { arity });
                self.lists_begin(node, st, out);
            }
            P5Msg::ListReq => {
                st.list_kids.push(port);
                self.lists_serve(node, st, out);
            }
            P5Msg::ListGive { list } => {
                let mut mine: AncList = vec![(node.id, st.p)];
                mine.extend(list);
                st.list = Some(mine);
                self.lists_serve(node, st, out);
                self.lists_try_done(node, st, out);
            }
            P5Msg::ListDone => {
                st.list_done_kids += 1;
                self.lists_try_done(node, st, out);
            }
            P5Msg::PickGo => {
                st.pick_pending = node.child_ports().len();
                st.pick_acc = self.own_pick(node, st);
                out.send_all(node.child_ports(), P5Msg::PickGo);
                if st.pick_pending == 0 {
                    let p = node.parent_port.ok_or("pick at orphan")?;
                    out.send(p, P5Msg::PickVal { leader: st.pick_acc });
                }
            }
            P5Msg::PickVal { leader } => {
                st.pick_acc = match (st.pick_acc, leader) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                };
                st.pick_pending -= 1;
                if st.pick_pending == 0 {
                    if node.is_requester {
                        self.pick_done(node, st, out);
                    } else {
                        let p = node.parent_port.ok_or("pick at orphan")?;
                        out.send(p, P5Msg::PickVal { leader: st.pick_acc });
                    }
                }
            }
            P5Msg::EngineGo { leader } => {
                out.send_all(node.child_ports(), P5Msg::EngineGo { leader });
                if leader == node.id {
                    st.processed = true;
                    let key = leader;
                    let slot = self.slot(st, node, key);
                    let eng = self.engine(key);
                    let mut sends = crate::proto::planar::engine::Sends::new();
                    eng.start_dfs(node, slot, &mut sends)?;
                    self.drain(node, st, sends, out)?;
                }
            }
            P5Msg::CompDone { count } => {
                if node.is_requester {
                    st.comp_counts.push(count);
                    self.pick_round(node, st, out);
                } else {
                    let p = node.parent_port.ok_or("compdone at orphan")?;
                    out.send(p, P5Msg::CompDone { count });
                }
            }
            P5Msg::Eng(m) => {
                let key = eng_key(&m);
                let slot = self.slot(st, node, key);
                let eng = self.engine(key);
                let mut sends = crate::proto::planar::engine::Sends::new();
                dispatch_engine(&eng, node, slot, port, m, &mut sends)?;
                self.drain(node, st, sends, out)?;
            }
        }
        Ok(())
    }

    fn requester_final(&self, st: &P5State) -> Option<bool> {
        st.done.then(|| st.total.unwrap_or(0) >= self.s)
    }
}

// ---------------------------------------------------------------------------
// Centralized planar P oracle
// ---------------------------------------------------------------------------

/// Recomputes the P set centrally, band by band, per the phase definition:
/// P_i = { v : i in D(v), psi holds for v within v's component of the band }.
pub fn planar_p_oracle(g: &Graph, bfs: &BfsTree, r: u32, psi: &Psi) -> Vec<bool> {
    let kernels = kernel_oracle(g, bfs, r);
    let mut p = vec![false; g.node_count() as usize + 1];
    let max_band = if bfs.tree_depth <= 2 * r {
        0
    } else {
        bfs.tree_depth - 2 * r
    };
    for band in 0..=max_band {
        let members: Vec<NodeId> = g
            .nodes()
            .filter(|&v| cover_interval(bfs.depth_of(v), bfs.tree_depth, r).contains(band))
            .collect();
        if members.is_empty() {
            continue;
        }
        let sub = g.induced(&members);
        for (local, &v) in members.iter().enumerate() {
            if p[v as usize] || !kernels[v as usize].contains(band) {
                continue;
            }
            // the ball within the band component
            let depths = sub.bfs_depths(local);
            let ball_nodes: Vec<usize> =
                (0..sub.len()).filter(|&i| depths[i] <= r).collect();
            let orig: Vec<NodeId> = ball_nodes.iter().map(|&i| sub.original[i]).collect();
            let inner = g.induced(&orig);
            let root = orig.iter().position(|&x| x == v).unwrap();
            let ball = crate::graph::RootedBall {
                center: v,
                radius: r,
                root,
                sub: inner,
            };
            if psi.eval_on_ball(&ball, &|_, _| false) {
                p[v as usize] = true;
            }
        }
    }
    p
}

// ---------------------------------------------------------------------------
// Pipeline driver
// ---------------------------------------------------------------------------

pub struct PlanarPipeline<'g> {
    pub g: &'g Graph,
    pub bfs: &'g BfsTree,
    pub requester: NodeId,
    pub seed: u64,
    pub record_transcript: bool,
    /// When set, every constructed decomposition is checked and width-bounded.
    pub verify_decompositions: bool,
    pub dumped_tds: std::cell::RefCell<Vec<(String, OrderedTreeDecomposition, TdReport)>>,
}

impl<'g> PlanarPipeline<'g> {
    pub fn new(g: &'g Graph, bfs: &'g BfsTree, requester: NodeId, seed: u64) -> Self {
        PlanarPipeline {
            g,
            bfs,
            requester,
            seed,
            record_transcript: false,
            verify_decompositions: true,
            dumped_tds: std::cell::RefCell::new(Vec::new()),
        }
    }

    fn cfg(&self, phase: u64) -> RunConfig {
        RunConfig {
            seed: self.seed.wrapping_add(phase),
            record_transcript: self.record_transcript,
            ..Default::default()
        }
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

    fn absorb(
        &self,
        name: &str,
        run: &mut PipelineRun,
        outcome: &crate::netsim::RunOutcome,
    ) {
        run.stats.merge(&outcome.stats);
        run.phases.push((name.to_string(), outcome.stats.clone()));
        if let (Some(t), Some(nt)) = (run.transcript.as_mut(), outcome.transcript.as_ref()) {
            t.push_str(&format!("phase {name}\n"));
            t.push_str(nt);
        }
    }

    /// Phases II and III: returns (treeDepth, covers, kernels) with the
    /// kernel values verified against the brute-force definition.
    pub fn cover_and_kernel(
        &self,
        r: u32,
        run: &mut PipelineRun,
    ) -> Result<(u32, Vec<IdxInterval>, Vec<IdxInterval>), ProtoError> {
        let res = netsim::run(
            self.g,
            self.bfs,
            &CoverProtocol { r },
            self.requester,
            &self.cfg(run.phases.len() as u64),
        )
        .map_err(|e| ProtoError::Defect(e.to_string()))?;
        self.absorb("cover", run, &res.outcome);
        let mut covers = vec![IdxInterval::empty()];
        for v in self.g.nodes() {
            covers.push(res.states[v as usize].cover);
        }
        let oracle_cov = cover_oracle(self.bfs, r);
        for v in self.g.nodes() {
            if covers[v as usize] != oracle_cov[v as usize] {
                return Err(ProtoError::Defect(format!(
                    "cover interval mismatch at {v}"
                )));
            }
        }
        let tree_depth = res.states[self.requester as usize].tree_depth;

        let kernels = if r == 0 {
            covers.clone()
        } else {
            let prog = KernelProtocol {
                r,
                cover: covers.clone(),
            };
            let mut obs = crate::proto::planar::kernel_index_observer(self.g);
            let res = netsim::run_observed(
                self.g,
                self.bfs,
                &prog,
                self.requester,
                &self.cfg(run.phases.len() as u64),
                &mut obs,
            )
            .map_err(|e| ProtoError::Defect(e.to_string()))?;
            self.absorb("kernel", run, &res.outcome);
            let mut kernels = vec![IdxInterval::empty()];
            for v in self.g.nodes() {
                kernels.push(res.states[v as usize].d);
            }
            kernels
        };
        // Lemma-level cross-check: the interval must equal the brute force
        let oracle = kernel_oracle(self.g, self.bfs, r);
        for v in self.g.nodes() {
            if kernels[v as usize] != oracle[v as usize] {
                return Err(ProtoError::Defect(format!(
                    "kernel interval mismatch at {v}: {:?} vs {:?}",
                    kernels[v as usize], oracle[v as usize]
                )));
            }
        }
        Ok((tree_depth, covers, kernels))
    }

    /// Phase IV: distributed per-band evaluation; returns P flags.
    pub fn phase4(
        &self,
        r: u32,
        psi: &Psi,
        run: &mut PipelineRun,
    ) -> Result<Vec<bool>, ProtoError> {
        if r == 0 {
            // radius zero reads nothing but the node itself
            let mut p = vec![false; self.g.node_count() as usize + 1];
            for v in self.g.nodes() {
                let ball = self.g.k_ball(v, 0).map_err(|e| ProtoError::Defect(e.to_string()))?;
                p[v as usize] = psi.eval_on_ball(&ball, &|_, _| false);
            }
            return Ok(p);
        }
        let (tree_depth, _covers, kernels) = self.cover_and_kernel(r, run)?;
        let chains: Vec<Vec<NodeId>> = std::iter::once(Vec::new())
            .chain(self.g.nodes().map(|v| self.bfs.ancestors_to_depth(v, 0)))
            .collect();
        let arity = 3 * (2 * r as usize + 2) + 1;
        let prog = Phase4 {
            r,
            psi: psi.clone(),
            tree_depth,
            chains,
            arity,
            cfg: EngineCfg {
                r,
                arity,
                task: EvalTask::PsiBits { psi: psi.clone() },
                band_mode: true,
            },
        };
        let res = netsim::run(
            self.g,
            self.bfs,
            &prog,
            self.requester,
            &self.cfg(run.phases.len() as u64),
        )
        .map_err(|e| ProtoError::Defect(e.to_string()))?;
        self.absorb("bands", run, &res.outcome);

        if self.verify_decompositions {
            self.check_band_decompositions(r, tree_depth, &res.states, arity, run)?;
        }

        // P flag: some band in D(v) whose component evaluation succeeded
        let mut p = vec![false; self.g.node_count() as usize + 1];
        for v in self.g.nodes() {
            let st = &res.states[v as usize];
            for (&band, slot) in &st.slots {
                if kernels[v as usize].contains(band) && slot.psi_bit == Some(true) {
                    p[v as usize] = true;
                }
            }
        }
        // cross-check against the centralized band oracle
        let oracle = planar_p_oracle(self.g, self.bfs, r, psi);
        for v in self.g.nodes() {
            if p[v as usize] != oracle[v as usize] {
                return Err(ProtoError::Defect(format!(
                    "P flag mismatch at {v}: distributed {} vs oracle {}",
                    p[v as usize], oracle[v as usize]
                )));
            }
        }
        Ok(p)
    }

    fn check_band_decompositions(
        &self,
        r: u32,
        tree_depth: u32,
        states: &[P4State],
        arity: usize,
        run: &mut PipelineRun,
    ) -> Result<(), ProtoError> {
        let max_band = if tree_depth <= 2 * r { 0 } else { tree_depth - 2 * r };
        for band in 0..=max_band {
            let members: Vec<NodeId> = self
                .g
                .nodes()
                .filter(|&v| {
                    cover_interval(self.bfs.depth_of(v), tree_depth, r).contains(band)
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let sub = self.g.induced(&members);
            // per component with a boundary node, assemble and check
            let mut seen = vec![false; sub.len()];
            for start in 0..sub.len() {
                if seen[start] {
                    continue;
                }
                let mut comp = vec![start];
                seen[start] = true;
                let mut stack = vec![start];
                while let Some(u) = stack.pop() {
                    for &w in &sub.adj[u] {
                        if !seen[w] {
                            seen[w] = true;
                            comp.push(w);
                            stack.push(w);
                        }
                    }
                }
                let ids: Vec<NodeId> = comp.iter().map(|&i| sub.original[i]).collect();
                let has_boundary = ids
                    .iter()
                    .any(|&v| self.bfs.depth_of(v) == band);
                if !has_boundary {
                    continue; // never triggered; covered by a later band
                }
                // unique boundary block: every boundary node's slot agrees
                let mut specials = std::collections::BTreeSet::new();
                for &v in &ids {
                    if self.bfs.depth_of(v) == band {
                        let slot = states[v as usize]
                            .slots
                            .get(&band)
                            .ok_or_else(|| {
                                ProtoError::Defect(format!(
                                    "boundary node {v} untouched by band {band}"
                                ))
                            })?;
                        specials.insert(slot.special_block);
                    }
                }
                if specials.len() != 1 || specials.contains(&None) {
                    return Err(ProtoError::Defect(format!(
                        "band {band}: boundary nodes disagree on the boundary block"
                    )));
                }
                let (td, report) =
                    assemble_component_td(states, &ids, band, arity, |st, key| {
                        st.slots.get(&key)
                    });
                let vset: Vec<NodeId> = ids.clone();
                let eset: Vec<(NodeId, NodeId)> = self
                    .g
                    .edges()
                    .into_iter()
                    .filter(|(u, v)| vset.contains(u) && vset.contains(v))
                    .collect();
                let _ = report;
                let rep = check_tree_decomposition_over(&vset, &eset, &td);
                let width_cap = 3 * (2 * r as usize + 2) - 1;
                if !rep.is_valid() || rep.width > width_cap {
                    return Err(ProtoError::Defect(format!(
                        "band {band} component decomposition invalid (width {} cap {width_cap}): {:?} {:?} {:?}",
                        rep.width, rep.structure_errors, rep.uncovered_edges, rep.disconnected_vertices
                    )));
                }
                self.dumped_tds.borrow_mut().push((
                    format!("band{band}-root{}", ids[0]),
                    td,
                    rep,
                ));
            }
        }
        let _ = run;
        Ok(())
    }

    /// Evaluates one basic local sentence over the planar pipeline.
    pub fn eval_leaf(
        &self,
        leaf: &BasicLocalSentence,
        run: &mut PipelineRun,
    ) -> Result<bool, ProtoError> {
        let p_flags = self.phase4(leaf.r, &leaf.psi, run)?;
        let scatter = ScatterSelect {
            r: leaf.r,
            s: leaf.s,
            p_flags: p_flags.clone(),
        };
        let res = netsim::run(
            self.g,
            self.bfs,
            &scatter,
            self.requester,
            &self.cfg(run.phases.len() as u64),
        )
        .map_err(|e| ProtoError::Defect(e.to_string()))?;
        self.absorb("scatter", run, &res.outcome);
        let witnesses = selected_witnesses(&res.states[self.requester as usize]);
        if witnesses.len() as u32 >= leaf.s {
            for (i, &a) in witnesses.iter().enumerate() {
                for &b in witnesses.iter().skip(i + 1) {
                    let d = self.g.distance(a, b).map_err(|e| ProtoError::Defect(e.to_string()))?;
                    if d <= 2 * leaf.r {
                        return Err(ProtoError::Defect(format!(
                            "witnesses {a},{b} at distance {d} <= 2r"
                        )));
                    }
                }
            }
            return Ok(true);
        }
        if witnesses.is_empty() {
            return Ok(false);
        }
        let i_flags: Vec<bool> = (0..=self.g.node_count())
            .map(|v| v != 0 && res.states[v as usize].flags.i)
            .collect();
        // diameter note per the witness-ball argument
        self.flag_i_diameter(&i_flags, witnesses.len() as u32, leaf.r, run);

        let arity_placeholder = 1; // replaced inside the protocol after stabilization
        let prog = Phase5 {
            r: leaf.r,
            s: leaf.s,
            i_flags,
            p_flags,
            cfg: EngineCfg {
                r: leaf.r,
                arity: arity_placeholder,
                task: EvalTask::Scattered {
                    r: leaf.r,
                    s: leaf.s,
                },
                band_mode: false,
            },
        };
        let res = netsim::run(
            self.g,
            self.bfs,
            &prog,
            self.requester,
            &self.cfg(run.phases.len() as u64),
        )
        .map_err(|e| ProtoError::Defect(e.to_string()))?;
        self.absorb("witness-td", run, &res.outcome);
        let decision = res
            .outcome
            .decision
            .ok_or_else(|| ProtoError::Defect("phase V did not decide".into()))?;
        if self.verify_decompositions {
            self.check_phase5(&res.states, leaf, run)?;
        }
        Ok(decision)
    }

    fn check_phase5(
        &self,
        states: &[P5State],
        leaf: &BasicLocalSentence,
        run: &mut PipelineRun,
    ) -> Result<(), ProtoError> {
        // reconstruct I-components and verify counts against brute force
        let inodes: Vec<NodeId> = self.g.nodes().filter(|&v| states[v as usize].i).collect();
        if inodes.is_empty() {
            return Ok(());
        }
        let sub = self.g.induced(&inodes);
        let mut seen = vec![false; sub.len()];
        for start in 0..sub.len() {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(u) = stack.pop() {
                for &w in &sub.adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                        stack.push(w);
                    }
                }
            }
            let ids: Vec<NodeId> = comp.iter().map(|&i| sub.original[i]).collect();
            let leader = *ids.iter().min().unwrap();
            let count = states[leader as usize]
                .slots
                .get(&leader)
                .and_then(|s| s.scope_count)
                .ok_or_else(|| {
                    ProtoError::Defect(format!("component leader {leader} has no count"))
                })?;
            let edges: Vec<(NodeId, NodeId)> = self
                .g
                .edges()
                .into_iter()
                .filter(|(u, v)| ids.contains(u) && ids.contains(v))
                .collect();
            let p = |v: NodeId| {
                states[v as usize].i && {
                    // p flags were inputs to phase V
                    self.phase5_pflag_probe(states, v)
                }
            };
            let brute = crate::tdeval::scattered::scattered_brute_force(
                &ids, &edges, &p, leaf.r, leaf.s,
            );
            if count != brute {
                return Err(ProtoError::Defect(format!(
                    "component at {leader}: witness count {count} vs brute force {brute}"
                )));
            }
        }
        let _ = run;
        Ok(())
    }

    fn phase5_pflag_probe(&self, states: &[P5State], v: NodeId) -> bool {
        states[v as usize].p
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

    /// Distributed count of a unary predicate over the planar pipeline.
    pub fn count_unary(&self, psi: &Psi, run: &mut PipelineRun) -> Result<u64, ProtoError> {
        let flags = self.phase4(psi.intrinsic_radius(), psi, run)?;
        let prog = count_aggregate_protocol(&flags);
        let res = netsim::run(
            self.g,
            self.bfs,
            &prog,
            self.requester,
            &self.cfg(run.phases.len() as u64),
        )
        .map_err(|e| ProtoError::Defect(e.to_string()))?;
        self.absorb("count-aggregate", run, &res.outcome);
        Ok(res.states[self.requester as usize]
            .result
            .expect("sum completed"))
    }

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

    pub fn evaluate(&self, q: &QueryExpr) -> Result<PipelineRun, ProtoError> {
        let mut run = self.new_run();
        run.decision = self.eval_expr(q, &mut run)?;
        Ok(run)
    }
}

/// Assembles one component's bags from node states into an ordered tree
/// decomposition for checking and export.
pub fn assemble_component_td<S>(
    states: &[S],
    members: &[NodeId],
    key: u32,
    arity: usize,
    slot_of: impl Fn(&S, u32) -> Option<&Slot>,
) -> (OrderedTreeDecomposition, TdReport) {
    let mut index: BTreeMap<(NodeId, u32), usize> = BTreeMap::new();
    let mut bags: Vec<Vec<NodeId>> = Vec::new();
    let mut parents: Vec<Option<usize>> = Vec::new();
    let mut parent_refs: Vec<Option<(NodeId, u32)>> = Vec::new();
    let mut root = 0;
    let mut max_len = 1;
    for &v in members {
        if let Some(slot) = slot_of(&states[v as usize], key) {
            for (&seq, bag) in &slot.bags {
                let idx = bags.len();
                index.insert((v, seq), idx);
                let t = bag.tuple(arity);
                max_len = max_len.max(t.len());
                bags.push(t);
                parent_refs.push(bag.parent.map(|i| (bag.nbrs[i].host, bag.nbrs[i].seq)));
                parents.push(None);
                if bag.parent.is_none() && slot.root_bag == Some(seq) {
                    root = idx;
                }
            }
        }
    }
    for (i, pr) in parent_refs.iter().enumerate() {
        if let Some((h, s)) = pr {
            parents[i] = index.get(&(*h, *s)).copied();
        }
    }
    let arity = arity.max(max_len);
    let bags: Vec<Vec<NodeId>> = bags
        .into_iter()
        .map(|mut t| {
            let last = *t.last().unwrap();
            while t.len() < arity {
                t.push(last);
            }
            t
        })
        .collect();
    let td = OrderedTreeDecomposition {
        arity,
        bags,
        parent: parents,
        root,
    };
    (td, TdReport::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfs::build_bfs_tree;
    use crate::gen::{generate, Family};
    use crate::query::oracle::oracle_eval;

    fn prepared(family: Family, size: u32, seed: u64) -> (Graph, BfsTree) {
        let inst = generate(family, size, seed).unwrap();
        let mut g = inst.graph;
        if let Some(emb) = &inst.embedding {
            emb.apply_rotation(&mut g).unwrap();
        }
        let bfs = build_bfs_tree(&g, 1);
        (g, bfs)
    }

    #[test]
    fn phase4_cycle12_mindeg() {
        let (g, bfs) = prepared(Family::Cycle, 12, 0);
        let pipe = PlanarPipeline::new(&g, &bfs, 1, 0);
        let mut run = pipe.new_run();
        let p = pipe.phase4(1, &Psi::MinDeg(2), &mut run).unwrap();
        for v in g.nodes() {
            assert!(p[v as usize], "every cycle node has two neighbors");
        }
    }

    #[test]
    fn phase4_shallow_tree_single_band() {
        // a star: treeDepth 1 <= 2r, single band covering the whole graph
        let g = Graph::new(5, &[(1, 2), (1, 3), (1, 4), (1, 5)]).unwrap();
        let bfs = build_bfs_tree(&g, 1);
        let pipe = PlanarPipeline::new(&g, &bfs, 1, 0);
        let mut run = pipe.new_run();
        let p = pipe.phase4(1, &Psi::MinDeg(4), &mut run).unwrap();
        assert!(p[1]);
        for v in 2..=5 {
            assert!(!p[v as usize]);
        }
    }

    #[test]
    fn phase4_grid5_mindeg3_matches_oracle() {
        let (g, bfs) = prepared(Family::Grid, 5, 0);
        let pipe = PlanarPipeline::new(&g, &bfs, 1, 0);
        let mut run = pipe.new_run();
        // the pipeline cross-checks P against the band oracle internally
        let p = pipe.phase4(1, &Psi::MinDeg(3), &mut run).unwrap();
        let interior: usize = g.nodes().filter(|&v| p[v as usize]).count();
        assert!(interior > 0);
    }

    #[test]
    fn leaf_grid7_mindeg4_accepts() {
        let (g, bfs) = prepared(Family::Grid, 7, 0);
        let pipe = PlanarPipeline::new(&g, &bfs, 1, 0);
        let leaf = BasicLocalSentence::new(1, 2, Psi::MinDeg(4)).unwrap();
        let mut run = pipe.new_run();
        let dist = pipe.eval_leaf(&leaf, &mut run).unwrap();
        let oracle = oracle_eval(&g, &QueryExpr::Local(leaf.clone())).unwrap();
        assert_eq!(dist, oracle);
        assert!(dist, "a 7x7 grid has many scattered interior nodes");
    }

    #[test]
    fn leaf_c6_s3_rejects_via_witness_td() {
        let (g, bfs) = prepared(Family::Cycle, 6, 0);
        let pipe = PlanarPipeline::new(&g, &bfs, 1, 0);
        let leaf = BasicLocalSentence::new(1, 3, Psi::True).unwrap();
        let mut run = pipe.new_run();
        let dist = pipe.eval_leaf(&leaf, &mut run).unwrap();
        let oracle = oracle_eval(&g, &QueryExpr::Local(leaf.clone())).unwrap();
        assert_eq!(dist, oracle);
        assert!(!dist, "no 3 nodes pairwise more than 2 apart in C6");
    }

    #[test]
    fn leaf_s1_any_p() {
        let (g, bfs) = prepared(Family::Cycle, 9, 0);
        let pipe = PlanarPipeline::new(&g, &bfs, 1, 0);
        let leaf = BasicLocalSentence::new(1, 1, Psi::True).unwrap();
        let mut run = pipe.new_run();
        assert!(pipe.eval_leaf(&leaf, &mut run).unwrap());
    }

    #[test]
    fn leaves_match_oracle_small_families() {
        let cases = vec![
            (Family::Cycle, 8u32),
            (Family::Cycle, 13),
            (Family::Grid, 3),
            (Family::Grid, 4),
            (Family::TriangulatedGrid, 3),
            (Family::TriangulatedGrid, 4),
            (Family::RandomTree, 14),
        ];
        let leaves = vec![
            BasicLocalSentence::new(1, 1, Psi::Triangle).unwrap(),
            BasicLocalSentence::new(1, 2, Psi::Triangle).unwrap(),
            BasicLocalSentence::new(1, 2, Psi::MinDeg(2)).unwrap(),
            BasicLocalSentence::new(2, 2, Psi::MinDeg(3)).unwrap(),
            BasicLocalSentence::new(1, 2, Psi::BallTree(1)).unwrap(),
            BasicLocalSentence::new(1, 3, Psi::True).unwrap(),
        ];
        for (family, size) in cases {
            let (g, bfs) = prepared(family, size, 1);
            let pipe = PlanarPipeline::new(&g, &bfs, 1, 0);
            for leaf in &leaves {
                let mut run = pipe.new_run();
                let dist = pipe.eval_leaf(leaf, &mut run).unwrap();
                let oracle = oracle_eval(&g, &QueryExpr::Local(leaf.clone())).unwrap();
                assert_eq!(dist, oracle, "family {family:?} size {size} leaf {leaf:?}");
            }
        }
    }

    #[test]
    fn count_unary_matches_oracle() {
        let (g, bfs) = prepared(Family::TriangulatedGrid, 4, 0);
        let pipe = PlanarPipeline::new(&g, &bfs, 1, 0);
        let mut run = pipe.new_run();
        let count = pipe.count_unary(&Psi::Triangle, &mut run).unwrap();
        let oracle = crate::query::oracle::Oracle::new(&g).unwrap();
        let set = oracle.psi_set(&Psi::Triangle, 1).unwrap();
        let expect = g.nodes().filter(|&v| set[v as usize]).count() as u64;
        assert_eq!(count, expect);
    }
}
