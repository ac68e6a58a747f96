//! Per-scope decomposition engine: a serialized DFS block decomposition
//! (with a virtual root above the boundary layer in band mode), sequential
//! face walks that build fixed-arity bags hosted at the nodes creating them,
//! local link assembly into one bag tree per scope, and evaluation sweeps
//! over that tree (unary predicate bits, or the scattered-witness count).
//!
//! A scope is one band component (phase IV) or one I-component (phase V).
//! All messages carry the scope key. Exactly one token is active per scope:
//! the DFS, the block informs, the post-order walk token and each face walk
//! are strictly sequential, so arc visits never race.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::bfs::PortState;
use crate::graph::NodeId;
use crate::netsim::{NodeView, Payload};
use crate::query::Psi;

pub type BagSeq = u32;

/// (id, P-flag) entry of an ancestor list.
pub type AncList = Vec<(NodeId, bool)>;

/// Reference to a bag hosted elsewhere; `path` lists intermediate relay
/// nodes between the referrer's host and the bag's host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagRef {
    pub host: NodeId,
    pub seq: BagSeq,
    pub path: Vec<NodeId>,
}

impl BagRef {
    pub fn local(host: NodeId, seq: BagSeq) -> Self {
        BagRef {
            host,
            seq,
            path: Vec::new(),
        }
    }
}

/// Rebases a reference received from `sender` so it is routable from here.
fn recv_reroot(me: NodeId, sender: NodeId, mut r: BagRef) -> BagRef {
    if r.host == me {
        r.path.clear();
        return r;
    }
    if r.host == sender {
        r.path.clear();
        return r;
    }
    if r.path.first() != Some(&sender) {
        let mut p = vec![sender];
        p.extend(r.path.iter().copied().filter(|&x| x != me && x != r.host));
        r.path = p;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfsPort {
    OutOfScope,
    Unvisited,
    Parent,
    Child,
    Closed,
    Backtracked,
    ChildBridge,
    NonTreeFwd,
    NonTreeBack,
}

/// DP profile: one capped distance vector per chosen witness over the bag's
/// distinct vertices, the capped pairwise witness distances, and the count.
pub type DpProfile = (Vec<Vec<u16>>, Vec<u16>, u32);

#[derive(Debug, Clone)]
pub struct Bag {
    pub block: u32,
    /// Up to three ancestor lists; their concatenation (padded) is the tuple.
    pub lists: Vec<AncList>,
    pub nbrs: Vec<BagRef>,
    pub parent: Option<usize>,
    pub parent_verts: Vec<NodeId>,
    pub oriented: bool,
    pub pending: usize,
    pub facts: BTreeSet<(NodeId, NodeId)>,
    pub deg_counts: BTreeMap<NodeId, u32>,
    pub tri: BTreeSet<NodeId>,
    pub results: BTreeMap<NodeId, bool>,
    pub profiles: Vec<DpProfile>,
    pub child_dists: Vec<(NodeId, NodeId, u16)>,
}

impl Bag {
    fn new(block: u32, lists: Vec<AncList>) -> Self {
        Bag {
            block,
            lists,
            nbrs: Vec::new(),
            parent: None,
            parent_verts: Vec::new(),
            oriented: false,
            pending: 0,
            facts: BTreeSet::new(),
            deg_counts: BTreeMap::new(),
            tri: BTreeSet::new(),
            results: BTreeMap::new(),
            profiles: Vec::new(),
            child_dists: Vec::new(),
        }
    }

    pub fn verts(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.lists.iter().flatten().map(|e| e.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn p_of(&self, v: NodeId) -> bool {
        self.lists
            .iter()
            .flatten()
            .find(|e| e.0 == v)
            .map(|e| e.1)
            .unwrap_or(false)
    }

    pub fn tuple(&self, arity: usize) -> Vec<NodeId> {
        let mut t: Vec<NodeId> = self.lists.iter().flatten().map(|e| e.0).collect();
        let last = *t.last().expect("bags are never empty");
        while t.len() < arity {
            t.push(last);
        }
        t.truncate(arity.max(t.len()));
        t
    }
}

#[derive(Debug, Clone)]
pub enum EngineEvent {
    ScopeDone { key: u32 },
    Count { key: u32, count: u32 },
}

#[derive(Clone, Debug)]
pub enum EngMsg {
    DfsFwd { key: u32, root: NodeId, next_block: u32, parent_depth: u32 },
    DfsBack { key: u32, next_block: u32, child_low: u32 },
    DfsRestart { key: u32, next_block: u32, anc_depth: u32 },
    Inform { key: u32, block: u32, special: bool },
    InformAck { key: u32 },
    BlockPort { key: u32, block: u32, special: bool },
    BlockPortAck { key: u32 },
    BridgeQ { key: u32, block: u32, bag: BagSeq, anc: AncList },
    BridgeA { key: u32, bag: BagSeq, child_bag: BagRef, anc: AncList },
    PostT { key: u32, pass: u8 },
    PostBack { key: u32, pass: u8 },
    Walk {
        key: u32,
        block: u32,
        special: bool,
        corner: NodeId,
        corner_list: AncList,
        prev_bag: BagRef,
        start: bool,
    },
    WalkAck { key: u32, to_bag: BagSeq, my_list: AncList, new_bag: Option<BagRef> },
    WalkOver { key: u32, block: u32, closing_flank: BagRef },
    CrossNote { key: u32, to_bag: BagSeq, nbr: BagRef },
    Flush { key: u32 },
    FlushAck { key: u32 },
    BagMsg { key: u32, to: BagSeq, body: BagBody },
    Relay { key: u32, target: NodeId, rest: Vec<NodeId>, inner: Box<EngMsg> },
}

#[derive(Clone, Debug)]
pub enum BagBody {
    Orient { from: BagRef, parent_verts: Vec<NodeId> },
    FactsUp { pairs: Vec<(NodeId, NodeId)> },
    FactsDown { pairs: Vec<(NodeId, NodeId)> },
    ResolveUp { counts: Vec<(NodeId, u32)>, tri: Vec<NodeId> },
    ResultsDown { bits: Vec<(NodeId, bool)> },
    ResAck,
    DpUp {
        profiles: Vec<DpProfile>,
        verts: Vec<NodeId>,
        dists: Vec<(NodeId, NodeId, u16)>,
    },
}

impl Payload for EngMsg {
    fn kind(&self) -> &'static str {
        match self {
            EngMsg::DfsFwd { .. } => "DFSFWD",
            EngMsg::DfsBack { .. } => "DFSBACK",
            EngMsg::DfsRestart { .. } => "DFSRESTART",
            EngMsg::Inform { .. } => "DFSINFORM",
            EngMsg::InformAck { .. } => "DFSINFORMACK",
            EngMsg::BlockPort { .. } => "DFSBLOCKPORT",
            EngMsg::BlockPortAck { .. } => "DFSBLOCKPORTACK",
            EngMsg::BridgeQ { .. } => "BRIDGEQ",
            EngMsg::BridgeA { .. } => "BRIDGEA",
            EngMsg::PostT { .. } => "POSTTRAVERSE",
            EngMsg::PostBack { .. } => "POSTBACKTRACK",
            EngMsg::Walk { start: true, .. } => "FACESTART",
            EngMsg::Walk { .. } => "FACEWALK",
            EngMsg::WalkAck { .. } => "FACEACK",
            EngMsg::WalkOver { .. } => "FACEOVER",
            EngMsg::CrossNote { .. } => "CROSSNOTE",
            EngMsg::Flush { .. } => "FLUSH",
            EngMsg::FlushAck { .. } => "FLUSHACK",
            EngMsg::BagMsg { body, .. } => match body {
                BagBody::Orient { .. } => "TDORIENT",
                BagBody::FactsUp { .. } => "TDFACTSUP",
                BagBody::FactsDown { .. } => "TDFACTSDOWN",
                BagBody::ResolveUp { .. } => "TDRESOLVE",
                BagBody::ResultsDown { .. } => "TDRESULTS",
                BagBody::ResAck => "TDRESACK",
                BagBody::DpUp { .. } => "TDDP",
            },
            EngMsg::Relay { .. } => "TDRELAY",
        }
    }

    fn size_bits(&self, idb: u64) -> u64 {
        let list_bits = |l: &AncList| 8 + l.len() as u64 * (idb + 1);
        let ref_bits = |r: &BagRef| idb + 16 + r.path.len() as u64 * idb;
        match self {
            EngMsg::DfsFwd { .. } => 8 + idb * 3,
            EngMsg::DfsBack { .. } | EngMsg::DfsRestart { .. } => 8 + idb * 2,
            EngMsg::Inform { .. } | EngMsg::BlockPort { .. } => 8 + idb + 1,
            EngMsg::InformAck { .. } | EngMsg::BlockPortAck { .. } => 8,
            EngMsg::BridgeQ { anc, .. } => 8 + idb + 16 + list_bits(anc),
            EngMsg::BridgeA { child_bag, anc, .. } => 8 + 16 + ref_bits(child_bag) + list_bits(anc),
            EngMsg::PostT { .. } | EngMsg::PostBack { .. } => 8,
            EngMsg::Flush { .. } | EngMsg::FlushAck { .. } => 8,
            EngMsg::Walk { corner_list, prev_bag, .. } => {
                8 + idb * 2 + 2 + list_bits(corner_list) + ref_bits(prev_bag)
            }
            EngMsg::WalkAck { my_list, new_bag, .. } => {
                8 + 16 + list_bits(my_list) + new_bag.as_ref().map(&ref_bits).unwrap_or(1)
            }
            EngMsg::WalkOver { closing_flank, .. } => 8 + idb + ref_bits(closing_flank),
            EngMsg::CrossNote { nbr, .. } => 8 + 16 + ref_bits(nbr),
            EngMsg::BagMsg { body, .. } => {
                16 + match body {
                    BagBody::Orient { from, parent_verts } => {
                        ref_bits(from) + 8 + parent_verts.len() as u64 * idb
                    }
                    BagBody::FactsUp { pairs } | BagBody::FactsDown { pairs } => {
                        8 + pairs.len() as u64 * 2 * idb
                    }
                    BagBody::ResolveUp { counts, tri } => {
                        8 + counts.len() as u64 * (idb + 8) + tri.len() as u64 * idb
                    }
                    BagBody::ResultsDown { bits } => 8 + bits.len() as u64 * (idb + 1),
                    BagBody::ResAck => 4,
                    BagBody::DpUp { profiles, verts, dists } => {
                        8 + verts.len() as u64 * idb
                            + dists.len() as u64 * (2 * idb + 8)
                            + profiles
                                .iter()
                                .map(|(vecs, pw, _)| {
                                    8 + vecs.iter().map(|v| v.len() as u64 * 8).sum::<u64>()
                                        + pw.len() as u64 * 8
                                })
                                .sum::<u64>()
                    }
                }
            }
            EngMsg::Relay { inner, rest, .. } => idb * (1 + rest.len() as u64) + inner.size_bits(idb),
        }
    }
}

#[derive(Clone)]
pub enum EvalTask {
    PsiBits { psi: Psi },
    Scattered { r: u32, s: u32 },
}

pub struct EngineCfg {
    pub r: u32,
    pub arity: usize,
    pub task: EvalTask,
    pub band_mode: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Slot {
    pub member: bool,
    pub ldepth: u32,
    /// Ancestors from self up to the scope boundary, with P flags.
    pub anc: AncList,
    // DFS
    pub dfs_visited: bool,
    pub dfs_depth: u32,
    pub dfs_low: u32,
    pub dfs_root: Option<NodeId>,
    pub dfs_parent_port: Option<usize>,
    pub dfs_state: Vec<DfsPort>,
    pub tree_port: Vec<bool>,
    pub is_engine_root: bool,
    pub pending_back_port: Option<usize>,
    pub next_block_cached: u32,
    // blocks
    pub block_of_port: Vec<Option<u32>>,
    pub bridge_port: Vec<bool>,
    pub special_block: Option<u32>,
    pub informed_blocks: BTreeSet<u32>,
    pub inform_pending: usize,
    pub inform_reply_port: Option<usize>,
    // walk phase
    pub post_sent: Vec<bool>,
    pub walk_pass: u8,
    pub out_visited: Vec<bool>,
    pub in_visited: Vec<bool>,
    pub flank_out: Vec<Option<BagRef>>,
    pub flank_rev: Vec<Option<BagRef>>,
    pub token_waiting: bool,
    pub expect_acks: usize,
    pub flush_started: bool,
    pub flush_pending: usize,
    pub flush_reply: Option<usize>,
    pub flush_done: bool,
    // bags
    pub bags: BTreeMap<BagSeq, Bag>,
    pub next_seq: BagSeq,
    pub self_bags: BTreeMap<u32, BagSeq>,
    pub pending_roots: Vec<(u32, BagSeq)>,
    // results
    pub root_bag: Option<BagSeq>,
    pub psi_bit: Option<bool>,
    pub scope_count: Option<u32>,
}

impl Slot {
    pub fn new(
        member: bool,
        ldepth: u32,
        anc: AncList,
        scope_ports: Vec<bool>,
        tree_port: Vec<bool>,
    ) -> Self {
        let degree = scope_ports.len();
        Slot {
            member,
            ldepth,
            anc,
            dfs_state: scope_ports
                .iter()
                .map(|&ok| if ok { DfsPort::Unvisited } else { DfsPort::OutOfScope })
                .collect(),
            tree_port,
            block_of_port: vec![None; degree],
            bridge_port: vec![false; degree],
            post_sent: vec![false; degree],
            out_visited: vec![false; degree],
            in_visited: vec![false; degree],
            flank_out: vec![None; degree],
            flank_rev: vec![None; degree],
            next_seq: 1,
            ..Default::default()
        }
    }
}

#[derive(Default)]
pub struct Sends {
    pub msgs: Vec<(usize, EngMsg)>,
    pub events: Vec<EngineEvent>,
}

impl Sends {
    pub fn new() -> Self {
        Self::default()
    }
    fn send(&mut self, port: usize, msg: EngMsg) {
        self.msgs.push((port, msg));
    }
}

/// Scope eligibility per port: the neighbor must be a member, and in band
/// mode boundary layers may not leave the band.
pub fn scope_ports(
    band_mode: bool,
    r: u32,
    node: &NodeView,
    member_self: bool,
    ldepth: u32,
    member: &dyn Fn(NodeId) -> bool,
) -> Vec<bool> {
    (0..node.degree())
        .map(|p| {
            if !member_self {
                return false;
            }
            let nb = node.neighbor(p);
            if !member(nb) {
                return false;
            }
            if band_mode {
                let st = node.port_states[p];
                if ldepth == 0 && matches!(st, PortState::Parent | PortState::Upward) {
                    return false;
                }
                if ldepth == 2 * r && matches!(st, PortState::Child | PortState::Downward) {
                    return false;
                }
            }
            true
        })
        .collect()
}

pub struct Engine<'c> {
    pub cfg: &'c EngineCfg,
    pub key: u32,
}

impl<'c> Engine<'c> {
    // -----------------------------------------------------------------------
    // DFS with block closure
    // -----------------------------------------------------------------------

    pub fn start_dfs(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        slot.is_engine_root = true;
        slot.dfs_visited = true;
        slot.dfs_depth = 1;
        slot.dfs_low = if self.cfg.band_mode && slot.ldepth == 0 { 0 } else { 1 };
        slot.dfs_root = Some(node.id);
        slot.next_block_cached = 1;
        self.dfs_continue(node, slot, out)
    }

    fn dfs_continue(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        if let Some(p) = (0..node.degree()).find(|&p| matches!(slot.dfs_state[p], DfsPort::Unvisited)) {
            slot.dfs_state[p] = DfsPort::Child;
            out.send(
                p,
                EngMsg::DfsFwd {
                    key: self.key,
                    root: slot.dfs_root.expect("visited"),
                    next_block: slot.next_block_cached,
                    parent_depth: slot.dfs_depth,
                },
            );
            return Ok(());
        }
        if slot.is_engine_root {
            if self.cfg.band_mode {
                let block = slot.next_block_cached;
                slot.next_block_cached += 1;
                slot.special_block = Some(block);
                let back_ports: Vec<usize> = (0..node.degree())
                    .filter(|&p| matches!(slot.dfs_state[p], DfsPort::Backtracked))
                    .collect();
                for &p in &back_ports {
                    slot.block_of_port[p] = Some(block);
                }
                slot.informed_blocks.insert(block);
                slot.inform_pending = back_ports.len();
                slot.inform_reply_port = None;
                if back_ports.is_empty() {
                    return self.begin_walk_phase(node, slot, out);
                }
                for p in back_ports {
                    out.send(p, EngMsg::Inform { key: self.key, block, special: true });
                }
                Ok(())
            } else {
                self.begin_walk_phase(node, slot, out)
            }
        } else {
            let parent = slot.dfs_parent_port.ok_or("dfs non-root without parent")?;
            out.send(
                parent,
                EngMsg::DfsBack {
                    key: self.key,
                    next_block: slot.next_block_cached,
                    child_low: slot.dfs_low,
                },
            );
            Ok(())
        }
    }

    pub fn on_dfs_fwd(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        port: usize,
        root: NodeId,
        next_block: u32,
        parent_depth: u32,
        out: &mut Sends,
    ) -> Result<(), String> {
        if slot.dfs_visited {
            slot.dfs_state[port] = DfsPort::NonTreeFwd;
            out.send(
                port,
                EngMsg::DfsRestart {
                    key: self.key,
                    next_block,
                    anc_depth: slot.dfs_depth,
                },
            );
            return Ok(());
        }
        slot.dfs_visited = true;
        slot.dfs_root = Some(root);
        slot.dfs_parent_port = Some(port);
        slot.dfs_depth = parent_depth + 1;
        slot.dfs_low = if self.cfg.band_mode && slot.ldepth == 0 { 0 } else { slot.dfs_depth };
        slot.next_block_cached = next_block;
        slot.dfs_state[port] = DfsPort::Parent;
        self.dfs_continue(node, slot, out)
    }

    pub fn on_dfs_restart(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        port: usize,
        next_block: u32,
        anc_depth: u32,
        out: &mut Sends,
    ) -> Result<(), String> {
        slot.dfs_state[port] = DfsPort::NonTreeBack;
        slot.dfs_low = slot.dfs_low.min(anc_depth);
        slot.next_block_cached = next_block;
        self.dfs_continue(node, slot, out)
    }

    pub fn on_dfs_back(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        port: usize,
        next_block: u32,
        child_low: u32,
        out: &mut Sends,
    ) -> Result<(), String> {
        slot.next_block_cached = next_block;
        if child_low == slot.dfs_depth {
            slot.dfs_state[port] = DfsPort::Closed;
            let block = slot.next_block_cached;
            slot.next_block_cached += 1;
            slot.block_of_port[port] = Some(block);
            slot.informed_blocks.insert(block);
            slot.inform_pending = 1;
            slot.inform_reply_port = None;
            out.send(port, EngMsg::Inform { key: self.key, block, special: false });
            Ok(())
        } else if child_low > slot.dfs_depth {
            slot.dfs_state[port] = DfsPort::ChildBridge;
            let block = slot.next_block_cached;
            slot.next_block_cached += 1;
            slot.block_of_port[port] = Some(block);
            slot.bridge_port[port] = true;
            let seq = slot.next_seq;
            slot.next_seq += 1;
            slot.bags.insert(seq, Bag::new(block, Vec::new()));
            slot.pending_back_port = Some(port);
            out.send(
                port,
                EngMsg::BridgeQ {
                    key: self.key,
                    block,
                    bag: seq,
                    anc: slot.anc.clone(),
                },
            );
            Ok(())
        } else {
            slot.dfs_state[port] = DfsPort::Backtracked;
            slot.dfs_low = slot.dfs_low.min(child_low);
            self.dfs_continue(node, slot, out)
        }
    }

    pub fn on_bridge_q(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        port: usize,
        block: u32,
        bag: BagSeq,
        their_anc: AncList,
        out: &mut Sends,
    ) -> Result<(), String> {
        slot.block_of_port[port] = Some(block);
        slot.bridge_port[port] = true;
        slot.informed_blocks.insert(block);
        // child-side self bag of the bridge block, under the bridge bag
        let seq = slot.next_seq;
        slot.next_seq += 1;
        let mut sb = Bag::new(block, vec![vec![(node.id, anc_p(&slot.anc, node.id))]]);
        sb.nbrs.push(BagRef::local(node.neighbor(port), bag));
        slot.bags.insert(seq, sb);
        slot.self_bags.insert(block, seq);
        self.try_adopt(node, slot);
        out.send(
            port,
            EngMsg::BridgeA {
                key: self.key,
                bag,
                child_bag: BagRef::local(node.id, seq),
                anc: their_anc_or_mine(their_anc, &slot.anc, node.id),
            },
        );
        Ok(())
    }

    pub fn on_bridge_a(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        port: usize,
        bag: BagSeq,
        child_bag: BagRef,
        deeper: AncList,
        out: &mut Sends,
    ) -> Result<(), String> {
        let block = {
            let b = slot.bags.get_mut(&bag).ok_or("bridge bag missing")?;
            b.lists = vec![deeper];
            b.nbrs.push(recv_reroot(node.id, node.neighbor(port), child_bag));
            b.block
        };
        slot.self_bags.entry(block).or_insert(bag);
        if self.parent_block_of(node, slot) != Some(block) {
            slot.pending_roots.push((block, bag));
        }
        self.try_adopt(node, slot);
        slot.pending_back_port.take().ok_or("unexpected bridge ack")?;
        self.dfs_continue(node, slot, out)
    }

    pub fn on_inform(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        port: usize,
        block: u32,
        special: bool,
        out: &mut Sends,
    ) -> Result<(), String> {
        if slot.informed_blocks.contains(&block) {
            out.send(port, EngMsg::InformAck { key: self.key });
            return Ok(());
        }
        slot.informed_blocks.insert(block);
        if special {
            slot.special_block = Some(block);
        }
        slot.block_of_port[port] = Some(block);
        slot.inform_reply_port = Some(port);
        let mut pending = 0;
        for p in 0..node.degree() {
            if p == port {
                continue;
            }
            match slot.dfs_state[p] {
                DfsPort::Backtracked => {
                    slot.block_of_port[p] = Some(block);
                    pending += 1;
                    out.send(p, EngMsg::Inform { key: self.key, block, special });
                }
                DfsPort::NonTreeBack => {
                    slot.block_of_port[p] = Some(block);
                    pending += 1;
                    out.send(p, EngMsg::BlockPort { key: self.key, block, special });
                }
                _ => {}
            }
        }
        slot.inform_pending = pending;
        if pending == 0 {
            let reply = slot.inform_reply_port.take().expect("just set");
            out.send(reply, EngMsg::InformAck { key: self.key });
        }
        Ok(())
    }

    pub fn on_block_port(
        &self,
        _node: &NodeView,
        slot: &mut Slot,
        port: usize,
        block: u32,
        special: bool,
        out: &mut Sends,
    ) -> Result<(), String> {
        slot.block_of_port[port] = Some(block);
        if special {
            slot.special_block = Some(block);
        }
        out.send(port, EngMsg::BlockPortAck { key: self.key });
        Ok(())
    }

    pub fn on_inform_ack(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        slot.inform_pending = slot
            .inform_pending
            .checked_sub(1)
            .ok_or("unexpected inform ack")?;
        if slot.inform_pending > 0 {
            return Ok(());
        }
        if let Some(p) = slot.inform_reply_port.take() {
            out.send(p, EngMsg::InformAck { key: self.key });
            return Ok(());
        }
        // an inform wave completed at its origin
        if slot.is_engine_root && slot.special_block.is_some() && self.cfg.band_mode {
            // this was the final (virtual-root) block
            self.begin_walk_phase(node, slot, out)
        } else {
            self.dfs_continue(node, slot, out)
        }
    }

    // -----------------------------------------------------------------------
    // Walk phase
    // -----------------------------------------------------------------------

    fn begin_walk_phase(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        slot.walk_pass = 1;
        self.post_visit(node, slot, out)
    }

    fn post_visit(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        for p in 0..node.degree() {
            if matches!(
                slot.dfs_state[p],
                DfsPort::Closed | DfsPort::Backtracked | DfsPort::ChildBridge
            ) && !slot.post_sent[p]
            {
                slot.post_sent[p] = true;
                out.send(p, EngMsg::PostT { key: self.key, pass: slot.walk_pass });
                return Ok(());
            }
        }
        self.next_walk(node, slot, out)
    }

    /// Re-entry point for the post-order token (PostT/PostBack).
    pub fn resume_walks(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        self.next_walk(node, slot, out)
    }

    fn next_walk(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        slot.token_waiting = false;
        for p in 0..node.degree() {
            let Some(block) = slot.block_of_port[p] else { continue };
            if slot.out_visited[p] || slot.bridge_port[p] {
                continue;
            }
            let special = slot.special_block == Some(block);
            if slot.walk_pass == 1 {
                // pass 1 walks only the boundary-layer segment chains of the
                // virtual-root block, so later starts never split a face
                if !(special
                    && self.cfg.band_mode
                    && slot.ldepth == 0
                    && self.is_post_gap_start(node, slot, block, p))
                {
                    continue;
                }
            }
            slot.token_waiting = true;
            return self.start_walk(node, slot, block, special, p, None, out);
        }
        if slot.is_engine_root {
            if slot.walk_pass == 1 {
                // second pass: every remaining face, any block
                slot.walk_pass = 2;
                for f in slot.post_sent.iter_mut() {
                    *f = false;
                }
                return self.post_visit(node, slot, out);
            }
            return self.start_flush(node, slot, out);
        }
        let parent = slot.dfs_parent_port.ok_or("post token at orphan")?;
        out.send(parent, EngMsg::PostBack { key: self.key, pass: slot.walk_pass });
        Ok(())
    }

    fn is_post_gap_start(&self, node: &NodeView, slot: &Slot, block: u32, p: usize) -> bool {
        let deg = node.degree();
        let mut gap = false;
        let mut q = (p + 1) % deg;
        while q != p {
            if slot.block_of_port[q] == Some(block) {
                return gap;
            }
            if matches!(node.port_states[q], PortState::Parent | PortState::Upward) {
                gap = true;
            }
            q = (q + 1) % deg;
        }
        gap
    }

    fn start_walk(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        block: u32,
        special: bool,
        p: usize,
        chain_parent: Option<BagRef>,
        out: &mut Sends,
    ) -> Result<(), String> {
        slot.out_visited[p] = true;
        let seq = slot.next_seq;
        slot.next_seq += 1;
        let mut bag = Bag::new(block, vec![slot.anc.clone(), Vec::new()]);
        if let Some(cp) = &chain_parent {
            bag.nbrs.push(cp.clone());
        }
        slot.bags.insert(seq, bag);
        if let Some(cp) = chain_parent {
            // register the reverse side of the chain link
            self.add_nbr(node, slot, cp, BagRef::local(node.id, seq), out)?;
        }
        slot.flank_out[p] = Some(BagRef::local(node.id, seq));
        self.ensure_self_bag(node, slot, block, seq);
        self.try_adopt(node, slot);
        self.link_if_second_crossing(node, slot, p, out)?;
        slot.expect_acks += 1;
        out.send(
            p,
            EngMsg::Walk {
                key: self.key,
                block,
                special,
                corner: node.id,
                corner_list: slot.anc.clone(),
                prev_bag: BagRef::local(node.id, seq),
                start: true,
            },
        );
        Ok(())
    }

    /// Returns (successor port, skipped an out-of-band upward port, skipped
    /// the BFS-parent port). The last distinguishes the contracted root's
    /// tree edge from its non-tree incidences.
    fn face_successor(
        &self,
        node: &NodeView,
        slot: &Slot,
        block: u32,
        in_port: usize,
    ) -> Result<(usize, bool, bool), String> {
        let deg = node.degree();
        let mut gap = false;
        let mut gap_parent = false;
        let mut q = (in_port + deg - 1) % deg;
        for _ in 0..deg {
            if slot.block_of_port[q] == Some(block) && !slot.bridge_port[q] {
                return Ok((q, gap, gap_parent));
            }
            if matches!(node.port_states[q], PortState::Parent | PortState::Upward) {
                gap = true;
                if matches!(node.port_states[q], PortState::Parent) {
                    gap_parent = true;
                }
            }
            q = (q + deg - 1) % deg;
        }
        Err(format!("face successor not found at {}", node.id))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_walk(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        port: usize,
        block: u32,
        special: bool,
        corner: NodeId,
        corner_list: AncList,
        prev_bag: BagRef,
        start: bool,
        out: &mut Sends,
    ) -> Result<(), String> {
        if slot.in_visited[port] {
            return Err(format!("arc into {} over port {port} walked twice", node.id));
        }
        slot.in_visited[port] = true;
        let prev_ref = recv_reroot(node.id, node.neighbor(port), prev_bag);
        slot.flank_rev[port] = Some(prev_ref.clone());
        self.link_if_second_crossing(node, slot, port, out)?;

        let (succ, gap, gap_parent) = self.face_successor(node, slot, block, port)?;
        let virtual_gap = gap && special && self.cfg.band_mode && slot.ldepth == 0;

        if virtual_gap {
            out.send(
                port,
                EngMsg::WalkAck {
                    key: self.key,
                    to_bag: prev_ref.seq,
                    my_list: slot.anc.clone(),
                    new_bag: None,
                },
            );
            if slot.out_visited[succ] {
                if !slot.token_waiting {
                    return Err("segment chain ended away from its owner".into());
                }
                return self.next_walk(node, slot, out);
            }
            // crossing the contracted root's tree incidence carries no dual
            // link; other gap crossings chain consecutive segment fans
            let chain = (!gap_parent).then_some(prev_ref);
            return self.start_walk(node, slot, block, special, succ, chain, out);
        }

        if node.neighbor(succ) == corner && !start {
            // closing arc: no new bag; the previous fan triangle is its flank
            out.send(
                port,
                EngMsg::WalkAck {
                    key: self.key,
                    to_bag: prev_ref.seq,
                    my_list: slot.anc.clone(),
                    new_bag: None,
                },
            );
            slot.out_visited[succ] = true;
            slot.flank_out[succ] = Some(prev_ref.clone());
            self.ensure_self_bag_remote(node, slot, block, prev_ref.clone(), out)?;
            self.link_if_second_crossing(node, slot, succ, out)?;
            out.send(
                succ,
                EngMsg::WalkOver {
                    key: self.key,
                    block,
                    closing_flank: prev_ref,
                },
            );
            return Ok(());
        }

        if slot.out_visited[succ] {
            return Err(format!(
                "walk at {} would revisit its outgoing arc on port {succ}",
                node.id
            ));
        }
        // forwarding position: fan triangle for the outgoing arc
        let seq = slot.next_seq;
        slot.next_seq += 1;
        let mut bag = Bag::new(block, vec![corner_list.clone(), slot.anc.clone(), Vec::new()]);
        bag.nbrs.push(prev_ref.clone());
        slot.bags.insert(seq, bag);
        slot.flank_out[succ] = Some(BagRef::local(node.id, seq));
        self.ensure_self_bag(node, slot, block, seq);
        self.try_adopt(node, slot);
        self.link_if_second_crossing(node, slot, succ, out)?;
        out.send(
            port,
            EngMsg::WalkAck {
                key: self.key,
                to_bag: prev_ref.seq,
                my_list: slot.anc.clone(),
                new_bag: Some(BagRef::local(node.id, seq)),
            },
        );
        slot.out_visited[succ] = true;
        slot.expect_acks += 1;
        out.send(
            succ,
            EngMsg::Walk {
                key: self.key,
                block,
                special,
                corner,
                corner_list,
                prev_bag: BagRef::local(node.id, seq),
                start: false,
            },
        );
        Ok(())
    }

    pub fn on_walk_ack(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        port: usize,
        to_bag: BagSeq,
        my_list: AncList,
        new_bag: Option<BagRef>,
        _out: &mut Sends,
    ) -> Result<(), String> {
        if let Some(bag) = slot.bags.get_mut(&to_bag) {
            if let Some(last) = bag.lists.last_mut() {
                if last.is_empty() {
                    *last = my_list;
                }
            }
            if let Some(nb) = new_bag {
                bag.nbrs.push(recv_reroot(node.id, node.neighbor(port), nb));
            }
        }
        slot.expect_acks = slot
            .expect_acks
            .checked_sub(1)
            .ok_or("unexpected walk ack")?;
        if slot.flush_started && slot.expect_acks == 0 {
            self.try_flush_done(node, slot, _out)?;
        }
        Ok(())
    }

    pub fn on_walk_over(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        port: usize,
        _block: u32,
        closing_flank: BagRef,
        out: &mut Sends,
    ) -> Result<(), String> {
        if slot.in_visited[port] {
            return Err("closing arc walked twice".into());
        }
        slot.in_visited[port] = true;
        let f = recv_reroot(node.id, node.neighbor(port), closing_flank);
        slot.flank_rev[port] = Some(f);
        self.link_if_second_crossing(node, slot, port, out)?;
        if !slot.token_waiting {
            return Err("face closed away from its owner".into());
        }
        self.next_walk(node, slot, out)
    }

    /// Cross-face link across a non-tree edge, created exactly once: when
    /// both directions of the edge have been walked and both flanks known.
    fn link_if_second_crossing(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        port: usize,
        out: &mut Sends,
    ) -> Result<(), String> {
        if slot.tree_port[port] {
            return Ok(());
        }
        if !(slot.out_visited[port] && slot.in_visited[port]) {
            return Ok(());
        }
        let (Some(a), Some(b)) = (slot.flank_out[port].clone(), slot.flank_rev[port].clone())
        else {
            return Ok(());
        };
        if a.host == b.host && a.seq == b.seq {
            return Ok(());
        }
        self.add_nbr(node, slot, a.clone(), b.clone(), out)?;
        self.add_nbr(node, slot, b, a, out)?;
        // consume so a later pass cannot double-link
        slot.flank_rev[port] = None;
        Ok(())
    }

    /// Registers `nbr` on the bag `target`, locally or via a routed note.
    fn add_nbr(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        target: BagRef,
        nbr: BagRef,
        out: &mut Sends,
    ) -> Result<(), String> {
        if target.host == node.id {
            let rerooted = nbr;
            if let Some(b) = slot.bags.get_mut(&target.seq) {
                if !b.nbrs.iter().any(|r| r.host == rerooted.host && r.seq == rerooted.seq) {
                    b.nbrs.push(rerooted);
                }
            }
            return Ok(());
        }
        let mut routed = nbr;
        // the note travels to target.host; express the nbr from there
        if routed.host != target.host {
            let mut path = Vec::new();
            if !target.path.is_empty() || routed.host != node.id {
                // route back through me when I am adjacent to both
                path.push(node.id);
                for &x in &routed.path {
                    if x != target.host && x != routed.host {
                        path.push(x);
                    }
                }
            }
            path.retain(|&x| x != target.host && x != routed.host);
            routed =
                BagRef { host: routed.host, seq: routed.seq, path };
        } else {
            routed = BagRef::local(routed.host, routed.seq);
        }
        let inner = EngMsg::CrossNote {
            key: self.key,
            to_bag: target.seq,
            nbr: routed,
        };
        self.route(node, &target, inner, out)
    }

    fn route(&self, node: &NodeView, to: &BagRef, inner: EngMsg, out: &mut Sends) -> Result<(), String> {
        let first_hop = to.path.first().copied().unwrap_or(to.host);
        let port = node
            .neighbors
            .iter()
            .position(|&u| u == first_hop)
            .ok_or_else(|| format!("no port from {} toward {first_hop}", node.id))?;
        if to.path.is_empty() {
            out.send(port, inner);
        } else {
            out.send(
                port,
                EngMsg::Relay {
                    key: self.key,
                    target: to.host,
                    rest: to.path[1..].to_vec(),
                    inner: Box::new(inner),
                },
            );
        }
        Ok(())
    }

    pub fn on_relay(
        &self,
        node: &NodeView,
        target: NodeId,
        rest: Vec<NodeId>,
        inner: EngMsg,
        out: &mut Sends,
    ) -> Result<(), String> {
        let next = rest.first().copied().unwrap_or(target);
        let port = node
            .neighbors
            .iter()
            .position(|&u| u == next)
            .ok_or_else(|| format!("relay at {}: no port toward {next}", node.id))?;
        if rest.is_empty() {
            out.send(port, inner);
        } else {
            out.send(
                port,
                EngMsg::Relay {
                    key: self.key,
                    target,
                    rest: rest[1..].to_vec(),
                    inner: Box::new(inner),
                },
            );
        }
        Ok(())
    }

    pub fn on_cross_note(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        to_bag: BagSeq,
        nbr: BagRef,
    ) -> Result<(), String> {
        if let Some(b) = slot.bags.get_mut(&to_bag) {
            if !b.nbrs.iter().any(|r| r.host == nbr.host && r.seq == nbr.seq) {
                b.nbrs.push(nbr);
            }
            Ok(())
        } else {
            Err(format!("cross note for unknown bag {to_bag} at {}", node.id))
        }
    }

    fn ensure_self_bag(&self, node: &NodeView, slot: &mut Slot, block: u32, under: BagSeq) {
        if slot.self_bags.contains_key(&block) {
            return;
        }
        let seq = slot.next_seq;
        slot.next_seq += 1;
        let mut bag = Bag::new(block, vec![vec![(node.id, anc_p(&slot.anc, node.id))]]);
        bag.nbrs.push(BagRef::local(node.id, under));
        slot.bags.insert(seq, bag);
        slot.bags
            .get_mut(&under)
            .expect("anchor bag")
            .nbrs
            .push(BagRef::local(node.id, seq));
        slot.self_bags.insert(block, seq);
        if self.parent_block_of(node, slot) != Some(block) {
            slot.pending_roots.push((block, seq));
        }
    }

    fn ensure_self_bag_remote(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        block: u32,
        under: BagRef,
        out: &mut Sends,
    ) -> Result<(), String> {
        if slot.self_bags.contains_key(&block) {
            return Ok(());
        }
        let seq = slot.next_seq;
        slot.next_seq += 1;
        let mut bag = Bag::new(block, vec![vec![(node.id, anc_p(&slot.anc, node.id))]]);
        bag.nbrs.push(under.clone());
        slot.bags.insert(seq, bag);
        slot.self_bags.insert(block, seq);
        if self.parent_block_of(node, slot) != Some(block) {
            slot.pending_roots.push((block, seq));
        }
        self.try_adopt(node, slot);
        self.add_nbr(node, slot, under, BagRef::local(node.id, seq), out)
    }

    /// Adopts pending block-root bags under this node's self bag of their
    /// block-cut parent, once that bag exists.
    fn try_adopt(&self, node: &NodeView, slot: &mut Slot) {
        if slot.pending_roots.is_empty() {
            return;
        }
        let Some(pb) = self.parent_block_of(node, slot) else {
            return;
        };
        let Some(&anchor) = slot.self_bags.get(&pb) else {
            return;
        };
        let pending = std::mem::take(&mut slot.pending_roots);
        let mut keep = Vec::new();
        for (blk, seq) in pending {
            if blk == pb || seq == anchor {
                keep.push((blk, seq));
                continue;
            }
            slot.bags
                .get_mut(&seq)
                .unwrap()
                .nbrs
                .push(BagRef::local(node.id, anchor));
            slot.bags
                .get_mut(&anchor)
                .unwrap()
                .nbrs
                .push(BagRef::local(node.id, seq));
        }
        slot.pending_roots = keep;
    }

    fn parent_block_of(&self, node: &NodeView, slot: &Slot) -> Option<u32> {
        if slot.ldepth == 0 {
            return if self.cfg.band_mode { slot.special_block } else { None };
        }
        let parent_id = slot.anc.get(1)?.0;
        let p = node.neighbors.iter().position(|&u| u == parent_id)?;
        slot.block_of_port[p]
    }

    // -----------------------------------------------------------------------
    // Flush barrier, then sweeps
    // -----------------------------------------------------------------------

    fn start_flush(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        slot.flush_reply = None;
        self.flush_node(node, slot, out)
    }

    fn flush_node(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        slot.flush_started = true;
        let kids: Vec<usize> = (0..node.degree())
            .filter(|&p| {
                matches!(
                    slot.dfs_state[p],
                    DfsPort::Closed | DfsPort::Backtracked | DfsPort::ChildBridge
                )
            })
            .collect();
        slot.flush_pending = kids.len();
        for p in &kids {
            out.send(*p, EngMsg::Flush { key: self.key });
        }
        self.try_flush_done(node, slot, out)
    }

    pub fn on_flush(&self, node: &NodeView, slot: &mut Slot, port: usize, out: &mut Sends) -> Result<(), String> {
        slot.flush_reply = Some(port);
        self.flush_node(node, slot, out)
    }

    pub fn on_flush_ack(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        slot.flush_pending = slot
            .flush_pending
            .checked_sub(1)
            .ok_or("unexpected flush ack")?;
        self.try_flush_done(node, slot, out)
    }

    pub fn try_flush_done(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        if !slot.flush_started || slot.flush_pending > 0 || slot.expect_acks > 0 || slot.flush_done {
            return Ok(());
        }
        // verify every in-scope arc was walked exactly once
        for p in 0..node.degree() {
            if slot.block_of_port[p].is_some()
                && !slot.bridge_port[p]
                && (!slot.out_visited[p] || !slot.in_visited[p])
            {
                return Err(format!(
                    "arc on port {p} of {} never walked (out {}, in {})",
                    node.id, slot.out_visited[p], slot.in_visited[p]
                ));
            }
        }
        slot.flush_done = true;
        if let Some(p) = slot.flush_reply.take() {
            out.send(p, EngMsg::FlushAck { key: self.key });
            return Ok(());
        }
        if slot.is_engine_root {
            return self.begin_sweeps(node, slot, out);
        }
        Ok(())
    }

    fn begin_sweeps(&self, node: &NodeView, slot: &mut Slot, out: &mut Sends) -> Result<(), String> {
        // scope root bag: the self bag of the root block, or a fresh
        // singleton when the boundary block carried no real edges
        let root_seq = match slot
            .special_block
            .and_then(|b| slot.self_bags.get(&b).copied())
        {
            Some(s) => s,
            None => match slot.bags.keys().next().copied().filter(|_| !self.cfg.band_mode) {
                Some(_) => *slot
                    .self_bags
                    .values()
                    .next()
                    .or_else(|| slot.bags.keys().next())
                    .expect("leader hosts a bag"),
                None => {
                    let seq = slot.next_seq;
                    slot.next_seq += 1;
                    slot.bags.insert(
                        seq,
                        Bag::new(
                            u32::MAX,
                            vec![vec![(node.id, anc_p(&slot.anc, node.id))]],
                        ),
                    );
                    seq
                }
            },
        };
        let pending = std::mem::take(&mut slot.pending_roots);
        for (_, seq) in pending {
            if seq == root_seq {
                continue;
            }
            slot.bags
                .get_mut(&seq)
                .unwrap()
                .nbrs
                .push(BagRef::local(node.id, root_seq));
            slot.bags
                .get_mut(&root_seq)
                .unwrap()
                .nbrs
                .push(BagRef::local(node.id, seq));
        }
        slot.root_bag = Some(root_seq);
        {
            let b = slot.bags.get_mut(&root_seq).unwrap();
            b.oriented = true;
            b.parent = None;
        }
        self.send_orient_children(node, slot, root_seq, out)
    }

    fn send_orient_children(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        seq: BagSeq,
        out: &mut Sends,
    ) -> Result<(), String> {
        let (kids, verts) = {
            let b = &slot.bags[&seq];
            let kids: Vec<BagRef> = b
                .nbrs
                .iter()
                .enumerate()
                .filter(|(i, _)| Some(*i) != b.parent)
                .map(|(_, r)| r.clone())
                .collect();
            (kids, b.verts())
        };
        // pending must be set before any local child completes inline
        slot.bags.get_mut(&seq).unwrap().pending = kids.len();
        if kids.is_empty() {
            return self.bag_facts_up(node, slot, seq, out);
        }
        let self_ref = BagRef::local(node.id, seq);
        for nb in kids {
            let from = reroot_for(&nb, &self_ref);
            self.send_bag_msg(
                node,
                slot,
                nb,
                BagBody::Orient {
                    from,
                    parent_verts: verts.clone(),
                },
                out,
            )?;
        }
        Ok(())
    }

    fn send_bag_msg(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        to: BagRef,
        body: BagBody,
        out: &mut Sends,
    ) -> Result<(), String> {
        if to.host == node.id {
            return self.on_bag_msg(node, slot, to.seq, body, out);
        }
        let inner = EngMsg::BagMsg {
            key: self.key,
            to: to.seq,
            body,
        };
        self.route(node, &to, inner, out)
    }

    pub fn on_bag_msg(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        to: BagSeq,
        body: BagBody,
        out: &mut Sends,
    ) -> Result<(), String> {
        match body {
            BagBody::Orient { from, parent_verts } => {
                {
                    let b = slot
                        .bags
                        .get_mut(&to)
                        .ok_or_else(|| format!("orient: bag {to} missing at {}", node.id))?;
                    if b.oriented {
                        return Err(format!("bag {to} at {} oriented twice (not a tree)", node.id));
                    }
                    b.oriented = true;
                    b.parent_verts = parent_verts;
                    let idx = b
                        .nbrs
                        .iter()
                        .position(|r| r.host == from.host && r.seq == from.seq)
                        .unwrap_or_else(|| {
                            b.nbrs.push(from.clone());
                            b.nbrs.len() - 1
                        });
                    b.parent = Some(idx);
                    // refresh the parent ref with the routable version
                    b.nbrs[idx] = from;
                }
                self.send_orient_children(node, slot, to, out)
            }
            BagBody::FactsUp { pairs } => {
                let ready = {
                    let b = slot.bags.get_mut(&to).ok_or("factsup: bag missing")?;
                    let mine: BTreeSet<NodeId> = b.verts().into_iter().collect();
                    for (u, v) in pairs {
                        if mine.contains(&u) && mine.contains(&v) {
                            b.facts.insert((u.min(v), u.max(v)));
                        }
                    }
                    b.pending = b.pending.checked_sub(1).ok_or("factsup: unexpected")?;
                    b.pending == 0
                };
                if ready {
                    self.bag_facts_up(node, slot, to, out)?;
                }
                Ok(())
            }
            BagBody::FactsDown { pairs } => {
                {
                    let b = slot.bags.get_mut(&to).ok_or("factsdown: bag missing")?;
                    let mine: BTreeSet<NodeId> = b.verts().into_iter().collect();
                    for (u, v) in pairs {
                        if mine.contains(&u) && mine.contains(&v) {
                            b.facts.insert((u.min(v), u.max(v)));
                        }
                    }
                }
                self.bag_facts_down(node, slot, to, out)
            }
            BagBody::ResolveUp { counts, tri } => {
                let ready = {
                    let b = slot.bags.get_mut(&to).ok_or("resolve: bag missing")?;
                    for (v, c) in counts {
                        *b.deg_counts.entry(v).or_insert(0) += c;
                    }
                    b.tri.extend(tri);
                    b.pending = b.pending.checked_sub(1).ok_or("resolve: unexpected")?;
                    b.pending == 0
                };
                if ready {
                    self.bag_resolve(node, slot, to, out)?;
                }
                Ok(())
            }
            BagBody::ResultsDown { bits } => self.bag_results(node, slot, to, bits, out),
            BagBody::ResAck => {
                let done = {
                    let b = slot.bags.get_mut(&to).ok_or("resack: bag missing")?;
                    b.pending = b.pending.checked_sub(1).ok_or("resack: unexpected")?;
                    b.pending == 0
                };
                if done {
                    self.bag_res_done(node, slot, to, out)?;
                }
                Ok(())
            }
            BagBody::DpUp {
                profiles,
                verts,
                dists,
            } => {
                let ready = {
                    let b = slot.bags.get_mut(&to).ok_or("dp: bag missing")?;
                    let s = match self.cfg.task {
                        EvalTask::Scattered { s, .. } => s,
                        _ => return Err("dp message outside the witness task".into()),
                    };
                    let cap = match self.cfg.task {
                        EvalTask::Scattered { r, .. } => (2 * r + 1) as u16,
                        _ => unreachable!(),
                    };
                    let myverts = b.verts();
                    b.child_dists.extend(
                        dists
                            .into_iter()
                            .filter(|(u, v, _)| myverts.contains(u) && myverts.contains(v)),
                    );
                    let mapped = map_profiles(&profiles, &verts, &myverts, cap);
                    b.profiles = if b.profiles.is_empty() {
                        mapped
                    } else {
                        join_profiles(&b.profiles, &mapped, s, cap)
                    };
                    b.pending = b.pending.checked_sub(1).ok_or("dp: unexpected")?;
                    b.pending == 0
                };
                if ready {
                    self.bag_dp(node, slot, to, out)?;
                }
                Ok(())
            }
        }
    }

    /// Leaf-or-complete bag: add local facts and push them up (or switch to
    /// the downward sweep at the root).
    fn bag_facts_up(&self, node: &NodeView, slot: &mut Slot, seq: BagSeq, out: &mut Sends) -> Result<(), String> {
        let (parent, pairs) = {
            let b = slot.bags.get_mut(&seq).ok_or("bag missing")?;
            let vset: BTreeSet<NodeId> = b.verts().into_iter().collect();
            for list in &b.lists {
                for w in list.windows(2) {
                    let (a, c) = (w[0].0, w[1].0);
                    b.facts.insert((a.min(c), a.max(c)));
                }
            }
            for &nb in node.neighbors.iter() {
                if vset.contains(&nb) && vset.contains(&node.id) {
                    b.facts.insert((node.id.min(nb), node.id.max(nb)));
                }
            }
            (
                b.parent.map(|i| b.nbrs[i].clone()),
                b.facts.iter().copied().collect::<Vec<_>>(),
            )
        };
        match parent {
            Some(p) => self.send_bag_msg(node, slot, p, BagBody::FactsUp { pairs }, out),
            None => self.bag_facts_down(node, slot, seq, out),
        }
    }

    fn bag_facts_down(&self, node: &NodeView, slot: &mut Slot, seq: BagSeq, out: &mut Sends) -> Result<(), String> {
        let (kids, pairs) = {
            let b = slot.bags.get_mut(&seq).ok_or("bag missing")?;
            let kids: Vec<BagRef> = b
                .nbrs
                .iter()
                .enumerate()
                .filter(|(i, _)| Some(*i) != b.parent)
                .map(|(_, r)| r.clone())
                .collect();
            b.pending = kids.len();
            (kids, b.facts.iter().copied().collect::<Vec<_>>())
        };
        let leaf = kids.is_empty();
        for k in &kids {
            self.send_bag_msg(node, slot, k.clone(), BagBody::FactsDown { pairs: pairs.clone() }, out)?;
        }
        if leaf {
            self.bag_resolve(node, slot, seq, out)?;
        }
        Ok(())
    }

    /// Children resolved: count newly-topped adjacent pairs, detect local
    /// triangles, finalize dropped vertices, then push partials up.
    fn bag_resolve(&self, node: &NodeView, slot: &mut Slot, seq: BagSeq, out: &mut Sends) -> Result<(), String> {
        if matches!(self.cfg.task, EvalTask::Scattered { .. }) {
            return self.bag_dp(node, slot, seq, out);
        }
        let (parent, counts, tri) = {
            let b = slot.bags.get_mut(&seq).ok_or("bag missing")?;
            let verts = b.verts();
            let pverts: BTreeSet<NodeId> = b.parent_verts.iter().copied().collect();
            let is_root = b.parent.is_none();
            for i in 0..verts.len() {
                for j in (i + 1)..verts.len() {
                    let (u, v) = (verts[i], verts[j]);
                    if b.facts.contains(&(u, v))
                        && (is_root || !(pverts.contains(&u) && pverts.contains(&v)))
                    {
                        *b.deg_counts.entry(u).or_insert(0) += 1;
                        *b.deg_counts.entry(v).or_insert(0) += 1;
                    }
                }
            }
            for i in 0..verts.len() {
                for j in (i + 1)..verts.len() {
                    for k in (j + 1)..verts.len() {
                        let (a, c, d) = (verts[i], verts[j], verts[k]);
                        if b.facts.contains(&(a, c))
                            && b.facts.contains(&(a, d))
                            && b.facts.contains(&(c, d))
                        {
                            b.tri.insert(a);
                            b.tri.insert(c);
                            b.tri.insert(d);
                        }
                    }
                }
            }
            for &v in &verts {
                let dropped = is_root || !pverts.contains(&v);
                if dropped {
                    let bit = match &self.cfg.task {
                        EvalTask::PsiBits { psi } => match psi {
                            Psi::True => true,
                            Psi::False => false,
                            Psi::MinDeg(d) => b.deg_counts.get(&v).copied().unwrap_or(0) >= *d,
                            Psi::Triangle | Psi::BallCycle(1) => b.tri.contains(&v),
                            Psi::BallTree(1) => !b.tri.contains(&v),
                            other => {
                                return Err(format!("psi {other:?} not served by the bag sweep"))
                            }
                        },
                        EvalTask::Scattered { .. } => unreachable!(),
                    };
                    b.results.insert(v, bit);
                }
            }
            let counts: Vec<(NodeId, u32)> = b
                .deg_counts
                .iter()
                .filter(|(v, _)| pverts.contains(*v))
                .map(|(v, c)| (*v, *c))
                .collect();
            let tri: Vec<NodeId> = b.tri.iter().filter(|v| pverts.contains(*v)).copied().collect();
            (b.parent.map(|i| b.nbrs[i].clone()), counts, tri)
        };
        match parent {
            Some(p) => self.send_bag_msg(node, slot, p, BagBody::ResolveUp { counts, tri }, out),
            None => self.bag_results(node, slot, seq, Vec::new(), out),
        }
    }

    fn bag_results(
        &self,
        node: &NodeView,
        slot: &mut Slot,
        seq: BagSeq,
        bits: Vec<(NodeId, bool)>,
        out: &mut Sends,
    ) -> Result<(), String> {
        let (kids, down, own_bit) = {
            let b = slot.bags.get_mut(&seq).ok_or("bag missing")?;
            for (v, bit) in bits {
                b.results.entry(v).or_insert(bit);
            }
            let verts = b.verts();
            let down: Vec<(NodeId, bool)> = verts
                .iter()
                .filter_map(|v| b.results.get(v).map(|&bit| (*v, bit)))
                .collect();
            let kids: Vec<BagRef> = b
                .nbrs
                .iter()
                .enumerate()
                .filter(|(i, _)| Some(*i) != b.parent)
                .map(|(_, r)| r.clone())
                .collect();
            b.pending = kids.len();
            (kids, down, b.results.get(&node.id).copied())
        };
        if let Some(bit) = own_bit {
            if slot.psi_bit.is_none() {
                slot.psi_bit = Some(bit);
            }
        }
        for k in &kids {
            self.send_bag_msg(node, slot, k.clone(), BagBody::ResultsDown { bits: down.clone() }, out)?;
        }
        if kids.is_empty() {
            self.bag_res_done(node, slot, seq, out)?;
        }
        Ok(())
    }

    fn bag_res_done(&self, node: &NodeView, slot: &mut Slot, seq: BagSeq, out: &mut Sends) -> Result<(), String> {
        let parent = {
            let b = slot.bags.get(&seq).ok_or("bag missing")?;
            b.parent.map(|i| b.nbrs[i].clone())
        };
        match parent {
            Some(p) => self.send_bag_msg(node, slot, p, BagBody::ResAck, out),
            None => {
                out.events.push(EngineEvent::ScopeDone { key: self.key });
                Ok(())
            }
        }
    }

    // -----------------------------------------------------------------------
    // Witness DP over the bag tree
    // -----------------------------------------------------------------------

    fn bag_dp(&self, node: &NodeView, slot: &mut Slot, seq: BagSeq, out: &mut Sends) -> Result<(), String> {
        let EvalTask::Scattered { r, s } = self.cfg.task else {
            return Err("dp sweep outside the witness task".into());
        };
        let cap = (2 * r + 1) as u16;
        let (parent, profiles, verts, dist_export) = {
            let b = slot.bags.get_mut(&seq).ok_or("bag missing")?;
            let verts = b.verts();
            let k = verts.len();
            let mut dmat = vec![vec![cap; k]; k];
            for (i, row) in dmat.iter_mut().enumerate() {
                row[i] = 0;
            }
            for (u, v) in b.facts.iter() {
                if let (Ok(i), Ok(j)) = (verts.binary_search(u), verts.binary_search(v)) {
                    dmat[i][j] = dmat[i][j].min(1);
                    dmat[j][i] = dmat[j][i].min(1);
                }
            }
            for (u, v, d) in b.child_dists.iter() {
                if let (Ok(i), Ok(j)) = (verts.binary_search(u), verts.binary_search(v)) {
                    dmat[i][j] = dmat[i][j].min(*d);
                    dmat[j][i] = dmat[j][i].min(*d);
                }
            }
            for p in 0..k {
                for i in 0..k {
                    for j in 0..k {
                        let alt = (dmat[i][p] + dmat[p][j]).min(cap);
                        if alt < dmat[i][j] {
                            dmat[i][j] = alt;
                        }
                    }
                }
            }
            if b.profiles.is_empty() {
                b.profiles.push((Vec::new(), Vec::new(), 0));
            }
            let pverts: BTreeSet<NodeId> = b.parent_verts.iter().copied().collect();
            let is_root = b.parent.is_none();
            let drops: Vec<usize> = (0..k)
                .filter(|&i| is_root || !pverts.contains(&verts[i]))
                .collect();
            let p_of: Vec<bool> = verts.iter().map(|v| b.p_of(*v)).collect();
            let mut next: Vec<DpProfile> = Vec::new();
            for (mut vecs, mut pw, count) in b.profiles.drain(..) {
                for vec in vecs.iter_mut() {
                    if vec.len() != k {
                        return Err("dp vector arity mismatch".into());
                    }
                    for i in 0..k {
                        let mut best = vec[i];
                        for j in 0..k {
                            best = best.min((vec[j] + dmat[j][i]).min(cap));
                        }
                        vec[i] = best;
                    }
                }
                let total = vecs.len();
                let mut dead = false;
                for j in 1..total {
                    for i in 0..j {
                        let idx = j * (j - 1) / 2 + i;
                        let mut pd = pw[idx];
                        for y in 0..k {
                            pd = pd.min((vecs[i][y] + vecs[j][y]).min(cap));
                        }
                        pw[idx] = pd;
                        if pd < cap {
                            dead = true;
                        }
                    }
                }
                if dead {
                    continue;
                }
                let mut stack = vec![(vecs, pw, count, 0usize)];
                while let Some((cv, cp, cc, di)) = stack.pop() {
                    if di == drops.len() {
                        next.push((cv, cp, cc));
                        continue;
                    }
                    let pos = drops[di];
                    stack.push((cv.clone(), cp.clone(), cc, di + 1));
                    if cc < s && p_of[pos] && cv.iter().all(|vec| vec[pos] >= cap) {
                        let mut nv = cv;
                        let mut np = cp;
                        let newvec: Vec<u16> = (0..k).map(|i| dmat[pos][i]).collect();
                        let old = nv.len();
                        nv.push(newvec);
                        let mut ok = true;
                        for i in 0..old {
                            let mut pd = cap;
                            for y in 0..k {
                                pd = pd.min((nv[i][y] + nv[old][y]).min(cap));
                            }
                            if pd < cap {
                                ok = false;
                            }
                            np.push(pd);
                        }
                        if ok {
                            stack.push((nv, np, cc + 1, di + 1));
                        }
                    }
                }
            }
            dedup_profiles(&mut next);
            if next.len() > 100_000 {
                return Err("witness DP profile explosion".into());
            }
            b.profiles = next;
            let mut dist_export = Vec::new();
            for i in 0..k {
                for j in (i + 1)..k {
                    if dmat[i][j] < cap {
                        dist_export.push((verts[i], verts[j], dmat[i][j]));
                    }
                }
            }
            (
                b.parent.map(|i| b.nbrs[i].clone()),
                b.profiles.clone(),
                verts,
                dist_export,
            )
        };
        match parent {
            Some(p) => self.send_bag_msg(
                node,
                slot,
                p,
                BagBody::DpUp {
                    profiles,
                    verts,
                    dists: dist_export,
                },
                out,
            ),
            None => {
                let best = profiles.iter().map(|(_, _, c)| *c).max().unwrap_or(0);
                slot.scope_count = Some(best);
                out.events.push(EngineEvent::Count {
                    key: self.key,
                    count: best,
                });
                out.events.push(EngineEvent::ScopeDone { key: self.key });
                Ok(())
            }
        }
    }
}

fn anc_p(anc: &AncList, v: NodeId) -> bool {
    anc.iter().find(|e| e.0 == v).map(|e| e.1).unwrap_or(false)
}

fn their_anc_or_mine(theirs: AncList, mine: &AncList, me: NodeId) -> AncList {
    // the deeper endpoint's ancestor list contains both bridge endpoints
    if mine.iter().any(|e| Some(e.0) == theirs.first().map(|t| t.0)) && mine.len() > theirs.len() {
        mine.clone()
    } else if theirs.iter().any(|e| e.0 == me) {
        theirs
    } else {
        mine.clone()
    }
}

/// Computes a routable `from` reference for a neighbor at `nb`: the reverse
/// direction of the path we would use toward it.
fn reroot_for(nb: &BagRef, self_ref: &BagRef) -> BagRef {
    let mut path: Vec<NodeId> = nb.path.iter().rev().copied().collect();
    path.retain(|&x| x != self_ref.host && x != nb.host);
    BagRef {
        host: self_ref.host,
        seq: self_ref.seq,
        path,
    }
}

fn dedup_profiles(profiles: &mut Vec<DpProfile>) {
    let mut best: HashMap<(Vec<Vec<u16>>, Vec<u16>), u32> = HashMap::new();
    for (v, p, c) in profiles.drain(..) {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].cmp(&v[b]));
        let sv: Vec<Vec<u16>> = idx.iter().map(|&i| v[i].clone()).collect();
        let mut sp = vec![0u16; p.len()];
        for j in 1..idx.len() {
            for i in 0..j {
                let (a, b) = (idx[i].min(idx[j]), idx[i].max(idx[j]));
                sp[j * (j - 1) / 2 + i] = p[b * (b - 1) / 2 + a];
            }
        }
        let e = best.entry((sv, sp)).or_insert(c);
        *e = (*e).max(c);
    }
    let mut out: Vec<DpProfile> = best.into_iter().map(|((v, p), c)| (v, p, c)).collect();
    out.sort();
    *profiles = out;
}

fn map_profiles(
    profiles: &[DpProfile],
    from_verts: &[NodeId],
    to_verts: &[NodeId],
    cap: u16,
) -> Vec<DpProfile> {
    profiles
        .iter()
        .map(|(vecs, pw, c)| {
            let mapped: Vec<Vec<u16>> = vecs
                .iter()
                .map(|vec| {
                    to_verts
                        .iter()
                        .map(|tv| {
                            from_verts
                                .iter()
                                .position(|fv| fv == tv)
                                .map(|i| vec[i])
                                .unwrap_or(cap)
                        })
                        .collect()
                })
                .collect();
            (mapped, pw.clone(), *c)
        })
        .collect()
}

fn join_profiles(a: &[DpProfile], b: &[DpProfile], s: u32, cap: u16) -> Vec<DpProfile> {
    let mut out = Vec::new();
    for (v1, p1, c1) in a {
        for (v2, p2, c2) in b {
            if c1 + c2 > s {
                continue;
            }
            let mut vecs = v1.clone();
            vecs.extend(v2.iter().cloned());
            let n1 = v1.len();
            let total = vecs.len();
            let mut pw = vec![cap; total * (total - 1) / 2];
            for j in 1..n1 {
                for i in 0..j {
                    pw[j * (j - 1) / 2 + i] = p1[j * (j - 1) / 2 + i];
                }
            }
            for j in 1..v2.len() {
                for i in 0..j {
                    pw[(n1 + j) * (n1 + j - 1) / 2 + (n1 + i)] = p2[j * (j - 1) / 2 + i];
                }
            }
            out.push((vecs, pw, c1 + c2));
        }
    }
    dedup_profiles(&mut out);
    out
}
