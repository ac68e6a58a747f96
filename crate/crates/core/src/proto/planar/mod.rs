//! Planar pipeline: cover intervals C(v), kernel intervals D(v) by local
//! induction, per-band block decompositions with a virtual root, face-walk
//! tree-decomposition construction, per-component evaluation over the bags,
//! and the witness phase over the induced I-subgraph.

pub mod engine;
pub mod pipeline;

pub use pipeline::{planar_p_oracle, PlanarPipeline};

use crate::bfs::BfsTree;
use crate::graph::{Graph, NodeId};
use crate::netsim::{NodeView, Outbox, Payload, Protocol};

/// Integer interval of band indices; empty is the reserved (1, 0) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IdxInterval {
    pub lo: u32,
    pub hi: u32,
}

impl IdxInterval {
    pub fn empty() -> Self {
        IdxInterval { lo: 1, hi: 0 }
    }

    pub fn new(lo: u32, hi: u32) -> Self {
        if lo > hi {
            Self::empty()
        } else {
            IdxInterval { lo, hi }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, i: u32) -> bool {
        self.lo <= i && i <= self.hi
    }

    pub fn intersect(&self, other: &IdxInterval) -> IdxInterval {
        if self.is_empty() || other.is_empty() {
            return Self::empty();
        }
        Self::new(self.lo.max(other.lo), self.hi.min(other.hi))
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> {
        self.lo..=self.hi.max(self.lo.wrapping_sub(1))
    }
}

/// Cover interval per the broadcast formula: {0} when the tree is shallow,
/// otherwise [max(depth-2r, 0), min(depth, treeDepth-2r)].
pub fn cover_interval(depth: u32, tree_depth: u32, r: u32) -> IdxInterval {
    if tree_depth <= 2 * r {
        IdxInterval::new(0, 0)
    } else {
        IdxInterval::new(depth.saturating_sub(2 * r), depth.min(tree_depth - 2 * r))
    }
}

/// Centralized cover computation for cross-checks.
pub fn cover_oracle(bfs: &BfsTree, r: u32) -> Vec<IdxInterval> {
    let mut out = vec![IdxInterval::empty()];
    for v in 1..bfs.depth.len() as u32 {
        out.push(cover_interval(bfs.depth_of(v), bfs.tree_depth, r));
    }
    out
}

/// Centralized kernel computation: D(v) = {i : N_r(v) inside G[i, i+2r]},
/// directly from the definition.
pub fn kernel_oracle(g: &Graph, bfs: &BfsTree, r: u32) -> Vec<IdxInterval> {
    let mut out = vec![IdxInterval::empty()];
    for v in g.nodes() {
        let ball = g.ball_nodes(v, r).expect("valid id");
        let dmin = ball.iter().map(|&w| bfs.depth_of(w)).min().unwrap();
        let dmax = ball.iter().map(|&w| bfs.depth_of(w)).max().unwrap();
        // N_r(v) in G[i, i+2r] iff i <= dmin and dmax <= i + 2r,
        // also i must be a valid band index
        let hi_band = if bfs.tree_depth <= 2 * r {
            0
        } else {
            bfs.tree_depth - 2 * r
        };
        let lo = dmax.saturating_sub(2 * r);
        let hi = dmin.min(hi_band);
        out.push(IdxInterval::new(lo, hi));
    }
    out
}

// ---------------------------------------------------------------------------
// Phase II: tree depth fold plus cover broadcast
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum CoverMsg {
    TreeDepth,
    AckTreeDepth(u32),
    StartCover(u32),
    AckCover,
}

impl Payload for CoverMsg {
    fn kind(&self) -> &'static str {
        match self {
            CoverMsg::TreeDepth => "TREEDEPTH",
            CoverMsg::AckTreeDepth(_) => "ACKTREEDEPTH",
            CoverMsg::StartCover(_) => "STARTCOVER",
            CoverMsg::AckCover => "ACKCOVER",
        }
    }
    fn size_bits(&self, idb: u64) -> u64 {
        match self {
            CoverMsg::TreeDepth | CoverMsg::AckCover => 4,
            CoverMsg::AckTreeDepth(_) | CoverMsg::StartCover(_) => 4 + idb,
        }
    }
}

#[derive(Clone)]
pub struct CoverState {
    pub tree_depth: u32,
    pub cover: IdxInterval,
    ack_depth_pending: usize,
    ack_cover_pending: usize,
    pub done: bool,
}

/// Computes treeDepth by a fold over the BFS tree, then broadcasts it so
/// every node derives its cover interval: two messages per tree edge for the
/// depth fold and two for the cover broadcast/ack.
pub struct CoverProtocol {
    pub r: u32,
}

impl Protocol for CoverProtocol {
    type State = CoverState;
    type Msg = CoverMsg;

    fn init(&self, node: &NodeView) -> CoverState {
        CoverState {
            tree_depth: 0,
            cover: IdxInterval::empty(),
            ack_depth_pending: node.child_ports().len(),
            ack_cover_pending: node.child_ports().len(),
            done: false,
        }
    }

    fn start(&self, node: &NodeView, st: &mut CoverState, out: &mut Outbox<CoverMsg>) {
        st.tree_depth = 0;
        out.send_all(node.child_ports(), CoverMsg::TreeDepth);
        // a requester with no children is a single-node tree; n >= 2 keeps
        // this from happening, but stay defensive
        if node.child_ports().is_empty() {
            st.cover = cover_interval(0, 0, self.r);
            st.done = true;
        }
    }

    fn handle(
        &self,
        node: &NodeView,
        st: &mut CoverState,
        _port: usize,
        msg: CoverMsg,
        out: &mut Outbox<CoverMsg>,
    ) -> Result<(), String> {
        match msg {
            CoverMsg::TreeDepth => {
                st.tree_depth = node.depth;
                if node.is_leaf() {
                    let p = node.parent_port.ok_or("leaf without parent")?;
                    out.send(p, CoverMsg::AckTreeDepth(st.tree_depth));
                } else {
                    out.send_all(node.child_ports(), CoverMsg::TreeDepth);
                }
            }
            CoverMsg::AckTreeDepth(sd) => {
                st.tree_depth = st.tree_depth.max(sd);
                st.ack_depth_pending -= 1;
                if st.ack_depth_pending == 0 {
                    if node.is_requester {
                        st.cover = cover_interval(node.depth, st.tree_depth, self.r);
                        out.send_all(node.child_ports(), CoverMsg::StartCover(st.tree_depth));
                    } else {
                        let p = node.parent_port.ok_or("inner node without parent")?;
                        out.send(p, CoverMsg::AckTreeDepth(st.tree_depth));
                    }
                }
            }
            CoverMsg::StartCover(td) => {
                st.tree_depth = td;
                st.cover = cover_interval(node.depth, td, self.r);
                if node.is_leaf() {
                    let p = node.parent_port.ok_or("leaf without parent")?;
                    out.send(p, CoverMsg::AckCover);
                } else {
                    out.send_all(node.child_ports(), CoverMsg::StartCover(td));
                }
            }
            CoverMsg::AckCover => {
                st.ack_cover_pending -= 1;
                if st.ack_cover_pending == 0 {
                    if node.is_requester {
                        st.done = true;
                    } else {
                        let p = node.parent_port.ok_or("inner node without parent")?;
                        out.send(p, CoverMsg::AckCover);
                    }
                }
            }
        }
        Ok(())
    }

    fn requester_final(&self, st: &CoverState) -> Option<bool> {
        st.done.then_some(true)
    }
}

// ---------------------------------------------------------------------------
// Phase III: kernel intervals by r rounds of neighbor intersection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum KernelMsg {
    Init,
    AckInit,
    StartKernel,
    Kernel { i: u32, nd: IdxInterval },
    KernelOver,
}

impl Payload for KernelMsg {
    fn kind(&self) -> &'static str {
        match self {
            KernelMsg::Init => "INIT",
            KernelMsg::AckInit => "ACKINIT",
            KernelMsg::StartKernel => "STARTKERNEL",
            KernelMsg::Kernel { .. } => "KERNEL",
            KernelMsg::KernelOver => "KERNELOVER",
        }
    }
    fn size_bits(&self, idb: u64) -> u64 {
        match self {
            KernelMsg::Kernel { .. } => 4 + 8 + 2 * idb, // round tag + interval
            _ => 4,
        }
    }
}

#[derive(Clone)]
pub struct KernelState {
    /// Index of the next induction step to complete.
    pub idx: u32,
    pub d: IdxInterval,
    buffered: std::collections::BTreeMap<u32, Vec<IdxInterval>>,
    started: bool,
    kernel_over: bool,
    kids_init: usize,
    kids_over: usize,
    reported_over: bool,
    pub done: bool,
}

/// D(v) = D_r(v) by induction: each round intersects the cover with all
/// neighbors' previous-round intervals; at most r messages per direction.
pub struct KernelProtocol {
    pub r: u32,
    /// Cover intervals from phase II, indexed by node id.
    pub cover: Vec<IdxInterval>,
}

impl KernelProtocol {
    fn send_round(&self, node: &NodeView, st: &mut KernelState, out: &mut Outbox<KernelMsg>) {
        out.send_all(
            0..node.degree(),
            KernelMsg::Kernel {
                i: st.idx - 1,
                nd: st.d,
            },
        );
    }

    fn consume_rounds(&self, node: &NodeView, st: &mut KernelState, out: &mut Outbox<KernelMsg>) {
        loop {
            if st.idx > self.r {
                break;
            }
            let want = st.idx - 1;
            let ready = st
                .buffered
                .get(&want)
                .map(|v| v.len() == node.degree())
                .unwrap_or(false);
            if !ready {
                break;
            }
            for nd in st.buffered.remove(&want).unwrap() {
                st.d = st.d.intersect(&nd);
            }
            st.idx += 1;
            if st.idx <= self.r {
                self.send_round(node, st, out);
            } else {
                st.kernel_over = true;
                self.try_report_over(node, st, out);
            }
        }
    }

    fn try_report_over(&self, node: &NodeView, st: &mut KernelState, out: &mut Outbox<KernelMsg>) {
        if st.kernel_over
            && st.kids_over == node.child_ports().len()
            && !st.reported_over
        {
            st.reported_over = true;
            if node.is_requester {
                st.done = true;
            } else if let Some(p) = node.parent_port {
                out.send(p, KernelMsg::KernelOver);
            }
        }
    }

    fn begin_kernel(&self, node: &NodeView, st: &mut KernelState, out: &mut Outbox<KernelMsg>) {
        if st.started {
            return;
        }
        st.started = true;
        if !node.is_leaf() {
            out.send_all(node.child_ports(), KernelMsg::StartKernel);
        }
        self.send_round(node, st, out);
        self.consume_rounds(node, st, out);
    }
}

impl Protocol for KernelProtocol {
    type State = KernelState;
    type Msg = KernelMsg;

    fn init(&self, node: &NodeView) -> KernelState {
        KernelState {
            idx: 1,
            d: self.cover[node.id as usize],
            buffered: Default::default(),
            started: false,
            kernel_over: false,
            kids_init: 0,
            kids_over: 0,
            reported_over: false,
            done: false,
        }
    }

    fn start(&self, node: &NodeView, st: &mut KernelState, out: &mut Outbox<KernelMsg>) {
        out.send_all(node.child_ports(), KernelMsg::Init);
        if node.child_ports().is_empty() {
            self.begin_kernel(node, st, out);
        }
    }

    fn handle(
        &self,
        node: &NodeView,
        st: &mut KernelState,
        _port: usize,
        msg: KernelMsg,
        out: &mut Outbox<KernelMsg>,
    ) -> Result<(), String> {
        match msg {
            KernelMsg::Init => {
                if node.is_leaf() {
                    let p = node.parent_port.ok_or("leaf without parent")?;
                    out.send(p, KernelMsg::AckInit);
                } else {
                    out.send_all(node.child_ports(), KernelMsg::Init);
                }
            }
            KernelMsg::AckInit => {
                st.kids_init += 1;
                if st.kids_init == node.child_ports().len() {
                    if node.is_requester {
                        self.begin_kernel(node, st, out);
                    } else {
                        let p = node.parent_port.ok_or("inner node without parent")?;
                        out.send(p, KernelMsg::AckInit);
                    }
                }
            }
            KernelMsg::StartKernel => {
                self.begin_kernel(node, st, out);
            }
            KernelMsg::Kernel { i, nd } => {
                st.buffered.entry(i).or_default().push(nd);
                // rounds can arrive before the start broadcast
                self.begin_kernel(node, st, out);
                self.consume_rounds(node, st, out);
            }
            KernelMsg::KernelOver => {
                st.kids_over += 1;
                self.try_report_over(node, st, out);
            }
        }
        Ok(())
    }

    fn requester_final(&self, st: &KernelState) -> Option<bool> {
        st.done.then_some(true)
    }
}

/// Observer enforcing the neighbor-index proposition at every KERNEL
/// delivery: |idx(v) - idx(w)| <= 1 for adjacent nodes.
pub fn kernel_index_observer(
    g: &Graph,
) -> impl FnMut(&[KernelState], NodeId, NodeId, &'static str) -> Result<(), String> + '_ {
    move |states, src, dst, kind| {
        if kind != "KERNEL" {
            return Ok(());
        }
        let a = states[src as usize].idx as i64;
        let b = states[dst as usize].idx as i64;
        if (a - b).abs() > 1 {
            return Err(format!(
                "kernel index gap between {src} (idx {a}) and {dst} (idx {b})"
            ));
        }
        let _ = g;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfs::build_bfs_tree;
    use crate::netsim::{run, run_observed, RunConfig};

    fn p5() -> Graph {
        Graph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5)]).unwrap()
    }

    #[test]
    fn cover_p5_r1() {
        let g = p5();
        let t = build_bfs_tree(&g, 1);
        assert_eq!(t.tree_depth, 4);
        let res = run(&g, &t, &CoverProtocol { r: 1 }, 1, &RunConfig::default()).unwrap();
        let expect = [
            IdxInterval::new(0, 0),
            IdxInterval::new(0, 1),
            IdxInterval::new(0, 2),
            IdxInterval::new(1, 2),
            IdxInterval::new(2, 2),
        ];
        for v in g.nodes() {
            assert_eq!(res.states[v as usize].cover, expect[(v - 1) as usize], "v={v}");
            assert_eq!(res.states[v as usize].tree_depth, 4);
        }
    }

    #[test]
    fn cover_shallow_tree_is_zero() {
        let g = Graph::new(4, &[(1, 2), (1, 3), (1, 4)]).unwrap();
        let t = build_bfs_tree(&g, 1);
        let res = run(&g, &t, &CoverProtocol { r: 1 }, 1, &RunConfig::default()).unwrap();
        for v in g.nodes() {
            assert_eq!(res.states[v as usize].cover, IdxInterval::new(0, 0));
        }
    }

    #[test]
    fn cover_message_counts() {
        let g = p5();
        let t = build_bfs_tree(&g, 1);
        let res = run(&g, &t, &CoverProtocol { r: 1 }, 1, &RunConfig::default()).unwrap();
        for (_, dir) in &res.outcome.stats.links {
            assert_eq!(dir.count, 2, "2 per tree edge per direction");
        }
    }

    #[test]
    fn kernel_p5_hand_computed() {
        let g = p5();
        let t = build_bfs_tree(&g, 1);
        let cover = cover_oracle(&t, 1);
        let prog = KernelProtocol { r: 1, cover };
        let res = run(&g, &t, &prog, 1, &RunConfig::default()).unwrap();
        // node 3 (depth 2): [0,2] ∩ [0,1] ∩ [1,2] = {1}
        assert_eq!(res.states[3].d, IdxInterval::new(1, 1));
        let oracle = kernel_oracle(&g, &t, 1);
        for v in g.nodes() {
            assert_eq!(res.states[v as usize].d, oracle[v as usize], "v={v}");
        }
    }

    #[test]
    fn kernel_against_oracle_on_families() {
        for (inst, r) in [
            (crate::gen::generate(crate::gen::Family::Grid, 4, 0).unwrap(), 1),
            (crate::gen::generate(crate::gen::Family::Grid, 5, 0).unwrap(), 2),
            (crate::gen::generate(crate::gen::Family::Cycle, 12, 0).unwrap(), 1),
            (crate::gen::generate(crate::gen::Family::RandomTree, 20, 3).unwrap(), 1),
        ] {
            let g = inst.graph;
            let t = build_bfs_tree(&g, 1);
            let cover = cover_oracle(&t, r);
            let prog = KernelProtocol { r, cover };
            let mut obs = kernel_index_observer(&g);
            let res = run_observed(&g, &t, &prog, 1, &RunConfig::default(), &mut obs).unwrap();
            let oracle = kernel_oracle(&g, &t, r);
            for v in g.nodes() {
                assert_eq!(res.states[v as usize].d, oracle[v as usize], "v={v} r={r}");
            }
        }
    }

    #[test]
    fn kernel_r0_no_messages_needed() {
        // r=0 skips the protocol entirely at the pipeline level; the oracle
        // agrees that D = C
        let g = p5();
        let t = build_bfs_tree(&g, 1);
        let oracle = kernel_oracle(&g, &t, 0);
        let cover = cover_oracle(&t, 0);
        for v in g.nodes() {
            assert_eq!(oracle[v as usize], cover[v as usize]);
        }
    }

    #[test]
    fn kernel_message_count_bounded() {
        let g = crate::gen::generate(crate::gen::Family::Grid, 5, 0).unwrap().graph;
        let t = build_bfs_tree(&g, 1);
        let r = 2;
        let cover = cover_oracle(&t, r);
        let prog = KernelProtocol { r, cover };
        let res = run(&g, &t, &prog, 1, &RunConfig::default()).unwrap();
        for (_, dir) in &res.outcome.stats.links {
            let kernels = dir.per_kind.get("KERNEL").copied().unwrap_or(0);
            assert!(kernels <= r as u64, "at most r kernel messages per direction");
        }
    }

    #[test]
    fn empty_interval_handling() {
        let a = IdxInterval::new(3, 5);
        let b = IdxInterval::new(6, 8);
        assert!(a.intersect(&b).is_empty());
        assert_eq!(IdxInterval::empty(), IdxInterval { lo: 1, hi: 0 });
        assert!(!IdxInterval::empty().contains(0));
    }
}
