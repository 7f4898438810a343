//! Hypotheses segment tree: bottom-up merging of temporally adjacent nodes,
//! periodic query-conditioned pruning and leaf down-weighting.
//!
//! Every discrete decision goes through the `apply_*` functions and is
//! recorded in the tree's [`DecisionTrace`], so [`replay_tree`] reproduces a
//! build exactly from its trace.

use std::collections::HashSet;
use std::fmt;

use crate::config::Config;
use crate::error::{MhstError, Result};
use crate::linalg::{add, scaled};
use crate::params::ModelParams;
use crate::relevance::{
    combine_scores, linguistic_relevance_projected, project_query, visual_relevance,
};
use crate::trace::{DecisionTrace, TraceEvent};
use crate::types::{FrameFeatures, QueryEmbedding, Span};

/// Node identifier. Leaves are `0..N_v`; merged nodes count up from `N_v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Active,
    MergedAway,
    Pruned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNode {
    pub id: NodeId,
    pub span: Span,
    pub feature: Vec<f64>,
    pub children: Option<[NodeId; 2]>,
    /// Child features exactly as they were when this node was merged.
    pub child_inputs: Option<[Vec<f64>; 2]>,
    pub height: usize,
    pub state: NodeState,
    /// Last down-weighting factor applied (leaves only).
    pub leaf_weight_lambda: f64,
    /// Merge round that created this node; 0 for leaves.
    pub created_round: usize,
}

impl SegNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// What a prune scan removed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanOutcome {
    /// Every pruned non-leaf node, in event order.
    pub pruned: Vec<NodeId>,
    /// Leaves returned to the pool of roots.
    pub freed: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct SegTree {
    nodes: Vec<SegNode>,
    active_roots: Vec<NodeId>,
    round: usize,
    last_scan_round: usize,
    trace: DecisionTrace,
    /// Spans of nodes that failed a relevance check; never rebuilt.
    banned: HashSet<Span>,
    leaf_originals: Vec<Vec<f64>>,
    downweight_once: bool,
    dim: usize,
}

impl SegTree {
    pub fn nodes(&self) -> &[SegNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &SegNode {
        &self.nodes[id.0]
    }

    pub fn n_frames(&self) -> usize {
        self.leaf_originals.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Active roots in temporal order.
    pub fn active_roots(&self) -> &[NodeId] {
        &self.active_roots
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn trace(&self) -> &DecisionTrace {
        &self.trace
    }

    /// Leaf feature before any down-weighting.
    pub fn original_leaf_feature(&self, leaf: NodeId) -> &[f64] {
        &self.leaf_originals[leaf.0]
    }

    pub fn is_banned(&self, span: &Span) -> bool {
        self.banned.contains(span)
    }

    fn get(&self, id: NodeId) -> Result<&SegNode> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| MhstError::Topology(format!("unknown node {id}")))
    }

    fn insert_root(&mut self, id: NodeId) {
        let start = self.nodes[id.0].span.start;
        let pos = self
            .active_roots
            .partition_point(|r| self.nodes[r.0].span.start < start);
        self.active_roots.insert(pos, id);
    }

    fn remove_root(&mut self, id: NodeId) -> bool {
        match self.active_roots.iter().position(|&r| r == id) {
            Some(pos) => {
                self.active_roots.remove(pos);
                true
            }
            None => false,
        }
    }

    /// Non-leaf active roots created since the last prune scan.
    fn unaudited_roots(&self) -> Vec<NodeId> {
        self.active_roots
            .iter()
            .copied()
            .filter(|&id| {
                let n = &self.nodes[id.0];
                !n.is_leaf() && n.created_round > self.last_scan_round
            })
            .collect()
    }

    /// Assembles a tree from externally computed parts (used by the reference builder).
    pub(crate) fn from_parts(
        nodes: Vec<SegNode>,
        active_roots: Vec<NodeId>,
        round: usize,
        trace: DecisionTrace,
        leaf_originals: Vec<Vec<f64>>,
    ) -> SegTree {
        let dim = leaf_originals.first().map_or(0, Vec::len);
        SegTree {
            nodes,
            active_roots,
            round,
            last_scan_round: round,
            trace,
            banned: HashSet::new(),
            leaf_originals,
            downweight_once: false,
            dim,
        }
    }

    /// Checks every structural invariant of the tree.
    pub fn audit(&self) -> Result<()> {
        let bad = |m: String| Err(MhstError::Topology(m));
        let n = self.n_frames();
        let mut parent: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.0 != i {
                return bad(format!("node at slot {i} has id {}", node.id));
            }
            if node.feature.len() != self.dim {
                return bad(format!("node {i} feature length {}", node.feature.len()));
            }
            match node.children {
                None => {
                    if i >= n || node.height != 0 || node.span != Span::single(i) {
                        return bad(format!("leaf {i} malformed"));
                    }
                    if node.state == NodeState::Pruned {
                        return bad(format!("leaf {i} marked pruned"));
                    }
                }
                Some([l, r]) => {
                    if i < n {
                        return bad(format!("node {i} in leaf id range has children"));
                    }
                    let (ln, rn) = (self.get(l)?, self.get(r)?);
                    if l.0 >= i || r.0 >= i {
                        return bad(format!("node {i} created before its children"));
                    }
                    if ln.span.end + 1 != rn.span.start {
                        return bad(format!("children of {i} not adjacent"));
                    }
                    if node.span != (Span { start: ln.span.start, end: rn.span.end }) {
                        return bad(format!("node {i} span is not the union of its children"));
                    }
                    if node.height != ln.height.max(rn.height) + 1 {
                        return bad(format!("node {i} height inconsistent"));
                    }
                    // Children of a pruned node may be merged again, so only
                    // live parents count.
                    if node.state != NodeState::Pruned {
                        for c in [l, r] {
                            if parent[c.0].is_some() {
                                return bad(format!("node {c} has two parents"));
                            }
                            parent[c.0] = Some(node.id);
                        }
                    }
                }
            }
        }

        // Active roots: sorted, disjoint, covering every frame.
        let mut next = 0;
        for &id in &self.active_roots {
            let node = self.get(id)?;
            if node.state != NodeState::Active {
                return bad(format!("root {id} is not active"));
            }
            if node.span.start != next {
                return bad(format!("active roots do not partition the frames at {next}"));
            }
            next = node.span.end + 1;
        }
        if next != n {
            return bad(format!("active roots cover {next} of {n} frames"));
        }
        let roots: HashSet<NodeId> = self.active_roots.iter().copied().collect();
        for node in &self.nodes {
            if node.state == NodeState::Active && !roots.contains(&node.id) {
                return bad(format!("node {} active but not a root", node.id));
            }
        }
        // Everything under an active root is merged away.
        for &id in &self.active_roots {
            let mut stack: Vec<NodeId> = self.nodes[id.0].children.into_iter().flatten().collect();
            while let Some(c) = stack.pop() {
                let child = &self.nodes[c.0];
                if child.state != NodeState::MergedAway {
                    return bad(format!("descendant {c} of active root {id} is {:?}", child.state));
                }
                stack.extend(child.children.into_iter().flatten());
            }
        }
        Ok(())
    }
}

/// One leaf per frame, all of them active roots.
pub fn init_leaves(features: &FrameFeatures) -> Result<SegTree> {
    let n = features.n_frames();
    if n == 0 {
        return Err(MhstError::InvalidInput("video has no frames".into()));
    }
    let nodes: Vec<SegNode> = (0..n)
        .map(|i| SegNode {
            id: NodeId(i),
            span: Span::single(i),
            feature: features.frame(i).to_vec(),
            children: None,
            child_inputs: None,
            height: 0,
            state: NodeState::Active,
            leaf_weight_lambda: 1.0,
            created_round: 0,
        })
        .collect();
    Ok(SegTree {
        leaf_originals: nodes.iter().map(|n| n.feature.clone()).collect(),
        active_roots: (0..n).map(NodeId).collect(),
        nodes,
        round: 0,
        last_scan_round: 0,
        trace: DecisionTrace::default(),
        banned: HashSet::new(),
        downweight_once: false,
        dim: features.dim(),
    })
}

/// Number of pairs accepted out of `eligible`: `⌈alpha · eligible⌉`, at least one.
pub fn merge_quota(alpha: f64, eligible: usize) -> usize {
    if eligible == 0 {
        return 0;
    }
    // Tolerance keeps products like 0.6 * 5 from rounding up past the integer.
    let q = (alpha * eligible as f64 - 1e-9).ceil() as usize;
    q.clamp(1, eligible)
}

/// A scored adjacent pair of active roots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidatePair {
    pub left: NodeId,
    pub right: NodeId,
    pub score: f64,
}

fn eligible_pairs(
    tree: &SegTree,
    projected_query: &[f64],
    params: &ModelParams,
    cfg: &Config,
) -> Vec<CandidatePair> {
    let rel: Vec<f64> = tree
        .active_roots
        .iter()
        .map(|id| linguistic_relevance_projected(&tree.nodes[id.0].feature, projected_query, params))
        .collect();
    let mut out = Vec::new();
    for (k, w) in tree.active_roots.windows(2).enumerate() {
        let (l, r) = (&tree.nodes[w[0].0], &tree.nodes[w[1].0]);
        let union = Span {
            start: l.span.start,
            end: r.span.end,
        };
        if tree.banned.contains(&union) {
            continue;
        }
        // Lengths always match inside one tree.
        let vv = visual_relevance(&l.feature, &r.feature)
            .map(|v| v.value)
            .unwrap_or(0.0);
        let score = combine_scores(rel[k], rel[k + 1], vv, cfg).merge_score;
        if score >= cfg.merge_stop_threshold {
            out.push(CandidatePair {
                left: l.id,
                right: r.id,
                score,
            });
        }
    }
    out
}

/// Picks this round's merges: top `⌈α · eligible⌉` non-overlapping pairs by
/// score, ties to the earlier pair. Returned in temporal order.
pub fn select_merge_pairs(
    tree: &SegTree,
    q: &QueryEmbedding,
    params: &ModelParams,
    cfg: &Config,
) -> Result<Vec<(NodeId, NodeId)>> {
    let pq = project_query(&q.data, params)?;
    Ok(select_merge_pairs_projected(tree, &pq, params, cfg))
}

fn select_merge_pairs_projected(
    tree: &SegTree,
    projected_query: &[f64],
    params: &ModelParams,
    cfg: &Config,
) -> Vec<(NodeId, NodeId)> {
    if tree.active_roots.len() < 2 {
        return Vec::new();
    }
    let mut cands = eligible_pairs(tree, projected_query, params, cfg);
    let quota = merge_quota(cfg.alpha, cands.len());
    cands.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| {
            tree.nodes[a.left.0]
                .span
                .start
                .cmp(&tree.nodes[b.left.0].span.start)
        })
    });
    let mut claimed: HashSet<NodeId> = HashSet::new();
    let mut accepted = Vec::with_capacity(quota);
    for c in cands {
        if accepted.len() == quota {
            break;
        }
        if claimed.contains(&c.left) || claimed.contains(&c.right) {
            continue;
        }
        claimed.insert(c.left);
        claimed.insert(c.right);
        accepted.push((c.left, c.right));
    }
    accepted.sort_by_key(|(l, _)| tree.nodes[l.0].span.start);
    accepted
}

/// `W3 · v_left + W3 · v_right + b`.
pub fn merged_feature(left: &[f64], right: &[f64], params: &ModelParams) -> Vec<f64> {
    let a = params.w3.matvec(left);
    let b = params.w3.matvec(right);
    add(&add(&a, &b), &params.b)
}

fn apply_merge(
    tree: &mut SegTree,
    left: NodeId,
    right: NodeId,
    params: &ModelParams,
    round: usize,
) -> Result<NodeId> {
    let (ln, rn) = (tree.get(left)?, tree.get(right)?);
    if ln.state != NodeState::Active || rn.state != NodeState::Active {
        return Err(MhstError::Topology(format!(
            "cannot merge {left} and {right}: both must be active"
        )));
    }
    if ln.span.end + 1 != rn.span.start {
        return Err(MhstError::Topology(format!(
            "cannot merge {left} {} and {right} {}: not adjacent",
            ln.span, rn.span
        )));
    }
    let id = NodeId(tree.nodes.len());
    let node = SegNode {
        id,
        span: Span {
            start: ln.span.start,
            end: rn.span.end,
        },
        feature: merged_feature(&ln.feature, &rn.feature, params),
        children: Some([left, right]),
        child_inputs: Some([ln.feature.clone(), rn.feature.clone()]),
        height: ln.height.max(rn.height) + 1,
        state: NodeState::Active,
        leaf_weight_lambda: 1.0,
        created_round: round,
    };
    tree.nodes[left.0].state = NodeState::MergedAway;
    tree.nodes[right.0].state = NodeState::MergedAway;
    tree.remove_root(left);
    tree.remove_root(right);
    tree.nodes.push(node);
    tree.insert_root(id);
    tree.trace.push(TraceEvent::Merge {
        left,
        right,
        new: id,
        round,
    });
    Ok(id)
}

/// Merges two adjacent active roots into a new parent and records the event.
pub fn merge_pair(
    tree: &mut SegTree,
    left: NodeId,
    right: NodeId,
    params: &ModelParams,
) -> Result<NodeId> {
    let round = tree.round;
    apply_merge(tree, left, right, params, round)
}

/// Marks an active non-leaf node pruned and returns both children to the root
/// pool. A child that is itself pruned later in the same scan leaves the pool
/// again through its own event. Returns the leaf children.
fn apply_prune(tree: &mut SegTree, id: NodeId, round: usize) -> Result<Vec<NodeId>> {
    let node = tree.get(id)?;
    let children = node.children.ok_or_else(|| {
        MhstError::Topology(format!("cannot prune leaf {id}"))
    })?;
    if node.state != NodeState::Active {
        return Err(MhstError::Topology(format!("cannot prune {id}: not an active root")));
    }
    tree.nodes[id.0].state = NodeState::Pruned;
    tree.remove_root(id);
    let mut freed = Vec::new();
    for c in children {
        tree.nodes[c.0].state = NodeState::Active;
        tree.insert_root(c);
        if tree.nodes[c.0].is_leaf() {
            freed.push(c);
        }
    }
    tree.trace.push(TraceEvent::Prune { node: id, round });
    Ok(freed)
}

fn apply_downweight(
    tree: &mut SegTree,
    leaf: NodeId,
    lambda_tau: f64,
    projected_query: &[f64],
    params: &ModelParams,
    round: usize,
) -> Result<()> {
    let node = tree.get(leaf)?;
    if !node.is_leaf() {
        return Err(MhstError::Topology(format!("cannot down-weight non-leaf {leaf}")));
    }
    let base = if tree.downweight_once {
        &tree.leaf_originals[leaf.0]
    } else {
        &node.feature
    };
    let r = linguistic_relevance_projected(base, projected_query, params);
    let feature = scaled(base, lambda_tau * r);
    let node = &mut tree.nodes[leaf.0];
    node.feature = feature;
    node.leaf_weight_lambda = lambda_tau;
    tree.trace.push(TraceEvent::Downweight {
        leaf,
        lambda_tau,
        round,
    });
    Ok(())
}

/// Scales a leaf by `λ_τ · r_qv(leaf)` and records the event.
pub fn downweight_leaf(
    tree: &mut SegTree,
    leaf: NodeId,
    lambda_tau: f64,
    q: &QueryEmbedding,
    params: &ModelParams,
) -> Result<()> {
    let pq = project_query(&q.data, params)?;
    let round = tree.round;
    apply_downweight(tree, leaf, lambda_tau, &pq, params, round)
}

/// Leaf weight for leaves released from pruned subtrees.
pub const FREED_LEAF_LAMBDA: f64 = 0.5;
/// Leaf weight for every other leaf.
pub const KEPT_LEAF_LAMBDA: f64 = 1.0;

/// One prune scan: drops unaudited non-leaf roots whose relevance is below
/// `tau` together with their unaudited non-leaf descendants. Descendants that
/// passed an earlier scan become roots again, as do the leaves underneath.
/// Then every leaf is down-weighted once.
pub fn prune_scan(
    tree: &mut SegTree,
    q: &QueryEmbedding,
    params: &ModelParams,
    cfg: &Config,
) -> Result<ScanOutcome> {
    let pq = project_query(&q.data, params)?;
    prune_scan_projected(tree, &pq, params, cfg)
}

fn prune_scan_projected(
    tree: &mut SegTree,
    projected_query: &[f64],
    params: &ModelParams,
    cfg: &Config,
) -> Result<ScanOutcome> {
    let round = tree.round;
    let mut outcome = ScanOutcome::default();
    for root in tree.unaudited_roots() {
        let rel = linguistic_relevance_projected(&tree.nodes[root.0].feature, projected_query, params);
        if rel >= cfg.tau {
            continue;
        }
        tree.banned.insert(tree.nodes[root.0].span);
        // Pre-order so each parent is pruned before its children.
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            let [l, r] = tree.nodes[id.0].children.expect("non-leaf");
            outcome.freed.extend(apply_prune(tree, id, round)?);
            outcome.pruned.push(id);
            for c in [r, l] {
                let child = &tree.nodes[c.0];
                if !child.is_leaf() && child.created_round > tree.last_scan_round {
                    stack.push(c);
                }
            }
        }
    }
    let freed: HashSet<NodeId> = outcome.freed.iter().copied().collect();
    for leaf in 0..tree.n_frames() {
        let leaf = NodeId(leaf);
        let lambda = if freed.contains(&leaf) {
            FREED_LEAF_LAMBDA
        } else {
            KEPT_LEAF_LAMBDA
        };
        apply_downweight(tree, leaf, lambda, projected_query, params, round)?;
    }
    tree.last_scan_round = round;
    Ok(outcome)
}

fn check_inputs(features: &FrameFeatures, q: &QueryEmbedding, params: &ModelParams, cfg: &Config) -> Result<()> {
    cfg.validate()?;
    q.check_dim(features)?;
    params.validate(features.dim())
}

/// Builds the full hypotheses tree for one video and query.
///
/// Each round merges the selected pairs; every `L` rounds a prune scan runs.
/// When no pair is eligible, a last scan audits any nodes created since the
/// previous one; if it prunes anything the freed leaves get another chance to
/// merge. Pruned spans are never rebuilt, which bounds the number of rounds.
pub fn build_tree(
    features: &FrameFeatures,
    q: &QueryEmbedding,
    params: &ModelParams,
    cfg: &Config,
) -> Result<SegTree> {
    check_inputs(features, q, params, cfg)?;
    let mut tree = init_leaves(features)?;
    tree.downweight_once = cfg.downweight_once;
    let pq = project_query(&q.data, params)?;
    let n = tree.n_frames();
    // Every pruning scan bans a new non-leaf span, and between two pruning
    // scans each round shrinks the active set, so at most n-1 rounds pass.
    let round_limit = (n * n.saturating_sub(1) / 2 + 1) * n.saturating_sub(1);
    loop {
        let pairs = select_merge_pairs_projected(&tree, &pq, params, cfg);
        if pairs.is_empty() {
            if cfg.pruning && tree.round > tree.last_scan_round {
                let outcome = prune_scan_projected(&mut tree, &pq, params, cfg)?;
                if !outcome.pruned.is_empty() {
                    continue;
                }
            }
            let round = tree.round;
            tree.trace.push(TraceEvent::Stop { round });
            break;
        }
        tree.round += 1;
        if tree.round > round_limit {
            return Err(MhstError::Topology(format!(
                "tree building exceeded {round_limit} rounds"
            )));
        }
        let round = tree.round;
        for (l, r) in pairs {
            apply_merge(&mut tree, l, r, params, round)?;
        }
        if cfg.pruning && tree.round - tree.last_scan_round == cfg.scan_period {
            prune_scan_projected(&mut tree, &pq, params, cfg)?;
        }
    }
    Ok(tree)
}

/// Rebuilds a tree by applying a recorded trace. Features are recomputed from
/// `params`; discrete decisions come from the trace.
pub fn replay_tree(
    features: &FrameFeatures,
    q: &QueryEmbedding,
    params: &ModelParams,
    cfg: &Config,
    trace: &DecisionTrace,
) -> Result<SegTree> {
    check_inputs(features, q, params, cfg)?;
    let mut tree = init_leaves(features)?;
    tree.downweight_once = cfg.downweight_once;
    let pq = project_query(&q.data, params)?;
    let replay_err = |i: usize, e: MhstError| MhstError::Replay(format!("event {i}: {e}"));
    // Nodes re-activated by a prune earlier in the current scan. Pruning one
    // of them is descendant cleanup, which does not ban its span.
    let mut released: HashSet<NodeId> = HashSet::new();
    for (i, event) in trace.iter().enumerate() {
        match *event {
            TraceEvent::Merge {
                left,
                right,
                new,
                round,
            } => {
                if new.0 != tree.nodes.len() {
                    return Err(MhstError::Replay(format!(
                        "event {i}: merge creates {new}, expected {}",
                        tree.nodes.len()
                    )));
                }
                tree.round = round;
                apply_merge(&mut tree, left, right, params, round).map_err(|e| replay_err(i, e))?;
            }
            TraceEvent::Prune { node, round } => {
                if node.0 >= tree.nodes.len() {
                    return Err(MhstError::Replay(format!("event {i}: unknown node {node}")));
                }
                if !released.contains(&node) {
                    tree.banned.insert(tree.nodes[node.0].span);
                }
                apply_prune(&mut tree, node, round).map_err(|e| replay_err(i, e))?;
                released.extend(tree.nodes[node.0].children.into_iter().flatten());
            }
            TraceEvent::Downweight {
                leaf,
                lambda_tau,
                round,
            } => {
                if leaf.0 >= tree.n_frames() {
                    return Err(MhstError::Replay(format!("event {i}: {leaf} is not a leaf")));
                }
                apply_downweight(&mut tree, leaf, lambda_tau, &pq, params, round)
                    .map_err(|e| replay_err(i, e))?;
                released.clear();
                tree.last_scan_round = round;
            }
            TraceEvent::Stop { round } => {
                tree.round = round;
                tree.trace.push(TraceEvent::Stop { round });
            }
        }
    }
    Ok(tree)
}
