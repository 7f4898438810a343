//! Temporal IoU, `R@n, IoU=m` recall and a brute-force reference tree builder.

use std::fmt::Write as _;

use crate::config::Config;
use crate::error::{MhstError, Result};
use crate::params::ModelParams;
use crate::trace::{DecisionTrace, TraceEvent};
use crate::tree::{NodeId, NodeState, SegNode, SegTree};
use crate::types::{FrameFeatures, QueryEmbedding, Span};

/// Intersection over union of two inclusive frame spans, counted in frames.
pub fn temporal_iou(a: Span, b: Span) -> Result<f64> {
    for s in [a, b] {
        if s.start > s.end {
            return Err(MhstError::InvalidSpan {
                start: s.start,
                end: s.end,
            });
        }
    }
    let inter_start = a.start.max(b.start);
    let inter_end = a.end.min(b.end);
    let inter = if inter_start <= inter_end {
        inter_end - inter_start + 1
    } else {
        0
    };
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Maps a ground-truth interval in seconds onto the frame grid: the start is
/// floored, the end ceiled, and the result clamped to the video.
pub fn seconds_to_frames(start_s: f64, end_s: f64, fps: f64, n_frames: usize) -> Result<Span> {
    if !(start_s >= 0.0 && end_s >= start_s && fps > 0.0) || n_frames == 0 {
        return Err(MhstError::InvalidInput(format!(
            "cannot map [{start_s}, {end_s}] s at {fps} fps"
        )));
    }
    let last = n_frames - 1;
    let start = ((start_s * fps).floor() as usize).min(last);
    let end = ((end_s * fps).ceil() as usize).saturating_sub(1).clamp(start, last);
    Span::new(start, end)
}

/// Recall at one `(n, m)` cell, with how many videos had ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallOutcome {
    pub recall: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Best IoU among the first `n` predictions.
pub fn best_iou_at(preds: &[Span], gt: Span, n: usize) -> Result<f64> {
    let mut best: f64 = 0.0;
    for p in preds.iter().take(n) {
        best = best.max(temporal_iou(*p, gt)?);
    }
    Ok(best)
}

/// Fraction of videos whose top-`n` predictions contain a span with IoU ≥ `m`.
/// Videos without ground truth are skipped and counted.
pub fn recall_at(preds: &[Vec<Span>], gts: &[Option<Span>], n: usize, m: f64) -> Result<RecallOutcome> {
    if preds.len() != gts.len() {
        return Err(MhstError::Shape {
            expected: preds.len(),
            actual: gts.len(),
        });
    }
    if n == 0 || !(m > 0.0 && m <= 1.0) {
        return Err(MhstError::InvalidInput(format!("invalid recall cell n={n}, m={m}")));
    }
    let mut hits = 0usize;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (i, (p, gt)) in preds.iter().zip(gts).enumerate() {
        if p.is_empty() {
            return Err(MhstError::InvalidInput(format!("video {i} has no predictions")));
        }
        let Some(gt) = gt else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        if best_iou_at(p, *gt, n)? >= m {
            hits += 1;
        }
    }
    let recall = if evaluated == 0 {
        0.0
    } else {
        hits as f64 / evaluated as f64
    };
    Ok(RecallOutcome {
        recall,
        evaluated,
        skipped,
    })
}

/// Recall over a grid of `n` and `m` values.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub ns: Vec<usize>,
    pub ms: Vec<f64>,
    /// `grid[i][j]` is `R@ns[i], IoU=ms[j]`.
    pub grid: Vec<Vec<f64>>,
    /// Per video: id and best IoU within the top `n`, for every `n`.
    pub per_video: Vec<(String, Vec<f64>)>,
    pub skipped: usize,
}

impl EvalResult {
    pub fn recall(&self, n: usize, m: f64) -> Option<f64> {
        let i = self.ns.iter().position(|&x| x == n)?;
        let j = self.ms.iter().position(|&x| x == m)?;
        Some(self.grid[i][j])
    }

    /// Header `n\m` followed by the IoU thresholds, then one row per `n`
    /// with four decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::from("n\\m");
        for m in &self.ms {
            let _ = write!(out, " {m}");
        }
        out.push('\n');
        for (n, row) in self.ns.iter().zip(&self.grid) {
            let _ = write!(out, "{n}");
            for v in row {
                let _ = write!(out, " {v:.4}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn evaluate(
    video_ids: &[String],
    preds: &[Vec<Span>],
    gts: &[Option<Span>],
    ns: &[usize],
    ms: &[f64],
) -> Result<EvalResult> {
    let mut grid = Vec::with_capacity(ns.len());
    let mut skipped = 0;
    for &n in ns {
        let mut row = Vec::with_capacity(ms.len());
        for &m in ms {
            let cell = recall_at(preds, gts, n, m)?;
            skipped = cell.skipped;
            row.push(cell.recall);
        }
        grid.push(row);
    }
    let mut per_video = Vec::new();
    for ((id, p), gt) in video_ids.iter().zip(preds).zip(gts) {
        if let Some(gt) = gt {
            let best = ns
                .iter()
                .map(|&n| best_iou_at(p, *gt, n))
                .collect::<Result<Vec<f64>>>()?;
            per_video.push((id.clone(), best));
        }
    }
    Ok(EvalResult {
        ns: ns.to_vec(),
        ms: ms.to_vec(),
        grid,
        per_video,
        skipped,
    })
}

/// Largest video the reference builder accepts.
pub const ORACLE_MAX_FRAMES: usize = 12;

struct RefNode {
    span: (usize, usize),
    feature: Vec<f64>,
    children: Option<(usize, usize)>,
    inputs: Option<(Vec<f64>, Vec<f64>)>,
    height: usize,
    state: NodeState,
    lambda: f64,
    round: usize,
}

fn naive_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn naive_relevance(v: &[f64], q: &[f64], p: &ModelParams) -> f64 {
    let d = v.len();
    let mut logit = 0.0;
    for k in 0..d {
        let mut a = 0.0;
        for j in 0..d {
            a += p.w1.get(k, j) * v[j];
        }
        let mut b = 0.0;
        for j in 0..d {
            b += p.w2.get(k, j) * q[j];
        }
        logit += a * b;
    }
    naive_sigmoid(logit)
}

fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (ab / (na * nb)).clamp(-1.0, 1.0)
}

fn naive_merge(l: &[f64], r: &[f64], p: &ModelParams) -> Vec<f64> {
    let d = l.len();
    (0..d)
        .map(|k| {
            let mut a = 0.0;
            let mut b = 0.0;
            for j in 0..d {
                a += p.w3.get(k, j) * l[j];
                b += p.w3.get(k, j) * r[j];
            }
            a + b + p.b[k]
        })
        .collect()
}

/// Reference builder: rescans every node each round, with scalar loops and
/// no cached state. Same decision rules and tie-breaks as
/// [`crate::tree::build_tree`].
pub fn oracle_build(
    features: &FrameFeatures,
    q: &QueryEmbedding,
    params: &ModelParams,
    cfg: &Config,
) -> Result<SegTree> {
    let n = features.n_frames();
    if n > ORACLE_MAX_FRAMES {
        return Err(MhstError::OracleLimit(n));
    }
    q.check_dim(features)?;
    params.validate(features.dim())?;
    cfg.validate()?;
    let originals: Vec<Vec<f64>> = (0..n).map(|i| features.frame(i).to_vec()).collect();
    let mut nodes: Vec<RefNode> = (0..n)
        .map(|i| RefNode {
            span: (i, i),
            feature: originals[i].clone(),
            children: None,
            inputs: None,
            height: 0,
            state: NodeState::Active,
            lambda: 1.0,
            round: 0,
        })
        .collect();
    let mut banned: Vec<(usize, usize)> = Vec::new();
    let mut trace = DecisionTrace::default();
    let mut round = 0usize;
    let mut last_scan = 0usize;

    let roots = |nodes: &[RefNode]| -> Vec<usize> {
        let mut r: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].state == NodeState::Active).collect();
        r.sort_by_key(|&i| nodes[i].span.0);
        r
    };

    let scan = |nodes: &mut Vec<RefNode>,
                banned: &mut Vec<(usize, usize)>,
                trace: &mut DecisionTrace,
                round: usize,
                last_scan: usize|
     -> bool {
        let mut freed: Vec<usize> = Vec::new();
        let mut any = false;
        for r in roots(nodes) {
            if nodes[r].children.is_none() || nodes[r].round <= last_scan {
                continue;
            }
            if naive_relevance(&nodes[r].feature, &q.data, params) >= cfg.tau {
                continue;
            }
            any = true;
            banned.push(nodes[r].span);
            let mut stack = vec![r];
            while let Some(id) = stack.pop() {
                let (l, rc) = nodes[id].children.expect("only non-leaves are stacked");
                nodes[id].state = NodeState::Pruned;
                trace.push(TraceEvent::Prune {
                    node: NodeId(id),
                    round,
                });
                for c in [l, rc] {
                    nodes[c].state = NodeState::Active;
                    if nodes[c].children.is_none() {
                        freed.push(c);
                    }
                }
                for c in [rc, l] {
                    if nodes[c].children.is_some() && nodes[c].round > last_scan {
                        stack.push(c);
                    }
                }
            }
        }
        for leaf in 0..n {
            let lambda = if freed.contains(&leaf) { 0.5 } else { 1.0 };
            let base = if cfg.downweight_once {
                originals[leaf].clone()
            } else {
                nodes[leaf].feature.clone()
            };
            let r = naive_relevance(&base, &q.data, params);
            nodes[leaf].feature = base.iter().map(|x| x * (lambda * r)).collect();
            nodes[leaf].lambda = lambda;
            trace.push(TraceEvent::Downweight {
                leaf: NodeId(leaf),
                lambda_tau: lambda,
                round,
            });
        }
        any
    };

    loop {
        let active = roots(&nodes);
        // (score, left start, left id, right id)
        let mut cands: Vec<(f64, usize, usize, usize)> = Vec::new();
        for w in active.windows(2) {
            let (l, r) = (w[0], w[1]);
            let union = (nodes[l].span.0, nodes[r].span.1);
            if banned.contains(&union) {
                continue;
            }
            let rl = naive_relevance(&nodes[l].feature, &q.data, params);
            let rr = naive_relevance(&nodes[r].feature, &q.data, params);
            let score = cfg.lambda1 * (1.0 - (rl - rr).abs())
                + cfg.lambda2 * naive_cosine(&nodes[l].feature, &nodes[r].feature);
            if score >= cfg.merge_stop_threshold {
                cands.push((score, nodes[l].span.0, l, r));
            }
        }
        let mut quota = 0;
        if !cands.is_empty() {
            quota = ((cfg.alpha * cands.len() as f64) - 1e-9).ceil() as usize;
            quota = quota.max(1).min(cands.len());
        }
        // Selection sort, highest score first, earlier start on ties.
        let mut chosen: Vec<(usize, usize)> = Vec::new();
        let mut used: Vec<usize> = Vec::new();
        let mut remaining = cands.clone();
        while chosen.len() < quota && !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (s, st, _, _) = remaining[i];
                let (bs, bst, _, _) = remaining[best];
                if s > bs || (s == bs && st < bst) {
                    best = i;
                }
            }
            let (_, _, l, r) = remaining.remove(best);
            if used.contains(&l) || used.contains(&r) {
                continue;
            }
            used.push(l);
            used.push(r);
            chosen.push((l, r));
        }
        if chosen.is_empty() {
            if cfg.pruning && round > last_scan {
                let pruned = scan(&mut nodes, &mut banned, &mut trace, round, last_scan);
                last_scan = round;
                if pruned {
                    continue;
                }
            }
            trace.push(TraceEvent::Stop { round });
            break;
        }
        chosen.sort_by_key(|&(l, _)| nodes[l].span.0);
        round += 1;
        for (l, r) in chosen {
            let feature = naive_merge(&nodes[l].feature, &nodes[r].feature, params);
            let id = nodes.len();
            let node = RefNode {
                span: (nodes[l].span.0, nodes[r].span.1),
                inputs: Some((nodes[l].feature.clone(), nodes[r].feature.clone())),
                feature,
                children: Some((l, r)),
                height: nodes[l].height.max(nodes[r].height) + 1,
                state: NodeState::Active,
                lambda: 1.0,
                round,
            };
            nodes.push(node);
            nodes[l].state = NodeState::MergedAway;
            nodes[r].state = NodeState::MergedAway;
            trace.push(TraceEvent::Merge {
                left: NodeId(l),
                right: NodeId(r),
                new: NodeId(id),
                round,
            });
        }
        if cfg.pruning && round - last_scan == cfg.scan_period {
            scan(&mut nodes, &mut banned, &mut trace, round, last_scan);
            last_scan = round;
        }
        if round > n * n + n {
            return Err(MhstError::Topology("reference builder did not terminate".into()));
        }
    }

    let active = roots(&nodes);
    let seg_nodes = nodes
        .into_iter()
        .enumerate()
        .map(|(i, nd)| SegNode {
            id: NodeId(i),
            span: Span {
                start: nd.span.0,
                end: nd.span.1,
            },
            feature: nd.feature,
            children: nd.children.map(|(l, r)| [NodeId(l), NodeId(r)]),
            child_inputs: nd.inputs.map(|(l, r)| [l, r]),
            height: nd.height,
            state: nd.state,
            leaf_weight_lambda: nd.lambda,
            created_round: nd.round,
        })
        .collect();
    Ok(SegTree::from_parts(
        seg_nodes,
        active.into_iter().map(NodeId).collect(),
        round,
        trace,
        originals,
    ))
}

/// Compares two trees: exact topology and trace, features within `tol`.
pub fn compare_trees(a: &SegTree, b: &SegTree, tol: f64) -> std::result::Result<f64, String> {
    if a.trace() != b.trace() {
        let pos = a
            .trace()
            .iter()
            .zip(b.trace().iter())
            .position(|(x, y)| x != y)
            .unwrap_or(a.trace().len().min(b.trace().len()));
        return Err(format!("traces diverge at event {pos}"));
    }
    if a.active_roots() != b.active_roots() || a.nodes().len() != b.nodes().len() {
        return Err("root sets or node counts differ".into());
    }
    let mut worst: f64 = 0.0;
    for (x, y) in a.nodes().iter().zip(b.nodes()) {
        if x.span != y.span || x.children != y.children || x.state != y.state || x.height != y.height {
            return Err(format!("node {} differs in topology", x.id));
        }
        for (u, v) in x.feature.iter().zip(&y.feature) {
            worst = worst.max((u - v).abs());
        }
    }
    if worst > tol {
        return Err(format!("feature difference {worst} exceeds {tol}"));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::params::init_params;
    use crate::rng::new_rng;
    use crate::tree::build_tree;
    use proptest::prelude::*;

    fn sp(start: usize, end: usize) -> Span {
        Span { start, end }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(temporal_iou(sp(2, 7), sp(2, 7)).unwrap(), 1.0);
        assert_eq!(temporal_iou(sp(0, 1), sp(3, 4)).unwrap(), 0.0);
        // {2,3} shared out of {0..5}
        assert!((temporal_iou(sp(0, 3), sp(2, 5)).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert!(temporal_iou(Span { start: 3, end: 1 }, sp(0, 1)).is_err());
    }

    #[test]
    fn recall_cases() {
        let gts = vec![Some(sp(0, 3)), Some(sp(4, 7))];
        let exact = vec![vec![sp(0, 3)], vec![sp(4, 7)]];
        assert_eq!(recall_at(&exact, &gts, 1, 0.7).unwrap().recall, 1.0);
        let disjoint = vec![vec![sp(5, 6)], vec![sp(0, 1)]];
        assert_eq!(recall_at(&disjoint, &gts, 1, 0.3).unwrap().recall, 0.0);
        // Video 0 misses at rank 1 and hits at rank 2; video 1 never hits.
        let ranked = vec![vec![sp(6, 7), sp(0, 3)], vec![sp(0, 1), sp(2, 2)]];
        assert_eq!(recall_at(&ranked, &gts, 1, 0.5).unwrap().recall, 0.0);
        assert_eq!(recall_at(&ranked, &gts, 2, 0.5).unwrap().recall, 0.5);
    }

    #[test]
    fn missing_ground_truth_is_skipped() {
        let preds = vec![vec![sp(0, 3)], vec![sp(0, 3)]];
        let out = recall_at(&preds, &[Some(sp(0, 3)), None], 1, 0.5).unwrap();
        assert_eq!(out.recall, 1.0);
        assert_eq!(out.evaluated, 1);
        assert_eq!(out.skipped, 1);
        assert!(recall_at(&[vec![]], &[Some(sp(0, 1))], 1, 0.5).is_err());
    }

    #[test]
    fn grid_text_is_stable() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let preds = vec![vec![sp(0, 3)], vec![sp(4, 7)]];
        let gts = vec![Some(sp(0, 3)), Some(sp(4, 7))];
        let r = evaluate(&ids, &preds, &gts, &[1, 5], &[0.3, 0.5, 0.7]).unwrap();
        assert_eq!(
            r.to_text(),
            "n\\m 0.3 0.5 0.7\n1 1.0000 1.0000 1.0000\n5 1.0000 1.0000 1.0000\n"
        );
        assert_eq!(r.recall(5, 0.5), Some(1.0));
    }

    #[test]
    fn seconds_map_onto_frames() {
        assert_eq!(seconds_to_frames(1.0, 2.0, 4.0, 100).unwrap(), sp(4, 7));
        assert_eq!(seconds_to_frames(0.0, 100.0, 1.0, 10).unwrap(), sp(0, 9));
        assert!(seconds_to_frames(2.0, 1.0, 1.0, 10).is_err());
    }

    #[test]
    fn oracle_single_frame_and_limit() {
        let f = FrameFeatures::new("v", Matrix::from_vec(1, 2, vec![1.0, 0.0])).unwrap();
        let q = QueryEmbedding::new("q", vec![1.0, 1.0]).unwrap();
        let p = ModelParams::zeros(2);
        let t = oracle_build(&f, &q, &p, &Config::default()).unwrap();
        assert_eq!(t.active_roots(), &[NodeId(0)]);
        let main = build_tree(&f, &q, &p, &Config::default()).unwrap();
        compare_trees(&t, &main, 0.0).unwrap();
        let big = FrameFeatures::new("v", Matrix::zeros(13, 2)).unwrap();
        assert!(matches!(
            oracle_build(&big, &q, &p, &Config::default()),
            Err(MhstError::OracleLimit(13))
        ));
    }

    #[test]
    fn oracle_agrees_with_builder_on_random_instances() {
        let mut rng = new_rng(17);
        for _ in 0..50 {
            let n = rng.index(2, 9);
            let d = rng.index(4, 17);
            let data: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
            let f = FrameFeatures::new("v", Matrix::from_vec(n, d, data)).unwrap();
            let q = QueryEmbedding::new("q", (0..d).map(|_| rng.normal()).collect()).unwrap();
            let p = init_params(d, &mut rng).unwrap();
            let cfg = Config::default();
            let a = build_tree(&f, &q, &p, &cfg).unwrap();
            let b = oracle_build(&f, &q, &p, &cfg).unwrap();
            compare_trees(&a, &b, 1e-9).unwrap();
        }
    }

    fn span_strategy() -> impl Strategy<Value = Span> {
        (0usize..40, 0usize..20).prop_map(|(s, l)| Span { start: s, end: s + l })
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in span_strategy(), b in span_strategy()) {
            let ab = temporal_iou(a, b).unwrap();
            prop_assert_eq!(ab, temporal_iou(b, a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(temporal_iou(a, a).unwrap(), 1.0);
        }
    }
}
