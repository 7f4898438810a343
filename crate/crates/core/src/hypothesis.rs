//! Segment hypotheses read off the active roots of a built tree.

use crate::error::{MhstError, Result};
use crate::linalg::{dot, sigmoid};
use crate::params::ModelParams;
use crate::relevance::{linguistic_relevance_projected, project_query};
use crate::tree::{NodeId, SegTree};
use crate::types::{OneShotLabel, QueryEmbedding, Span};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub root_id: NodeId,
    pub span: Span,
    pub feature: Vec<f64>,
    pub confidence: f64,
    pub linguistic_rel: f64,
    pub is_positive: bool,
}

/// `sigmoid(w_s · feature + b_s)`.
pub fn score_hypothesis(feature: &[f64], params: &ModelParams) -> f64 {
    sigmoid(dot(&params.w_s, feature) + params.b_s)
}

/// One hypothesis per active root, in temporal order.
pub fn extract_hypotheses(
    tree: &SegTree,
    q: &QueryEmbedding,
    params: &ModelParams,
) -> Result<Vec<Hypothesis>> {
    let pq = project_query(&q.data, params)?;
    Ok(tree
        .active_roots()
        .iter()
        .map(|&id| {
            let node = tree.node(id);
            Hypothesis {
                root_id: id,
                span: node.span,
                feature: node.feature.clone(),
                confidence: score_hypothesis(&node.feature, params),
                linguistic_rel: linguistic_relevance_projected(&node.feature, &pq, params),
                is_positive: false,
            }
        })
        .collect())
}

/// Flags hypotheses containing the labelled frame and returns them. Active
/// spans are disjoint, so at most one is returned.
pub fn select_positive(hyps: &mut [Hypothesis], label: &OneShotLabel) -> Result<Vec<Hypothesis>> {
    let n_frames = hyps.iter().map(|h| h.span.end + 1).max().unwrap_or(0);
    if label.labeled_frame >= n_frames {
        return Err(MhstError::InvalidLabel(format!(
            "labeled frame {} outside video {} with {} frames",
            label.labeled_frame, label.video_id, n_frames
        )));
    }
    let mut out = Vec::new();
    for h in hyps.iter_mut() {
        h.is_positive = h.span.contains(label.labeled_frame);
        if h.is_positive {
            out.push(h.clone());
        }
    }
    Ok(out)
}

/// Indices of `hyps` sorted by confidence, highest first; ties go to the
/// earlier start frame.
pub fn rank_by_confidence(hyps: &[Hypothesis]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    order.sort_by(|&a, &b| {
        hyps[b]
            .confidence
            .total_cmp(&hyps[a].confidence)
            .then(hyps[a].span.start.cmp(&hyps[b].span.start))
    });
    order
}

/// Selects the `min(k, |hyps|)` most confident hypotheses. A positive
/// hypothesis that misses the cut replaces the last selected one.
///
/// Returns the selected indices into `hyps` and their confidences.
pub fn top_k_indices(hyps: &[Hypothesis], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if hyps.is_empty() {
        return Err(MhstError::EmptyTree);
    }
    let order = rank_by_confidence(hyps);
    let mut chosen: Vec<usize> = order.iter().copied().take(k.min(hyps.len())).collect();
    if let Some(pos) = hyps.iter().position(|h| h.is_positive) {
        if !chosen.contains(&pos) {
            *chosen.last_mut().expect("k >= 1") = pos;
        }
    }
    let scores = chosen.iter().map(|&i| hyps[i].confidence).collect();
    Ok((chosen, scores))
}

pub fn top_k(hyps: &[Hypothesis], k: usize) -> Result<(Vec<Hypothesis>, Vec<f64>)> {
    let (idx, scores) = top_k_indices(hyps, k)?;
    Ok((idx.into_iter().map(|i| hyps[i].clone()).collect(), scores))
}

/// Span and confidence of the most confident active root.
pub fn predict(tree: &SegTree, q: &QueryEmbedding, params: &ModelParams) -> Result<(Span, f64)> {
    let hyps = extract_hypotheses(tree, q, params)?;
    let best = *rank_by_confidence(&hyps).first().ok_or(MhstError::EmptyTree)?;
    Ok((hyps[best].span, hyps[best].confidence))
}
