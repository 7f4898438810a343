//! Query-node and node-node relevance scores that drive merging and pruning.

use crate::config::Config;
use crate::error::{MhstError, Result};
use crate::linalg::{dot, norm2, sigmoid};
use crate::params::ModelParams;

const DEGENERATE_NORM: f64 = 1e-12;

/// All relevance quantities for one adjacent pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceScores {
    pub r_qv_left: f64,
    pub r_qv_right: f64,
    pub r_qv_diff: f64,
    pub r_vv: f64,
    pub merge_score: f64,
}

/// Cosine similarity plus whether either input had (near) zero norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualRelevance {
    pub value: f64,
    pub degenerate: bool,
}

fn check_len(v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(MhstError::Shape {
            expected: d,
            actual: v.len(),
        });
    }
    Ok(())
}

/// `W2 · q`, shared by every relevance evaluation against the same query.
pub fn project_query(q: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    check_len(q, params.dim())?;
    Ok(params.w2.matvec(q))
}

/// Pre-sigmoid logit `(W1 v) · (W2 q)` given the projected query.
pub fn linguistic_logit_projected(v: &[f64], projected_query: &[f64], params: &ModelParams) -> f64 {
    dot(&params.w1.matvec(v), projected_query)
}

pub fn linguistic_relevance_projected(v: &[f64], projected_query: &[f64], params: &ModelParams) -> f64 {
    sigmoid(linguistic_logit_projected(v, projected_query, params))
}

/// `sigmoid((W1 v) · (W2 q))`.
pub fn linguistic_relevance(v: &[f64], q: &[f64], params: &ModelParams) -> Result<f64> {
    check_len(v, params.dim())?;
    let pq = project_query(q, params)?;
    Ok(linguistic_relevance_projected(v, &pq, params))
}

/// Cosine similarity clamped to `[-1, 1]`; zero-norm inputs give 0.
pub fn visual_relevance(a: &[f64], b: &[f64]) -> Result<VisualRelevance> {
    check_len(b, a.len())?;
    let na = norm2(a);
    let nb = norm2(b);
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok(VisualRelevance {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(VisualRelevance {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Combines the two linguistic relevances and the cosine into one
/// "higher merges first" score.
pub fn combine_scores(r_left: f64, r_right: f64, r_vv: f64, cfg: &Config) -> RelevanceScores {
    let diff = (r_left - r_right).abs();
    RelevanceScores {
        r_qv_left: r_left,
        r_qv_right: r_right,
        r_qv_diff: diff,
        r_vv,
        merge_score: cfg.lambda1 * (1.0 - diff) + cfg.lambda2 * r_vv,
    }
}

pub fn pair_scores(
    v_i: &[f64],
    v_j: &[f64],
    q: &[f64],
    params: &ModelParams,
    cfg: &Config,
) -> Result<RelevanceScores> {
    let r_i = linguistic_relevance(v_i, q, params)?;
    let r_j = linguistic_relevance(v_j, q, params)?;
    let vv = visual_relevance(v_i, v_j)?;
    Ok(combine_scores(r_i, r_j, vv.value, cfg))
}

/// `λ1 · (1 − |r(v_i) − r(v_j)|) + λ2 · cos(v_i, v_j)`.
pub fn merge_score(
    v_i: &[f64],
    v_j: &[f64],
    q: &[f64],
    params: &ModelParams,
    cfg: &Config,
) -> Result<f64> {
    Ok(pair_scores(v_i, v_j, q, params, cfg)?.merge_score)
}

/// Relevance used to decide whether a non-leaf node survives a prune scan.
pub fn node_prune_relevance(node_feature: &[f64], q: &[f64], params: &ModelParams) -> Result<f64> {
    linguistic_relevance(node_feature, q, params)
}
