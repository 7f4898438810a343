//! Training losses, frozen-topology gradients and the gradient-descent loop.
//!
//! A built tree fixes every discrete choice: merges, prunes, down-weighting
//! factors, the top-K set, rewards and sampled negatives. [`FrozenEpisode`]
//! captures those choices once and exposes the total loss as a smooth function
//! of [`ModelParams`], with an analytic reverse pass over the recorded merges.

use std::collections::HashMap;

use crate::config::Config;
use crate::error::{MhstError, Result};
use crate::hypothesis::{extract_hypotheses, select_positive, top_k_indices, Hypothesis};
use crate::linalg::{add, dot, sigmoid, Matrix};
use crate::params::{init_params, GradientSet, ModelParams, PARAM_NAMES};
use crate::rng::{new_rng, DeterministicRng};
use crate::trace::DecisionTrace;
use crate::tree::{build_tree, replay_tree, NodeId, SegTree};
use crate::types::{FrameFeatures, OneShotLabel, QueryEmbedding, Sample, Span};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Maps a hypothesis to its (detached) ranking reward.
pub trait RewardFn {
    fn reward(&self, hyp: &Hypothesis) -> f64;
}

/// Reward equal to the hypothesis' linguistic relevance.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinguisticReward;

impl RewardFn for LinguisticReward {
    fn reward(&self, hyp: &Hypothesis) -> f64 {
        hyp.linguistic_rel
    }
}

pub fn reward(hyp: &Hypothesis) -> f64 {
    LinguisticReward.reward(hyp)
}

fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores {
        sum += (s - m).exp();
    }
    let lse = m + sum.ln();
    scores.iter().map(|s| s - lse).collect()
}

/// `Σ_i −R_i · log softmax(s)_i`.
pub fn rank_loss(scores: &[f64], rewards: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(MhstError::EmptySet("rank loss needs at least one proposal".into()));
    }
    if scores.len() != rewards.len() {
        return Err(MhstError::Shape {
            expected: scores.len(),
            actual: rewards.len(),
        });
    }
    let logp = log_softmax(scores);
    let mut loss = 0.0;
    for (r, lp) in rewards.iter().zip(&logp) {
        loss += -r * lp;
    }
    Ok(loss)
}

fn bce_term(r: f64, y: f64) -> f64 {
    let r = r.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -y * r.ln() - (1.0 - y) * (1.0 - r).ln()
}

/// Binary cross-entropy of relevance values against per-pair labels, averaged
/// over every term. `relevances[j]` holds the top-K relevances of pair `j`.
pub fn inter_loss(relevances: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    if relevances.len() != labels.len() {
        return Err(MhstError::Shape {
            expected: relevances.len(),
            actual: labels.len(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (rs, &y) in relevances.iter().zip(labels) {
        if y > 1 {
            return Err(MhstError::InvalidInput(format!("label must be 0 or 1, got {y}")));
        }
        for &r in rs {
            sum += bce_term(r, y as f64);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MhstError::EmptySet("inter loss needs at least one term".into()));
    }
    Ok(sum / count as f64)
}

/// Logits whose sigmoid lies inside `[BCE_EPS, 1 - BCE_EPS]`.
fn bce_logit_bounds() -> (f64, f64) {
    let hi = ((1.0 - BCE_EPS) / BCE_EPS).ln();
    (-hi, hi)
}

/// `ln(1 + e^x)` without overflow or cancellation.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Same as [`inter_loss`] with relevances given as pre-sigmoid logits.
/// Stays accurate when a relevance is within rounding of 0 or 1.
pub fn inter_loss_from_logits(logits: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(MhstError::Shape {
            expected: logits.len(),
            actual: labels.len(),
        });
    }
    let (lo, hi) = bce_logit_bounds();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (zs, &y) in logits.iter().zip(labels) {
        if y > 1 {
            return Err(MhstError::InvalidInput(format!("label must be 0 or 1, got {y}")));
        }
        for &z in zs {
            let z = z.clamp(lo, hi);
            // -log(sigmoid(z)) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
            sum += if y == 1 { softplus(-z) } else { softplus(z) };
            count += 1;
        }
    }
    if count == 0 {
        return Err(MhstError::EmptySet("inter loss needs at least one term".into()));
    }
    Ok(sum / count as f64)
}

/// `Σ_i max(0, β − pos_i + neg_i)`.
pub fn intra_loss(pos: &[f64], neg: &[f64], beta: f64) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(MhstError::Shape {
            expected: pos.len(),
            actual: neg.len(),
        });
    }
    let mut loss = 0.0;
    for (p, n) in pos.iter().zip(neg) {
        loss += (beta - p + n).max(0.0);
    }
    Ok(loss)
}

/// Per-video (or per-epoch mean) loss breakdown.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub rank_loss: f64,
    pub inter_loss: f64,
    pub intra_loss: f64,
    pub total: f64,
    pub rewards: Vec<f64>,
    /// Intra negatives had to come from another video.
    pub borrowed_negatives: bool,
}

impl LossReport {
    fn is_finite(&self) -> bool {
        self.rank_loss.is_finite()
            && self.inter_loss.is_finite()
            && self.intra_loss.is_finite()
            && self.total.is_finite()
    }
}

/// Everything one training step needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct Episode<'a> {
    pub sample: &'a Sample,
    /// Query of a different video, used as the unmatched pair.
    pub negative_query: Option<&'a QueryEmbedding>,
    /// Another video to draw intra negatives from when this one has none left.
    pub fallback_video: Option<&'a FrameFeatures>,
    /// Seeds negative segment sampling.
    pub seed: u64,
}

impl<'a> Episode<'a> {
    pub fn solo(sample: &'a Sample, seed: u64) -> Self {
        Episode {
            sample,
            negative_query: None,
            fallback_video: None,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
enum Input {
    /// Output of an earlier merge in `FrozenEpisode::merges`.
    Merge(usize),
    Const(Vec<f64>),
}

#[derive(Debug, Clone)]
struct FrozenMerge {
    left: Input,
    right: Input,
}

/// Loss as a smooth function of the parameters with all discrete decisions
/// (and the detached rewards and down-weighting factors) held fixed.
#[derive(Debug, Clone)]
pub struct FrozenEpisode {
    merges: Vec<FrozenMerge>,
    proposals: Vec<Input>,
    proposal_spans: Vec<Span>,
    rewards: Vec<f64>,
    query: Vec<f64>,
    negative_query: Option<Vec<f64>>,
    negative_features: Vec<Vec<f64>>,
    borrowed_negatives: bool,
    beta: f64,
    weights: [f64; 3],
    dim: usize,
}

fn uncovered_runs(n_frames: usize, covered: &[Span]) -> Vec<Span> {
    let mut mask = vec![false; n_frames];
    for s in covered {
        for m in &mut mask[s.start..=s.end] {
            *m = true;
        }
    }
    let mut runs = Vec::new();
    let mut i = 0;
    while i < n_frames {
        if mask[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n_frames && !mask[i] {
            i += 1;
        }
        runs.push(Span { start, end: i - 1 });
    }
    runs
}

/// Random segments that do not overlap any proposal, one per proposal, with
/// length capped by the matching proposal. Falls back to another video when
/// the proposals cover every frame. Features are means of the original frames.
fn sample_negatives(
    features: &FrameFeatures,
    proposals: &[Span],
    fallback: Option<&FrameFeatures>,
    rng: &mut DeterministicRng,
) -> (Vec<Vec<f64>>, bool) {
    let runs = uncovered_runs(features.n_frames(), proposals);
    let mut out = Vec::with_capacity(proposals.len());
    if !runs.is_empty() {
        for p in proposals {
            let run = runs[rng.index(0, runs.len())];
            let len = p.len().min(run.len());
            let start = rng.index(run.start, run.end + 2 - len);
            out.push(features.span_mean(Span {
                start,
                end: start + len - 1,
            }));
        }
        return (out, false);
    }
    match fallback {
        Some(other) => {
            for p in proposals {
                let len = p.len().min(other.n_frames());
                let start = rng.index(0, other.n_frames() + 1 - len);
                out.push(other.span_mean(Span {
                    start,
                    end: start + len - 1,
                }));
            }
            (out, true)
        }
        None => (Vec::new(), true),
    }
}

/// Intermediate values of one forward pass, kept for the reverse pass.
struct Forward {
    merge_inputs: Vec<(Vec<f64>, Vec<f64>)>,
    merge_outputs: Vec<Vec<f64>>,
    proposal_features: Vec<Vec<f64>>,
    report: LossReport,
}

impl FrozenEpisode {
    /// Freezes an already built tree. The tree must come from `episode.sample`.
    pub fn from_tree(
        tree: &SegTree,
        episode: &Episode<'_>,
        params: &ModelParams,
        cfg: &Config,
    ) -> Result<Self> {
        let sample = episode.sample;
        let mut hyps = extract_hypotheses(tree, &sample.query, params)?;
        select_positive(&mut hyps, &sample.label)?;
        let (chosen, _) = top_k_indices(&hyps, cfg.top_k)?;

        // Non-leaf closure under the chosen roots, in creation order.
        let mut needed: Vec<NodeId> = Vec::new();
        let mut stack: Vec<NodeId> = chosen.iter().map(|&i| hyps[i].root_id).collect();
        while let Some(id) = stack.pop() {
            let node = tree.node(id);
            if let Some(children) = node.children {
                needed.push(id);
                stack.extend(children);
            }
        }
        needed.sort();
        needed.dedup();
        let slot: HashMap<NodeId, usize> = needed.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let as_input = |id: NodeId, snapshot: &Vec<f64>| match slot.get(&id) {
            Some(&s) => Input::Merge(s),
            None => Input::Const(snapshot.clone()),
        };
        let merges = needed
            .iter()
            .map(|&id| {
                let node = tree.node(id);
                let [l, r] = node.children.expect("non-leaf");
                let [fl, fr] = node.child_inputs.as_ref().expect("merged node keeps its inputs");
                FrozenMerge {
                    left: as_input(l, fl),
                    right: as_input(r, fr),
                }
            })
            .collect();
        let proposals = chosen
            .iter()
            .map(|&i| as_input(hyps[i].root_id, &hyps[i].feature))
            .collect();
        let proposal_spans: Vec<Span> = chosen.iter().map(|&i| hyps[i].span).collect();
        let rewards = chosen.iter().map(|&i| reward(&hyps[i])).collect();

        let mut rng = new_rng(episode.seed);
        let (negative_features, borrowed_negatives) =
            sample_negatives(&sample.features, &proposal_spans, episode.fallback_video, &mut rng);

        Ok(FrozenEpisode {
            merges,
            proposals,
            proposal_spans,
            rewards,
            query: sample.query.data.clone(),
            negative_query: episode.negative_query.map(|q| q.data.clone()),
            negative_features,
            borrowed_negatives,
            beta: cfg.beta,
            weights: cfg.loss_weights,
            dim: tree.dim(),
        })
    }

    /// Replays `trace` on the episode's sample and freezes the result.
    pub fn from_trace(
        trace: &DecisionTrace,
        episode: &Episode<'_>,
        params: &ModelParams,
        cfg: &Config,
    ) -> Result<Self> {
        let s = episode.sample;
        let tree = replay_tree(&s.features, &s.query, params, cfg, trace)?;
        Self::from_tree(&tree, episode, params, cfg)
    }

    /// Number of merges the loss still depends on through the parameters.
    pub fn live_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn proposal_spans(&self) -> &[Span] {
        &self.proposal_spans
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    fn resolve<'a>(input: &'a Input, outputs: &'a [Vec<f64>]) -> &'a [f64] {
        match input {
            Input::Merge(i) => &outputs[*i],
            Input::Const(v) => v,
        }
    }

    fn forward(&self, params: &ModelParams) -> Result<Forward> {
        params.validate(self.dim)?;
        let mut merge_inputs = Vec::with_capacity(self.merges.len());
        let mut merge_outputs: Vec<Vec<f64>> = Vec::with_capacity(self.merges.len());
        for m in &self.merges {
            let l = Self::resolve(&m.left, &merge_outputs).to_vec();
            let r = Self::resolve(&m.right, &merge_outputs).to_vec();
            let out = add(&add(&params.w3.matvec(&l), &params.w3.matvec(&r)), &params.b);
            merge_inputs.push((l, r));
            merge_outputs.push(out);
        }
        let proposal_features: Vec<Vec<f64>> = self
            .proposals
            .iter()
            .map(|p| Self::resolve(p, &merge_outputs).to_vec())
            .collect();

        let scores: Vec<f64> = proposal_features
            .iter()
            .map(|f| sigmoid(dot(&params.w_s, f) + params.b_s))
            .collect();
        let rank = rank_loss(&scores, &self.rewards)?;

        let pq = params.w2.matvec(&self.query);
        let projected: Vec<Vec<f64>> = proposal_features.iter().map(|f| params.w1.matvec(f)).collect();
        let pos_logit: Vec<f64> = projected.iter().map(|pf| dot(pf, &pq)).collect();
        let pos_rel: Vec<f64> = pos_logit.iter().map(|&z| sigmoid(z)).collect();
        let mut logit_sets = vec![pos_logit];
        let mut labels = vec![1u8];
        if let Some(nq) = &self.negative_query {
            let pnq = params.w2.matvec(nq);
            logit_sets.push(projected.iter().map(|pf| dot(pf, &pnq)).collect());
            labels.push(0);
        }
        let inter = inter_loss_from_logits(&logit_sets, &labels)?;

        let intra = if self.negative_features.is_empty() {
            0.0
        } else {
            let neg_rel: Vec<f64> = self
                .negative_features
                .iter()
                .map(|g| sigmoid(dot(&params.w1.matvec(g), &pq)))
                .collect();
            intra_loss(&pos_rel, &neg_rel, self.beta)?
        };

        let [wr, we, wa] = self.weights;
        let report = LossReport {
            rank_loss: rank,
            inter_loss: inter,
            intra_loss: intra,
            total: wr * rank + we * inter + wa * intra,
            rewards: self.rewards.clone(),
            borrowed_negatives: self.borrowed_negatives,
        };
        Ok(Forward {
            merge_inputs,
            merge_outputs,
            proposal_features,
            report,
        })
    }

    pub fn loss(&self, params: &ModelParams) -> Result<LossReport> {
        Ok(self.forward(params)?.report)
    }

    /// Analytic gradient of the total loss.
    pub fn backward(&self, params: &ModelParams) -> Result<(LossReport, GradientSet)> {
        let fwd = self.forward(params)?;
        let d = self.dim;
        let mut grad = GradientSet::zeros(d);
        let [wr, we, wa] = self.weights;
        let k = fwd.proposal_features.len();
        let mut g_feat: Vec<Vec<f64>> = vec![vec![0.0; d]; k];

        // Ranking head.
        if wr != 0.0 {
            let scores: Vec<f64> = fwd
                .proposal_features
                .iter()
                .map(|f| sigmoid(dot(&params.w_s, f) + params.b_s))
                .collect();
            let logp = log_softmax(&scores);
            let mut reward_sum = 0.0;
            for r in &self.rewards {
                reward_sum += r;
            }
            for i in 0..k {
                let d_score = -self.rewards[i] + logp[i].exp() * reward_sum;
                let g_logit = wr * d_score * scores[i] * (1.0 - scores[i]);
                crate::linalg::axpy(&mut grad.w_s, g_logit, &fwd.proposal_features[i]);
                grad.b_s += g_logit;
                crate::linalg::axpy(&mut g_feat[i], g_logit, &params.w_s);
            }
        }

        // Relevance terms share the projections below.
        let pq = params.w2.matvec(&self.query);
        let projected: Vec<Vec<f64>> = fwd.proposal_features.iter().map(|f| params.w1.matvec(f)).collect();
        let pos_rel: Vec<f64> = projected.iter().map(|pf| sigmoid(dot(pf, &pq))).collect();
        // d(loss)/d(logit) for each proposal's matched-query relevance.
        let mut g_pos_logit = vec![0.0; k];

        if we != 0.0 {
            let terms = if self.negative_query.is_some() { 2 * k } else { k };
            let scale = we / terms as f64;
            // Clamped terms are flat.
            let (lo, hi) = bce_logit_bounds();
            let live = |z: f64| (lo..=hi).contains(&z);
            for i in 0..k {
                if live(dot(&projected[i], &pq)) {
                    g_pos_logit[i] += scale * -(1.0 - pos_rel[i]);
                }
            }
            if let Some(nq) = &self.negative_query {
                let pnq = params.w2.matvec(nq);
                for i in 0..k {
                    let z = dot(&projected[i], &pnq);
                    if !live(z) {
                        continue;
                    }
                    let g = scale * sigmoid(z);
                    grad.w1.add_outer(g, &pnq, &fwd.proposal_features[i]);
                    grad.w2.add_outer(g, &projected[i], nq);
                    crate::linalg::axpy(&mut g_feat[i], g, &params.w1.matvec_t(&pnq));
                }
            }
        }

        if wa != 0.0 && !self.negative_features.is_empty() {
            for i in 0..k {
                let g_neg = &self.negative_features[i];
                let pg = params.w1.matvec(g_neg);
                let rn = sigmoid(dot(&pg, &pq));
                if self.beta - pos_rel[i] + rn > 0.0 {
                    g_pos_logit[i] += wa * -(pos_rel[i] * (1.0 - pos_rel[i]));
                    let g = wa * rn * (1.0 - rn);
                    grad.w1.add_outer(g, &pq, g_neg);
                    grad.w2.add_outer(g, &pg, &self.query);
                }
            }
        }

        let w1t_pq = params.w1.matvec_t(&pq);
        for i in 0..k {
            let g = g_pos_logit[i];
            if g == 0.0 {
                continue;
            }
            grad.w1.add_outer(g, &pq, &fwd.proposal_features[i]);
            grad.w2.add_outer(g, &projected[i], &self.query);
            crate::linalg::axpy(&mut g_feat[i], g, &w1t_pq);
        }

        // Reverse pass over the merges.
        let mut g_merge: Vec<Vec<f64>> = vec![vec![0.0; d]; self.merges.len()];
        for (i, p) in self.proposals.iter().enumerate() {
            if let Input::Merge(s) = p {
                crate::linalg::axpy(&mut g_merge[*s], 1.0, &g_feat[i]);
            }
        }
        for s in (0..self.merges.len()).rev() {
            let g = std::mem::take(&mut g_merge[s]);
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            let (l, r) = &fwd.merge_inputs[s];
            grad.w3.add_outer(1.0, &g, l);
            grad.w3.add_outer(1.0, &g, r);
            crate::linalg::axpy(&mut grad.b, 1.0, &g);
            let back = params.w3.matvec_t(&g);
            for child in [&self.merges[s].left, &self.merges[s].right] {
                if let Input::Merge(c) = child {
                    crate::linalg::axpy(&mut g_merge[*c], 1.0, &back);
                }
            }
        }
        debug_assert_eq!(fwd.merge_outputs.len(), self.merges.len());
        Ok((fwd.report, grad))
    }
}

/// Gradients of the total loss with every discrete decision fixed by `trace`.
pub fn backward_frozen(
    trace: &DecisionTrace,
    episode: &Episode<'_>,
    params: &ModelParams,
    cfg: &Config,
) -> Result<GradientSet> {
    let frozen = FrozenEpisode::from_trace(trace, episode, params, cfg)?;
    Ok(frozen.backward(params)?.1)
}

/// Central differences of `f` with respect to every parameter entry.
pub fn central_differences(
    params: &ModelParams,
    eps: f64,
    mut f: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<GradientSet> {
    let mut grad = GradientSet::zeros(params.dim());
    let mut probe = params.clone();
    for t in 0..PARAM_NAMES.len() {
        let len = params.tensors()[t].1.len();
        for e in 0..len {
            let orig = params.tensors()[t].1[e];
            probe.tensors_mut()[t].1[e] = orig + eps;
            let plus = f(&probe)?;
            probe.tensors_mut()[t].1[e] = orig - eps;
            let minus = f(&probe)?;
            probe.tensors_mut()[t].1[e] = orig;
            grad.0.tensors_mut()[t].1[e] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grad)
}

/// Worst-case agreement between two gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Over entries where either gradient has magnitude ≥ `SMALL_GRADIENT`.
    pub max_relative_error: f64,
    /// Over entries where both gradients are below `SMALL_GRADIENT`.
    pub max_abs_error_small: f64,
    /// Tensor name and flat index of the worst relative error.
    pub worst_entry: Option<(&'static str, usize)>,
    pub entries: usize,
}

/// Below this magnitude a gradient entry is judged by absolute error.
pub const SMALL_GRADIENT: f64 = 1e-6;

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_relative_error <= rel_tol && self.max_abs_error_small <= abs_tol
    }
}

pub fn compare_gradients(analytic: &GradientSet, numeric: &GradientSet) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error_small: 0.0,
        worst_entry: None,
        entries: 0,
    };
    for ((name, a), (_, n)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        for (i, (x, y)) in a.iter().zip(n).enumerate() {
            report.entries += 1;
            let scale = x.abs().max(y.abs());
            let err = (x - y).abs();
            if scale < SMALL_GRADIENT {
                report.max_abs_error_small = report.max_abs_error_small.max(err);
            } else if report.worst_entry.is_none() || err / scale > report.max_relative_error {
                report.max_relative_error = err / scale;
                report.worst_entry = Some((name, i));
            }
        }
    }
    report
}

/// Compares [`backward_frozen`] with central finite differences of the
/// frozen loss.
pub fn finite_diff_check(
    trace: &DecisionTrace,
    episode: &Episode<'_>,
    params: &ModelParams,
    cfg: &Config,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(MhstError::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let frozen = FrozenEpisode::from_trace(trace, episode, params, cfg)?;
    let (_, analytic) = frozen.backward(params)?;
    let numeric = central_differences(params, epsilon, |p| Ok(frozen.loss(p)?.total))?;
    Ok(compare_gradients(&analytic, &numeric))
}

/// A random video pair and parameter set for gradient checking.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub sample: Sample,
    pub partner: Sample,
    pub params: ModelParams,
}

impl GradCheckInstance {
    /// Gaussian frames and queries; parameters from [`init_params`] with the
    /// relevance projections scaled up and non-zero biases, so that relevances
    /// spread around `tau` and every tensor receives gradient.
    pub fn random(seed: u64, dim: usize, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(MhstError::InvalidInput("need at least one frame".into()));
        }
        let mut rng = new_rng(seed);
        let mut params = init_params(dim, &mut rng)?;
        params.w1.scale(2.0);
        params.w2.scale(2.0);
        let bound = 1.0 / (dim as f64).sqrt();
        for x in params.b.iter_mut() {
            *x = rng.uniform(-bound, bound);
        }
        params.b_s = rng.uniform(-0.5, 0.5);
        let mut sample = |id: &str| -> Result<Sample> {
            let data: Vec<f64> = (0..frames * dim).map(|_| rng.normal()).collect();
            let features = FrameFeatures::new(id, Matrix::from_vec(frames, dim, data))?;
            let query = QueryEmbedding::new(id, (0..dim).map(|_| rng.normal()).collect())?;
            let label = OneShotLabel {
                video_id: id.to_string(),
                labeled_frame: rng.index(0, frames),
                gt_span: None,
            };
            Sample::new(features, query, label)
        };
        let sample_a = sample("a")?;
        let partner = sample("b")?;
        Ok(GradCheckInstance {
            sample: sample_a,
            partner,
            params,
        })
    }

    pub fn episode(&self, seed: u64) -> Episode<'_> {
        Episode {
            sample: &self.sample,
            negative_query: Some(&self.partner.query),
            fallback_video: Some(&self.partner.features),
            seed,
        }
    }

    /// Builds the tree, then checks the frozen gradients against central
    /// differences. Returns the trace, the live merge count and the report.
    pub fn check(&self, cfg: &Config, epsilon: f64) -> Result<(DecisionTrace, usize, GradCheckReport)> {
        let s = &self.sample;
        let tree = build_tree(&s.features, &s.query, &self.params, cfg)?;
        let episode = self.episode(cfg.seed);
        let frozen = FrozenEpisode::from_tree(&tree, &episode, &self.params, cfg)?;
        let report = finite_diff_check(tree.trace(), &episode, &self.params, cfg, epsilon)?;
        Ok((tree.trace().clone(), frozen.live_merges(), report))
    }
}

/// Builds the tree for one episode and returns its loss without updating.
pub fn forward_loss(episode: &Episode<'_>, params: &ModelParams, cfg: &Config) -> Result<LossReport> {
    let s = episode.sample;
    let tree = build_tree(&s.features, &s.query, params, cfg)?;
    FrozenEpisode::from_tree(&tree, episode, params, cfg)?.loss(params)
}

/// Pairing used for one epoch: video `i` borrows from video `(i + shift) % n`.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    pub shift: Option<usize>,
    pub seeds: Vec<u64>,
}

impl EpochPlan {
    pub fn draw(n: usize, rng: &mut DeterministicRng) -> Self {
        let shift = if n > 1 { Some(rng.index(1, n)) } else { None };
        let seeds = (0..n).map(|_| rng.next_u64()).collect();
        EpochPlan { shift, seeds }
    }

    pub fn episode<'a>(&self, dataset: &'a [Sample], i: usize) -> Episode<'a> {
        let partner = self.shift.map(|s| &dataset[(i + s) % dataset.len()]);
        Episode {
            sample: &dataset[i],
            negative_query: partner.map(|p| &p.query),
            fallback_video: partner.map(|p| &p.features),
            seed: self.seeds[i],
        }
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut out = LossReport::default();
    for r in reports {
        out.rank_loss += r.rank_loss;
        out.inter_loss += r.inter_loss;
        out.intra_loss += r.intra_loss;
        out.total += r.total;
        out.borrowed_negatives |= r.borrowed_negatives;
    }
    out.rank_loss /= n;
    out.inter_loss /= n;
    out.intra_loss /= n;
    out.total /= n;
    out
}

/// Plain gradient descent, one update per video in dataset order.
/// Returns the final parameters and the mean loss of every epoch.
pub fn train(
    dataset: &[Sample],
    mut params: ModelParams,
    cfg: &Config,
    epochs: usize,
) -> Result<(ModelParams, Vec<LossReport>)> {
    if dataset.is_empty() {
        return Err(MhstError::EmptySet("training set is empty".into()));
    }
    cfg.validate()?;
    let mut rng = new_rng(cfg.seed);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let plan = EpochPlan::draw(dataset.len(), &mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let mut reports = Vec::with_capacity(dataset.len());
        for i in 0..dataset.len() {
            let episode = plan.episode(dataset, i);
            let s = episode.sample;
            let tree = build_tree(&s.features, &s.query, &params, cfg)?;
            let frozen = FrozenEpisode::from_tree(&tree, &episode, &params, cfg)?;
            let (report, grad) = frozen.backward(&params)?;
            if !report.is_finite() || !grad.is_finite() {
                return Err(MhstError::NonFiniteLoss {
                    epoch,
                    video_id: s.features.video_id.clone(),
                    rank: report.rank_loss,
                    inter: report.inter_loss,
                    intra: report.intra_loss,
                });
            }
            params.descend(lr, &grad);
            reports.push(report);
        }
        history.push(mean_report(&reports));
    }
    Ok((params, history))
}
