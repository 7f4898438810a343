//! Acceptance run: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

use std::time::{Duration, Instant};

use mhst_core::eval::{compare_trees, oracle_build, recall_at, temporal_iou};
use mhst_core::io::{decode_matrix, encode_matrix, encode_params};
use mhst_core::learning::{inter_loss, intra_loss, rank_loss, GradCheckInstance};
use mhst_core::relevance::node_prune_relevance;
use mhst_core::synth::{generate_samples, SynthConfig};
use mhst_core::trace::{DecisionTrace, TraceEvent};
use mhst_core::tree::NodeState;
use mhst_core::{
    build_tree, init_params, new_rng, predict, replay_tree, train, Config, DeterministicRng, FrameFeatures, Matrix,
    ModelParams, QueryEmbedding, Sample, SegTree, Span,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestCaseError, TestRunner};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Random instance with W1/W2 scaled so relevances spread on both sides of tau.
fn random_instance(rng: &mut DeterministicRng, n: usize, d: usize, w_scale: f64) -> (FrameFeatures, QueryEmbedding, ModelParams) {
    let data: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let f = FrameFeatures::new("x", Matrix::from_vec(n, d, data)).unwrap();
    let q = QueryEmbedding::new("q", (0..d).map(|_| rng.normal()).collect()).unwrap();
    let mut p = init_params(d, rng).unwrap();
    p.w1.scale(w_scale);
    p.w2.scale(w_scale);
    (f, q, p)
}

fn criterion_1() -> Outcome {
    let cfg = Config::default();
    let mut rng = new_rng(0);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut merges = 0;
    for trial in 0..200 {
        let n = rng.index(2, 9);
        let d = rng.index(4, 17);
        let scale = rng.uniform(1.0, 4.0);
        let (f, q, p) = random_instance(&mut rng, n, d, scale);
        let main = build_tree(&f, &q, &p, &cfg).unwrap();
        let reference = oracle_build(&f, &q, &p, &cfg).unwrap();
        merges += main.trace().merge_count();
        match compare_trees(&main, &reference, 1e-9) {
            Ok(diff) => worst = worst.max(diff),
            Err(msg) => return outcome(false, format!("trial {trial} (N_v={n}, d={d}): {msg}")),
        }
    }
    let elapsed = start.elapsed();
    outcome(
        elapsed < Duration::from_secs(30),
        format!("200/200 identical, {merges} merges, max feature diff {worst:e}, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let cfg = Config::default();
    let start = Instant::now();
    let (mut worst_rel, mut worst_abs) = (0.0f64, 0.0f64);
    let mut live = 0;
    let mut failing = Vec::new();
    for i in 0..20u64 {
        let d = [4, 8, 16][i as usize % 3];
        let n = [6, 10][(i as usize / 3) % 2];
        let inst = GradCheckInstance::random(i, d, n).unwrap();
        let (_, l, report) = inst.check(&cfg, 1e-4).unwrap();
        live += l;
        worst_rel = worst_rel.max(report.max_relative_error);
        worst_abs = worst_abs.max(report.max_abs_error_small);
        if !report.passes(1e-4, 1e-7) {
            failing.push(i);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failing.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "max rel {worst_rel:e}, max abs (small) {worst_abs:e}, {live} live merges, failing seeds {failing:?}, {elapsed:.2?}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let rank = rank_loss(&[0.3, 0.3], &[1.0, 1.0]).unwrap();
    let inter = inter_loss(&[vec![0.5]], &[1]).unwrap();
    let intra = intra_loss(&[0.9], &[0.1], 0.5).unwrap();
    let pass = (rank - 2.0 * ln2).abs() <= 1e-12 && (inter - ln2).abs() <= 1e-12 && intra == 0.0;
    outcome(pass, format!("rank {rank:.15}, inter {inter:.15}, intra {intra}"))
}

fn criterion_4() -> Outcome {
    let c = Config::default();
    let pass = c.alpha == 0.6
        && c.tau == 0.7
        && c.lambda1 == 1.0
        && c.lambda2 == 1.0
        && c.scan_period == 3
        && c.lr_decay_factor == 0.1
        && c.lr_decay_every == 35;
    outcome(
        pass,
        format!(
            "alpha {} tau {} lambda1 {} lambda2 {} L {} decay x{} every {}",
            c.alpha, c.tau, c.lambda1, c.lambda2, c.scan_period, c.lr_decay_factor, c.lr_decay_every
        ),
    )
}

fn benchmark() -> (Vec<Sample>, Vec<Sample>) {
    let mut all = generate_samples(&SynthConfig {
        n_videos: 150,
        n_frames: 32,
        dim: 16,
        n_segments_per_video: 4,
        noise_sigma: 0.1,
        seed: 0,
    })
    .unwrap();
    let test = all.split_off(100);
    (all, test)
}

fn r1_iou05(samples: &[Sample], params: &ModelParams, cfg: &Config) -> f64 {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in samples {
        let tree = build_tree(&s.features, &s.query, params, cfg).unwrap();
        preds.push(vec![predict(&tree, &s.query, params).unwrap().0]);
        gts.push(s.label.gt_span);
    }
    recall_at(&preds, &gts, 1, 0.5).unwrap().recall
}

fn trained_r1(train_set: &[Sample], test_set: &[Sample], cfg: &Config) -> f64 {
    let init = init_params(16, &mut new_rng(cfg.seed)).unwrap();
    let (params, _) = train(train_set, init, cfg, 50).unwrap();
    r1_iou05(test_set, &params, cfg)
}

fn criterion_5(test_set: &[Sample], trained: f64, elapsed: Duration) -> Outcome {
    let cfg = Config::default();
    let untrained = r1_iou05(test_set, &init_params(16, &mut new_rng(cfg.seed)).unwrap(), &cfg);
    outcome(
        trained >= 0.70 && untrained <= trained - 0.15,
        format!(
            "trained R@1 IoU=0.5 {trained:.4} (need >= 0.70), untrained {untrained:.4} (need <= trained - 0.15), training {elapsed:.2?}"
        ),
    )
}

fn criterion_6(train_set: &[Sample], test_set: &[Sample], both: f64) -> Outcome {
    let no_visual = Config {
        lambda2: 0.0,
        ..Config::default()
    };
    let no_linguistic = Config {
        lambda1: 0.0,
        ..Config::default()
    };
    let v = trained_r1(train_set, test_set, &no_visual);
    let l = trained_r1(train_set, test_set, &no_linguistic);
    outcome(
        v <= both - 0.02 && l <= both - 0.02,
        format!("both {both:.4}, lambda2=0 {v:.4}, lambda1=0 {l:.4} (each need <= both - 0.02)"),
    )
}

fn is_partition(tree: &SegTree) -> bool {
    let mut spans: Vec<Span> = tree.active_roots().iter().map(|&r| tree.node(r).span).collect();
    spans.sort_by_key(|s| s.start);
    let mut next = 0;
    for s in spans {
        if s.start != next {
            return false;
        }
        next = s.end + 1;
    }
    next == tree.n_frames()
}

/// Trees replayed from every prefix of the trace that ends with a scan.
fn trees_after_each_scan(
    f: &FrameFeatures,
    q: &QueryEmbedding,
    p: &ModelParams,
    cfg: &Config,
    trace: &DecisionTrace,
) -> Vec<SegTree> {
    let events: Vec<TraceEvent> = trace.iter().cloned().collect();
    let mut out = Vec::new();
    for i in 0..events.len() {
        let closes_scan = matches!(events[i], TraceEvent::Downweight { .. })
            && !matches!(events.get(i + 1), Some(TraceEvent::Downweight { .. }));
        if closes_scan {
            let mut prefix = DecisionTrace::default();
            for e in &events[..=i] {
                prefix.push(e.clone());
            }
            out.push(replay_tree(f, q, p, cfg, &prefix).unwrap());
        }
    }
    out
}

fn instance_strategy() -> impl Strategy<Value = (u64, usize, usize, f64)> {
    (any::<u64>(), 1usize..=12, 2usize..=8, 0.5f64..5.0)
}

fn run_property(
    name: &str,
    cases: u32,
    strategy: impl Strategy<Value = (u64, usize, usize, f64)>,
    test: impl Fn((u64, usize, usize, f64)) -> Result<(), TestCaseError>,
) -> Result<String, String> {
    let mut runner = TestRunner::new(PtConfig {
        cases,
        failure_persistence: None,
        ..PtConfig::default()
    });
    runner
        .run(&strategy, test)
        .map(|_| format!("{name} ok"))
        .map_err(|e| format!("{name}: {e}"))
}

fn criterion_7() -> Outcome {
    let cfg = Config::default();
    let mut results = Vec::new();

    results.push(run_property("span-partition", 500, instance_strategy(), |(seed, n, d, s)| {
        let (f, q, p) = random_instance(&mut new_rng(seed), n, d, s);
        let tree = build_tree(&f, &q, &p, &cfg).unwrap();
        prop_assert!(is_partition(&tree));
        for t in trees_after_each_scan(&f, &q, &p, &cfg, tree.trace()) {
            prop_assert!(is_partition(&t));
        }
        Ok(())
    }));

    results.push(run_property("prune-threshold", 500, instance_strategy(), |(seed, n, d, s)| {
        let (f, q, p) = random_instance(&mut new_rng(seed), n, d, s);
        let tree = build_tree(&f, &q, &p, &cfg).unwrap();
        let mut after = trees_after_each_scan(&f, &q, &p, &cfg, tree.trace());
        after.push(tree);
        for t in &after {
            for &r in t.active_roots() {
                let node = t.node(r);
                if !node.is_leaf() {
                    let rel = node_prune_relevance(&node.feature, &q.data, &p).unwrap();
                    prop_assert!(rel >= cfg.tau, "root {} has relevance {rel}", r);
                }
            }
            for node in t.nodes() {
                if node.state == NodeState::Pruned {
                    prop_assert!(!t.active_roots().contains(&node.id));
                }
            }
        }
        Ok(())
    }));

    results.push(run_property("trace-replay", 500, instance_strategy(), |(seed, n, d, s)| {
        let (f, q, p) = random_instance(&mut new_rng(seed), n, d, s);
        let tree = build_tree(&f, &q, &p, &cfg).unwrap();
        let again = build_tree(&f, &q, &p, &cfg).unwrap();
        prop_assert_eq!(tree.trace().to_text(), again.trace().to_text());
        let replayed = replay_tree(&f, &q, &p, &cfg, tree.trace()).unwrap();
        let diff = compare_trees(&tree, &replayed, 1e-12).map_err(TestCaseError::fail)?;
        prop_assert!(diff <= 1e-12);
        Ok(())
    }));

    results.push(run_property("iou-recall-monotone", 500, instance_strategy(), |(seed, videos, k, _)| {
        let mut rng = new_rng(seed);
        let span = |rng: &mut DeterministicRng| {
            let a = rng.index(0, 20);
            Span::new(a, a + rng.index(0, 8)).unwrap()
        };
        let preds: Vec<Vec<Span>> = (0..videos).map(|_| (0..k).map(|_| span(&mut rng)).collect()).collect();
        let gts: Vec<Option<Span>> = (0..videos).map(|_| Some(span(&mut rng))).collect();
        let (a, b) = (span(&mut rng), span(&mut rng));
        let iou = temporal_iou(a, b).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert_eq!(iou, temporal_iou(b, a).unwrap());
        prop_assert_eq!(temporal_iou(a, a).unwrap(), 1.0);
        let ms = [0.1, 0.3, 0.5, 0.7, 1.0];
        for n in 1..=k {
            for w in ms.windows(2) {
                let lo = recall_at(&preds, &gts, n, w[0]).unwrap().recall;
                let hi = recall_at(&preds, &gts, n, w[1]).unwrap().recall;
                prop_assert!(hi <= lo);
            }
            if n < k {
                for &m in &ms {
                    let now = recall_at(&preds, &gts, n, m).unwrap().recall;
                    let more = recall_at(&preds, &gts, n + 1, m).unwrap().recall;
                    prop_assert!(more >= now);
                }
            }
        }
        Ok(())
    }));

    results.push(run_property("file-round-trip", 1000, instance_strategy(), |(seed, rows, cols, s)| {
        let mut rng = new_rng(seed);
        let m = Matrix::from_fn(rows, cols, |_, _| rng.normal() * s * 1e3);
        let mut bytes = Vec::new();
        encode_matrix(&m, &mut bytes).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 4 * rows * cols);
        let (back, end) = decode_matrix(&bytes, 0, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(end, bytes.len());
        for (x, y) in m.as_slice().iter().zip(back.as_slice()) {
            prop_assert_eq!(f64::from(*x as f32), *y);
        }
        let p = init_params(cols, &mut rng).unwrap();
        let encoded = encode_params(&p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        std::fs::write(&path, &encoded).unwrap();
        let reread = mhst_core::io::read_params(&path).unwrap();
        prop_assert_eq!(encode_params(&reread).unwrap(), encoded);
        Ok(())
    }));

    let pass = results.iter().all(Result::is_ok);
    let detail: Vec<String> = results.into_iter().map(|r| r.unwrap_or_else(|e| e)).collect();
    outcome(pass, detail.join("; "))
}

fn main() {
    // Flags passed by `cargo test` are ignored.
    let mut failed = 0;
    let mut line = |n: usize, name: &str, o: Outcome| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {name}: {verdict} ({})", o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    line(1, "oracle tree equivalence", criterion_1());
    line(2, "gradient correctness", criterion_2());
    line(3, "closed-form losses", criterion_3());
    line(4, "config defaults", criterion_4());
    let (train_set, test_set) = benchmark();
    let start = Instant::now();
    let both = trained_r1(&train_set, &test_set, &Config::default());
    let elapsed = start.elapsed();
    line(5, "synthetic end-to-end", criterion_5(&test_set, both, elapsed));
    line(6, "ablation direction", criterion_6(&train_set, &test_set, both));
    line(7, "invariant suite", criterion_7());
    if failed > 0 {
        println!("{failed} of 7 criteria failed");
        std::process::exit(1);
    }
    println!("all 7 criteria passed");
}
