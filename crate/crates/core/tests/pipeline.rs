use std::fs;
use std::path::{Path, PathBuf};

use mhst_core::io::{load_manifest, load_samples, read_params, write_params};
use mhst_core::synth::{synth_generate, SynthConfig};
use mhst_core::trace::DecisionTrace;
use mhst_core::{build_tree, init_params, new_rng, predict, replay_tree, train, Config, Span};
use tempfile::tempdir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[test]
fn good_fixture_manifest_loads() {
    let m = load_manifest(&fixtures().join("good.tsv")).unwrap();
    assert_eq!(m.entries.len(), 2);
    assert_eq!(m.entries[0].gt_span, Some(Span { start: 1, end: 3 }));
    assert_eq!(m.entries[1].gt_span, None);
    let samples = load_samples(&m).unwrap();
    assert_eq!(samples[0].features.n_frames(), 4);
    assert_eq!(samples[0].features.frame(3), &[-2.0, 3.0]);
    assert_eq!(samples[0].query.data, vec![1.0, -1.0]);
}

#[test]
fn every_malformed_manifest_is_rejected() {
    let dir = fixtures().join("bad_manifests");
    let mut names: Vec<PathBuf> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    assert!(names.len() >= 10);
    for path in names {
        let loaded = load_manifest(&path).and_then(|m| load_samples(&m));
        let err = match loaded {
            Ok(_) => panic!("{} was accepted", path.display()),
            Err(e) => e.to_string(),
        };
        let missing = path.file_name().unwrap().to_string_lossy().starts_with("missing");
        assert_eq!(err.contains("No such file") || err.contains("not found"), missing, "{}: {err}", path.display());
    }
}

#[test]
fn manifest_errors_name_the_line() {
    let dir = tempdir().unwrap();
    let good = fs::read_to_string(fixtures().join("good.tsv")).unwrap();
    let text = good.replace("features/v.bin", &fixtures().join("features/v.bin").display().to_string())
        .replace("queries/q.bin", &fixtures().join("queries/q.bin").display().to_string())
        + "v\tx\tq\tq\tnope\t-\t-\n";
    let path = dir.path().join("m.tsv");
    fs::write(&path, text).unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("m.tsv:3") && err.contains("labeled_frame"), "{err}");
}

#[test]
fn synth_train_predict_on_disk() {
    let dir = tempdir().unwrap();
    let cfg = SynthConfig {
        n_videos: 6,
        n_frames: 16,
        dim: 8,
        n_segments_per_video: 4,
        noise_sigma: 0.1,
        seed: 2,
    };
    synth_generate(&cfg, dir.path()).unwrap();
    let samples = load_samples(&load_manifest(&dir.path().join("manifest.tsv")).unwrap()).unwrap();
    let config = Config::default();
    let init = init_params(8, &mut new_rng(config.seed)).unwrap();
    let (params, history) = train(&samples, init, &config, 3).unwrap();
    assert_eq!(history.len(), 3);
    assert!(history.iter().all(|r| r.total.is_finite()));

    let ppath = dir.path().join("params.bin");
    write_params(&ppath, &params).unwrap();
    let reread = read_params(&ppath).unwrap();
    for s in &samples {
        let tree = build_tree(&s.features, &s.query, &reread, &config).unwrap();
        let (span, conf) = predict(&tree, &s.query, &reread).unwrap();
        assert!(span.end < 16);
        assert!((0.0..=1.0).contains(&conf));

        let parsed = DecisionTrace::parse(&tree.trace().to_text()).unwrap();
        let replayed = replay_tree(&s.features, &s.query, &reread, &config, &parsed).unwrap();
        assert_eq!(replayed.active_roots(), tree.active_roots());
    }
}

#[test]
fn training_is_deterministic() {
    let samples = mhst_core::synth::generate_samples(&SynthConfig {
        n_videos: 4,
        n_frames: 12,
        dim: 6,
        n_segments_per_video: 3,
        noise_sigma: 0.1,
        seed: 5,
    })
    .unwrap();
    let cfg = Config::default();
    let run = || train(&samples, init_params(6, &mut new_rng(1)).unwrap(), &cfg, 2).unwrap();
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}
