//! Seeded synthetic localization datasets.
//!
//! Each video is cut into contiguous segments, each segment gets a random unit
//! "concept" vector, and frames are their segment's concept plus Gaussian
//! noise. The query is a noisy copy of one target segment's concept.

use std::fs;
use std::path::Path;

use crate::error::{MhstError, Result};
use crate::io::{manifest_to_text, write_feature_file, write_query_file, Manifest, ManifestEntry};
use crate::linalg::{norm2, Matrix};
use crate::rng::{new_rng, DeterministicRng};
use crate::types::{FrameFeatures, OneShotLabel, QueryEmbedding, Sample, Span};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub n_frames: usize,
    pub dim: usize,
    pub n_segments_per_video: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.n_frames == 0 || self.dim == 0 || self.n_segments_per_video == 0 {
            return Err(MhstError::Config(
                "videos, frames, dim and segments must be positive".into(),
            ));
        }
        if self.n_segments_per_video > self.n_frames {
            return Err(MhstError::Config(format!(
                "{} segments do not fit in {} frames",
                self.n_segments_per_video, self.n_frames
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(MhstError::Config(format!("invalid noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// A generated video with its segment layout.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub sample: Sample,
    pub segments: Vec<Span>,
    pub target: usize,
}

/// Stored precision; keeps in-memory samples identical to what is written.
fn f32_round(x: f64) -> f64 {
    f64::from(x as f32)
}

fn unit_vector(d: usize, rng: &mut DeterministicRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = norm2(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Contiguous partition of `n` frames into `s` segments whose lengths differ
/// by at most one; the longer segments are placed at random.
fn partition(n: usize, s: usize, rng: &mut DeterministicRng) -> Vec<Span> {
    let (base, extra) = (n / s, n % s);
    let mut long = vec![false; s];
    for flag in long.iter_mut().take(extra) {
        *flag = true;
    }
    for i in (1..s).rev() {
        let j = rng.index(0, i + 1);
        long.swap(i, j);
    }
    let mut spans = Vec::with_capacity(s);
    let mut start = 0;
    for is_long in long {
        let len = base + usize::from(is_long);
        spans.push(Span { start, end: start + len - 1 });
        start += len;
    }
    spans
}

fn generate_video(index: usize, cfg: &SynthConfig, rng: &mut DeterministicRng) -> Result<SynthVideo> {
    let (n, d) = (cfg.n_frames, cfg.dim);
    let segments = partition(n, cfg.n_segments_per_video, rng);
    let concepts: Vec<Vec<f64>> = segments.iter().map(|_| unit_vector(d, rng)).collect();
    let mut data = Vec::with_capacity(n * d);
    for (seg, concept) in segments.iter().zip(&concepts) {
        for _ in seg.start..=seg.end {
            data.extend(concept.iter().map(|c| f32_round(c + cfg.noise_sigma * rng.normal())));
        }
    }
    let target = rng.index(0, segments.len());
    let query: Vec<f64> = concepts[target]
        .iter()
        .map(|c| f32_round(c + cfg.noise_sigma * rng.normal()))
        .collect();
    let gt = segments[target];
    let labeled_frame = rng.index(gt.start, gt.end + 1);
    let video_id = format!("v{index:04}");
    let sample = Sample::new(
        FrameFeatures::new(video_id.clone(), Matrix::from_vec(n, d, data))?,
        QueryEmbedding::new(format!("q{index:04}"), query)?,
        OneShotLabel {
            video_id,
            labeled_frame,
            gt_span: Some(gt),
        },
    )?;
    Ok(SynthVideo {
        sample,
        segments,
        target,
    })
}

/// Generates the dataset in memory. Each video draws from its own child stream.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthVideo>> {
    cfg.validate()?;
    let mut master = new_rng(cfg.seed);
    (0..cfg.n_videos)
        .map(|i| {
            let mut rng = master.split();
            generate_video(i, cfg, &mut rng)
        })
        .collect()
}

pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    Ok(generate(cfg)?.into_iter().map(|v| v.sample).collect())
}

/// Writes `features/`, `queries/` and `manifest.tsv` under `out`.
pub fn write_dataset(out: &Path, videos: &[SynthVideo]) -> Result<Manifest> {
    for sub in ["features", "queries"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| MhstError::io(&dir, e))?;
    }
    let mut manifest = Manifest::default();
    for v in videos {
        let s = &v.sample;
        let fpath = out.join("features").join(format!("{}.bin", s.features.video_id));
        let qpath = out.join("queries").join(format!("{}.bin", s.query.query_id));
        write_feature_file(&fpath, s.features.matrix())?;
        write_query_file(&qpath, &s.query.data)?;
        manifest.entries.push(ManifestEntry {
            video_id: s.features.video_id.clone(),
            feature_path: fpath,
            query_id: s.query.query_id.clone(),
            query_path: qpath,
            labeled_frame: s.label.labeled_frame,
            gt_span: s.label.gt_span,
        });
    }
    let mpath = out.join("manifest.tsv");
    fs::write(&mpath, manifest_to_text(&manifest, out)).map_err(|e| MhstError::io(&mpath, e))?;
    Ok(manifest)
}

pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    let videos = generate(cfg)?;
    write_dataset(out, &videos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{load_manifest, load_samples};
    use crate::linalg::dot;
    use tempfile::tempdir;

    fn cfg(sigma: f64) -> SynthConfig {
        SynthConfig {
            n_videos: 5,
            n_frames: 12,
            dim: 6,
            n_segments_per_video: 3,
            noise_sigma: sigma,
            seed: 9,
        }
    }

    #[test]
    fn segments_partition_and_label_in_target() {
        for v in generate(&cfg(0.1)).unwrap() {
            assert_eq!(v.segments.len(), 3);
            let mut next = 0;
            for s in &v.segments {
                assert_eq!(s.start, next);
                next = s.end + 1;
            }
            assert_eq!(next, 12);
            let gt = v.sample.label.gt_span.unwrap();
            assert_eq!(gt, v.segments[v.target]);
            assert!(gt.contains(v.sample.label.labeled_frame));
        }
    }

    #[test]
    fn zero_noise_frames_are_identical_within_segment() {
        for v in generate(&cfg(0.0)).unwrap() {
            let f = &v.sample.features;
            for s in &v.segments {
                for i in s.start..=s.end {
                    assert_eq!(f.frame(i), f.frame(s.start));
                }
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg(0.1);
        c.n_segments_per_video = 13;
        assert!(generate(&c).is_err());
        c.n_segments_per_video = 0;
        assert!(generate(&c).is_err());
        let mut c = cfg(-1.0);
        c.n_videos = 1;
        assert!(generate(&c).is_err());
    }

    #[test]
    fn same_seed_writes_identical_bytes() {
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        synth_generate(&cfg(0.1), a.path()).unwrap();
        synth_generate(&cfg(0.1), b.path()).unwrap();
        for rel in ["manifest.tsv", "features/v0003.bin", "queries/q0004.bin"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
        let loaded = load_samples(&load_manifest(&a.path().join("manifest.tsv")).unwrap()).unwrap();
        let mem = generate_samples(&cfg(0.1)).unwrap();
        for (x, y) in loaded.iter().zip(&mem) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.query, y.query);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn query_is_closest_to_target_segment() {
        let c = SynthConfig {
            n_videos: 200,
            n_frames: 32,
            dim: 16,
            n_segments_per_video: 4,
            noise_sigma: 0.1,
            seed: 1,
        };
        let cos = |a: &[f64], b: &[f64]| dot(a, b) / (norm2(a) * norm2(b));
        let mut separable = 0;
        for v in generate(&c).unwrap() {
            let q = &v.sample.query.data;
            let f = &v.sample.features;
            let mean_cos = |s: &Span| {
                (s.start..=s.end).map(|i| cos(q, f.frame(i))).sum::<f64>() / s.len() as f64
            };
            let target = mean_cos(&v.segments[v.target]);
            if v
                .segments
                .iter()
                .enumerate()
                .all(|(k, s)| k == v.target || mean_cos(s) < target)
            {
                separable += 1;
            }
        }
        assert!(separable >= 190, "{separable}/200");
    }
}
