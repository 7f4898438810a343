//! Binary matrix files, parameter files, TSV manifests and text outputs.
//!
//! Matrix file layout (little endian):
//!
//! ```text
//! 4D 48 53 54 46 31 00 00   magic "MHSTF1\0\0"
//! u32 rows, u32 cols
//! rows * cols f32 values, row-major
//! ```
//!
//! A parameter file is six such blocks back to back, in the order
//! W1, W2, W3, b, w_s, b_s.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{MhstError, Result};
use crate::linalg::Matrix;
use crate::params::{ModelParams, PARAM_NAMES};
use crate::types::{FrameFeatures, OneShotLabel, QueryEmbedding, Sample, Span};

pub const MAGIC: [u8; 8] = [0x4D, 0x48, 0x53, 0x54, 0x46, 0x31, 0x00, 0x00];
const HEADER_LEN: usize = 16;

/// Appends one matrix block to `out`.
pub fn encode_matrix(m: &Matrix, out: &mut Vec<u8>) -> Result<()> {
    if !m.is_finite() {
        return Err(MhstError::InvalidInput("cannot store non-finite values".into()));
    }
    let dims = |n: usize| {
        u32::try_from(n).map_err(|_| MhstError::InvalidInput(format!("dimension {n} exceeds u32")))
    };
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&dims(m.rows())?.to_le_bytes());
    out.extend_from_slice(&dims(m.cols())?.to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Decodes one matrix block starting at `offset`; returns it and the offset past it.
pub fn decode_matrix(bytes: &[u8], offset: usize, path: &Path) -> Result<(Matrix, usize)> {
    let fmt_err = |at: usize, message: String| MhstError::Format {
        path: path.to_path_buf(),
        offset: at as u64,
        message,
    };
    if bytes.len() < offset + HEADER_LEN {
        return Err(fmt_err(
            bytes.len(),
            format!(
                "truncated header: expected {} bytes, found {}",
                offset + HEADER_LEN,
                bytes.len()
            ),
        ));
    }
    if bytes[offset..offset + 8] != MAGIC {
        return Err(fmt_err(offset, "bad magic".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let rows = u32_at(offset + 8);
    let cols = u32_at(offset + 12);
    let payload = offset + HEADER_LEN;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(payload))
        .ok_or_else(|| fmt_err(offset + 8, format!("dimensions {rows}x{cols} overflow")))?;
    if bytes.len() < expected {
        return Err(fmt_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let at = payload + 4 * i;
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(fmt_err(at, format!("non-finite value {v}")));
        }
        data.push(f64::from(v));
    }
    Ok((Matrix::from_vec(rows, cols, data), expected))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MhstError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| MhstError::io(path, e))
}

pub fn write_feature_file(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    encode_matrix(m, &mut out)?;
    write_bytes(path, &out)
}

/// Reads a single-matrix file. Trailing bytes are a format error.
pub fn read_feature_file(path: &Path) -> Result<Matrix> {
    let bytes = read_bytes(path)?;
    let (m, end) = decode_matrix(&bytes, 0, path)?;
    if end != bytes.len() {
        return Err(MhstError::Format {
            path: path.to_path_buf(),
            offset: end as u64,
            message: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    Ok(m)
}

/// Row and column counts from a matrix file header.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    let bytes = read_bytes(path)?;
    let (m, _) = decode_matrix(&bytes, 0, path)?;
    Ok((m.rows(), m.cols()))
}

/// Reads a `1 x d` query file.
pub fn read_query_file(path: &Path, query_id: &str) -> Result<QueryEmbedding> {
    let m = read_feature_file(path)?;
    if m.rows() != 1 {
        return Err(MhstError::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: format!("query file must hold 1 row, found {}", m.rows()),
        });
    }
    QueryEmbedding::new(query_id, m.into_vec())
}

pub fn write_query_file(path: &Path, q: &[f64]) -> Result<()> {
    write_feature_file(path, &Matrix::from_vec(1, q.len(), q.to_vec()))
}

pub fn encode_params(p: &ModelParams) -> Result<Vec<u8>> {
    let d = p.dim();
    let mut out = Vec::new();
    encode_matrix(&p.w1, &mut out)?;
    encode_matrix(&p.w2, &mut out)?;
    encode_matrix(&p.w3, &mut out)?;
    encode_matrix(&Matrix::from_vec(1, d, p.b.clone()), &mut out)?;
    encode_matrix(&Matrix::from_vec(1, d, p.w_s.clone()), &mut out)?;
    encode_matrix(&Matrix::from_vec(1, 1, vec![p.b_s]), &mut out)?;
    Ok(out)
}

pub fn write_params(path: &Path, p: &ModelParams) -> Result<()> {
    write_bytes(path, &encode_params(p)?)
}

pub fn read_params(path: &Path) -> Result<ModelParams> {
    let bytes = read_bytes(path)?;
    let mut blocks = Vec::with_capacity(6);
    let mut offset = 0;
    for name in PARAM_NAMES {
        let at = offset;
        let (m, next) = decode_matrix(&bytes, offset, path).map_err(|e| match e {
            MhstError::Format { path, offset, message } => MhstError::Format {
                path,
                offset,
                message: format!("section {name}: {message}"),
            },
            other => other,
        })?;
        blocks.push((name, at, m));
        offset = next;
    }
    if offset != bytes.len() {
        return Err(MhstError::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: format!("{} trailing bytes", bytes.len() - offset),
        });
    }
    let d = blocks[0].2.rows();
    let expect = [(d, d), (d, d), (d, d), (1, d), (1, d), (1, 1)];
    for ((name, at, m), (r, c)) in blocks.iter().zip(expect) {
        if m.rows() != r || m.cols() != c {
            return Err(MhstError::Format {
                path: path.to_path_buf(),
                offset: *at as u64 + 8,
                message: format!("section {name} is {}x{}, expected {r}x{c}", m.rows(), m.cols()),
            });
        }
    }
    let mut it = blocks.into_iter().map(|(_, _, m)| m);
    let (w1, w2, w3) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    let b = it.next().unwrap().into_vec();
    let w_s = it.next().unwrap().into_vec();
    let b_s = it.next().unwrap().get(0, 0);
    let p = ModelParams { w1, w2, w3, b, w_s, b_s };
    p.validate(d)?;
    Ok(p)
}

/// One manifest line with paths resolved against the manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub feature_path: PathBuf,
    pub query_id: String,
    pub query_path: PathBuf,
    pub labeled_frame: usize,
    pub gt_span: Option<Span>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FIELDS: [&str; 7] = [
    "video_id",
    "feature_path",
    "query_id",
    "query_path",
    "labeled_frame",
    "gt_start",
    "gt_end",
];

/// Parses manifest text. Blank lines and lines starting with `#` are skipped.
/// Paths are joined onto `base`. No files are touched.
pub fn parse_manifest(text: &str, path: &Path, base: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |field: &str, message: String| MhstError::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            field: field.to_string(),
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != MANIFEST_FIELDS.len() {
            let field = MANIFEST_FIELDS.get(cols.len()).copied().unwrap_or("gt_end");
            return Err(err(
                field,
                format!("expected {} tab-separated fields, found {}", MANIFEST_FIELDS.len(), cols.len()),
            ));
        }
        for (k, c) in cols.iter().enumerate().take(4) {
            if c.is_empty() {
                return Err(err(MANIFEST_FIELDS[k], "empty".into()));
            }
        }
        let labeled_frame = cols[4]
            .parse::<usize>()
            .map_err(|e| err("labeled_frame", format!("`{}`: {e}", cols[4])))?;
        let opt = |k: usize| -> Result<Option<usize>> {
            match cols[k] {
                "-" => Ok(None),
                s => s
                    .parse::<usize>()
                    .map(Some)
                    .map_err(|e| err(MANIFEST_FIELDS[k], format!("`{s}`: {e}"))),
            }
        };
        let gt_span = match (opt(5)?, opt(6)?) {
            (None, None) => None,
            (Some(s), Some(e)) => {
                if s > e {
                    return Err(err("gt_end", format!("end {e} before start {s}")));
                }
                Some(Span { start: s, end: e })
            }
            (Some(_), None) => return Err(err("gt_end", "missing while gt_start is set".into())),
            (None, Some(_)) => return Err(err("gt_start", "missing while gt_end is set".into())),
        };
        entries.push(ManifestEntry {
            video_id: cols[0].to_string(),
            feature_path: base.join(cols[1]),
            query_id: cols[2].to_string(),
            query_path: base.join(cols[3]),
            labeled_frame,
            gt_span,
        });
    }
    Ok(Manifest { entries })
}

/// Reads a manifest and checks every entry against its feature file header.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| MhstError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(&text, path, base)?;
    let mut line_of = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !(l.trim().is_empty() || l.starts_with('#')))
        .map(|(i, _)| i + 1);
    for entry in &manifest.entries {
        let line = line_of.next().unwrap_or(0);
        let err = |field: &str, message: String| MhstError::Manifest {
            path: path.to_path_buf(),
            line,
            field: field.to_string(),
            message,
        };
        let (n_frames, _) = read_feature_header(&entry.feature_path)
            .map_err(|e| err("feature_path", e.to_string()))?;
        if entry.labeled_frame >= n_frames {
            return Err(err(
                "labeled_frame",
                format!(
                    "{} out of range for video {} with {n_frames} frames",
                    entry.labeled_frame, entry.video_id
                ),
            ));
        }
        if let Some(gt) = entry.gt_span {
            if gt.end >= n_frames {
                return Err(err("gt_end", format!("{} out of range for {n_frames} frames", gt.end)));
            }
        }
        if !entry.query_path.is_file() {
            return Err(err("query_path", format!("{} not found", entry.query_path.display())));
        }
    }
    Ok(manifest)
}

/// Renders a manifest with paths relative to `base` where possible.
pub fn manifest_to_text(manifest: &Manifest, base: &Path) -> String {
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::new();
    for e in &manifest.entries {
        let (gs, ge) = match e.gt_span {
            Some(s) => (s.start.to_string(), s.end.to_string()),
            None => ("-".into(), "-".into()),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.video_id,
            rel(&e.feature_path),
            e.query_id,
            rel(&e.query_path),
            e.labeled_frame,
            gs,
            ge
        ));
    }
    out
}

/// Loads every sample of a manifest into memory.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let features = FrameFeatures::new(e.video_id.clone(), read_feature_file(&e.feature_path)?)?;
            let query = read_query_file(&e.query_path, &e.query_id)?;
            let label = OneShotLabel {
                video_id: e.video_id.clone(),
                labeled_frame: e.labeled_frame,
                gt_span: e.gt_span,
            };
            Sample::new(features, query, label)
        })
        .collect()
}

/// `epoch rank inter intra total`, one line per epoch.
pub fn loss_log_line(epoch: usize, rank: f64, inter: f64, intra: f64, total: f64) -> String {
    format!("{epoch} {rank} {inter} {intra} {total}")
}

/// `video_id<TAB>start<TAB>end<TAB>confidence`.
pub fn prediction_line(video_id: &str, span: Span, confidence: f64) -> String {
    format!("{video_id}\t{}\t{}\t{confidence}", span.start, span.end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_params;
    use crate::rng::new_rng;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn one_by_one_is_twenty_bytes() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_feature_file(&p, &Matrix::from_vec(1, 1, vec![0.0])).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..8], &MAGIC);
        assert_eq!(&bytes[8..16], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(read_feature_file(&p).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn truncation_and_magic_errors_carry_offsets() {
        let mut bytes = Vec::new();
        encode_matrix(&Matrix::from_vec(2, 3, vec![1.0; 6]), &mut bytes).unwrap();
        bytes.truncate(30);
        let err = decode_matrix(&bytes, 0, Path::new("x")).unwrap_err();
        match err {
            MhstError::Format { offset, message, .. } => {
                assert_eq!(offset, 30);
                assert!(message.contains("expected 40"), "{message}");
                assert!(message.contains("found 30"), "{message}");
            }
            e => panic!("{e}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_matrix(&bad, 0, Path::new("x")),
            Err(MhstError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let mut bytes = Vec::new();
        encode_matrix(&Matrix::from_vec(1, 2, vec![1.0, 2.0]), &mut bytes).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_matrix(&bytes, 0, Path::new("x")),
            Err(MhstError::Format { offset: 20, .. })
        ));
    }

    #[test]
    fn params_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut p = init_params(5, &mut new_rng(3)).unwrap();
        p.b_s = 0.25;
        write_params(&path, &p).unwrap();
        let back = read_params(&path).unwrap();
        for ((_, a), (_, b)) in p.tensors().iter().zip(back.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
        // Same bytes again after a second write.
        let again = dir.path().join("q.bin");
        write_params(&again, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn manifest_parsing() {
        let base = Path::new("/data");
        let m = parse_manifest("", Path::new("m.tsv"), base).unwrap();
        assert!(m.entries.is_empty());
        let text = "v1\tf/v1.bin\tq1\tq/q1.bin\t3\t2\t5\nv2\tf/v2.bin\tq2\tq/q2.bin\t0\t-\t-\n";
        let m = parse_manifest(text, Path::new("m.tsv"), base).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].feature_path, Path::new("/data/f/v1.bin"));
        assert_eq!(m.entries[0].gt_span, Some(Span { start: 2, end: 5 }));
        assert_eq!(m.entries[1].gt_span, None);
        assert_eq!(manifest_to_text(&m, base), text);
    }

    #[test]
    fn manifest_errors_name_line_and_field() {
        let text = "v1\tf\tq\tqp\t3\t2\t5\nv2\tf\tq\tqp\tx\t-\t-\n";
        match parse_manifest(text, Path::new("m.tsv"), Path::new(".")) {
            Err(MhstError::Manifest { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "labeled_frame");
            }
            other => panic!("{other:?}"),
        }
        let short = "v1\tf\tq\n";
        assert!(matches!(
            parse_manifest(short, Path::new("m.tsv"), Path::new(".")),
            Err(MhstError::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn manifest_validation_checks_labeled_frame() {
        let dir = tempdir().unwrap();
        write_feature_file(&dir.path().join("v.bin"), &Matrix::zeros(4, 2)).unwrap();
        write_query_file(&dir.path().join("q.bin"), &[1.0, 0.0]).unwrap();
        let mpath = dir.path().join("m.tsv");
        fs::write(&mpath, "v\tv.bin\tq\tq.bin\t3\t-\t-\n").unwrap();
        let m = load_manifest(&mpath).unwrap();
        assert_eq!(m.entries.len(), 1);
        let samples = load_samples(&m).unwrap();
        assert_eq!(samples[0].features.n_frames(), 4);
        fs::write(&mpath, "v\tv.bin\tq\tq.bin\t4\t-\t-\n").unwrap();
        match load_manifest(&mpath) {
            Err(MhstError::Manifest { line: 1, field, .. }) => assert_eq!(field, "labeled_frame"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn output_lines() {
        assert_eq!(loss_log_line(3, 1.5, 0.25, 0.0, 1.625), "3 1.5 0.25 0 1.625");
        assert_eq!(
            prediction_line("v1", Span { start: 2, end: 9 }, 0.75),
            "v1\t2\t9\t0.75"
        );
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = new_rng(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.normal() * 10.0);
            let mut bytes = Vec::new();
            encode_matrix(&m, &mut bytes).unwrap();
            let (back, end) = decode_matrix(&bytes, 0, Path::new("x")).unwrap();
            prop_assert_eq!(end, bytes.len());
            for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
                prop_assert_eq!(*b, f64::from(*a as f32));
            }
        }
    }
}
