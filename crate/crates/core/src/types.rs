//! Feature containers and annotations consumed by the pipeline.

use std::fmt;

use crate::error::{MhstError, Result};
use crate::linalg::Matrix;

/// Inclusive frame range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(MhstError::InvalidSpan { start, end });
        }
        Ok(Span { start, end })
    }

    pub fn single(frame: usize) -> Self {
        Span {
            start: frame,
            end: frame,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.start <= frame && frame <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.start, self.end)
    }
}

/// Per-video frame embeddings, one row per frame in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub video_id: String,
    data: Matrix,
}

impl FrameFeatures {
    pub fn new(video_id: impl Into<String>, data: Matrix) -> Result<Self> {
        if data.rows() == 0 {
            return Err(MhstError::InvalidInput("video has no frames".into()));
        }
        if data.cols() == 0 {
            return Err(MhstError::InvalidDimension("feature dimension is 0".into()));
        }
        if !data.is_finite() {
            return Err(MhstError::InvalidInput("frame features contain non-finite values".into()));
        }
        Ok(FrameFeatures {
            video_id: video_id.into(),
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    /// Mean of the frames in `span`.
    pub fn span_mean(&self, span: Span) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for i in span.start..=span.end {
            crate::linalg::axpy(&mut acc, 1.0, self.frame(i));
        }
        let n = span.len() as f64;
        acc.iter_mut().for_each(|x| *x /= n);
        acc
    }
}

/// Sentence-level query vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub query_id: String,
    pub data: Vec<f64>,
}

impl QueryEmbedding {
    pub fn new(query_id: impl Into<String>, data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(MhstError::InvalidDimension("query dimension is 0".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(MhstError::InvalidInput("query contains non-finite values".into()));
        }
        Ok(QueryEmbedding {
            query_id: query_id.into(),
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn check_dim(&self, features: &FrameFeatures) -> Result<()> {
        if self.dim() != features.dim() {
            return Err(MhstError::Shape {
                expected: features.dim(),
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

/// A single annotated frame, plus the ground-truth span when evaluating.
#[derive(Debug, Clone, PartialEq)]
pub struct OneShotLabel {
    pub video_id: String,
    pub labeled_frame: usize,
    pub gt_span: Option<Span>,
}

impl OneShotLabel {
    pub fn validate(&self, n_frames: usize) -> Result<()> {
        if self.labeled_frame >= n_frames {
            return Err(MhstError::InvalidLabel(format!(
                "labeled frame {} outside video {} with {} frames",
                self.labeled_frame, self.video_id, n_frames
            )));
        }
        if let Some(gt) = self.gt_span {
            if gt.start > gt.end || gt.end >= n_frames || !gt.contains(self.labeled_frame) {
                return Err(MhstError::InvalidLabel(format!(
                    "ground truth {} inconsistent with labeled frame {} in video {}",
                    gt, self.labeled_frame, self.video_id
                )));
            }
        }
        Ok(())
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: FrameFeatures,
    pub query: QueryEmbedding,
    pub label: OneShotLabel,
}

impl Sample {
    pub fn new(features: FrameFeatures, query: QueryEmbedding, label: OneShotLabel) -> Result<Self> {
        query.check_dim(&features)?;
        label.validate(features.n_frames())?;
        Ok(Sample {
            features,
            query,
            label,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite_features() {
        assert!(FrameFeatures::new("v", Matrix::zeros(0, 3)).is_err());
        let bad = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]);
        assert!(FrameFeatures::new("v", bad).is_err());
    }

    #[test]
    fn label_bounds() {
        let label = OneShotLabel {
            video_id: "v".into(),
            labeled_frame: 4,
            gt_span: None,
        };
        assert!(label.validate(4).is_err());
        assert!(label.validate(5).is_ok());
        let label = OneShotLabel {
            gt_span: Some(Span { start: 0, end: 3 }),
            ..label
        };
        assert!(label.validate(5).is_err());
    }

    #[test]
    fn span_overlap() {
        let a = Span { start: 0, end: 3 };
        assert!(a.overlaps(&Span { start: 3, end: 5 }));
        assert!(!a.overlaps(&Span { start: 4, end: 5 }));
        assert!(Span::new(2, 1).is_err());
    }
}
