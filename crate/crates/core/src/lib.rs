//! Query-conditioned hypotheses segment trees for one-shot temporal sentence
//! localization: tree building, training losses with analytic gradients,
//! evaluation and file formats.

pub mod config;
pub mod error;
pub mod eval;
pub mod hypothesis;
pub mod io;
pub mod learning;
pub mod linalg;
pub mod params;
pub mod relevance;
pub mod rng;
pub mod synth;
pub mod trace;
pub mod tree;
pub mod types;

pub use config::Config;
pub use error::{MhstError, Result};
pub use eval::{oracle_build, recall_at, temporal_iou, EvalResult};
pub use hypothesis::{extract_hypotheses, predict, Hypothesis};
pub use learning::{finite_diff_check, train, FrozenEpisode, LossReport};
pub use linalg::Matrix;
pub use params::{init_params, GradientSet, ModelParams};
pub use rng::{new_rng, DeterministicRng};
pub use synth::SynthConfig;
pub use trace::{DecisionTrace, TraceEvent};
pub use tree::{build_tree, replay_tree, NodeId, SegTree};
pub use types::{FrameFeatures, OneShotLabel, QueryEmbedding, Sample, Span};
