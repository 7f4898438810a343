//! Ordered log of every discrete decision taken while building a tree.
//!
//! Text form, one event per line:
//!
//! ```text
//! M left right new round
//! P node round
//! D leaf lambda round
//! S round
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{MhstError, Result};
use crate::tree::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Merge {
        left: NodeId,
        right: NodeId,
        new: NodeId,
        round: usize,
    },
    Prune {
        node: NodeId,
        round: usize,
    },
    Downweight {
        leaf: NodeId,
        lambda_tau: f64,
        round: usize,
    },
    Stop {
        round: usize,
    },
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceEvent::Merge {
                left,
                right,
                new,
                round,
            } => write!(f, "M {left} {right} {new} {round}"),
            TraceEvent::Prune { node, round } => write!(f, "P {node} {round}"),
            TraceEvent::Downweight {
                leaf,
                lambda_tau,
                round,
            } => write!(f, "D {leaf} {lambda_tau} {round}"),
            TraceEvent::Stop { round } => write!(f, "S {round}"),
        }
    }
}

impl FromStr for TraceEvent {
    type Err = String;

    fn from_str(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let int = |i: usize| -> std::result::Result<usize, String> {
            fields
                .get(i)
                .ok_or_else(|| format!("missing field {i}"))?
                .parse::<usize>()
                .map_err(|e| format!("field {i}: {e}"))
        };
        let arity = |n: usize| -> std::result::Result<(), String> {
            if fields.len() == n {
                Ok(())
            } else {
                Err(format!("expected {n} fields, got {}", fields.len()))
            }
        };
        match fields.first().copied() {
            Some("M") => {
                arity(5)?;
                Ok(TraceEvent::Merge {
                    left: NodeId(int(1)?),
                    right: NodeId(int(2)?),
                    new: NodeId(int(3)?),
                    round: int(4)?,
                })
            }
            Some("P") => {
                arity(3)?;
                Ok(TraceEvent::Prune {
                    node: NodeId(int(1)?),
                    round: int(2)?,
                })
            }
            Some("D") => {
                arity(4)?;
                let lambda_tau = fields[2]
                    .parse::<f64>()
                    .map_err(|e| format!("field 2: {e}"))?;
                Ok(TraceEvent::Downweight {
                    leaf: NodeId(int(1)?),
                    lambda_tau,
                    round: int(3)?,
                })
            }
            Some("S") => {
                arity(2)?;
                Ok(TraceEvent::Stop { round: int(1)? })
            }
            Some(other) => Err(format!("unknown event tag `{other}`")),
            None => Err("empty line".into()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecisionTrace {
    pub events: Vec<TraceEvent>,
}

impl DecisionTrace {
    pub fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter()
    }

    pub fn merge_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Merge { .. }))
            .count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e = line
                .parse::<TraceEvent>()
                .map_err(|m| MhstError::Replay(format!("trace line {}: {m}", i + 1)))?;
            events.push(e);
        }
        Ok(DecisionTrace { events })
    }
}
