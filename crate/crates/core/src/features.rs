//! Deterministic state encodings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureKind {
    OneHot,
    /// Piecewise-linear interpolation between anchor states. States outside
    /// the anchor span take the nearest anchor's feature.
    TriangularOverlap {
        anchors: Vec<usize>,
    },
}

/// Encodes states `0..n_states` as rows of a precomputed table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    kind: FeatureKind,
    n_states: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl FeatureMap {
    pub fn one_hot(n_states: usize) -> Result<Self> {
        Self::new(FeatureKind::OneHot, n_states)
    }

    pub fn triangular(n_states: usize, anchors: Vec<usize>) -> Result<Self> {
        Self::new(FeatureKind::TriangularOverlap { anchors }, n_states)
    }

    /// Anchors on every even state, plus the last state when `n_states` is even.
    pub fn chain_default(n_states: usize) -> Result<Self> {
        let mut anchors: Vec<usize> = (0..n_states).step_by(2).collect();
        if n_states % 2 == 0 && n_states > 0 {
            anchors.push(n_states - 1);
        }
        Self::triangular(n_states, anchors)
    }

    pub fn new(kind: FeatureKind, n_states: usize) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidArgument(
                "feature map needs at least one state".into(),
            ));
        }
        let (dim, rows) = match &kind {
            FeatureKind::OneHot => {
                let mut rows = vec![0.0; n_states * n_states];
                for s in 0..n_states {
                    rows[s * n_states + s] = 1.0;
                }
                (n_states, rows)
            }
            FeatureKind::TriangularOverlap { anchors } => {
                if anchors.is_empty() || anchors.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidArgument(
                        "anchors must be non-empty and strictly increasing".into(),
                    ));
                }
                if let Some(&a) = anchors.iter().find(|&&a| a >= n_states) {
                    return Err(Error::StateOutOfRange {
                        state: a,
                        n: n_states,
                    });
                }
                let dim = anchors.len();
                let mut rows = vec![0.0; n_states * dim];
                for s in 0..n_states {
                    let row = &mut rows[s * dim..(s + 1) * dim];
                    match anchors.iter().position(|&a| a >= s) {
                        Some(0) => row[0] = 1.0,
                        None => row[dim - 1] = 1.0,
                        Some(k) if anchors[k] == s => row[k] = 1.0,
                        Some(k) => {
                            let (lo, hi) = (anchors[k - 1] as f64, anchors[k] as f64);
                            let w = (s as f64 - lo) / (hi - lo);
                            row[k - 1] = 1.0 - w;
                            row[k] = w;
                        }
                    }
                }
                (dim, rows)
            }
        };
        Ok(Self {
            kind,
            n_states,
            dim,
            rows,
        })
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn encode(&self, state: usize) -> Result<&[f64]> {
        if state >= self.n_states {
            return Err(Error::StateOutOfRange {
                state,
                n: self.n_states,
            });
        }
        Ok(&self.rows[state * self.dim..(state + 1) * self.dim])
    }
}
