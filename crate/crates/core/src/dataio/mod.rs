//! Corpus files, the synthetic corpus generator and partial-label simulation.
//!
//! Everything inside the crate works on frame indices; seconds only appear
//! when simulating clip labels, converted through each sample's `fps`.

mod corpus;
mod labels;
mod synthetic;

pub use corpus::{load_corpus, save_corpus, Corpus, Dims, SampleRecord, MANIFEST_FILE, MANIFEST_VERSION};
pub use labels::{
    load_pseudo_labels, save_pseudo_labels, simulate_partial_labels, LabelDistribution,
    PSEUDO_VERSION,
};
pub use synthetic::{generate_synthetic, GenConfig};

use serde::{Deserialize, Serialize};

/// Half-open span of frames `[start, end)` on the frame-index axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn contains(&self, other: &Interval) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    /// `start ≤ end`, both finite and inside `[0, frames]`.
    pub fn is_valid_within(&self, frames: f64) -> bool {
        self.start.is_finite()
            && self.end.is_finite()
            && self.start <= self.end
            && self.start >= 0.0
            && self.end <= frames
    }
}

/// Annotated clip `(center, range)`; `range == 0` is a single-frame label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialLabel {
    pub center: f64,
    pub range: f64,
}

impl PartialLabel {
    pub fn new(center: f64, range: f64) -> Self {
        Self { center, range }
    }

    pub fn start(&self) -> f64 {
        self.center - 0.5 * self.range
    }

    pub fn end(&self) -> f64 {
        self.center + 0.5 * self.range
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.start(), self.end())
    }

    pub fn is_single_frame(&self) -> bool {
        self.range == 0.0
    }
}
