use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Corpus, Interval, PartialLabel};
use crate::error::{Error, Result};

pub const PSEUDO_VERSION: &str = "cu-pseudo/1";

const GAUSSIAN_TRIES: usize = 100;

/// How an annotator places the clip center inside the event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelDistribution {
    Uniform,
    Gaussian,
}

impl FromStr for LabelDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Invalid(format!(
                "unknown label distribution `{other}` (expected uniform or gaussian)"
            ))),
        }
    }
}

impl std::fmt::Display for LabelDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Gaussian => "gaussian",
        })
    }
}

/// Attaches a simulated clip label to every sample.
///
/// The clip spans `clip_seconds · fps` frames, cut down to the event length
/// when longer. Its center is drawn so that the whole clip stays inside the
/// ground-truth interval: uniformly, or from a normal centred on the event
/// with σ = length/6, rejecting draws that would leave the event (after
/// [`GAUSSIAN_TRIES`] rejections the event midpoint is used).
pub fn simulate_partial_labels(
    corpus: &Corpus,
    distribution: LabelDistribution,
    clip_seconds: f64,
    seed: u64,
) -> Result<Corpus> {
    if !(clip_seconds >= 0.0 && clip_seconds.is_finite()) {
        return Err(Error::Invalid(format!("clip duration must be ≥ 0, got {clip_seconds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = corpus.clone();
    for s in &mut out.samples {
        let gt = s
            .gt
            .ok_or_else(|| Error::sample(&s.id, "cannot simulate a label without ground truth"))?;
        let range = (clip_seconds * s.fps).min(gt.len());
        let lo = gt.start + 0.5 * range;
        let hi = gt.end - 0.5 * range;
        let center = if hi <= lo {
            gt.mid()
        } else {
            match distribution {
                LabelDistribution::Uniform => rng.random_range(lo..=hi),
                LabelDistribution::Gaussian => {
                    let normal = Normal::new(gt.mid(), gt.len() / 6.0)
                        .map_err(|e| Error::sample(&s.id, e.to_string()))?;
                    (0..GAUSSIAN_TRIES)
                        .map(|_| normal.sample(&mut rng))
                        .find(|c| (lo..=hi).contains(c))
                        .unwrap_or_else(|| gt.mid())
                }
            }
        };
        let label = PartialLabel::new(center, range);
        debug_assert!(gt.start <= label.start() + 1e-9 && label.end() <= gt.end + 1e-9);
        s.label = Some(label);
    }
    out.validate()?;
    Ok(out)
}

/// Writes `cu-pseudo/1` followed by one `id start end` line per interval.
pub fn save_pseudo_labels(labels: &[(String, Interval)], path: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    let mut text = format!("{PSEUDO_VERSION}\n");
    for (id, iv) in labels {
        if !seen.insert(id.as_str()) {
            return Err(Error::sample(id, "duplicate sample id in pseudo-labels"));
        }
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::sample(id, "ids must be non-empty and whitespace-free"));
        }
        if !(iv.start.is_finite() && iv.end.is_finite() && iv.start <= iv.end && iv.start >= 0.0) {
            return Err(Error::sample(
                id,
                format!("invalid interval [{}, {}]", iv.start, iv.end),
            ));
        }
        let _ = writeln!(text, "{id} {} {}", iv.start, iv.end);
    }
    crate::write_atomic(path, text.as_bytes())
}

pub fn load_pseudo_labels(path: &Path) -> Result<Vec<(String, Interval)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PSEUDO_VERSION) {
        return Err(Error::format(path, format!("missing `{PSEUDO_VERSION}` header")));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = match f.as_slice() {
            [id, s, e] => s.parse::<f64>().ok().zip(e.parse::<f64>().ok()).map(|(s, e)| (*id, s, e)),
            _ => None,
        };
        let Some((id, s, e)) = parsed else {
            return Err(Error::format(path, format!("line {}: expected `id start end`", n + 2)));
        };
        if !seen.insert(id.to_string()) {
            return Err(Error::sample(id, "duplicate sample id in pseudo-labels"));
        }
        if !(s <= e) {
            return Err(Error::sample(id, format!("invalid interval [{s}, {e}]")));
        }
        out.push((id.to_string(), Interval::new(s, e)));
    }
    Ok(out)
}
