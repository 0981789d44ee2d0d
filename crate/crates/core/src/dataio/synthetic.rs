use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, Dims, Interval, SampleRecord};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// Parameters of the planted-event corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_samples: usize,
    pub frames: usize,
    pub tokens: usize,
    pub dim_video: usize,
    pub dim_query: usize,
    /// 0 disables the sentence-embedding field.
    pub dim_sentence: usize,
    pub clusters: usize,
    pub min_event: usize,
    pub max_event: usize,
    pub noise: f64,
    pub fps: f64,
    pub seed: u64,
    /// Numeric suffix of the first sample id, so held-out corpora stay disjoint.
    pub id_offset: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_samples: 200,
            frames: 64,
            tokens: 6,
            dim_video: 32,
            dim_query: 16,
            dim_sentence: 16,
            clusters: 5,
            min_event: 10,
            max_event: 32,
            noise: 2.0,
            fps: 1.0,
            seed: 7,
            id_offset: 0,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl GenConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Rounds through f32 so that saving and reloading is lossless.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates a corpus in which each sample belongs to one of `clusters`
/// semantic groups. Event frames scatter around the group's visual prototype,
/// all other frames around one shared background prototype; query tokens and
/// the sentence embedding scatter around the group's text prototypes.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<Corpus> {
    if cfg.clusters < 2 {
        return Err(Error::Config("need at least 2 clusters".into()));
    }
    if cfg.frames < 2 || cfg.tokens < 1 || cfg.num_samples < 1 {
        return Err(Error::Config("need frames ≥ 2, tokens ≥ 1, samples ≥ 1".into()));
    }
    if cfg.dim_video == 0 || cfg.dim_query == 0 {
        return Err(Error::Config("feature dims must be positive".into()));
    }
    if cfg.min_event == 0 || cfg.min_event > cfg.max_event || cfg.max_event >= cfg.frames {
        return Err(Error::Config(format!(
            "event length range [{}, {}] must lie inside (0, {})",
            cfg.min_event, cfg.max_event, cfg.frames
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) || !(cfg.fps > 0.0) {
        return Err(Error::Config("noise must be ≥ 0 and fps > 0".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let background = gaussian(&mut rng, cfg.dim_video);
    let visual: Vec<Vec<f64>> = (0..cfg.clusters).map(|_| gaussian(&mut rng, cfg.dim_video)).collect();
    let textual: Vec<Vec<f64>> = (0..cfg.clusters).map(|_| gaussian(&mut rng, cfg.dim_query)).collect();
    let sentence: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| gaussian(&mut rng, cfg.dim_sentence))
        .collect();

    let noisy = |rng: &mut ChaCha8Rng, proto: &[f64]| -> Vec<f64> {
        proto
            .iter()
            .map(|&p| {
                let n: f64 = StandardNormal.sample(rng);
                f32_exact(p + cfg.noise * n)
            })
            .collect()
    };

    let mut samples = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let c = rng.random_range(0..cfg.clusters);
        let len = rng.random_range(cfg.min_event..=cfg.max_event);
        let start = rng.random_range(0..=cfg.frames - len);
        let end = start + len;

        let mut video = Vec::with_capacity(cfg.frames * cfg.dim_video);
        for t in 0..cfg.frames {
            let proto = if (start..end).contains(&t) { &visual[c] } else { &background };
            video.extend(noisy(&mut rng, proto));
        }
        let mut query = Vec::with_capacity(cfg.tokens * cfg.dim_query);
        for _ in 0..cfg.tokens {
            query.extend(noisy(&mut rng, &textual[c]));
        }
        let sent = (cfg.dim_sentence > 0).then(|| noisy(&mut rng, &sentence[c]));

        samples.push(SampleRecord {
            id: format!("s{:05}", cfg.id_offset + i),
            video: Tensor::new(vec![cfg.frames, cfg.dim_video], video)?,
            query: Tensor::new(vec![cfg.tokens, cfg.dim_query], query)?,
            sentence: sent,
            gt: Some(Interval::new(start as f64, end as f64)),
            label: None,
            fps: cfg.fps,
        });
    }
    let dims = Dims {
        video: cfg.dim_video,
        query: cfg.dim_query,
        sentence: (cfg.dim_sentence > 0).then_some(cfg.dim_sentence),
    };
    Corpus::new(
        dims,
        samples,
        format!(
            "synthetic seed={} clusters={} noise={} frames={}",
            cfg.seed, cfg.clusters, cfg.noise, cfg.frames
        ),
    )
}
