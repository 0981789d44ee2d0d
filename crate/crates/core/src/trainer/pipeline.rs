use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{export_pseudo_labels, train_implicit, ExplicitModel, ExplicitParams, TrainConfig, TrainLog};
use crate::dataio::{simulate_partial_labels, Corpus, Interval, LabelDistribution};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport, DEFAULT_THRESHOLDS};
use crate::model::ModelParams;

/// How training labels are simulated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub distribution: LabelDistribution,
    /// clip length in seconds; 0 gives single-frame labels
    pub duration: f64,
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            distribution: LabelDistribution::Uniform,
            duration: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoStageOutput<M> {
    pub implicit: ModelParams,
    pub implicit_log: TrainLog,
    pub pseudo: Vec<(String, Interval)>,
    /// pseudo-labels scored against the training ground truth
    pub pseudo_report: EvalReport,
    pub explicit: M,
    pub explicit_log: TrainLog,
    pub predictions: Vec<(String, Interval)>,
    /// explicit-stage predictions on the test corpus
    pub report: EvalReport,
}

fn ground_truth(corpus: &Corpus) -> Result<Vec<(String, Interval)>> {
    corpus
        .samples
        .iter()
        .map(|s| {
            s.gt
                .map(|g| (s.id.clone(), g))
                .ok_or_else(|| Error::sample(&s.id, "no ground truth to evaluate against"))
        })
        .collect()
}

/// Label simulation → implicit training → pseudo-label export → explicit
/// training → label-free inference and evaluation on `test`, with the
/// built-in explicit model.
pub fn run_two_stage(
    train: &Corpus,
    test: &Corpus,
    labels: &LabelConfig,
    config: &TrainConfig,
) -> Result<TwoStageOutput<ExplicitParams>> {
    run_two_stage_with(train, test, labels, config)
}

/// [`run_two_stage`] with any explicit-stage model.
pub fn run_two_stage_with<M: ExplicitModel>(
    train: &Corpus,
    test: &Corpus,
    labels: &LabelConfig,
    config: &TrainConfig,
) -> Result<TwoStageOutput<M>> {
    config.validate()?;
    let train_ids: HashSet<&str> = train.samples.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = test.samples.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::sample(&s.id, "appears in both the training and the test corpus"));
    }
    let labelled = simulate_partial_labels(train, labels.distribution, labels.duration, labels.seed)?;
    let (implicit, implicit_log) = train_implicit(&labelled, config)?;
    let pseudo = export_pseudo_labels(&implicit, &labelled)?;
    let pseudo_report = evaluate(&pseudo, &ground_truth(train)?, &DEFAULT_THRESHOLDS, "pseudo")?;
    let (explicit, explicit_log) = M::fit(train, &pseudo, config)?;
    let predictions = test
        .samples
        .iter()
        .map(|s| {
            // the explicit model never sees labels at inference
            let mut bare = s.clone();
            bare.label = None;
            bare.gt = None;
            Ok((s.id.clone(), explicit.infer(&bare)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&predictions, &ground_truth(test)?, &DEFAULT_THRESHOLDS, "test")?;
    Ok(TwoStageOutput {
        implicit,
        implicit_log,
        pseudo,
        pseudo_report,
        explicit,
        explicit_log,
        predictions,
        report,
    })
}
