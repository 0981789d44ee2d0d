use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{clip_global_norm, Adam, EpochLog, TrainConfig, TrainLog};
use crate::cluster::{assign, embed_queries, kmeans, make_batches, Batch, BatchPlan, ClusterAssignment};
use crate::dataio::{Corpus, Interval, PartialLabel};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, DEFAULT_THRESHOLDS};
use crate::losses::{implicit_parts, total_implicit_loss, BatchEmbeddings, GroundingInputs, LossParts};
use crate::model::{forward_sample, init_params, predict_event, ModelDims, ModelParams};
use crate::tensorcore::{Tape, Tensor};

fn labels_of(corpus: &Corpus) -> Result<Vec<PartialLabel>> {
    corpus
        .samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::sample(&s.id, "training sample has no partial label"))
        })
        .collect()
}

/// Batches for corpora smaller than one batch: a single cluster, members
/// drawn cyclically from a shuffled order.
fn single_cluster_plan(n: usize, batch_size: usize, seed: u64, epoch: u64) -> BatchPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let samples = (0..batch_size).map(|i| order[i % n]).collect();
    BatchPlan {
        batches: vec![Batch {
            samples,
            tags: vec![0; batch_size],
        }],
    }
}

/// Clamped detector intervals around each sample's annotated clip.
pub fn export_pseudo_labels(model: &ModelParams, corpus: &Corpus) -> Result<Vec<(String, Interval)>> {
    corpus
        .samples
        .iter()
        .map(|s| {
            let label = s
                .label
                .ok_or_else(|| Error::sample(&s.id, "pseudo-label export needs the partial label as anchor"))?;
            let p = predict_event(model, s, &label)?;
            Ok((s.id.clone(), p.clamped(s.frames())))
        })
        .collect()
}

/// Clip containment rate and, where ground truth exists, mIoU of a pseudo-label set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoQuality {
    pub containment: f64,
    /// percent
    pub miou: Option<f64>,
}

pub fn pseudo_label_quality(corpus: &Corpus, pseudo: &[(String, Interval)]) -> Result<PseudoQuality> {
    if pseudo.len() != corpus.len() {
        return Err(Error::Invalid("pseudo-label set does not match the corpus".into()));
    }
    let mut contained = 0;
    for (s, (id, iv)) in corpus.samples.iter().zip(pseudo) {
        if *id != s.id {
            return Err(Error::sample(id, "pseudo-label order differs from the corpus"));
        }
        if s.label.is_some_and(|l| iv.contains(&l.interval())) {
            contained += 1;
        }
    }
    let gts: Vec<(String, Interval)> = corpus
        .samples
        .iter()
        .filter_map(|s| s.gt.map(|g| (s.id.clone(), g)))
        .collect();
    let miou = if gts.len() == corpus.len() {
        Some(evaluate(pseudo, &gts, &DEFAULT_THRESHOLDS, "pseudo")?.miou)
    } else {
        None
    };
    Ok(PseudoQuality {
        containment: contained as f64 / corpus.len() as f64,
        miou,
    })
}

fn cluster_corpus(corpus: &Corpus, config: &TrainConfig) -> Result<Option<ClusterAssignment>> {
    if corpus.len() < config.batch_size {
        return Ok(None);
    }
    let emb = embed_queries(corpus)?;
    let model = kmeans(&emb, config.num_clusters, config.seed, config.kmeans_iters)?
        .with_ratio(config.membership_ratio)?;
    Ok(Some(assign(&model, &emb)))
}

fn set_sharpness(model: &mut ModelParams, k: f64) {
    // softplus⁻¹(k)
    let raw = if k > 30.0 { k } else { k.exp_m1().ln() };
    model.store.insert("mask.sharpness_raw", Tensor::scalar(raw));
}

/// Trains the implicit stage on a corpus whose samples carry partial labels.
///
/// Each epoch clusters-aware batches are drawn, every sample of a batch goes
/// through fusion, detection around its clip, the plateau mask and pooling,
/// and the enabled losses plus the weighted grounding hinge are minimised
/// with Adam under global-norm clipping. The log records each epoch's mean
/// losses and the quality of the labels the model would export.
pub fn train_implicit(corpus: &Corpus, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    let labels = labels_of(corpus)?;
    let dims = ModelDims {
        video: corpus.dims.video,
        query: corpus.dims.query,
        model: config.model_dim,
        hidden: config.hidden_dim,
    };
    let mut model = init_params(dims, config.detector, config.seed)?;
    set_sharpness(&mut model, config.mask_sharpness_init);
    let assignment = cluster_corpus(corpus, config)?;
    let mut adam = Adam::new(
        &model.store,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let mut log = TrainLog::default();
    let mut tape = Tape::new();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let plan = match &assignment {
            Some(a) => make_batches(
                a,
                config.batch_size,
                config.clusters_per_batch,
                config.seed,
                epoch as u64,
            )?,
            None => single_cluster_plan(corpus.len(), config.batch_size, config.seed, epoch as u64),
        };
        let mut sums = [0.0f64; 6];
        for (bi, batch) in plan.batches.iter().enumerate() {
            tape.clear();
            let bound = model.store.bind(&mut tape);
            let mut emb = BatchEmbeddings {
                events: Vec::new(),
                backgrounds: Vec::new(),
                videos: Vec::new(),
                queries: Vec::new(),
                tags: batch.tags.clone(),
            };
            let mut grounding = GroundingInputs {
                starts: Vec::new(),
                ends: Vec::new(),
                labels: Vec::new(),
            };
            for &i in &batch.samples {
                let out = forward_sample(&mut tape, &bound, &model, &corpus.samples[i], &labels[i])?;
                emb.events.push(out.event_pooled);
                emb.backgrounds.push(out.background_pooled);
                emb.videos.push(out.fused.video_pooled);
                emb.queries.push(out.fused.query_pooled);
                grounding.starts.push(out.event.start);
                grounding.ends.push(out.event.end);
                grounding.labels.push(labels[i]);
            }
            let parts = implicit_parts(&mut tape, &emb, Some(&grounding), &config.weights, config.flags)?;
            let total = total_implicit_loss(&mut tape, &parts, &config.weights)?;
            let value = tape.scalar(total);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    msg: format!("loss is {value}"),
                });
            }
            accumulate(&mut sums, &tape, &parts, value);
            let grads = tape.backward(total)?;
            let mut flat: Vec<Tensor> = bound
                .vars()
                .map(|(_, v)| grads.get(v).expect("every parameter has a gradient").clone())
                .collect();
            clip_global_norm(&mut flat, config.grad_clip);
            adam.update(&mut model.store, &flat);
            if !model.store.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    msg: "parameters became non-finite".into(),
                });
            }
        }
        let quality = pseudo_label_quality(corpus, &export_pseudo_labels(&model, corpus)?)?;
        let nb = plan.batches.len() as f64;
        let names = ["raml", "raun", "erml", "erun", "grnd"];
        let present = [
            config.flags.raml,
            config.flags.raun,
            config.flags.erml,
            config.flags.erun,
            true,
        ];
        log.epochs.push(EpochLog {
            stage: "implicit".into(),
            epoch,
            batches: plan.batches.len(),
            loss: sums[5] / nb,
            components: (0..5)
                .filter(|&i| present[i])
                .map(|i| (names[i].to_string(), sums[i] / nb))
                .collect(),
            containment: Some(quality.containment),
            pseudo_miou: quality.miou,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, log))
}

fn accumulate(sums: &mut [f64; 6], tape: &Tape, parts: &LossParts, total: f64) {
    let all = [parts.raml, parts.raun, parts.erml, parts.erun, parts.grnd];
    for (s, p) in sums.iter_mut().zip(all) {
        if let Some(v) = p {
            *s += tape.scalar(v);
        }
    }
    sums[5] += total;
}
