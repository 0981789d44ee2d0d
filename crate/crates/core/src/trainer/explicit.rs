use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{clip_global_norm, Adam, EpochLog, TrainConfig, TrainLog};
use crate::dataio::{Corpus, Interval, SampleRecord};
use crate::error::{Error, Result};
use crate::model::{fuse, init_fusion, uniform_weight, Bound, Checkpoint, EventPrediction, ModelDims, ParamStore};
use crate::tensorcore::{Tape, Tensor, Var};

/// Prefix of the explicit model's fusion parameters.
pub const EXPLICIT_FUSION: &str = "x.fuse";

const SMOOTH_L1_BETA: f64 = 0.1;

/// A fully-supervised grounding model trained on pseudo-labels and used
/// alone at inference, without partial labels.
pub trait ExplicitModel: Sized {
    fn fit(corpus: &Corpus, pseudo: &[(String, Interval)], config: &TrainConfig) -> Result<(Self, TrainLog)>;
    /// Interval within `[0, T]`, at least one frame wide.
    fn infer(&self, sample: &SampleRecord) -> Result<Interval>;
    fn to_checkpoint(&self) -> Checkpoint;
    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self>;
}

/// The built-in regressor: its own fusion block and a per-frame eventness
/// perceptron whose score profile gives a normalised center and width.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitParams {
    pub dims: ModelDims,
    pub store: ParamStore,
}

impl ExplicitParams {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.video == 0 || dims.query == 0 || dims.model == 0 || dims.hidden == 0 {
            return Err(Error::Config(format!("model dims must be positive: {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_fusion(&mut store, &mut rng, EXPLICIT_FUSION, dims.video, dims.query, dims.model);
        store.insert("x.w_centred", uniform_weight(&mut rng, dims.model, dims.hidden));
        store.insert("x.w_raw", uniform_weight(&mut rng, dims.model, dims.hidden));
        store.insert("x.b1", Tensor::zeros(&[dims.hidden]));
        store.insert("x.w2", uniform_weight(&mut rng, dims.hidden, 1));
        store.insert("x.b2", Tensor::zeros(&[1]));
        Ok(Self { dims, store })
    }
}

fn check_dims(dims: &ModelDims, sample: &SampleRecord) -> Result<()> {
    if sample.video.cols() != dims.video || sample.query.cols() != dims.query {
        return Err(Error::sample(
            &sample.id,
            format!(
                "feature dims ({}, {}) do not match model ({}, {})",
                sample.video.cols(),
                sample.query.cols(),
                dims.video,
                dims.query
            ),
        ));
    }
    Ok(())
}

/// Normalised `(center, width)`, both in `(0, 1)`.
fn regress(tape: &mut Tape, params: &Bound, sample: &SampleRecord) -> Result<(Var, Var)> {
    let frames = sample.frames();
    let t = frames as f64;
    let video = tape.constant(sample.video.clone());
    let query = tape.constant(sample.query.clone());
    let fused = fuse(tape, params, EXPLICIT_FUSION, video, query)?;
    let neg_mean = tape.scale(fused.video_pooled, -1.0)?;
    let centred = tape.add_row(fused.video, neg_mean)?;
    let a = tape.matmul(centred, params.var("x.w_centred")?)?;
    let h = tape.linear(fused.video, params.var("x.w_raw")?, params.var("x.b1")?)?;
    let h = tape.add(a, h)?;
    let h = tape.tanh(h)?;
    let logit = tape.linear(h, params.var("x.w2")?, params.var("x.b2")?)?;
    let logit = tape.reshape(logit, &[frames])?;
    let p = tape.sigmoid(logit)?;
    let mass = tape.sum(p)?;
    let pos = tape.constant(Tensor::vector((0..frames).map(|i| (i as f64 + 0.5) / t).collect()));
    let weighted = tape.mul(p, pos)?;
    let moment = tape.sum(weighted)?;
    let center = tape.div(moment, mass)?;
    let width = tape.scale(mass, 1.0 / t)?;
    Ok((center, width))
}

/// `smooth-L1(c − c*) + smooth-L1(w − w*) + (1 − IoU)` in normalised units.
fn explicit_loss(tape: &mut Tape, center: Var, width: Var, target: &Interval, frames: usize) -> Result<(Var, Var)> {
    let t = frames as f64;
    let (tc, tw) = (target.mid() / t, target.len() / t);
    let dc = tape.add_const(center, -tc)?;
    let dc = tape.smooth_l1(dc, SMOOTH_L1_BETA)?;
    let dw = tape.add_const(width, -tw)?;
    let dw = tape.smooth_l1(dw, SMOOTH_L1_BETA)?;
    let reg = tape.add(dc, dw)?;

    let half = tape.scale(width, 0.5)?;
    let start = tape.sub(center, half)?;
    let end = tape.add(center, half)?;
    let ts = tape.constant(Tensor::scalar(target.start / t));
    let te = tape.constant(Tensor::scalar(target.end / t));
    let lo = tape.maximum(start, ts)?;
    let hi = tape.minimum(end, te)?;
    let overlap = tape.sub(hi, lo)?;
    let inter = tape.relu(overlap)?;
    let neg_inter = tape.scale(inter, -1.0)?;
    let union = tape.add_const(width, tw)?;
    let union = tape.add(union, neg_inter)?;
    let iou = tape.div(inter, union)?;
    let iou_loss = tape.scale(iou, -1.0)?;
    let iou_loss = tape.add_const(iou_loss, 1.0)?;
    let total = tape.add(reg, iou_loss)?;
    Ok((total, iou))
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let s = tape.stack_rows(terms)?;
    tape.mean(s)
}

/// Fits the built-in regressor to `pseudo` (one interval per corpus sample).
pub fn train_explicit(
    corpus: &Corpus,
    pseudo: &[(String, Interval)],
    config: &TrainConfig,
) -> Result<(ExplicitParams, TrainLog)> {
    config.validate()?;
    let targets: HashMap<&str, &Interval> = pseudo.iter().map(|(id, iv)| (id.as_str(), iv)).collect();
    let targets: Vec<Interval> = corpus
        .samples
        .iter()
        .map(|s| {
            targets
                .get(s.id.as_str())
                .map(|iv| **iv)
                .ok_or_else(|| Error::sample(&s.id, "no pseudo-label for training sample"))
        })
        .collect::<Result<_>>()?;
    let dims = ModelDims {
        video: corpus.dims.video,
        query: corpus.dims.query,
        model: config.model_dim,
        hidden: config.hidden_dim,
    };
    // a distinct stream so the two stages never share initial weights
    let mut params = ExplicitParams::init(dims, config.seed ^ 0x5eed_0002)?;
    for s in &corpus.samples {
        check_dims(&dims, s)?;
    }
    let mut adam = Adam::new(
        &params.store,
        config.explicit_learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let mut log = TrainLog::default();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..config.explicit_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut iou_sum, mut batches) = (0.0, 0.0, 0);
        for (bi, chunk) in order.chunks(config.explicit_batch_size).enumerate() {
            tape.clear();
            let bound = params.store.bind(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            let mut ious = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &corpus.samples[i];
                let (c, w) = regress(&mut tape, &bound, s)?;
                let (l, iou) = explicit_loss(&mut tape, c, w, &targets[i], s.frames())?;
                losses.push(l);
                ious.push(tape.scalar(iou));
            }
            let total = mean(&mut tape, &losses)?;
            let value = tape.scalar(total);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    msg: format!("explicit loss is {value}"),
                });
            }
            loss_sum += value;
            iou_sum += ious.iter().sum::<f64>() / ious.len() as f64;
            batches += 1;
            let grads = tape.backward(total)?;
            let mut flat: Vec<Tensor> = bound
                .vars()
                .map(|(_, v)| grads.get(v).expect("every parameter has a gradient").clone())
                .collect();
            clip_global_norm(&mut flat, config.grad_clip);
            adam.update(&mut params.store, &flat);
            if !params.store.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    msg: "parameters became non-finite".into(),
                });
            }
        }
        let nb = batches as f64;
        log.epochs.push(EpochLog {
            stage: "explicit".into(),
            epoch,
            batches,
            loss: loss_sum / nb,
            components: vec![("fit_iou".into(), iou_sum / nb)],
            containment: None,
            pseudo_miou: None,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, log))
}

/// Predicts an interval from features alone.
pub fn infer_explicit(params: &ExplicitParams, sample: &SampleRecord) -> Result<Interval> {
    check_dims(&params.dims, sample)?;
    let mut tape = Tape::new();
    let bound = params.store.bind_frozen(&mut tape);
    let (c, w) = regress(&mut tape, &bound, sample)?;
    let t = sample.frames() as f64;
    let p = EventPrediction::from_anchor(tape.scalar(c) * t, 0.0, tape.scalar(w) * t);
    Ok(p.clamped(sample.frames()))
}

fn meta_usize(ckpt: &Checkpoint, key: &str) -> Result<usize> {
    ckpt.meta(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Invalid(format!("checkpoint lacks `{key}`")))
}

impl ExplicitModel for ExplicitParams {
    fn fit(corpus: &Corpus, pseudo: &[(String, Interval)], config: &TrainConfig) -> Result<(Self, TrainLog)> {
        train_explicit(corpus, pseudo, config)
    }

    fn infer(&self, sample: &SampleRecord) -> Result<Interval> {
        infer_explicit(self, sample)
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: vec![
                ("stage".into(), "explicit".into()),
                ("dim_video".into(), self.dims.video.to_string()),
                ("dim_query".into(), self.dims.query.to_string()),
                ("model_dim".into(), self.dims.model.to_string()),
                ("hidden_dim".into(), self.dims.hidden.to_string()),
            ],
            params: self.store.clone(),
        }
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("stage") != Some("explicit") {
            return Err(Error::Invalid("not an explicit-stage checkpoint".into()));
        }
        let dims = ModelDims {
            video: meta_usize(ckpt, "dim_video")?,
            query: meta_usize(ckpt, "dim_query")?,
            model: meta_usize(ckpt, "model_dim")?,
            hidden: meta_usize(ckpt, "hidden_dim")?,
        };
        let reference = ExplicitParams::init(dims, 0)?;
        for (name, t) in reference.store.iter() {
            let got = ckpt.params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Invalid(format!("checkpoint tensor `{name}` has shape {:?}", got.shape())));
            }
        }
        Ok(Self {
            dims,
            store: ckpt.params.clone(),
        })
    }
}
