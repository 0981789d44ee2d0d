//! Implicit-stage model: feature fusion, the anchor-seeded event detector,
//! the plateau mask and event/background pooling.

mod checkpoint;
mod detector;
mod fusion;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CKPT_VERSION};
pub use detector::{
    detect_event, detector_activation, frame_scores, plateau_mask, pool_event, profile_moments,
    DetectorKind, EventPrediction, EventVars, QUERY_SCALE_INIT, SIM_BIAS_INIT, SIM_SCALE_INIT,
};
pub use fusion::{fuse, FusedFeatures};
pub use params::{Bound, ParamStore};
pub(crate) use fusion::init_fusion;
pub(crate) use params::uniform_weight;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{PartialLabel, SampleRecord};
use crate::error::{Error, Result};
use crate::tensorcore::{Tape, Tensor, Var};

/// Prefix of the implicit model's fusion parameters.
pub const FUSION: &str = "fuse";

/// `softplus⁻¹(1)`, so the initial mask sharpness is one.
pub const SHARPNESS_RAW_INIT: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub video: usize,
    pub query: usize,
    /// shared width `D` after fusion
    pub model: usize,
    /// detector hidden width
    pub hidden: usize,
}

/// Parameters of the implicit-stage model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub detector: DetectorKind,
    pub store: ParamStore,
}

/// Draws every weight uniformly in `±1/√fan_in`; biases start at zero and the
/// mask sharpness at one.
pub fn init_params(dims: ModelDims, detector: DetectorKind, seed: u64) -> Result<ModelParams> {
    if dims.video == 0 || dims.query == 0 || dims.model == 0 || dims.hidden == 0 {
        return Err(Error::Config(format!("model dims must be positive: {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_fusion(&mut store, &mut rng, FUSION, dims.video, dims.query, dims.model);
    detector::init_detector(&mut store, &mut rng, detector, dims.model, dims.hidden);
    store.insert("mask.sharpness_raw", Tensor::scalar(SHARPNESS_RAW_INIT));
    Ok(ModelParams {
        dims,
        detector,
        store,
    })
}

impl ModelParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let detector = match self.detector {
            DetectorKind::Profile => "profile",
            DetectorKind::Pooled => "pooled",
        };
        Checkpoint {
            meta: vec![
                ("stage".into(), "implicit".into()),
                ("detector".into(), detector.into()),
                ("dim_video".into(), self.dims.video.to_string()),
                ("dim_query".into(), self.dims.query.to_string()),
                ("model_dim".into(), self.dims.model.to_string()),
                ("hidden_dim".into(), self.dims.hidden.to_string()),
            ],
            params: self.store.clone(),
        }
    }

    /// Rebuilds the model, checking every expected tensor is present with
    /// the right shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("stage") != Some("implicit") {
            return Err(Error::Invalid("not an implicit-stage checkpoint".into()));
        }
        let num = |key: &str| -> Result<usize> {
            ckpt.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks `{key}`")))
        };
        let dims = ModelDims {
            video: num("dim_video")?,
            query: num("dim_query")?,
            model: num("model_dim")?,
            hidden: num("hidden_dim")?,
        };
        let detector: DetectorKind = ckpt.meta("detector").unwrap_or("profile").parse()?;
        let reference = init_params(dims, detector, 0)?;
        for (name, t) in reference.store.iter() {
            let got = ckpt.params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Invalid(format!("checkpoint tensor `{name}` has shape {:?}", got.shape())));
            }
        }
        Ok(Self {
            dims,
            detector,
            store: ckpt.params.clone(),
        })
    }
}

/// Everything the losses need from one sample, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct SampleForward {
    pub fused: FusedFeatures,
    pub event: EventVars,
    pub mask: Var,
    pub event_pooled: Var,
    pub background_pooled: Var,
}

/// Fuse → detect around the label's anchor → plateau mask → pooling.
pub fn forward_sample(
    tape: &mut Tape,
    params: &Bound,
    model: &ModelParams,
    sample: &SampleRecord,
    label: &PartialLabel,
) -> Result<SampleForward> {
    if sample.video.cols() != model.dims.video || sample.query.cols() != model.dims.query {
        return Err(Error::sample(
            &sample.id,
            format!(
                "feature dims ({}, {}) do not match model ({}, {})",
                sample.video.cols(),
                sample.query.cols(),
                model.dims.video,
                model.dims.query
            ),
        ));
    }
    let video = tape.constant(sample.video.clone());
    let query = tape.constant(sample.query.clone());
    let fused = fuse(tape, params, FUSION, video, query)?;
    let event = detect_event(
        tape,
        params,
        model.detector,
        fused.video,
        fused.video_pooled,
        fused.query_pooled,
        label,
    )?;
    let raw = params.var("mask.sharpness_raw")?;
    let sharpness = tape.softplus(raw)?;
    let mask = plateau_mask(tape, event.start, event.end, sharpness, sample.frames())?;
    let (event_pooled, background_pooled) = pool_event(tape, fused.video, mask)?;
    Ok(SampleForward {
        fused,
        event,
        mask,
        event_pooled,
        background_pooled,
    })
}

/// Runs the detector without gradients and reads back its prediction.
pub fn predict_event(model: &ModelParams, sample: &SampleRecord, label: &PartialLabel) -> Result<EventPrediction> {
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let out = forward_sample(&mut tape, &bound, model, sample, label)?;
    Ok(EventPrediction::read(&tape, &out.event, label.center))
}
