use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{uniform_weight, Bound, ParamStore};
use crate::dataio::{Interval, PartialLabel};
use crate::error::{Error, Result};
use crate::tensorcore::{Tape, Tensor, Var};

/// How the detector reads the fused video.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    /// Per-frame event scores seeded by similarity to the anchor frames and
    /// to the query;
    /// center and width are the mass moments of the score profile.
    #[default]
    Profile,
    /// A perceptron on the mean-pooled video emits bounded `(δ, ℓ)` directly.
    /// Blind to frame order, kept as a baseline.
    Pooled,
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "profile" => Ok(Self::Profile),
            "pooled" => Ok(Self::Pooled),
            other => Err(Error::Invalid(format!("unknown detector `{other}`"))),
        }
    }
}

/// Initial scale and offset of the anchor-similarity term of the profile
/// detector: frames at cosine ≥ 0.5 start with event score above one half.
pub const SIM_SCALE_INIT: f64 = 8.0;
pub const SIM_BIAS_INIT: f64 = -4.0;
/// Initial weight of the frame-to-query cosine term.
pub const QUERY_SCALE_INIT: f64 = 3.0;

pub(crate) fn init_detector(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    kind: DetectorKind,
    dim: usize,
    hidden: usize,
) {
    match kind {
        DetectorKind::Profile => {
            store.insert("det.w1", uniform_weight(rng, dim, hidden));
            store.insert("det.b1", Tensor::zeros(&[hidden]));
            let mut w2 = uniform_weight(rng, hidden, 1);
            // the learned residual starts small next to the similarity prior
            w2.data_mut().iter_mut().for_each(|v| *v *= 0.1);
            store.insert("det.w2", w2);
            store.insert("det.b2", Tensor::zeros(&[1]));
            store.insert("det.sim_scale", Tensor::scalar(SIM_SCALE_INIT));
            store.insert("det.sim_bias", Tensor::scalar(SIM_BIAS_INIT));
            store.insert("det.query_scale", Tensor::scalar(QUERY_SCALE_INIT));
        }
        DetectorKind::Pooled => {
            store.insert("det.w1", uniform_weight(rng, dim, hidden));
            store.insert("det.b1", Tensor::zeros(&[hidden]));
            store.insert("det.w2", uniform_weight(rng, hidden, 2));
            store.insert("det.b2", Tensor::zeros(&[2]));
        }
    }
}

/// Detector output on the tape. `start = center − width/2`,
/// `end = center + width/2`, `center = anchor + delta`.
#[derive(Clone, Copy, Debug)]
pub struct EventVars {
    pub delta: Var,
    pub width: Var,
    pub start: Var,
    pub end: Var,
}

/// Detector output as plain numbers on the frame axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventPrediction {
    pub delta: f64,
    pub width: f64,
    pub center: f64,
    pub start: f64,
    pub end: f64,
}

impl EventPrediction {
    /// `p = t_c + δ`, `ŝ = p − ℓ/2`, `ê = p + ℓ/2`.
    pub fn from_anchor(anchor: f64, delta: f64, width: f64) -> Self {
        let center = anchor + delta;
        Self {
            delta,
            width,
            center,
            start: center - 0.5 * width,
            end: center + 0.5 * width,
        }
    }

    pub fn read(tape: &Tape, vars: &EventVars, anchor: f64) -> Self {
        Self::from_anchor(anchor, tape.scalar(vars.delta), tape.scalar(vars.width))
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.start, self.end)
    }

    /// The prediction clipped to `[0, frames]`, widened to at least one frame.
    pub fn clamped(&self, frames: usize) -> Interval {
        let t = frames as f64;
        let mut s = self.start.clamp(0.0, t);
        let mut e = self.end.clamp(0.0, t);
        if e - s < 1.0 {
            let mid = (0.5 * (s + e)).clamp(0.5, t - 0.5);
            s = mid - 0.5;
            e = mid + 0.5;
        }
        Interval::new(s, e)
    }
}

/// Constant `1×T` row averaging the frames the clip label touches.
fn anchor_weights(label: &PartialLabel, frames: usize) -> Tensor {
    let last = frames - 1;
    let lo = (label.start().floor().max(0.0) as usize).min(last);
    let hi = if label.range > 0.0 {
        ((label.end().ceil() as usize).saturating_sub(1)).clamp(lo, last)
    } else {
        lo
    };
    let n = (hi - lo + 1) as f64;
    let mut w = vec![0.0; frames];
    w[lo..=hi].iter_mut().for_each(|v| *v = 1.0 / n);
    Tensor::from_parts(vec![1, frames], w)
}

/// Frame midpoints `t + 0.5`, so frame `t` covers `[t, t+1)`.
fn frame_midpoints(frames: usize) -> Tensor {
    Tensor::vector((0..frames).map(|t| t as f64 + 0.5).collect())
}

/// Predicts the event around the annotated clip `label` from fused video
/// features `video` (`T×D`) and their column mean `video_pooled`.
pub fn detect_event(
    tape: &mut Tape,
    params: &Bound,
    kind: DetectorKind,
    video: Var,
    video_pooled: Var,
    query_pooled: Var,
    label: &PartialLabel,
) -> Result<EventVars> {
    let frames = tape.shape(video)[0];
    let t = frames as f64;
    if !(label.center >= 0.0 && label.center <= t) {
        return Err(Error::Domain {
            op: "detect_event",
            msg: format!("anchor {} outside [0, {t}]", label.center),
        });
    }
    let anchor = tape.constant(Tensor::scalar(label.center));
    let (delta, width) = match kind {
        DetectorKind::Pooled => {
            let x = tape.reshape(video_pooled, &[1, tape.value(video_pooled).len()])?;
            let h = tape.linear(x, params.var("det.w1")?, params.var("det.b1")?)?;
            let h = tape.tanh(h)?;
            let raw = tape.linear(h, params.var("det.w2")?, params.var("det.b2")?)?;
            let delta_raw = tape.select(raw, 0)?;
            let width_raw = tape.select(raw, 1)?;
            detector_activation(tape, delta_raw, width_raw, frames)?
        }
        DetectorKind::Profile => {
            let scores = frame_scores(tape, params, video, video_pooled, query_pooled, label)?;
            profile_moments(tape, scores, anchor)?
        }
    };
    let center = tape.add(anchor, delta)?;
    let half = tape.scale(width, 0.5)?;
    let start = tape.sub(center, half)?;
    let end = tape.add(center, half)?;
    Ok(EventVars {
        delta,
        width,
        start,
        end,
    })
}

/// `δ = tanh(δ_raw)·T/2`, `ℓ = sigmoid(ℓ_raw)·T + 1`.
pub fn detector_activation(tape: &mut Tape, delta_raw: Var, width_raw: Var, frames: usize) -> Result<(Var, Var)> {
    let t = frames as f64;
    let d = tape.tanh(delta_raw)?;
    let delta = tape.scale(d, 0.5 * t)?;
    let w = tape.sigmoid(width_raw)?;
    let w = tape.scale(w, t)?;
    let width = tape.add_const(w, 1.0)?;
    Ok((delta, width))
}

/// Per-frame event probability: scaled cosines of each centred frame to the
/// centred anchor features and to the pooled query, plus a small learned
/// perceptron term.
pub fn frame_scores(
    tape: &mut Tape,
    params: &Bound,
    video: Var,
    video_pooled: Var,
    query_pooled: Var,
    label: &PartialLabel,
) -> Result<Var> {
    let frames = tape.shape(video)[0];
    let neg_mean = tape.scale(video_pooled, -1.0)?;
    let centred = tape.add_row(video, neg_mean)?;
    let sel = tape.constant(anchor_weights(label, frames));
    let anchor = tape.matmul(sel, centred)?;
    let dim = tape.value(anchor).len();
    let anchor = tape.reshape(anchor, &[dim])?;
    let anchor_n = tape.row_normalize(anchor)?;
    let anchor_n = tape.reshape(anchor_n, &[dim, 1])?;
    let rows_n = tape.row_normalize(centred)?;
    let sim = tape.matmul(rows_n, anchor_n)?;
    let sim = tape.reshape(sim, &[frames])?;
    let sim = tape.mul_scalar(sim, params.var("det.sim_scale")?)?;
    let sim = tape.add_scalar(sim, params.var("det.sim_bias")?)?;

    let q_n = tape.row_normalize(query_pooled)?;
    let q_n = tape.reshape(q_n, &[dim, 1])?;
    let qsim = tape.matmul(rows_n, q_n)?;
    let qsim = tape.reshape(qsim, &[frames])?;
    let qsim = tape.mul_scalar(qsim, params.var("det.query_scale")?)?;
    let sim = tape.add(sim, qsim)?;

    let h = tape.linear(centred, params.var("det.w1")?, params.var("det.b1")?)?;
    let h = tape.tanh(h)?;
    let r = tape.linear(h, params.var("det.w2")?, params.var("det.b2")?)?;
    let r = tape.reshape(r, &[frames])?;
    let logits = tape.add(sim, r)?;
    tape.sigmoid(logits)
}

/// Width `√(P² + 1)` with `P = Σ p_t`, center at the `p`-weighted mean frame
/// midpoint; returns `(center − anchor, width)`.
pub fn profile_moments(tape: &mut Tape, scores: Var, anchor: Var) -> Result<(Var, Var)> {
    let frames = tape.value(scores).len();
    let mass = tape.sum(scores)?;
    let sq = tape.mul(mass, mass)?;
    let sq = tape.add_const(sq, 1.0)?;
    let width = tape.sqrt(sq)?;
    let pos = tape.constant(frame_midpoints(frames));
    let weighted = tape.mul(scores, pos)?;
    let moment = tape.sum(weighted)?;
    let center = tape.div(moment, mass)?;
    let delta = tape.sub(center, anchor)?;
    Ok((delta, width))
}

/// Soft plateau `m_t = σ(k(t + ½ − ŝ))·σ(k(ê − t − ½))` over `frames` frames.
pub fn plateau_mask(tape: &mut Tape, start: Var, end: Var, sharpness: Var, frames: usize) -> Result<Var> {
    let pos = tape.constant(frame_midpoints(frames));
    let neg_start = tape.scale(start, -1.0)?;
    let rise = tape.add_scalar(pos, neg_start)?;
    let rise = tape.mul_scalar(rise, sharpness)?;
    let rise = tape.sigmoid(rise)?;
    let neg_pos = tape.scale(pos, -1.0)?;
    let fall = tape.add_scalar(neg_pos, end)?;
    let fall = tape.mul_scalar(fall, sharpness)?;
    let fall = tape.sigmoid(fall)?;
    tape.mul(rise, fall)
}

/// `(v_ev, v_bg) = ((1/T)·Σ m_t V_t, (1/T)·Σ (1 − m_t) V_t)`.
pub fn pool_event(tape: &mut Tape, video: Var, mask: Var) -> Result<(Var, Var)> {
    let frames = tape.shape(video)[0];
    let dim = tape.shape(video)[1];
    if tape.value(mask).len() != frames {
        return Err(Error::shape("pool_event", &[tape.shape(video), tape.shape(mask)]));
    }
    let inv_t = 1.0 / frames as f64;
    let row = tape.reshape(mask, &[1, frames])?;
    let ev = tape.matmul(row, video)?;
    let ev = tape.reshape(ev, &[dim])?;
    let ev = tape.scale(ev, inv_t)?;
    let neg = tape.scale(row, -1.0)?;
    let inv = tape.add_const(neg, 1.0)?;
    let bg = tape.matmul(inv, video)?;
    let bg = tape.reshape(bg, &[dim])?;
    let bg = tape.scale(bg, inv_t)?;
    Ok((ev, bg))
}
