//! The four contrastive terms, the partial-label grounding hinge and their
//! weighted sum.
//!
//! Every batch term is mean-reduced over the batch, including the two
//! inter-sample softmax contrasts, so that `λ` and `γ` keep their meaning
//! across batch sizes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::PartialLabel;
use crate::error::{Error, Result};
use crate::tensorcore::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// margin of the event–query triplet
    pub alpha: f64,
    /// margin of the event–background triplet
    pub beta: f64,
    /// weight of the inter-sample contrasts
    pub lambda: f64,
    /// softmax temperature of the inter-sample contrasts
    pub tau: f64,
    /// weight of the grounding hinge
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.2,
            lambda: 1.0,
            tau: 0.1,
            gamma: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau > 0.0 && self.alpha >= 0.0 && self.beta >= 0.0 && self.lambda >= 0.0 && self.gamma >= 0.0;
        if ok && [self.alpha, self.beta, self.lambda, self.tau, self.gamma].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights need τ > 0 and α, β, λ, γ ≥ 0: {self:?}"
            )))
        }
    }
}

/// Which contrastive terms take part in the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossFlags {
    pub raml: bool,
    pub raun: bool,
    pub erml: bool,
    pub erun: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Ablation::A6.flags()
    }
}

impl LossFlags {
    pub fn any(&self) -> bool {
        self.raml || self.raun || self.erml || self.erun
    }

    pub fn needs_clusters(&self) -> bool {
        self.erml || self.erun
    }
}

/// Comma-separated subset of `raml,raun,erml,erun`.
impl FromStr for LossFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut f = LossFlags {
            raml: false,
            raun: false,
            erml: false,
            erun: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "raml" => f.raml = true,
                "raun" => f.raun = true,
                "erml" => f.erml = true,
                "erun" => f.erun = true,
                other => {
                    return Err(Error::Invalid(format!(
                        "unknown loss `{other}` (expected raml, raun, erml, erun)"
                    )))
                }
            }
        }
        Ok(f)
    }
}

impl fmt::Display for LossFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.raml, "raml"),
            (self.raun, "raun"),
            (self.erml, "erml"),
            (self.erun, "erun"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join(","))
    }
}

/// Rows of the contrastive ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Self::A1, Self::A2, Self::A3, Self::A4, Self::A5, Self::A6];

    pub fn flags(self) -> LossFlags {
        let (raml, raun, erml, erun) = match self {
            Self::A1 => (true, false, false, false),
            Self::A2 => (true, true, false, false),
            Self::A3 => (true, false, true, false),
            Self::A4 => (true, true, true, false),
            Self::A5 => (true, false, true, true),
            Self::A6 => (true, true, true, true),
        };
        LossFlags { raml, raun, erml, erun }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown ablation row `{s}` (expected A1..A6)")))
    }
}

/// Per-sample positive and negative index sets within one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastSets {
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
}

impl ContrastSets {
    /// Checks that every index is in range, the two sets of a row are disjoint
    /// and every positive set is non-empty.
    pub fn new(positives: Vec<Vec<usize>>, negatives: Vec<Vec<usize>>) -> Result<Self> {
        let b = positives.len();
        if negatives.len() != b {
            return Err(Error::Invalid("positive and negative sets differ in batch size".into()));
        }
        for i in 0..b {
            if positives[i].is_empty() {
                return Err(Error::Invalid(format!(
                    "sample {i} has no positive partner in the batch; batches need ≥ 2 samples per cluster"
                )));
            }
            if positives[i].iter().chain(&negatives[i]).any(|&j| j >= b) {
                return Err(Error::Invalid(format!("row {i} indexes outside the batch")));
            }
            if positives[i].iter().any(|j| negatives[i].contains(j)) {
                return Err(Error::Invalid(format!("row {i}: positive and negative sets overlap")));
            }
        }
        Ok(Self { positives, negatives })
    }

    /// Event–query sets: same cluster tag is positive, the sample's own
    /// query included.
    pub fn multi_modal(tags: &[usize]) -> Result<Self> {
        Self::from_tags(tags, true)
    }

    /// Event–event sets: same cluster tag is positive, the sample itself
    /// excluded from both sets.
    pub fn uni_modal(tags: &[usize]) -> Result<Self> {
        Self::from_tags(tags, false)
    }

    fn from_tags(tags: &[usize], include_self: bool) -> Result<Self> {
        let b = tags.len();
        let mut pos = vec![Vec::new(); b];
        let mut neg = vec![Vec::new(); b];
        for i in 0..b {
            for j in 0..b {
                if i == j && !include_self {
                    continue;
                }
                if tags[i] == tags[j] {
                    pos[i].push(j);
                } else {
                    neg[i].push(j);
                }
            }
        }
        Self::new(pos, neg)
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }

    pub fn negatives(&self, i: usize) -> &[usize] {
        &self.negatives[i]
    }

    pub fn batch_size(&self) -> usize {
        self.positives.len()
    }

    fn masks(&self) -> (Vec<bool>, Vec<bool>) {
        let b = self.batch_size();
        let mut pos = vec![false; b * b];
        let mut all = vec![false; b * b];
        for i in 0..b {
            for &j in &self.positives[i] {
                pos[i * b + j] = true;
                all[i * b + j] = true;
            }
            for &j in &self.negatives[i] {
                all[i * b + j] = true;
            }
        }
        (pos, all)
    }
}

/// Both set families for a batch with the given cluster tags.
pub fn build_contrast_sets(tags: &[usize]) -> Result<(ContrastSets, ContrastSets)> {
    Ok((ContrastSets::multi_modal(tags)?, ContrastSets::uni_modal(tags)?))
}

/// `max(S(v_vd, q) − S(v_ev, q) + α, 0)` with cosine `S`.
pub fn l_raml(tape: &mut Tape, event: Var, video: Var, query: Var, alpha: f64) -> Result<Var> {
    let s_vd = tape.cosine(video, query)?;
    let s_ev = tape.cosine(event, query)?;
    let d = tape.sub(s_vd, s_ev)?;
    let d = tape.add_const(d, alpha)?;
    tape.relu(d)
}

/// `max(S(v_ev, v_bg) − S(v_ev, v_vd) + β, 0)`.
pub fn l_raun(tape: &mut Tape, event: Var, background: Var, video: Var, beta: f64) -> Result<Var> {
    let s_bg = tape.cosine(event, background)?;
    let s_vd = tape.cosine(event, video)?;
    let d = tape.sub(s_bg, s_vd)?;
    let d = tape.add_const(d, beta)?;
    tape.relu(d)
}

/// Mean over rows of `−log(Σ_{Ψ⁺} exp(sᵢⱼ/τ) / Σ_{Ψ⁺∪Ψ⁻} exp(sᵢⱼ/τ))`, with
/// `sᵢⱼ` the cosine between row `i` of `anchors` and row `j` of `others`.
fn softmax_contrast(tape: &mut Tape, anchors: Var, others: Var, sets: &ContrastSets, tau: f64) -> Result<Var> {
    let b = tape.shape(anchors)[0];
    if sets.batch_size() != b || tape.shape(others)[0] != b {
        return Err(Error::shape("contrast", &[tape.shape(anchors), tape.shape(others), &[sets.batch_size()]]));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let a = tape.row_normalize(anchors)?;
    let o = tape.row_normalize(others)?;
    let ot = tape.transpose(o)?;
    let sims = tape.matmul(a, ot)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let (pos, all) = sets.masks();
    let lse_all = tape.masked_logsumexp(logits, all)?;
    let lse_pos = tape.masked_logsumexp(logits, pos)?;
    let per_row = tape.sub(lse_all, lse_pos)?;
    tape.mean(per_row)
}

/// Inter-sample event–query contrast; `events` and `queries` are `B×D`.
pub fn l_erml(tape: &mut Tape, events: Var, queries: Var, sets: &ContrastSets, tau: f64) -> Result<Var> {
    softmax_contrast(tape, events, queries, sets, tau)
}

/// Inter-sample event–event contrast on uni-modal sets.
pub fn l_erun(tape: &mut Tape, events: Var, sets: &ContrastSets, tau: f64) -> Result<Var> {
    softmax_contrast(tape, events, events, sets, tau)
}

/// `max(tᵉ − ê, ŝ − tˢ, 0)`: zero exactly when the clip lies inside the
/// predicted interval.
pub fn l_grnd(tape: &mut Tape, start: Var, end: Var, label: &PartialLabel) -> Result<Var> {
    let neg_end = tape.scale(end, -1.0)?;
    let over_end = tape.add_const(neg_end, label.end())?;
    let over_start = tape.add_const(start, -label.start())?;
    // relu(a) + relu(b − relu(a)) = max(a, b, 0), exactly zero iff a, b ≤ 0
    let a = tape.relu(over_end)?;
    let rest = tape.sub(over_start, a)?;
    let rest = tape.relu(rest)?;
    tape.add(a, rest)
}

/// Per-sample pooled vectors of one batch, plus the cluster each sample
/// represents in it.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    pub events: Vec<Var>,
    pub backgrounds: Vec<Var>,
    pub videos: Vec<Var>,
    pub queries: Vec<Var>,
    pub tags: Vec<usize>,
}

/// Detector outputs and labels for the grounding term.
#[derive(Clone, Debug)]
pub struct GroundingInputs {
    pub starts: Vec<Var>,
    pub ends: Vec<Var>,
    pub labels: Vec<PartialLabel>,
}

/// Batch-mean components of the implicit objective; disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub raml: Option<Var>,
    pub raun: Option<Var>,
    pub erml: Option<Var>,
    pub erun: Option<Var>,
    pub grnd: Option<Var>,
}

fn batch_mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let stacked = tape.stack_rows(terms)?;
    tape.mean(stacked)
}

/// Computes every enabled term over the batch.
pub fn implicit_parts(
    tape: &mut Tape,
    batch: &BatchEmbeddings,
    grounding: Option<&GroundingInputs>,
    weights: &LossWeights,
    flags: LossFlags,
) -> Result<LossParts> {
    let b = batch.events.len();
    let mut parts = LossParts::default();
    if flags.raml {
        let terms = (0..b)
            .map(|i| l_raml(tape, batch.events[i], batch.videos[i], batch.queries[i], weights.alpha))
            .collect::<Result<Vec<_>>>()?;
        parts.raml = Some(batch_mean(tape, &terms)?);
    }
    if flags.raun {
        let terms = (0..b)
            .map(|i| l_raun(tape, batch.events[i], batch.backgrounds[i], batch.videos[i], weights.beta))
            .collect::<Result<Vec<_>>>()?;
        parts.raun = Some(batch_mean(tape, &terms)?);
    }
    if flags.needs_clusters() {
        let events = tape.stack_rows(&batch.events)?;
        if flags.erml {
            let sets = ContrastSets::multi_modal(&batch.tags)?;
            let queries = tape.stack_rows(&batch.queries)?;
            parts.erml = Some(l_erml(tape, events, queries, &sets, weights.tau)?);
        }
        if flags.erun {
            let sets = ContrastSets::uni_modal(&batch.tags)?;
            parts.erun = Some(l_erun(tape, events, &sets, weights.tau)?);
        }
    }
    if let Some(g) = grounding {
        let terms = (0..g.labels.len())
            .map(|i| l_grnd(tape, g.starts[i], g.ends[i], &g.labels[i]))
            .collect::<Result<Vec<_>>>()?;
        parts.grnd = Some(batch_mean(tape, &terms)?);
    }
    Ok(parts)
}

/// `(L_raml + L_raun) + λ(L_erml + L_erun) + γ·L_grnd` over the parts present.
pub fn total_implicit_loss(tape: &mut Tape, parts: &LossParts, weights: &LossWeights) -> Result<Var> {
    let mut terms = Vec::new();
    if let Some(v) = parts.raml {
        terms.push(v);
    }
    if let Some(v) = parts.raun {
        terms.push(v);
    }
    for v in [parts.erml, parts.erun].into_iter().flatten() {
        terms.push(tape.scale(v, weights.lambda)?);
    }
    if let Some(v) = parts.grnd {
        terms.push(tape.scale(v, weights.gamma)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let stacked = tape.stack_rows(&terms)?;
    tape.sum(stacked)
}

#[cfg(test)]
mod tests;
