use rand_chacha::ChaCha8Rng;

use super::params::{uniform_weight, Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensorcore::{Tape, Tensor, Var};

/// Fused sequence features and their pooled summaries, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    /// `T×D`
    pub video: Var,
    /// `M×D`
    pub query: Var,
    /// column mean of `query`
    pub query_pooled: Var,
    /// column mean of `video`
    pub video_pooled: Var,
}

const BLOCKS: [&str; 2] = ["vq", "qv"];
const ATTN: [&str; 4] = ["wq", "wk", "wv", "wo"];

/// Adds projection and cross-attention parameters under `prefix`.
pub(crate) fn init_fusion(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim_video: usize,
    dim_query: usize,
    dim: usize,
) {
    store.insert(format!("{prefix}.proj_v.w"), uniform_weight(rng, dim_video, dim));
    store.insert(format!("{prefix}.proj_v.b"), Tensor::zeros(&[dim]));
    store.insert(format!("{prefix}.proj_q.w"), uniform_weight(rng, dim_query, dim));
    store.insert(format!("{prefix}.proj_q.b"), Tensor::zeros(&[dim]));
    for block in BLOCKS {
        for w in ATTN {
            store.insert(format!("{prefix}.{block}.{w}"), uniform_weight(rng, dim, dim));
        }
    }
}

/// Single-head attention of `queries` over `keys` with residual:
/// `X + softmax(X·Wq·(Y·Wk)ᵀ/√D)·Y·Wv·Wo`.
fn cross_attend(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    block: &str,
    queries: Var,
    keys: Var,
) -> Result<Var> {
    let w = |n: &str| params.var(&format!("{prefix}.{block}.{n}"));
    let dim = tape.shape(queries)[1] as f64;
    let q = tape.matmul(queries, w("wq")?)?;
    let k = tape.matmul(keys, w("wk")?)?;
    let v = tape.matmul(keys, w("wv")?)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / dim.sqrt())?;
    let attn = tape.row_softmax(logits)?;
    let mixed = tape.matmul(attn, v)?;
    let out = tape.matmul(mixed, w("wo")?)?;
    tape.add(queries, out)
}

/// Projects both modalities to the shared width and lets each attend to the
/// other once.
pub fn fuse(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    video_feats: Var,
    query_feats: Var,
) -> Result<FusedFeatures> {
    let pv = params.var(&format!("{prefix}.proj_v.w"))?;
    let pq = params.var(&format!("{prefix}.proj_q.w"))?;
    let (vs, qs, pvs, pqs) = (
        tape.shape(video_feats).to_vec(),
        tape.shape(query_feats).to_vec(),
        tape.shape(pv).to_vec(),
        tape.shape(pq).to_vec(),
    );
    if vs.len() != 2 || qs.len() != 2 || vs[1] != pvs[0] || qs[1] != pqs[0] {
        return Err(Error::shape("fuse", &[&vs, &qs, &pvs, &pqs]));
    }
    let v = tape.linear(video_feats, pv, params.var(&format!("{prefix}.proj_v.b"))?)?;
    let q = tape.linear(query_feats, pq, params.var(&format!("{prefix}.proj_q.b"))?)?;
    let video = cross_attend(tape, params, prefix, "vq", v, q)?;
    let query = cross_attend(tape, params, prefix, "qv", q, v)?;
    let query_pooled = tape.mean_axis(query, 0)?;
    let video_pooled = tape.mean_axis(video, 0)?;
    Ok(FusedFeatures {
        video,
        query,
        query_pooled,
        video_pooled,
    })
}
