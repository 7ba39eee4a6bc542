//! Vision-question interaction: stacked bilinear attention glimpses grounding
//! one visual stream in the question.
//!
//! Each glimpse computes a joint attention map over every (word, object) pair
//! from a low-rank bilinear form, pools a single joint vector through a second
//! bilinear form, and broadcasts that vector back onto every question position
//! as a residual update.

use super::binder::ParamBinder;
use crate::error::{MasnError, Result};
use crate::tensor::{Tape, TensorId};

/// Parameters of one glimpse; each glimpse index and each stream has its own.
#[derive(Clone, Copy, Debug)]
pub struct GlimpseParams {
    /// Bilinear attention: question-side projection.
    pub att_h: TensorId,
    /// Bilinear attention: visual-side projection.
    pub att_v: TensorId,
    /// Rank-combining vector of the attention scores.
    pub att_w: TensorId,
    /// Pooling: question-side projection.
    pub pool_h: TensorId,
    /// Pooling: visual-side projection.
    pub pool_v: TensorId,
    /// Output map applied to the pooled joint vector.
    pub out: TensorId,
}

impl GlimpseParams {
    pub fn bind(tape: &mut Tape, binder: &mut ParamBinder, stream: &str, i: usize) -> Result<Self> {
        let p = |name: &str| format!("{stream}.ban.{i}.{name}");
        Ok(GlimpseParams {
            att_h: binder.bind(tape, &p("att_h"))?,
            att_v: binder.bind(tape, &p("att_v"))?,
            att_w: binder.bind(tape, &p("att_w"))?,
            pool_h: binder.bind(tape, &p("pool_h"))?,
            pool_v: binder.bind(tape, &p("pool_v"))?,
            out: binder.bind(tape, &p("out"))?,
        })
    }
}

/// Joint representation of one stream plus the retained per-glimpse traces.
pub struct CrossModalState {
    /// L x d question-shaped joint matrix.
    pub h: TensorId,
    /// One L x K attention map per glimpse, each summing to one overall.
    pub maps: Vec<TensorId>,
    /// The 1 x d joint vector added at each glimpse.
    pub glimpse_vectors: Vec<TensorId>,
}

fn check_pair(tape: &Tape, h: TensorId, v: TensorId) -> Result<(usize, usize, usize)> {
    let (hv, vv) = (tape.value(h), tape.value(v));
    if !hv.is_matrix() || !vv.is_matrix() || hv.cols() != vv.cols() {
        return Err(MasnError::Shape(format!(
            "bilinear attention operands {:?} vs {:?}",
            hv.shape(),
            vv.shape()
        )));
    }
    Ok((hv.rows(), vv.rows(), hv.cols()))
}

/// Attention map over all L*K (word, object) pairs: softmax of the low-rank
/// bilinear scores w^T ((att_h H_i) had (att_v V_j)), normalized jointly so the
/// whole map sums to one.
pub fn bilinear_attention_map(
    tape: &mut Tape,
    h: TensorId,
    v: TensorId,
    p: &GlimpseParams,
) -> Result<TensorId> {
    let (l, k, _) = check_pair(tape, h, v)?;
    let hh = tape.matmul(h, p.att_h)?;
    let vv = tape.matmul(v, p.att_v)?;
    let weighted = {
        let w_rows = tape.broadcast_row(p.att_w, l)?;
        tape.mul(hh, w_rows)?
    };
    let vv_t = tape.transpose(vv)?;
    let scores = tape.matmul(weighted, vv_t)?;
    let flat = tape.reshape(scores, vec![l * k])?;
    let soft = tape.softmax(flat, 0)?;
    tape.reshape(soft, vec![l, k])
}

/// Pooled joint vector: out^T applied to
/// sum_{i,j} map[i,j] ((pool_h H_i) had (pool_v V_j)); returns a 1 x d row.
pub fn ban_glimpse(
    tape: &mut Tape,
    h: TensorId,
    v: TensorId,
    map: TensorId,
    p: &GlimpseParams,
) -> Result<TensorId> {
    let (l, k, d) = check_pair(tape, h, v)?;
    if tape.value(map).shape() != [l, k] {
        return Err(MasnError::Shape(format!(
            "attention map {:?}, expected [{l}, {k}]",
            tape.value(map).shape()
        )));
    }
    let ph = tape.matmul(h, p.pool_h)?;
    let pv = tape.matmul(v, p.pool_v)?;
    // sum_j map[i,j] pv[j,c] first, then the Hadamard with ph and the i-sum.
    let pooled_v = tape.matmul(map, pv)?;
    let had = tape.mul(ph, pooled_v)?;
    let summed = tape.sum_rows(had)?;
    let row = tape.reshape(summed, vec![1, d])?;
    tape.matmul(row, p.out)
}

/// Iterate map -> glimpse -> broadcast-add `params.len()` times starting from
/// the word matrix. With no glimpses the question matrix passes through as is.
pub fn vq_interact(
    tape: &mut Tape,
    f_q: TensorId,
    v: TensorId,
    params: &[GlimpseParams],
) -> Result<CrossModalState> {
    let l = tape.value(f_q).rows();
    let mut h = f_q;
    let mut maps = Vec::with_capacity(params.len());
    let mut glimpse_vectors = Vec::with_capacity(params.len());
    for p in params {
        let map = bilinear_attention_map(tape, h, v, p)?;
        let j = ban_glimpse(tape, h, v, map, p)?;
        let tiled = tape.broadcast_row(j, l)?;
        h = tape.add(h, tiled)?;
        maps.push(map);
        glimpse_vectors.push(j);
    }
    Ok(CrossModalState { h, maps, glimpse_vectors })
}
