//! Input encoders: object location encoding, global-local fusion, and the
//! bidirectional-LSTM question encoder.
//!
//! Both visual streams use structurally identical encoders with separate
//! parameters. Every feed-forward block here is one hidden layer of width d
//! with ReLU followed by a linear output.

use super::binder::ParamBinder;
use crate::error::{MasnError, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Sinusoidal position vector for a frame index; `dim` must be even.
/// Slot 2i holds sin(index / 10000^(2i/dim)), slot 2i+1 the matching cos.
pub fn positional_encoding(index: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(MasnError::InvalidArgument(format!(
            "positional encoding width must be even and nonzero, got {dim}"
        )));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let rate = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = index as f64 / rate;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Positional encodings for a slice of indices as a constant matrix.
pub fn positional_encoding_rows(indices: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(indices.len() * dim);
    for &idx in indices {
        data.extend(positional_encoding(idx, dim)?);
    }
    Tensor::matrix(indices.len(), dim, data)
}

/// One-hidden-layer feed-forward block: relu(x w1 + b1) w2 + b2.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

impl FfnParams {
    pub fn bind(tape: &mut Tape, binder: &mut ParamBinder, prefix: &str) -> Result<Self> {
        Ok(FfnParams {
            w1: binder.bind(tape, &format!("{prefix}.w1"))?,
            b1: binder.bind(tape, &format!("{prefix}.b1"))?,
            w2: binder.bind(tape, &format!("{prefix}.w2"))?,
            b2: binder.bind(tape, &format!("{prefix}.b2"))?,
        })
    }
}

pub fn ffn(tape: &mut Tape, x: TensorId, p: &FfnParams) -> Result<TensorId> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, p.w2)?;
    tape.add_row(out, p.b2)
}

/// Parameters of one stream's location + global encoder.
#[derive(Clone, Copy, Debug)]
pub struct StreamEncoderParams {
    /// Box embedding FFN (4 -> d).
    pub box_ffn: FfnParams,
    /// Object encoder over [object ; box embedding ; position], -> d.
    pub obj_ffn: FfnParams,
    /// Global-local fusion FFN over [local ; global + position], -> d.
    pub fuse_ffn: FfnParams,
}

impl StreamEncoderParams {
    pub fn bind(tape: &mut Tape, binder: &mut ParamBinder, stream: &str) -> Result<Self> {
        Ok(StreamEncoderParams {
            box_ffn: FfnParams::bind(tape, binder, &format!("{stream}.loc.box"))?,
            obj_ffn: FfnParams::bind(tape, binder, &format!("{stream}.loc.obj"))?,
            fuse_ffn: FfnParams::bind(tape, binder, &format!("{stream}.fuse"))?,
        })
    }
}

/// Per-object location encoding: rows are an FFN of
/// [object ; FFN(box) ; positional encoding of the object's frame].
pub fn encode_location(
    tape: &mut Tape,
    objects: TensorId,
    boxes: TensorId,
    frame_indices: &[usize],
    d: usize,
    p: &StreamEncoderParams,
) -> Result<TensorId> {
    let k = tape.value(objects).rows();
    if tape.value(boxes).shape() != [k, 4] {
        return Err(MasnError::Shape(format!(
            "boxes {:?} vs {k} objects",
            tape.value(boxes).shape()
        )));
    }
    if frame_indices.len() != k {
        return Err(MasnError::Shape(format!(
            "{} frame indices vs {k} objects",
            frame_indices.len()
        )));
    }
    let box_emb = ffn(tape, boxes, &p.box_ffn)?;
    let pos = tape.leaf(positional_encoding_rows(frame_indices, d)?)?;
    let stacked = tape.concat_cols(&[objects, box_emb, pos])?;
    ffn(tape, stacked, &p.obj_ffn)
}

/// Global-local fusion: positional encodings are added to the per-frame
/// global features first, then each object row is joined with its frame's
/// global row and mapped through an FFN.
pub fn fuse_global(
    tape: &mut Tape,
    v_local: TensorId,
    v_global: TensorId,
    frame_indices: &[usize],
    p: &StreamEncoderParams,
) -> Result<TensorId> {
    let t = tape.value(v_global).rows();
    let d_in = tape.value(v_global).cols();
    for &f in frame_indices {
        if f >= t {
            return Err(MasnError::Shape(format!("frame index {f} out of range {t}")));
        }
    }
    if tape.value(v_local).rows() != frame_indices.len() {
        return Err(MasnError::Shape("v_local rows vs frame indices".into()));
    }
    let frames: Vec<usize> = (0..t).collect();
    let pos = tape.leaf(positional_encoding_rows(&frames, d_in)?)?;
    let global_pos = tape.add(v_global, pos)?;
    let per_object = tape.gather_rows(global_pos, frame_indices)?;
    let stacked = tape.concat_cols(&[v_local, per_object])?;
    ffn(tape, stacked, &p.fuse_ffn)
}

/// One direction of the question LSTM. Weight layout: `w_ih` is
/// [embed, 4h], `w_hh` is [h, 4h], `bias` is [4h]; gate order i, f, g, o.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_ih: TensorId,
    pub w_hh: TensorId,
    pub bias: TensorId,
}

impl LstmParams {
    pub fn bind(tape: &mut Tape, binder: &mut ParamBinder, prefix: &str) -> Result<Self> {
        Ok(LstmParams {
            w_ih: binder.bind(tape, &format!("{prefix}.w_ih"))?,
            w_hh: binder.bind(tape, &format!("{prefix}.w_hh"))?,
            bias: binder.bind(tape, &format!("{prefix}.bias"))?,
        })
    }
}

/// Run an LSTM over row inputs, returning each step's hidden state (1 x h).
pub fn lstm_sequence(
    tape: &mut Tape,
    inputs: &[TensorId],
    p: &LstmParams,
) -> Result<Vec<TensorId>> {
    let four_h = tape.value(p.bias).numel();
    let h_size = four_h / 4;
    let mut h = tape.leaf(Tensor::zeros(vec![1, h_size]))?;
    let mut c = tape.leaf(Tensor::zeros(vec![1, h_size]))?;
    let mut hidden = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let xi = tape.matmul(x, p.w_ih)?;
        let hh = tape.matmul(h, p.w_hh)?;
        let pre = tape.add(xi, hh)?;
        let pre = tape.add_row(pre, p.bias)?;
        let i_gate = tape.slice_cols(pre, 0, h_size)?;
        let f_gate = tape.slice_cols(pre, h_size, h_size)?;
        let g_gate = tape.slice_cols(pre, 2 * h_size, h_size)?;
        let o_gate = tape.slice_cols(pre, 3 * h_size, h_size)?;
        let i_gate = tape.sigmoid(i_gate)?;
        let f_gate = tape.sigmoid(f_gate)?;
        let g_gate = tape.tanh(g_gate)?;
        let o_gate = tape.sigmoid(o_gate)?;
        let fc = tape.mul(f_gate, c)?;
        let ig = tape.mul(i_gate, g_gate)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(o_gate, tc)?;
        hidden.push(h);
    }
    Ok(hidden)
}

#[derive(Clone, Copy, Debug)]
pub struct QuestionEncoderParams {
    pub embed: TensorId,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub word_w: TensorId,
    pub word_b: TensorId,
    pub ctx_w: TensorId,
    pub ctx_b: TensorId,
}

impl QuestionEncoderParams {
    pub fn bind(tape: &mut Tape, binder: &mut ParamBinder) -> Result<Self> {
        Ok(QuestionEncoderParams {
            embed: binder.bind(tape, "question.embed")?,
            fwd: LstmParams::bind(tape, binder, "question.lstm.fwd")?,
            bwd: LstmParams::bind(tape, binder, "question.lstm.bwd")?,
            word_w: binder.bind(tape, "question.word_proj.w")?,
            word_b: binder.bind(tape, "question.word_proj.b")?,
            ctx_w: binder.bind(tape, "question.ctx_proj.w")?,
            ctx_b: binder.bind(tape, "question.ctx_proj.b")?,
        })
    }
}

/// Word-level matrix F_q (L x d) and context vector q (1 x d) from the
/// bidirectional recurrent pass.
pub struct QuestionEncoding {
    pub f_q: TensorId,
    pub q: TensorId,
}

/// Encode a token sequence: embeddings feed a forward and a backward LSTM of
/// width d/2 each; per-step concatenations projected to d give F_q, the
/// concatenated final states projected to d give q.
pub fn encode_question(
    tape: &mut Tape,
    tokens: &[u32],
    vocab: usize,
    p: &QuestionEncoderParams,
) -> Result<QuestionEncoding> {
    if tokens.is_empty() {
        return Err(MasnError::InvalidArgument("cannot encode an empty question".into()));
    }
    for &t in tokens {
        if t as usize >= vocab {
            return Err(MasnError::Shape(format!("token {t} outside vocab {vocab}")));
        }
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let embedded = tape.gather_rows(p.embed, &ids)?;
    let l = ids.len();
    let steps: Vec<TensorId> = (0..l)
        .map(|t| tape.gather_rows(embedded, &[t]))
        .collect::<Result<_>>()?;

    let fwd_states = lstm_sequence(tape, &steps, &p.fwd)?;
    let rev_steps: Vec<TensorId> = steps.iter().rev().copied().collect();
    let bwd_states_rev = lstm_sequence(tape, &rev_steps, &p.bwd)?;
    // bwd_states_rev[i] corresponds to original position l-1-i.

    let mut rows = Vec::with_capacity(l);
    for t in 0..l {
        let pair = tape.concat_cols(&[fwd_states[t], bwd_states_rev[l - 1 - t]])?;
        rows.push(pair);
    }
    let stacked = tape.concat_rows(&rows)?;
    let f_q = tape.matmul(stacked, p.word_w)?;
    let f_q = tape.add_row(f_q, p.word_b)?;

    let finals = tape.concat_cols(&[fwd_states[l - 1], bwd_states_rev[l - 1]])?;
    let q = tape.matmul(finals, p.ctx_w)?;
    let q = tape.add_row(q, p.ctx_b)?;

    Ok(QuestionEncoding { f_q, q })
}
