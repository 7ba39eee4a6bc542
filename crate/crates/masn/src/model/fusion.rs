//! Motion-appearance fusion: three centered attention branches over the
//! stacked streams, question-guided mixing of the branches, and attention
//! aggregation of the fused matrix down to the answer vector.

use super::binder::ParamBinder;
use super::encoders::{ffn, FfnParams};
use crate::error::{MasnError, Result};
use crate::tensor::{Tape, TensorId};

/// One centered-attention branch: its own query/key/value projections and the
/// layer norm applied after the residual.
#[derive(Clone, Copy, Debug)]
pub struct BranchParams {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub ln_gain: TensorId,
    pub ln_bias: TensorId,
}

impl BranchParams {
    pub fn bind(tape: &mut Tape, binder: &mut ParamBinder, branch: &str) -> Result<Self> {
        let p = |name: &str| format!("fusion.{branch}.{name}");
        Ok(BranchParams {
            wq: binder.bind(tape, &p("wq"))?,
            wk: binder.bind(tape, &p("wk"))?,
            wv: binder.bind(tape, &p("wv"))?,
            ln_gain: binder.bind(tape, &p("ln.gain"))?,
            ln_bias: binder.bind(tape, &p("ln.bias"))?,
        })
    }
}

/// Post-fusion output block and row-scoring aggregation head.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutputParams {
    pub ffn: FfnParams,
    pub ln_gain: TensorId,
    pub ln_bias: TensorId,
    pub agg_w: TensorId,
    pub agg_b: TensorId,
}

impl FusionOutputParams {
    pub fn bind(tape: &mut Tape, binder: &mut ParamBinder) -> Result<Self> {
        Ok(FusionOutputParams {
            ffn: FfnParams::bind(tape, binder, "fusion.ffn")?,
            ln_gain: binder.bind(tape, "fusion.ln.gain")?,
            ln_bias: binder.bind(tape, "fusion.ln.bias")?,
            agg_w: binder.bind(tape, "fusion.agg.w")?,
            agg_b: binder.bind(tape, "fusion.agg.b")?,
        })
    }
}

/// Vertical concatenation [H_a ; H_m], appearance rows first.
pub fn stack_streams(tape: &mut Tape, h_a: TensorId, h_m: TensorId) -> Result<TensorId> {
    let (av, mv) = (tape.value(h_a), tape.value(h_m));
    if av.shape() != mv.shape() {
        return Err(MasnError::Shape(format!(
            "stack_streams {:?} vs {:?}",
            av.shape(),
            mv.shape()
        )));
    }
    tape.concat_rows(&[h_a, h_m])
}

/// Bare scaled dot-product attention; returns the attended matrix and the
/// row-stochastic weight matrix.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    d_k: usize,
) -> Result<(TensorId, TensorId)> {
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.softmax(scaled, 1)?;
    let attended = tape.matmul(weights, v)?;
    Ok((attended, weights))
}

/// One centered-attention branch: queries come from the stack U, keys and
/// values from the branch's center (H_a, H_m, or U itself), followed by a
/// residual back onto U under layer normalization.
pub fn centered_attention_branch(
    tape: &mut Tape,
    u: TensorId,
    center: TensorId,
    d: usize,
    p: &BranchParams,
) -> Result<(TensorId, TensorId)> {
    let q = tape.matmul(u, p.wq)?;
    let k = tape.matmul(center, p.wk)?;
    let v = tape.matmul(center, p.wv)?;
    let (attended, weights) = scaled_dot_attention(tape, q, k, v, d)?;
    let residual = tape.add(attended, u)?;
    let z = tape.layer_norm(residual, p.ln_gain, p.ln_bias)?;
    Ok((z, weights))
}

/// Question-guided mixing: each branch matrix is summarized by its row sum,
/// scored against the question context vector, and the softmax weights blend
/// the branch matrices. Returns (alpha node, blended matrix).
pub fn question_guided_fuse(
    tape: &mut Tape,
    branches: &[TensorId],
    q_row: TensorId,
    d_z: usize,
) -> Result<(TensorId, TensorId)> {
    if branches.is_empty() {
        return Err(MasnError::InvalidArgument("fusion needs at least one branch".into()));
    }
    let d = tape.value(q_row).cols();
    let q_vec = tape.reshape(q_row, vec![d])?;
    let mut scores = Vec::with_capacity(branches.len());
    for &z in branches {
        let z_vec = tape.sum_rows(z)?;
        let dot = tape.dot(q_vec, z_vec)?;
        scores.push(tape.scale(dot, 1.0 / (d_z as f64).sqrt())?);
    }
    let stacked = tape.concat_cols(&scores)?;
    let flat = tape.reshape(stacked, vec![branches.len()])?;
    let alpha = tape.softmax(flat, 0)?;

    let mut blended: Option<TensorId> = None;
    for (i, &z) in branches.iter().enumerate() {
        let a_i = tape.index(alpha, i)?;
        let term = tape.mul_scalar(z, a_i)?;
        blended = Some(match blended {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok((alpha, blended.expect("at least one branch")))
}

/// Output block: layer-normalized residual feed-forward over the blended
/// matrix.
pub fn fuse_output(tape: &mut Tape, s: TensorId, p: &FusionOutputParams) -> Result<TensorId> {
    let transformed = ffn(tape, s, &p.ffn)?;
    let residual = tape.add(s, transformed)?;
    tape.layer_norm(residual, p.ln_gain, p.ln_bias)
}

/// Score every row with a linear map, softmax over positions, and return the
/// weighted row sum (1 x d) together with the weights.
pub fn aggregate(
    tape: &mut Tape,
    o: TensorId,
    agg_w: TensorId,
    agg_b: TensorId,
) -> Result<(TensorId, TensorId)> {
    let rows = tape.value(o).rows();
    let d = tape.value(o).cols();
    let scores = tape.matmul(o, agg_w)?;
    let scores = tape.add_row(scores, agg_b)?;
    let flat = tape.reshape(scores, vec![rows])?;
    let beta = tape.softmax(flat, 0)?;
    let beta_col = tape.reshape(beta, vec![rows, 1])?;
    let ot = tape.transpose(o)?;
    let f_col = tape.matmul(ot, beta_col)?;
    let f_row = tape.reshape(f_col, vec![1, d])?;
    Ok((f_row, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tensor, LAYER_NORM_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn leaf_branch(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize) -> BranchParams {
        BranchParams {
            wq: tape.leaf(rand_tensor(rng, d, d)).unwrap(),
            wk: tape.leaf(rand_tensor(rng, d, d)).unwrap(),
            wv: tape.leaf(rand_tensor(rng, d, d)).unwrap(),
            ln_gain: tape.leaf(Tensor::filled(vec![d], 1.0)).unwrap(),
            ln_bias: tape.leaf(Tensor::zeros(vec![d])).unwrap(),
        }
    }

    fn leaf_output(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize) -> FusionOutputParams {
        FusionOutputParams {
            ffn: FfnParams {
                w1: tape.leaf(rand_tensor(rng, d, 4 * d)).unwrap(),
                b1: tape
                    .leaf(rand_tensor(rng, 1, 4 * d).reshaped(vec![4 * d]).unwrap())
                    .unwrap(),
                w2: tape.leaf(rand_tensor(rng, 4 * d, d)).unwrap(),
                b2: tape.leaf(rand_tensor(rng, 1, d).reshaped(vec![d]).unwrap()).unwrap(),
            },
            ln_gain: tape.leaf(Tensor::filled(vec![d], 1.0)).unwrap(),
            ln_bias: tape.leaf(Tensor::zeros(vec![d])).unwrap(),
            agg_w: tape.leaf(rand_tensor(rng, d, 1)).unwrap(),
            agg_b: tape.leaf(Tensor::zeros(vec![1])).unwrap(),
        }
    }

    #[test]
    fn stack_orders_appearance_first_and_splits_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let (l, d) = (2, 3);
        let a_t = rand_tensor(&mut rng, l, d);
        let m_t = rand_tensor(&mut rng, l, d);
        let a = tape.leaf(a_t.clone()).unwrap();
        let m = tape.leaf(m_t.clone()).unwrap();
        let u = stack_streams(&mut tape, a, m).unwrap();
        assert_eq!(tape.value(u).shape(), &[2 * l, d]);
        // Splitting at row l recovers both inputs bit-exactly.
        for r in 0..l {
            assert_eq!(tape.value(u).row(r), a_t.row(r));
            assert_eq!(tape.value(u).row(l + r), m_t.row(r));
        }
        let dup = stack_streams(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(dup).row(0), tape.value(dup).row(l));
        let wide = tape.leaf(rand_tensor(&mut rng, l, d + 1)).unwrap();
        assert!(stack_streams(&mut tape, a, wide).is_err());
    }

    #[test]
    fn single_key_attention_returns_the_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let d = 4;
        let q = tape.leaf(rand_tensor(&mut rng, 3, d)).unwrap();
        let k = tape.leaf(rand_tensor(&mut rng, 1, d)).unwrap();
        let v_t = rand_tensor(&mut rng, 1, d);
        let v = tape.leaf(v_t.clone()).unwrap();
        let (attended, weights) = scaled_dot_attention(&mut tape, q, k, v, d).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(attended).row(r), v_t.data());
            assert_eq!(tape.value(weights).at2(r, 0), 1.0);
        }
    }

    #[test]
    fn identical_queries_attend_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let d = 4;
        let row: Vec<f64> = (0..d).map(|i| 0.3 * i as f64).collect();
        let mut q_data = row.clone();
        q_data.extend(&row);
        let q = tape.leaf(Tensor::matrix(2, d, q_data).unwrap()).unwrap();
        let k = tape.leaf(rand_tensor(&mut rng, 3, d)).unwrap();
        let v = tape.leaf(rand_tensor(&mut rng, 3, d)).unwrap();
        let (attended, _) = scaled_dot_attention(&mut tape, q, k, v, d).unwrap();
        assert_eq!(tape.value(attended).row(0), tape.value(attended).row(1));
    }

    #[test]
    fn centered_branch_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let (l, d) = (2, 4);
        let p = leaf_branch(&mut tape, &mut rng, d);
        let u_t = rand_tensor(&mut rng, 2 * l, d);
        let ha_t = rand_tensor(&mut rng, l, d);
        let u = tape.leaf(u_t.clone()).unwrap();
        let ha = tape.leaf(ha_t.clone()).unwrap();
        let (z, _) = centered_attention_branch(&mut tape, u, ha, d, &p).unwrap();

        // Explicit loops: projections, scaled scores, row softmax, residual, ln.
        let wq = tape.value(p.wq).clone();
        let wk = tape.value(p.wk).clone();
        let wv = tape.value(p.wv).clone();
        let proj = |m: &Tensor, w: &Tensor, r: usize| -> Vec<f64> {
            (0..d)
                .map(|j| (0..d).map(|c| m.at2(r, c) * w.at2(c, j)).sum())
                .collect()
        };
        for r in 0..2 * l {
            let qr = proj(&u_t, &wq, r);
            let mut scores = vec![0.0; l];
            for j in 0..l {
                let kj = proj(&ha_t, &wk, j);
                scores[j] = qr.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut attended = vec![0.0; d];
            for j in 0..l {
                let vj = proj(&ha_t, &wv, j);
                for c in 0..d {
                    attended[c] += exps[j] / sum * vj[c];
                }
            }
            let residual: Vec<f64> =
                attended.iter().zip(u_t.row(r)).map(|(a, b)| a + b).collect();
            let mean = residual.iter().sum::<f64>() / d as f64;
            let var =
                residual.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..d {
                let expected = (residual[c] - mean) * rstd;
                let got = tape.value(z).at2(r, c);
                assert!((got - expected).abs() < 1e-12, "({r},{c})");
            }
        }
    }

    #[test]
    fn zero_question_gives_uniform_alpha_and_plain_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let (rows, d) = (4, 4);
        let za = tape.leaf(rand_tensor(&mut rng, rows, d)).unwrap();
        let zm = tape.leaf(rand_tensor(&mut rng, rows, d)).unwrap();
        let zall = tape.leaf(rand_tensor(&mut rng, rows, d)).unwrap();
        let q = tape.leaf(Tensor::zeros(vec![1, d])).unwrap();
        let (alpha, s) = question_guided_fuse(&mut tape, &[za, zm, zall], q, d).unwrap();
        for &a in tape.value(alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        for i in 0..rows * d {
            let expected = (tape.value(za).data()[i]
                + tape.value(zm).data()[i]
                + tape.value(zall).data()[i])
                / 3.0;
            assert!((tape.value(s).data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn strong_alignment_saturates_alpha_to_one_branch() {
        let mut tape = Tape::new();
        let (rows, d) = (2, 4);
        // Branch a has a large positive row sum aligned with q; others negative.
        let za = tape.leaf(Tensor::filled(vec![rows, d], 5.0)).unwrap();
        let zm = tape.leaf(Tensor::filled(vec![rows, d], -5.0)).unwrap();
        let zall = tape.leaf(Tensor::filled(vec![rows, d], -5.0)).unwrap();
        let q = tape.leaf(Tensor::filled(vec![1, d], 10.0)).unwrap();
        let (alpha, s) = question_guided_fuse(&mut tape, &[za, zm, zall], q, d).unwrap();
        let a = tape.value(alpha).data();
        assert!(a[0] > 1.0 - 1e-12);
        for i in 0..rows * d {
            assert!((tape.value(s).data()[i] - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_branches_blend_to_themselves_for_any_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let (rows, d) = (3, 4);
        let z_t = rand_tensor(&mut rng, rows, d);
        let z1 = tape.leaf(z_t.clone()).unwrap();
        let z2 = tape.leaf(z_t.clone()).unwrap();
        let z3 = tape.leaf(z_t.clone()).unwrap();
        let q = tape.leaf(rand_tensor(&mut rng, 1, d)).unwrap();
        let (_, s) = question_guided_fuse(&mut tape, &[z1, z2, z3], q, d).unwrap();
        for (got, expected) in tape.value(s).data().iter().zip(z_t.data()) {
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_scores_average_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let (rows, d) = (4, 3);
        let mut p = leaf_output(&mut tape, &mut rng, d);
        p.agg_w = tape.leaf(Tensor::zeros(vec![d, 1])).unwrap();
        let o_t = rand_tensor(&mut rng, rows, d);
        let o = tape.leaf(o_t.clone()).unwrap();
        let (f, beta) = aggregate(&mut tape, o, p.agg_w, p.agg_b).unwrap();
        for &b in tape.value(beta).data() {
            assert!((b - 0.25).abs() < 1e-12);
        }
        for c in 0..d {
            let mean: f64 = (0..rows).map(|r| o_t.at2(r, c)).sum::<f64>() / rows as f64;
            assert!((tape.value(f).data()[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_score_selects_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let (rows, d) = (3, 3);
        let p = leaf_output(&mut tape, &mut rng, d);
        // Row 1 engineered to dominate the linear score by a huge margin.
        let agg_w = tape.value(p.agg_w).clone();
        let mut o_data = vec![0.0; rows * d];
        for c in 0..d {
            o_data[d + c] = 100.0 * agg_w.data()[c].signum();
        }
        let o_t = Tensor::matrix(rows, d, o_data).unwrap();
        let o = tape.leaf(o_t.clone()).unwrap();
        let (f, beta) = aggregate(&mut tape, o, p.agg_w, p.agg_b).unwrap();
        assert!(tape.value(beta).data()[1] > 1.0 - 1e-9);
        for c in 0..d {
            assert!((tape.value(f).data()[c] - o_t.at2(1, c)).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregate_matches_weighted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let (rows, d) = (5, 4);
        let p = leaf_output(&mut tape, &mut rng, d);
        let o_t = rand_tensor(&mut rng, rows, d);
        let o = tape.leaf(o_t.clone()).unwrap();
        let (f, beta) = aggregate(&mut tape, o, p.agg_w, p.agg_b).unwrap();
        let beta_t = tape.value(beta).clone();
        let sum: f64 = beta_t.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for c in 0..d {
            let expected: f64 = (0..rows).map(|r| beta_t.data()[r] * o_t.at2(r, c)).sum();
            assert!((tape.value(f).data()[c] - expected).abs() < 1e-12);
        }
    }
}
