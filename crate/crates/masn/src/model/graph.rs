//! Object relation graph: learned soft adjacency over all K objects and a
//! residual two-layer graph convolution.

use super::binder::ParamBinder;
use crate::error::{MasnError, Result};
use crate::tensor::{Tape, TensorId};

#[derive(Clone, Copy, Debug)]
pub struct GraphParams {
    pub w1: TensorId,
    pub w2: TensorId,
    pub w3: TensorId,
    pub w4: TensorId,
    pub ln_gain: TensorId,
    pub ln_bias: TensorId,
}

impl GraphParams {
    pub fn bind(tape: &mut Tape, binder: &mut ParamBinder, stream: &str) -> Result<Self> {
        Ok(GraphParams {
            w1: binder.bind(tape, &format!("{stream}.graph.w1"))?,
            w2: binder.bind(tape, &format!("{stream}.graph.w2"))?,
            w3: binder.bind(tape, &format!("{stream}.graph.w3"))?,
            w4: binder.bind(tape, &format!("{stream}.graph.w4"))?,
            ln_gain: binder.bind(tape, &format!("{stream}.graph.ln.gain"))?,
            ln_bias: binder.bind(tape, &format!("{stream}.graph.ln.bias"))?,
        })
    }
}

/// Soft adjacency: row-wise softmax of (X w1)(X w2)^T. Each node's outgoing
/// attention over all K nodes sums to one.
pub fn build_adjacency(
    tape: &mut Tape,
    x: TensorId,
    w1: TensorId,
    w2: TensorId,
) -> Result<TensorId> {
    let proj_q = tape.matmul(x, w1)?;
    let proj_k = tape.matmul(x, w2)?;
    let proj_k_t = tape.transpose(proj_k)?;
    let scores = tape.matmul(proj_q, proj_k_t)?;
    tape.softmax(scores, 1)
}

/// Require a row-stochastic matrix (to 1e-9), the invariant the smoothing
/// steps rely on.
pub fn ensure_row_stochastic(tape: &Tape, a: TensorId) -> Result<()> {
    let av = tape.value(a);
    let (rows, cols) = (av.rows(), av.cols());
    for r in 0..rows {
        let row = av.row(r);
        if row.iter().any(|&v| v < 0.0) {
            return Err(MasnError::InvalidArgument(format!(
                "adjacency row {r} has a negative entry"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MasnError::InvalidArgument(format!(
                "adjacency row {r} sums to {sum}, not 1"
            )));
        }
    }
    if rows != cols {
        return Err(MasnError::Shape(format!("adjacency must be square, got {rows}x{cols}")));
    }
    Ok(())
}

/// Residual graph convolution:
/// relu(A relu(A X w3) w4) added back onto X under layer normalization.
pub fn gcn_forward(
    tape: &mut Tape,
    x: TensorId,
    a: TensorId,
    p: &GraphParams,
) -> Result<TensorId> {
    ensure_row_stochastic(tape, a)?;
    let ax = tape.matmul(a, x)?;
    let axw = tape.matmul(ax, p.w3)?;
    let inner = tape.relu(axw)?;
    let a_inner = tape.matmul(a, inner)?;
    let outer = tape.matmul(a_inner, p.w4)?;
    let gcn = tape.relu(outer)?;
    let residual = tape.add(x, gcn)?;
    tape.layer_norm(residual, p.ln_gain, p.ln_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn leaf_graph(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize) -> GraphParams {
        GraphParams {
            w1: tape.leaf(rand_tensor(rng, d, d)).unwrap(),
            w2: tape.leaf(rand_tensor(rng, d, d)).unwrap(),
            w3: tape.leaf(rand_tensor(rng, d, d)).unwrap(),
            w4: tape.leaf(rand_tensor(rng, d, d)).unwrap(),
            ln_gain: tape.leaf(Tensor::filled(vec![d], 1.0)).unwrap(),
            ln_bias: tape.leaf(Tensor::zeros(vec![d])).unwrap(),
        }
    }

    #[test]
    fn single_node_adjacency_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let p = leaf_graph(&mut tape, &mut rng, 3);
        let x = tape.leaf(rand_tensor(&mut rng, 1, 3)).unwrap();
        let a = build_adjacency(&mut tape, x, p.w1, p.w2).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0]);
    }

    #[test]
    fn identical_rows_share_attention_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let p = leaf_graph(&mut tape, &mut rng, 3);
        let row = vec![0.4, -0.7, 1.2];
        let mut data = row.clone();
        data.extend(&row);
        let x = tape.leaf(Tensor::matrix(2, 3, data).unwrap()).unwrap();
        let a = build_adjacency(&mut tape, x, p.w1, p.w2).unwrap();
        for &v in tape.value(a).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacency_matches_pairwise_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let (k, d) = (3, 4);
        let w1_t = rand_tensor(&mut rng, d, d);
        let w2_t = rand_tensor(&mut rng, d, d);
        let x_t = rand_tensor(&mut rng, k, d);
        let w1 = tape.leaf(w1_t.clone()).unwrap();
        let w2 = tape.leaf(w2_t.clone()).unwrap();
        let x = tape.leaf(x_t.clone()).unwrap();
        let a = build_adjacency(&mut tape, x, w1, w2).unwrap();

        // Brute force: explicit pairwise scores, manual row softmax.
        let project = |w: &Tensor, i: usize| -> Vec<f64> {
            (0..d)
                .map(|j| (0..d).map(|c| x_t.at2(i, c) * w.at2(c, j)).sum())
                .collect()
        };
        for i in 0..k {
            let qi = project(&w1_t, i);
            let mut scores = vec![0.0; k];
            for j in 0..k {
                let kj = project(&w2_t, j);
                scores[j] = qi.iter().zip(&kj).map(|(a, b)| a * b).sum();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..k {
                let got = tape.value(a).at2(i, j);
                assert!((got - exps[j] / sum).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn zero_weights_reduce_to_layer_norm_of_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let d = 4;
        let mut p = leaf_graph(&mut tape, &mut rng, d);
        p.w3 = tape.leaf(Tensor::zeros(vec![d, d])).unwrap();
        p.w4 = tape.leaf(Tensor::zeros(vec![d, d])).unwrap();
        let x_t = rand_tensor(&mut rng, 3, d);
        let x = tape.leaf(x_t).unwrap();
        let a = build_adjacency(&mut tape, x, p.w1, p.w2).unwrap();
        let f = gcn_forward(&mut tape, x, a, &p).unwrap();
        let plain = tape.layer_norm(x, p.ln_gain, p.ln_bias).unwrap();
        assert_eq!(tape.value(f).data(), tape.value(plain).data());
    }

    #[test]
    fn single_node_collapses_to_plain_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let d = 4;
        let p = leaf_graph(&mut tape, &mut rng, d);
        let x_t = rand_tensor(&mut rng, 1, d);
        let x = tape.leaf(x_t.clone()).unwrap();
        let a = tape.leaf(Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let f = gcn_forward(&mut tape, x, a, &p).unwrap();

        // relu(relu(x w3) w4) on the single row, then residual + layer norm.
        let w3 = tape.value(p.w3).clone();
        let w4 = tape.value(p.w4).clone();
        let mut h = vec![0.0; d];
        for j in 0..d {
            for c in 0..d {
                h[j] += x_t.data()[c] * w3.at2(c, j);
            }
            h[j] = h[j].max(0.0);
        }
        let mut g = vec![0.0; d];
        for j in 0..d {
            for c in 0..d {
                g[j] += h[c] * w4.at2(c, j);
            }
            g[j] = g[j].max(0.0);
        }
        let residual: Vec<f64> = x_t.data().iter().zip(&g).map(|(a, b)| a + b).collect();
        let mean = residual.iter().sum::<f64>() / d as f64;
        let var = residual.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + crate::tensor::LAYER_NORM_EPS).sqrt();
        for (idx, &got) in tape.value(f).data().iter().enumerate() {
            let expected = (residual[idx] - mean) * rstd;
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn non_row_stochastic_adjacency_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let p = leaf_graph(&mut tape, &mut rng, 3);
        let x = tape.leaf(rand_tensor(&mut rng, 2, 3)).unwrap();
        let bad = tape
            .leaf(Tensor::matrix(2, 2, vec![0.9, 0.3, 0.5, 0.5]).unwrap())
            .unwrap();
        assert!(gcn_forward(&mut tape, x, bad, &p).is_err());
    }

    #[test]
    fn adjacency_rows_stay_stochastic_for_wild_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let p = leaf_graph(&mut tape, &mut rng, 3);
        let data: Vec<f64> = (0..12).map(|i| ((i * 37) % 13) as f64 * 7.5 - 40.0).collect();
        let x = tape.leaf(Tensor::matrix(4, 3, data).unwrap()).unwrap();
        let a = build_adjacency(&mut tape, x, p.w1, p.w2).unwrap();
        ensure_row_stochastic(&tape, a).unwrap();
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let (k, d) = (3, 4);
        let p = leaf_graph(&mut tape, &mut rng, d);
        let x_t = rand_tensor(&mut rng, k, d);
        let x = tape.leaf(x_t.clone()).unwrap();
        let a = build_adjacency(&mut tape, x, p.w1, p.w2).unwrap();
        let a_t = tape.value(a).clone();
        let f = gcn_forward(&mut tape, x, a, &p).unwrap();

        let matmul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let (m, kk, n) = (a.len(), b.len(), b[0].len());
            let mut out = vec![vec![0.0; n]; m];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..kk {
                        out[i][j] += a[i][p] * b[p][j];
                    }
                }
            }
            out
        };
        let to_rows = |t: &Tensor| -> Vec<Vec<f64>> {
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
        };
        let relu_m = |m: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            m.into_iter()
                .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
                .collect()
        };
        let a_rows = to_rows(&a_t);
        let x_rows = to_rows(&x_t);
        let w3 = to_rows(tape.value(p.w3));
        let w4 = to_rows(tape.value(p.w4));
        let inner = relu_m(matmul(&matmul(&a_rows, &x_rows), &w3));
        let gcn = relu_m(matmul(&matmul(&a_rows, &inner), &w4));
        for (r, row) in gcn.iter().enumerate() {
            let residual: Vec<f64> = row.iter().zip(x_t.row(r)).map(|(g, x)| g + x).collect();
            let mean = residual.iter().sum::<f64>() / d as f64;
            let var = residual.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + crate::tensor::LAYER_NORM_EPS).sqrt();
            for c in 0..d {
                let expected = (residual[c] - mean) * rstd;
                let got = tape.value(f).at2(r, c);
                assert!((got - expected).abs() < 1e-12, "({r},{c}): {got} vs {expected}");
            }
        }
    }
}
