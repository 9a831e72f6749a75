//! Multi-head attention over a flat token sequence.
//!
//! One kernel serves every caller: per head, scaled dot-product logits, a
//! row-wise (optionally masked) softmax, and a weighted sum over values.
//! Queries and keys arrive already position-encoded where that applies.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

fn head_slices(t: &Tensor, n_heads: usize, op: &'static str) -> Result<usize> {
    let (_, total) = t.dims2(op)?;
    if n_heads == 0 || total % n_heads != 0 {
        return Err(Error::shape(
            op,
            format!("width {total} not divisible into {n_heads} heads"),
        ));
    }
    Ok(total / n_heads)
}

/// Scaled attention logits `q_h . k_h^T / sqrt(d)`, one matrix per head.
pub fn attention_logits_per_head(q: &Tensor, k: &Tensor, n_heads: usize) -> Result<Vec<Tensor>> {
    let d = head_slices(q, n_heads, "attention-logits")?;
    let dk = head_slices(k, n_heads, "attention-logits")?;
    if d != dk {
        return Err(Error::shape(
            "attention-logits",
            format!("query head dim {d} != key head dim {dk}"),
        ));
    }
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q_h = q.slice_cols(h * d, (h + 1) * d);
        let k_h = k.slice_cols(h * d, (h + 1) * d);
        out.push(tensor::matmul(&q_h, &k_h.transpose())?.scale(scale));
    }
    Ok(out)
}

/// Softmaxed attention weights per head under an optional additive mask.
pub fn attention_probs_per_head(
    q: &Tensor,
    k: &Tensor,
    n_heads: usize,
    additive_mask: Option<&Tensor>,
) -> Result<Vec<Tensor>> {
    attention_logits_per_head(q, k, n_heads)?
        .iter()
        .map(|logits| match additive_mask {
            Some(mask) => tensor::masked_softmax_rows(logits, mask),
            None => tensor::softmax_rows(logits),
        })
        .collect()
}

/// Full attention: per-head masked softmax over the key axis, weighted sum
/// over values, heads concatenated back together.
pub fn attention_with_mask(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    additive_mask: Option<&Tensor>,
) -> Result<Tensor> {
    let d = head_slices(v, n_heads, "attention")?;
    if k.rows() != v.rows() {
        return Err(Error::shape(
            "attention",
            format!("{} keys vs {} values", k.rows(), v.rows()),
        ));
    }
    if let Some(mask) = additive_mask {
        let (mr, mc) = mask.dims2("attention")?;
        if mr != q.rows() || mc != k.rows() {
            return Err(Error::shape(
                "attention",
                format!(
                    "mask {mr}x{mc} vs {} queries and {} keys",
                    q.rows(),
                    k.rows()
                ),
            ));
        }
    }
    let probs = attention_probs_per_head(q, k, n_heads, additive_mask)?;
    let mut heads = Vec::with_capacity(n_heads);
    for (h, p) in probs.iter().enumerate() {
        let v_h = v.slice_cols(h * d, (h + 1) * d);
        heads.push(tensor::matmul(p, &v_h)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    Tensor::concat_cols(&refs)
}

/// Global attention over the concatenated text+image sequence.
pub fn unified_attention(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize) -> Result<Tensor> {
    attention_with_mask(q, k, v, n_heads, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, rng.normal_vec(r * c)).unwrap()
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let mut rng = SeededRng::new(1);
        let q = random_matrix(&mut rng, 6, 8);
        let k = random_matrix(&mut rng, 6, 8);
        for p in attention_probs_per_head(&q, &k, 2, None).unwrap() {
            for i in 0..p.rows() {
                let s: f32 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn output_shape() {
        let mut rng = SeededRng::new(2);
        let q = random_matrix(&mut rng, 5, 8);
        let k = random_matrix(&mut rng, 7, 8);
        let v = random_matrix(&mut rng, 7, 8);
        let h = attention_with_mask(&q, &k, &v, 2, None).unwrap();
        assert_eq!(h.shape(), &[5, 8]);
    }

    #[test]
    fn matches_double_loop_oracle_on_toy_sequence() {
        // 4 tokens, 2 heads of dim 2
        let mut rng = SeededRng::new(3);
        let q = random_matrix(&mut rng, 4, 4);
        let k = random_matrix(&mut rng, 4, 4);
        let v = random_matrix(&mut rng, 4, 4);
        let got = unified_attention(&q, &k, &v, 2).unwrap();

        let d = 2usize;
        let scale = 1.0 / (d as f32).sqrt();
        let mut expect = Tensor::zeros(vec![4, 4]);
        for h in 0..2 {
            for i in 0..4 {
                // logits for query i against every key
                let mut w = [0.0f32; 4];
                for j in 0..4 {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += q.get2(i, h * d + c) * k.get2(j, h * d + c);
                    }
                    w[j] = dot * scale;
                }
                let max = w.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = w.iter().map(|x| (x - max).exp()).collect();
                let sum: f32 = exps.iter().sum();
                for c in 0..d {
                    let mut acc = 0.0;
                    for j in 0..4 {
                        acc += exps[j] / sum * v.get2(j, h * d + c);
                    }
                    expect.set2(i, h * d + c, acc);
                }
            }
        }
        assert!(got.max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn head_mismatch_rejected() {
        let q = Tensor::matrix(2, 6, vec![0.0; 12]).unwrap();
        let k = Tensor::matrix(2, 6, vec![0.0; 12]).unwrap();
        assert!(attention_logits_per_head(&q, &k, 4).is_err());
    }
}
