//! Semantic point matching between frame and identity image tokens.
//!
//! Per-layer cosine similarities of attention outputs fluctuate too much to
//! match on directly, so the similarity matrices are averaged across layers
//! first and the argmax is taken on the mean.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Per-frame-token match into the identity image: `map_star[j] = k` means
/// frame token `j` corresponds to identity token `k`; `s_max[j]` is the
/// layer-averaged cosine similarity of that pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub map_star: Vec<usize>,
    pub s_max: Vec<f32>,
}

impl MatchResult {
    /// The identity permutation over `n` tokens with full confidence.
    pub fn identity(n: usize) -> Self {
        MatchResult {
            map_star: (0..n).collect(),
            s_max: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.map_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map_star.is_empty()
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.s_max.is_empty() {
            return 0.0;
        }
        self.s_max.iter().map(|&v| v as f64).sum::<f64>() / self.s_max.len() as f64
    }
}

/// Match frame tokens to identity tokens by averaging per-layer cosine
/// similarity matrices and taking the row-wise argmax (lowest index wins
/// ties). Both lists hold one `hw x dim` tensor per layer.
pub fn match_points(
    frame_attn_outs: &[Tensor],
    identity_attn_outs: &[Tensor],
) -> Result<MatchResult> {
    if frame_attn_outs.is_empty() || identity_attn_outs.is_empty() {
        return Err(Error::input("match-points", "empty layer list"));
    }
    if frame_attn_outs.len() != identity_attn_outs.len() {
        return Err(Error::input(
            "match-points",
            format!(
                "layer count mismatch: {} frame vs {} identity",
                frame_attn_outs.len(),
                identity_attn_outs.len()
            ),
        ));
    }
    let n_layers = frame_attn_outs.len() as f32;
    let mut mean: Option<Tensor> = None;
    for (f, i) in frame_attn_outs.iter().zip(identity_attn_outs) {
        let sim = tensor::cosine_similarity_matrix(f, i)?;
        mean = Some(match mean {
            None => sim,
            Some(acc) => acc.add(&sim)?,
        });
    }
    let mean = mean.expect("non-empty").scale(1.0 / n_layers);
    let (map_star, s_max) = tensor::argmax_rows(&mean)?;
    Ok(MatchResult { map_star, s_max })
}

/// Mean squared grid-coordinate distance between matched and ground-truth
/// indices.
pub fn matching_error(
    result: &MatchResult,
    ground_truth: &[usize],
    grid_h: usize,
    grid_w: usize,
) -> Result<f64> {
    if result.map_star.len() != ground_truth.len() {
        return Err(Error::input(
            "matching-error",
            format!(
                "length mismatch: {} matches vs {} ground truth",
                result.map_star.len(),
                ground_truth.len()
            ),
        ));
    }
    let hw = grid_h * grid_w;
    let mut sum = 0.0f64;
    for (&m, &g) in result.map_star.iter().zip(ground_truth) {
        if m >= hw || g >= hw {
            return Err(Error::input(
                "matching-error",
                format!("index out of {grid_h}x{grid_w} grid: {m} / {g}"),
            ));
        }
        let (mr, mc) = ((m / grid_w) as f64, (m % grid_w) as f64);
        let (gr, gc) = ((g / grid_w) as f64, (g % grid_w) as f64);
        sum += (mr - gr).powi(2) + (mc - gc).powi(2);
    }
    Ok(sum / result.map_star.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_unit_rows(rng: &mut SeededRng, n: usize, d: usize) -> Tensor {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row = rng.normal_vec(d);
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        Tensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn self_match_is_identity_permutation() {
        let mut rng = SeededRng::new(2);
        let acts =random_unit_rows(&mut rng, 12, 16);
        let res = match_points(std::slice::from_ref(&acts), std::slice::from_ref(&acts)).unwrap();
        assert_eq!(res.map_star, (0..12).collect::<Vec<_>>());
        for &s in &res.s_max {
            assert!(s > 0.999, "similarity {s}");
        }
    }

    #[test]
    fn recovers_planted_permutation_under_noise() {
        let mut rng = SeededRng::new(3);
        let n = 64;
        let d = 64;
        let identity =random_unit_rows(&mut rng, n, d);
        // plant a permutation: frame token j matches identity token pi[j]
        let mut pi: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.uniform_usize(i + 1);
            pi.swap(i, j);
        }
        let layers = 3;
        let mut frame_layers = Vec::new();
        let mut id_layers = Vec::new();
        for _ in 0..layers {
            let mut frame = Vec::with_capacity(n * d);
            for &target in &pi {
                for c in 0..d {
                    frame.push(identity.get2(target, c) + 0.01 * rng.normal_f32());
                }
            }
            frame_layers.push(Tensor::matrix(n, d, frame).unwrap());
            id_layers.push(identity.clone());
        }
        let res = match_points(&frame_layers, &id_layers).unwrap();
        assert_eq!(res.map_star, pi);

        // brute-force oracle over all pairs on the averaged similarities
        for j in 0..n {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for k in 0..n {
                let mut acc = 0.0f64;
                for (f, idl) in frame_layers.iter().zip(&id_layers) {
                    let fr = f.row(j);
                    let ir = idl.row(k);
                    let dot: f64 = fr.iter().zip(ir).map(|(a, b)| (a * b) as f64).sum();
                    let nf: f64 = fr.iter().map(|v| (v * v) as f64).sum::<f64>().sqrt();
                    let ni: f64 = ir.iter().map(|v| (v * v) as f64).sum::<f64>().sqrt();
                    acc += dot / (nf * ni + 1e-8);
                }
                if acc > best_s {
                    best_s = acc;
                    best = k;
                }
            }
            assert_eq!(res.map_star[j], best, "token {j}");
        }
    }

    #[test]
    fn averages_similarities_not_matches() {
        // layer 1 favors 0->0 at 0.9, layer 2 favors 0->1 at 0.95, the other
        // entry is 0.5 in each; the mean must pick 0->1 because
        // (0.5 + 0.95)/2 > (0.9 + 0.5)/2. Unit frame rows are embedded in 3D
        // with a slack component so their cosines against the axis-aligned
        // identity rows are exactly the prescribed values.
        let embed = |c0: f32, c1: f32| {
            let slack = (1.0 - c0 * c0 - c1 * c1).max(0.0).sqrt();
            vec![c0, c1, slack]
        };
        let id3 = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let f1 = Tensor::matrix(1, 3, embed(0.9, 0.5)).unwrap();
        let f2 = Tensor::matrix(1, 3, embed(0.5, 0.95)).unwrap();
        let res = match_points(&[f1.clone(), f2], &[id3.clone(), id3.clone()]).unwrap();
        assert_eq!(res.map_star[0], 1);
        // per-layer argmax disagrees: layer 1 alone picks 0
        let res1 = match_points(&[f1], &[id3]).unwrap();
        assert_eq!(res1.map_star[0], 0);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = SeededRng::new(5);
        let n = 10;
        let identity =random_unit_rows(&mut rng, n, 8);
        let frame =random_unit_rows(&mut rng, n, 8);
        let base = match_points(&[frame.clone()], &[identity.clone()]).unwrap();
        let mut pi: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            pi.swap(i, rng.uniform_usize(i + 1));
        }
        let permuted = identity.gather_rows(&pi).unwrap();
        let res = match_points(&[frame], &[permuted]).unwrap();
        // identity row pi[r] moved to position r, so matches map through pi^-1
        let mut inv = vec![0usize; n];
        for (pos, &orig) in pi.iter().enumerate() {
            inv[orig] = pos;
        }
        for j in 0..n {
            assert_eq!(res.map_star[j], inv[base.map_star[j]]);
        }
    }

    #[test]
    fn scale_invariance() {
        let mut rng = SeededRng::new(7);
        let identity =random_unit_rows(&mut rng, 9, 8);
        let frame =random_unit_rows(&mut rng, 9, 8);
        let base = match_points(
            &[frame.clone(), frame.scale(1.0)],
            &[identity.clone(), identity.clone()],
        )
        .unwrap();
        let scaled = match_points(
            &[frame.scale(37.5), frame],
            &[identity.clone(), identity.scale(0.004)],
        )
        .unwrap();
        assert_eq!(base.map_star, scaled.map_star);
        for (a, b) in base.s_max.iter().zip(&scaled.s_max) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn s_max_stays_in_unit_interval() {
        let mut rng = SeededRng::new(11);
        for _ in 0..5 {
            let a =random_unit_rows(&mut rng, 7, 5);
            let b =random_unit_rows(&mut rng, 7, 5);
            let res = match_points(&[a], &[b]).unwrap();
            for &s in &res.s_max {
                assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&(s as f64)));
            }
        }
    }

    #[test]
    fn empty_layer_list_rejected() {
        assert!(match_points(&[], &[]).is_err());
    }

    #[test]
    fn matching_error_cases() {
        let exact = MatchResult::identity(6);
        let gt: Vec<usize> = (0..6).collect();
        assert_eq!(matching_error(&exact, &gt, 2, 3).unwrap(), 0.0);

        // every match off by one column on a 2x3 grid
        let off = MatchResult {
            map_star: vec![1, 0, 1, 4, 3, 4],
            s_max: vec![1.0; 6],
        };
        assert_eq!(matching_error(&off, &gt, 2, 3).unwrap(), 1.0);

        // random maps against a per-token loop oracle
        let mut rng = SeededRng::new(13);
        let (h, w) = (4, 5);
        let map: Vec<usize> = (0..h * w).map(|_| rng.uniform_usize(h * w)).collect();
        let gt: Vec<usize> = (0..h * w).map(|_| rng.uniform_usize(h * w)).collect();
        let res = MatchResult {
            map_star: map.clone(),
            s_max: vec![0.0; h * w],
        };
        let got = matching_error(&res, &gt, h, w).unwrap();
        let mut acc = 0.0f64;
        for i in 0..h * w {
            let (r1, c1) = ((map[i] / w) as f64, (map[i] % w) as f64);
            let (r2, c2) = ((gt[i] / w) as f64, (gt[i] % w) as f64);
            acc += (r1 - r2) * (r1 - r2) + (c1 - c2) * (c1 - c2);
        }
        assert!((got - acc / (h * w) as f64).abs() < 1e-12);
    }

    #[test]
    fn matching_error_rejects_bad_indices() {
        let res = MatchResult {
            map_star: vec![99],
            s_max: vec![1.0],
        };
        assert!(matching_error(&res, &[0], 2, 2).is_err());
        let ok = MatchResult::identity(1);
        assert!(matching_error(&ok, &[0, 1], 2, 2).is_err());
    }
}
