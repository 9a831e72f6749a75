//! Locality diagnostics: bin attention mass into concentric equal-area rings
//! around a query token, and tabulate match/mask accuracy across timesteps.

use crate::correspond::{self, MatchResult};
use crate::error::{Error, Result};
use crate::maskex::{self, ForegroundMask};
use crate::rope::GridCoord;
use crate::sampler::StepExtraction;
use crate::tensor::Tensor;

/// Attention mass per concentric ring around one query coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct RingHistogram {
    pub query_coord: GridCoord,
    pub ring_sums: Vec<f64>,
    /// `n_rings + 1` increasing radii; ring `k` covers `[r_k, r_{k+1})`,
    /// the last ring is closed.
    pub ring_radii: Vec<f64>,
}

impl RingHistogram {
    pub fn total(&self) -> f64 {
        self.ring_sums.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("ring,sum\n");
        for (i, s) in self.ring_sums.iter().enumerate() {
            out.push_str(&format!("{i},{s}\n"));
        }
        out
    }
}

/// Bin one query row of an image-to-image attention matrix into `n_rings`
/// rings of equal continuum area. Radii go `R * sqrt(k / K)` where `R` is
/// the distance from the query to the farthest grid corner.
pub fn locality_rings(
    attn_weights: &Tensor,
    grid_h: usize,
    grid_w: usize,
    query_index: usize,
    n_rings: usize,
) -> Result<RingHistogram> {
    let hw = grid_h * grid_w;
    let (rows, cols) = attn_weights.dims2("locality-rings")?;
    if rows != hw || cols != hw {
        return Err(Error::shape(
            "locality-rings",
            format!("weights {rows}x{cols} vs grid {grid_h}x{grid_w}"),
        ));
    }
    if query_index >= hw {
        return Err(Error::input(
            "locality-rings",
            format!("query index {query_index} outside grid of {hw} tokens"),
        ));
    }
    if n_rings == 0 {
        return Err(Error::input("locality-rings", "need at least one ring"));
    }
    let query = GridCoord::from_index(query_index, grid_w);
    let dist_to = |r: usize, c: usize| -> f64 {
        let dr = r as f64 - query.row as f64;
        let dc = c as f64 - query.col as f64;
        (dr * dr + dc * dc).sqrt()
    };
    let corners = [
        dist_to(0, 0),
        dist_to(0, grid_w - 1),
        dist_to(grid_h - 1, 0),
        dist_to(grid_h - 1, grid_w - 1),
    ];
    let max_r = corners.iter().cloned().fold(0.0, f64::max);
    let ring_radii: Vec<f64> = (0..=n_rings)
        .map(|k| max_r * (k as f64 / n_rings as f64).sqrt())
        .collect();
    let mut ring_sums = vec![0.0f64; n_rings];
    let row = attn_weights.row(query_index);
    for (token, &weight) in row.iter().enumerate() {
        let coord = GridCoord::from_index(token, grid_w);
        let d = dist_to(coord.row, coord.col);
        // half-open rings, last ring closed at R
        let mut ring = n_rings - 1;
        for k in 0..n_rings {
            if d >= ring_radii[k] && d < ring_radii[k + 1] {
                ring = k;
                break;
            }
        }
        ring_sums[ring] += weight as f64;
    }
    Ok(RingHistogram {
        query_coord: query,
        ring_sums,
        ring_radii,
    })
}

/// One row of the accuracy-versus-timestep table.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub step: usize,
    pub mse: f64,
    pub iou: f64,
}

pub fn accuracy_table_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::from("step,mse,iou\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.mse, r.iou));
    }
    out
}

/// Score per-step probe extractions against ground truth: matching MSE in
/// grid units and mask IoU.
pub fn accuracy_curve(
    extractions: &[StepExtraction],
    ground_truth_map: &MatchResult,
    ground_truth_mask: &ForegroundMask,
    n_steps: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<Vec<AccuracyRow>> {
    let mut out = Vec::with_capacity(extractions.len());
    for e in extractions {
        if e.step == 0 || e.step > n_steps {
            return Err(Error::input(
                "accuracy-curve",
                format!("step {} outside [1, {n_steps}]", e.step),
            ));
        }
        let mse = correspond::matching_error(
            &e.match_result,
            &ground_truth_map.map_star,
            grid_h,
            grid_w,
        )?;
        let iou = maskex::mask_iou(&e.frame_mask, ground_truth_mask)?;
        out.push(AccuracyRow {
            step: e.step,
            mse,
            iou,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn delta_attention_lands_in_first_ring() {
        let (h, w) = (4, 4);
        let q = 5;
        let mut weights = Tensor::zeros(vec![16, 16]);
        weights.set2(q, q, 1.0);
        let hist = locality_rings(&weights, h, w, q, 4).unwrap();
        assert_eq!(hist.ring_sums[0], 1.0);
        for &s in &hist.ring_sums[1..] {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn ring_sums_conserve_row_mass() {
        let mut rng = SeededRng::new(2);
        let hw = 36;
        let mut weights = Tensor::zeros(vec![hw, hw]);
        for i in 0..hw {
            for j in 0..hw {
                weights.set2(i, j, rng.uniform_f32());
            }
        }
        for q in [0, 7, 35] {
            let hist = locality_rings(&weights, 6, 6, q, 5).unwrap();
            let row_total: f64 = weights.row(q).iter().map(|&v| v as f64).sum();
            assert!((hist.total() - row_total).abs() < 1e-6);
        }
    }

    #[test]
    fn binning_matches_brute_force_on_center_query() {
        // uniform attention over an 8x8 grid with 4 rings from the center
        let hw = 64;
        let weights = Tensor::matrix(hw, hw, vec![1.0 / hw as f32; hw * hw]).unwrap();
        let q = 8 * 4 + 4;
        let hist = locality_rings(&weights, 8, 8, q, 4).unwrap();

        // oracle: count tokens per ring with an explicit scan
        let (qr, qc) = (4f64, 4f64);
        let max_r = hist.ring_radii[4];
        let mut counts = [0usize; 4];
        for r in 0..8 {
            for c in 0..8 {
                let d = ((r as f64 - qr).powi(2) + (c as f64 - qc).powi(2)).sqrt();
                let mut ring = 3;
                for k in 0..4 {
                    let lo = max_r * (k as f64 / 4.0).sqrt();
                    let hi = max_r * ((k + 1) as f64 / 4.0).sqrt();
                    if d >= lo && d < hi {
                        ring = k;
                        break;
                    }
                }
                counts[ring] += 1;
            }
        }
        for k in 0..4 {
            let expect = counts[k] as f64 / hw as f64;
            assert!(
                (hist.ring_sums[k] - expect).abs() < 1e-6,
                "ring {k}: {} vs {expect}",
                hist.ring_sums[k]
            );
        }
    }

    #[test]
    fn merging_adjacent_rings_refines_consistently() {
        let mut rng = SeededRng::new(3);
        let hw = 64;
        let mut weights = Tensor::zeros(vec![hw, hw]);
        for j in 0..hw {
            weights.set2(10, j, rng.uniform_f32());
        }
        let k = 5;
        let coarse = locality_rings(&weights, 8, 8, 10, k).unwrap();
        let fine = locality_rings(&weights, 8, 8, 10, 2 * k).unwrap();
        for i in 0..k {
            let merged = fine.ring_sums[2 * i] + fine.ring_sums[2 * i + 1];
            assert!(
                (coarse.ring_sums[i] - merged).abs() < 1e-9,
                "ring {i}: {} vs {merged}",
                coarse.ring_sums[i]
            );
        }
    }

    #[test]
    fn query_out_of_range_rejected() {
        let weights = Tensor::zeros(vec![16, 16]);
        assert!(locality_rings(&weights, 4, 4, 16, 3).is_err());
        assert!(locality_rings(&weights, 4, 4, 0, 0).is_err());
    }

    #[test]
    fn accuracy_curve_trivial_cases() {
        let mask = ForegroundMask::from_bits(2, 2, vec![1, 0, 0, 1]).unwrap();
        let gt = MatchResult::identity(4);
        let extractions = vec![
            StepExtraction {
                step: 1,
                match_result: gt.clone(),
                frame_mask: mask.clone(),
            },
            StepExtraction {
                step: 2,
                match_result: gt.clone(),
                frame_mask: mask.clone(),
            },
        ];
        let rows = accuracy_curve(&extractions, &gt, &mask, 10, 2, 2).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!(r.mse, 0.0);
            assert_eq!(r.iou, 1.0);
        }
        let csv = accuracy_table_csv(&rows);
        assert!(csv.starts_with("step,mse,iou\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn accuracy_curve_rejects_out_of_range_step() {
        let mask = ForegroundMask::all_ones(2, 2);
        let gt = MatchResult::identity(4);
        let extractions = vec![StepExtraction {
            step: 11,
            match_result: gt.clone(),
            frame_mask: mask.clone(),
        }];
        assert!(accuracy_curve(&extractions, &gt, &mask, 10, 2, 2).is_err());
    }
}
