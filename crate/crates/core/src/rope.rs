//! 2D axial rotary position embedding.
//!
//! Channel pairs are rotated in place: the first half of the pairs by
//! `row * freq(c)`, the second half by `col * freq(c)`. Dot products between
//! rotated vectors then depend only on coordinate differences, which is the
//! property the rest of the pipeline relies on: keys can be stored without
//! position and re-encoded at any coordinate later.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Position of an image token on the latent grid, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCoord {
    pub row: usize,
    pub col: usize,
}

impl GridCoord {
    pub fn from_index(index: usize, grid_w: usize) -> Self {
        GridCoord {
            row: index / grid_w,
            col: index % grid_w,
        }
    }

    pub fn in_bounds(&self, grid_h: usize, grid_w: usize) -> bool {
        self.row < grid_h && self.col < grid_w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base_frequency: f32,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base_frequency: f32) -> Result<Self> {
        let cfg = RopeConfig {
            head_dim,
            base_frequency,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "rope head_dim must be a positive multiple of 4 (half the pairs per axis), got {}",
                self.head_dim
            )));
        }
        if !(self.base_frequency > 0.0) {
            return Err(Error::Config(format!(
                "rope base_frequency must be positive, got {}",
                self.base_frequency
            )));
        }
        Ok(())
    }

    /// Pairs rotated per axis.
    pub fn pairs_per_axis(&self) -> usize {
        self.head_dim / 4
    }

    /// Frequency of pair `c` within one axis half (standard inverse-power
    /// spacing over that half's dimension).
    pub fn pair_freq(&self, c: usize) -> f32 {
        let half_dim = (self.head_dim / 2) as f32;
        self.base_frequency.powf(-((2 * c) as f32) / half_dim)
    }
}

fn rotate_pair(x: &mut f32, y: &mut f32, angle: f32) {
    let (sin, cos) = angle.sin_cos();
    let (a, b) = (*x, *y);
    *x = a * cos - b * sin;
    *y = a * sin + b * cos;
}

/// Rotate one `head_dim`-wide slice in place for the given coordinate.
fn rotate_head_slice(slice: &mut [f32], coord: GridCoord, cfg: &RopeConfig) {
    let pairs = cfg.pairs_per_axis();
    let half = cfg.head_dim / 2;
    for c in 0..pairs {
        let freq = cfg.pair_freq(c);
        let row_angle = coord.row as f32 * freq;
        let (a, b) = (2 * c, 2 * c + 1);
        let (lo, hi) = slice.split_at_mut(b);
        rotate_pair(&mut lo[a], &mut hi[0], row_angle);
        let col_angle = coord.col as f32 * freq;
        let (a, b) = (half + 2 * c, half + 2 * c + 1);
        let (lo, hi) = slice.split_at_mut(b);
        rotate_pair(&mut lo[a], &mut hi[0], col_angle);
    }
}

/// Apply the rotary embedding to `n x head_dim` tokens at the given grid
/// coordinates. Norm-preserving per token.
pub fn rope2d_apply(tokens: &Tensor, coords: &[GridCoord], cfg: &RopeConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, d) = tokens.dims2("rope2d")?;
    if d != cfg.head_dim {
        return Err(Error::shape(
            "rope2d",
            format!("token dim {d} != head_dim {}", cfg.head_dim),
        ));
    }
    if coords.len() != n {
        return Err(Error::shape(
            "rope2d",
            format!("{} coords for {n} tokens", coords.len()),
        ));
    }
    let mut out = tokens.clone();
    for i in 0..n {
        rotate_head_slice(out.row_mut(i), coords[i], cfg);
    }
    Ok(out)
}

/// Apply the rotary embedding per head to `n x (n_heads * head_dim)` tokens.
pub fn rope2d_apply_heads(
    tokens: &Tensor,
    coords: &[GridCoord],
    n_heads: usize,
    cfg: &RopeConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let (n, total) = tokens.dims2("rope2d-heads")?;
    if total != n_heads * cfg.head_dim {
        return Err(Error::shape(
            "rope2d-heads",
            format!(
                "width {total} != n_heads {n_heads} * head_dim {}",
                cfg.head_dim
            ),
        ));
    }
    if coords.len() != n {
        return Err(Error::shape(
            "rope2d-heads",
            format!("{} coords for {n} tokens", coords.len()),
        ));
    }
    let mut out = tokens.clone();
    for i in 0..n {
        let row = out.row_mut(i);
        for h in 0..n_heads {
            rotate_head_slice(&mut row[h * cfg.head_dim..(h + 1) * cfg.head_dim], coords[i], cfg);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn cfg() -> RopeConfig {
        RopeConfig::new(32, 10000.0).unwrap()
    }

    fn random_tokens(rng: &mut SeededRng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, rng.normal_vec(n * d)).unwrap()
    }

    fn dot(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn origin_is_identity() {
        let mut rng = SeededRng::new(1);
        let t = random_tokens(&mut rng, 3, 32);
        let coords = vec![GridCoord { row: 0, col: 0 }; 3];
        let out = rope2d_apply(&t, &coords, &cfg()).unwrap();
        // angle 0 still runs through sin/cos, so compare values not bits
        assert!(out.max_abs_diff(&t) < 1e-7);
    }

    #[test]
    fn preserves_norms() {
        let mut rng = SeededRng::new(2);
        let t = random_tokens(&mut rng, 16, 32);
        let coords: Vec<GridCoord> = (0..16).map(|i| GridCoord::from_index(i, 4)).collect();
        let out = rope2d_apply(&t, &coords, &cfg()).unwrap();
        for i in 0..16 {
            let n_in: f32 = t.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            let n_out: f32 = out.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            let ratio = n_out / n_in;
            assert!((ratio - 1.0).abs() < 1e-6, "ratio {ratio}");
        }
    }

    #[test]
    fn relative_position_invariance() {
        let mut rng = SeededRng::new(3);
        let c = cfg();
        for _ in 0..100 {
            let q = random_tokens(&mut rng, 1, 32);
            let k = random_tokens(&mut rng, 1, 32);
            let p1 = GridCoord {
                row: rng.uniform_usize(8),
                col: rng.uniform_usize(8),
            };
            let p2 = GridCoord {
                row: rng.uniform_usize(8),
                col: rng.uniform_usize(8),
            };
            let dr = rng.uniform_usize(6);
            let dc = rng.uniform_usize(6);
            let shift = |p: GridCoord| GridCoord {
                row: p.row + dr,
                col: p.col + dc,
            };
            let lhs = dot(
                rope2d_apply(&q, &[p1], &c).unwrap().row(0),
                rope2d_apply(&k, &[p2], &c).unwrap().row(0),
            );
            let rhs = dot(
                rope2d_apply(&q, &[shift(p1)], &c).unwrap().row(0),
                rope2d_apply(&k, &[shift(p2)], &c).unwrap().row(0),
            );
            assert!((lhs - rhs).abs() < 1e-5, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn odd_pair_count_rejected() {
        assert!(RopeConfig::new(30, 10000.0).is_err());
        assert!(RopeConfig::new(0, 10000.0).is_err());
        assert!(RopeConfig::new(32, 0.0).is_err());
    }

    #[test]
    fn per_head_matches_single_head_slices() {
        let mut rng = SeededRng::new(4);
        let t = random_tokens(&mut rng, 5, 64);
        let coords: Vec<GridCoord> = (0..5).map(|i| GridCoord::from_index(i, 3)).collect();
        let c = cfg();
        let out = rope2d_apply_heads(&t, &coords, 2, &c).unwrap();
        for h in 0..2 {
            let part = t.slice_cols(h * 32, (h + 1) * 32);
            let expect = rope2d_apply(&part, &coords, &c).unwrap();
            let got = out.slice_cols(h * 32, (h + 1) * 32);
            assert!(got.bits_eq(&expect));
        }
    }
}
