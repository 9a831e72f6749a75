//! Foreground mask extraction from image-to-text attention, plus the
//! morphological cleanup applied to raw masks.
//!
//! A grid cell counts as foreground when its attention to the foreground
//! prompt words, averaged over layers/heads and over the words of each
//! segment, strictly exceeds its attention to the background words. The
//! softmax runs over exactly the `l_bg + l_fg` active prompt keys so padding
//! and image keys cannot leak in. Averages accumulate in f64 so near-ties
//! resolve the same way everywhere.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary foreground mask over the image-token grid, with its index lists
/// kept in sync with the bits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    h: usize,
    w: usize,
    bits: Vec<u8>,
    fg_indices: Vec<usize>,
    bg_indices: Vec<usize>,
}

impl ForegroundMask {
    pub fn from_bits(h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::shape(
                "mask",
                format!("{} bits for {h}x{w} grid", bits.len()),
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::input("mask", "bits must be 0 or 1"));
        }
        let fg_indices: Vec<usize> = (0..bits.len()).filter(|&i| bits[i] == 1).collect();
        let bg_indices: Vec<usize> = (0..bits.len()).filter(|&i| bits[i] == 0).collect();
        Ok(ForegroundMask {
            h,
            w,
            bits,
            fg_indices,
            bg_indices,
        })
    }

    pub fn all_ones(h: usize, w: usize) -> Self {
        ForegroundMask::from_bits(h, w, vec![1; h * w]).expect("valid bits")
    }

    pub fn all_zeros(h: usize, w: usize) -> Self {
        ForegroundMask::from_bits(h, w, vec![0; h * w]).expect("valid bits")
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn fg_indices(&self) -> &[usize] {
        &self.fg_indices
    }

    pub fn bg_indices(&self) -> &[usize] {
        &self.bg_indices
    }

    pub fn fg_fraction(&self) -> f64 {
        self.fg_indices.len() as f64 / self.bits.len() as f64
    }

    pub fn is_subset_of(&self, other: &ForegroundMask) -> bool {
        self.bits
            .iter()
            .zip(&other.bits)
            .all(|(a, b)| *a == 0 || *b == 1)
    }
}

/// Derive the raw foreground mask from per-layer (or per-layer-per-head)
/// image-to-text attention logit slices, each `hw x >= l_bg + l_fg`.
/// Ties go to background.
pub fn extract_raw_mask(
    attn_logit_slices: &[Tensor],
    l_bg: usize,
    l_fg: usize,
    h: usize,
    w: usize,
) -> Result<ForegroundMask> {
    if attn_logit_slices.is_empty() {
        return Err(Error::input("extract-mask", "no attention slices"));
    }
    if l_bg == 0 || l_fg == 0 {
        return Err(Error::input(
            "extract-mask",
            format!("need l_bg >= 1 and l_fg >= 1, got {l_bg}/{l_fg}"),
        ));
    }
    let hw = h * w;
    let active = l_bg + l_fg;
    let mut bg_sum = vec![0.0f64; hw];
    let mut fg_sum = vec![0.0f64; hw];
    for slice in attn_logit_slices {
        let (rows, cols) = slice.dims2("extract-mask")?;
        if rows != hw {
            return Err(Error::shape(
                "extract-mask",
                format!("slice has {rows} image rows, grid wants {hw}"),
            ));
        }
        if cols < active {
            return Err(Error::input(
                "extract-mask",
                format!("l_bg + l_fg = {active} exceeds text keys {cols}"),
            ));
        }
        for i in 0..hw {
            let row = slice.row(i);
            // softmax over the active prompt keys only
            let mut max = f64::NEG_INFINITY;
            for &v in &row[..active] {
                max = max.max(v as f64);
            }
            let mut denom = 0.0f64;
            for &v in &row[..active] {
                denom += ((v as f64) - max).exp();
            }
            for (j, &v) in row[..active].iter().enumerate() {
                let p = ((v as f64) - max).exp() / denom;
                if j < l_bg {
                    bg_sum[i] += p;
                } else {
                    fg_sum[i] += p;
                }
            }
        }
    }
    let n = attn_logit_slices.len() as f64;
    let bits: Vec<u8> = (0..hw)
        .map(|i| {
            let bg_mean = bg_sum[i] / (n * l_bg as f64);
            let fg_mean = fg_sum[i] / (n * l_fg as f64);
            u8::from(fg_mean > bg_mean)
        })
        .collect();
    ForegroundMask::from_bits(h, w, bits)
}

fn erode(bits: &[u8], h: usize, w: usize, radius: isize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut keep = true;
            'window: for dr in -radius..=radius {
                for dc in -radius..=radius {
                    let (rr, cc) = (r + dr, c + dc);
                    // out of bounds counts as background
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        keep = false;
                        break 'window;
                    }
                    if bits[(rr * w as isize + cc) as usize] == 0 {
                        keep = false;
                        break 'window;
                    }
                }
            }
            out[(r * w as isize + c) as usize] = u8::from(keep);
        }
    }
    out
}

fn dilate(bits: &[u8], h: usize, w: usize, radius: isize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut hit = false;
            'window: for dr in -radius..=radius {
                for dc in -radius..=radius {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    if bits[(rr * w as isize + cc) as usize] == 1 {
                        hit = true;
                        break 'window;
                    }
                }
            }
            out[(r * w as isize + c) as usize] = u8::from(hit);
        }
    }
    out
}

/// Erosion with a full 3x3 structuring element followed by dilation with a
/// full 5x5 element. Out-of-bounds cells count as background for both.
pub fn morph_refine(mask: &ForegroundMask) -> ForegroundMask {
    let (h, w) = (mask.h, mask.w);
    let eroded = erode(&mask.bits, h, w, 1);
    let dilated = dilate(&eroded, h, w, 2);
    ForegroundMask::from_bits(h, w, dilated).expect("morphology preserves validity")
}

/// Intersection over union of two masks; two empty masks count as identical.
pub fn mask_iou(a: &ForegroundMask, b: &ForegroundMask) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::input(
            "mask-iou",
            format!("extent mismatch: {}x{} vs {}x{}", a.h, a.w, b.h, b.w),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(*x == 1 && *y == 1);
        union += usize::from(*x == 1 || *y == 1);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
