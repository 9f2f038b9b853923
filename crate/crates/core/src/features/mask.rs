//! Spectrum masking: zero contiguous time blocks and frequency bands until a
//! randomly drawn fraction of the cells is covered.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Which cells of an `n_frames x dim` matrix are zeroed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpectrumMask {
    n_frames: usize,
    dim: usize,
    cells: Vec<bool>,
}

impl SpectrumMask {
    pub fn is_masked(&self, frame: usize, bin: usize) -> bool {
        self.cells[frame * self.dim + bin]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Row-major indices of masked cells.
    pub fn indices(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect()
    }

    pub fn apply(&self, feat: &FeatureMatrix) -> Result<FeatureMatrix> {
        if feat.n_frames() != self.n_frames || feat.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "spectrum mask",
                expected: self.n_frames * self.dim,
                actual: feat.n_frames() * feat.dim(),
            });
        }
        let mut out = feat.clone();
        for t in 0..self.n_frames {
            for d in 0..self.dim {
                if self.is_masked(t, d) {
                    out.values[(t, d)] = 0.0;
                }
            }
        }
        Ok(out)
    }
}

/// Draws a mask covering `round(f * n_frames * dim)` cells exactly, with `f`
/// uniform in `[min_frac, max_frac]`.
///
/// Whole frames and whole bands are added first; when no further whole line
/// fits in the remaining budget, the last cells come from one contiguous bin
/// span inside a single unmasked frame.
pub fn spectrum_mask(
    n_frames: usize,
    dim: usize,
    min_frac: f64,
    max_frac: f64,
    seed: u64,
) -> Result<SpectrumMask> {
    if !(0.0 <= min_frac && min_frac <= max_frac && max_frac < 1.0) {
        return Err(Error::arg(
            "mask fraction",
            format!("need 0 <= min <= max < 1, got [{min_frac}, {max_frac}]"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frac = rng.random_range(min_frac..=max_frac);
    let total = n_frames * dim;
    let target = ((frac * total as f64).round() as usize).min(total);

    let mut frames = vec![false; n_frames];
    let mut bands = vec![false; dim];
    let mut partial: Vec<(usize, usize)> = Vec::new();
    let (mut n_masked_frames, mut n_masked_bands) = (0usize, 0usize);
    let mut masked = 0usize;

    while masked < target {
        let remaining = target - masked;
        // Every still-unmasked frame adds exactly this many new cells, and
        // likewise for bands.
        let frame_gain = dim - n_masked_bands;
        let band_gain = n_frames - n_masked_frames;
        let frame_ok = n_masked_frames < n_frames && frame_gain > 0 && frame_gain <= remaining;
        let band_ok = n_masked_bands < dim && band_gain > 0 && band_gain <= remaining;

        if !frame_ok && !band_ok {
            let free_frames: Vec<usize> = (0..n_frames).filter(|&t| !frames[t]).collect();
            let t = free_frames[rng.random_range(0..free_frames.len())];
            let free_bins: Vec<usize> = (0..dim).filter(|&d| !bands[d]).collect();
            let j = rng.random_range(0..=free_bins.len() - remaining);
            for &d in &free_bins[j..j + remaining] {
                partial.push((t, d));
            }
            break;
        }

        let use_frames = if frame_ok && band_ok {
            rng.random_bool(0.5)
        } else {
            frame_ok
        };
        if use_frames {
            let cap = (n_frames / 8).max(1);
            let widest = (remaining / frame_gain).min(cap).max(1);
            let width = rng.random_range(1..=widest);
            let start = rng.random_range(0..=n_frames - width);
            for flag in &mut frames[start..start + width] {
                if !*flag {
                    *flag = true;
                    n_masked_frames += 1;
                    masked += frame_gain;
                }
            }
        } else {
            let cap = (dim / 8).max(1);
            let widest = (remaining / band_gain).min(cap).max(1);
            let width = rng.random_range(1..=widest);
            let start = rng.random_range(0..=dim - width);
            for flag in &mut bands[start..start + width] {
                if !*flag {
                    *flag = true;
                    n_masked_bands += 1;
                    masked += band_gain;
                }
            }
        }
    }

    let mut cells = vec![false; total];
    for t in 0..n_frames {
        for d in 0..dim {
            cells[t * dim + d] = frames[t] || bands[d];
        }
    }
    for (t, d) in partial {
        cells[t * dim + d] = true;
    }
    Ok(SpectrumMask {
        n_frames,
        dim,
        cells,
    })
}

pub fn mask_spectrum(
    feat: &FeatureMatrix,
    min_frac: f64,
    max_frac: f64,
    seed: u64,
) -> Result<FeatureMatrix> {
    spectrum_mask(feat.n_frames(), feat.dim(), min_frac, max_frac, seed)?.apply(feat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn ramp(frames: usize, dim: usize) -> FeatureMatrix {
        FeatureMatrix::new(
            DMatrix::from_fn(frames, dim, |t, d| 1.0 + (t * dim + d) as f64),
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let f = ramp(12, 5);
        assert_eq!(mask_spectrum(&f, 0.0, 0.0, 7).unwrap(), f);
    }

    #[test]
    fn five_to_ten_percent_of_100x64() {
        for seed in 0..50 {
            let m = spectrum_mask(100, 64, 0.05, 0.10, seed).unwrap();
            let n = m.count();
            assert!((320..=640).contains(&n), "seed {seed}: {n}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_recorded_mask() {
        let m = spectrum_mask(10, 8, 0.2, 0.3, 2024).unwrap();
        let again = spectrum_mask(10, 8, 0.2, 0.3, 2024).unwrap();
        assert_eq!(m, again);
        assert_eq!(m.indices(), RECORDED_10X8_SEED_2024);
    }

    // Recorded from a reference run of this implementation.
    const RECORDED_10X8_SEED_2024: &[usize] = &[
        5, 13, 21, 29, 37, 45, 53, 61, 69, 72, 73, 74, 75, 76, 77, 78, 79,
    ];

    #[test]
    fn rejects_bad_fractions() {
        assert!(spectrum_mask(4, 4, 0.2, 0.1, 0).is_err());
        assert!(spectrum_mask(4, 4, -0.1, 0.1, 0).is_err());
        assert!(spectrum_mask(4, 4, 0.1, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn masking_only_touches_masked_cells(
            frames in 1usize..40, dim in 1usize..24,
            lo in 0.0f64..0.5, span in 0.0f64..0.45, seed in any::<u64>()
        ) {
            let f = ramp(frames, dim);
            let m = spectrum_mask(frames, dim, lo, lo + span, seed).unwrap();
            let out = m.apply(&f).unwrap();
            let total = (frames * dim) as f64;
            let lo_cells = (lo * total).round() as usize;
            let hi_cells = ((lo + span) * total).round() as usize;
            prop_assert!(m.count() >= lo_cells && m.count() <= hi_cells);
            for t in 0..frames {
                for d in 0..dim {
                    if m.is_masked(t, d) {
                        prop_assert_eq!(out.values[(t, d)], 0.0);
                    } else {
                        prop_assert_eq!(out.values[(t, d)], f.values[(t, d)]);
                    }
                }
            }
        }
    }
}
