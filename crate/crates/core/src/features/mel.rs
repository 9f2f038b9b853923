use nalgebra::DMatrix;

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Edge points of the triangular filters: `n_mel + 2` values equally spaced
/// on the mel scale between `fmin` and `fmax`.
fn mel_edges(n_mel: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let lo = hz_to_mel(fmin);
    let hi = hz_to_mel(fmax);
    (0..n_mel + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (n_mel + 1) as f64)
        .collect()
}

/// Center frequency in Hz of every mel band.
pub fn mel_center_frequencies(n_mel: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    mel_edges(n_mel, fmin, fmax)[1..=n_mel]
        .iter()
        .map(|&m| mel_to_hz(m))
        .collect()
}

/// Triangular filters, `n_mel x (fft_size / 2 + 1)`, peak weight 1, laid out
/// linearly on the mel axis.
pub fn mel_filterbank(
    n_mel: usize,
    fft_size: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> DMatrix<f64> {
    let n_bins = fft_size / 2 + 1;
    let edges = mel_edges(n_mel, fmin, fmax);
    let mut bank = DMatrix::zeros(n_mel, n_bins);
    for k in 0..n_bins {
        let mel = hz_to_mel(k as f64 * sample_rate as f64 / fft_size as f64);
        for m in 0..n_mel {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if mel > left && mel <= center {
                (mel - left) / (center - left)
            } else if mel > center && mel < right {
                (right - mel) / (right - center)
            } else {
                0.0
            };
            bank[(m, k)] = w;
        }
    }
    bank
}

/// Orthonormal DCT-II basis, `n_out x n_in`.
pub(crate) fn dct_matrix(n_out: usize, n_in: usize) -> DMatrix<f64> {
    let n = n_in as f64;
    DMatrix::from_fn(n_out, n_in, |k, i| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos()
    })
}

/// First `n_out` orthonormal DCT-II coefficients of `x`.
pub fn dct_ii_orthonormal(x: &[f64], n_out: usize) -> Vec<f64> {
    let basis = dct_matrix(n_out, x.len());
    (0..n_out)
        .map(|k| basis.row(k).iter().zip(x).map(|(b, v)| b * v).sum())
        .collect()
}
