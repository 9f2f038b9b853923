use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::features::Waveform;

/// Zero crossings of the interpolation kernel on each side of the center.
const HALF_TAPS: f64 = 8.0;
const KAISER_BETA: f64 = 8.0;

/// Plays `wav` `factor` times faster at the same nominal sample rate.
///
/// The output has `round(len / factor)` samples and every frequency is scaled
/// by `factor`. Samples are produced by windowed-sinc interpolation; when
/// speeding up, the kernel cutoff drops to `1 / factor` of Nyquist so the
/// compressed spectrum does not alias.
pub fn speed_perturb(wav: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::arg("factor", format!("speed factor must be > 0, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(wav.clone());
    }
    let out_len = (wav.len() as f64 / factor).round() as usize;
    if out_len == 0 {
        return Err(Error::SignalTooShort {
            samples: wav.len(),
            required: factor.ceil() as usize,
        });
    }

    let cutoff = (1.0 / factor).min(1.0);
    let half_width = HALF_TAPS / cutoff;
    let norm = bessel_i0(KAISER_BETA);
    let x = &wav.samples;
    let n = x.len() as isize;

    let samples = (0..out_len)
        .map(|j| {
            let t = j as f64 * factor;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let mut acc = 0.0;
            for k in lo.max(0)..=hi.min(n - 1) {
                let d = t - k as f64;
                let u = d / half_width;
                let window = bessel_i0(KAISER_BETA * (1.0 - u * u).max(0.0).sqrt()) / norm;
                acc += x[k as usize] * cutoff * sinc(cutoff * d) * window;
            }
            acc
        })
        .collect();
    Waveform::new(samples, wav.sample_rate)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn sine(freq: f64, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    fn peak_hz(wav: &Waveform) -> (f64, f64) {
        let n = wav.len();
        let mut buf: Vec<Complex<f64>> = wav.samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let k = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap();
        let bin = 16000.0 / n as f64;
        (k as f64 * bin, bin)
    }

    #[test]
    fn unit_factor_is_identity() {
        let w = sine(123.0, 500);
        assert_eq!(speed_perturb(&w, 1.0).unwrap(), w);
    }

    #[test]
    fn speeding_up_scales_frequency() {
        let n = 16000;
        let w = sine(100.0, n);
        let out = speed_perturb(&w, 1.1).unwrap();
        assert_eq!(out.len(), (n as f64 / 1.1).round() as usize);
        let (hz, bin) = peak_hz(&out);
        assert!((hz - 110.0).abs() <= bin, "peak {hz} Hz, bin {bin}");
    }

    #[test]
    fn slowing_down_scales_frequency() {
        let w = sine(400.0, 8000);
        let out = speed_perturb(&w, 0.8).unwrap();
        assert_eq!(out.len(), 10000);
        let (hz, bin) = peak_hz(&out);
        assert!((hz - 320.0).abs() <= bin);
    }

    #[test]
    fn round_trip_length_within_one() {
        for n in [100usize, 997, 16000] {
            for f in [0.8, 0.9, 1.1] {
                let w = sine(50.0, n);
                let back = speed_perturb(&speed_perturb(&w, f).unwrap(), 1.0 / f).unwrap();
                assert!(back.len().abs_diff(n) <= 1, "n={n} f={f} -> {}", back.len());
            }
        }
    }

    #[test]
    fn interpolation_is_accurate_in_band() {
        let w = sine(200.0, 4000);
        let out = speed_perturb(&w, 0.9).unwrap();
        // Away from the edges the output is the same sine at 180 Hz.
        for j in 200..out.len() - 200 {
            let expected = (2.0 * PI * 200.0 * j as f64 * 0.9 / 16000.0).sin();
            assert!((out.samples[j] - expected).abs() < 1e-3, "sample {j}");
        }
    }

    #[test]
    fn rejects_nonpositive_factor() {
        let w = sine(100.0, 100);
        assert!(speed_perturb(&w, 0.0).is_err());
        assert!(speed_perturb(&w, -1.0).is_err());
        let tiny = Waveform::new(vec![0.1], 16000).unwrap();
        assert!(speed_perturb(&tiny, 3.0).is_err());
    }

    #[test]
    fn bessel_matches_known_value() {
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0(1.0) - 1.2660658777520082).abs() < 1e-15);
    }
}
