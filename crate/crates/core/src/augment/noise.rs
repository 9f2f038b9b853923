use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::features::Waveform;

/// Mixes `noise` into `wav` at `snr_db` and returns the mixture together with
/// the gain applied to the noise.
///
/// The noise is repeated cyclically from a seeded random offset to cover the
/// signal. `f64::INFINITY` means "no noise" and returns the input unchanged.
pub fn add_noise_with_gain(
    wav: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    seed: u64,
) -> Result<(Waveform, f64)> {
    if snr_db == f64::INFINITY {
        return Ok((wav.clone(), 0.0));
    }
    if !snr_db.is_finite() {
        return Err(Error::arg("snr_db", format!("{snr_db} is not a usable SNR")));
    }
    if noise.is_empty() {
        return Err(Error::arg("noise", "noise waveform is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0..noise.len());
    let segment: Vec<f64> = (0..wav.len())
        .map(|i| noise.samples[(offset + i) % noise.len()])
        .collect();

    let p_signal = wav.power();
    let p_noise = segment.iter().map(|s| s * s).sum::<f64>() / segment.len().max(1) as f64;
    if p_signal == 0.0 || p_noise == 0.0 {
        return Err(Error::Degenerate(
            "zero-power signal or noise, SNR undefined".into(),
        ));
    }
    let gain = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = wav
        .samples
        .iter()
        .zip(&segment)
        .map(|(s, n)| s + gain * n)
        .collect();
    Ok((Waveform::new(samples, wav.sample_rate)?, gain))
}

pub fn add_noise(wav: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    add_noise_with_gain(wav, noise, snr_db, seed).map(|(w, _)| w)
}

/// Convolves with a room impulse response, keeps the first `len(wav)`
/// samples and rescales to the input's peak amplitude.
pub fn reverberate(wav: &Waveform, rir: &[f64]) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(Error::arg("rir", "impulse response is empty"));
    }
    if rir.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("impulse response has non-finite taps".into()));
    }
    if rir.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("impulse response is all zeros".into()));
    }
    let mut out = if rir.len() <= 64 {
        convolve_direct(&wav.samples, rir)
    } else {
        convolve_fft(&wav.samples, rir)
    };
    out.truncate(wav.len());

    let in_peak = wav.peak();
    let out_peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if out_peak > 0.0 {
        let scale = in_peak / out_peak;
        for s in &mut out {
            *s *= scale;
        }
    }
    Waveform::new(out, wav.sample_rate)
}

fn convolve_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mut y = vec![0.0; x.len() + h.len() - 1];
    for (i, &xv) in x.iter().enumerate() {
        for (k, &hv) in h.iter().enumerate() {
            y[i + k] += xv * hv;
        }
    }
    y
}

fn convolve_fft(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&s| Complex::new(s, 0.0)).collect();
        b.resize(n, Complex::new(0.0, 0.0));
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..full].iter().map(|c| c.re / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Waveform::new(s, 16000).unwrap()
    }

    fn unit_power(mut w: Waveform) -> Waveform {
        let p = w.power().sqrt();
        w.samples.iter_mut().for_each(|s| *s /= p);
        w
    }

    #[test]
    fn infinite_snr_is_identity() {
        let w = random(100, 1);
        assert_eq!(add_noise(&w, &random(10, 2), f64::INFINITY, 3).unwrap(), w);
    }

    #[test]
    fn unit_powers_at_zero_db_give_unit_gain() {
        let w = unit_power(random(1000, 1));
        let n = unit_power(random(1000, 2));
        let (_, g) = add_noise_with_gain(&w, &n, 0.0, 9).unwrap();
        assert!((g - 1.0).abs() < 1e-9, "gain {g}");
    }

    #[test]
    fn achieved_snr_matches_request() {
        let w = random(4000, 1);
        let noise = random(1500, 2);
        for snr in [-5.0, 0.0, 5.0, 20.0] {
            let mixed = add_noise(&w, &noise, snr, 4).unwrap();
            let residual: Vec<f64> = mixed.samples.iter().zip(&w.samples).map(|(m, s)| m - s).collect();
            let p_res = residual.iter().map(|r| r * r).sum::<f64>() / residual.len() as f64;
            let measured = 10.0 * (w.power() / p_res).log10();
            assert!((measured - snr).abs() < 0.01, "requested {snr}, got {measured}");
        }
    }

    #[test]
    fn silent_inputs_are_rejected() {
        let silent = Waveform::new(vec![0.0; 10], 16000).unwrap();
        assert!(add_noise(&silent, &random(10, 1), 5.0, 0).is_err());
        assert!(add_noise(&random(10, 1), &silent, 5.0, 0).is_err());
    }

    #[test]
    fn delta_rir_is_identity() {
        let w = random(50, 3);
        assert_eq!(reverberate(&w, &[1.0]).unwrap(), w);
    }

    #[test]
    fn shifted_delta_delays_by_one() {
        let w = Waveform::new(vec![0.2, -1.0, 0.5, 0.3, 0.1], 16000).unwrap();
        let out = reverberate(&w, &[0.0, 1.0]).unwrap();
        assert_eq!(out.samples, vec![0.0, 0.2, -1.0, 0.5, 0.3]);
    }

    #[test]
    fn matches_direct_convolution_oracle() {
        let x = random(8, 5).samples;
        let h = [0.7, -0.2, 0.1];
        let mut y = vec![0.0; 8];
        for n in 0..8 {
            for k in 0..3 {
                if n >= k {
                    y[n] += h[k] * x[n - k];
                }
            }
        }
        let in_peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let out_peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let out = reverberate(&Waveform::new(x, 16000).unwrap(), &h).unwrap();
        for (a, b) in out.samples.iter().zip(&y) {
            assert!((a - b * in_peak / out_peak).abs() < 1e-9);
        }
    }

    #[test]
    fn fft_path_agrees_with_direct_path() {
        let x = random(300, 6).samples;
        let h = random(100, 7).samples;
        let a = convolve_direct(&x, &h);
        let b = convolve_fft(&x, &h);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_rir_is_rejected() {
        assert!(reverberate(&random(5, 1), &[0.0, 0.0]).is_err());
        assert!(reverberate(&random(5, 1), &[]).is_err());
    }
}
