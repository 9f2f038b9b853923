//! Spectral front-end: log mel filterbank energies (MFB), MFCCs and spectrum
//! masking.
//!
//! Pipeline for both feature kinds: pre-emphasis over the whole signal,
//! framing with a Hamming window, power spectrum on an FFT of the next power
//! of two, triangular mel filters, natural log with an energy floor. MFCCs
//! add an orthonormal DCT-II over the log-mel row.

mod io;
mod mask;
mod mel;

use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::error::{Error, Result};

pub use io::{read_features, read_wav, write_features, write_wav, FeatureFormat};
pub use mask::{mask_spectrum, spectrum_mask, SpectrumMask};
pub use mel::{dct_ii_orthonormal, hz_to_mel, mel_center_frequencies, mel_filterbank, mel_to_hz};

/// Energy floor applied before the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// A mono PCM signal with amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::arg("sample_rate", "must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean-square amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub frame_len_ms: f64,
    pub frame_hop_ms: f64,
    pub n_mel: usize,
    pub n_ceps: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub preemph: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::mfb()
    }
}

impl FeatureConfig {
    /// 64 log mel energies over 0-8000 Hz.
    pub fn mfb() -> Self {
        Self {
            frame_len_ms: 25.0,
            frame_hop_ms: 10.0,
            n_mel: 64,
            n_ceps: 30,
            fmin: 0.0,
            fmax: 8000.0,
            preemph: 0.97,
        }
    }

    /// 30 cepstra from 30 mel bands over 20-7600 Hz.
    pub fn mfcc() -> Self {
        Self {
            n_mel: 30,
            n_ceps: 30,
            fmin: 20.0,
            fmax: 7600.0,
            ..Self::mfb()
        }
    }

    pub fn frame_len_samples(&self, sample_rate: u32) -> usize {
        (self.frame_len_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_hop_samples(&self, sample_rate: u32) -> usize {
        (self.frame_hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn fft_size(&self, sample_rate: u32) -> usize {
        self.frame_len_samples(sample_rate).next_power_of_two()
    }

    /// Number of frames produced for a signal of `n_samples`, if any.
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> Option<usize> {
        let len = self.frame_len_samples(sample_rate);
        let hop = self.frame_hop_samples(sample_rate);
        if n_samples < len || hop == 0 {
            return None;
        }
        Some(1 + (n_samples - len) / hop)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let len = self.frame_len_samples(sample_rate);
        let hop = self.frame_hop_samples(sample_rate);
        if hop == 0 || hop > len {
            return Err(Error::InvalidConfig(format!(
                "frame hop must satisfy 0 < hop <= frame length (hop {hop}, length {len} samples)"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return Err(Error::InvalidConfig(format!(
                "band limits must satisfy 0 <= fmin < fmax (got {} .. {})",
                self.fmin, self.fmax
            )));
        }
        if self.fmax > nyquist {
            return Err(Error::InvalidConfig(format!(
                "fmax {} exceeds Nyquist frequency {nyquist}",
                self.fmax
            )));
        }
        if self.n_mel == 0 {
            return Err(Error::InvalidConfig("n_mel must be positive".into()));
        }
        if self.n_ceps > self.n_mel {
            return Err(Error::InvalidConfig(format!(
                "n_ceps {} exceeds n_mel {}",
                self.n_ceps, self.n_mel
            )));
        }
        if !(0.0..1.0).contains(&self.preemph) {
            return Err(Error::InvalidConfig(format!(
                "pre-emphasis coefficient {} outside [0, 1)",
                self.preemph
            )));
        }
        Ok(())
    }
}

/// One utterance's features, `n_frames x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub hop_ms: f64,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, hop_ms: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature matrix contains non-finite values".into()));
        }
        Ok(Self { values, hop_ms })
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Reusable extractor holding the window, filterbank and FFT plan for one
/// configuration and sample rate.
pub struct MelExtractor {
    cfg: FeatureConfig,
    sample_rate: u32,
    frame_len: usize,
    hop: usize,
    fft_size: usize,
    window: Vec<f64>,
    filters: DMatrix<f64>,
    dct: Option<DMatrix<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let frame_len = cfg.frame_len_samples(sample_rate);
        let hop = cfg.frame_hop_samples(sample_rate);
        let fft_size = cfg.fft_size(sample_rate);
        let window = hamming(frame_len);
        let filters = mel_filterbank(cfg.n_mel, fft_size, sample_rate, cfg.fmin, cfg.fmax);
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Self {
            cfg,
            sample_rate,
            frame_len,
            hop,
            fft_size,
            window,
            filters,
            dct: None,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Log mel filterbank energies, `n_frames x n_mel`.
    pub fn log_mel(&self, wav: &Waveform) -> Result<DMatrix<f64>> {
        if wav.sample_rate != self.sample_rate {
            return Err(Error::arg(
                "sample_rate",
                format!(
                    "extractor built for {} Hz, waveform is {} Hz",
                    self.sample_rate, wav.sample_rate
                ),
            ));
        }
        let n_frames = self
            .cfg
            .n_frames(wav.len(), wav.sample_rate)
            .ok_or(Error::SignalTooShort {
                samples: wav.len(),
                required: self.frame_len,
            })?;

        let emphasized = pre_emphasis(&wav.samples, self.cfg.preemph);
        let n_bins = self.fft_size / 2 + 1;
        let mut out = DMatrix::zeros(n_frames, self.cfg.n_mel);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        let mut power = vec![0.0; n_bins];

        for t in 0..n_frames {
            let start = t * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < self.frame_len {
                    emphasized[start + i] * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..self.cfg.n_mel {
                let mut e = 0.0;
                for (k, p) in power.iter().enumerate() {
                    e += self.filters[(m, k)] * p;
                }
                out[(t, m)] = e.max(LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }

    pub fn mfb(&self, wav: &Waveform) -> Result<FeatureMatrix> {
        FeatureMatrix::new(self.log_mel(wav)?, self.cfg.frame_hop_ms)
    }

    pub fn mfcc(&mut self, wav: &Waveform) -> Result<FeatureMatrix> {
        let log_mel = self.log_mel(wav)?;
        let (n_mel, n_ceps) = (self.cfg.n_mel, self.cfg.n_ceps);
        let dct = self
            .dct
            .get_or_insert_with(|| mel::dct_matrix(n_ceps, n_mel));
        FeatureMatrix::new(log_mel * dct.transpose(), self.cfg.frame_hop_ms)
    }
}

pub fn extract_mfb(wav: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    MelExtractor::new(cfg.clone(), wav.sample_rate)?.mfb(wav)
}

pub fn extract_mfcc(wav: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    MelExtractor::new(cfg.clone(), wav.sample_rate)?.mfcc(wav)
}

/// Per-utterance mean normalization: subtracts each dimension's mean over
/// frames.
pub fn cmn(feat: &FeatureMatrix) -> FeatureMatrix {
    let mut values = feat.values.clone();
    let n = values.nrows() as f64;
    for mut col in values.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    FeatureMatrix {
        values,
        hop_ms: feat.hop_ms,
    }
}

fn pre_emphasis(x: &[f64], coef: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for &s in x {
        y.push(s - coef * prev);
        prev = s;
    }
    y
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, secs: f64) -> Waveform {
        let n = (16000.0 * secs) as usize;
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(samples, 16000).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames_of_64() {
        let f = extract_mfb(&tone(440.0, 1.0), &FeatureConfig::mfb()).unwrap();
        assert_eq!((f.n_frames(), f.dim()), (98, 64));
    }

    #[test]
    fn one_second_mfcc_is_98_by_30() {
        let cfg = FeatureConfig::mfcc();
        assert_eq!((cfg.fmin, cfg.fmax), (20.0, 7600.0));
        let f = extract_mfcc(&tone(440.0, 1.0), &cfg).unwrap();
        assert_eq!((f.n_frames(), f.dim()), (98, 30));
    }

    #[test]
    fn cmn_zeroes_column_means() {
        let values = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 2.0, 20.0, 6.0, 0.0]);
        let out = cmn(&FeatureMatrix::new(values, 10.0).unwrap());
        assert_eq!(out.values.as_slice(), &[-2.0, -1.0, 3.0, 0.0, 10.0, -10.0]);
    }

    #[test]
    fn zero_signal_hits_log_floor_everywhere() {
        let wav = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let f = extract_mfb(&wav, &FeatureConfig::mfb()).unwrap();
        assert!(f.values.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn tone_peaks_at_nearest_mel_band() {
        let cfg = FeatureConfig::mfb();
        let f = extract_mfb(&tone(1000.0, 0.5), &cfg).unwrap();
        // Independent oracle: centers straight from the mel-scale formula.
        let lo = 2595.0 * (1.0 + cfg.fmin / 700.0).log10();
        let hi = 2595.0 * (1.0 + cfg.fmax / 700.0).log10();
        let centers: Vec<f64> = (1..=cfg.n_mel)
            .map(|i| {
                let m = lo + (hi - lo) * i as f64 / (cfg.n_mel + 1) as f64;
                700.0 * (10f64.powf(m / 2595.0) - 1.0)
            })
            .collect();
        let expected = (0..cfg.n_mel)
            .min_by(|&a, &b| {
                (centers[a] - 1000.0)
                    .abs()
                    .partial_cmp(&(centers[b] - 1000.0).abs())
                    .unwrap()
            })
            .unwrap();
        for t in 0..f.n_frames() {
            let row = f.values.row(t);
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn constant_log_mel_row_has_only_c0() {
        let row = vec![-3.7; 30];
        let c = dct_ii_orthonormal(&row, 30);
        assert!((c[0] - (-3.7 * 30f64.sqrt())).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let wav = Waveform::new(vec![0.1; 399], 16000).unwrap();
        assert!(matches!(
            extract_mfb(&wav, &FeatureConfig::mfb()),
            Err(Error::SignalTooShort { samples: 399, required: 400 })
        ));
    }

    #[test]
    fn fmax_above_nyquist_is_rejected() {
        let cfg = FeatureConfig {
            fmax: 8001.0,
            ..FeatureConfig::mfb()
        };
        assert!(matches!(
            extract_mfb(&tone(100.0, 0.1), &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn more_ceps_than_mels_is_rejected() {
        let cfg = FeatureConfig {
            n_ceps: 31,
            ..FeatureConfig::mfcc()
        };
        assert!(extract_mfcc(&tone(100.0, 0.1), &cfg).is_err());
    }
}
