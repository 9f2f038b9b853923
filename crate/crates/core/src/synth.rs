//! Synthetic "speakers": harmonic complexes shaped by a per-speaker formant
//! envelope, with per-utterance pitch and formant jitter plus background
//! noise. Cheap, but separable enough to exercise the whole pipeline.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::Waveform;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTemplate {
    pub spk_id: String,
    /// Mean fundamental frequency in Hz.
    pub f0: f64,
    /// `(center Hz, bandwidth Hz, linear gain)` per formant.
    pub formants: Vec<(f64, f64, f64)>,
    /// Spectral tilt in dB per octave above f0 (negative).
    pub tilt_db: f64,
}

impl SpeakerTemplate {
    /// A random speaker: a shared vowel-like formant pattern scaled by a
    /// vocal-tract factor, with small per-formant idiosyncrasies.
    pub fn random(spk_id: impl Into<String>, rng: &mut impl Rng) -> Self {
        const BASE: [(f64, f64); 4] = [(500.0, 1.0), (1500.0, 0.7), (2500.0, 0.5), (3500.0, 0.3)];
        let tract = rng.random_range(0.8..1.25);
        let formants = BASE
            .iter()
            .map(|&(c, g)| {
                (
                    c * tract * rng.random_range(0.97..1.03),
                    rng.random_range(110.0..160.0),
                    g * rng.random_range(0.9..1.1),
                )
            })
            .collect();
        Self {
            spk_id: spk_id.into(),
            f0: rng.random_range(85.0..260.0),
            formants,
            tilt_db: rng.random_range(-9.0..-3.0),
        }
    }

    /// Linear amplitude of a harmonic at `freq` Hz, with formant centers
    /// scaled by `shift`.
    pub fn envelope(&self, freq: f64, shift: f64) -> f64 {
        let resonance: f64 = self
            .formants
            .iter()
            .map(|&(c, bw, g)| {
                let z = (freq - c * shift) / bw;
                g * (-0.5 * z * z).exp()
            })
            .sum();
        let octaves = (freq / self.f0).max(1.0).log2();
        (0.05 + resonance) * 10f64.powf(self.tilt_db * octaves / 20.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// Utterance duration range in seconds.
    pub duration: (f64, f64),
    /// Background noise level relative to the voiced signal.
    pub snr_db: f64,
    /// Relative per-utterance pitch deviation (uniform, +-).
    pub f0_jitter: f64,
    /// Relative per-utterance formant deviation (uniform, +-).
    pub formant_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            duration: (0.8, 1.2),
            snr_db: 25.0,
            f0_jitter: 0.05,
            formant_jitter: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad duration range {lo}..{hi}")));
        }
        if self.sample_rate < 8000 {
            return Err(Error::InvalidConfig("sample rate must be >= 8000 Hz".into()));
        }
        if !(0.0..0.5).contains(&self.f0_jitter) || !(0.0..0.5).contains(&self.formant_jitter) {
            return Err(Error::InvalidConfig("jitter must be in [0, 0.5)".into()));
        }
        if self.snr_db.is_nan() {
            return Err(Error::InvalidConfig("snr must be a number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub utt_id: String,
    pub spk_id: String,
    pub wav: Waveform,
}

/// One utterance of `speaker`, fully determined by `seed`.
pub fn synth_utterance(speaker: &SpeakerTemplate, cfg: &SynthConfig, seed: u64) -> Result<Waveform> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = cfg.sample_rate as f64;
    let (lo, hi) = cfg.duration;
    let dur = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let n = (dur * sr).round() as usize;

    let f0 = speaker.f0 * (1.0 + rng.random_range(-1.0..=1.0) * cfg.f0_jitter);
    let shift = 1.0 + rng.random_range(-1.0..=1.0) * cfg.formant_jitter;
    let vib_rate = rng.random_range(3.0..6.0);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let syl_rate = rng.random_range(2.0..4.0);
    let n_harm = ((0.45 * sr / (f0 * 1.03)) as usize).clamp(1, 60);
    let amps: Vec<f64> = (1..=n_harm).map(|k| speaker.envelope(k as f64 * f0, shift)).collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut samples = vec![0.0; n];
    let mut phase = 0.0;
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let inst_f0 = f0 * (1.0 + 0.02 * (2.0 * PI * vib_rate * t + vib_phase).sin());
        phase += 2.0 * PI * inst_f0 / sr;
        let gate = 0.55 + 0.45 * (PI * syl_rate * t).sin().powi(2);
        let mut v = 0.0;
        for (k, (a, p)) in amps.iter().zip(&phases).enumerate() {
            v += a * ((k + 1) as f64 * phase + p).sin();
        }
        *s = gate * v;
    }

    let power = samples.iter().map(|s| s * s).sum::<f64>() / n as f64;
    let noise_sd = (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    for s in samples.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *s += noise_sd * z;
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        for s in samples.iter_mut() {
            *s *= 0.5 / peak;
        }
    }
    Waveform::new(samples, cfg.sample_rate)
}

/// `n_speakers` random templates with `utts_per_speaker` utterances each.
/// Ids are `spk{NN}` and `spk{NN}_u{MM}`.
pub fn synth_corpus(
    n_speakers: usize,
    utts_per_speaker: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(Vec<SpeakerTemplate>, Vec<SynthUtterance>)> {
    if n_speakers == 0 || utts_per_speaker == 0 {
        return Err(Error::arg("corpus size", "need at least one speaker and one utterance"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speakers: Vec<SpeakerTemplate> = (0..n_speakers)
        .map(|s| SpeakerTemplate::random(format!("spk{s:02}"), &mut rng))
        .collect();
    let mut utts = Vec::with_capacity(n_speakers * utts_per_speaker);
    for spk in &speakers {
        for u in 0..utts_per_speaker {
            utts.push(SynthUtterance {
                utt_id: format!("{}_u{u:02}", spk.spk_id),
                spk_id: spk.spk_id.clone(),
                wav: synth_utterance(spk, cfg, rng.random())?,
            });
        }
    }
    Ok((speakers, utts))
}

/// Low-pass filtered Gaussian noise, a rough stand-in for ambient noise.
pub fn colored_noise(n: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = 0.0;
    let samples = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            prev = 0.9 * prev + z;
            prev * 0.1
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterances_are_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spk = SpeakerTemplate::random("a", &mut rng);
        let cfg = SynthConfig::default();
        let a = synth_utterance(&spk, &cfg, 7).unwrap();
        assert_eq!(a, synth_utterance(&spk, &cfg, 7).unwrap());
        assert_ne!(a, synth_utterance(&spk, &cfg, 8).unwrap());
        assert!((a.peak() - 0.5).abs() < 1e-12);
        let secs = a.len() as f64 / 16000.0;
        assert!((0.8..=1.2).contains(&secs));
    }

    #[test]
    fn spectrum_peaks_near_harmonics_of_f0() {
        let spk = SpeakerTemplate {
            spk_id: "x".into(),
            f0: 200.0,
            formants: vec![(400.0, 100.0, 1.0)],
            tilt_db: -6.0,
        };
        let cfg = SynthConfig {
            duration: (1.0, 1.0),
            snr_db: 60.0,
            f0_jitter: 0.0,
            formant_jitter: 0.0,
            ..SynthConfig::default()
        };
        let w = synth_utterance(&spk, &cfg, 3).unwrap();
        // energy near 400 Hz (2nd harmonic, at the formant) dominates 300 Hz
        let goertzel = |f: f64| {
            let (re, im) = w.samples.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, s)| {
                let a = 2.0 * PI * f * i as f64 / 16000.0;
                (re + s * a.cos(), im + s * a.sin())
            });
            re * re + im * im
        };
        assert!(goertzel(400.0) > 100.0 * goertzel(300.0));
    }

    #[test]
    fn corpus_layout() {
        let (spk, utts) = synth_corpus(3, 2, &SynthConfig::default(), 5).unwrap();
        assert_eq!(spk.len(), 3);
        assert_eq!(utts.len(), 6);
        assert_eq!(utts[3].utt_id, "spk01_u01");
        assert_eq!(utts[3].spk_id, "spk01");
        assert!(synth_corpus(0, 2, &SynthConfig::default(), 5).is_err());
    }
}
