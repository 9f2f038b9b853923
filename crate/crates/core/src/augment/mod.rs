//! Waveform augmentation and the dataset bookkeeping that goes with it.
//!
//! Speed-perturbed copies change the spectrum enough that they are filed
//! under new speaker labels; noise and reverberation copies keep the
//! original speaker.

mod noise;
mod speed;

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::Waveform;

pub use noise::{add_noise, add_noise_with_gain, reverberate};
pub use speed::speed_perturb;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub speed_factors: Vec<f64>,
    pub snr_db_choices: Vec<f64>,
    pub rir: Option<Vec<f64>>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            speed_factors: vec![0.8, 0.9, 1.1],
            snr_db_choices: vec![0.0, 5.0, 10.0, 15.0],
            rir: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for &f in &self.speed_factors {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::InvalidConfig(format!("speed factor {f} must be positive")));
            }
        }
        if self.snr_db_choices.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::InvalidConfig("SNR choices must be finite".into()));
        }
        Ok(())
    }
}

/// One manifest line: `utt_id spk_id wav_path augment_tag`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub spk_id: String,
    pub wav_path: String,
    pub augment_tag: String,
}

impl UtteranceRecord {
    pub fn new(utt_id: &str, spk_id: &str, wav_path: &str, augment_tag: &str) -> Self {
        Self {
            utt_id: utt_id.into(),
            spk_id: spk_id.into(),
            wav_path: wav_path.into(),
            augment_tag: augment_tag.into(),
        }
    }
}

pub fn speed_tag(factor: f64) -> String {
    format!("sp{factor}")
}

/// Copies of `manifest` relabeled as new speakers for speed `factor`.
///
/// Both speaker and utterance ids get a `_sp<factor>` suffix. Fails if any
/// new speaker id already exists in the manifest.
pub fn relabel_speakers(manifest: &[UtteranceRecord], factor: f64) -> Result<Vec<UtteranceRecord>> {
    if factor == 1.0 {
        return Err(Error::arg("factor", "speed factor 1 does not create new speakers"));
    }
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::arg("factor", format!("speed factor must be > 0, got {factor}")));
    }
    let tag = speed_tag(factor);
    let existing: HashSet<&str> = manifest.iter().map(|r| r.spk_id.as_str()).collect();
    manifest
        .iter()
        .map(|r| {
            let spk_id = format!("{}_{}", r.spk_id, tag);
            if existing.contains(spk_id.as_str()) {
                return Err(Error::Duplicate(format!("speaker id {spk_id} already in manifest")));
            }
            Ok(UtteranceRecord {
                utt_id: format!("{}_{}", r.utt_id, tag),
                spk_id,
                wav_path: r.wav_path.clone(),
                augment_tag: tag.clone(),
            })
        })
        .collect()
}

/// The originals followed by one relabeled copy per speed factor.
pub fn speed_augment_manifest(
    manifest: &[UtteranceRecord],
    factors: &[f64],
) -> Result<Vec<UtteranceRecord>> {
    let mut out = manifest.to_vec();
    for &f in factors {
        out.extend(relabel_speakers(manifest, f)?);
    }
    validate_manifest(&out)?;
    Ok(out)
}

pub fn speaker_count(manifest: &[UtteranceRecord]) -> usize {
    manifest.iter().map(|r| r.spk_id.as_str()).collect::<HashSet<_>>().len()
}

/// Checks that `(utt_id, augment_tag)` pairs are unique.
pub fn validate_manifest(manifest: &[UtteranceRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in manifest {
        if !seen.insert((r.utt_id.as_str(), r.augment_tag.as_str())) {
            return Err(Error::Duplicate(format!(
                "utterance {} with tag {}",
                r.utt_id, r.augment_tag
            )));
        }
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [utt, spk, path, tag] => out.push(UtteranceRecord::new(utt, spk, path, tag)),
            [utt, spk, path] => out.push(UtteranceRecord::new(utt, spk, path, "orig")),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: "expected `utt_id spk_id wav_path augment_tag`".into(),
                })
            }
        }
    }
    validate_manifest(&out)?;
    Ok(out)
}

pub fn write_manifest<W: Write>(mut w: W, manifest: &[UtteranceRecord]) -> Result<()> {
    for r in manifest {
        writeln!(w, "{} {} {} {}", r.utt_id, r.spk_id, r.wav_path, r.augment_tag)?;
    }
    Ok(())
}

/// Corruption categories of the four-copy recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Reverb,
    Noise,
    Music,
    Babble,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [
        Corruption::Reverb,
        Corruption::Noise,
        Corruption::Music,
        Corruption::Babble,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Corruption::Reverb => "reverb",
            Corruption::Noise => "noise",
            Corruption::Music => "music",
            Corruption::Babble => "babble",
        }
    }

    /// SNR range in dB used when mixing this category.
    pub fn snr_range(self) -> Option<(f64, f64)> {
        match self {
            Corruption::Reverb => None,
            Corruption::Noise => Some((0.0, 15.0)),
            Corruption::Music => Some((5.0, 15.0)),
            Corruption::Babble => Some((13.0, 20.0)),
        }
    }
}

/// User-supplied material for the four-copy recipe. Sorting files into
/// categories is the caller's job.
#[derive(Debug, Clone, Default)]
pub struct NoiseBank {
    pub noise: Vec<Waveform>,
    pub music: Vec<Waveform>,
    pub babble: Vec<Waveform>,
    pub rirs: Vec<Vec<f64>>,
}

/// Produces one corrupted copy per category (reverb, noise, music, babble).
/// Babble overlays three randomly chosen babble sources before mixing.
pub fn four_corrupted_copies(
    wav: &Waveform,
    bank: &NoiseBank,
    seed: u64,
) -> Result<Vec<(Corruption, Waveform)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4);
    for kind in Corruption::ALL {
        let copy = match kind {
            Corruption::Reverb => {
                let rir = pick(&bank.rirs, &mut rng, "rirs")?;
                reverberate(wav, rir)?
            }
            Corruption::Noise | Corruption::Music | Corruption::Babble => {
                let (lo, hi) = kind.snr_range().unwrap_or((0.0, 0.0));
                let snr = rng.random_range(lo..=hi);
                let source = match kind {
                    Corruption::Noise => pick(&bank.noise, &mut rng, "noise")?.clone(),
                    Corruption::Music => pick(&bank.music, &mut rng, "music")?.clone(),
                    _ => {
                        let mut mixed = pick(&bank.babble, &mut rng, "babble")?.clone();
                        for _ in 0..2 {
                            let other = pick(&bank.babble, &mut rng, "babble")?;
                            for (i, s) in mixed.samples.iter_mut().enumerate() {
                                *s += other.samples[i % other.len()];
                            }
                        }
                        mixed
                    }
                };
                add_noise(wav, &source, snr, rng.random())?
            }
        };
        out.push((kind, copy));
    }
    Ok(out)
}

fn pick<'a, T>(items: &'a [T], rng: &mut ChaCha8Rng, what: &str) -> Result<&'a T> {
    if items.is_empty() {
        return Err(Error::Missing(format!("no {what} available in noise bank")));
    }
    Ok(&items[rng.random_range(0..items.len())])
}
