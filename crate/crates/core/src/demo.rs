//! End-to-end pipeline on synthetic speakers: features, joint CE + AM-softmax
//! training, embedding extraction, cosine and PLDA scoring, evaluation.
//!
//! Evaluation uses utterances never seen in training: the last
//! `held_out_utts` utterances of every speaker, plus every utterance of the
//! `held_out_speakers` speakers excluded from training altogether. The
//! first evaluation utterance of each speaker is its enrollment; the others
//! are test utterances, optionally mixed with noise to mimic an
//! enrollment/test channel mismatch. Every enrollment is scored against
//! every test utterance.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{add_noise, relabel_speakers, speed_perturb, UtteranceRecord};
use crate::backend::{
    eda_enroll, fit_preprocess, score_cosine, train_plda, Embedding, PldaScorer, PreprocessChain, PreprocessConfig,
};
use crate::error::{Error, Result};
use crate::evalnorm::{compute_eer, compute_min_dcf, DcfParams, Label, Trial, TrialScores};
use crate::features::{FeatureConfig, MelExtractor, Waveform};
use crate::loss::{train_toy, LossTrace, Objective, TrainExample, TrainOptions};
use crate::nnet::{Network, NetworkSpec};
use crate::synth::{colored_noise, synth_corpus, SynthConfig, SynthUtterance};

pub const DEMO_NETWORK: &str = "\
input dim=30
tdnn out=64 context=-2,-1,0,1,2
tdnn out=64 context=-2,0,2
tdnn out=64 context=0
stats_pool
dense out=32
";

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub seed: u64,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Evaluation utterances taken from each training speaker.
    pub held_out_utts: usize,
    /// Speakers used only for evaluation.
    pub held_out_speakers: usize,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub network: NetworkSpec,
    pub train: TrainOptions,
    /// Factors for the speaker-multiplication run; empty skips it.
    pub speed_factors: Vec<f64>,
    pub preprocess: PreprocessConfig,
    pub plda_iters: usize,
    /// SNR range (dB) of the noise mixed into test utterances; `None`
    /// leaves them clean.
    pub test_snr_db: Option<(f64, f64)>,
    /// Noise-augmented copies added per training utterance (same speaker).
    pub train_noise_copies: usize,
    /// SNR range (dB) for training and enrollment augmentation copies.
    pub augment_snr_db: (f64, f64),
    /// Noise-augmented copies averaged into each enrollment embedding.
    pub eda_copies: usize,
    pub dcf: DcfParams,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_speakers: 20,
            utts_per_speaker: 10,
            held_out_utts: 3,
            held_out_speakers: 0,
            synth: SynthConfig::default(),
            features: FeatureConfig::mfcc(),
            network: DEMO_NETWORK.parse().expect("demo network parses"),
            train: TrainOptions {
                objective: Objective::Joint,
                lr_schedule: vec![0.02, 0.005, 0.001],
                epochs: 24,
                batch_size: 16,
                plateau_patience: 2,
                ..TrainOptions::default()
            },
            speed_factors: vec![0.9, 1.1],
            preprocess: PreprocessConfig {
                lda_dim: None,
                whiten: true,
                length_norm: true,
            },
            plda_iters: 10,
            test_snr_db: Some((5.0, 15.0)),
            train_noise_copies: 1,
            augment_snr_db: (5.0, 15.0),
            eda_copies: 0,
            dcf: DcfParams::default(),
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 4 || self.utts_per_speaker < 4 {
            return Err(Error::arg(
                "demo size",
                format!(
                    "need at least 4 speakers x 4 utterances, got {} x {}",
                    self.n_speakers, self.utts_per_speaker
                ),
            ));
        }
        if self.n_speakers < self.held_out_speakers + 2 {
            return Err(Error::arg(
                "held_out_speakers",
                format!(
                    "need >= 2 training speakers, {} of {} are held out",
                    self.held_out_speakers, self.n_speakers
                ),
            ));
        }
        if self.held_out_utts == 1 || self.utts_per_speaker < self.held_out_utts + 2 {
            return Err(Error::arg(
                "held_out_utts",
                format!(
                    "must be 0 or >= 2 and leave >= 2 training utterances of {}, got {}",
                    self.utts_per_speaker, self.held_out_utts
                ),
            ));
        }
        if self.held_out_utts == 0 && self.held_out_speakers < 2 {
            return Err(Error::arg("held_out", "no evaluation trials with both classes"));
        }
        if self.network.input_dim != self.features.n_ceps {
            return Err(Error::DimensionMismatch {
                context: "demo network input vs cepstra",
                expected: self.features.n_ceps,
                actual: self.network.input_dim,
            });
        }
        for (name, range) in [("test_snr_db", self.test_snr_db), ("augment_snr_db", Some(self.augment_snr_db))] {
            if let Some((lo, hi)) = range {
                if !(lo.is_finite() && hi >= lo && hi.is_finite()) {
                    return Err(Error::arg(name, format!("bad range {lo}..{hi}")));
                }
            }
        }
        self.synth.validate()?;
        self.train.validate()?;
        self.dcf.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub eer: f64,
    pub min_dcf: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EER {:.4} minDCF {:.4}", self.eer, self.min_dcf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemReport {
    pub name: String,
    pub train_speakers: usize,
    pub train_utterances: usize,
    pub trials: usize,
    pub final_loss: f64,
    pub cosine: Metrics,
    pub plda: Metrics,
    pub cosine_scores: TrialScores,
    pub plda_scores: TrialScores,
}

impl fmt::Display for SystemReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "system {} speakers {} utterances {} trials {} final_loss {:.6}",
            self.name, self.train_speakers, self.train_utterances, self.trials, self.final_loss
        )?;
        writeln!(f, "  cosine {}", self.cosine)?;
        writeln!(f, "  plda   {}", self.plda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    pub seed: u64,
    pub systems: Vec<SystemReport>,
}

impl fmt::Display for DemoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {}", self.seed)?;
        for s in &self.systems {
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

/// Data shared by every system of one demo run.
#[derive(Debug, Clone)]
pub struct DemoData {
    pub train: Vec<SynthUtterance>,
    pub enroll: Vec<SynthUtterance>,
    pub test: Vec<SynthUtterance>,
    pub noise: Waveform,
}

/// A trained extractor with its backend.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    /// Global per-dimension feature mean and inverse deviation from the
    /// training frames.
    pub feat_mean: RowDVector<f64>,
    pub feat_inv_std: RowDVector<f64>,
    pub net: Network,
    pub chain: PreprocessChain,
    pub plda: PldaScorer,
    pub trace: LossTrace,
    pub train_speakers: usize,
    pub train_utterances: usize,
}

/// Synthesizes the corpus and splits it. Test utterances are mixed with
/// colored noise when `test_snr_db` is set.
pub fn prepare_data(cfg: &DemoConfig) -> Result<DemoData> {
    cfg.validate()?;
    let (_, utts) = synth_corpus(cfg.n_speakers, cfg.utts_per_speaker, &cfg.synth, cfg.seed)?;
    let n_train = cfg.n_speakers - cfg.held_out_speakers;
    let first_eval = cfg.utts_per_speaker - cfg.held_out_utts;
    let noise = colored_noise(cfg.synth.sample_rate as usize * 3, cfg.synth.sample_rate, cfg.seed ^ 0x5eed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e57);

    let mut data = DemoData {
        train: Vec::new(),
        enroll: Vec::new(),
        test: Vec::new(),
        noise,
    };
    for (i, u) in utts.into_iter().enumerate() {
        let (spk, k) = (i / cfg.utts_per_speaker, i % cfg.utts_per_speaker);
        let start = if spk < n_train { first_eval } else { 0 };
        if k < start {
            data.train.push(u);
        } else if k == start {
            data.enroll.push(u);
        } else {
            let wav = match cfg.test_snr_db {
                Some(range) => noisy_copy(&u, &data.noise, range, &mut rng)?,
                None => u.wav,
            };
            data.test.push(SynthUtterance { wav, ..u });
        }
    }
    Ok(data)
}

fn noisy_copy(u: &SynthUtterance, noise: &Waveform, (lo, hi): (f64, f64), rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let snr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    add_noise(&u.wav, noise, snr, rng.random())
}

// Global rather than per-utterance normalization: a synthetic speaker's
// identity is precisely its long-term spectral envelope.
fn features(extractor: &mut MelExtractor, wav: &Waveform) -> Result<DMatrix<f64>> {
    Ok(extractor.mfcc(wav)?.values)
}

fn standardize(feat: &mut DMatrix<f64>, mean: &RowDVector<f64>, inv_std: &RowDVector<f64>) {
    for mut row in feat.row_iter_mut() {
        row -= mean;
        row.component_mul_assign(inv_std);
    }
}

fn global_moments(feats: &[DMatrix<f64>]) -> (RowDVector<f64>, RowDVector<f64>) {
    let dim = feats[0].ncols();
    let n: usize = feats.iter().map(|f| f.nrows()).sum();
    let mut sum = RowDVector::zeros(dim);
    let mut sq = RowDVector::zeros(dim);
    for f in feats {
        for row in f.row_iter() {
            sum += row;
            sq += row.component_mul(&row);
        }
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean.component_mul(&mean);
    (mean, var.map(|v| 1.0 / v.max(1e-8).sqrt()))
}

/// Training utterances, plus speed-perturbed copies filed under new
/// speaker ids for each factor.
pub fn training_set(train: &[SynthUtterance], factors: &[f64]) -> Result<Vec<SynthUtterance>> {
    let manifest: Vec<UtteranceRecord> = train
        .iter()
        .map(|u| UtteranceRecord::new(&u.utt_id, &u.spk_id, "-", "orig"))
        .collect();
    let mut out = train.to_vec();
    for &f in factors {
        let relabeled = relabel_speakers(&manifest, f)?;
        for (u, r) in train.iter().zip(relabeled) {
            out.push(SynthUtterance {
                utt_id: r.utt_id,
                spk_id: r.spk_id,
                wav: speed_perturb(&u.wav, f)?,
            });
        }
    }
    Ok(out)
}

/// Trains the network on `train` (plus `train_noise_copies` noisy copies
/// of each utterance) and fits the cosine/PLDA backend on the training
/// embeddings.
pub fn train_system(cfg: &DemoConfig, train: &[SynthUtterance], noise: &Waveform) -> Result<TrainedSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa06);
    let mut all = train.to_vec();
    for u in train {
        for c in 0..cfg.train_noise_copies {
            all.push(SynthUtterance {
                utt_id: format!("{}_n{c}", u.utt_id),
                spk_id: u.spk_id.clone(),
                wav: noisy_copy(u, noise, cfg.augment_snr_db, &mut rng)?,
            });
        }
    }
    let train = &all[..];
    let mut extractor = MelExtractor::new(cfg.features.clone(), cfg.synth.sample_rate)?;
    let mut ids = BTreeMap::new();
    for u in train {
        let next = ids.len();
        ids.entry(u.spk_id.clone()).or_insert(next);
    }
    let mut feats = train
        .iter()
        .map(|u| features(&mut extractor, &u.wav))
        .collect::<Result<Vec<_>>>()?;
    let (feat_mean, feat_inv_std) = global_moments(&feats);
    for f in feats.iter_mut() {
        standardize(f, &feat_mean, &feat_inv_std);
    }
    let examples: Vec<TrainExample> = train
        .iter()
        .zip(feats)
        .map(|(u, feat)| TrainExample {
            feat,
            label: ids[&u.spk_id],
        })
        .collect();

    let net = Network::new(&cfg.network, cfg.seed)?;
    let opts = TrainOptions {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let outcome = train_toy(net, &examples, ids.len(), &opts)?;
    let net = outcome.net;

    let embs = train
        .iter()
        .zip(&examples)
        .map(|(u, ex)| {
            let e = net.forward(&ex.feat)?;
            Ok(Embedding::new(&u.utt_id, Some(u.spk_id.clone()), e.transpose().column(0).into_owned()))
        })
        .collect::<Result<Vec<_>>>()?;
    let chain = fit_preprocess(&embs, &cfg.preprocess)?;
    let projected = embs
        .iter()
        .map(|e| crate::backend::apply_preprocess(&chain, e))
        .collect::<Result<Vec<_>>>()?;
    let plda = train_plda(&projected, cfg.plda_iters)?.model.scorer()?;
    Ok(TrainedSystem {
        feat_mean,
        feat_inv_std,
        net,
        chain,
        plda,
        trace: outcome.trace,
        train_speakers: ids.len(),
        train_utterances: train.len(),
    })
}

/// Embeds a waveform with a trained system's network.
pub fn embed(sys: &TrainedSystem, cfg: &DemoConfig, utt: &SynthUtterance) -> Result<Embedding> {
    let mut extractor = MelExtractor::new(cfg.features.clone(), cfg.synth.sample_rate)?;
    let mut feat = features(&mut extractor, &utt.wav)?;
    standardize(&mut feat, &sys.feat_mean, &sys.feat_inv_std);
    let e = sys.net.forward(&feat)?;
    Ok(Embedding::new(&utt.utt_id, Some(utt.spk_id.clone()), e.transpose().column(0).into_owned()))
}

/// Enrollment embeddings, each averaged with `copies` noise-augmented
/// versions of its utterance (none when `copies` is 0).
pub fn enroll_embeddings(sys: &TrainedSystem, cfg: &DemoConfig, data: &DemoData, copies: usize) -> Result<Vec<Embedding>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xeda);
    data.enroll
        .iter()
        .map(|u| {
            let original = embed(sys, cfg, u)?;
            let augmented = (0..copies)
                .map(|_| {
                    let wav = noisy_copy(u, &data.noise, cfg.augment_snr_db, &mut rng)?;
                    embed(sys, cfg, &SynthUtterance { wav, ..u.clone() })
                })
                .collect::<Result<Vec<_>>>()?;
            eda_enroll(&original, &augmented, false)
        })
        .collect()
}

/// Every enrollment against every test utterance, scored by cosine and by
/// PLDA.
pub fn score_all(sys: &TrainedSystem, enroll: &[Embedding], test: &[Embedding]) -> Result<(TrialScores, TrialScores)> {
    let project = |e: &Embedding| crate::backend::apply_preprocess(&sys.chain, e);
    let enroll_p = enroll.iter().map(project).collect::<Result<Vec<_>>>()?;
    let test_p = test.iter().map(project).collect::<Result<Vec<_>>>()?;
    let mut cos = Vec::new();
    let mut plda = Vec::new();
    for (e, ep) in enroll.iter().zip(&enroll_p) {
        for (t, tp) in test.iter().zip(&test_p) {
            let label = if e.spk_id == t.spk_id { Label::Target } else { Label::Nontarget };
            cos.push(Trial::new(&e.utt_id, &t.utt_id, score_cosine(&e.vector, &t.vector)?, Some(label)));
            plda.push(Trial::new(&e.utt_id, &t.utt_id, sys.plda.score(&ep.vector, &tp.vector)?, Some(label)));
        }
    }
    Ok((TrialScores::new(cos)?, TrialScores::new(plda)?))
}

pub fn metrics(scores: &TrialScores, dcf: &DcfParams) -> Result<Metrics> {
    Ok(Metrics {
        eer: compute_eer(scores)?,
        min_dcf: compute_min_dcf(scores, dcf)?,
    })
}

fn evaluate(name: &str, sys: &TrainedSystem, cfg: &DemoConfig, data: &DemoData) -> Result<SystemReport> {
    let enroll = enroll_embeddings(sys, cfg, data, cfg.eda_copies)?;
    let test = data.test.iter().map(|u| embed(sys, cfg, u)).collect::<Result<Vec<_>>>()?;
    let (cos, plda) = score_all(sys, &enroll, &test)?;
    Ok(SystemReport {
        name: name.into(),
        train_speakers: sys.train_speakers,
        train_utterances: sys.train_utterances,
        trials: cos.len(),
        final_loss: sys.trace.epoch_loss.last().copied().unwrap_or(f64::NAN),
        cosine: metrics(&cos, &cfg.dcf)?,
        plda: metrics(&plda, &cfg.dcf)?,
        cosine_scores: cos,
        plda_scores: plda,
    })
}

/// Runs the baseline system and, when speed factors are configured, the
/// speaker-multiplied system on the same held-out trials.
pub fn run_demo(cfg: &DemoConfig) -> Result<DemoReport> {
    let data = prepare_data(cfg)?;
    let base = train_system(cfg, &data.train, &data.noise)?;
    let mut systems = vec![evaluate("baseline", &base, cfg, &data)?];
    if !cfg.speed_factors.is_empty() {
        let train = training_set(&data.train, &cfg.speed_factors)?;
        let sys = train_system(cfg, &train, &data.noise)?;
        systems.push(evaluate("speed", &sys, cfg, &data)?);
    }
    Ok(DemoReport { seed: cfg.seed, systems })
}

/// Cosine EER on the demo trials without and with enrollment augmentation
/// (`copies` noisy versions averaged in), using one trained baseline.
pub fn eda_comparison(cfg: &DemoConfig, copies: usize) -> Result<(f64, f64)> {
    let data = prepare_data(cfg)?;
    let sys = train_system(cfg, &data.train, &data.noise)?;
    let test = data.test.iter().map(|u| embed(&sys, cfg, u)).collect::<Result<Vec<_>>>()?;
    let mut out = [0.0; 2];
    for (slot, n) in out.iter_mut().zip([0, copies]) {
        let enroll = enroll_embeddings(&sys, cfg, &data, n)?;
        *slot = compute_eer(&score_all(&sys, &enroll, &test)?.0)?;
    }
    Ok((out[0], out[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::speaker_count;

fn speaker_count_of(utts: &[SynthUtterance]) -> usize {
    let manifest: Vec<UtteranceRecord> = utts
        .iter()
        .map(|u| UtteranceRecord::new(&u.utt_id, &u.spk_id, "-", "orig"))
        .collect();
    speaker_count(&manifest)
}

    #[test]
    fn rejects_infeasible_sizes() {
        let cfg = DemoConfig {
            n_speakers: 3,
            ..DemoConfig::default()
        };
        assert!(run_demo(&cfg).is_err());
        for (spk, utts) in [(19, 3), (0, 1), (0, 9), (1, 0)] {
            let cfg = DemoConfig {
                held_out_speakers: spk,
                held_out_utts: utts,
                ..DemoConfig::default()
            };
            assert!(cfg.validate().is_err(), "{spk} {utts}");
        }
    }

    #[test]
    fn split_and_speed_copies() {
        let cfg = DemoConfig {
            n_speakers: 6,
            utts_per_speaker: 5,
            held_out_utts: 2,
            held_out_speakers: 2,
            ..DemoConfig::default()
        };
        let data = prepare_data(&cfg).unwrap();
        assert_eq!((data.train.len(), data.enroll.len(), data.test.len()), (12, 6, 12));
        assert_eq!(data.enroll[0].utt_id, "spk00_u03");
        assert_eq!(data.enroll[5].utt_id, "spk05_u00");
        let aug = training_set(&data.train, &[0.9, 1.1]).unwrap();
        assert_eq!(aug.len(), 36);
        assert_eq!(speaker_count_of(&aug), 12);
        let ratio = aug[12].wav.len() as f64 / data.train[0].wav.len() as f64;
        assert!((ratio - 1.0 / 0.9).abs() < 0.01);
    }
}
