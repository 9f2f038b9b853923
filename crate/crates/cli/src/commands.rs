use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svkit::augment::{
    add_noise, read_manifest, reverberate, speaker_count, speed_augment_manifest, speed_perturb, write_manifest,
    AugmentConfig, UtteranceRecord,
};
use svkit::backend::{
    apply_preprocess, eda_enroll, fit_preprocess, read_embeddings, score_cosine, train_plda, write_embeddings,
    PreprocessConfig,
};
use svkit::demo::{run_demo, DemoConfig};
use svkit::evalnorm::{
    asnorm_detailed, compute_eer, compute_min_dcf, det_points, fuse, read_cohort_scores, read_scores, read_trials,
    score_trials, write_cohort_scores, write_scores, AsNormConfig, CohortScore,
};
use svkit::features::{
    extract_mfb, extract_mfcc, mask_spectrum, read_features, read_wav, write_features, write_wav, FeatureFormat,
};
use svkit::loss::{train_toy, AmsConfig, Objective, TrainExample, TrainOptions};
use svkit::nnet::forward_embedding;
use svkit::tensor_io::{read_named, write_named};
use svkit::{DcfParams, Embedding, FeatureConfig, FeatureMatrix, Network, NetworkSpec, PldaModel, PreprocessChain};

use crate::config::Config;
use crate::error::{CliError, StageContext};
use crate::run::{Runner, StageSpec};

#[derive(Debug, Parser)]
#[command(name = "svkit", version, about = "Speaker verification pipeline")]
pub struct Cli {
    /// Flat `section.key = value` configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Stage bookkeeping directory; relative paths resolve inside it.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Encoding of feature and embedding files.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Binary,
}

impl From<Format> for FeatureFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => FeatureFormat::Text,
            Format::Binary => FeatureFormat::Binary,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write augmented copies of a manifest's utterances.
    #[command(subcommand)]
    Augment(AugmentCmd),
    /// Extract log mel filterbank or cepstral features.
    Features(FeaturesArgs),
    /// Train an embedding network.
    Train(TrainArgs),
    /// Extract embeddings with a trained network.
    Embed(EmbedArgs),
    /// Fit or apply embedding preprocessing, or train PLDA.
    #[command(subcommand)]
    Backend(BackendCmd),
    /// Score trials, or score items against a cohort.
    Score(ScoreArgs),
    /// Adaptive symmetric score normalization.
    Asnorm(AsnormArgs),
    /// Sum z-normalized scores of several systems.
    Fuse(FuseArgs),
    /// Print EER and minDCF.
    Eval(EvalArgs),
    /// Synthetic end-to-end run with and without speed perturbation.
    Demo(DemoArgs),
}

#[derive(Debug, Subcommand)]
pub enum AugmentCmd {
    Speed(SpeedArgs),
    Noise(NoiseArgs),
    Reverb(ReverbArgs),
}

#[derive(Debug, Args)]
pub struct IoArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Receives `manifest.txt` and `wav/`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SpeedArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long, value_delimiter = ',')]
    pub factors: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// Directory of noise `.wav` files.
    #[arg(long)]
    pub noise_dir: PathBuf,
    /// SNR choices in dB.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub snr: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct ReverbArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// Directory of room impulse response `.wav` files.
    #[arg(long)]
    pub rir_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureKind {
    Mfb,
    Mfcc,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(value_enum)]
    pub kind: FeatureKind,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Lower bound of the masked fraction; enables masking with `--mask-max`.
    #[arg(long)]
    pub mask_min: Option<f64>,
    #[arg(long)]
    pub mask_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Supplies the speaker label of every feature utterance.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Network spec file; defaults to `network.spec` from the config.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Receives `network.txt`, `params.bin` and `loss.txt`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// softmax, ams or joint.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub lr: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub ce_weights: Option<Vec<f64>>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub ams_scale: Option<f64>,
    #[arg(long)]
    pub ams_margin: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Optional speaker labels for the output.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BackendCmd {
    /// Fit centering, whitening, LDA and length normalization.
    Fit(FitArgs),
    /// Apply a fitted chain.
    Apply(ApplyArgs),
    /// Train a two-covariance PLDA model.
    Plda(PldaArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Target LDA dimension, or `none`.
    #[arg(long)]
    pub lda_dim: Option<String>,
    #[arg(long)]
    pub whiten: Option<bool>,
    #[arg(long)]
    pub length_norm: Option<bool>,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PldaArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreKind {
    Cosine,
    Plda,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["trials", "cohort"])))]
pub struct ScoreArgs {
    #[arg(value_enum)]
    pub kind: ScoreKind,
    #[arg(long)]
    pub enroll: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Trial list `enroll_id test_id [label]`; needs `--test`.
    #[arg(long, requires = "test")]
    pub trials: Option<PathBuf>,
    /// Score every enroll (and test) embedding against these instead.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// PLDA model from `backend plda`.
    #[arg(long)]
    pub plda: Option<PathBuf>,
    /// Augmented enrollment embeddings, named `<enroll_id>_<suffix>`, averaged
    /// with their original.
    #[arg(long)]
    pub enroll_aug: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AsnormArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub enroll_cohort: PathBuf,
    /// Defaults to the enrollment cohort file.
    #[arg(long)]
    pub test_cohort: Option<PathBuf>,
    #[arg(long)]
    pub top_frac: Option<f64>,
    /// Cohort subset size, or `all`.
    #[arg(long)]
    pub cohort_size: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub scores: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Labels for unlabeled score files.
    #[arg(long)]
    pub trials: Option<PathBuf>,
    #[arg(long)]
    pub p_target: Option<f64>,
    #[arg(long)]
    pub c_miss: Option<f64>,
    #[arg(long)]
    pub c_fa: Option<f64>,
    /// Writes `p_fa p_miss` operating points.
    #[arg(long)]
    pub det_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub utts: Option<usize>,
    /// Skip the speed-perturbed system.
    #[arg(long)]
    pub no_speed: bool,
    /// Receives `report.txt` and the score files.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Settings shared by every verb.
struct Ctx {
    cfg: Config,
    runner: Runner,
    seed: u64,
    format: FeatureFormat,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.runner.resolve(p)
    }

    /// Canonical description of a command for input hashing.
    fn args_of(&self, cmd: &impl std::fmt::Debug) -> String {
        format!("{cmd:?} seed={} format={:?} config={:?}", self.seed, self.format, self.cfg)
    }
}

/// Runs one parsed command and returns the text to print.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let workdir = match cli.workdir.clone() {
        Some(w) => Some(w),
        None => cfg.get::<PathBuf>("paths.workdir")?,
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => cfg.get("seed")?.unwrap_or(0),
    };
    let format = match cli.format {
        Some(f) => f,
        None => match cfg.raw("features.format") {
            None | Some("text") => Format::Text,
            Some("binary") => Format::Binary,
            Some(other) => {
                return Err(CliError::config(
                    cfg.line_of("features.format").unwrap_or(0),
                    format!("`features.format`: expected text or binary, got `{other}`"),
                ))
            }
        },
    }
    .into();
    let runner = Runner::new(workdir, cli.force)?;
    let mut ctx = Ctx {
        cfg,
        runner,
        seed,
        format,
    };
    match &cli.command {
        Command::Augment(AugmentCmd::Speed(a)) => augment_speed(&mut ctx, a),
        Command::Augment(AugmentCmd::Noise(a)) => augment_noise(&mut ctx, a),
        Command::Augment(AugmentCmd::Reverb(a)) => augment_reverb(&mut ctx, a),
        Command::Features(a) => features(&mut ctx, a),
        Command::Train(a) => train(&mut ctx, a),
        Command::Embed(a) => embed(&mut ctx, a),
        Command::Backend(BackendCmd::Fit(a)) => backend_fit(&mut ctx, a),
        Command::Backend(BackendCmd::Apply(a)) => backend_apply(&mut ctx, a),
        Command::Backend(BackendCmd::Plda(a)) => backend_plda(&mut ctx, a),
        Command::Score(a) => score(&mut ctx, a),
        Command::Asnorm(a) => asnorm(&mut ctx, a),
        Command::Fuse(a) => fuse_cmd(&mut ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Demo(a) => demo(&mut ctx, a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn load_manifest(path: &Path) -> Result<(Vec<UtteranceRecord>, PathBuf), CliError> {
    let records = read_manifest(open(path)?).stage(&format!("reading {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((records, base))
}

/// Manifest wav paths are relative to the manifest's directory.
fn wav_path(base: &Path, rec: &UtteranceRecord) -> PathBuf {
    let p = Path::new(&rec.wav_path);
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

fn absolute(p: &Path) -> Result<String, CliError> {
    let abs = std::path::absolute(p).map_err(|e| CliError::io(p, e))?;
    Ok(abs.to_string_lossy().into_owned())
}

fn load_features(path: &Path, format: FeatureFormat) -> Result<Vec<(String, FeatureMatrix)>, CliError> {
    read_features(open(path)?, format).stage(&format!("reading {}", path.display()))
}

fn load_embeddings(path: &Path, format: FeatureFormat) -> Result<Vec<Embedding>, CliError> {
    read_embeddings(open(path)?, format).stage(&format!("reading {}", path.display()))
}

fn load_named(path: &Path) -> Result<Vec<svkit::tensor_io::NamedMatrix>, CliError> {
    read_named(open(path)?).stage(&format!("reading {}", path.display()))
}

/// Sorted `.wav` files of a directory.
fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::Data(format!("no .wav files in {}", dir.display())));
    }
    Ok(out)
}

fn augment_speed(ctx: &mut Ctx, a: &SpeedArgs) -> Result<String, CliError> {
    let stage = "augment speed";
    let manifest_path = ctx.path(&a.io.manifest);
    let out_dir = ctx.path(&a.io.out_dir);
    let factors = match &a.factors {
        Some(f) => f.clone(),
        None => ctx
            .cfg
            .get_list("augment.speed_factors")?
            .unwrap_or_else(|| AugmentConfig::default().speed_factors),
    };
    AugmentConfig {
        speed_factors: factors.clone(),
        ..AugmentConfig::default()
    }
    .validate()
    .stage(stage)?;
    let (records, base) = load_manifest(&manifest_path)?;
    let mut inputs = vec![manifest_path];
    inputs.extend(records.iter().map(|r| wav_path(&base, r)));
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs,
    };
    ctx.runner.run(spec, |st| {
        let full = speed_augment_manifest(&records, &factors).stage(stage)?;
        let mut out = Vec::with_capacity(full.len());
        for r in &records {
            out.push(UtteranceRecord {
                wav_path: absolute(&wav_path(&base, r))?,
                ..r.clone()
            });
        }
        for (copy, &factor) in full[records.len()..].iter().zip(factors.iter().flat_map(|f| {
            std::iter::repeat_n(f, records.len())
        })) {
            let src = &records[out.len() % records.len()];
            let wav = read_wav(wav_path(&base, src)).stage(stage)?;
            let rel = format!("wav/{}.wav", copy.utt_id);
            write_wav(st.path(&out_dir.join(&rel))?, &speed_perturb(&wav, factor).stage(stage)?).stage(stage)?;
            out.push(UtteranceRecord {
                wav_path: rel,
                ..copy.clone()
            });
        }
        st.write(&out_dir.join("manifest.txt"), |w| write_manifest(w, &out))?;
        Ok(format!(
            "{stage}: {} -> {} utterances, {} -> {} speakers",
            records.len(),
            out.len(),
            speaker_count(&records),
            speaker_count(&out)
        ))
    })
}

/// Shared body of the noise and reverb verbs: one corrupted copy per
/// utterance, same speaker, utt id suffixed with the tag.
fn augment_copies<F>(ctx: &mut Ctx, stage: &str, io: &IoArgs, args: String, extra: Vec<PathBuf>, tag: &str, mut corrupt: F) -> Result<String, CliError>
where
    F: FnMut(&svkit::Waveform, &mut ChaCha8Rng) -> Result<svkit::Waveform, CliError>,
{
    let manifest_path = ctx.path(&io.manifest);
    let out_dir = ctx.path(&io.out_dir);
    let (records, base) = load_manifest(&manifest_path)?;
    let mut inputs = vec![manifest_path];
    inputs.extend(records.iter().map(|r| wav_path(&base, r)));
    inputs.extend(extra);
    let seed = ctx.seed;
    let spec = StageSpec { name: stage, args, inputs };
    ctx.runner.run(spec, |st| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(2 * records.len());
        for r in &records {
            out.push(UtteranceRecord {
                wav_path: absolute(&wav_path(&base, r))?,
                ..r.clone()
            });
        }
        for r in &records {
            let wav = read_wav(wav_path(&base, r)).stage(stage)?;
            let copy = corrupt(&wav, &mut rng)?;
            let utt = format!("{}_{tag}", r.utt_id);
            let rel = format!("wav/{utt}.wav");
            write_wav(st.path(&out_dir.join(&rel))?, &copy).stage(stage)?;
            out.push(UtteranceRecord::new(&utt, &r.spk_id, &rel, tag));
        }
        svkit::augment::validate_manifest(&out).stage(stage)?;
        st.write(&out_dir.join("manifest.txt"), |w| write_manifest(w, &out))?;
        Ok(format!("{stage}: {} -> {} utterances", records.len(), out.len()))
    })
}

fn augment_noise(ctx: &mut Ctx, a: &NoiseArgs) -> Result<String, CliError> {
    let stage = "augment noise";
    let snrs = match &a.snr {
        Some(s) => s.clone(),
        None => ctx
            .cfg
            .get_list("augment.snr_db")?
            .unwrap_or_else(|| AugmentConfig::default().snr_db_choices),
    };
    AugmentConfig {
        snr_db_choices: snrs.clone(),
        ..AugmentConfig::default()
    }
    .validate()
    .stage(stage)?;
    if snrs.is_empty() {
        return Err(CliError::Usage("--snr needs at least one value".into()));
    }
    let files = wav_files(&ctx.path(&a.noise_dir))?;
    let noises = files
        .iter()
        .map(|p| read_wav(p).stage(stage))
        .collect::<Result<Vec<_>, _>>()?;
    let args = ctx.args_of(a);
    augment_copies(ctx, stage, &a.io, args, files, "noise", |wav, rng| {
        let noise = &noises[rng.random_range(0..noises.len())];
        let snr = snrs[rng.random_range(0..snrs.len())];
        add_noise(wav, noise, snr, rng.random()).stage(stage)
    })
}

fn augment_reverb(ctx: &mut Ctx, a: &ReverbArgs) -> Result<String, CliError> {
    let stage = "augment reverb";
    let files = wav_files(&ctx.path(&a.rir_dir))?;
    let rirs = files
        .iter()
        .map(|p| read_wav(p).map(|w| w.samples).stage(stage))
        .collect::<Result<Vec<_>, _>>()?;
    let args = ctx.args_of(a);
    augment_copies(ctx, stage, &a.io, args, files, "reverb", |wav, rng| {
        reverberate(wav, &rirs[rng.random_range(0..rirs.len())]).stage(stage)
    })
}

fn feature_config(cfg: &Config, kind: FeatureKind) -> Result<FeatureConfig, CliError> {
    let mut fc = match kind {
        FeatureKind::Mfb => FeatureConfig::mfb(),
        FeatureKind::Mfcc => FeatureConfig::mfcc(),
    };
    let set_f = |key: &str, slot: &mut f64| -> Result<(), CliError> {
        if let Some(v) = cfg.get(key)? {
            *slot = v;
        }
        Ok(())
    };
    set_f("features.frame_len_ms", &mut fc.frame_len_ms)?;
    set_f("features.frame_hop_ms", &mut fc.frame_hop_ms)?;
    set_f("features.fmin", &mut fc.fmin)?;
    set_f("features.fmax", &mut fc.fmax)?;
    set_f("features.preemph", &mut fc.preemph)?;
    if let Some(v) = cfg.get("features.n_mel")? {
        fc.n_mel = v;
    }
    if let Some(v) = cfg.get("features.n_ceps")? {
        fc.n_ceps = v;
    }
    Ok(fc)
}

fn features(ctx: &mut Ctx, a: &FeaturesArgs) -> Result<String, CliError> {
    let stage = match a.kind {
        FeatureKind::Mfb => "features mfb",
        FeatureKind::Mfcc => "features mfcc",
    };
    let fc = feature_config(&ctx.cfg, a.kind)?;
    let mask_min = a.mask_min.map(Ok).or_else(|| ctx.cfg.get("features.mask_min").transpose()).transpose()?;
    let mask_max = a.mask_max.map(Ok).or_else(|| ctx.cfg.get("features.mask_max").transpose()).transpose()?;
    let mask = match (mask_min, mask_max) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        (None, None) => None,
        _ => return Err(CliError::Usage("masking needs both a minimum and a maximum fraction".into())),
    };
    let manifest_path = ctx.path(&a.manifest);
    let out = ctx.path(&a.out);
    let (records, base) = load_manifest(&manifest_path)?;
    let mut inputs = vec![manifest_path];
    inputs.extend(records.iter().map(|r| wav_path(&base, r)));
    let (seed, format) = (ctx.seed, ctx.format);
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs,
    };
    ctx.runner.run(spec, |st| {
        let mut feats = Vec::with_capacity(records.len());
        let mut frames = 0;
        for (i, r) in records.iter().enumerate() {
            let ctx_msg = format!("{stage} {}", r.utt_id);
            let wav = read_wav(wav_path(&base, r)).stage(&ctx_msg)?;
            let mut f = match a.kind {
                FeatureKind::Mfb => extract_mfb(&wav, &fc),
                FeatureKind::Mfcc => extract_mfcc(&wav, &fc),
            }
            .stage(&ctx_msg)?;
            if let Some((lo, hi)) = mask {
                f = mask_spectrum(&f, lo, hi, seed.wrapping_add(i as u64)).stage(&ctx_msg)?;
            }
            frames += f.n_frames();
            feats.push((r.utt_id.clone(), f));
        }
        let dim = feats.first().map_or(0, |(_, f)| f.dim());
        st.write(&out, |w| write_features(w, format, &feats))?;
        Ok(format!("{stage}: {} utterances, {frames} frames, dim {dim}", feats.len()))
    })
}

fn train_options(ctx: &Ctx, a: &TrainArgs) -> Result<TrainOptions, CliError> {
    let cfg = &ctx.cfg;
    let d = TrainOptions::default();
    let objective_text = match &a.objective {
        Some(o) => Some(o.clone()),
        None => cfg.raw("train.objective").map(str::to_string),
    };
    let objective = match objective_text {
        Some(t) => t.parse::<Objective>().stage("train")?,
        None => d.objective,
    };
    fn pick<T: std::str::FromStr>(flag: Option<T>, cfg: &Config, key: &str, default: T) -> Result<T, CliError> {
        Ok(match flag {
            Some(v) => v,
            None => cfg.get(key)?.unwrap_or(default),
        })
    }
    fn pick_list(flag: &Option<Vec<f64>>, cfg: &Config, key: &str, default: Vec<f64>) -> Result<Vec<f64>, CliError> {
        Ok(match flag {
            Some(v) => v.clone(),
            None => cfg.get_list(key)?.unwrap_or(default),
        })
    }
    Ok(TrainOptions {
        objective,
        lr_schedule: pick_list(&a.lr, cfg, "train.lr_schedule", d.lr_schedule)?,
        momentum: pick(a.momentum, cfg, "train.momentum", d.momentum)?,
        weight_decay: pick(a.weight_decay, cfg, "train.weight_decay", d.weight_decay)?,
        plateau_patience: pick(a.patience, cfg, "train.plateau_patience", d.plateau_patience)?,
        ce_weight_schedule: pick_list(&a.ce_weights, cfg, "train.ce_weight_schedule", d.ce_weight_schedule)?,
        ams: AmsConfig {
            s: pick(a.ams_scale, cfg, "train.ams_scale", d.ams.s)?,
            m: pick(a.ams_margin, cfg, "train.ams_margin", d.ams.m)?,
        },
        epochs: pick(a.epochs, cfg, "train.epochs", d.epochs)?,
        batch_size: pick(a.batch_size, cfg, "train.batch_size", d.batch_size)?,
        seed: ctx.seed,
        threads: pick(a.threads, cfg, "train.threads", d.threads)?,
    })
}

fn train(ctx: &mut Ctx, a: &TrainArgs) -> Result<String, CliError> {
    let stage = "train";
    let opts = train_options(ctx, a)?;
    opts.validate().stage(stage)?;
    let net_path = match &a.network {
        Some(p) => ctx.path(p),
        None => ctx
            .cfg
            .get::<PathBuf>("network.spec")?
            .map(|p| ctx.path(&p))
            .ok_or_else(|| CliError::Usage("no network spec: pass --network or set network.spec".into()))?,
    };
    let embedding_dim = match a.embedding_dim {
        Some(d) => Some(d),
        None => ctx.cfg.get("network.embedding_dim")?,
    };
    let feat_path = ctx.path(&a.features);
    let manifest_path = ctx.path(&a.manifest);
    let out_dir = ctx.path(&a.out_dir);
    let format = ctx.format;
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs: vec![net_path.clone(), feat_path.clone(), manifest_path.clone()],
    };
    ctx.runner.run(spec, |st| {
        let text = std::fs::read_to_string(&net_path).map_err(|e| CliError::io(&net_path, e))?;
        let mut spec: NetworkSpec = text.parse().stage(&format!("parsing {}", net_path.display()))?;
        if let Some(d) = embedding_dim {
            spec = spec.with_embedding_dim(d).stage(stage)?;
        }
        let feats = load_features(&feat_path, format)?;
        let (records, _) = load_manifest(&manifest_path)?;
        let spk_of: HashMap<&str, &str> = records.iter().map(|r| (r.utt_id.as_str(), r.spk_id.as_str())).collect();
        let mut labels = Vec::with_capacity(feats.len());
        for (utt, _) in &feats {
            let spk = spk_of
                .get(utt.as_str())
                .ok_or_else(|| CliError::Data(format!("{stage}: utterance {utt} is not in the manifest")))?;
            labels.push(*spk);
        }
        let speakers: BTreeSet<&str> = labels.iter().copied().collect();
        let index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let data: Vec<TrainExample> = feats
            .iter()
            .zip(&labels)
            .map(|((_, f), spk)| TrainExample {
                feat: f.values.clone(),
                label: index[spk],
            })
            .collect();
        let net = Network::new(&spec, opts.seed).stage(stage)?;
        let outcome = train_toy(net, &data, speakers.len(), &opts).stage(stage)?;
        let trace = &outcome.trace;
        st.write_text(&out_dir.join("network.txt"), &outcome.net.spec().to_string())?;
        st.write(&out_dir.join("params.bin"), |w| write_named(w, &outcome.net.named_params()))?;
        st.write(&out_dir.join("loss.txt"), |w| {
            writeln!(w, "epoch loss lr ce_weight")?;
            for (i, l) in trace.epoch_loss.iter().enumerate() {
                writeln!(w, "{} {l:.6} {} {}", i + 1, trace.lr[i], trace.ce_weight[i])?;
            }
            Ok(())
        })?;
        Ok(format!(
            "{stage}: {} utterances, {} speakers, {} epochs, final loss {:.6}",
            data.len(),
            speakers.len(),
            trace.epoch_loss.len(),
            trace.epoch_loss.last().copied().unwrap_or(f64::NAN)
        ))
    })
}

fn embed(ctx: &mut Ctx, a: &EmbedArgs) -> Result<String, CliError> {
    let stage = "embed";
    let model_dir = ctx.path(&a.model_dir);
    let (spec_path, params_path) = (model_dir.join("network.txt"), model_dir.join("params.bin"));
    let feat_path = ctx.path(&a.features);
    let manifest_path = a.manifest.as_ref().map(|m| ctx.path(m));
    let out = ctx.path(&a.out);
    let format = ctx.format;
    let mut inputs = vec![spec_path.clone(), params_path.clone(), feat_path.clone()];
    inputs.extend(manifest_path.clone());
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs,
    };
    ctx.runner.run(spec, |st| {
        let net = Network::load(&spec_path, &params_path).stage(&format!("loading {}", model_dir.display()))?;
        let spk_of: HashMap<String, String> = match &manifest_path {
            Some(p) => load_manifest(p)?.0.into_iter().map(|r| (r.utt_id, r.spk_id)).collect(),
            None => HashMap::new(),
        };
        let feats = load_features(&feat_path, format)?;
        let embs = feats
            .iter()
            .map(|(utt, f)| {
                let v = forward_embedding(&net, f).stage(&format!("{stage} {utt}"))?;
                Ok(Embedding::new(utt.clone(), spk_of.get(utt).cloned(), v))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        st.write(&out, |w| write_embeddings(w, format, &embs))?;
        Ok(format!("{stage}: {} embeddings, dim {}", embs.len(), net.embedding_dim()))
    })
}

fn backend_fit(ctx: &mut Ctx, a: &FitArgs) -> Result<String, CliError> {
    let stage = "backend fit";
    let d = PreprocessConfig::default();
    let lda_text = match &a.lda_dim {
        Some(t) => Some(t.clone()),
        None => ctx.cfg.raw("backend.lda_dim").map(str::to_string),
    };
    let lda_dim = match lda_text.as_deref() {
        None => d.lda_dim,
        Some("none") => None,
        Some(t) => Some(
            t.parse()
                .map_err(|_| CliError::Usage(format!("LDA dimension must be a positive integer or `none`, got `{t}`")))?,
        ),
    };
    let pc = PreprocessConfig {
        lda_dim,
        whiten: a.whiten.map_or_else(|| ctx.cfg.get_bool("backend.whiten"), |v| Ok(Some(v)))?.unwrap_or(d.whiten),
        length_norm: a
            .length_norm
            .map_or_else(|| ctx.cfg.get_bool("backend.length_norm"), |v| Ok(Some(v)))?
            .unwrap_or(d.length_norm),
    };
    let emb_path = ctx.path(&a.embeddings);
    let out = ctx.path(&a.out);
    let format = ctx.format;
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs: vec![emb_path.clone()],
    };
    ctx.runner.run(spec, |st| {
        let embs = load_embeddings(&emb_path, format)?;
        let chain = fit_preprocess(&embs, &pc).stage(stage)?;
        st.write(&out, |w| write_named(w, &chain.to_named()))?;
        Ok(format!(
            "{stage}: {} embeddings, dim {} -> {}",
            embs.len(),
            chain.input_dim(),
            chain.output_dim()
        ))
    })
}

fn backend_apply(ctx: &mut Ctx, a: &ApplyArgs) -> Result<String, CliError> {
    let stage = "backend apply";
    let chain_path = ctx.path(&a.chain);
    let emb_path = ctx.path(&a.embeddings);
    let out = ctx.path(&a.out);
    let format = ctx.format;
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs: vec![chain_path.clone(), emb_path.clone()],
    };
    ctx.runner.run(spec, |st| {
        let chain = PreprocessChain::from_named(load_named(&chain_path)?).stage(stage)?;
        let embs = load_embeddings(&emb_path, format)?;
        let mapped = embs
            .iter()
            .map(|e| apply_preprocess(&chain, e).stage(&format!("{stage} {}", e.utt_id)))
            .collect::<Result<Vec<_>, _>>()?;
        st.write(&out, |w| write_embeddings(w, format, &mapped))?;
        Ok(format!("{stage}: {} embeddings, dim {}", mapped.len(), chain.output_dim()))
    })
}

fn backend_plda(ctx: &mut Ctx, a: &PldaArgs) -> Result<String, CliError> {
    let stage = "backend plda";
    let iters = match a.iters {
        Some(n) => n,
        None => ctx.cfg.get("backend.plda_iters")?.unwrap_or(10),
    };
    let emb_path = ctx.path(&a.embeddings);
    let out = ctx.path(&a.out);
    let format = ctx.format;
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs: vec![emb_path.clone()],
    };
    ctx.runner.run(spec, |st| {
        let embs = load_embeddings(&emb_path, format)?;
        let fit = train_plda(&embs, iters).stage(stage)?;
        st.write(&out, |w| write_named(w, &fit.model.to_named()))?;
        let ll = &fit.log_likelihood;
        Ok(format!(
            "{stage}: {} embeddings, dim {}, {iters} iterations, log-likelihood {:.4} -> {:.4}",
            embs.len(),
            fit.model.dim(),
            ll.first().copied().unwrap_or(f64::NAN),
            ll.last().copied().unwrap_or(f64::NAN)
        ))
    })
}

/// Replaces each enrollment embedding with the mean of itself and the
/// augmented embeddings named `<enroll_id>_<suffix>` (longest id wins).
fn apply_eda(enroll: Vec<Embedding>, aug: &[Embedding]) -> Result<(Vec<Embedding>, usize), CliError> {
    let mut groups: HashMap<usize, Vec<Embedding>> = HashMap::new();
    for x in aug {
        let owner = enroll
            .iter()
            .enumerate()
            .filter(|(_, e)| x.utt_id.len() > e.utt_id.len() + 1 && x.utt_id.starts_with(&format!("{}_", e.utt_id)))
            .max_by_key(|(_, e)| e.utt_id.len())
            .map(|(i, _)| i)
            .ok_or_else(|| CliError::Data(format!("augmented embedding {} matches no enrollment id", x.utt_id)))?;
        groups.entry(owner).or_default().push(x.clone());
    }
    let used = groups.len();
    let out = enroll
        .into_iter()
        .enumerate()
        .map(|(i, e)| match groups.get(&i) {
            Some(g) => eda_enroll(&e, g, false).stage("enrollment augmentation"),
            None => Ok(e),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((out, used))
}

fn index_by_id(set: Vec<Embedding>, what: &str) -> Result<BTreeMap<String, Embedding>, CliError> {
    let mut map = BTreeMap::new();
    for e in set {
        let id = e.utt_id.clone();
        if map.insert(id.clone(), e).is_some() {
            return Err(CliError::Data(format!("duplicate {what} embedding {id}")));
        }
    }
    Ok(map)
}

fn score(ctx: &mut Ctx, a: &ScoreArgs) -> Result<String, CliError> {
    let stage = match a.kind {
        ScoreKind::Cosine => "score cosine",
        ScoreKind::Plda => "score plda",
    };
    let plda_path = match (a.kind, &a.plda) {
        (ScoreKind::Plda, Some(p)) => Some(ctx.path(p)),
        (ScoreKind::Plda, None) => return Err(CliError::Usage("score plda needs --plda".into())),
        (ScoreKind::Cosine, Some(_)) => return Err(CliError::Usage("--plda only applies to plda scoring".into())),
        (ScoreKind::Cosine, None) => None,
    };
    let enroll_path = ctx.path(&a.enroll);
    let test_path = a.test.as_ref().map(|p| ctx.path(p));
    let trials_path = a.trials.as_ref().map(|p| ctx.path(p));
    let cohort_path = a.cohort.as_ref().map(|p| ctx.path(p));
    let aug_path = a.enroll_aug.as_ref().map(|p| ctx.path(p));
    let out = ctx.path(&a.out);
    let format = ctx.format;
    let mut inputs = vec![enroll_path.clone()];
    for p in [&test_path, &trials_path, &cohort_path, &aug_path, &plda_path].into_iter().flatten() {
        inputs.push(p.clone());
    }
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs,
    };
    ctx.runner.run(spec, |st| {
        let scorer = match &plda_path {
            Some(p) => Some(PldaModel::from_named(load_named(p)?).and_then(|m| m.scorer()).stage(stage)?),
            None => None,
        };
        let pair = |e: &Embedding, t: &Embedding| -> svkit::Result<f64> {
            match &scorer {
                Some(s) => s.score(&e.vector, &t.vector),
                None => score_cosine(&e.vector, &t.vector),
            }
        };
        let mut enroll = load_embeddings(&enroll_path, format)?;
        let mut eda_note = String::new();
        if let Some(p) = &aug_path {
            let (merged, used) = apply_eda(enroll, &load_embeddings(p, format)?)?;
            enroll = merged;
            eda_note = format!(", {used} augmented enrollments");
        }
        let test = match &test_path {
            Some(p) => load_embeddings(p, format)?,
            None => Vec::new(),
        };
        if let Some(cp) = &cohort_path {
            let cohort = load_embeddings(cp, format)?;
            let items: Vec<Embedding> = enroll.into_iter().chain(test).collect();
            let items = index_by_id(items, "item")?;
            let mut table: BTreeMap<String, Vec<CohortScore>> = BTreeMap::new();
            for (id, e) in &items {
                let row = cohort
                    .iter()
                    .map(|c| Ok(CohortScore::new(c.utt_id.clone(), pair(e, c)?)))
                    .collect::<svkit::Result<Vec<_>>>()
                    .stage(stage)?;
                table.insert(id.clone(), row);
            }
            st.write(&out, |w| write_cohort_scores(w, &table))?;
            return Ok(format!(
                "{stage}: {} items x {} cohort embeddings{eda_note}",
                items.len(),
                cohort.len()
            ));
        }
        let trials_path = trials_path.as_ref().expect("clap requires --trials or --cohort");
        let keys = read_trials(open(trials_path)?).stage(&format!("reading {}", trials_path.display()))?;
        let enroll = index_by_id(enroll, "enrollment")?;
        let test = index_by_id(test, "test")?;
        let scores = score_trials(&keys, |e, t| {
            let ee = enroll.get(e).ok_or_else(|| svkit::Error::Missing(format!("enrollment embedding {e}")))?;
            let tt = test.get(t).ok_or_else(|| svkit::Error::Missing(format!("test embedding {t}")))?;
            pair(ee, tt)
        })
        .stage(stage)?;
        st.write(&out, |w| write_scores(w, &scores))?;
        Ok(format!("{stage}: {} trials{eda_note}", scores.len()))
    })
}

fn span(values: impl Iterator<Item = usize>) -> String {
    let v: BTreeSet<usize> = values.collect();
    match (v.first(), v.last()) {
        (Some(lo), Some(hi)) if lo == hi => lo.to_string(),
        (Some(lo), Some(hi)) => format!("{lo}-{hi}"),
        _ => "0".into(),
    }
}

fn asnorm(ctx: &mut Ctx, a: &AsnormArgs) -> Result<String, CliError> {
    let stage = "asnorm";
    let d = AsNormConfig::default();
    let top_frac = match a.top_frac {
        Some(f) => f,
        None => ctx.cfg.get("asnorm.top_frac")?.unwrap_or(d.top_frac),
    };
    let size_text = match &a.cohort_size {
        Some(t) => Some(t.clone()),
        None => ctx.cfg.raw("asnorm.cohort_size").map(str::to_string),
    };
    let cohort_subsample = match size_text.as_deref() {
        None => d.cohort_subsample,
        Some("all") => None,
        Some(t) => Some(
            t.parse()
                .map_err(|_| CliError::Usage(format!("cohort size must be a positive integer or `all`, got `{t}`")))?,
        ),
    };
    let cfg = AsNormConfig {
        top_frac,
        cohort_subsample,
        seed: ctx.seed,
    };
    let scores_path = ctx.path(&a.scores);
    let e_path = ctx.path(&a.enroll_cohort);
    let t_path = ctx.path(a.test_cohort.as_ref().unwrap_or(&a.enroll_cohort));
    let out = ctx.path(&a.out);
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs: vec![scores_path.clone(), e_path.clone(), t_path.clone()],
    };
    ctx.runner.run(spec, |st| {
        let raw = read_scores(open(&scores_path)?).stage(&format!("reading {}", scores_path.display()))?;
        let e_cohort = read_cohort_scores(open(&e_path)?).stage(&format!("reading {}", e_path.display()))?;
        let t_cohort = if t_path == e_path {
            e_cohort.clone()
        } else {
            read_cohort_scores(open(&t_path)?).stage(&format!("reading {}", t_path.display()))?
        };
        let (normed, stats) = asnorm_detailed(&raw, &e_cohort, &t_cohort, &cfg).stage(stage)?;
        st.write(&out, |w| write_scores(w, &normed))?;
        Ok(format!(
            "{stage}: {} trials, top {} enroll / {} test cohort scores",
            normed.len(),
            span(stats.iter().map(|s| s.n_best1)),
            span(stats.iter().map(|s| s.n_best2))
        ))
    })
}

fn fuse_cmd(ctx: &mut Ctx, a: &FuseArgs) -> Result<String, CliError> {
    let stage = "fuse";
    let paths: Vec<PathBuf> = a.scores.iter().map(|p| ctx.path(p)).collect();
    let out = ctx.path(&a.out);
    let weights = a.weights.clone();
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs: paths.clone(),
    };
    ctx.runner.run(spec, |st| {
        let sets = paths
            .iter()
            .map(|p| read_scores(open(p)?).stage(&format!("reading {}", p.display())))
            .collect::<Result<Vec<_>, _>>()?;
        let fused = fuse(&sets, weights.as_deref()).stage(stage)?;
        st.write(&out, |w| write_scores(w, &fused))?;
        Ok(format!("{stage}: {} systems, {} trials", sets.len(), fused.len()))
    })
}

fn dcf_params(cfg: &Config, a: &EvalArgs) -> Result<DcfParams, CliError> {
    let d = DcfParams::default();
    let get = |flag: Option<f64>, key: &str, default: f64| -> Result<f64, CliError> {
        Ok(match flag {
            Some(v) => v,
            None => cfg.get(key)?.unwrap_or(default),
        })
    };
    Ok(DcfParams {
        p_target: get(a.p_target, "dcf.p_target", d.p_target)?,
        c_miss: get(a.c_miss, "dcf.c_miss", d.c_miss)?,
        c_fa: get(a.c_fa, "dcf.c_fa", d.c_fa)?,
    })
}

/// Read-only, so never gated by the run manifest.
fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<String, CliError> {
    let stage = "eval";
    let p = dcf_params(&ctx.cfg, a)?;
    p.validate().stage(stage)?;
    let scores_path = ctx.path(&a.scores);
    let mut scores = read_scores(open(&scores_path)?).stage(&format!("reading {}", scores_path.display()))?;
    if let Some(t) = &a.trials {
        let t = ctx.path(t);
        let keys = read_trials(open(&t)?).stage(&format!("reading {}", t.display()))?;
        scores = scores.with_labels(&keys).stage(stage)?;
    }
    let eer = compute_eer(&scores).stage(stage)?;
    let min_dcf = compute_min_dcf(&scores, &p).stage(stage)?;
    if let Some(det) = &a.det_out {
        let points = det_points(&scores).stage(stage)?;
        let mut st = crate::run::Staged::new();
        st.write(&ctx.path(det), |w| {
            for (p_fa, p_miss) in &points {
                writeln!(w, "{p_fa:.6} {p_miss:.6}")?;
            }
            Ok(())
        })?;
        st.commit()?;
    }
    Ok(format!("EER {eer:.4} minDCF {min_dcf:.4}"))
}

fn demo(ctx: &mut Ctx, a: &DemoArgs) -> Result<String, CliError> {
    let stage = "demo";
    let d = DemoConfig::default();
    let speed = match a.no_speed {
        true => false,
        false => ctx.cfg.get_bool("demo.speed")?.unwrap_or(true),
    };
    let cfg = DemoConfig {
        seed: ctx.seed,
        n_speakers: match a.speakers {
            Some(n) => n,
            None => ctx.cfg.get("demo.speakers")?.unwrap_or(d.n_speakers),
        },
        utts_per_speaker: match a.utts {
            Some(n) => n,
            None => ctx.cfg.get("demo.utts")?.unwrap_or(d.utts_per_speaker),
        },
        speed_factors: if speed { d.speed_factors.clone() } else { Vec::new() },
        ..d
    };
    cfg.validate().stage(stage)?;
    let Some(out_dir) = a.out_dir.as_ref().map(|p| ctx.path(p)) else {
        return Ok(run_demo(&cfg).stage(stage)?.to_string().trim_end().to_string());
    };
    let spec = StageSpec {
        name: stage,
        args: ctx.args_of(a),
        inputs: Vec::new(),
    };
    ctx.runner.run(spec, |st| {
        let report = run_demo(&cfg).stage(stage)?;
        let text = report.to_string();
        st.write_text(&out_dir.join("report.txt"), &text)?;
        for s in &report.systems {
            st.write(&out_dir.join(format!("{}_cosine.scores", s.name)), |w| write_scores(w, &s.cosine_scores))?;
            st.write(&out_dir.join(format!("{}_plda.scores", s.name)), |w| write_scores(w, &s.plda_scores))?;
        }
        Ok(text.trim_end().to_string())
    })
}
