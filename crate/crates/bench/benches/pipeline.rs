use std::collections::BTreeMap;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svkit::augment::speed_perturb;
use svkit::backend::{train_plda, Embedding};
use svkit::demo::DEMO_NETWORK;
use svkit::evalnorm::{asnorm, compute_eer, compute_min_dcf, AsNormConfig, CohortScore, Trial};
use svkit::features::{extract_mfb, extract_mfcc};
use svkit::synth::{synth_corpus, SynthConfig};
use svkit::{DcfParams, FeatureConfig, Network, NetworkSpec, TrialScores};

fn one_second() -> svkit::Waveform {
    let cfg = SynthConfig {
        duration: (1.0, 1.0),
        ..SynthConfig::default()
    };
    synth_corpus(1, 1, &cfg, 1).unwrap().1.remove(0).wav
}

fn features(c: &mut Criterion) {
    let wav = one_second();
    c.bench_function("mfb_64_1s", |b| b.iter(|| extract_mfb(black_box(&wav), &FeatureConfig::mfb()).unwrap()));
    c.bench_function("mfcc_30_1s", |b| b.iter(|| extract_mfcc(black_box(&wav), &FeatureConfig::mfcc()).unwrap()));
    c.bench_function("speed_perturb_1s", |b| b.iter(|| speed_perturb(black_box(&wav), 1.1).unwrap()));
}

fn network(c: &mut Criterion) {
    let spec: NetworkSpec = DEMO_NETWORK.parse().unwrap();
    let net = Network::new(&spec, 0).unwrap();
    let feat = extract_mfcc(&one_second(), &FeatureConfig::mfcc()).unwrap();
    c.bench_function("demo_net_forward_1s", |b| b.iter(|| net.forward(black_box(&feat.values)).unwrap()));
}

fn random_scores(n: usize, seed: u64) -> TrialScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tar, non): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|_| (rng.random_range(0.0..2.0), rng.random_range(-1.5..0.5)))
        .unzip();
    TrialScores::from_labeled(&tar, &non).unwrap()
}

fn metrics(c: &mut Criterion) {
    let scores = random_scores(10_000, 3);
    c.bench_function("eer_20k", |b| b.iter(|| compute_eer(black_box(&scores)).unwrap()));
    let p = DcfParams::default();
    c.bench_function("min_dcf_20k", |b| b.iter(|| compute_min_dcf(black_box(&scores), &p).unwrap()));
}

fn backend(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut embs = Vec::new();
    for s in 0..50 {
        let center: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in 0..6 {
            let v = DVector::from_iterator(32, center.iter().map(|c| c + 0.3 * rng.random_range(-1.0..1.0)));
            embs.push(Embedding::new(format!("s{s}_u{u}"), Some(format!("s{s}")), v));
        }
    }
    c.bench_function("plda_em_10_iters_32d", |b| b.iter(|| train_plda(black_box(&embs), 10).unwrap()));
    let scorer = train_plda(&embs, 10).unwrap().model.scorer().unwrap();
    c.bench_function("plda_score_32d", |b| b.iter(|| scorer.score(black_box(&embs[0].vector), &embs[7].vector).unwrap()));
}

fn normalization(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cohort = BTreeMap::new();
    let mut trials = Vec::new();
    for i in 0..20 {
        for side in ["e", "t"] {
            let row = (0..3000).map(|k| CohortScore::new(format!("c{k}"), rng.random_range(-1.0..1.0))).collect();
            cohort.insert(format!("{side}{i}"), row);
        }
        trials.push(Trial::new(format!("e{i}"), format!("t{i}"), rng.random_range(-1.0..1.0), None));
    }
    let raw = TrialScores::new(trials).unwrap();
    let cfg = AsNormConfig::default();
    c.bench_function("asnorm_20_trials_2700_cohort", |b| b.iter(|| asnorm(black_box(&raw), &cohort, &cohort, &cfg).unwrap()));
}

criterion_group!(benches, features, network, metrics, backend, normalization);
criterion_main!(benches);
