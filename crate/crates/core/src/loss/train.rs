use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ams_loss, ce_loss, AmsConfig, AmsHead, CeHead, CosineLogits};
use crate::error::{Error, Result};
use crate::nnet::{Network, ParamGradients};

/// Relative improvement below which an epoch counts as stale.
pub const PLATEAU_REL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Affine softmax classifier on the embedding.
    Softmax,
    /// Additive-margin softmax on the embedding.
    Ams,
    /// AM-softmax on the embedding plus a CE branch forking after pooling.
    Joint,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" | "ce" => Ok(Objective::Softmax),
            "ams" => Ok(Objective::Ams),
            "ceams" | "joint" => Ok(Objective::Joint),
            other => Err(Error::InvalidConfig(format!("unknown objective '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub objective: Objective,
    pub lr_schedule: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub ce_weight_schedule: Vec<f64>,
    pub ams: AmsConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for per-example gradients; 0 picks the machine's
    /// parallelism. Results do not depend on this.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            objective: Objective::Joint,
            lr_schedule: vec![0.1, 0.01, 0.001],
            momentum: 0.9,
            weight_decay: 1e-4,
            plateau_patience: 3,
            ce_weight_schedule: vec![1.0, 0.5, 0.1],
            ams: AmsConfig::default(),
            epochs: 20,
            batch_size: 32,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.ams.validate()?;
        if self.lr_schedule.is_empty() || self.lr_schedule.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig("learning rates must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.plateau_patience == 0 {
            return Err(Error::InvalidConfig("batch size and plateau patience must be >= 1".into()));
        }
        if self.objective == Objective::Joint {
            super::JointLossConfig {
                ce_weight_schedule: self.ce_weight_schedule.clone(),
                plateau_patience: self.plateau_patience,
            }
            .validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub feat: DMatrix<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub epoch_loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub ce_weight: Vec<f64>,
    /// Epochs after which the schedules advanced.
    pub switches: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub ams_head: Option<AmsHead>,
    pub ce_head: Option<CeHead>,
    pub trace: LossTrace,
}

/// Advances through `n_stages` schedule entries whenever the observed loss
/// fails to improve by [`PLATEAU_REL_TOL`] (relative to the best so far) for
/// `patience` consecutive observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    patience: usize,
    n_stages: usize,
    stage: usize,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(n_stages: usize, patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            n_stages: n_stages.max(1),
            stage: 0,
            best: None,
            stale: 0,
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    /// Records one epoch's loss; returns true when the stage advanced.
    pub fn observe(&mut self, loss: f64) -> bool {
        match self.best {
            Some(best) if loss >= best - PLATEAU_REL_TOL * best.abs() => self.stale += 1,
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        if self.stale >= self.patience && self.stage + 1 < self.n_stages {
            self.stage += 1;
            self.stale = 0;
            return true;
        }
        false
    }
}

/// SGD with momentum and L2 weight decay, in the `v = mu v + g + wd theta;
/// theta -= lr v` form.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<DMatrix<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut DMatrix<f64>>, grads: &[DMatrix<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| DMatrix::zeros(g.nrows(), g.ncols())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            *v *= self.momentum;
            *v += g;
            *v += &*p * self.weight_decay;
            *p -= &*v * lr;
        }
    }
}

struct Heads {
    ams: Option<AmsHead>,
    ce: Option<CeHead>,
}

impl Heads {
    fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut v = Vec::new();
        if let Some(a) = &mut self.ams {
            v.push(&mut a.weight);
        }
        if let Some(c) = &mut self.ce {
            v.extend(c.params_mut());
        }
        v
    }
}

struct ExampleGrad {
    loss: f64,
    net: ParamGradients,
    heads: Vec<DMatrix<f64>>,
}

/// Trains `net` plus freshly initialized classification heads on `data`.
pub fn train_toy(
    net: Network,
    data: &[TrainExample],
    n_classes: usize,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if n_classes < 2 {
        return Err(Error::InsufficientData(format!("need >= 2 classes, got {n_classes}")));
    }
    if let Some(bad) = data.iter().find(|e| e.label >= n_classes || e.feat.ncols() != net.input_dim()) {
        return Err(Error::arg(
            "data",
            format!(
                "example with label {} and width {} does not fit {} classes / input {}",
                bad.label,
                bad.feat.ncols(),
                n_classes,
                net.input_dim()
            ),
        ));
    }

    let emb_dim = net.embedding_dim();
    let mut heads = match opts.objective {
        Objective::Softmax => Heads {
            ams: None,
            ce: Some(CeHead::new(emb_dim, None, n_classes, opts.seed ^ 0xce)),
        },
        Objective::Ams => Heads {
            ams: Some(AmsHead::new(emb_dim, n_classes, opts.seed ^ 0xa5)),
            ce: None,
        },
        Objective::Joint => Heads {
            ams: Some(AmsHead::new(emb_dim, n_classes, opts.seed ^ 0xa5)),
            ce: Some(CeHead::new(net.pooled_dim(), Some(emb_dim), n_classes, opts.seed ^ 0xce)),
        },
    };

    let threads = match opts.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let n_stages = match opts.objective {
        Objective::Joint => opts.lr_schedule.len().max(opts.ce_weight_schedule.len()),
        _ => opts.lr_schedule.len(),
    };
    let mut scheduler = PlateauScheduler::new(n_stages, opts.plateau_patience);
    let mut sgd = Sgd::new(opts.momentum, opts.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = LossTrace::default();
    let mut net = net;
    let mut example_counter: u64 = 0;

    for epoch in 0..opts.epochs {
        let stage = scheduler.stage();
        let lr = opts.lr_schedule[stage.min(opts.lr_schedule.len() - 1)];
        let ce_weight = match opts.objective {
            Objective::Joint => opts.ce_weight_schedule[stage.min(opts.ce_weight_schedule.len() - 1)],
            _ => 0.0,
        };
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let jobs: Vec<(usize, u64)> = batch
                .iter()
                .map(|&i| {
                    example_counter += 1;
                    (i, example_counter)
                })
                .collect();
            let results = run_parallel(&jobs, threads, |&(i, stream)| {
                example_grad(&net, &heads, &data[i], opts, ce_weight, scale, stream)
            })?;
            let mut net_grad = ParamGradients::zeros_like(&net);
            let mut head_grad: Vec<DMatrix<f64>> = results[0]
                .heads
                .iter()
                .map(|g| DMatrix::zeros(g.nrows(), g.ncols()))
                .collect();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
                net_grad.add_scaled(&r.net, 1.0);
                for (a, b) in head_grad.iter_mut().zip(&r.heads) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() || !net_grad.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged in epoch {epoch} (loss {batch_loss}, lr {lr})"
                )));
            }
            total += batch_loss * batch.len() as f64;
            let mut grads = net_grad.tensors;
            grads.extend(head_grad);
            let mut params = net.params_mut();
            params.extend(heads.params_mut());
            sgd.step(params, &grads, lr);
        }
        let mean = total / data.len() as f64;
        trace.epoch_loss.push(mean);
        trace.lr.push(lr);
        trace.ce_weight.push(ce_weight);
        if scheduler.observe(mean) {
            trace.switches.push(epoch);
        }
    }
    Ok(TrainOutcome {
        net,
        ams_head: heads.ams,
        ce_head: heads.ce,
        trace,
    })
}

fn example_grad(
    net: &Network,
    heads: &Heads,
    ex: &TrainExample,
    opts: &TrainOptions,
    ce_weight: f64,
    scale: f64,
    stream: u64,
) -> Result<ExampleGrad> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);
    let trace = net.forward_train(&ex.feat, &mut rng)?;
    let last = net.layers().len() - 1;
    let labels = [ex.label];
    let mut loss = 0.0;
    let mut head_grads = Vec::new();
    let mut taps: Vec<(usize, DMatrix<f64>)> = Vec::new();

    if let Some(ams) = &heads.ams {
        let (cos, cache) = ams.forward(trace.output())?;
        let (l, g) = ams_loss(&CosineLogits::new(cos, labels.to_vec())?, &opts.ams)?;
        let (ge, gw) = ams.backward(&cache, &(g * scale));
        loss += l * scale;
        head_grads.push(gw);
        taps.push((last, ge));
    }
    if let Some(ce) = &heads.ce {
        let (tap, weight) = match opts.objective {
            Objective::Joint => (net.pool_index(), ce_weight),
            _ => (last, 1.0),
        };
        let (z, cache) = ce.forward(&trace.outputs[tap])?;
        let (l, g) = ce_loss(&z, &labels)?;
        let (gx, gp) = ce.backward(&cache, &(g * (scale * weight)));
        loss += l * scale * weight;
        head_grads.extend(gp);
        taps.push((tap, gx));
    }
    let tap_refs: Vec<(usize, &DMatrix<f64>)> = taps.iter().map(|(i, g)| (*i, g)).collect();
    let (net_grad, _) = net.backward_taps(&trace, &tap_refs)?;
    Ok(ExampleGrad {
        loss,
        net: net_grad,
        heads: head_grads,
    })
}

/// Maps `f` over `jobs` on up to `threads` scoped threads, preserving order.
fn run_parallel<J: Sync, T: Send>(
    jobs: &[J],
    threads: usize,
    f: impl Fn(&J) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let chunk = jobs.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(jobs.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}
