//! Classification objectives: softmax cross-entropy, additive-margin softmax
//! and their joint use, plus the SGD trainer that drives them.

mod heads;
mod train;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use heads::{AmsHead, CeHead};
pub use train::{
    train_toy, LossTrace, Objective, PlateauScheduler, Sgd, TrainExample, TrainOptions,
    TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmsConfig {
    pub s: f64,
    pub m: f64,
}

impl Default for AmsConfig {
    fn default() -> Self {
        Self { s: 30.0, m: 0.1 }
    }
}

impl AmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::InvalidConfig(format!("AM-softmax scale must be > 0, got {}", self.s)));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::InvalidConfig(format!(
                "AM-softmax margin must be in [0, 1), got {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Cosine similarities between a batch of embeddings and every class.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineLogits {
    /// `N x C`, every entry in [-1, 1].
    pub values: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl CosineLogits {
    pub fn new(values: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        check_batch(&values, &labels)?;
        if let Some(v) = values.iter().find(|v| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(*v)) {
            return Err(Error::arg("logits", format!("cosine {v} outside [-1, 1]")));
        }
        Ok(Self { values, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLossConfig {
    pub ce_weight_schedule: Vec<f64>,
    pub plateau_patience: usize,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        Self {
            ce_weight_schedule: vec![1.0, 0.5, 0.1],
            plateau_patience: 3,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.ce_weight_schedule;
        if w.is_empty() || w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidConfig(
                "CE weight schedule must be non-empty and positive".into(),
            ));
        }
        if w.windows(2).any(|p| p[1] > p[0]) {
            return Err(Error::InvalidConfig(format!(
                "CE weight schedule must be nonincreasing, got {w:?}"
            )));
        }
        if self.plateau_patience == 0 {
            return Err(Error::InvalidConfig("plateau patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean additive-margin softmax loss and its gradient with respect to the
/// cosines. The margin is subtracted from the target cosine only.
pub fn ams_loss(logits: &CosineLogits, cfg: &AmsConfig) -> Result<(f64, DMatrix<f64>)> {
    cfg.validate()?;
    check_batch(&logits.values, &logits.labels)?;
    let mut z = &logits.values * cfg.s;
    for (i, &y) in logits.labels.iter().enumerate() {
        z[(i, y)] -= cfg.s * cfg.m;
    }
    let (loss, mut grad) = softmax_xent(&z, &logits.labels);
    grad *= cfg.s;
    Ok((loss, grad))
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn ce_loss(logits: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    check_batch(logits, labels)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    Ok(softmax_xent(logits, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub loss: f64,
    pub ams: f64,
    pub ce: f64,
    /// Gradient for the AM-softmax head's cosines.
    pub ams_grad: DMatrix<f64>,
    /// Gradient for the CE head's logits, already scaled by the CE weight.
    pub ce_grad: DMatrix<f64>,
}

/// `L_AMS + ce_weight * L_CE` over two heads that share labels.
pub fn joint_loss(
    ams_logits: &CosineLogits,
    ce_logits: &DMatrix<f64>,
    labels: &[usize],
    cfg: &AmsConfig,
    ce_weight: f64,
) -> Result<JointLoss> {
    if !(ce_weight >= 0.0 && ce_weight.is_finite()) {
        return Err(Error::arg("ce_weight", format!("must be >= 0, got {ce_weight}")));
    }
    if ams_logits.labels != labels || ce_logits.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "joint loss batch",
            expected: labels.len(),
            actual: ce_logits.nrows(),
        });
    }
    let (ams, ams_grad) = ams_loss(ams_logits, cfg)?;
    let (ce, mut ce_grad) = ce_loss(ce_logits, labels)?;
    ce_grad *= ce_weight;
    Ok(JointLoss {
        loss: ams + ce_weight * ce,
        ams,
        ce,
        ams_grad,
        ce_grad,
    })
}

fn softmax_xent(z: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = z.nrows() as f64;
    let mut grad = DMatrix::zeros(z.nrows(), z.ncols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = z.row(i);
        let max = row.max();
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += if z[(i, y)] >= max {
            // keeps precision when the target dominates
            let rest: f64 = (0..z.ncols())
                .filter(|&c| c != y)
                .map(|c| (z[(i, c)] - z[(i, y)]).exp())
                .sum();
            rest.ln_1p()
        } else {
            lse - z[(i, y)]
        };
        for c in 0..z.ncols() {
            grad[(i, c)] = (z[(i, c)] - lse).exp() / n;
        }
        grad[(i, y)] -= 1.0 / n;
    }
    (loss / n, grad)
}

fn check_batch(values: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if values.nrows() == 0 || labels.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    if values.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "logit rows vs labels",
            expected: labels.len(),
            actual: values.nrows(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= values.ncols()) {
        return Err(Error::arg(
            "labels",
            format!("label {y} out of range for {} classes", values.ncols()),
        ));
    }
    Ok(())
}
