use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{DMatrix, DVector};

use super::linalg::{floor_psd, Gaussian};
use super::Embedding;
use crate::error::{Error, Result};
use crate::tensor_io::{take, NamedMatrix};

/// Two-covariance PLDA: `x = mu + y + e`, `y ~ N(0, B)`, `e ~ N(0, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mu: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PldaTraining {
    pub model: PldaModel,
    /// Total marginal log-likelihood before the first update and after each
    /// iteration.
    pub log_likelihood: Vec<f64>,
    /// Eigenvalues raised to the floor while repairing covariance updates.
    pub floored: usize,
}

impl PldaModel {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn scorer(&self) -> Result<PldaScorer> {
        let w2b = &self.within + &self.between * 2.0;
        let wb = &self.within + &self.between;
        Ok(PldaScorer {
            mu: self.mu.clone(),
            same_sum: Gaussian::new(&w2b)?,
            same_diff: Gaussian::new(&self.within)?,
            marginal: Gaussian::new(&wb)?,
        })
    }

    /// Exact log p(x_1..x_n | one speaker) for a group of vectors.
    pub fn speaker_log_likelihood(&self, xs: &[&DVector<f64>]) -> Result<f64> {
        let wg = Gaussian::new(&self.within)?;
        self.group_ll(xs, &wg)
    }

    fn group_ll(&self, xs: &[&DVector<f64>], wg: &Gaussian) -> Result<f64> {
        let n = xs.len() as f64;
        let d = self.dim() as f64;
        let mut mean = DVector::zeros(self.dim());
        for x in xs {
            mean += *x;
        }
        mean /= n;
        let scatter: f64 = xs.iter().map(|x| wg.mahalanobis(&(*x - &mean))).sum();
        let marg = Gaussian::new(&(&self.between + &self.within / n))?;
        Ok(-0.5 * (n - 1.0) * d * (2.0 * PI).ln() - 0.5 * (n - 1.0) * wg.log_det() - 0.5 * d * n.ln()
            - 0.5 * scatter
            + marg.log_pdf(&(mean - &self.mu)))
    }

    pub fn to_named(&self) -> Vec<NamedMatrix> {
        vec![
            NamedMatrix::new("mu", DMatrix::from_row_slice(1, self.dim(), self.mu.as_slice())),
            NamedMatrix::new("between", self.between.clone()),
            NamedMatrix::new("within", self.within.clone()),
        ]
    }

    pub fn from_named(mut items: Vec<NamedMatrix>) -> Result<Self> {
        let mu = take(&mut items, "mu")?;
        let between = take(&mut items, "between")?;
        let within = take(&mut items, "within")?;
        let d = mu.len();
        if between.shape() != (d, d) || within.shape() != (d, d) {
            return Err(Error::Format("inconsistent PLDA shapes".into()));
        }
        Ok(Self {
            mu: DVector::from_iterator(d, mu.iter().copied()),
            between,
            within,
        })
    }
}

/// Precomputed factors for fast, exactly symmetric LLR scoring.
#[derive(Debug, Clone)]
pub struct PldaScorer {
    mu: DVector<f64>,
    same_sum: Gaussian,
    same_diff: Gaussian,
    marginal: Gaussian,
}

impl PldaScorer {
    /// log p(e, t | same) - log p(e, t | different).
    ///
    /// Under the same-speaker hypothesis `(e + t)/sqrt2 ~ N(0, W + 2B)` and
    /// `(e - t)/sqrt2 ~ N(0, W)` independently, which keeps the score exactly
    /// symmetric in its arguments.
    pub fn score(&self, enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
        let d = self.mu.len();
        for v in [enroll, test] {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "PLDA scoring",
                    expected: d,
                    actual: v.len(),
                });
            }
        }
        let e = enroll - &self.mu;
        let t = test - &self.mu;
        let u = (&e + &t) * FRAC_1_SQRT_2;
        let v = (&e - &t) * FRAC_1_SQRT_2;
        let same = self.same_sum.log_pdf(&u) + self.same_diff.log_pdf(&v);
        let diff = self.marginal.log_pdf(&e) + self.marginal.log_pdf(&t);
        Ok(same - diff)
    }
}

pub fn score_plda(model: &PldaModel, enroll: &Embedding, test: &Embedding) -> Result<f64> {
    model.scorer()?.score(&enroll.vector, &test.vector)
}

/// EM training with `mu` fixed at the global mean.
pub fn train_plda(train: &[Embedding], n_iter: usize) -> Result<PldaTraining> {
    let dim = super::check_dims(train)?;
    let mut groups: BTreeMap<&str, Vec<&DVector<f64>>> = BTreeMap::new();
    for e in train {
        let spk = e
            .spk_id
            .as_deref()
            .ok_or_else(|| Error::Missing(format!("speaker label for '{}'", e.utt_id)))?;
        groups.entry(spk).or_default().push(&e.vector);
    }
    if groups.len() < 2 {
        return Err(Error::InsufficientData("PLDA needs at least 2 speakers".into()));
    }
    if let Some((spk, _)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::InsufficientData(format!(
            "speaker '{spk}' has a single utterance; within-speaker covariance is unidentifiable"
        )));
    }
    let groups: Vec<Vec<&DVector<f64>>> = groups.into_values().collect();
    let n_total = train.len() as f64;
    let k = groups.len() as f64;
    let mu = train.iter().fold(DVector::zeros(dim), |a, e| a + &e.vector) / n_total;

    // start from the scatter of speaker means and around them
    let mut between = DMatrix::zeros(dim, dim);
    let mut within = DMatrix::zeros(dim, dim);
    for g in &groups {
        let m = super::linalg::mean_of(g);
        let c = &m - &mu;
        between.ger(1.0 / k, &c, &c, 1.0);
        for x in g {
            let r = *x - &m;
            within.ger(1.0 / n_total, &r, &r, 1.0);
        }
    }
    let mut floored = 0;
    let (b, f1) = floor_psd(&between);
    let (w, f2) = floor_psd(&within);
    floored += f1 + f2;
    let mut model = PldaModel { mu, between: b, within: w };
    let mut log_likelihood = vec![total_ll(&model, &groups)?];

    for _ in 0..n_iter {
        let b_inv = Gaussian::new(&model.between)?.inverse();
        let w_inv = Gaussian::new(&model.within)?.inverse();
        let mut posterior_cov: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        let mut new_b = DMatrix::zeros(dim, dim);
        let mut new_w = DMatrix::zeros(dim, dim);
        for g in &groups {
            let n = g.len();
            let c = match posterior_cov.get(&n) {
                Some(c) => c.clone(),
                None => {
                    let p = &b_inv + &w_inv * n as f64;
                    let c = Gaussian::new(&p)?.inverse();
                    posterior_cov.insert(n, c.clone());
                    c
                }
            };
            let s = g.iter().fold(DVector::zeros(dim), |a, x| a + (*x - &model.mu));
            let y = &c * (&w_inv * s);
            new_b += &c + &y * y.transpose();
            for x in g {
                let r = *x - &model.mu - &y;
                new_w += &r * r.transpose();
            }
            new_w += &c * n as f64;
        }
        let (b, f1) = floor_psd(&(new_b / k));
        let (w, f2) = floor_psd(&(new_w / n_total));
        floored += f1 + f2;
        model.between = b;
        model.within = w;
        log_likelihood.push(total_ll(&model, &groups)?);
    }
    Ok(PldaTraining {
        model,
        log_likelihood,
        floored,
    })
}

fn total_ll(model: &PldaModel, groups: &[Vec<&DVector<f64>>]) -> Result<f64> {
    let wg = Gaussian::new(&model.within)?;
    groups.iter().map(|g| model.group_ll(g, &wg)).sum()
}
