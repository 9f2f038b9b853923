use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::linalg::{inv_sqrt_strict, sym_eigen_desc, EIG_FLOOR};
use super::Embedding;
use crate::error::{Error, Result};
use crate::tensor_io::{take, NamedMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessConfig {
    /// Target LDA dimension; `None` skips LDA. Equal to the input dimension
    /// gives a full-rank rotation.
    pub lda_dim: Option<usize>,
    pub whiten: bool,
    pub length_norm: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            lda_dim: Some(200),
            whiten: true,
            length_norm: true,
        }
    }
}

/// Center, whiten, project and length-normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessChain {
    pub mean: DVector<f64>,
    /// `D x D`; identity when whitening is off.
    pub whitener: DMatrix<f64>,
    /// `d x D` projection applied after whitening.
    pub lda: Option<DMatrix<f64>>,
    pub length_norm: bool,
}

impl PreprocessChain {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.lda.as_ref().map_or(self.mean.len(), |l| l.nrows())
    }

    /// Everything before length normalization as one `d x D` matrix.
    pub fn linear_map(&self) -> DMatrix<f64> {
        match &self.lda {
            Some(l) => l * &self.whitener,
            None => self.whitener.clone(),
        }
    }

    pub fn transform(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "preprocess input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut y = &self.whitener * (x - &self.mean);
        if let Some(l) = &self.lda {
            y = l * y;
        }
        if self.length_norm {
            let n = y.norm();
            if !(n > 1e-12) {
                return Err(Error::Degenerate(
                    "vector vanishes before length normalization".into(),
                ));
            }
            y /= n;
        }
        Ok(y)
    }

    pub fn to_named(&self) -> Vec<NamedMatrix> {
        let mut v = vec![
            NamedMatrix::new("mean", DMatrix::from_row_slice(1, self.mean.len(), self.mean.as_slice())),
            NamedMatrix::new("whitener", self.whitener.clone()),
            NamedMatrix::new(
                "length_norm",
                DMatrix::from_element(1, 1, if self.length_norm { 1.0 } else { 0.0 }),
            ),
        ];
        if let Some(l) = &self.lda {
            v.push(NamedMatrix::new("lda", l.clone()));
        }
        v
    }

    pub fn from_named(mut items: Vec<NamedMatrix>) -> Result<Self> {
        let mean = take(&mut items, "mean")?;
        let whitener = take(&mut items, "whitener")?;
        let norm = take(&mut items, "length_norm")?;
        let lda = items.iter().any(|i| i.name == "lda").then(|| take(&mut items, "lda")).transpose()?;
        let d = mean.len();
        if whitener.shape() != (d, d) || lda.as_ref().is_some_and(|l| l.ncols() != d) {
            return Err(Error::Format("inconsistent preprocessing chain shapes".into()));
        }
        Ok(Self {
            mean: DVector::from_iterator(d, mean.iter().copied()),
            whitener,
            lda,
            length_norm: norm[(0, 0)] != 0.0,
        })
    }
}

pub fn apply_preprocess(chain: &PreprocessChain, e: &Embedding) -> Result<Embedding> {
    Ok(Embedding {
        vector: chain.transform(&e.vector)?,
        utt_id: e.utt_id.clone(),
        spk_id: e.spk_id.clone(),
    })
}

/// Fits the chain on labelled training embeddings.
pub fn fit_preprocess(train: &[Embedding], cfg: &PreprocessConfig) -> Result<PreprocessChain> {
    let dim = super::check_dims(train)?;
    let n = train.len() as f64;
    let mut mean = DVector::zeros(dim);
    for e in train {
        mean += &e.vector;
    }
    mean /= n;

    let whitener = if cfg.whiten {
        let mut cov = DMatrix::zeros(dim, dim);
        for e in train {
            let c = &e.vector - &mean;
            cov.ger(1.0 / n, &c, &c, 1.0);
        }
        let (vals, vecs) = sym_eigen_desc(&cov);
        let max = vals.max();
        if !(max > 0.0) {
            return Err(Error::Degenerate("training embeddings have zero spread".into()));
        }
        let scale = vals.map(|v| 1.0 / v.max(EIG_FLOOR * max).sqrt());
        DMatrix::from_diagonal(&scale) * vecs.transpose()
    } else {
        DMatrix::identity(dim, dim)
    };

    let lda = match cfg.lda_dim {
        None => None,
        Some(d) => {
            let whitened: Vec<DVector<f64>> = train.iter().map(|e| &whitener * (&e.vector - &mean)).collect();
            let labels = super::speaker_labels(train)?;
            Some(lda(&whitened, &labels, d)?)
        }
    };
    Ok(PreprocessChain {
        mean,
        whitener,
        lda,
        length_norm: cfg.length_norm,
    })
}

/// Linear discriminant directions as rows of a `dim x D` matrix, ordered by
/// decreasing between/within ratio and scaled so that `v^T S_w v = 1`.
///
/// `dim` may not exceed `classes - 1` unless it equals `D` (a full-rank
/// rotation that keeps every direction).
pub fn lda(data: &[DVector<f64>], labels: &[usize], dim: usize) -> Result<DMatrix<f64>> {
    if data.len() != labels.len() || data.is_empty() {
        return Err(Error::arg("labels", "one label per vector required"));
    }
    let d_in = data[0].len();
    let mut groups: BTreeMap<usize, Vec<&DVector<f64>>> = BTreeMap::new();
    for (x, &l) in data.iter().zip(labels) {
        groups.entry(l).or_default().push(x);
    }
    let k = groups.len();
    if k < 2 || groups.values().any(|g| g.len() < 2) {
        return Err(Error::InsufficientData(
            "LDA needs at least 2 classes with at least 2 vectors each".into(),
        ));
    }
    if dim == 0 || dim > d_in || (dim > k - 1 && dim != d_in) {
        return Err(Error::InvalidConfig(format!(
            "LDA dimension {dim} must be <= min({d_in}, {}) or equal {d_in}",
            k - 1
        )));
    }
    let n = data.len() as f64;
    let global = super::linalg::mean_of(&data.iter().collect::<Vec<_>>());
    let mut sw = DMatrix::zeros(d_in, d_in);
    let mut sb = DMatrix::zeros(d_in, d_in);
    for g in groups.values() {
        let m = super::linalg::mean_of(g);
        for x in g {
            let c = *x - &m;
            sw.ger(1.0 / n, &c, &c, 1.0);
        }
        let c = &m - &global;
        sb.ger(g.len() as f64 / n, &c, &c, 1.0);
    }
    let sw_is = inv_sqrt_strict(&sw, "within-class scatter")?;
    let m = &sw_is * &sb * &sw_is;
    let (_, u) = sym_eigen_desc(&m);
    let v = &sw_is * u.columns(0, dim);
    Ok(v.transpose())
}
