use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nnet::Dense;

const NORM_FLOOR: f64 = 1e-12;

/// Cosine classifier: length-normalized embeddings against length-normalized
/// class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AmsHead {
    /// `classes x dim`
    pub weight: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct AmsCache {
    e_hat: DMatrix<f64>,
    e_norm: Vec<f64>,
    w_hat: DMatrix<f64>,
    w_norm: Vec<f64>,
    cos: DMatrix<f64>,
}

impl AmsHead {
    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Self {
            weight: DMatrix::from_fn(classes, dim, |_, _| normal.sample(&mut rng)),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    /// Returns the `N x C` cosine matrix for `N x dim` embeddings.
    pub fn forward(&self, emb: &DMatrix<f64>) -> Result<(DMatrix<f64>, AmsCache)> {
        if emb.ncols() != self.weight.ncols() {
            return Err(Error::DimensionMismatch {
                context: "AM-softmax head input",
                expected: self.weight.ncols(),
                actual: emb.ncols(),
            });
        }
        let (e_hat, e_norm) = normalize_rows(emb);
        let (w_hat, w_norm) = normalize_rows(&self.weight);
        let cos = (&e_hat * w_hat.transpose()).map(|c| c.clamp(-1.0, 1.0));
        Ok((
            cos.clone(),
            AmsCache {
                e_hat,
                e_norm,
                w_hat,
                w_norm,
                cos,
            },
        ))
    }

    /// Returns `(grad_embeddings, grad_weight)`.
    pub fn backward(&self, cache: &AmsCache, grad: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let gc = grad.component_mul(&cache.cos);
        // d cos_ic / d e_i = (w_hat_c - cos_ic e_hat_i) / |e_i|
        let mut ge = grad * &cache.w_hat;
        for i in 0..ge.nrows() {
            let s: f64 = gc.row(i).sum();
            let scaled = cache.e_hat.row(i) * s;
            let mut row = ge.row_mut(i);
            row -= scaled;
            row /= cache.e_norm[i];
        }
        // d cos_ic / d w_c = (e_hat_i - cos_ic w_hat_c) / |w_c|
        let mut gw = grad.transpose() * &cache.e_hat;
        for c in 0..gw.nrows() {
            let s: f64 = gc.column(c).sum();
            let scaled = cache.w_hat.row(c) * s;
            let mut row = gw.row_mut(c);
            row -= scaled;
            row /= cache.w_norm[c];
        }
        (ge, gw)
    }
}

/// Softmax classifier branch: an optional hidden dense layer followed by an
/// affine output layer, no normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct CeHead {
    pub hidden: Option<Dense>,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct CeCache {
    input: DMatrix<f64>,
    hidden_out: Option<DMatrix<f64>>,
}

impl CeHead {
    pub fn new(in_dim: usize, hidden: Option<usize>, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = hidden.map(|h| {
            let mut d = Dense::zeros(in_dim, h);
            d.init(&mut rng, 1.0);
            d
        });
        let mut out = Dense::zeros(hidden.as_ref().map_or(in_dim, Dense::out_dim), classes);
        out.init(&mut rng, 1.0);
        Self { hidden, out }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, CeCache)> {
        let hidden_out = match &self.hidden {
            Some(h) => Some(h.forward(x)?),
            None => None,
        };
        let logits = self.out.forward(hidden_out.as_ref().unwrap_or(x))?;
        Ok((
            logits,
            CeCache {
                input: x.clone(),
                hidden_out,
            },
        ))
    }

    /// Returns the input gradient and parameter gradients in
    /// [`CeHead::params_mut`] order.
    pub fn backward(&self, cache: &CeCache, grad: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let out_in = cache.hidden_out.as_ref().unwrap_or(&cache.input);
        let (g, gw, gb) = self.out.backward(out_in, grad);
        match &self.hidden {
            Some(h) => {
                let (gx, hw, hb) = h.backward(&cache.input, &g);
                (gx, vec![hw, hb, gw, gb])
            }
            None => (g, vec![gw, gb]),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut v = Vec::new();
        if let Some(h) = &mut self.hidden {
            v.push(&mut h.weight);
            v.push(&mut h.bias);
        }
        v.push(&mut self.out.weight);
        v.push(&mut self.out.bias);
        v
    }
}

fn normalize_rows(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for i in 0..m.nrows() {
        let n = m.row(i).norm().max(NORM_FLOOR);
        let mut row = out.row_mut(i);
        row /= n;
        norms.push(n);
    }
    (out, norms)
}
