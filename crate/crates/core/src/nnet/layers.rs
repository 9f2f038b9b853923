//! Layer primitives with hand-derived backward passes.
//!
//! Activations are `frames x channels` matrices. Pooling collapses the frame
//! axis, after which layers see a single `1 x dim` row.

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Floor applied to the pooled variance before the square root.
pub const STATS_VAR_FLOOR: f64 = 1e-10;
const NORM_EPS: f64 = 1e-5;

/// Affine map over spliced temporal context: output frame `t` sees input
/// frames `t + o` for every offset `o`, with indices clamped to the valid
/// range (edge frames are replicated).
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAffine {
    pub offsets: Vec<isize>,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x (offsets.len() * in_dim)`
    pub weight: DMatrix<f64>,
    /// `1 x out_dim`
    pub bias: DMatrix<f64>,
}

impl TemporalAffine {
    pub fn zeros(offsets: Vec<isize>, in_dim: usize, out_dim: usize) -> Result<Self> {
        if offsets.is_empty() || offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "context offsets must be non-empty and strictly increasing, got {offsets:?}"
            )));
        }
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig("layer dimensions must be >= 1".into()));
        }
        let k = offsets.len();
        Ok(Self {
            offsets,
            in_dim,
            out_dim,
            weight: DMatrix::zeros(out_dim, k * in_dim),
            bias: DMatrix::zeros(1, out_dim),
        })
    }

    /// Symmetric "same" convolution with an odd kernel.
    pub fn conv(kernel: usize, channels_in: usize, channels_out: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("kernel size {kernel} must be odd")));
        }
        let half = (kernel / 2) as isize;
        Self::zeros((-half..=half).collect(), channels_in, channels_out)
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R, gain: f64) {
        let std = gain / (self.weight.ncols() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        self.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        self.bias.fill(0.0);
    }

    fn splice(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let frames = x.nrows() as isize;
        let in_dim = self.in_dim;
        DMatrix::from_fn(x.nrows(), self.offsets.len() * in_dim, |t, col| {
            let j = col / in_dim;
            let src = (t as isize + self.offsets[j]).clamp(0, frames - 1) as usize;
            x[(src, col % in_dim)]
        })
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_cols("temporal affine input", self.in_dim, x)?;
        if x.nrows() == 0 {
            return Err(Error::InsufficientData("no frames".into()));
        }
        let spliced = self.splice(x);
        let mut y = &spliced * self.weight.transpose();
        add_row(&mut y, &self.bias);
        Ok((y, spliced))
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(
        &self,
        spliced: &DMatrix<f64>,
        grad: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let gw = grad.transpose() * spliced;
        let gb = column_sums(grad);
        let gs = grad * &self.weight;
        let frames = grad.nrows() as isize;
        let mut gx = DMatrix::zeros(grad.nrows(), self.in_dim);
        for t in 0..grad.nrows() {
            for (j, &o) in self.offsets.iter().enumerate() {
                let src = (t as isize + o).clamp(0, frames - 1) as usize;
                for c in 0..self.in_dim {
                    gx[(src, c)] += gs[(t, j * self.in_dim + c)];
                }
            }
        }
        (gx, gw, gb)
    }
}

/// Per-row affine map `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DMatrix<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: DMatrix::zeros(out_dim, in_dim),
            bias: DMatrix::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R, gain: f64) {
        let std = gain / (self.in_dim() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        self.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        self.bias.fill(0.0);
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_cols("dense input", self.in_dim(), x)?;
        let mut y = x * self.weight.transpose();
        add_row(&mut y, &self.bias);
        Ok(y)
    }

    pub fn backward(
        &self,
        x: &DMatrix<f64>,
        grad: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (grad * &self.weight, grad.transpose() * x, column_sums(grad))
    }
}

/// Two-factor linear bottleneck `y = (x A^T) B^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredDense {
    /// `rank x in_dim`
    pub first: DMatrix<f64>,
    /// `out_dim x rank`
    pub second: DMatrix<f64>,
    pub bias: DMatrix<f64>,
}

impl FactoredDense {
    pub fn zeros(in_dim: usize, rank: usize, out_dim: usize) -> Self {
        Self {
            first: DMatrix::zeros(rank, in_dim),
            second: DMatrix::zeros(out_dim, rank),
            bias: DMatrix::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.second.nrows()
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let a = Normal::new(0.0, 1.0 / (self.first.ncols() as f64).sqrt()).expect("finite");
        let b = Normal::new(0.0, 1.0 / (self.second.ncols() as f64).sqrt()).expect("finite");
        self.first.iter_mut().for_each(|w| *w = a.sample(rng));
        self.second.iter_mut().for_each(|w| *w = b.sample(rng));
        self.bias.fill(0.0);
    }
}

/// Res2Net block over `scale` channel groups of `width` channels.
///
/// Group 1 passes through; group `i >= 2` is `K_i(x_i + y_{i-1})`. With a
/// single group the one group is convolved. The concatenated groups are
/// added to the input and rectified.
#[derive(Debug, Clone, PartialEq)]
pub struct Res2Block {
    pub scale: usize,
    pub width: usize,
    pub kernel: usize,
    /// One conv per convolved group: `scale - 1` convs, or one when `scale == 1`.
    pub convs: Vec<TemporalAffine>,
}

impl Res2Block {
    pub fn zeros(scale: usize, width: usize, kernel: usize) -> Result<Self> {
        if scale == 0 || width == 0 {
            return Err(Error::InvalidConfig("res2 scale and width must be >= 1".into()));
        }
        let n = if scale == 1 { 1 } else { scale - 1 };
        let convs = (0..n)
            .map(|_| TemporalAffine::conv(kernel, width, width))
            .collect::<Result<_>>()?;
        Ok(Self {
            scale,
            width,
            kernel,
            convs,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale * self.width
    }

    /// Index into `convs` for group `i` (0-based), if that group is convolved.
    fn conv_for(&self, group: usize) -> Option<usize> {
        if self.scale == 1 {
            Some(0)
        } else if group == 0 {
            None
        } else {
            Some(group - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: TemporalAffine,
    pub conv2: TemporalAffine,
}

impl ResBlock {
    pub fn zeros(channels: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv1: TemporalAffine::conv(kernel, channels, channels)?,
            conv2: TemporalAffine::conv(kernel, channels, channels)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Temporal affine followed by ReLU.
    Tdnn(TemporalAffine),
    /// `relu(conv2(relu(conv1(x))) + x)`
    Res(ResBlock),
    Res2(Res2Block),
    /// Per-dimension mean and standard deviation over frames.
    StatsPool,
    Dense(Dense),
    FactoredDense(FactoredDense),
    Relu,
    /// Per-utterance normalization of every channel over frames; stands in
    /// for batch normalization with single-utterance batches.
    FeatureNorm,
    Dropout(f64),
}

/// Whatever a layer needs from its forward pass to run backward.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Tdnn {
        spliced: DMatrix<f64>,
        pre: DMatrix<f64>,
    },
    Res {
        s1: DMatrix<f64>,
        h1_pre: DMatrix<f64>,
        s2: DMatrix<f64>,
        out_pre: DMatrix<f64>,
    },
    Res2 {
        spliced: Vec<Option<DMatrix<f64>>>,
        out_pre: DMatrix<f64>,
    },
    StatsPool {
        x: DMatrix<f64>,
        mean: Vec<f64>,
        std: Vec<f64>,
        floored: Vec<bool>,
    },
    Input(DMatrix<f64>),
    FactoredDense {
        x: DMatrix<f64>,
        hidden: DMatrix<f64>,
    },
    Relu(DMatrix<f64>),
    Norm {
        y: DMatrix<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Option<DMatrix<f64>>),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Tdnn(_) => "tdnn",
            Layer::Res(_) => "res_block",
            Layer::Res2(_) => "res2_block",
            Layer::StatsPool => "stats_pool",
            Layer::Dense(_) => "dense",
            Layer::FactoredDense(_) => "factored_dense",
            Layer::Relu => "relu",
            Layer::FeatureNorm => "batchnorm",
            Layer::Dropout(_) => "dropout",
        }
    }

    /// Parameter tensors with their local names, in a fixed order.
    pub fn params(&self) -> Vec<(String, &DMatrix<f64>)> {
        match self {
            Layer::Tdnn(a) => vec![("weight".into(), &a.weight), ("bias".into(), &a.bias)],
            Layer::Res(b) => vec![
                ("conv1.weight".into(), &b.conv1.weight),
                ("conv1.bias".into(), &b.conv1.bias),
                ("conv2.weight".into(), &b.conv2.weight),
                ("conv2.bias".into(), &b.conv2.bias),
            ],
            Layer::Res2(b) => b
                .convs
                .iter()
                .enumerate()
                .flat_map(|(i, c)| {
                    [
                        (format!("conv{i}.weight"), &c.weight),
                        (format!("conv{i}.bias"), &c.bias),
                    ]
                })
                .collect(),
            Layer::Dense(d) => vec![("weight".into(), &d.weight), ("bias".into(), &d.bias)],
            Layer::FactoredDense(f) => vec![
                ("first".into(), &f.first),
                ("second".into(), &f.second),
                ("bias".into(), &f.bias),
            ],
            Layer::StatsPool | Layer::Relu | Layer::FeatureNorm | Layer::Dropout(_) => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        match self {
            Layer::Tdnn(a) => vec![&mut a.weight, &mut a.bias],
            Layer::Res(b) => vec![
                &mut b.conv1.weight,
                &mut b.conv1.bias,
                &mut b.conv2.weight,
                &mut b.conv2.bias,
            ],
            Layer::Res2(b) => b
                .convs
                .iter_mut()
                .flat_map(|c| [&mut c.weight, &mut c.bias])
                .collect(),
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::FactoredDense(f) => vec![&mut f.first, &mut f.second, &mut f.bias],
            Layer::StatsPool | Layer::Relu | Layer::FeatureNorm | Layer::Dropout(_) => vec![],
        }
    }

    pub(crate) fn forward(
        &self,
        x: &DMatrix<f64>,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(DMatrix<f64>, Cache)> {
        match self {
            Layer::Tdnn(a) => {
                let (pre, spliced) = a.forward(x)?;
                Ok((relu(&pre), Cache::Tdnn { spliced, pre }))
            }
            Layer::Res(b) => {
                check_cols("res block input", b.conv1.in_dim, x)?;
                let (h1_pre, s1) = b.conv1.forward(x)?;
                let (h2, s2) = b.conv2.forward(&relu(&h1_pre))?;
                let out_pre = h2 + x;
                Ok((
                    relu(&out_pre),
                    Cache::Res {
                        s1,
                        h1_pre,
                        s2,
                        out_pre,
                    },
                ))
            }
            Layer::Res2(b) => res2_forward(b, x),
            Layer::StatsPool => stats_pool_forward(x),
            Layer::Dense(d) => Ok((d.forward(x)?, Cache::Input(x.clone()))),
            Layer::FactoredDense(f) => {
                check_cols("factored dense input", f.in_dim(), x)?;
                let hidden = x * f.first.transpose();
                let mut y = &hidden * f.second.transpose();
                add_row(&mut y, &f.bias);
                Ok((
                    y,
                    Cache::FactoredDense {
                        x: x.clone(),
                        hidden,
                    },
                ))
            }
            Layer::Relu => Ok((relu(x), Cache::Relu(x.clone()))),
            Layer::FeatureNorm => feature_norm_forward(x),
            Layer::Dropout(rate) => match dropout_rng {
                Some(rng) if *rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let mask = DMatrix::from_fn(x.nrows(), x.ncols(), |_, _| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    Ok((x.component_mul(&mask), Cache::Dropout(Some(mask))))
                }
                _ => Ok((x.clone(), Cache::Dropout(None))),
            },
        }
    }

    /// Returns the input gradient and the parameter gradients in
    /// [`Layer::params`] order.
    pub(crate) fn backward(
        &self,
        cache: &Cache,
        grad: &DMatrix<f64>,
    ) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        match (self, cache) {
            (Layer::Tdnn(a), Cache::Tdnn { spliced, pre }) => {
                let g = relu_grad(pre, grad);
                let (gx, gw, gb) = a.backward(spliced, &g);
                (gx, vec![gw, gb])
            }
            (
                Layer::Res(b),
                Cache::Res {
                    s1,
                    h1_pre,
                    s2,
                    out_pre,
                },
            ) => {
                let g = relu_grad(out_pre, grad);
                let (gh1, gw2, gb2) = b.conv2.backward(s2, &g);
                let gh1 = relu_grad(h1_pre, &gh1);
                let (gx, gw1, gb1) = b.conv1.backward(s1, &gh1);
                (gx + g, vec![gw1, gb1, gw2, gb2])
            }
            (Layer::Res2(b), Cache::Res2 { spliced, out_pre }) => res2_backward(b, spliced, out_pre, grad),
            (
                Layer::StatsPool,
                Cache::StatsPool {
                    x,
                    mean,
                    std,
                    floored,
                },
            ) => (stats_pool_backward(x, mean, std, floored, grad), vec![]),
            (Layer::Dense(d), Cache::Input(x)) => {
                let (gx, gw, gb) = d.backward(x, grad);
                (gx, vec![gw, gb])
            }
            (Layer::FactoredDense(f), Cache::FactoredDense { x, hidden }) => {
                let g_second = grad.transpose() * hidden;
                let gb = column_sums(grad);
                let g_hidden = grad * &f.second;
                let g_first = g_hidden.transpose() * x;
                (g_hidden * &f.first, vec![g_first, g_second, gb])
            }
            (Layer::Relu, Cache::Relu(x)) => (relu_grad(x, grad), vec![]),
            (Layer::FeatureNorm, Cache::Norm { y, inv_std }) => {
                (feature_norm_backward(y, inv_std, grad), vec![])
            }
            (Layer::Dropout(_), Cache::Dropout(mask)) => match mask {
                Some(m) => (grad.component_mul(m), vec![]),
                None => (grad.clone(), vec![]),
            },
            _ => unreachable!("layer/cache mismatch"),
        }
    }
}

fn res2_forward(b: &Res2Block, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cache)> {
    check_cols("res2 block input", b.channels(), x)?;
    let w = b.width;
    let frames = x.nrows();
    let mut ys: Vec<DMatrix<f64>> = Vec::with_capacity(b.scale);
    let mut spliced = Vec::with_capacity(b.scale);
    for i in 0..b.scale {
        let xi = x.columns(i * w, w).into_owned();
        match b.conv_for(i) {
            None => {
                ys.push(xi);
                spliced.push(None);
            }
            Some(k) => {
                let z = if i == 0 { xi } else { xi + &ys[i - 1] };
                let (y, s) = b.convs[k].forward(&z)?;
                ys.push(y);
                spliced.push(Some(s));
            }
        }
    }
    let mut out_pre = x.clone();
    for (i, y) in ys.iter().enumerate() {
        let mut cols = out_pre.columns_mut(i * w, w);
        cols += y;
    }
    debug_assert_eq!(out_pre.nrows(), frames);
    Ok((relu(&out_pre), Cache::Res2 { spliced, out_pre }))
}

fn res2_backward(
    b: &Res2Block,
    spliced: &[Option<DMatrix<f64>>],
    out_pre: &DMatrix<f64>,
    grad: &DMatrix<f64>,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let w = b.width;
    let g = relu_grad(out_pre, grad);
    let mut gx = g.clone();
    let mut gy: Vec<DMatrix<f64>> = (0..b.scale).map(|i| g.columns(i * w, w).into_owned()).collect();
    let mut pgrads = vec![(DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)); b.convs.len()];
    for i in (0..b.scale).rev() {
        let gz = match (b.conv_for(i), &spliced[i]) {
            (Some(k), Some(s)) => {
                let (gz, gw, gb) = b.convs[k].backward(s, &gy[i]);
                pgrads[k] = (gw, gb);
                gz
            }
            _ => gy[i].clone(),
        };
        {
            let mut cols = gx.columns_mut(i * w, w);
            cols += &gz;
        }
        if i > 0 && b.conv_for(i).is_some() {
            gy[i - 1] += &gz;
        }
    }
    let flat = pgrads.into_iter().flat_map(|(a, c)| [a, c]).collect();
    (gx, flat)
}

fn stats_pool_forward(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cache)> {
    let frames = x.nrows();
    if frames == 0 {
        return Err(Error::InsufficientData("statistics pooling over zero frames".into()));
    }
    let d = x.ncols();
    let n = frames as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    let mut floored = vec![false; d];
    let mut out = DMatrix::zeros(1, 2 * d);
    for c in 0..d {
        let col = x.column(c);
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        floored[c] = var <= STATS_VAR_FLOOR;
        let s = var.max(STATS_VAR_FLOOR).sqrt();
        mean[c] = m;
        std[c] = s;
        out[(0, c)] = m;
        out[(0, d + c)] = s;
    }
    Ok((
        out,
        Cache::StatsPool {
            x: x.clone(),
            mean,
            std,
            floored,
        },
    ))
}

fn stats_pool_backward(
    x: &DMatrix<f64>,
    mean: &[f64],
    std: &[f64],
    floored: &[bool],
    grad: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d = x.ncols();
    let n = x.nrows() as f64;
    DMatrix::from_fn(x.nrows(), d, |t, c| {
        let mut g = grad[(0, c)] / n;
        if !floored[c] {
            g += grad[(0, d + c)] * (x[(t, c)] - mean[c]) / (n * std[c]);
        }
        g
    })
}

fn feature_norm_forward(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cache)> {
    if x.nrows() < 2 {
        return Err(Error::InsufficientData(
            "feature normalization needs at least two frames".into(),
        ));
    }
    let n = x.nrows() as f64;
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.ncols());
    for c in 0..x.ncols() {
        let m = x.column(c).sum() / n;
        let var = x.column(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for t in 0..x.nrows() {
            y[(t, c)] = (x[(t, c)] - m) * is;
        }
        inv_std.push(is);
    }
    Ok((y.clone(), Cache::Norm { y, inv_std }))
}

fn feature_norm_backward(y: &DMatrix<f64>, inv_std: &[f64], grad: &DMatrix<f64>) -> DMatrix<f64> {
    let n = y.nrows() as f64;
    let mut gx = DMatrix::zeros(y.nrows(), y.ncols());
    for c in 0..y.ncols() {
        let mean_g = grad.column(c).sum() / n;
        let mean_gy = grad.column(c).dot(&y.column(c)) / n;
        for t in 0..y.nrows() {
            gx[(t, c)] = inv_std[c] * (grad[(t, c)] - mean_g - y[(t, c)] * mean_gy);
        }
    }
    gx
}

pub(crate) fn relu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| v.max(0.0))
}

fn relu_grad(pre: &DMatrix<f64>, grad: &DMatrix<f64>) -> DMatrix<f64> {
    grad.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })
}

fn add_row(y: &mut DMatrix<f64>, bias: &DMatrix<f64>) {
    for mut row in y.row_iter_mut() {
        row += bias;
    }
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, c| m.column(c).sum())
}

fn check_cols(context: &'static str, expected: usize, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual: x.ncols(),
        });
    }
    Ok(())
}
