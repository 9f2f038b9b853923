use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Network, ParamGradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    pub tol: f64,
    /// Seeds the random projection that turns the output into a scalar.
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Refuse networks bigger than this.
    pub max_params: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-4,
            seed: 0,
            floor: 1e-6,
            max_params: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tol)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_error >= self.tol)
            .map(|t| t.name.as_str())
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<28} max_rel_err {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e}){}",
                t.name,
                t.max_rel_error,
                t.worst_index,
                t.analytic,
                t.numeric,
                if t.max_rel_error < self.tol { "" } else { "  FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares backprop against central differences using the defaults and the
/// given tolerance.
pub fn check_gradients(net: &Network, feat: &DMatrix<f64>, tol: f64) -> Result<GradCheckReport> {
    check_gradients_with(
        net,
        feat,
        &GradCheckOptions {
            tol,
            ..Default::default()
        },
    )
}

pub fn check_gradients_with(
    net: &Network,
    feat: &DMatrix<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let upstream = projection(net, opts.seed);
    let analytic = super::backward(net, feat, &upstream)?;
    compare(net, feat, &upstream, &analytic, opts)
}

/// Checks a caller-supplied gradient (e.g. a deliberately corrupted one)
/// against central differences of the same objective used by
/// [`check_gradients_with`].
pub fn check_gradients_against(
    net: &Network,
    feat: &DMatrix<f64>,
    analytic: &ParamGradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    compare(net, feat, &projection(net, opts.seed), analytic, opts)
}

fn projection(net: &Network, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(1, net.embedding_dim(), |_, _| StandardNormal.sample(&mut rng))
}

fn compare(
    net: &Network,
    feat: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
    analytic: &ParamGradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if net.num_params() > opts.max_params {
        return Err(Error::arg(
            "net",
            format!("{} parameters exceed the limit of {}", net.num_params(), opts.max_params),
        ));
    }
    let names = net.param_names();
    if analytic.tensors.len() != names.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient tensor count",
            expected: names.len(),
            actual: analytic.tensors.len(),
        });
    }
    let objective = |n: &Network| -> Result<f64> { Ok(n.forward(feat)?.dot(upstream)) };
    let mut probe = net.clone();
    let mut tensors = Vec::with_capacity(names.len());
    for (p, name) in names.into_iter().enumerate() {
        let len = probe.params()[p].len();
        let mut worst = TensorCheck {
            name,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..len {
            let orig = probe.params()[p][e];
            probe.params_mut()[p][e] = orig + opts.eps;
            let plus = objective(&probe)?;
            probe.params_mut()[p][e] = orig - opts.eps;
            let minus = objective(&probe)?;
            probe.params_mut()[p][e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.tensors[p][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > worst.max_rel_error || e == 0 {
                worst.max_rel_error = rel;
                worst.worst_index = e;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        tensors.push(worst);
    }
    Ok(GradCheckReport {
        tensors,
        tol: opts.tol,
    })
}
