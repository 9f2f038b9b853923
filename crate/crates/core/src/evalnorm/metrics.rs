use super::TrialScores;
use crate::error::{Error, Result};

/// Detection cost parameters. Defaults: `p_target = 0.01`, unit costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::arg("p_target", format!("must be in (0, 1), got {}", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_miss.is_finite()) || !(self.c_fa > 0.0 && self.c_fa.is_finite()) {
            return Err(Error::arg("costs", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Operating points `(P_fa, P_miss)` for "accept iff score >= threshold",
/// one per distinct score in ascending threshold order, followed by the
/// reject-all point `(0, 1)`. The first point is accept-all `(1, 0)`.
fn sweep(scores: &TrialScores) -> Result<Vec<(f64, f64)>> {
    let (tg, nt) = scores.split_by_label()?;
    let mut all: Vec<(f64, bool)> = tg.iter().map(|&s| (s, true)).chain(nt.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (n_t, n_n) = (tg.len() as f64, nt.len() as f64);

    let mut points = Vec::with_capacity(all.len() + 1);
    let (mut miss, mut fa_rejected) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        points.push(((nt.len() - fa_rejected) as f64 / n_n, miss as f64 / n_t));
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                miss += 1;
            } else {
                fa_rejected += 1;
            }
            i += 1;
        }
    }
    points.push((0.0, 1.0));
    Ok(points)
}

/// Equal error rate, interpolating linearly between the two adjacent
/// operating points where `P_miss - P_fa` changes sign.
pub fn compute_eer(scores: &TrialScores) -> Result<f64> {
    let pts = sweep(scores)?;
    for w in pts.windows(2) {
        let ((fa0, miss0), (fa1, miss1)) = (w[0], w[1]);
        let (d0, d1) = (miss0 - fa0, miss1 - fa1);
        if d0 == 0.0 {
            return Ok(miss0);
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let t = -d0 / (d1 - d0);
            return Ok(miss0 + t * (miss1 - miss0));
        }
    }
    // the last point (0, 1) always has a positive difference
    unreachable!("operating points end at reject-all")
}

/// Minimum normalized detection cost over all thresholds.
pub fn compute_min_dcf(scores: &TrialScores, p: &DcfParams) -> Result<f64> {
    p.validate()?;
    let pts = sweep(scores)?;
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    let best = pts
        .iter()
        .map(|&(fa, miss)| p.c_miss * miss * p.p_target + p.c_fa * fa * (1.0 - p.p_target))
        .fold(f64::INFINITY, f64::min);
    Ok(best / norm)
}

/// DET operating points `(P_fa, P_miss)`, from accept-all to reject-all.
pub fn det_points(scores: &TrialScores) -> Result<Vec<(f64, f64)>> {
    sweep(scores)
}
