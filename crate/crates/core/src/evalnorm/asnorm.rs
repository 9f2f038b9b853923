use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Trial, TrialScores};
use crate::error::{Error, Result};

/// One item scored against one cohort impostor.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortScore {
    pub cohort_id: String,
    pub score: f64,
}

impl CohortScore {
    pub fn new(cohort_id: impl Into<String>, score: f64) -> Self {
        Self {
            cohort_id: cohort_id.into(),
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsNormConfig {
    /// Fraction of the (subsampled) cohort kept as best-scoring impostors.
    pub top_frac: f64,
    /// Cohort size after random subsampling; `None` keeps every entry.
    pub cohort_subsample: Option<usize>,
    pub seed: u64,
}

impl Default for AsNormConfig {
    fn default() -> Self {
        Self {
            top_frac: 0.05,
            cohort_subsample: Some(2700),
            seed: 0,
        }
    }
}

/// Mean and sample standard deviation of one side's best impostors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideStats {
    pub mean: f64,
    pub std: f64,
    pub n_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub n_best1: usize,
    pub n_best2: usize,
}

/// `ceil(top_frac * cohort_len)`, tolerant of representation error so that
/// e.g. 0.05 of 2700 is exactly 135.
pub fn n_best(top_frac: f64, cohort_len: usize) -> Result<usize> {
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(Error::arg("top_frac", format!("must be in (0, 1], got {top_frac}")));
    }
    let n = (top_frac * cohort_len as f64 - 1e-9).ceil().max(0.0) as usize;
    Ok(n.min(cohort_len))
}

/// Statistics over the top `top_frac` of `scores`, ordered by score
/// descending then cohort id ascending.
pub fn side_stats(scores: &[CohortScore], top_frac: f64) -> Result<SideStats> {
    let n = n_best(top_frac, scores.len())?;
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "cohort of {} with top fraction {top_frac} keeps {n} scores, need at least 2",
            scores.len()
        )));
    }
    if let Some(c) = scores.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::Numerical(format!("cohort score for '{}' is not finite", c.cohort_id)));
    }
    let mut sorted: Vec<&CohortScore> = scores.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.cohort_id.cmp(&b.cohort_id)));
    let best = &sorted[..n];
    let mean = best.iter().map(|c| c.score).sum::<f64>() / n as f64;
    let var = best.iter().map(|c| (c.score - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::Degenerate("constant cohort scores (zero deviation)".into()));
    }
    Ok(SideStats {
        mean,
        std: var.sqrt(),
        n_best: n,
    })
}

/// Cohort ids retained after subsampling one side. The same seed and the
/// same id universe give the same subset on either side.
fn retained_ids(cohort: &BTreeMap<String, Vec<CohortScore>>, cfg: &AsNormConfig) -> Option<BTreeSet<String>> {
    let size = cfg.cohort_subsample?;
    let universe: BTreeSet<&str> = cohort
        .values()
        .flat_map(|l| l.iter().map(|c| c.cohort_id.as_str()))
        .collect();
    if size >= universe.len() {
        return None;
    }
    let ids: Vec<&str> = universe.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picked = rand::seq::index::sample(&mut rng, ids.len(), size);
    Some(picked.iter().map(|i| ids[i].to_string()).collect())
}

fn side_table(
    cohort: &BTreeMap<String, Vec<CohortScore>>,
    cfg: &AsNormConfig,
    needed: &BTreeSet<&str>,
    side: &str,
) -> Result<BTreeMap<String, SideStats>> {
    let keep = retained_ids(cohort, cfg);
    let mut out = BTreeMap::new();
    for id in needed {
        let list = cohort
            .get(*id)
            .ok_or_else(|| Error::Missing(format!("{side} cohort scores for '{id}'")))?;
        let stats = match &keep {
            Some(keep) => {
                let kept: Vec<CohortScore> = list.iter().filter(|c| keep.contains(&c.cohort_id)).cloned().collect();
                side_stats(&kept, cfg.top_frac)
            }
            None => side_stats(list, cfg.top_frac),
        }
        .map_err(|e| match e {
            Error::InsufficientData(m) => Error::InsufficientData(format!("{side} '{id}': {m}")),
            Error::Degenerate(m) => Error::Degenerate(format!("{side} '{id}': {m}")),
            other => other,
        })?;
        out.insert(id.to_string(), stats);
    }
    Ok(out)
}

/// Adaptive symmetric normalization:
/// `(S - mu1) / sigma1 + (S - mu2) / sigma2`.
pub fn asnorm(
    raw: &TrialScores,
    enroll_cohort: &BTreeMap<String, Vec<CohortScore>>,
    test_cohort: &BTreeMap<String, Vec<CohortScore>>,
    cfg: &AsNormConfig,
) -> Result<TrialScores> {
    asnorm_detailed(raw, enroll_cohort, test_cohort, cfg).map(|(s, _)| s)
}

/// As [`asnorm`], also returning the per-trial cohort statistics.
pub fn asnorm_detailed(
    raw: &TrialScores,
    enroll_cohort: &BTreeMap<String, Vec<CohortScore>>,
    test_cohort: &BTreeMap<String, Vec<CohortScore>>,
    cfg: &AsNormConfig,
) -> Result<(TrialScores, Vec<CohortStats>)> {
    if cfg.cohort_subsample == Some(0) {
        return Err(Error::arg("cohort_subsample", "must be positive"));
    }
    let enrolls: BTreeSet<&str> = raw.entries().iter().map(|t| t.enroll_id.as_str()).collect();
    let tests: BTreeSet<&str> = raw.entries().iter().map(|t| t.test_id.as_str()).collect();
    let e_stats = side_table(enroll_cohort, cfg, &enrolls, "enrollment")?;
    let t_stats = side_table(test_cohort, cfg, &tests, "test")?;

    let mut entries = Vec::with_capacity(raw.len());
    let mut stats = Vec::with_capacity(raw.len());
    for t in raw.entries() {
        let a = e_stats[&t.enroll_id];
        let b = t_stats[&t.test_id];
        let s = (t.score - a.mean) / a.std + (t.score - b.mean) / b.std;
        entries.push(Trial::new(&t.enroll_id, &t.test_id, s, t.label));
        stats.push(CohortStats {
            mu1: a.mean,
            sigma1: a.std,
            mu2: b.mean,
            sigma2: b.std,
            n_best1: a.n_best,
            n_best2: b.n_best,
        });
    }
    Ok((TrialScores::new(entries)?, stats))
}
