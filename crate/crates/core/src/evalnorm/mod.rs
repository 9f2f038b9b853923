//! Trial lists, score files, adaptive symmetric score normalization,
//! fusion and detection metrics.

mod asnorm;
mod metrics;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

pub use asnorm::{asnorm, asnorm_detailed, n_best, side_stats, AsNormConfig, CohortScore, CohortStats, SideStats};
pub use metrics::{compute_eer, compute_min_dcf, det_points, DcfParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Target,
    Nontarget,
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            other => Err(Error::Format(format!("unknown trial label '{other}'"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        })
    }
}

/// An unscored trial: enrollment model, test utterance, optional key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialKey {
    pub enroll_id: String,
    pub test_id: String,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
    pub label: Option<Label>,
}

impl Trial {
    pub fn new(enroll_id: impl Into<String>, test_id: impl Into<String>, score: f64, label: Option<Label>) -> Self {
        Self {
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            score,
            label,
        }
    }
}

/// Scored trials with unique `(enroll_id, test_id)` pairs and finite scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialScores {
    entries: Vec<Trial>,
}

impl TrialScores {
    pub fn new(entries: Vec<Trial>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for t in &entries {
            if !t.score.is_finite() {
                return Err(Error::Numerical(format!(
                    "score for trial {} {} is not finite",
                    t.enroll_id, t.test_id
                )));
            }
            if !seen.insert((t.enroll_id.as_str(), t.test_id.as_str())) {
                return Err(Error::Duplicate(format!("trial {} {}", t.enroll_id, t.test_id)));
            }
        }
        Ok(Self { entries })
    }

    /// Labeled scores from separate target and nontarget lists, with
    /// synthetic ids. Convenient for metrics on bare score arrays.
    pub fn from_labeled(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let tg = targets
            .iter()
            .enumerate()
            .map(|(i, &s)| Trial::new(format!("t{i}"), format!("t{i}"), s, Some(Label::Target)));
        let nt = nontargets
            .iter()
            .enumerate()
            .map(|(i, &s)| Trial::new(format!("n{i}"), format!("n{i}"), s, Some(Label::Nontarget)));
        Self::new(tg.chain(nt).collect())
    }

    pub fn entries(&self) -> &[Trial] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|t| t.score).collect()
    }

    /// Splits scores by label. Fails if any trial is unlabeled or either
    /// class is empty.
    pub fn split_by_label(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tg = Vec::new();
        let mut nt = Vec::new();
        for t in &self.entries {
            match t.label {
                Some(Label::Target) => tg.push(t.score),
                Some(Label::Nontarget) => nt.push(t.score),
                None => {
                    return Err(Error::Missing(format!("label for trial {} {}", t.enroll_id, t.test_id)));
                }
            }
        }
        if tg.is_empty() || nt.is_empty() {
            return Err(Error::InsufficientData(format!(
                "need both classes, got {} targets and {} nontargets",
                tg.len(),
                nt.len()
            )));
        }
        Ok((tg, nt))
    }

    /// Copies labels from a key list onto matching trials. Every scored
    /// trial must appear in the key.
    pub fn with_labels(mut self, keys: &[TrialKey]) -> Result<Self> {
        let index: BTreeMap<(&str, &str), Option<Label>> = keys
            .iter()
            .map(|k| ((k.enroll_id.as_str(), k.test_id.as_str()), k.label))
            .collect();
        for t in &mut self.entries {
            let label = index
                .get(&(t.enroll_id.as_str(), t.test_id.as_str()))
                .ok_or_else(|| Error::Missing(format!("trial {} {} in key", t.enroll_id, t.test_id)))?;
            t.label = *label;
        }
        Ok(self)
    }

    fn key_map(&self) -> BTreeMap<(&str, &str), usize> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, t)| ((t.enroll_id.as_str(), t.test_id.as_str()), i))
            .collect()
    }
}

/// Scores each trial with `f(enroll_id, test_id)`, keeping key labels.
pub fn score_trials<F>(keys: &[TrialKey], mut f: F) -> Result<TrialScores>
where
    F: FnMut(&str, &str) -> Result<f64>,
{
    let entries = keys
        .iter()
        .map(|k| Ok(Trial::new(&k.enroll_id, &k.test_id, f(&k.enroll_id, &k.test_id)?, k.label)))
        .collect::<Result<Vec<_>>>()?;
    TrialScores::new(entries)
}

/// Standardizes each system over all its scores (population moments) and
/// sums them with the given weights, equal by default. Output follows the
/// trial order of the first system.
pub fn fuse(score_sets: &[TrialScores], weights: Option<&[f64]>) -> Result<TrialScores> {
    let first = score_sets
        .first()
        .ok_or_else(|| Error::InsufficientData("no score sets to fuse".into()))?;
    let weights: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != score_sets.len() {
                return Err(Error::DimensionMismatch {
                    context: "fusion weights",
                    expected: score_sets.len(),
                    actual: w.len(),
                });
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
                return Err(Error::arg("weights", "must be nonnegative and not all zero"));
            }
            w.to_vec()
        }
        None => vec![1.0; score_sets.len()],
    };
    if first.is_empty() {
        return Err(Error::InsufficientData("empty score set".into()));
    }

    let mut fused = vec![0.0; first.len()];
    for (k, (set, w)) in score_sets.iter().zip(&weights).enumerate() {
        if set.len() != first.len() {
            return Err(Error::Format(format!(
                "system {k} has {} trials, system 0 has {}",
                set.len(),
                first.len()
            )));
        }
        let map = set.key_map();
        let n = set.len() as f64;
        let mean = set.entries.iter().map(|t| t.score).sum::<f64>() / n;
        let var = set.entries.iter().map(|t| (t.score - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Degenerate(format!("system {k} has constant scores")));
        }
        let sd = var.sqrt();
        for (i, t) in first.entries.iter().enumerate() {
            let j = *map.get(&(t.enroll_id.as_str(), t.test_id.as_str())).ok_or_else(|| {
                Error::Format(format!("system {k} lacks trial {} {}", t.enroll_id, t.test_id))
            })?;
            fused[i] += w * (set.entries[j].score - mean) / sd;
        }
    }
    TrialScores::new(
        first
            .entries
            .iter()
            .zip(fused)
            .map(|(t, s)| Trial::new(&t.enroll_id, &t.test_id, s, t.label))
            .collect(),
    )
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(char::is_whitespace) {
        return Err(Error::Format(format!("invalid id {id:?}")));
    }
    Ok(())
}

fn data_lines<R: BufRead>(r: R) -> impl Iterator<Item = Result<(usize, Vec<String>)>> {
    r.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(e.into())),
        Ok(line) => {
            let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            (!fields.is_empty()).then_some(Ok((i + 1, fields)))
        }
    })
}

/// Reads `enroll_id test_id [target|nontarget]` lines.
pub fn read_trials<R: BufRead>(r: R) -> Result<Vec<TrialKey>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for item in data_lines(r) {
        let (line, f) = item?;
        if !(2..=3).contains(&f.len()) {
            return Err(Error::Parse {
                line,
                reason: "expected `enroll_id test_id [target|nontarget]`".into(),
            });
        }
        let label = match f.get(2) {
            Some(l) => Some(l.parse::<Label>().map_err(|e| Error::Parse {
                line,
                reason: e.to_string(),
            })?),
            None => None,
        };
        if !seen.insert((f[0].clone(), f[1].clone())) {
            return Err(Error::Parse {
                line,
                reason: format!("duplicate trial {} {}", f[0], f[1]),
            });
        }
        out.push(TrialKey {
            enroll_id: f[0].clone(),
            test_id: f[1].clone(),
            label,
        });
    }
    Ok(out)
}

pub fn write_trials<W: Write>(mut w: W, keys: &[TrialKey]) -> Result<()> {
    for k in keys {
        check_id(&k.enroll_id)?;
        check_id(&k.test_id)?;
        match k.label {
            Some(l) => writeln!(w, "{} {} {l}", k.enroll_id, k.test_id)?,
            None => writeln!(w, "{} {}", k.enroll_id, k.test_id)?,
        }
    }
    Ok(())
}

/// Reads `enroll_id test_id score` lines. Labels are left empty; attach
/// them with [`TrialScores::with_labels`].
pub fn read_scores<R: BufRead>(r: R) -> Result<TrialScores> {
    let mut entries = Vec::new();
    for item in data_lines(r) {
        let (line, f) = item?;
        if f.len() != 3 {
            return Err(Error::Parse {
                line,
                reason: "expected `enroll_id test_id score`".into(),
            });
        }
        let score: f64 = f[2].parse().map_err(|_| Error::Parse {
            line,
            reason: format!("bad score '{}'", f[2]),
        })?;
        entries.push(Trial::new(&f[0], &f[1], score, None));
    }
    TrialScores::new(entries)
}

/// Writes `enroll_id test_id score` lines with six decimals.
pub fn write_scores<W: Write>(mut w: W, scores: &TrialScores) -> Result<()> {
    for t in scores.entries() {
        check_id(&t.enroll_id)?;
        check_id(&t.test_id)?;
        writeln!(w, "{} {} {:.6}", t.enroll_id, t.test_id, t.score)?;
    }
    Ok(())
}

/// Reads cohort scores (`item_id cohort_id score`) grouped by item.
pub fn read_cohort_scores<R: BufRead>(r: R) -> Result<BTreeMap<String, Vec<CohortScore>>> {
    let mut out: BTreeMap<String, Vec<CohortScore>> = BTreeMap::new();
    for t in read_scores(r)?.entries {
        out.entry(t.enroll_id).or_default().push(CohortScore::new(t.test_id, t.score));
    }
    Ok(out)
}

pub fn write_cohort_scores<W: Write>(mut w: W, cohort: &BTreeMap<String, Vec<CohortScore>>) -> Result<()> {
    for (id, list) in cohort {
        check_id(id)?;
        for c in list {
            check_id(&c.cohort_id)?;
            writeln!(w, "{id} {} {:.6}", c.cohort_id, c.score)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
