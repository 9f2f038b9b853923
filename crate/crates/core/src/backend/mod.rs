//! Embedding post-processing and scoring: centering, whitening, LDA,
//! length normalization, two-covariance PLDA, cosine scoring and
//! enrollment averaging.

mod linalg;
mod plda;
mod preprocess;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::features::FeatureFormat;

pub use linalg::{Gaussian, EIG_FLOOR};
pub use plda::{score_plda, train_plda, PldaModel, PldaScorer, PldaTraining};
pub use preprocess::{apply_preprocess, fit_preprocess, lda, PreprocessChain, PreprocessConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: DVector<f64>,
    pub utt_id: String,
    pub spk_id: Option<String>,
}

impl Embedding {
    pub fn new(utt_id: impl Into<String>, spk_id: Option<String>, vector: DVector<f64>) -> Self {
        Self {
            vector,
            utt_id: utt_id.into(),
            spk_id,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Inner product over norms.
pub fn score_cosine(e: &DVector<f64>, t: &DVector<f64>) -> Result<f64> {
    if e.len() != t.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine scoring",
            expected: e.len(),
            actual: t.len(),
        });
    }
    let (ee, tt) = (e.dot(e), t.dot(t));
    if ee == 0.0 || tt == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    // sqrt(ee * tt) rather than |e| |t|: identical inputs score exactly 1
    Ok((e.dot(t) / (ee * tt).sqrt()).clamp(-1.0, 1.0))
}

/// Mean of the original and its augmented copies, optionally
/// length-normalized.
pub fn eda_enroll(original: &Embedding, augmented: &[Embedding], length_norm: bool) -> Result<Embedding> {
    let mut sum = original.vector.clone();
    for a in augmented {
        if a.dim() != original.dim() {
            return Err(Error::DimensionMismatch {
                context: "augmented enrollment embedding",
                expected: original.dim(),
                actual: a.dim(),
            });
        }
        sum += &a.vector;
    }
    let mut mean = sum / (augmented.len() + 1) as f64;
    if length_norm {
        let n = mean.norm();
        if n == 0.0 {
            return Err(Error::Degenerate("averaged enrollment embedding is zero".into()));
        }
        mean /= n;
    }
    Ok(Embedding {
        vector: mean,
        utt_id: original.utt_id.clone(),
        spk_id: original.spk_id.clone(),
    })
}

pub(crate) fn check_dims(set: &[Embedding]) -> Result<usize> {
    let first = set
        .first()
        .ok_or_else(|| Error::InsufficientData("no embeddings".into()))?;
    let d = first.dim();
    for e in set {
        if e.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "embedding collection",
                expected: d,
                actual: e.dim(),
            });
        }
        if e.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("embedding '{}' is not finite", e.utt_id)));
        }
    }
    Ok(d)
}

/// Dense integer labels from speaker ids, in sorted id order.
pub(crate) fn speaker_labels(set: &[Embedding]) -> Result<Vec<usize>> {
    let mut ids = BTreeMap::new();
    for e in set {
        let spk = e
            .spk_id
            .as_deref()
            .ok_or_else(|| Error::Missing(format!("speaker label for '{}'", e.utt_id)))?;
        let next = ids.len();
        ids.entry(spk).or_insert(next);
    }
    let sorted: BTreeMap<&str, usize> = ids.keys().enumerate().map(|(i, k)| (*k, i)).collect();
    Ok(set
        .iter()
        .map(|e| sorted[e.spk_id.as_deref().expect("checked above")])
        .collect())
}

/// Writes embeddings as `utt_id spk_id v1 .. vD` lines (`-` for an unknown
/// speaker), or in binary as a `utt_id spk_id dim` line followed by `dim`
/// little-endian `f32` values.
pub fn write_embeddings<W: Write>(mut w: W, format: FeatureFormat, set: &[Embedding]) -> Result<()> {
    for e in set {
        let spk = e.spk_id.as_deref().unwrap_or("-");
        for id in [e.utt_id.as_str(), spk] {
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid id {id:?}")));
            }
        }
        match format {
            FeatureFormat::Text => {
                let vals: Vec<String> = e.vector.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{} {} {}", e.utt_id, spk, vals.join(" "))?;
            }
            FeatureFormat::Binary => {
                writeln!(w, "{} {} {}", e.utt_id, spk, e.dim())?;
                let mut buf = Vec::with_capacity(e.dim() * 4);
                for v in e.vector.iter() {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
    }
    Ok(())
}

pub fn read_embeddings<R: BufRead>(mut r: R, format: FeatureFormat) -> Result<Vec<Embedding>> {
    let mut out: Vec<Embedding> = Vec::new();
    let mut line = String::new();
    let mut line_no = 0;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            break;
        }
        line_no += 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse { line: line_no, reason };
        if fields.len() < 3 {
            return Err(bad("expected `utt_id spk_id values...`".into()));
        }
        let spk = (fields[1] != "-").then(|| fields[1].to_string());
        let vector = match format {
            FeatureFormat::Text => {
                let vals = fields[2..]
                    .iter()
                    .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad value '{f}'"))))
                    .collect::<Result<Vec<f64>>>()?;
                DVector::from_vec(vals)
            }
            FeatureFormat::Binary => {
                let dim: usize = fields[2].parse().map_err(|_| bad("bad dim".into()))?;
                let mut buf = vec![0u8; dim * 4];
                r.read_exact(&mut buf)
                    .map_err(|_| bad("truncated binary embedding".into()))?;
                DVector::from_iterator(
                    dim,
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
                )
            }
        };
        if let Some(prev) = out.first() {
            if prev.dim() != vector.len() {
                return Err(bad(format!("dimension {} differs from {}", vector.len(), prev.dim())));
            }
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        out.push(Embedding {
            vector,
            utt_id: fields[0].to_string(),
            spk_id: spk,
        });
    }
    Ok(out)
}
