//! Feature archives and WAV input.
//!
//! Text records: a header line `utt_id n_frames dim hop_ms` followed by
//! `n_frames` rows of space-separated decimals. Binary records use the same
//! header line, then `n_frames * dim` little-endian `f32` values, row-major.
//! An archive is a sequence of records.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{FeatureMatrix, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Text,
    Binary,
}

pub fn write_features<W: Write>(
    mut w: W,
    format: FeatureFormat,
    records: &[(String, FeatureMatrix)],
) -> Result<()> {
    for (utt, feat) in records {
        if utt.is_empty() || utt.contains(char::is_whitespace) {
            return Err(Error::Format(format!("invalid utterance id {utt:?}")));
        }
        writeln!(w, "{} {} {} {}", utt, feat.n_frames(), feat.dim(), feat.hop_ms)?;
        match format {
            FeatureFormat::Text => {
                for t in 0..feat.n_frames() {
                    let row: Vec<String> =
                        feat.values.row(t).iter().map(|v| format!("{v:.6}")).collect();
                    writeln!(w, "{}", row.join(" "))?;
                }
            }
            FeatureFormat::Binary => {
                let mut buf = Vec::with_capacity(feat.values.len() * 4);
                for t in 0..feat.n_frames() {
                    for v in feat.values.row(t).iter() {
                        buf.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
                w.write_all(&buf)?;
            }
        }
    }
    Ok(())
}

pub fn read_features<R: BufRead>(
    mut r: R,
    format: FeatureFormat,
) -> Result<Vec<(String, FeatureMatrix)>> {
    let mut out = Vec::new();
    let mut line_no = 0usize;
    let mut header = String::new();
    loop {
        header.clear();
        if r.read_line(&mut header)? == 0 {
            break;
        }
        line_no += 1;
        if header.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = header.split_whitespace().collect();
        let header_line = line_no;
        let bad = |reason: &str| Error::Parse {
            line: header_line,
            reason: reason.to_string(),
        };
        if fields.len() != 4 {
            return Err(bad("header must be `utt_id n_frames dim hop_ms`"));
        }
        let utt = fields[0].to_string();
        let n_frames: usize = fields[1].parse().map_err(|_| bad("bad n_frames"))?;
        let dim: usize = fields[2].parse().map_err(|_| bad("bad dim"))?;
        let hop_ms: f64 = fields[3].parse().map_err(|_| bad("bad hop_ms"))?;
        let mut values = DMatrix::zeros(n_frames, dim);

        match format {
            FeatureFormat::Text => {
                let mut row = String::new();
                for t in 0..n_frames {
                    row.clear();
                    if r.read_line(&mut row)? == 0 {
                        return Err(bad("archive truncated"));
                    }
                    line_no += 1;
                    let nums: Vec<f64> = row
                        .split_whitespace()
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Parse {
                            line: line_no,
                            reason: "non-numeric feature value".into(),
                        })?;
                    if nums.len() != dim {
                        return Err(Error::Parse {
                            line: line_no,
                            reason: format!("expected {dim} values, found {}", nums.len()),
                        });
                    }
                    for (d, v) in nums.into_iter().enumerate() {
                        values[(t, d)] = v;
                    }
                }
            }
            FeatureFormat::Binary => {
                let mut raw = vec![0u8; n_frames * dim * 4];
                r.read_exact(&mut raw)
                    .map_err(|_| bad("binary payload truncated"))?;
                for (i, c) in raw.chunks_exact(4).enumerate() {
                    values[(i / dim, i % dim)] =
                        f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
                }
            }
        }
        out.push((utt, FeatureMatrix::new(values, hop_ms)?));
    }
    Ok(out)
}

/// Reads a mono 16-bit PCM WAV file, scaling samples to `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Format(format!(
            "expected mono 16-bit PCM, got {} channel(s), {} bits, {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM, clipping to the representable range.
pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wav.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
