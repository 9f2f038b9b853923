//! Plain-text network description.
//!
//! ```text
//! # comment
//! input dim=30
//! tdnn out=64 context=-2,-1,0,1,2
//! res_block kernel=3
//! res2_block scale=4 width=16 kernel=3
//! batchnorm
//! relu
//! stats_pool
//! dense out=128
//! factored_dense out=128 rank=32
//! dropout rate=0.1
//! ```
//!
//! Input widths are inferred from the previous layer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Tdnn { out: usize, context: Vec<isize> },
    ResBlock { kernel: usize },
    Res2Block { scale: usize, width: usize, kernel: usize },
    StatsPool,
    Dense { out: usize },
    FactoredDense { out: usize, rank: usize },
    Relu,
    BatchNorm,
    Dropout { rate: f64 },
}

impl LayerSpec {
    fn is_frame_level(&self) -> bool {
        matches!(
            self,
            LayerSpec::Tdnn { .. }
                | LayerSpec::ResBlock { .. }
                | LayerSpec::Res2Block { .. }
                | LayerSpec::BatchNorm
        )
    }

    fn is_utterance_level(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::FactoredDense { .. } | LayerSpec::Dropout { .. }
        )
    }

    /// Output width given the input width, or an error if they do not fit.
    pub fn out_dim(&self, in_dim: usize) -> Result<usize> {
        match self {
            LayerSpec::Tdnn { out, .. } | LayerSpec::Dense { out } | LayerSpec::FactoredDense { out, .. } => {
                Ok(*out)
            }
            LayerSpec::Res2Block { scale, width, .. } if scale * width != in_dim => {
                Err(Error::DimensionMismatch {
                    context: "res2_block channels (scale * width)",
                    expected: in_dim,
                    actual: scale * width,
                })
            }
            LayerSpec::StatsPool => Ok(2 * in_dim),
            _ => Ok(in_dim),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Tdnn { out, context } => {
                let ctx: Vec<String> = context.iter().map(|o| o.to_string()).collect();
                write!(f, "tdnn out={out} context={}", ctx.join(","))
            }
            LayerSpec::ResBlock { kernel } => write!(f, "res_block kernel={kernel}"),
            LayerSpec::Res2Block { scale, width, kernel } => {
                write!(f, "res2_block scale={scale} width={width} kernel={kernel}")
            }
            LayerSpec::StatsPool => write!(f, "stats_pool"),
            LayerSpec::Dense { out } => write!(f, "dense out={out}"),
            LayerSpec::FactoredDense { out, rank } => write!(f, "factored_dense out={out} rank={rank}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::BatchNorm => write!(f, "batchnorm"),
            LayerSpec::Dropout { rate } => write!(f, "dropout rate={rate}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks layer ordering and width compatibility; returns the per-layer
    /// output widths.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input dim must be >= 1".into()));
        }
        let pools: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::StatsPool))
            .map(|(i, _)| i)
            .collect();
        let pool = match pools.as_slice() {
            [p] => *p,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "network needs exactly one stats_pool, found {}",
                    pools.len()
                )))
            }
        };
        for (i, l) in self.layers.iter().enumerate() {
            if i > pool && l.is_frame_level() {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} ({l}) operates on frames and must precede stats_pool"
                )));
            }
            if i < pool && l.is_utterance_level() {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} ({l}) must follow stats_pool"
                )));
            }
        }
        if !self.layers[pool + 1..]
            .iter()
            .any(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::FactoredDense { .. }))
        {
            return Err(Error::InvalidConfig(
                "no dense embedding layer after stats_pool".into(),
            ));
        }
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut d = self.input_dim;
        for l in &self.layers {
            match l {
                LayerSpec::Tdnn { out, context } => {
                    if *out == 0 || context.is_empty() || context.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::InvalidConfig(format!("bad tdnn layer: {l}")));
                    }
                }
                LayerSpec::ResBlock { kernel } | LayerSpec::Res2Block { kernel, .. } if kernel % 2 == 0 => {
                    return Err(Error::InvalidConfig(format!("kernel must be odd: {l}")));
                }
                LayerSpec::Res2Block { scale, width, .. } if *scale == 0 || *width == 0 => {
                    return Err(Error::InvalidConfig(format!("scale and width must be >= 1: {l}")));
                }
                LayerSpec::Dense { out } | LayerSpec::FactoredDense { out, .. } if *out == 0 => {
                    return Err(Error::InvalidConfig(format!("output width must be >= 1: {l}")));
                }
                LayerSpec::FactoredDense { rank: 0, .. } => {
                    return Err(Error::InvalidConfig(format!("rank must be >= 1: {l}")));
                }
                LayerSpec::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                    return Err(Error::InvalidConfig(format!("dropout rate must be in [0, 1): {l}")));
                }
                _ => {}
            }
            d = l.out_dim(d)?;
            dims.push(d);
        }
        Ok(dims)
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        Ok(*self.validate()?.last().expect("validated network has layers"))
    }

    /// The same topology with the final dense layer resized to `dim`.
    pub fn with_embedding_dim(&self, dim: usize) -> Result<Self> {
        let mut spec = self.clone();
        let last = spec
            .layers
            .iter_mut()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Dense { out } | LayerSpec::FactoredDense { out, .. } => Some(out),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidConfig("network has no dense layer".into()))?;
        *last = dim;
        spec.validate()?;
        Ok(spec)
    }

    pub fn pool_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, LayerSpec::StatsPool))
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input dim={}", self.input_dim)?;
        for l in &self.layers {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input_dim = None;
        let mut layers = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let kind = words.next().expect("non-empty line");
            let mut kv = BTreeMap::new();
            for w in words {
                let (k, v) = w.split_once('=').ok_or_else(|| Error::Parse {
                    line: line_no,
                    reason: format!("expected key=value, got '{w}'"),
                })?;
                if kv.insert(k, v).is_some() {
                    return Err(Error::Parse {
                        line: line_no,
                        reason: format!("repeated key '{k}'"),
                    });
                }
            }
            let mut fields = Fields { kv, line: line_no };
            let layer = match kind {
                "input" => {
                    if input_dim.is_some() || !layers.is_empty() {
                        return Err(Error::Parse {
                            line: line_no,
                            reason: "'input' must appear once, before any layer".into(),
                        });
                    }
                    input_dim = Some(fields.usize("dim")?);
                    fields.finish()?;
                    continue;
                }
                "tdnn" => LayerSpec::Tdnn {
                    out: fields.usize("out")?,
                    context: fields.offsets("context")?,
                },
                "res_block" => LayerSpec::ResBlock {
                    kernel: fields.usize_or("kernel", 3)?,
                },
                "res2_block" => LayerSpec::Res2Block {
                    scale: fields.usize("scale")?,
                    width: fields.usize("width")?,
                    kernel: fields.usize_or("kernel", 3)?,
                },
                "stats_pool" => LayerSpec::StatsPool,
                "dense" => LayerSpec::Dense {
                    out: fields.usize("out")?,
                },
                "factored_dense" => LayerSpec::FactoredDense {
                    out: fields.usize("out")?,
                    rank: fields.usize("rank")?,
                },
                "relu" => LayerSpec::Relu,
                "batchnorm" => LayerSpec::BatchNorm,
                "dropout" => LayerSpec::Dropout {
                    rate: fields.f64_or("rate", 0.0)?,
                },
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        reason: format!("unknown layer type '{other}'"),
                    })
                }
            };
            fields.finish()?;
            layers.push(layer);
        }
        let spec = NetworkSpec {
            input_dim: input_dim.ok_or_else(|| Error::Parse {
                line: 0,
                reason: "missing 'input dim=N' line".into(),
            })?,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

struct Fields<'a> {
    kv: BTreeMap<&'a str, &'a str>,
    line: usize,
}

impl<'a> Fields<'a> {
    fn err(&self, reason: String) -> Error {
        Error::Parse {
            line: self.line,
            reason,
        }
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        self.kv.remove(key)
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self
            .take(key)
            .ok_or_else(|| self.err(format!("missing '{key}='")))?;
        v.parse().map_err(|_| self.err(format!("'{key}' must be a non-negative integer, got '{v}'")))
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        if self.kv.contains_key(key) {
            self.usize(key)
        } else {
            Ok(default)
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.err(format!("'{key}' must be a number, got '{v}'"))),
        }
    }

    fn offsets(&mut self, key: &str) -> Result<Vec<isize>> {
        let v = self
            .take(key)
            .ok_or_else(|| self.err(format!("missing '{key}='")))?;
        v.split(',')
            .map(|o| {
                o.parse()
                    .map_err(|_| self.err(format!("bad context offset '{o}'")))
            })
            .collect()
    }

    fn finish(self) -> Result<()> {
        match self.kv.keys().next() {
            Some(k) => Err(self.err(format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const XVECTOR: &str = "\
input dim=30
tdnn out=512 context=-2,-1,0,1,2
tdnn out=512 context=-2,0,2
tdnn out=512 context=-3,0,3
tdnn out=512 context=0
tdnn out=1500 context=0
stats_pool
dense out=512  # embedding
";

    #[test]
    fn parses_and_round_trips() {
        let spec: NetworkSpec = XVECTOR.parse().unwrap();
        assert_eq!(spec.layers.len(), 7);
        assert_eq!(spec.embedding_dim().unwrap(), 512);
        let again: NetworkSpec = spec.to_string().parse().unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn reports_line_numbers() {
        let text = "input dim=4\n\nstats_pool\ndense out=x\n";
        match text.parse::<NetworkSpec>() {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_structure() {
        for text in [
            "input dim=4\ndense out=3\n",
            "input dim=4\nstats_pool\nstats_pool\ndense out=2\n",
            "input dim=4\nstats_pool\ntdnn out=3 context=0\ndense out=2\n",
            "input dim=4\ndense out=3\nstats_pool\ndense out=2\n",
            "input dim=4\nres2_block scale=3 width=2\nstats_pool\ndense out=2\n",
            "input dim=4\ntdnn out=3 context=1,0\nstats_pool\ndense out=2\n",
            "input dim=4\nres_block kernel=2\nstats_pool\ndense out=2\n",
            "input dim=4\nstats_pool\ndense out=2 bogus=1\n",
            "tdnn out=3 context=0\n",
        ] {
            assert!(text.parse::<NetworkSpec>().is_err(), "{text}");
        }
    }
}
