//! Flat `section.key = value` configuration.
//!
//! ```text
//! # comment
//! seed = 7
//! features.kind = mfcc
//! train.lr_schedule = 0.1, 0.01, 0.001
//! backend.lda_dim = none
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

/// Every accepted key. Anything else is rejected with its line number.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "paths.workdir",
    "features.kind",
    "features.format",
    "features.frame_len_ms",
    "features.frame_hop_ms",
    "features.n_mel",
    "features.n_ceps",
    "features.fmin",
    "features.fmax",
    "features.preemph",
    "features.mask_min",
    "features.mask_max",
    "augment.speed_factors",
    "augment.snr_db",
    "network.spec",
    "network.embedding_dim",
    "train.objective",
    "train.lr_schedule",
    "train.momentum",
    "train.weight_decay",
    "train.plateau_patience",
    "train.ce_weight_schedule",
    "train.ams_scale",
    "train.ams_margin",
    "train.epochs",
    "train.batch_size",
    "train.threads",
    "backend.lda_dim",
    "backend.whiten",
    "backend.length_norm",
    "backend.plda_iters",
    "asnorm.top_frac",
    "asnorm.cohort_size",
    "dcf.p_target",
    "dcf.c_miss",
    "dcf.c_fa",
    "demo.speakers",
    "demo.utts",
    "demo.speed",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, (String, usize)>,
}

impl FromStr for Config {
    type Err = CliError;

    fn from_str(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CliError::config(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::config(line, format!("unknown key `{key}`")));
            }
            if value.is_empty() {
                return Err(CliError::config(line, format!("`{key}` has no value")));
            }
            if let Some((_, first)) = entries.insert(key.to_string(), (value.to_string(), line)) {
                return Err(CliError::config(line, format!("`{key}` already set on line {first}")));
            }
        }
        Ok(Self { entries })
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        text.parse()
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::config(*line, format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => parse_list(v)
                .map(Some)
                .map_err(|_| CliError::config(*line, format!("`{key}`: cannot parse list `{v}`"))),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => match v.as_str() {
                "true" | "yes" | "1" => Ok(Some(true)),
                "false" | "no" | "0" => Ok(Some(false)),
                _ => Err(CliError::config(*line, format!("`{key}`: expected true/false, got `{v}`"))),
            },
        }
    }

    pub fn line_of(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|(_, l)| *l)
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, T::Err> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_lists() {
        let cfg: Config = "# top\nseed = 7\n\nfeatures.kind = mfcc # trailing\ntrain.lr_schedule = 0.1, 0.01\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(cfg.raw("features.kind"), Some("mfcc"));
        assert_eq!(cfg.get_list::<f64>("train.lr_schedule").unwrap(), Some(vec![0.1, 0.01]));
        assert_eq!(cfg.get::<f64>("dcf.p_target").unwrap(), None);
        assert_eq!(cfg.line_of("features.kind"), Some(4));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = "seed = 1\nbogus.key = 3\n".parse::<Config>().unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = "seed = 1\n\nno equals sign\n".parse::<Config>().unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = "seed = 1\nseed = 2\n".parse::<Config>().unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let cfg: Config = "\n\ntrain.epochs = many\n".parse().unwrap();
        let err = cfg.get::<usize>("train.epochs").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn booleans() {
        let cfg: Config = "backend.whiten = no\ndemo.speed = maybe\n".parse().unwrap();
        assert_eq!(cfg.get_bool("backend.whiten").unwrap(), Some(false));
        assert!(cfg.get_bool("demo.speed").is_err());
    }
}
