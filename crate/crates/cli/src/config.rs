//! Flat `section.key = value` engine configuration.
//!
//! Three sections are recognized: `model`, `policy`, and `run`. Parsing is
//! total: every line either contributes a known key or fails with its line
//! number, and keys that do not apply to the declared policy are rejected.
//!
//! ```text
//! # engine.cfg
//! model.layers = 8
//! model.heads = 4
//! model.head_dim = 32
//! model.vocab = 256
//! model.seed = 42
//! policy.name = pyramid
//! policy.decay = 0.735
//! run.seed = 7
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use pykv_core::model::{ModelConfig, PositionMode};
use pykv_core::policy::{
    CachePolicy, HeavyHitterConfig, LocalPolicyConfig, PyramidPolicyConfig, RecencyRamp,
};

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Line { line: usize, msg: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Line { line, msg } => write!(f, "config line {line}: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub model: ModelConfig,
    pub policy: CachePolicy,
    pub run: RunConfig,
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.map.remove(key)
    }

    fn take_parsed<T: std::str::FromStr>(
        &mut self,
        key: &str,
        default: T,
    ) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some((raw, line)) => raw.parse().map_err(|_| ConfigError::Line {
                line,
                msg: format!("invalid value '{raw}' for key '{key}'"),
            }),
        }
    }
}

pub fn parse_config(path: &std::path::Path) -> Result<EngineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<EngineConfig, ConfigError> {
    let mut map: BTreeMap<String, (String, usize)> = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Line {
            line,
            msg: format!("expected 'section.key = value', got '{content}'"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let (section, _) = key.split_once('.').ok_or_else(|| ConfigError::Line {
            line,
            msg: format!("key '{key}' is missing its section prefix"),
        })?;
        if !matches!(section, "model" | "policy" | "run") {
            return Err(ConfigError::Line {
                line,
                msg: format!("unknown section '{section}'"),
            });
        }
        if let Some((_, first)) = map.get(&key) {
            return Err(ConfigError::Line {
                line,
                msg: format!("duplicate key '{key}' (first set on line {first})"),
            });
        }
        map.insert(key, (value, line));
    }
    let mut entries = Entries { map };

    let model = build_model(&mut entries)?;
    let policy = build_policy(&mut entries, model.layers)?;
    let run = RunConfig {
        seed: entries.take_parsed("run.seed", 0u64)?,
        out_dir: entries.take("run.out_dir").map(|(v, _)| PathBuf::from(v)),
    };

    if let Some((key, (_, line))) = entries.map.iter().next() {
        return Err(ConfigError::Line {
            line: *line,
            msg: format!("unknown key '{key}'"),
        });
    }

    policy
        .validate(model.layers)
        .map_err(|e| ConfigError::Line {
            line: 0,
            msg: format!("invalid policy: {e}"),
        })?;
    model.validate().map_err(|e| ConfigError::Line {
        line: 0,
        msg: format!("invalid model: {e}"),
    })?;
    Ok(EngineConfig { model, policy, run })
}

fn build_model(entries: &mut Entries) -> Result<ModelConfig, ConfigError> {
    let mut model = ModelConfig::desk(0);
    model.layers = entries.take_parsed("model.layers", model.layers)?;
    model.heads = entries.take_parsed("model.heads", model.heads)?;
    model.head_dim = entries.take_parsed("model.head_dim", model.head_dim)?;
    model.vocab = entries.take_parsed("model.vocab", model.vocab)?;
    model.mlp_ratio = entries.take_parsed("model.mlp_ratio", model.mlp_ratio)?;
    model.seed = entries.take_parsed("model.seed", model.seed)?;
    model.max_seq = entries.take_parsed("model.max_seq", model.max_seq)?;
    if let Some((raw, line)) = entries.take("model.position_mode") {
        model.position_mode = match raw.as_str() {
            "gather" => PositionMode::Gather,
            "reencode" => PositionMode::Reencode,
            other => {
                return Err(ConfigError::Line {
                    line,
                    msg: format!("position_mode must be 'gather' or 'reencode', got '{other}'"),
                })
            }
        };
    }
    Ok(model)
}

pub fn default_policy(name: &str, layers: usize) -> Option<CachePolicy> {
    match name {
        "full" => Some(CachePolicy::Full),
        "local" => Some(CachePolicy::Local(LocalPolicyConfig::new(4, 16))),
        "heavy_hitter" => Some(CachePolicy::HeavyHitter(HeavyHitterConfig::new(128, 16))),
        "pyramid" => Some(CachePolicy::Pyramid(PyramidPolicyConfig::new(layers))),
        _ => None,
    }
}

fn build_policy(entries: &mut Entries, layers: usize) -> Result<CachePolicy, ConfigError> {
    let (name, name_line) = match entries.take("policy.name") {
        Some(v) => v,
        None => ("pyramid".to_string(), 0),
    };
    match name.as_str() {
        "full" => Ok(CachePolicy::Full),
        "local" => {
            let mut cfg = LocalPolicyConfig::new(4, 16);
            cfg.keep_first = entries.take_parsed("policy.keep_first", cfg.keep_first)?;
            cfg.window = entries.take_parsed("policy.window", cfg.window)?;
            Ok(CachePolicy::Local(cfg))
        }
        "heavy_hitter" => {
            let mut cfg = HeavyHitterConfig::new(128, 16);
            cfg.budget = entries.take_parsed("policy.budget", cfg.budget)?;
            cfg.window = entries.take_parsed("policy.window", cfg.window)?;
            Ok(CachePolicy::HeavyHitter(cfg))
        }
        "pyramid" => {
            let mut cfg = PyramidPolicyConfig::new(layers);
            cfg.recent_ratio = entries.take_parsed("policy.recent_ratio", cfg.recent_ratio)?;
            cfg.recent_window_min =
                entries.take_parsed("policy.recent_window_min", cfg.recent_window_min)?;
            cfg.p0 = entries.take_parsed("policy.p0", cfg.p0)?;
            cfg.decay = entries.take_parsed("policy.decay", cfg.decay)?;
            cfg.refresh_every = entries.take_parsed("policy.refresh_every", cfg.refresh_every)?;
            let min_pvc: usize = entries
                .take_parsed("policy.min_pvc_len", pykv_core::policy::DEFAULT_MIN_PVC_LEN)?;
            cfg.min_pvc_lens = vec![min_pvc; layers];
            if let Some((raw, line)) = entries.take("policy.budget") {
                cfg.budget = Some(raw.parse().map_err(|_| ConfigError::Line {
                    line,
                    msg: format!("invalid value '{raw}' for key 'policy.budget'"),
                })?);
            }
            if let Some((raw, line)) = entries.take("policy.ramp") {
                cfg.recency_ramp = parse_ramp(&raw, line)?;
            }
            Ok(CachePolicy::Pyramid(cfg))
        }
        other => Err(ConfigError::Line {
            line: name_line,
            msg: format!(
                "unknown policy '{other}' (expected full, local, heavy_hitter, or pyramid)"
            ),
        }),
    }
}

fn parse_ramp(raw: &str, line: usize) -> Result<RecencyRamp, ConfigError> {
    if raw == "linear" {
        return Ok(RecencyRamp::Linear);
    }
    if let Some(gamma) = raw.strip_prefix("exp:") {
        let gamma: f64 = gamma.parse().map_err(|_| ConfigError::Line {
            line,
            msg: format!("invalid exponential ramp '{raw}'"),
        })?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(ConfigError::Line {
                line,
                msg: format!("ramp gamma must lie in (0, 1], got {gamma}"),
            });
        }
        return Ok(RecencyRamp::Exponential { gamma });
    }
    Err(ConfigError::Line {
        line,
        msg: format!("ramp must be 'linear' or 'exp:<gamma>', got '{raw}'"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_example() {
        let cfg = parse_config_str(
            "# comment\n\
             model.layers = 4\n\
             model.heads = 2\n\
             model.head_dim = 16\n\
             model.vocab = 64\n\
             model.seed = 9\n\
             \n\
             policy.name = pyramid\n\
             policy.decay = 0.8\n\
             policy.budget = 64\n\
             run.seed = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.model.layers, 4);
        assert_eq!(cfg.run.seed, 3);
        match cfg.policy {
            CachePolicy::Pyramid(p) => {
                assert_eq!(p.decay, 0.8);
                assert_eq!(p.budget, Some(64));
                assert_eq!(p.min_pvc_lens.len(), 4);
            }
            other => panic!("wrong policy {other:?}"),
        }
    }

    #[test]
    fn unknown_key_names_the_key_and_line() {
        let err = parse_config_str("model.layers = 2\npolicy.name = full\npolicy.sparkle = 1\n")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("policy.sparkle"), "{msg}");
    }

    #[test]
    fn inapplicable_policy_keys_are_rejected() {
        let err = parse_config_str("policy.name = full\npolicy.decay = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("policy.decay"));
    }

    #[test]
    fn malformed_line_is_reported_with_number() {
        let err = parse_config_str("model.layers = 2\nnot a key value\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse_config_str("model.seed = 1\nmodel.seed = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn bad_value_is_reported() {
        let err = parse_config_str("model.layers = banana\n").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("model.layers") && msg.contains("banana"),
            "{msg}"
        );
    }

    #[test]
    fn ramp_forms() {
        let cfg = parse_config_str("policy.name = pyramid\npolicy.ramp = exp:0.9\n").unwrap();
        match cfg.policy {
            CachePolicy::Pyramid(p) => {
                assert_eq!(p.recency_ramp, RecencyRamp::Exponential { gamma: 0.9 })
            }
            _ => unreachable!(),
        }
        assert!(parse_config_str("policy.name = pyramid\npolicy.ramp = zigzag\n").is_err());
    }
}
