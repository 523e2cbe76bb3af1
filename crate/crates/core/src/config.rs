//! Run configuration: a flat key-value TOML document with validated defaults.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// How the preferred reply is chosen when every simulation scored 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AllTwoSelection {
    /// Keep the last 2-scored first reply (loop order).
    #[default]
    Last,
    /// Pick one uniformly with the sample's seeded stream.
    SeededRandom,
}

/// Handling of samples whose simulations produced both 2 and sub-2 scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixedCase {
    /// Sampled 2-reply versus sampled sub-2 reply.
    #[default]
    Algorithm,
    /// Only the unanimous cases define a pair; mixed samples are skipped.
    Equation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Simulations per seed sample when building preference pairs.
    pub k: usize,
    /// External dialogue rounds.
    pub total_rounds: usize,
    /// Recommender temperature for first-turn / candidate sampling.
    pub first_sample_temperature: f64,
    /// Temperature of score elicitation calls.
    pub vote_temperature: f64,
    pub vote_count: usize,
    /// Root candidates sampled per search invocation.
    pub ses_first_width: usize,
    /// Branching width per additional tree level.
    pub ses_inner_widths: Vec<usize>,
    /// Search is applied to this many trailing rounds.
    pub ses_start_from_last: usize,
    pub rng_seed: u64,
    pub concurrency_limit: usize,
    pub all_two_selection: AllTwoSelection,
    pub mixed_case: MixedCase,
    pub dialogue_max_tokens: u32,
    pub short_max_tokens: u32,
    /// Free-form notes copied into exported dataset metadata.
    pub notes: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 2,
            total_rounds: 3,
            first_sample_temperature: 0.5,
            vote_temperature: 0.8,
            vote_count: 10,
            ses_first_width: 3,
            ses_inner_widths: vec![2],
            ses_start_from_last: 1,
            rng_seed: 0,
            concurrency_limit: 8,
            all_two_selection: AllTwoSelection::Last,
            mixed_case: MixedCase::Algorithm,
            dialogue_max_tokens: 512,
            short_max_tokens: 256,
            notes: String::new(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k < 1 {
            return Err(invalid("k must be ≥ 1"));
        }
        if self.total_rounds < 2 {
            return Err(invalid("total_rounds must be ≥ 2"));
        }
        if self.vote_count < 1 {
            return Err(invalid("vote_count must be ≥ 1"));
        }
        if self.ses_first_width < 1 {
            return Err(invalid("ses_first_width must be ≥ 1"));
        }
        if let Some(pos) = self.ses_inner_widths.iter().position(|&w| w < 1) {
            return Err(invalid(format!("ses_inner_widths[{pos}] must be ≥ 1")));
        }
        if self.ses_start_from_last < 1 || self.ses_start_from_last > self.total_rounds {
            return Err(invalid(format!(
                "ses_start_from_last must lie in 1..={}",
                self.total_rounds
            )));
        }
        if self.concurrency_limit < 1 {
            return Err(invalid("concurrency_limit must be ≥ 1"));
        }
        for (name, t) in [
            ("first_sample_temperature", self.first_sample_temperature),
            ("vote_temperature", self.vote_temperature),
        ] {
            if !t.is_finite() || !(0.0..=2.0).contains(&t) {
                return Err(invalid(format!("{name} must lie in [0, 2]")));
            }
        }
        if self.rng_seed > i64::MAX as u64 {
            return Err(invalid("rng_seed must fit in a signed 64-bit integer"));
        }
        if self.dialogue_max_tokens == 0 || self.short_max_tokens == 0 {
            return Err(invalid("max token limits must be ≥ 1"));
        }
        Ok(())
    }

    /// External rounds (1-based) whose recommender turn goes through search.
    pub fn ses_active_rounds(&self) -> RangeInclusive<usize> {
        (self.total_rounds - self.ses_start_from_last + 1)..=self.total_rounds
    }

    /// Rounds left to play at external round `round`, including it.
    pub fn remaining_rounds(&self, round: usize) -> usize {
        self.total_rounds + 1 - round
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes to TOML")
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("RunConfig serializes to a table")
    }
}

/// Builds a validated config from a parsed key-value document.
/// Missing keys take defaults; unknown keys are rejected.
pub fn validate_config(raw: toml::Table) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::Value::Table(raw)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    validate_config(table)
}

/// Applies one `key=value` override to a raw document. The value is read as
/// a TOML literal, falling back to a bare string.
pub fn apply_override(raw: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Parse(format!("override `{assignment}` has an empty key")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    raw.insert(key.to_string(), parsed);
    Ok(())
}

/// Converts a JSON object of overrides (as sent to the session service) into
/// a validated config layered over `base`.
pub fn config_from_json_overrides(
    base: &RunConfig,
    overrides: &serde_json::Map<String, serde_json::Value>,
) -> Result<RunConfig, ConfigError> {
    let mut merged = serde_json::to_value(base).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let obj = merged.as_object_mut().expect("config serializes to an object");
    for (k, v) in overrides {
        obj.insert(k.clone(), v.clone());
    }
    let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = validate_config(toml::Table::new()).unwrap();
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.total_rounds, 3);
        assert_eq!(cfg.first_sample_temperature, 0.5);
        assert_eq!(cfg.vote_temperature, 0.8);
        assert_eq!(cfg.vote_count, 10);
        assert_eq!(cfg.ses_first_width, 3);
        assert_eq!(cfg.ses_inner_widths, vec![2]);
        assert_eq!(cfg.ses_start_from_last, 1);
    }

    #[test]
    fn zero_k_rejected() {
        let err = parse_config("k = 0").unwrap_err();
        assert_eq!(err, ConfigError::Invalid("k must be ≥ 1".into()));
    }

    #[test]
    fn last_two_rounds_active() {
        let cfg = parse_config("total_rounds = 4\nses_start_from_last = 2").unwrap();
        assert_eq!(cfg.ses_active_rounds().collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(cfg.remaining_rounds(3), 2);
        assert_eq!(cfg.remaining_rounds(4), 1);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse_config("total_rounds = 1").is_err());
        assert!(parse_config("ses_inner_widths = [2, 0]").is_err());
        assert!(parse_config("ses_first_width = 0").is_err());
        assert!(parse_config("vote_temperature = 2.5").is_err());
        assert!(parse_config("ses_start_from_last = 4").is_err());
        assert!(parse_config("k = -1").is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config("beta = 0.5").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(msg) if msg.contains("beta")));
    }

    #[test]
    fn overrides_touch_one_field() {
        let mut raw = toml::Table::new();
        apply_override(&mut raw, "k=3").unwrap();
        apply_override(&mut raw, "ses_inner_widths=[2,2]").unwrap();
        apply_override(&mut raw, "all_two_selection=seeded_random").unwrap();
        let cfg = validate_config(raw).unwrap();
        let expected = RunConfig {
            k: 3,
            ses_inner_widths: vec![2, 2],
            all_two_selection: AllTwoSelection::SeededRandom,
            ..RunConfig::default()
        };
        assert_eq!(cfg, expected);
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
    }

    #[test]
    fn json_overrides() {
        let base = RunConfig::default();
        let ok: serde_json::Map<_, _> = serde_json::from_str(r#"{"vote_count": 3}"#).unwrap();
        assert_eq!(config_from_json_overrides(&base, &ok).unwrap().vote_count, 3);
        let bad: serde_json::Map<_, _> = serde_json::from_str(r#"{"k": -1}"#).unwrap();
        assert!(config_from_json_overrides(&base, &bad).is_err());
        let unknown: serde_json::Map<_, _> = serde_json::from_str(r#"{"bogus": 1}"#).unwrap();
        assert!(config_from_json_overrides(&base, &unknown).is_err());
    }

    proptest! {
        #[test]
        fn toml_round_trip(
            k in 1usize..6,
            total in 2usize..7,
            t1 in 0.0f64..2.0,
            votes in 1usize..20,
            m in 1usize..6,
            widths in proptest::collection::vec(1usize..4, 0..3),
            seed in 0u64..=(i64::MAX as u64),
            from_last_frac in 0.0f64..1.0,
        ) {
            let cfg = RunConfig {
                k,
                total_rounds: total,
                first_sample_temperature: t1,
                vote_count: votes,
                ses_first_width: m,
                ses_inner_widths: widths,
                ses_start_from_last: 1 + ((total - 1) as f64 * from_last_frac) as usize,
                rng_seed: seed,
                ..RunConfig::default()
            };
            cfg.validate().unwrap();
            let back = parse_config(&cfg.to_toml()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
