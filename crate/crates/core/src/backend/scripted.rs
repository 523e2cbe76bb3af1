//! Deterministic backend driven by an ordered rule file.
//!
//! One JSON rule per line. A rule fires when every guard it carries holds:
//!
//! * `match`: substring of the final message (the one being replied to)
//! * `pattern`: regex over the final message
//! * `contains`: substrings that must all occur somewhere in the request
//! * `tag`: the request's telemetry tag
//! * `role`: the role the model speaks as (`user` or `recommender`)
//!
//! `respond` is either a literal or a list indexed by `seed % len`.
//! The first matching rule wins. Blank lines and lines starting with `#`
//! are ignored.

use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest};
use crate::error::BackendError;
use crate::types::Role;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Respond {
    Text(String),
    Variants(Vec<String>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub match_last: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    pub respond: Respond,
}

impl ScriptRule {
    pub fn reply(text: impl Into<String>) -> Self {
        Self { respond: Respond::Text(text.into()), ..Self::default() }
    }

    pub fn variants<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self {
            respond: Respond::Variants(texts.into_iter().map(Into::into).collect()),
            ..Self::default()
        }
    }

    pub fn on_last(mut self, needle: impl Into<String>) -> Self {
        self.match_last = Some(needle.into());
        self
    }

    pub fn on_pattern(mut self, pattern: impl Into<String>) -> Self {
        self.pattern = Some(pattern.into());
        self
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn for_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn as_role(mut self, role: Role) -> Self {
        self.role = Some(role);
        self
    }
}

impl Default for Respond {
    fn default() -> Self {
        Respond::Text(String::new())
    }
}

#[derive(Debug)]
struct CompiledRule {
    rule: ScriptRule,
    pattern: Option<Regex>,
}

impl CompiledRule {
    fn matches(&self, request: &ChatRequest) -> bool {
        let last = request.last_content();
        if let Some(tag) = &self.rule.tag {
            if tag != &request.tag {
                return false;
            }
        }
        if let Some(role) = self.rule.role {
            if role != request.assistant_role {
                return false;
            }
        }
        if let Some(needle) = &self.rule.match_last {
            if !last.contains(needle.as_str()) {
                return false;
            }
        }
        if let Some(re) = &self.pattern {
            if !re.is_match(last) {
                return false;
            }
        }
        self.rule
            .contains
            .iter()
            .all(|needle| request.messages.messages().iter().any(|m| m.content.contains(needle.as_str())))
    }
}

#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<CompiledRule>,
    default_temperature: f64,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Result<Self, BackendError> {
        let rules = rules
            .into_iter()
            .map(|rule| {
                if let Respond::Variants(v) = &rule.respond {
                    if v.is_empty() {
                        return Err(BackendError::InvalidRequest("rule with an empty variant list".into()));
                    }
                }
                let pattern = rule
                    .pattern
                    .as_deref()
                    .map(Regex::new)
                    .transpose()
                    .map_err(|e| BackendError::InvalidRequest(format!("bad rule pattern: {e}")))?;
                Ok(CompiledRule { rule, pattern })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rules, default_temperature: 0.7 })
    }

    pub fn with_default_temperature(mut self, t: f64) -> Self {
        self.default_temperature = t;
        self
    }

    pub fn parse(text: &str) -> Result<Self, BackendError> {
        let mut rules = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rule: ScriptRule = serde_json::from_str(line).map_err(|e| {
                BackendError::InvalidRequest(format!("script line {}: {e}", lineno + 1))
            })?;
            rules.push(rule);
        }
        Self::new(rules)
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("cannot read script {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_jsonl(rules: &[ScriptRule]) -> String {
        rules
            .iter()
            .map(|r| serde_json::to_string(r).expect("rule serializes") + "\n")
            .collect()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let rule = self
            .rules
            .iter()
            .find(|r| r.matches(request))
            .ok_or_else(|| BackendError::MalformedResponse("no script rule matched".into()))?;
        let text = match &rule.rule.respond {
            Respond::Text(t) => t.clone(),
            Respond::Variants(v) => {
                let idx = (request.seed.unwrap_or(0) % v.len() as u64) as usize;
                v[idx].clone()
            }
        };
        Ok(text)
    }

    fn default_temperature(&self) -> f64 {
        self.default_temperature
    }

    fn describe(&self) -> String {
        format!("scripted({} rules)", self.rules.len())
    }
}
