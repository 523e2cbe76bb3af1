//! Role prompt rendering.
//!
//! Each agent role has a plain-text template with `{placeholder}` markers.
//! The defaults ship in `templates/` and are compiled in; a directory with
//! the same file names can replace them. The set's hash is stamped on every
//! exported artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, PromptError};
use crate::types::{Message, Role, Transcript, UserProfile};

/// Appended to the user's turn that precedes the recommender's last reply.
pub const EXPLAIN_REQUEST: &str = "Please explain your last time of recommendation.";

/// Added when a score reply had no usable digit.
pub const DIGIT_ONLY_SUFFIX: &str = "Please reply with a single digit 0, 1 or 2.";

const EXTERNAL_REFERENCE: &str = "the items you are really looking for";
const INTERNAL_REFERENCE: &str = "what the user's preferences call for";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Recommender,
    ExternalUser,
    InternalUser,
    Summarizer,
    ScoreElicitor,
}

impl PromptRole {
    pub const ALL: [PromptRole; 5] = [
        PromptRole::Recommender,
        PromptRole::ExternalUser,
        PromptRole::InternalUser,
        PromptRole::Summarizer,
        PromptRole::ScoreElicitor,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptRole::Recommender => "recommender.txt",
            PromptRole::ExternalUser => "external_user.txt",
            PromptRole::InternalUser => "internal_user.txt",
            PromptRole::Summarizer => "summarizer.txt",
            PromptRole::ScoreElicitor => "score_elicitor.txt",
        }
    }

    fn placeholders(self) -> &'static [&'static str] {
        match self {
            PromptRole::Recommender => &[],
            PromptRole::ExternalUser => &["label"],
            PromptRole::InternalUser => &["profile"],
            PromptRole::Summarizer => &["dialogue"],
            PromptRole::ScoreElicitor => &["reference"],
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            PromptRole::Recommender => include_str!("../templates/recommender.txt"),
            PromptRole::ExternalUser => include_str!("../templates/external_user.txt"),
            PromptRole::InternalUser => include_str!("../templates/internal_user.txt"),
            PromptRole::Summarizer => include_str!("../templates/summarizer.txt"),
            PromptRole::ScoreElicitor => include_str!("../templates/score_elicitor.txt"),
        }
    }
}

impl fmt::Display for PromptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub role: PromptRole,
    pub system_text: String,
    pub placeholder_names: Vec<String>,
}

impl PromptTemplate {
    pub fn new(role: PromptRole, system_text: impl Into<String>) -> Result<Self, PromptError> {
        let system_text = system_text.into().trim_end().to_string();
        let placeholder_names: Vec<String> = role.placeholders().iter().map(|s| s.to_string()).collect();
        for cap in placeholder_re().captures_iter(&system_text) {
            let name = &cap[1];
            if !placeholder_names.iter().any(|p| p == name) {
                return Err(PromptError::UnknownPlaceholder { role: role.to_string(), name: name.to_string() });
            }
        }
        Ok(Self { role, system_text, placeholder_names })
    }

    /// Substitutes every placeholder. Values are inserted verbatim and are
    /// not rescanned, so braces inside them are harmless.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let mut missing = None;
        let out = placeholder_re().replace_all(&self.system_text, |cap: &regex::Captures<'_>| {
            match values.get(&cap[1]) {
                Some(v) => v.clone(),
                None => {
                    missing.get_or_insert_with(|| cap[1].to_string());
                    String::new()
                }
            }
        });
        match missing {
            Some(name) => Err(PromptError::Unresolved(name)),
            None => Ok(out.into_owned()),
        }
    }
}

/// The five role templates used by one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<PromptRole, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let templates = PromptRole::ALL
            .into_iter()
            .map(|r| (r, PromptTemplate::new(r, r.default_text()).expect("bundled templates are valid")))
            .collect();
        Self { templates }
    }
}

impl PromptSet {
    /// Loads `<role>.txt` files from `dir`; roles without a file keep the
    /// bundled default.
    pub fn from_dir(dir: &Path) -> Result<Self, Error> {
        let mut set = Self::default();
        for role in PromptRole::ALL {
            let path = dir.join(role.file_name());
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                set.templates.insert(role, PromptTemplate::new(role, text)?);
            }
        }
        Ok(set)
    }

    pub fn template(&self, role: PromptRole) -> &PromptTemplate {
        &self.templates[&role]
    }

    /// Short content hash over all templates, recorded for provenance.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (role, t) in &self.templates {
            h.update(role.file_name().as_bytes());
            h.update([0u8]);
            h.update(t.system_text.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn system(&self, role: PromptRole, values: &[(&'static str, String)]) -> Result<Message, PromptError> {
        let map: BTreeMap<&str, String> = values.iter().cloned().collect();
        Ok(Message::system(self.template(role).render(&map)?)?)
    }

    /// System prompt followed by the dialogue; the recommender replies next.
    pub fn render_recommender(&self, history: &Transcript) -> Result<Transcript, PromptError> {
        let dialogue = history.dialogue();
        match dialogue.last() {
            None => return Err(PromptError::EmptyHistory),
            Some(m) if m.role != Role::User => return Err(PromptError::WrongTrailingRole(m.role.to_string())),
            _ => {}
        }
        let mut msgs = Vec::with_capacity(dialogue.len() + 1);
        msgs.push(self.system(PromptRole::Recommender, &[])?);
        msgs.extend_from_slice(dialogue);
        Ok(Transcript::from_messages(msgs)?)
    }

    /// Prompt for the label-aware user simulator. On the final round the
    /// score-elicitation instruction is attached after the recommender's
    /// last turn.
    pub fn render_external_user(
        &self,
        history: &Transcript,
        label: &[String],
        round: usize,
        total_rounds: usize,
    ) -> Result<Transcript, PromptError> {
        if label.is_empty() || label.iter().all(|l| l.trim().is_empty()) {
            return Err(PromptError::EmptyLabel);
        }
        check_round(round, total_rounds)?;
        let system = self.system(PromptRole::ExternalUser, &[("label", label.join(", "))])?;
        self.user_side(system, history, round == total_rounds, EXTERNAL_REFERENCE)
    }

    /// Prompt for the label-blind internal user, conditioned on a profile.
    pub fn render_internal_user(
        &self,
        history: &Transcript,
        profile: &UserProfile,
        round: usize,
        total_rounds: usize,
    ) -> Result<Transcript, PromptError> {
        if profile.text.trim().is_empty() {
            return Err(PromptError::EmptyProfile);
        }
        check_round(round, total_rounds)?;
        let system = self.system(PromptRole::InternalUser, &[("profile", profile.text.trim().to_string())])?;
        self.user_side(system, history, round == total_rounds, INTERNAL_REFERENCE)
    }

    fn user_side(
        &self,
        system: Message,
        history: &Transcript,
        elicit: bool,
        reference: &str,
    ) -> Result<Transcript, PromptError> {
        let dialogue = history.dialogue();
        if dialogue.is_empty() {
            return Err(PromptError::EmptyHistory);
        }
        let mut msgs = Vec::with_capacity(dialogue.len() + 2);
        msgs.push(system);
        msgs.extend_from_slice(dialogue);
        let mut out = Transcript::from_messages(msgs)?;
        if elicit {
            let instruction = self.elicitation(reference)?;
            attach_to_recommender_turn(&mut out, &instruction)?;
        }
        Ok(out)
    }

    fn elicitation(&self, reference: &str) -> Result<String, PromptError> {
        let map: BTreeMap<&str, String> = [("reference", reference.to_string())].into_iter().collect();
        self.template(PromptRole::ScoreElicitor).render(&map)
    }

    /// Single-turn request asking for a fixed-format preference profile.
    pub fn render_summarizer(&self, h_external: &Transcript) -> Result<Transcript, PromptError> {
        let dialogue = h_external.dialogue();
        if !dialogue.iter().any(|m| m.role == Role::User) {
            return Err(PromptError::NothingToSummarize);
        }
        let text = format_dialogue(dialogue);
        let map: BTreeMap<&str, String> = [("dialogue", text)].into_iter().collect();
        let body = self.template(PromptRole::Summarizer).render(&map)?;
        Ok(Transcript::from_messages(vec![Message::user(body)?])?)
    }
}

/// Adds `text` to the recommender turn the user side is answering, or as a
/// standalone recommender-side turn when the history ends with the user.
pub(crate) fn attach_to_recommender_turn(t: &mut Transcript, text: &str) -> Result<(), PromptError> {
    match t.last_mut() {
        Some(last) if last.role == Role::Recommender => {
            last.content = format!("{}\n\n{}", last.content.trim_end(), text);
            Ok(())
        }
        _ => Ok(t.push_turn(Role::Recommender, text)?),
    }
}

/// `Role: content` lines, one per message.
pub fn format_dialogue(messages: &[Message]) -> String {
    messages
        .iter()
        .map(|m| format!("{}: {}", m.role, m.content.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn check_round(round: usize, total: usize) -> Result<(), PromptError> {
    if round == 0 || round > total {
        Err(PromptError::RoundOutOfRange { round, total })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed3() -> Transcript {
        let mut t = Transcript::new();
        t.push_turn(Role::User, "I like Black Hawk Down. Any similar films?").unwrap();
        t.push_turn(Role::Recommender, "Is it the action or the war setting you like?").unwrap();
        t.push_turn(Role::User, "I like action more, but war films are good too.").unwrap();
        t
    }

    fn with_reply(mut t: Transcript) -> Transcript {
        t.push_turn(Role::Recommender, "Try Saving Private Ryan.").unwrap();
        t
    }

    #[test]
    fn recommender_prepends_system() {
        let p = PromptSet::default();
        let out = p.render_recommender(&seed3()).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.messages()[0].role, Role::System);
        assert_eq!(&out.messages()[1..], seed3().messages());
    }

    #[test]
    fn recommender_errors() {
        let p = PromptSet::default();
        assert_eq!(p.render_recommender(&Transcript::new()).unwrap_err(), PromptError::EmptyHistory);
        assert!(matches!(
            p.render_recommender(&with_reply(seed3())).unwrap_err(),
            PromptError::WrongTrailingRole(_)
        ));
    }

    #[test]
    fn external_user_final_round_has_rubric() {
        let p = PromptSet::default();
        let label = vec!["Zero Dark Thirty".to_string()];
        let out = p.render_external_user(&with_reply(seed3()), &label, 3, 3).unwrap();
        let last = &out.last().unwrap().content;
        assert!(last.contains("Please give your score"));
        assert!(last.contains("2 -") && last.contains("1 -") && last.contains("0 -"));
        assert!(out.messages()[0].content.contains("Zero Dark Thirty"));
    }

    #[test]
    fn external_user_early_round_has_no_rubric() {
        let p = PromptSet::default();
        let label = vec!["Zero Dark Thirty".to_string()];
        let out = p.render_external_user(&with_reply(seed3()), &label, 1, 3).unwrap();
        assert!(out.messages().iter().all(|m| !m.content.contains("Please give your score")));
        assert_eq!(p.render_external_user(&seed3(), &[], 1, 3).unwrap_err(), PromptError::EmptyLabel);
        assert!(p.render_external_user(&seed3(), &label, 4, 3).is_err());
        assert!(p.render_external_user(&seed3(), &label, 0, 3).is_err());
    }

    #[test]
    fn internal_user_uses_profile() {
        let p = PromptSet::default();
        let profile = UserProfile { text: "likes recent intense war films".into(), source_turns: 3 };
        let out = p.render_internal_user(&with_reply(seed3()), &profile, 2, 2).unwrap();
        assert!(out.messages()[0].content.contains("likes recent intense war films"));
        assert!(out.last().unwrap().content.contains("Please give your score"));
        let early = p.render_internal_user(&with_reply(seed3()), &profile, 1, 2).unwrap();
        assert!(!early.last().unwrap().content.contains("Please give your score"));
        let empty = UserProfile { text: " ".into(), source_turns: 0 };
        assert_eq!(p.render_internal_user(&seed3(), &empty, 1, 2).unwrap_err(), PromptError::EmptyProfile);
    }

    #[test]
    fn summarizer_embeds_turns_in_order() {
        let p = PromptSet::default();
        let out = p.render_summarizer(&seed3()).unwrap();
        assert_eq!(out.len(), 1);
        let body = &out.messages()[0].content;
        let mut pos = 0;
        for m in seed3().messages() {
            let at = body[pos..].find(m.content.as_str()).expect("turn embedded") + pos;
            pos = at;
        }
        let mut six = seed3();
        six.push_turn(Role::Recommender, "How about Platoon?").unwrap();
        six.push_turn(Role::User, "Seen it.").unwrap();
        six.push_turn(Role::Recommender, "Then We Were Soldiers.").unwrap();
        let body6 = p.render_summarizer(&six).unwrap().messages()[0].content.clone();
        assert_eq!(body6.matches("\nUser: ").count() + body6.matches("\nRecommender: ").count(), 6);
    }

    #[test]
    fn summarizer_needs_user_turns() {
        let p = PromptSet::default();
        let only_sys = Transcript::from_messages(vec![Message::system("s").unwrap()]).unwrap();
        assert_eq!(p.render_summarizer(&only_sys).unwrap_err(), PromptError::NothingToSummarize);
    }

    #[test]
    fn rendering_is_pure() {
        let p = PromptSet::default();
        let label = vec!["X".to_string()];
        assert_eq!(
            p.render_external_user(&seed3(), &label, 2, 3).unwrap(),
            p.render_external_user(&seed3(), &label, 2, 3).unwrap()
        );
        assert_eq!(p.hash(), PromptSet::default().hash());
        assert_eq!(p.hash().len(), 16);
    }

    #[test]
    fn template_placeholder_checks() {
        assert!(matches!(
            PromptTemplate::new(PromptRole::Recommender, "hi {label}"),
            Err(PromptError::UnknownPlaceholder { .. })
        ));
        let t = PromptTemplate::new(PromptRole::ExternalUser, "want {label}").unwrap();
        assert_eq!(t.render(&BTreeMap::new()).unwrap_err(), PromptError::Unresolved("label".into()));
        let mut m = BTreeMap::new();
        m.insert("label", "{profile}".to_string());
        assert_eq!(t.render(&m).unwrap(), "want {profile}");
    }

    #[test]
    fn template_dir_overrides_and_changes_hash() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("recommender.txt"), "Recommend something.").unwrap();
        let set = PromptSet::from_dir(dir.path()).unwrap();
        assert_eq!(set.template(PromptRole::Recommender).system_text, "Recommend something.");
        assert_ne!(set.hash(), PromptSet::default().hash());
        std::fs::write(dir.path().join("summarizer.txt"), "{nope}").unwrap();
        assert!(PromptSet::from_dir(dir.path()).is_err());
    }
}
