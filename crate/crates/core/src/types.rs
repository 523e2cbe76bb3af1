//! Dialogue domain types shared across the engine.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::TranscriptError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Recommender,
    System,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "User",
            Role::Recommender => "Recommender",
            Role::System => "System",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    /// Builds a message, rejecting content that is blank after trimming.
    pub fn new(role: Role, content: impl Into<String>) -> Result<Self, TranscriptError> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(TranscriptError::EmptyContent);
        }
        Ok(Self { role, content })
    }

    pub fn user(content: impl Into<String>) -> Result<Self, TranscriptError> {
        Self::new(Role::User, content)
    }

    pub fn recommender(content: impl Into<String>) -> Result<Self, TranscriptError> {
        Self::new(Role::Recommender, content)
    }

    pub fn system(content: impl Into<String>) -> Result<Self, TranscriptError> {
        Self::new(Role::System, content)
    }
}

/// Ordered dialogue history.
///
/// The seed prefix passed to [`Transcript::from_messages`] may contain
/// consecutive turns from the same speaker (raw datasets do), but every
/// message added through [`Transcript::push`] must alternate with its
/// predecessor. A `System` message may only sit at index 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    messages: Vec<Message>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_messages(messages: Vec<Message>) -> Result<Self, TranscriptError> {
        for (idx, m) in messages.iter().enumerate() {
            if m.content.trim().is_empty() {
                return Err(TranscriptError::EmptyContent);
            }
            if m.role == Role::System && idx != 0 {
                return Err(TranscriptError::MisplacedSystem(idx));
            }
        }
        Ok(Self { messages })
    }

    /// Appends a dialogue turn, enforcing strict User/Recommender alternation.
    pub fn push(&mut self, message: Message) -> Result<(), TranscriptError> {
        if message.content.trim().is_empty() {
            return Err(TranscriptError::EmptyContent);
        }
        if message.role == Role::System {
            if !self.messages.is_empty() {
                return Err(TranscriptError::MisplacedSystem(self.messages.len()));
            }
        } else if let Some(last) = self.messages.last() {
            if last.role == message.role {
                return Err(TranscriptError::Alternation {
                    index: self.messages.len(),
                    role: message.role,
                });
            }
        }
        self.messages.push(message);
        Ok(())
    }

    pub fn push_turn(&mut self, role: Role, content: impl Into<String>) -> Result<(), TranscriptError> {
        self.push(Message::new(role, content)?)
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn into_messages(self) -> Vec<Message> {
        self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn last(&self) -> Option<&Message> {
        self.messages.last()
    }

    pub fn last_role(&self) -> Option<Role> {
        self.messages.last().map(|m| m.role)
    }

    /// Messages without a leading system prompt.
    pub fn dialogue(&self) -> &[Message] {
        match self.messages.first() {
            Some(m) if m.role == Role::System => &self.messages[1..],
            _ => &self.messages,
        }
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.messages.iter().filter(|m| m.role == role).count()
    }

    /// Plain concatenation of two histories. The join point must alternate.
    pub fn concat(&self, tail: &Transcript) -> Result<Transcript, TranscriptError> {
        let mut out = self.clone();
        for m in tail.dialogue() {
            out.push(m.clone())?;
        }
        Ok(out)
    }

    pub(crate) fn last_mut(&mut self) -> Option<&mut Message> {
        self.messages.last_mut()
    }
}

/// A dataset conversation prefix plus its ground-truth recommendation items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSample {
    pub id: String,
    #[serde(rename = "messages")]
    pub history: Transcript,
    pub label: Vec<String>,
}

impl SeedSample {
    pub fn new(id: impl Into<String>, history: Transcript, label: Vec<String>) -> Result<Self, TranscriptError> {
        let sample = Self { id: id.into(), history, label };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<(), TranscriptError> {
        if self.id.trim().is_empty() {
            return Err(TranscriptError::InvalidSeed("empty id".into()));
        }
        if self.label.is_empty() || self.label.iter().any(|l| l.trim().is_empty()) {
            return Err(TranscriptError::InvalidSeed("label list must be non-empty".into()));
        }
        if self.history.messages().iter().any(|m| m.role == Role::System) {
            return Err(TranscriptError::InvalidSeed("seed history must not carry a system prompt".into()));
        }
        match self.history.last_role() {
            Some(Role::User) => Ok(()),
            Some(_) => Err(TranscriptError::InvalidSeed("history must end with a user message".into())),
            None => Err(TranscriptError::InvalidSeed("empty history".into())),
        }
    }

    /// The label rendered as a single response text (`r_gt`).
    pub fn label_text(&self) -> String {
        self.label.join(", ")
    }
}

/// Three-level judgement: 2 = at least as good as the label, 1 = comparable, 0 = worse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Score(u8);

impl Score {
    pub const ZERO: Score = Score(0);
    pub const ONE: Score = Score(1);
    pub const TWO: Score = Score(2);
    pub const ALL: [Score; 3] = [Score::ZERO, Score::ONE, Score::TWO];

    pub fn new(value: u8) -> Option<Self> {
        (value <= 2).then_some(Score(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Score {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Score::new(value).ok_or_else(|| format!("score {value} outside 0..=2"))
    }
}

impl From<Score> for u8 {
    fn from(s: Score) -> u8 {
        s.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairSource {
    /// Every simulation scored 2: a sampled reply beats the label.
    SampledVsLabel,
    /// Every simulation scored below 2: the label beats a sampled reply.
    LabelVsSampled,
    /// Mixed scores: two sampled replies.
    SampledVsSampled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairProvenance {
    pub scores: Vec<Score>,
    pub k: usize,
    pub source: PairSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub context: Transcript,
    pub chosen: String,
    pub rejected: String,
    pub provenance: PairProvenance,
}

/// Fixed-format preference summary of an external dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub text: String,
    pub source_turns: usize,
}
