//! Seed dataset loading, subsetting, import adapters and split manifests.
//!
//! Canonical record, one per line:
//! `{"id": "...", "messages": [{"role": "user", "content": "..."}], "label": ["..."]}`

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::jsonl;
use crate::rng::seeded_rng;
use crate::types::{Message, Role, SeedSample, Transcript};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train, valid, test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub path: PathBuf,
    pub count: usize,
    pub schema_version: u32,
}

impl DatasetManifest {
    /// `<data>.manifest.json`
    pub fn path_for(data: &Path) -> PathBuf {
        let mut p = data.as_os_str().to_owned();
        p.push(".manifest.json");
        PathBuf::from(p)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest and checks it against the data file it names.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        let bad = |message: String| Error::Dataset { path: path.to_path_buf(), message };
        if m.schema_version != SCHEMA_VERSION {
            return Err(bad(format!("unsupported schema_version {}", m.schema_version)));
        }
        let data = if m.path.is_relative() {
            path.parent().unwrap_or(Path::new(".")).join(&m.path)
        } else {
            m.path.clone()
        };
        let on_disk = count_records(&data)?;
        if on_disk != m.count {
            return Err(bad(format!("count {} but {} records on disk", m.count, on_disk)));
        }
        Ok(m)
    }
}

fn count_records(path: &Path) -> Result<usize> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut n = 0;
    for line in BufReader::new(f).lines() {
        if !line.map_err(|e| Error::io(path, e))?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

/// A line that failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    pub line: usize,
    pub error: String,
    pub raw: String,
}

#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub samples: Vec<SeedSample>,
    pub rejected: Vec<Rejected>,
    /// Where rejects were written, if any.
    pub sidecar: Option<PathBuf>,
}

/// `<data>.rejects.jsonl`
pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut p = data.as_os_str().to_owned();
    p.push(".rejects.jsonl");
    PathBuf::from(p)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    messages: Vec<Message>,
    label: Vec<String>,
}

fn parse_record(line: &str) -> std::result::Result<SeedSample, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if raw.id.trim().is_empty() {
        return Err("empty id".into());
    }
    if raw.messages.iter().any(|m| m.content.trim().is_empty()) {
        return Err("blank message content".into());
    }
    let history = Transcript::from_messages(raw.messages).map_err(|e| e.to_string())?;
    SeedSample::new(raw.id, history, raw.label).map_err(|e| e.to_string())
}

/// Streams `path`, validating each record. Malformed or duplicate records go
/// to the sidecar file; it is an error when none survive.
pub fn load_seed_dataset(path: &Path) -> Result<LoadOutcome> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(s) if !ids.insert(s.id.clone()) => {
                rejected.push(Rejected { line: i + 1, error: format!("duplicate id {:?}", s.id), raw: line })
            }
            Ok(s) => samples.push(s),
            Err(error) => rejected.push(Rejected { line: i + 1, error, raw: line }),
        }
    }
    let sidecar = if rejected.is_empty() {
        None
    } else {
        let p = sidecar_path(path);
        tracing::warn!(count = rejected.len(), sidecar = %p.display(), "rejected malformed records");
        jsonl::write(&p, &rejected)?;
        Some(p)
    };
    if samples.is_empty() {
        return Err(Error::Dataset { path: path.to_path_buf(), message: "no valid records".into() });
    }
    Ok(LoadOutcome { samples, rejected, sidecar })
}

/// Writes samples in the canonical format.
pub fn export(path: &Path, samples: &[SeedSample]) -> Result<()> {
    jsonl::write(path, samples)
}

/// `n` samples drawn uniformly without replacement, kept in input order.
pub fn sample_subset(dataset: &[SeedSample], n: usize, seed: u64) -> Result<Vec<SeedSample>> {
    if n == 0 || n > dataset.len() {
        return Err(Error::SubsetOutOfRange { n, len: dataset.len() });
    }
    let mut rng = seeded_rng(seed, "subset");
    let mut picked = index::sample(&mut rng, dataset.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| dataset[i].clone()).collect())
}

/// Raw dataset shapes the importer understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportFormat {
    /// ReDial conversation records with `@id` movie mentions.
    Redial,
    /// Generic `{id, turns: [{speaker, text}], label}` records, as produced
    /// by flattening OpenDialKG-style dialogues.
    Turns,
    /// Already canonical; validated and copied.
    Canonical,
}

impl FromStr for ImportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "redial" => Ok(ImportFormat::Redial),
            "turns" | "opendialkg" => Ok(ImportFormat::Turns),
            "canonical" | "seed" => Ok(ImportFormat::Canonical),
            other => Err(format!("unknown import format {other:?} (redial, turns, canonical)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImportReport {
    pub manifest: DatasetManifest,
    pub skipped: Vec<Rejected>,
}

/// Converts `input` to canonical seeds at `output` and writes the manifest
/// next to it.
pub fn import_file(format: ImportFormat, input: &Path, output: &Path, name: &str, split: Split) -> Result<ImportReport> {
    let f = File::open(input).map_err(|e| Error::io(input, e))?;
    let mut seeds = Vec::new();
    let mut skipped = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let converted = match format {
            ImportFormat::Canonical => parse_record(&line).map(|s| vec![s]),
            ImportFormat::Redial => serde_json::from_str(&line).map_err(|e| e.to_string()).and_then(|v| redial_seeds(&v)),
            ImportFormat::Turns => serde_json::from_str(&line).map_err(|e| e.to_string()).and_then(|v| turns_seed(&v, i)),
        };
        match converted {
            Ok(batch) => {
                for s in batch {
                    if ids.insert(s.id.clone()) {
                        seeds.push(s);
                    } else {
                        skipped.push(Rejected { line: i + 1, error: format!("duplicate id {:?}", s.id), raw: String::new() });
                    }
                }
            }
            Err(error) => skipped.push(Rejected { line: i + 1, error, raw: line }),
        }
    }
    if seeds.is_empty() {
        return Err(Error::Dataset { path: input.to_path_buf(), message: "import produced no seeds".into() });
    }
    export(output, &seeds)?;
    if !skipped.is_empty() {
        jsonl::write(&sidecar_path(output), &skipped)?;
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        split,
        path: PathBuf::from(output.file_name().unwrap_or(output.as_os_str())),
        count: seeds.len(),
        schema_version: SCHEMA_VERSION,
    };
    manifest.write(&DatasetManifest::path_for(output))?;
    Ok(ImportReport { manifest, skipped })
}

fn speaker_role(s: &str) -> Option<Role> {
    match s.to_ascii_lowercase().as_str() {
        "user" | "seeker" | "human" | "initiator" => Some(Role::User),
        "recommender" | "assistant" | "system_agent" | "agent" | "respondent" | "bot" => Some(Role::Recommender),
        _ => None,
    }
}

/// Appends a turn, merging it into the previous one when the speaker repeats.
fn push_merged(turns: &mut Vec<(Role, String)>, role: Role, text: &str) {
    let text = text.trim();
    if text.is_empty() {
        return;
    }
    match turns.last_mut() {
        Some((r, t)) if *r == role => {
            t.push('\n');
            t.push_str(text);
        }
        _ => turns.push((role, text.to_string())),
    }
}

fn to_transcript(turns: &[(Role, String)]) -> std::result::Result<Transcript, String> {
    let msgs = turns
        .iter()
        .map(|(r, t)| Message::new(*r, t.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    Transcript::from_messages(msgs).map_err(|e| e.to_string())
}

fn label_list(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(a)) => a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect(),
        _ => Vec::new(),
    }
}

/// One seed per record, truncated after the last user turn.
fn turns_seed(v: &Value, line: usize) -> std::result::Result<Vec<SeedSample>, String> {
    let id = match v.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("line-{}", line + 1),
    };
    let raw_turns = v.get("turns").and_then(Value::as_array).ok_or("missing turns array")?;
    let mut turns = Vec::new();
    for t in raw_turns {
        let speaker = t.get("speaker").or_else(|| t.get("role")).and_then(Value::as_str).ok_or("turn without speaker")?;
        let text = t.get("text").or_else(|| t.get("content")).and_then(Value::as_str).ok_or("turn without text")?;
        let role = speaker_role(speaker).ok_or_else(|| format!("unknown speaker {speaker:?}"))?;
        push_merged(&mut turns, role, text);
    }
    let last_user = turns.iter().rposition(|(r, _)| *r == Role::User).ok_or("no user turn")?;
    turns.truncate(last_user + 1);
    let label = label_list(v.get("label").or_else(|| v.get("labels")).or_else(|| v.get("target")));
    let history = to_transcript(&turns)?;
    SeedSample::new(id, history, label).map(|s| vec![s]).map_err(|e| e.to_string())
}

fn mention_re() -> &'static regex::Regex {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"@(\d+)").expect("valid regex"))
}

/// One seed per recommender turn that mentions a known movie: the history
/// before that turn, labelled with the movies it mentions.
fn redial_seeds(v: &Value) -> std::result::Result<Vec<SeedSample>, String> {
    let conv = match v.get("conversationId") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err("missing conversationId".into()),
    };
    let initiator = v.get("initiatorWorkerId").ok_or("missing initiatorWorkerId")?;
    let mentions: BTreeMap<String, String> = v
        .get("movieMentions")
        .and_then(Value::as_object)
        .map(|m| m.iter().filter_map(|(k, t)| t.as_str().map(|t| (k.clone(), t.trim().to_string()))).collect())
        .unwrap_or_default();
    let messages = v.get("messages").and_then(Value::as_array).ok_or("missing messages")?;

    let mut turns: Vec<(Role, String)> = Vec::new();
    let mut turn_mentions: Vec<Vec<String>> = Vec::new();
    for m in messages {
        let text = m.get("text").and_then(Value::as_str).ok_or("message without text")?;
        let sender = m.get("senderWorkerId").ok_or("message without senderWorkerId")?;
        let role = if sender == initiator { Role::User } else { Role::Recommender };
        let mut found = Vec::new();
        let rendered = mention_re().replace_all(text, |c: &regex::Captures| match mentions.get(&c[1]) {
            Some(title) => {
                found.push(title.clone());
                title.clone()
            }
            None => c[0].to_string(),
        });
        let before = turns.len();
        push_merged(&mut turns, role, &rendered);
        if turns.len() > before {
            turn_mentions.push(found);
        } else if let Some(last) = turn_mentions.last_mut() {
            last.extend(found);
        }
    }
    let mut seeds = Vec::new();
    for (i, (role, _)) in turns.iter().enumerate() {
        if *role != Role::Recommender || i == 0 || turn_mentions[i].is_empty() {
            continue;
        }
        let mut label = Vec::new();
        for t in &turn_mentions[i] {
            if !label.contains(t) {
                label.push(t.clone());
            }
        }
        let history = to_transcript(&turns[..i])?;
        if let Ok(s) = SeedSample::new(format!("{conv}-{i}"), history, label) {
            seeds.push(s);
        }
    }
    if seeds.is_empty() {
        return Err("no recommender turn with a known movie mention".into());
    }
    Ok(seeds)
}
