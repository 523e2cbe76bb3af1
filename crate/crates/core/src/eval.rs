//! Mean simulated-dialogue score and Recall@1 over a test set.

use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::LedgerSnapshot;
use crate::context::RunContext;
use crate::dialogue::simulate_with;
use crate::error::{Error, Result};
use crate::ses::{ses_select, SesTrace};
use crate::types::{Score, SeedSample, Transcript};

/// Identifies the item-extraction rule recorded in reports.
pub const EXTRACTION_RULE: &str = "top1-titlecase-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub score: Score,
    pub votes: Vec<Score>,
    pub rounds: usize,
    pub ses_used: bool,
    /// Chosen root index of every search, in round order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ses_choices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSample {
    pub id: String,
    pub reply: String,
    pub top_item: Option<String>,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub hits: usize,
    pub n: usize,
    pub recall_at_1: f64,
    pub extraction_rule: String,
    pub per_sample: Vec<RecallSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub method: String,
    pub n_samples: usize,
    /// Exact integer sum of the scored samples.
    pub score_sum: u64,
    pub scored: usize,
    pub mean_score: f64,
    /// `mean_score` to two decimals.
    pub mean_display: String,
    pub recall_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<RecallReport>,
    pub per_sample: Vec<SampleScore>,
    pub excluded: Vec<Exclusion>,
    pub ledger: LedgerSnapshot,
    pub seed: u64,
}

impl EvalReport {
    pub fn with_recall(mut self, recall: RecallReport) -> Self {
        self.recall_at_1 = Some(recall.recall_at_1);
        self.recall = Some(recall);
        self
    }

    /// Mean recomputed from `per_sample` as an exact fraction.
    pub fn exact_mean(&self) -> (u64, u64) {
        let sum: u64 = self.per_sample.iter().map(|s| s.score.value() as u64).sum();
        (sum, self.per_sample.len() as u64)
    }
}

/// Everything one evaluated sample produced, for audit output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleDetail {
    pub id: String,
    pub transcript: Transcript,
    pub traces: Vec<SesTrace>,
}

fn render_mean(sum: u64, n: usize) -> (f64, String) {
    if n == 0 {
        return (0.0, "n/a".into());
    }
    let mean = sum as f64 / n as f64;
    (mean, format!("{mean:.2}"))
}

/// Evaluates every sample with the external simulator, optionally letting
/// search produce the recommender turns of the trailing rounds.
pub fn ieval_run(ctx: &RunContext, dataset_name: &str, test: &[SeedSample], ses_enabled: bool) -> Result<EvalReport> {
    Ok(ieval_run_detailed(ctx, dataset_name, test, ses_enabled)?.0)
}

pub fn ieval_run_detailed(
    ctx: &RunContext,
    dataset_name: &str,
    test: &[SeedSample],
    ses_enabled: bool,
) -> Result<(EvalReport, Vec<SampleDetail>)> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (ctx, scope) = ctx.scoped();
    let ctx = &ctx;
    let active = ctx.config.ses_active_rounds();
    let results = ctx.exec.map(test.iter().collect(), |sample| {
        let mut traces = Vec::new();
        let outcome = simulate_with(ctx, sample, |history, round| {
            if ses_enabled && active.contains(&round) {
                let (reply, trace) = ses_select(ctx, history, ctx.config.remaining_rounds(round))?;
                traces.push(trace);
                Ok(reply)
            } else {
                ctx.recommend(history, ctx.agents.recommender.default_temperature(), 0)
            }
        });
        (sample, outcome, traces)
    });
    let mut per_sample = Vec::new();
    let mut excluded = Vec::new();
    let mut details = Vec::new();
    for (sample, outcome, traces) in results {
        match outcome {
            Ok(o) => {
                per_sample.push(SampleScore {
                    id: sample.id.clone(),
                    score: o.score,
                    votes: o.raw_votes.clone(),
                    rounds: o.rec_turns.len(),
                    ses_used: !traces.is_empty(),
                    ses_choices: traces.iter().map(|t| t.chosen_index).collect(),
                });
                details.push(SampleDetail { id: sample.id.clone(), transcript: o.transcript, traces });
            }
            Err(e) => {
                tracing::warn!(id = %sample.id, error = %e, "sample excluded");
                excluded.push(Exclusion { id: sample.id.clone(), error: e.to_string() });
            }
        }
    }
    let score_sum: u64 = per_sample.iter().map(|s| s.score.value() as u64).sum();
    let (mean_score, mean_display) = render_mean(score_sum, per_sample.len());
    let report = EvalReport {
        dataset_name: dataset_name.to_string(),
        method: if ses_enabled { "ses".into() } else { "baseline".into() },
        n_samples: test.len(),
        score_sum,
        scored: per_sample.len(),
        mean_score,
        mean_display,
        recall_at_1: None,
        recall: None,
        per_sample,
        excluded,
        ledger: scope.snapshot(),
        seed: ctx.config.rng_seed,
    };
    Ok((report, details))
}

/// Single-turn Recall@1: one recommender reply per seed history, hit when
/// the first extracted item matches a label.
pub fn recall_at_1(ctx: &RunContext, test: &[SeedSample]) -> Result<RecallReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t = ctx.agents.recommender.default_temperature();
    let replies = ctx.exec.map(test.iter().collect(), |s| ctx.recommend(&s.history, t, 0).map(|r| (s, r)));
    let mut per_sample = Vec::with_capacity(test.len());
    for r in replies {
        let (sample, reply) = r?;
        let top_item = extract_items(&reply).into_iter().next();
        let hit = top_item.as_deref().is_some_and(|item| sample.label.iter().any(|l| match_item(item, l)));
        per_sample.push(RecallSample { id: sample.id.clone(), reply, top_item, hit });
    }
    let hits = per_sample.iter().filter(|s| s.hit).count();
    Ok(RecallReport {
        hits,
        n: per_sample.len(),
        recall_at_1: hits as f64 / per_sample.len() as f64,
        extraction_rule: EXTRACTION_RULE.into(),
        per_sample,
    })
}

/// Words that begin a sentence rather than a title.
const STARTERS: &[&str] = &[
    "I", "I'd", "I'm", "I've", "I'll", "You", "You'll", "You'd", "Your", "My", "Try", "Maybe", "Perhaps", "Also",
    "If", "Since", "Here", "Here's", "Sure", "Yes", "No", "Please", "Hello", "Hi", "Thanks", "Based", "Given",
    "Consider", "Check", "Watch", "Recommend", "It", "It's", "This", "That", "These", "Those", "Another", "Both",
    "Absolutely", "Great", "Definitely", "Alternatively", "Additionally", "Then", "Next", "Finally", "So", "Oh",
    "Well", "Okay", "OK", "How", "What", "Why", "Have", "Do", "Did", "Are", "Is", "Would", "Could", "Should",
    "Let", "Let's", "Or", "And", "But", "Because", "As", "For", "In", "On", "Of", "With",
];

const CONNECTORS: &[&str] = &["of", "the", "a", "an", "in", "on", "at", "to", "for", "with", "and", "from", "by", "&"];

fn quoted_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""([^"\n]{1,120})"|“([^”\n]{1,120})”"#).expect("valid regex"))
}

fn year_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"\b([A-Z0-9][\w'’&.\-]*(?:\s+(?:[A-Z0-9][\w'’&.\-]*|of|the|a|an|in|on|at|to|for|with|and|from|by|&))*)\s*\((?:1[89]|20)\d{2}\)",
        )
        .expect("valid regex")
    })
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{L}\p{N}][\p{L}\p{N}'’&\-]*|&|[^\s\p{L}\p{N}]").expect("valid regex"))
}

fn is_capitalized(w: &str) -> bool {
    w.chars().next().is_some_and(|c| c.is_uppercase() || c.is_ascii_digit())
}

/// Strips leading sentence starters from a span. Returns the new start offset
/// within `text` or `None` if nothing remains.
fn strip_starters(text: &str) -> Option<usize> {
    let mut offset = 0;
    loop {
        let rest = &text[offset..];
        let word_end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        let word = &rest[..word_end];
        if STARTERS.contains(&word) && word_end < rest.len() {
            offset += word_end + rest[word_end..].len() - rest[word_end..].trim_start().len();
        } else if STARTERS.contains(&word) {
            return None;
        } else {
            return Some(offset);
        }
    }
}

/// Title-case runs of at least two capitalized words, allowing lowercase
/// connectors between capitalized words.
fn title_runs(text: &str) -> Vec<(usize, usize)> {
    let words: Vec<(usize, usize, &str)> =
        word_re().find_iter(text).map(|m| (m.start(), m.end(), m.as_str())).collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < words.len() {
        if !is_capitalized(words[i].2) {
            i += 1;
            continue;
        }
        let mut j = i;
        let mut last_cap = i;
        while j + 1 < words.len() {
            let next = words[j + 1].2;
            if is_capitalized(next) {
                j += 1;
                last_cap = j;
            } else if CONNECTORS.contains(&next) {
                let mut k = j + 1;
                while words.get(k).is_some_and(|w| CONNECTORS.contains(&w.2)) {
                    k += 1;
                }
                if !words.get(k).is_some_and(|w| is_capitalized(w.2)) {
                    break;
                }
                j = k;
                last_cap = k;
            } else {
                break;
            }
        }
        // starters are removed before counting
        let mut start = i;
        while start <= last_cap && STARTERS.contains(&words[start].2) {
            start += 1;
        }
        while start <= last_cap && !is_capitalized(words[start].2) {
            start += 1;
        }
        let caps = (start..=last_cap).filter(|&k| is_capitalized(words[k].2)).count();
        if start <= last_cap && caps >= 2 {
            spans.push((words[start].0, words[last_cap].1));
        }
        i = last_cap + 1;
    }
    spans
}

/// Candidate item mentions in order of appearance: quoted spans, "Title
/// (Year)" patterns and Title-Case runs of two or more words. Overlapping
/// candidates keep the earliest, longest one; duplicates are dropped
/// case-insensitively.
pub fn extract_items(text: &str) -> Vec<String> {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for c in quoted_re().captures_iter(text) {
        if let Some(m) = c.get(1).or_else(|| c.get(2)) {
            let inner = m.as_str().trim();
            if !inner.is_empty() && inner.split_whitespace().count() <= 12 {
                let lead = m.as_str().len() - m.as_str().trim_start().len();
                spans.push((m.start() + lead, m.start() + lead + inner.len()));
            }
        }
    }
    for c in year_re().captures_iter(text) {
        let m = c.get(1).expect("group 1");
        if let Some(off) = strip_starters(m.as_str()) {
            spans.push((m.start() + off, m.end()));
        }
    }
    spans.extend(title_runs(text));
    spans.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));

    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut out: Vec<String> = Vec::new();
    for (s, e) in spans {
        if taken.iter().any(|&(ts, te)| s < te && ts < e) {
            continue;
        }
        taken.push((s, e));
        let item = text[s..e].trim_matches(|c: char| c.is_whitespace() || ",;:!?".contains(c)).to_string();
        if item.is_empty() {
            continue;
        }
        if !out.iter().any(|o| o.to_lowercase() == item.to_lowercase()) {
            out.push(item);
        }
    }
    out
}

fn year_paren_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(\s*\d{4}\s*\)").expect("valid regex"))
}

/// Comparison key: lowercase, no parenthesized year or punctuation, single
/// spaces, no leading article.
pub fn normalize_item(s: &str) -> String {
    let lower = year_paren_re().replace_all(&s.to_lowercase(), " ").into_owned();
    let cleaned: String = lower.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    let mut words: Vec<&str> = cleaned.split_whitespace().collect();
    if words.len() > 1 && matches!(words[0], "a" | "an" | "the") {
        words.remove(0);
    }
    words.join(" ")
}

pub fn match_item(prediction: &str, label: &str) -> bool {
    let p = normalize_item(prediction);
    !p.is_empty() && p == normalize_item(label)
}

/// One row per report: method, dataset, score and the difference to the
/// first report on the same dataset.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:<16} {:>6} {:>7} {:>9}", "method", "dataset", "score", "delta", "recall@1");
    for r in reports {
        let base = reports.iter().find(|b| b.dataset_name == r.dataset_name).expect("r itself qualifies");
        let delta = if std::ptr::eq(base, r) {
            "-".to_string()
        } else {
            format!("{:+.2}", r.mean_score - base.mean_score)
        };
        let recall = r.recall_at_1.map_or("-".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(out, "{:<12} {:<16} {:>6} {:>7} {:>9}", r.method, r.dataset_name, r.mean_display, delta, recall);
    }
    out
}
