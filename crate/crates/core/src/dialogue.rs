//! Simulated recommender/user dialogues and score elicitation.
//!
//! A simulation over `n` rounds runs recommender → user for rounds
//! `1..n-1`, asks the recommender to explain itself on round `n-1`'s user
//! turn, takes the recommender's explanation as round `n`, and then asks the
//! user side for `vote_count` independent scores on the frozen transcript.
//! The majority score becomes the outcome; the text of one agreeing vote is
//! recorded as the user's last turn.

use serde::{Deserialize, Serialize};

use crate::backend::{tags, ChatRequest, Client};
use crate::context::RunContext;
use crate::error::{Error, Result};
use crate::prompt::{attach_to_recommender_turn, DIGIT_ONLY_SUFFIX, EXPLAIN_REQUEST};
use crate::types::{Role, Score, SeedSample, Transcript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub transcript: Transcript,
    pub user_turns: Vec<String>,
    pub rec_turns: Vec<String>,
    pub score: Score,
    pub raw_votes: Vec<Score>,
}

/// Audit record for one simulated dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptDump {
    pub id: String,
    pub messages: Transcript,
    pub votes: Vec<Score>,
    pub score: Score,
}

impl SimulationOutcome {
    pub fn dump(&self, id: &str) -> TranscriptDump {
        TranscriptDump {
            id: id.to_string(),
            messages: self.transcript.clone(),
            votes: self.raw_votes.clone(),
            score: self.score,
        }
    }
}

/// Extracts the score from a judge reply: the last standalone 0, 1 or 2.
///
/// A digit counts as standalone when it is not glued to letters or other
/// digits and is not part of a decimal. Denominators such as the second `2`
/// in `2/2` or `2 out of 2` are skipped.
pub fn parse_score(text: &str) -> Result<Score> {
    let chars: Vec<char> = text.chars().collect();
    let mut found = None;
    for (i, &c) in chars.iter().enumerate() {
        if !('0'..='2').contains(&c) {
            continue;
        }
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        if prev.is_some_and(|p| p.is_alphanumeric()) || next.is_some_and(|n| n.is_alphanumeric()) {
            continue;
        }
        let digit_at = |j: Option<usize>| j.and_then(|j| chars.get(j)).is_some_and(|c| c.is_ascii_digit());
        if prev == Some('.') && digit_at(i.checked_sub(2)) {
            continue;
        }
        if next == Some('.') && digit_at(Some(i + 2)) {
            continue;
        }
        if is_denominator(&chars[..i]) {
            continue;
        }
        found = Some(c);
    }
    found
        .and_then(|c| Score::new(c as u8 - b'0'))
        .ok_or(Error::NoScoreFound)
}

fn is_denominator(before: &[char]) -> bool {
    let s: String = before.iter().collect();
    let trimmed = s.trim_end();
    trimmed.ends_with('/') || trimmed.to_lowercase().ends_with("out of")
}

/// Most frequent score; ties go to the lower score.
pub fn majority_vote(votes: &[Score]) -> Result<Score> {
    if votes.is_empty() {
        return Err(Error::EmptyVotes);
    }
    let mut counts = [0usize; 3];
    for v in votes {
        counts[v.value() as usize] += 1;
    }
    let best = *counts.iter().max().expect("three buckets");
    let winner = counts.iter().position(|&c| c == best).expect("max exists");
    Ok(Score::new(winner as u8).expect("bucket index in range"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteResult {
    pub score: Score,
    pub votes: Vec<Score>,
    /// Reply text of the first vote agreeing with the majority.
    pub agreeing_text: String,
}

/// Asks `client` for `vote_count` scores on `prompt`, each on its own seed.
///
/// A reply without a digit is re-asked once with an explicit digit-only
/// instruction; a second miss counts as 0. Votes whose call fails are
/// dropped; if every vote fails the first error is returned.
pub(crate) fn collect_votes(ctx: &RunContext, client: &Client, prompt: &Transcript, tag: &str) -> Result<VoteResult> {
    let cfg = &ctx.config;
    let request_for = |messages: Transcript, branch: usize| ChatRequest {
        messages,
        assistant_role: Role::User,
        temperature: cfg.vote_temperature,
        max_tokens: cfg.short_max_tokens,
        seed: Some(ctx.seed(branch)),
        tag: tag.to_string(),
    };
    let outcomes = ctx.exec.map((0..cfg.vote_count).collect(), |v| -> Result<(Score, String)> {
        let text = client
            .complete(&request_for(prompt.clone(), v))
            .map_err(|e| Error::backend(format!("vote {v}"), e))?;
        if let Ok(s) = parse_score(&text) {
            return Ok((s, text));
        }
        let mut retry_prompt = prompt.clone();
        attach_to_recommender_turn(&mut retry_prompt, DIGIT_ONLY_SUFFIX)?;
        let retry = client
            .complete(&request_for(retry_prompt, v))
            .map_err(|e| Error::backend(format!("vote {v} re-elicitation"), e))?;
        match parse_score(&retry) {
            Ok(s) => Ok((s, retry)),
            Err(_) => {
                tracing::warn!(vote = v, "no score digit after re-elicitation; recording 0");
                Ok((Score::ZERO, retry))
            }
        }
    });
    let mut votes = Vec::with_capacity(outcomes.len());
    let mut texts = Vec::with_capacity(outcomes.len());
    let mut first_err = None;
    for o in outcomes {
        match o {
            Ok((s, t)) => {
                votes.push(s);
                texts.push(t);
            }
            Err(e) => {
                tracing::warn!(error = %e, "vote failed");
                first_err.get_or_insert(e);
            }
        }
    }
    if votes.is_empty() {
        return Err(first_err.unwrap_or(Error::EmptyVotes));
    }
    let score = majority_vote(&votes)?;
    let idx = votes.iter().position(|&v| v == score).expect("majority is present");
    Ok(VoteResult { score, agreeing_text: texts.swap_remove(idx), votes })
}

/// Runs the external label-aware dialogue for `seed`.
///
/// `recommender_turn(history, round)` produces the recommender's reply for
/// each 1-based round; the plain simulator uses a single completion, the
/// evaluation harness can substitute search.
pub fn simulate_with<F>(ctx: &RunContext, seed: &SeedSample, mut recommender_turn: F) -> Result<SimulationOutcome>
where
    F: FnMut(&Transcript, usize) -> Result<String>,
{
    let n = ctx.config.total_rounds;
    let mut history = seed.history.clone();
    let mut user_turns = Vec::with_capacity(n);
    let mut rec_turns = Vec::with_capacity(n);
    let mut score = None;
    let mut raw_votes = Vec::new();
    for round in 1..=n {
        let reply = recommender_turn(&history, round).map_err(|e| with_context(e, round, "recommender"))?;
        history.push_turn(Role::Recommender, reply.clone())?;
        rec_turns.push(reply);

        let prompt = ctx.prompts.render_external_user(&history, &seed.label, round, n)?;
        if round < n {
            let request = ChatRequest {
                messages: prompt,
                assistant_role: Role::User,
                temperature: ctx.agents.user.default_temperature(),
                max_tokens: ctx.config.dialogue_max_tokens,
                seed: Some(ctx.seed(0)),
                tag: tags::USER.into(),
            };
            let mut text = ctx
                .agents
                .user
                .complete(&request)
                .map_err(|e| Error::backend(format!("round {round} user simulator"), e))?;
            if round + 1 == n {
                text = format!("{}\n{}", text.trim_end(), EXPLAIN_REQUEST);
            }
            history.push_turn(Role::User, text.clone())?;
            user_turns.push(text);
        } else {
            let result = collect_votes(ctx, &ctx.agents.user, &prompt, tags::VOTE)
                .map_err(|e| with_context(e, round, "scoring"))?;
            history.push_turn(Role::User, result.agreeing_text.clone())?;
            user_turns.push(result.agreeing_text);
            score = Some(result.score);
            raw_votes = result.votes;
        }
    }
    Ok(SimulationOutcome {
        transcript: history,
        user_turns,
        rec_turns,
        score: score.expect("total_rounds ≥ 2 guarantees a scoring round"),
        raw_votes,
    })
}

/// Plain simulation: the recommender's first reply uses
/// `rec_first_temperature` and sibling seed `first_branch`; later replies use
/// the recommender backend's default temperature.
pub fn run_simulation(
    ctx: &RunContext,
    seed: &SeedSample,
    rec_first_temperature: f64,
    first_branch: usize,
) -> Result<SimulationOutcome> {
    let default_t = ctx.agents.recommender.default_temperature();
    simulate_with(ctx, seed, |history, round| {
        if round == 1 {
            ctx.recommend(history, rec_first_temperature, first_branch)
        } else {
            ctx.recommend(history, default_t, 0)
        }
    })
}

fn with_context(e: Error, round: usize, role: &str) -> Error {
    match e {
        Error::Backend { context, source } => Error::backend(format!("round {round} {role}: {context}"), source),
        other => other,
    }
}
