//! Inference-time reply selection against an internal user simulator.
//!
//! Given the external history `h_e` (ending with the user), the search:
//!
//! 1. summarizes `h_e` into a [`UserProfile`] at temperature 0;
//! 2. samples `ses_first_width` root candidates at the sampling temperature;
//! 3. for each extra tree level, lets the internal user answer the node's
//!    candidate and re-samples `ses_inner_widths[level]` recommender replies;
//! 4. finishes every leaf with [`internal_rollout`], which plays the
//!    remaining rounds against the internal user and majority-votes a score;
//! 5. returns the root whose leaves have the highest score sum (ties go to the
//!    lowest index).
//!
//! The internal horizon equals the external rounds still to play, so a node
//! at depth `d` rolls out `remaining - d` rounds. Tree levels beyond
//! `remaining - 1` cannot be played and are dropped.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{tags, ChatRequest, LedgerSnapshot};
use crate::error::BackendError;
use crate::context::RunContext;
use crate::dialogue::collect_votes;
use crate::error::{Error, Result};
use crate::prompt::EXPLAIN_REQUEST;
use crate::types::{Message, Role, Score, Transcript, UserProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SesNode {
    pub depth: usize,
    /// Recommender reply at this branch point.
    pub candidate: String,
    pub children: Vec<SesNode>,
    /// Majority score of the rollout; present exactly on successful leaves.
    pub rollout_score: Option<Score>,
    pub votes: Vec<Score>,
    /// Sum of `rollout_score` over the successful leaves below (or at) this node.
    pub aggregate: u32,
    /// Internal-dialogue turns generated under this node: the internal
    /// user's reply for inner nodes, the whole rollout for leaves.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dialogue: Vec<Message>,
    /// Set when this node (or its rollout) failed; excluded from aggregates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SesNode {
    fn failed(depth: usize, candidate: String, error: &Error) -> Self {
        Self {
            depth,
            candidate,
            children: Vec::new(),
            rollout_score: None,
            votes: Vec::new(),
            aggregate: 0,
            dialogue: Vec::new(),
            error: Some(error.to_string()),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Successful leaves in this subtree.
    pub fn scored_leaves(&self) -> usize {
        if self.is_leaf() {
            usize::from(self.rollout_score.is_some())
        } else {
            self.children.iter().map(SesNode::scored_leaves).sum()
        }
    }

    /// Leaf score sum recomputed from scratch.
    pub fn recompute_aggregate(&self) -> u32 {
        if self.is_leaf() {
            self.rollout_score.map_or(0, |s| s.value() as u32)
        } else {
            self.children.iter().map(SesNode::recompute_aggregate).sum()
        }
    }

    /// Checks the structural invariants on every node below.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.is_leaf() && self.error.is_none() && self.rollout_score.is_none() {
            return Err(format!("leaf at depth {} has no score", self.depth));
        }
        if !self.is_leaf() && self.rollout_score.is_some() {
            return Err(format!("inner node at depth {} carries a rollout score", self.depth));
        }
        if self.aggregate != self.recompute_aggregate() {
            return Err(format!("aggregate mismatch at depth {}", self.depth));
        }
        for c in &self.children {
            if c.depth != self.depth + 1 {
                return Err("child depth is not parent + 1".into());
            }
            c.check_invariants()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SesTrace {
    pub profile: UserProfile,
    pub root_candidates: Vec<SesNode>,
    pub chosen_index: usize,
    pub remaining_rounds: usize,
    /// Tree levels actually expanded below the roots.
    pub levels: usize,
    /// Calls made by this invocation.
    pub ledger: LedgerSnapshot,
}

impl SesTrace {
    pub fn chosen(&self) -> &SesNode {
        &self.root_candidates[self.chosen_index]
    }

    /// Short human-readable tree summary.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "profile: {}\n{} candidates, {} level(s), {} calls\n",
            self.profile.text.replace('\n', " | "),
            self.root_candidates.len(),
            self.levels,
            self.ledger.total
        );
        for (i, root) in self.root_candidates.iter().enumerate() {
            let marker = if i == self.chosen_index { "*" } else { " " };
            out.push_str(&format!(
                "{marker} [{i}] aggregate={} leaves={}{} {}\n",
                root.aggregate,
                root.scored_leaves(),
                root.error.as_deref().map(|e| format!(" error={e}")).unwrap_or_default(),
                one_line(&root.candidate, 80)
            ));
            let mut stack: Vec<&SesNode> = root.children.iter().rev().collect();
            while let Some(node) = stack.pop() {
                let indent = "    ".repeat(node.depth);
                let votes: Vec<String> = node.votes.iter().map(|v| v.to_string()).collect();
                out.push_str(&format!(
                    "{indent}- aggregate={} votes=[{}] {}\n",
                    node.aggregate,
                    votes.join(","),
                    one_line(&node.candidate, 60)
                ));
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }
}

fn one_line(s: &str, max: usize) -> String {
    let flat = s.replace('\n', " ");
    match flat.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &flat[..i]),
        None => flat,
    }
}

/// Summarizes the external history into a profile with one temperature-0
/// call. An empty summary is asked for once more before giving up.
pub fn summarize_profile(ctx: &RunContext, h_external: &Transcript) -> Result<UserProfile> {
    let messages = ctx.prompts.render_summarizer(h_external)?;
    let request = ChatRequest {
        messages,
        assistant_role: Role::Recommender,
        temperature: 0.0,
        max_tokens: ctx.config.short_max_tokens,
        seed: Some(ctx.seed(0)),
        tag: tags::SUMMARIZER.into(),
    };
    let mut last_err = None;
    for _ in 0..2 {
        match ctx.agents.internal.complete(&request) {
            Ok(text) => {
                return Ok(UserProfile { text: text.trim().to_string(), source_turns: h_external.dialogue().len() })
            }
            Err(BackendError::MalformedResponse(msg)) => last_err = Some(msg),
            Err(e) => return Err(Error::backend("summarizer", e)),
        }
    }
    match last_err.as_deref() {
        Some("empty completion") => Err(Error::EmptyProfile),
        _ => Err(Error::backend(
            "summarizer",
            BackendError::MalformedResponse(last_err.unwrap_or_default()),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub score: Score,
    pub votes: Vec<Score>,
    /// Internal turns appended after the prefix (`h^i`).
    pub dialogue: Vec<Message>,
}

fn internal_user_turn(
    ctx: &RunContext,
    history: &Transcript,
    profile: &UserProfile,
    round: usize,
    total: usize,
) -> Result<String> {
    let messages = ctx.prompts.render_internal_user(history, profile, round, total)?;
    let request = ChatRequest {
        messages,
        assistant_role: Role::User,
        temperature: ctx.agents.internal.default_temperature(),
        max_tokens: ctx.config.dialogue_max_tokens,
        seed: Some(ctx.seed(0)),
        tag: tags::INTERNAL_USER.into(),
    };
    let mut text = ctx
        .agents
        .internal
        .complete(&request)
        .map_err(|e| Error::backend(format!("internal user round {round}/{total}"), e))?;
    if round + 1 == total {
        text = format!("{}\n{}", text.trim_end(), EXPLAIN_REQUEST);
    }
    Ok(text)
}

/// Plays `remaining_rounds` internal rounds after the candidate that ends
/// `prefix`: the internal user and recommender alternate until the last
/// round, where the internal user scores instead of replying.
pub fn internal_rollout(
    ctx: &RunContext,
    prefix: &Transcript,
    profile: &UserProfile,
    remaining_rounds: usize,
) -> Result<Rollout> {
    if prefix.last_role() != Some(Role::Recommender) {
        return Err(Error::Prompt(crate::error::PromptError::WrongTrailingRole(
            prefix.last_role().map(|r| r.to_string()).unwrap_or_else(|| "nothing".into()),
        )));
    }
    if remaining_rounds == 0 {
        return Err(Error::Config(crate::error::ConfigError::Invalid("remaining_rounds must be ≥ 1".into())));
    }
    let mut history = prefix.clone();
    let start = history.len();
    for round in 1..remaining_rounds {
        let user = internal_user_turn(ctx, &history, profile, round, remaining_rounds)?;
        history.push_turn(Role::User, user)?;
        let reply = ctx
            .recommend(&history, ctx.agents.recommender.default_temperature(), 0)
            .map_err(|e| deepen(e, round))?;
        history.push_turn(Role::Recommender, reply)?;
    }
    let prompt = ctx.prompts.render_internal_user(&history, profile, remaining_rounds, remaining_rounds)?;
    let votes = collect_votes(ctx, &ctx.agents.internal, &prompt, tags::INTERNAL_VOTE)?;
    Ok(Rollout { score: votes.score, votes: votes.votes, dialogue: history.messages()[start..].to_vec() })
}

fn deepen(e: Error, round: usize) -> Error {
    match e {
        Error::Backend { context, source } => Error::backend(format!("internal round {round}: {context}"), source),
        other => other,
    }
}

/// Effective number of branching levels below the roots.
pub fn effective_levels(inner_widths: &[usize], remaining_rounds: usize) -> usize {
    inner_widths.len().min(remaining_rounds.saturating_sub(1))
}

/// Closed-form number of backend calls one [`ses_select`] makes when every
/// call succeeds and every vote parses.
pub fn expected_call_count(m: usize, inner_widths: &[usize], remaining_rounds: usize, vote_count: usize) -> u64 {
    let levels = effective_levels(inner_widths, remaining_rounds);
    fn node_cost(depth: usize, levels: usize, widths: &[usize], remaining: usize, votes: usize) -> u64 {
        if depth == levels {
            // user + recommender per non-final round, then the votes
            2 * (remaining - depth - 1) as u64 + votes as u64
        } else {
            1 + widths[depth] as u64 * (1 + node_cost(depth + 1, levels, widths, remaining, votes))
        }
    }
    1 + m as u64 * (1 + node_cost(0, levels, inner_widths, remaining_rounds, vote_count))
}

struct Search<'a> {
    ctx: &'a RunContext,
    profile: &'a UserProfile,
    remaining: usize,
    levels: usize,
}

impl Search<'_> {
    /// Expands the node whose candidate ends `history`.
    fn expand(&self, history: Transcript, candidate: String, depth: usize) -> SesNode {
        if depth == self.levels {
            return match internal_rollout(self.ctx, &history, self.profile, self.remaining - depth) {
                Ok(r) => SesNode {
                    depth,
                    candidate,
                    children: Vec::new(),
                    rollout_score: Some(r.score),
                    votes: r.votes,
                    aggregate: r.score.value() as u32,
                    dialogue: r.dialogue,
                    error: None,
                },
                Err(e) => {
                    tracing::warn!(depth, error = %e, "leaf rollout failed; excluded");
                    SesNode::failed(depth, candidate, &e)
                }
            };
        }
        let round = depth + 1;
        let user = match internal_user_turn(self.ctx, &history, self.profile, round, self.remaining) {
            Ok(u) => u,
            Err(e) => return SesNode::failed(depth, candidate, &e),
        };
        let mut after_user = history;
        if let Err(e) = after_user.push_turn(Role::User, user.clone()) {
            return SesNode::failed(depth, candidate, &e.into());
        }
        let width = self.ctx.config.ses_inner_widths[depth];
        let t = self.ctx.config.first_sample_temperature;
        let children = self.ctx.exec.map((0..width).collect(), |b| {
            match self.ctx.recommend(&after_user, t, b) {
                Ok(reply) => {
                    let mut h = after_user.clone();
                    match h.push_turn(Role::Recommender, reply.clone()) {
                        Ok(()) => self.expand(h, reply, depth + 1),
                        Err(e) => SesNode::failed(depth + 1, reply, &e.into()),
                    }
                }
                Err(e) => SesNode::failed(depth + 1, String::new(), &e),
            }
        });
        let aggregate = children.iter().map(|c| c.aggregate).sum();
        SesNode {
            depth,
            candidate,
            children,
            rollout_score: None,
            votes: Vec::new(),
            aggregate,
            dialogue: vec![Message { role: Role::User, content: user }],
            error: None,
        }
    }
}

/// Picks the best of `ses_first_width` sampled replies to `h_external`.
pub fn ses_select(ctx: &RunContext, h_external: &Transcript, remaining_rounds: usize) -> Result<(String, SesTrace)> {
    match h_external.last_role() {
        Some(Role::User) => {}
        other => {
            return Err(Error::Prompt(crate::error::PromptError::WrongTrailingRole(
                other.map(|r| r.to_string()).unwrap_or_else(|| "nothing".into()),
            )))
        }
    }
    if remaining_rounds == 0 {
        return Err(Error::Config(crate::error::ConfigError::Invalid("remaining_rounds must be ≥ 1".into())));
    }
    let (ctx, scope): (RunContext, Arc<_>) = ctx.scoped();
    let profile = summarize_profile(&ctx, h_external)?;
    let search = Search {
        ctx: &ctx,
        profile: &profile,
        remaining: remaining_rounds,
        levels: effective_levels(&ctx.config.ses_inner_widths, remaining_rounds),
    };
    let t = ctx.config.first_sample_temperature;
    let roots = ctx.exec.map((0..ctx.config.ses_first_width).collect(), |i| {
        match ctx.recommend(h_external, t, i) {
            Ok(reply) => {
                let mut h = h_external.clone();
                match h.push_turn(Role::Recommender, reply.clone()) {
                    Ok(()) => search.expand(h, reply, 0),
                    Err(e) => SesNode::failed(0, reply, &e.into()),
                }
            }
            Err(e) => SesNode::failed(0, String::new(), &e),
        }
    });
    let chosen_index = select_root(&roots).ok_or_else(|| {
        let reasons: Vec<String> = roots
            .iter()
            .enumerate()
            .map(|(i, r)| format!("[{i}] {}", r.error.as_deref().unwrap_or("no scored leaves")))
            .collect();
        Error::AllCandidatesFailed(reasons.join("; "))
    })?;
    let chosen = roots[chosen_index].candidate.clone();
    let levels = search.levels;
    let trace = SesTrace {
        profile,
        root_candidates: roots,
        chosen_index,
        remaining_rounds,
        levels,
        ledger: scope.snapshot(),
    };
    Ok((chosen, trace))
}

/// Index of the eligible root with the largest aggregate, lowest index on
/// ties. A root is eligible when it has at least one scored leaf.
pub fn select_root(roots: &[SesNode]) -> Option<usize> {
    roots
        .iter()
        .enumerate()
        .filter(|(_, r)| r.error.is_none() && r.scored_leaves() > 0)
        .fold(None, |best: Option<(usize, u32)>, (i, r)| match best {
            Some((_, agg)) if agg >= r.aggregate => best,
            _ => Some((i, r.aggregate)),
        })
        .map(|(i, _)| i)
}
