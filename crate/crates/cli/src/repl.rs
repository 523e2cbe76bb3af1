//! Interactive chat: the human plays the user, the recommender answers.

use std::io::{self, BufRead, Write};

use serde::Serialize;

use simrec_core::ses::{ses_select, SesTrace};
use simrec_core::{Role, RunContext, Transcript};

const HELP: &str = "commands: /trace (last search tree), /help, /quit";

#[derive(Debug, Clone, Serialize)]
pub struct ChatOutcome {
    pub ses: bool,
    pub history: Transcript,
    pub failed_turns: usize,
}

/// Reads user turns from `input` until `/quit` or end of input. Backend
/// failures are printed and the turn is dropped; the session continues.
pub fn chat_repl<R: BufRead + ?Sized, W: Write + ?Sized>(
    ctx: &RunContext,
    ses: bool,
    input: &mut R,
    out: &mut W,
) -> io::Result<ChatOutcome> {
    let mut history = Transcript::new();
    let mut last_trace: Option<SesTrace> = None;
    let mut failed_turns = 0;
    writeln!(out, "simrec chat ({}). {HELP}", if ses { "search on" } else { "search off" })?;
    let mut line = String::new();
    loop {
        write!(out, "you> ")?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            writeln!(out)?;
            break;
        }
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" | "/exit" => break,
            "/help" => {
                writeln!(out, "{HELP}")?;
                continue;
            }
            "/trace" => {
                match &last_trace {
                    Some(t) => write!(out, "{}", t.summary())?,
                    None => writeln!(out, "no search trace for the last reply")?,
                }
                continue;
            }
            cmd if cmd.starts_with('/') => {
                writeln!(out, "unknown command {cmd}. {HELP}")?;
                continue;
            }
            _ => {}
        }

        let mut next = history.clone();
        if let Err(e) = next.push_turn(Role::User, text) {
            writeln!(out, "error: {e}")?;
            continue;
        }
        let (turn_ctx, scope) = ctx.scoped();
        let result = if ses {
            ses_select(&turn_ctx, &next, ctx.config.ses_start_from_last).map(|(r, t)| (r, Some(t)))
        } else {
            turn_ctx.recommend(&next, turn_ctx.agents.recommender.default_temperature(), 0).map(|r| (r, None))
        };
        match result.and_then(|(reply, trace)| Ok((next.push_turn(Role::Recommender, reply.clone()).map(|_| reply)?, trace))) {
            Ok((reply, trace)) => {
                let candidates = trace.as_ref().map_or(1, |t| t.root_candidates.len());
                writeln!(out, "rec> {reply}")?;
                writeln!(out, "     [{candidates} candidate(s), {} call(s)]", scope.snapshot().total)?;
                history = next;
                last_trace = trace;
            }
            Err(e) => {
                failed_turns += 1;
                writeln!(out, "error: {e} (turn dropped, try again)")?;
            }
        }
    }
    Ok(ChatOutcome { ses, history, failed_turns })
}
