use std::io::Cursor;
use std::sync::Arc;

use simrec_cli::chat_repl;
use simrec_core::backend::{tags, ScriptRule, ScriptedBackend};
use simrec_core::prompt::PromptSet;
use simrec_core::{Agents, RunConfig, RunContext};

fn ctx(rules: Vec<ScriptRule>) -> RunContext {
    let backend = Arc::new(ScriptedBackend::new(rules).unwrap());
    let config = RunConfig { vote_count: 1, ses_inner_widths: vec![], ..RunConfig::default() };
    RunContext::new(config, PromptSet::default(), Agents::single(backend))
}

fn search_rules() -> Vec<ScriptRule> {
    vec![
        ScriptRule::reply("Wants a heist film.").for_tag(tags::SUMMARIZER),
        ScriptRule::reply("2").for_tag(tags::INTERNAL_VOTE).containing("Ronin"),
        ScriptRule::reply("0").for_tag(tags::INTERNAL_VOTE),
        ScriptRule::variants(["Heat (1995)", "Ronin (1998)", "Thief (1981)"]).for_tag(tags::RECOMMENDER),
    ]
}

fn session(ctx: &RunContext, ses: bool, input: &str) -> (String, simrec_cli::ChatOutcome) {
    let mut out = Vec::new();
    let outcome = chat_repl(ctx, ses, &mut Cursor::new(input.as_bytes()), &mut out).unwrap();
    (String::from_utf8(out).unwrap(), outcome)
}

#[test]
fn turn_prints_reply_and_status() {
    let (out, outcome) = session(&ctx(search_rules()), false, "hello\n/quit\nnever read\n");
    assert!(out.contains("rec> Heat (1995)"), "{out}");
    assert!(out.contains("[1 candidate(s), 1 call(s)]"), "{out}");
    assert_eq!(outcome.history.len(), 2);
    assert!(!out.contains("never read"));
}

#[test]
fn trace_after_search_shows_tree() {
    let (out, outcome) = session(&ctx(search_rules()), true, "a heist film?\n/trace\n");
    assert!(out.contains("rec> Ronin (1998)"), "{out}");
    assert!(out.contains("[3 candidate(s)"), "{out}");
    assert!(out.contains("profile: Wants a heist film."), "{out}");
    assert!(out.contains("* [1] aggregate=2"), "{out}");
    assert_eq!(outcome.history.len(), 2);
}

#[test]
fn trace_before_search_and_unknown_commands() {
    let (out, _) = session(&ctx(search_rules()), false, "/trace\n/nope\n\n/help\n");
    assert!(out.contains("no search trace"), "{out}");
    assert!(out.contains("unknown command /nope"), "{out}");
}

#[test]
fn backend_failure_is_inline_and_session_continues() {
    let rules = vec![ScriptRule::reply("Sure: Heat (1995)").for_tag(tags::RECOMMENDER).on_last("ok")];
    let (out, outcome) = session(&ctx(rules), false, "fails\nok then\n/quit\n");
    assert!(out.contains("error: "), "{out}");
    assert!(out.contains("rec> Sure: Heat (1995)"), "{out}");
    assert_eq!(outcome.failed_turns, 1);
    assert_eq!(outcome.history.len(), 2);
    assert_eq!(outcome.history.messages()[0].content, "ok then");
}
