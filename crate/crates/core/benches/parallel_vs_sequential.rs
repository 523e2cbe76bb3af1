use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use simrec_core::backend::{tags, ChatBackend, ConcurrencyProbe, ScriptRule, ScriptedBackend};
use simrec_core::eval::ieval_run;
use simrec_core::parallel::Executor;
use simrec_core::podcs::run_sample;
use simrec_core::prompt::PromptSet;
use simrec_core::ses::ses_select;
use simrec_core::{Agents, Message, RunConfig, RunContext, SeedSample, Transcript};

/// Scripted replies behind a fixed per-call latency standing in for network time.
fn backend(latency: Duration) -> Arc<dyn ChatBackend> {
    let rules = vec![
        ScriptRule::reply("Likes slow-burn thrillers.").for_tag(tags::SUMMARIZER),
        ScriptRule::variants(["Anything newer?", "Something darker?"]).for_tag(tags::INTERNAL_USER),
        ScriptRule::variants(["2", "1", "0"]).for_tag(tags::INTERNAL_VOTE),
        ScriptRule::variants(["2", "1"]).for_tag(tags::VOTE),
        ScriptRule::reply("I've seen it. Another?").for_tag(tags::USER),
        ScriptRule::variants(["Try Heat (1995).", "Try Ronin (1998).", "Try Sicario (2015)."]).for_tag(tags::RECOMMENDER),
    ];
    Arc::new(ConcurrencyProbe::new(Arc::new(ScriptedBackend::new(rules).unwrap()), latency))
}

fn ctx(exec: Executor, cfg: RunConfig) -> RunContext {
    RunContext { config: cfg, prompts: PromptSet::default(), agents: Agents::single(backend(Duration::from_micros(300))), exec }
}

fn samples(n: usize) -> Vec<SeedSample> {
    (0..n)
        .map(|i| {
            let h = Transcript::from_messages(vec![Message::user(format!("Seed {i}: a heist movie please")).unwrap()]).unwrap();
            SeedSample::new(format!("b{i}"), h, vec!["Inside Man".into()]).unwrap()
        })
        .collect()
}

fn executors() -> [(&'static str, Executor); 2] {
    [("sequential", Executor::sequential()), ("parallel-8", Executor::new(8))]
}

fn bench_ses(c: &mut Criterion) {
    let mut group = c.benchmark_group("ses_select");
    group.sample_size(10);
    let h = samples(1).remove(0).history;
    for (name, exec) in executors() {
        let ctx = ctx(exec, RunConfig { ses_inner_widths: vec![2], vote_count: 5, ..RunConfig::default() });
        group.bench_function(BenchmarkId::new(name, "m3-w2-r2"), |b| b.iter(|| ses_select(&ctx, &h, 2).unwrap()));
    }
    group.finish();
}

fn bench_pairs(c: &mut Criterion) {
    let mut group = c.benchmark_group("preference_pairs");
    group.sample_size(10);
    let data = samples(16);
    for (name, exec) in executors() {
        let ctx = ctx(exec, RunConfig { k: 2, vote_count: 5, ..RunConfig::default() });
        group.bench_function(BenchmarkId::new(name, "16x2"), |b| {
            b.iter(|| ctx.exec.map(data.iter().collect(), |s| run_sample(&ctx, s).unwrap().scores))
        });
    }
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let mut group = c.benchmark_group("ieval_batch");
    group.sample_size(10);
    let data = samples(16);
    for (name, exec) in executors() {
        let ctx = ctx(exec, RunConfig { vote_count: 5, ..RunConfig::default() });
        group.bench_function(BenchmarkId::new(name, "16-baseline"), |b| {
            b.iter(|| ieval_run(&ctx, "bench", &data, false).unwrap().score_sum)
        });
    }
    group.finish();
}

criterion_group!(benches, bench_ses, bench_pairs, bench_eval);
criterion_main!(benches);
