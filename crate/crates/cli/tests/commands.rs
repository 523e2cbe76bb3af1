use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

use simrec_core::backend::{tags, ScriptRule, ScriptedBackend};
use simrec_core::manifest::RunManifest;

fn rules() -> Vec<ScriptRule> {
    vec![
        ScriptRule::reply("Likes tense heist films.").for_tag(tags::SUMMARIZER),
        ScriptRule::variants(["Anything newer?", "Something darker?"]).for_tag(tags::INTERNAL_USER),
        ScriptRule::reply("0").for_tag(tags::INTERNAL_VOTE).containing("Ronin"),
        ScriptRule::reply("2").for_tag(tags::INTERNAL_VOTE),
        ScriptRule::reply("0").for_tag(tags::VOTE).containing("Ronin"),
        ScriptRule::reply("2").for_tag(tags::VOTE),
        ScriptRule::reply("Seen it. What else?").for_tag(tags::USER),
        ScriptRule::variants(["Try Heat (1995).", "Try Ronin (1998)."]).for_tag(tags::RECOMMENDER),
    ]
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("script.jsonl"), ScriptedBackend::to_jsonl(&rules())).unwrap();
        let mut data = String::new();
        for i in 0..6 {
            data.push_str(&format!(
                "{{\"id\":\"s{i}\",\"messages\":[{{\"role\":\"user\",\"content\":\"Seed {i}: a heist movie please\"}}],\"label\":[\"Inside Man\"]}}\n"
            ));
        }
        fs::write(dir.path().join("seeds.jsonl"), data).unwrap();
        fs::write(dir.path().join("run.toml"), "vote_count = 3\nconcurrency_limit = 4\n").unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn backend(&self) -> String {
        format!("scripted:{}", self.path("script.jsonl").display())
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_with_stdin(args, "")
    }

    fn run_with_stdin(&self, args: &[&str], stdin: &str) -> Output {
        use std::io::Write;
        let mut child = Command::new(env!("CARGO_BIN_EXE_simrec"))
            .args(args)
            .current_dir(self.dir.path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
        child.wait_with_output().unwrap()
    }
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn in_process(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = simrec_cli::run(std::iter::once("simrec").chain(args.iter().copied()), &mut Cursor::new(""), &mut out, &mut err);
    (code, text(&out), text(&err))
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn zero_samples_is_a_usage_error() {
    let (code, _, err) = in_process(&["evaluate", "--metric", "ieval", "--samples", "0", "--data", "x.jsonl"]);
    assert_eq!(code, 2);
    assert!(err.contains("--samples"), "{err}");
}

#[test]
fn unknown_flags_and_commands_are_usage_errors() {
    assert_eq!(in_process(&["evaluate", "--bogus"]).0, 2);
    assert_eq!(in_process(&["frobnicate"]).0, 2);
    assert_eq!(in_process(&["evaluate", "--data", "x", "--metric", "bleu"]).0, 2);
    assert_eq!(in_process(&["chat", "--backend-rec", "carrier-pigeon:x"]).0, 2);
}

#[test]
fn help_exits_zero() {
    let (code, out, _) = in_process(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["import", "simulate", "build-prefs", "evaluate", "chat", "serve", "convert"] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn invalid_config_is_categorized() {
    let f = Fixture::new();
    let backend = f.backend();
    let data = f.path("seeds.jsonl");
    let data = data.to_str().unwrap();
    let out = f.path("o");
    let out = out.to_str().unwrap();
    let (code, _, err) = in_process(&["build-prefs", "--data", data, "--backend-rec", &backend, "--out", out, "--set", "k=0"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.starts_with("error[config]"), "{err}");
    let (code, _, err) = in_process(&["build-prefs", "--data", data, "--backend-rec", &backend, "--out", out, "--set", "no_such_key=1"]);
    assert_eq!(code, 3, "{err}");
    let (code, _, _) = in_process(&["build-prefs", "--data", data, "--backend-rec", &backend, "--out", out, "--set", "novalue"]);
    assert_eq!(code, 3);
    let (code, _, err) = in_process(&["build-prefs", "--data", "missing.jsonl", "--backend-rec", &backend, "--out", out]);
    assert_eq!(code, 4, "{err}");
    let (code, _, err) = in_process(&["build-prefs", "--data", data, "--out", out]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn build_prefs_writes_pairs_report_and_manifest() {
    let f = Fixture::new();
    let o = f.run(&[
        "build-prefs",
        "--config",
        "run.toml",
        "--set",
        "k=2",
        "--data",
        "seeds.jsonl",
        "--backend-rec",
        &f.backend(),
        "--out",
        "runs/p1",
        "--trace",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let dir = f.path("runs/p1");
    let pairs = fs::read_to_string(dir.join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 6);
    let first: Value = serde_json::from_str(pairs.lines().next().unwrap()).unwrap();
    assert_eq!(first["chosen"], "Try Heat (1995).");
    assert_eq!(first["rejected"], "Try Ronin (1998).");
    assert_eq!(first["source"], "SampledVsSampled");

    let report = json(&dir.join("report.json"));
    assert_eq!(report["total"], 6);
    assert_eq!(report["emitted"], 6);
    assert!(dir.join("transcripts.jsonl").exists());

    let manifest = RunManifest::load(&dir.join("run-manifest.json")).unwrap();
    assert_eq!(manifest.command, "build-prefs");
    assert_eq!(manifest.overrides, vec!["k=2".to_string()]);
    assert_eq!(manifest.config.k, 2);
    assert_eq!(manifest.config.vote_count, 3);
    assert!(manifest.backends["recommender"].starts_with("scripted"));
    assert!(manifest.ledger.total > 0);
    let names: Vec<&str> = manifest.outputs.iter().map(|d| d.path.as_str()).collect();
    assert!(names.contains(&"pairs.jsonl") && names.contains(&"report.json"), "{names:?}");
    assert_eq!(manifest.inputs.len(), 1);
}

#[test]
fn each_override_touches_one_field() {
    let f = Fixture::new();
    let base = f.run(&["build-prefs", "--data", "seeds.jsonl", "--backend-rec", &f.backend(), "--out", "a"]);
    assert!(base.status.success(), "{}", text(&base.stderr));
    let changed = f.run(&[
        "build-prefs", "--data", "seeds.jsonl", "--backend-rec", &f.backend(), "--out", "b", "--set", "vote_count=5",
    ]);
    assert!(changed.status.success());
    let a = serde_json::to_value(RunManifest::load(&f.path("a/run-manifest.json")).unwrap().config).unwrap();
    let b = serde_json::to_value(RunManifest::load(&f.path("b/run-manifest.json")).unwrap().config).unwrap();
    let differing: Vec<&String> =
        a.as_object().unwrap().keys().filter(|k| a[k.as_str()] != b[k.as_str()]).collect();
    assert_eq!(differing, vec!["vote_count"]);
}

#[test]
fn identical_invocations_give_identical_outputs() {
    let f = Fixture::new();
    let backend = f.backend();
    let common = ["--config", "run.toml", "--data", "seeds.jsonl", "--backend-rec", backend.as_str(), "--seed", "7"];
    for out in ["r1", "r2"] {
        let mut args = vec!["build-prefs", "--out", out];
        args.extend(common);
        assert!(f.run(&args).status.success());
        let mut args = vec!["evaluate", "--ses", "--set", "total_rounds=3", "--samples", "4", "--trace", "--out"];
        let eval_out = format!("{out}-eval");
        args.push(&eval_out);
        args.extend(common);
        let o = f.run(&args);
        assert!(o.status.success(), "{}", text(&o.stderr));
    }
    for file in ["pairs.jsonl", "report.json", "pairs.jsonl.checkpoint"] {
        assert_eq!(fs::read(f.path("r1").join(file)).unwrap(), fs::read(f.path("r2").join(file)).unwrap(), "{file}");
    }
    for file in ["report.json", "traces.jsonl"] {
        assert_eq!(
            fs::read(f.path("r1-eval").join(file)).unwrap(),
            fs::read(f.path("r2-eval").join(file)).unwrap(),
            "{file}"
        );
    }
    let m1 = RunManifest::load(&f.path("r1/run-manifest.json")).unwrap();
    let m2 = RunManifest::load(&f.path("r2/run-manifest.json")).unwrap();
    assert_eq!(m1.outputs, m2.outputs);
    assert_eq!(m1.seed, 7);
}

#[test]
fn evaluate_with_search() {
    let f = Fixture::new();
    let o = f.run(&[
        "evaluate", "--metric", "ieval", "--ses", "--set", "total_rounds=3", "--samples", "4", "--data", "seeds.jsonl",
        "--backend-rec", &f.backend(), "--set", "vote_count=3", "--out", "ev",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let report = json(&f.path("ev/report.json"));
    assert_eq!(report["method"], "ses");
    assert_eq!(report["n_samples"], 4);
    assert_eq!(report["dataset_name"], "seeds");
    let per = report["per_sample"].as_array().unwrap();
    assert_eq!(per.len(), 4);
    assert!(per.iter().all(|s| s["ses_used"] == true && s["rounds"] == 3));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("ses"), "{stdout}");

    let o = f.run(&["evaluate", "--samples", "7", "--data", "seeds.jsonl", "--backend-rec", &f.backend(), "--out", "ev2"]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o.stderr));
}

#[test]
fn recall_metric() {
    let f = Fixture::new();
    let o = f.run(&["evaluate", "--metric", "recall", "--data", "seeds.jsonl", "--backend-rec", &f.backend(), "--out", "rc"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let report = json(&f.path("rc/recall.json"));
    assert_eq!(report["n"], 6);
    assert_eq!(report["hits"], 0);
    let o = f.run(&["evaluate", "--metric", "recall", "--ses", "--data", "seeds.jsonl", "--backend-rec", &f.backend()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_dumps_transcripts() {
    let f = Fixture::new();
    let o = f.run(&["simulate", "--data", "seeds.jsonl", "--backend-rec", &f.backend(), "--out", "sim", "--set", "vote_count=1"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let dumps = fs::read_to_string(f.path("sim/transcripts.jsonl")).unwrap();
    assert_eq!(dumps.lines().count(), 6);
    let report = json(&f.path("sim/report.json"));
    assert_eq!(report["simulated"], 6);
    assert!(f.path("sim/run-manifest.json").exists());
}

#[test]
fn import_then_convert() {
    let f = Fixture::new();
    fs::write(
        f.path("raw.jsonl"),
        concat!(
            r#"{"id":"d1","turns":[{"speaker":"user","text":"any sci-fi?"},{"speaker":"assistant","text":"Try Alien (1979)."}],"label":["Alien"]}"#,
            "\n",
            "not json\n",
        ),
    )
    .unwrap();
    let o = f.run(&["import", "--format", "turns", "--input", "raw.jsonl", "--name", "kg", "--split", "test", "--out", "data"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("imported 1 samples"), "{}", text(&o.stdout));
    assert!(f.path("data/kg-test.jsonl").exists());
    assert!(f.path("data/kg-test.jsonl.manifest.json").exists());
    assert!(f.path("data/run-manifest.json").exists());

    let o = f.run(&["build-prefs", "--data", "seeds.jsonl", "--backend-rec", &f.backend(), "--out", "p"]);
    assert!(o.status.success());
    let o = f.run(&["convert", "--input", "p/pairs.jsonl", "--output", "flat/flat.jsonl", "--out", "flat"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let flat = fs::read_to_string(f.path("flat/flat.jsonl")).unwrap();
    let first: Value = serde_json::from_str(flat.lines().next().unwrap()).unwrap();
    assert!(first["prompt"].as_str().unwrap().starts_with("User: Seed 0"));
    let manifest = RunManifest::load(&f.path("flat/run-manifest.json")).unwrap();
    assert_eq!(manifest.backends["recommender"], "unbound");
}

#[test]
fn chat_binary_quits_cleanly() {
    let f = Fixture::new();
    let o = f.run_with_stdin(&["chat", "--ses", "--backend-rec", &f.backend(), "--out", "c"], "a heist film?\n/trace\n/quit\n");
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("rec> "), "{stdout}");
    assert!(stdout.contains("aggregate="), "{stdout}");
    let chat = json(&f.path("c/chat.json"));
    assert_eq!(chat["history"].as_array().unwrap().len(), 2);
    assert!(f.path("c/run-manifest.json").exists());
}
