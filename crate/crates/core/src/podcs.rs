//! Preference-pair construction from repeated simulated dialogues.
//!
//! Each seed sample is simulated `k` times with the recommender's first
//! reply sampled at `first_sample_temperature`. Walking the simulations in
//! order, the first reply of every simulation scored 2 overwrites the
//! preferred slot and the first reply of every simulation scored below 2
//! overwrites the dispreferred slot; both slots start as the label text.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::LedgerSnapshot;
use crate::config::{AllTwoSelection, MixedCase};
use crate::context::RunContext;
use crate::dialogue::{run_simulation, SimulationOutcome, TranscriptDump};
use crate::error::{Error, Result};
use crate::jsonl::{self, Appender};
use crate::prompt::format_dialogue;
use crate::rng::seeded_rng;
use crate::types::{PairProvenance, PairSource, PreferencePair, Score, SeedSample, Transcript};

/// Score pattern of one sample's `k` simulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Case {
    AllTwo,
    AllBelowTwo,
    Mixed,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::AllTwo, Case::AllBelowTwo, Case::Mixed];

    pub fn classify(scores: &[Score]) -> Case {
        let twos = scores.iter().filter(|&&s| s == Score::TWO).count();
        if twos == scores.len() {
            Case::AllTwo
        } else if twos == 0 {
            Case::AllBelowTwo
        } else {
            Case::Mixed
        }
    }

    pub fn source(self) -> PairSource {
        match self {
            Case::AllTwo => PairSource::SampledVsLabel,
            Case::AllBelowTwo => PairSource::LabelVsSampled,
            Case::Mixed => PairSource::SampledVsSampled,
        }
    }

    pub fn from_source(source: PairSource) -> Case {
        match source {
            PairSource::SampledVsLabel => Case::AllTwo,
            PairSource::LabelVsSampled => Case::AllBelowTwo,
            PairSource::SampledVsSampled => Case::Mixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairDecision {
    Pair { chosen: String, rejected: String, case: Case },
    /// Chosen and rejected came out equal.
    Identical { case: Case },
    /// Mixed scores under `mixed_case = equation`, which leaves them undefined.
    Undefined,
}

/// Applies the selection rule to the first replies and their scores.
/// `id` keys the draw used by `all_two_selection = seeded_random`.
pub fn decide_pair(
    label: &str,
    first_replies: &[String],
    scores: &[Score],
    selection: AllTwoSelection,
    mixed: MixedCase,
    rng_seed: u64,
    id: &str,
) -> PairDecision {
    assert_eq!(first_replies.len(), scores.len(), "one score per simulation");
    let case = Case::classify(scores);
    if case == Case::Mixed && mixed == MixedCase::Equation {
        return PairDecision::Undefined;
    }
    let mut r_w = label.to_string();
    let mut r_l = label.to_string();
    for (reply, &s) in first_replies.iter().zip(scores) {
        if s == Score::TWO {
            r_w = reply.clone();
        } else {
            r_l = reply.clone();
        }
    }
    if case == Case::AllTwo && selection == AllTwoSelection::SeededRandom {
        let i = seeded_rng(rng_seed, &format!("all-two/{id}")).random_range(0..first_replies.len());
        r_w = first_replies[i].clone();
    }
    if r_w == r_l {
        PairDecision::Identical { case }
    } else {
        PairDecision::Pair { chosen: r_w, rejected: r_l, case }
    }
}

/// Everything one sample produced.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub simulations: Vec<SimulationOutcome>,
    pub scores: Vec<Score>,
    pub decision: PairDecision,
    pub pair: Option<PreferencePair>,
    /// Simulations that failed and were left out.
    pub failed_simulations: usize,
}

/// Runs the `k` simulations for `sample` and applies the selection rule.
/// Failed simulations are dropped; it is an error only if all of them fail.
pub fn run_sample(ctx: &RunContext, sample: &SeedSample) -> Result<SampleRun> {
    sample.validate()?;
    let k = ctx.config.k;
    let t = ctx.config.first_sample_temperature;
    let results = ctx.exec.map((0..k).collect(), |j| run_simulation(ctx, sample, t, j));
    let mut simulations = Vec::with_capacity(k);
    let mut first_err = None;
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => simulations.push(o),
            Err(e) => {
                tracing::warn!(id = %sample.id, simulation = j, error = %e, "simulation failed");
                first_err.get_or_insert(e);
            }
        }
    }
    if simulations.is_empty() {
        let msg = first_err.map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::AllSimulationsFailed(k, msg));
    }
    let failed_simulations = k - simulations.len();
    let firsts: Vec<String> = simulations.iter().map(|s| s.rec_turns[0].clone()).collect();
    let scores: Vec<Score> = simulations.iter().map(|s| s.score).collect();
    let decision = decide_pair(
        &sample.label_text(),
        &firsts,
        &scores,
        ctx.config.all_two_selection,
        ctx.config.mixed_case,
        ctx.config.rng_seed,
        &sample.id,
    );
    let pair = match &decision {
        PairDecision::Pair { chosen, rejected, case } => Some(PreferencePair {
            id: sample.id.clone(),
            context: sample.history.clone(),
            chosen: chosen.clone(),
            rejected: rejected.clone(),
            provenance: PairProvenance { scores: scores.clone(), k, source: case.source() },
        }),
        _ => None,
    };
    Ok(SampleRun { simulations, scores, decision, pair, failed_simulations })
}

/// The pair for `sample`, or `None` when chosen and rejected coincide.
pub fn build_preference_pair(ctx: &RunContext, sample: &SeedSample) -> Result<Option<PreferencePair>> {
    Ok(run_sample(ctx, sample)?.pair)
}

/// On-disk pair record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub context: Transcript,
    pub chosen: String,
    pub rejected: String,
    pub scores: Vec<Score>,
    pub source: PairSource,
    pub template_hash: String,
}

impl PairRecord {
    pub fn new(pair: &PreferencePair, template_hash: &str) -> Self {
        Self {
            id: pair.id.clone(),
            context: pair.context.clone(),
            chosen: pair.chosen.clone(),
            rejected: pair.rejected.clone(),
            scores: pair.provenance.scores.clone(),
            source: pair.provenance.source,
            template_hash: template_hash.to_string(),
        }
    }

    pub fn flat(&self) -> FlatPair {
        FlatPair {
            prompt: format_dialogue(self.context.messages()),
            chosen: self.chosen.clone(),
            rejected: self.rejected.clone(),
        }
    }
}

/// Plain-text shape for preference-tuning toolchains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatPair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// Rewrites a pair file as [`FlatPair`] lines. Returns the record count.
pub fn convert_to_flat(input: &Path, output: &Path) -> Result<usize> {
    let records: Vec<PairRecord> = jsonl::read(input)?;
    let flat: Vec<FlatPair> = records.iter().map(PairRecord::flat).collect();
    jsonl::write(output, &flat)?;
    Ok(flat.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Emitted,
    SkippedIdentical,
    SkippedUndefined,
    Failed,
}

/// One checkpoint line per processed sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub id: String,
    pub status: SampleStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<Case>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodcsReport {
    pub total: usize,
    pub emitted: usize,
    pub skipped_identical: usize,
    /// Mixed samples skipped under `mixed_case = equation`.
    pub skipped_undefined: usize,
    pub failures: usize,
    pub failed_ids: Vec<String>,
    pub case_counts: BTreeMap<Case, usize>,
    /// Calls made by this invocation (zero for samples already checkpointed).
    pub ledger: LedgerSnapshot,
}

impl PodcsReport {
    fn from_entries<'a>(entries: impl Iterator<Item = &'a CheckpointEntry>, ledger: LedgerSnapshot) -> Self {
        let mut r = PodcsReport {
            total: 0,
            emitted: 0,
            skipped_identical: 0,
            skipped_undefined: 0,
            failures: 0,
            failed_ids: Vec::new(),
            case_counts: Case::ALL.iter().map(|&c| (c, 0)).collect(),
            ledger,
        };
        for e in entries {
            r.total += 1;
            match e.status {
                SampleStatus::Emitted => r.emitted += 1,
                SampleStatus::SkippedIdentical => r.skipped_identical += 1,
                SampleStatus::SkippedUndefined => r.skipped_undefined += 1,
                SampleStatus::Failed => {
                    r.failures += 1;
                    r.failed_ids.push(e.id.clone());
                }
            }
            if let Some(c) = e.case {
                *r.case_counts.entry(c).or_default() += 1;
            }
        }
        r
    }

    /// Counter consistency: every non-failed sample is emitted or skipped
    /// exactly once and has exactly one case.
    pub fn is_consistent(&self) -> bool {
        let ok = self.total - self.failures;
        self.emitted + self.skipped_identical + self.skipped_undefined == ok
            && self.case_counts.values().sum::<usize>() == ok
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub output: PathBuf,
    /// Defaults to `<output>.checkpoint`.
    pub checkpoint: Option<PathBuf>,
    /// Optional audit dump of every simulation.
    pub transcripts: Option<PathBuf>,
}

impl BuildOptions {
    pub fn new(output: impl Into<PathBuf>) -> Self {
        Self { output: output.into(), checkpoint: None, transcripts: None }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| {
            let mut p = self.output.clone().into_os_string();
            p.push(".checkpoint");
            PathBuf::from(p)
        })
    }
}

/// Builds the pair file for `dataset`, resuming from the checkpoint when one
/// exists. Samples are processed in chunks of `concurrency_limit`; each
/// chunk's pairs are flushed before its checkpoint lines, so an interrupted
/// run resumes to the same final file.
pub fn build_dataset(ctx: &RunContext, dataset: &[SeedSample], opts: &BuildOptions) -> Result<PodcsReport> {
    build_dataset_until(ctx, dataset, opts, None)
}

/// As [`build_dataset`], stopping after `max_chunks` chunks when given.
pub fn build_dataset_until(
    ctx: &RunContext,
    dataset: &[SeedSample],
    opts: &BuildOptions,
    max_chunks: Option<usize>,
) -> Result<PodcsReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut seen = HashSet::new();
    for s in dataset {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Dataset { path: opts.output.clone(), message: format!("duplicate id {:?}", s.id) });
        }
    }
    let template_hash = ctx.prompts.hash();
    let ckpt_path = opts.checkpoint_path();

    let mut done: HashMap<String, CheckpointEntry> = HashMap::new();
    for line in jsonl::repair_tail(&ckpt_path)? {
        let e: CheckpointEntry = serde_json::from_str(&line)
            .map_err(|err| Error::Dataset { path: ckpt_path.clone(), message: err.to_string() })?;
        done.insert(e.id.clone(), e);
    }
    let mut ckpt = Appender::open(&ckpt_path)?;
    // Pairs flushed before the run stopped but not yet checkpointed.
    let mut backfilled = false;
    for line in jsonl::repair_tail(&opts.output)? {
        let r: PairRecord = serde_json::from_str(&line)
            .map_err(|err| Error::Dataset { path: opts.output.clone(), message: err.to_string() })?;
        if let std::collections::hash_map::Entry::Vacant(slot) = done.entry(r.id.clone()) {
            let e = CheckpointEntry {
                id: r.id,
                status: SampleStatus::Emitted,
                case: Some(Case::from_source(r.source)),
                error: None,
            };
            ckpt.push(&e)?;
            slot.insert(e);
            backfilled = true;
        }
    }
    if backfilled {
        ckpt.flush()?;
    }
    if let Some(t) = &opts.transcripts {
        jsonl::repair_tail(t)?;
    }

    let pending: Vec<&SeedSample> = dataset.iter().filter(|s| !done.contains_key(&s.id)).collect();
    if !done.is_empty() {
        tracing::info!(resumed = dataset.len() - pending.len(), pending = pending.len(), "resuming from checkpoint");
    }
    let (ctx, scope) = ctx.scoped();
    let mut out = Appender::open(&opts.output)?;
    let mut dump = opts.transcripts.as_deref().map(Appender::open).transpose()?;
    let chunk = ctx.config.concurrency_limit.max(1);
    for (n, batch) in pending.chunks(chunk).enumerate() {
        if max_chunks.is_some_and(|m| n >= m) {
            break;
        }
        let runs = ctx.exec.map(batch.to_vec(), |s| (s, run_sample(&ctx, s)));
        let mut entries = Vec::with_capacity(runs.len());
        for (sample, run) in runs {
            let entry = match run {
                Ok(run) => {
                    if let Some(d) = dump.as_mut() {
                        for (j, sim) in run.simulations.iter().enumerate() {
                            let rec: TranscriptDump = sim.dump(&format!("{}#{j}", sample.id));
                            d.push(&rec)?;
                        }
                    }
                    let (status, case) = match &run.decision {
                        PairDecision::Pair { case, .. } => (SampleStatus::Emitted, Some(*case)),
                        PairDecision::Identical { case } => (SampleStatus::SkippedIdentical, Some(*case)),
                        PairDecision::Undefined => (SampleStatus::SkippedUndefined, Some(Case::Mixed)),
                    };
                    if let Some(pair) = &run.pair {
                        out.push(&PairRecord::new(pair, &template_hash))?;
                    }
                    CheckpointEntry { id: sample.id.clone(), status, case, error: None }
                }
                Err(e) => {
                    tracing::warn!(id = %sample.id, error = %e, "sample failed");
                    CheckpointEntry {
                        id: sample.id.clone(),
                        status: SampleStatus::Failed,
                        case: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            entries.push(entry);
        }
        out.flush()?;
        if let Some(d) = dump.as_mut() {
            d.flush()?;
        }
        for e in entries {
            ckpt.push(&e)?;
            done.insert(e.id.clone(), e);
        }
        ckpt.flush()?;
    }
    let report = PodcsReport::from_entries(dataset.iter().filter_map(|s| done.get(&s.id)), scope.snapshot());
    debug_assert!(report.is_consistent());
    Ok(report)
}
