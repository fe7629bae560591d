use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    dataset_file_name, default_clock, fatal, open_checkpoint, run_items, stage_summary, Env, Fault, ItemError,
    ItemIssue, Journal, Outcome, PhaseReport, PipelineCheckpoint, PipelineError, RunConfig, RunOptions, RunReport,
    ROLE_ANSWERER, ROLE_EXPANDER,
};
use crate::expansion::{run_expansion_from, ExpansionReport};
use crate::io::{read_jsonl, write_atomic, write_jsonl};
use crate::model::{Instruction, InstructionOrigin, InstructionPool, RetrievedContext, SftRecord};
use crate::prompts::{ANSWER, EXPAND};
use crate::seeds::{export_seeds, load_seeds, LoadedSeeds};
use crate::synthesis::{emit_record, generate_answer, Manifest, PairRecord};

pub(crate) const PHASE_SYNTHESIS: &str = "synthesis";
const POOL_FILE: &str = "pool.jsonl";
const EXPANSION_REPORT_FILE: &str = "expansion_report.json";
const SYNTHESIS_JOURNAL: &str = "journal.synthesis.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SynthesisEntry {
    id: String,
    outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    record: Option<SftRecord>,
    #[serde(default)]
    contexts: Vec<RetrievedContext>,
    #[serde(default)]
    warnings: Vec<String>,
}

pub(crate) fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PipelineError::Io(e.to_string()))?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

pub(crate) fn load_seed_file(path: Option<&Path>, what: &str, stage: u32) -> Result<LoadedSeeds, PipelineError> {
    let path = path.ok_or_else(|| PipelineError::Config(format!("paths.{what} is required")))?;
    if !path.is_file() {
        return Err(PipelineError::Input(format!(
            "{what} file not found: {}",
            path.display()
        )));
    }
    let loaded = load_seeds(path, stage)?;
    for d in &loaded.dropped {
        tracing::warn!(record = d.record, reason = ?d.reason, "seed dropped");
    }
    Ok(loaded)
}

/// Rebuilds the pool from the seed set plus saved expanded instructions.
fn restore_pool(mut pool: InstructionPool, saved: Vec<Instruction>) -> Result<InstructionPool, PipelineError> {
    let mut expanded: Vec<Instruction> = saved
        .into_iter()
        .filter(|i| i.origin == InstructionOrigin::Expanded)
        .collect();
    expanded.sort_by(|a, b| a.iteration.cmp(&b.iteration).then_with(|| a.id.cmp(&b.id)));
    for ins in expanded {
        let id = ins.id.clone();
        if !pool.insert_expanded(ins) {
            return Err(PipelineError::Io(format!("saved pool is inconsistent at {id}")));
        }
    }
    Ok(pool)
}

fn save_expansion_state(out: &Path, pool: &InstructionPool, report: &ExpansionReport) -> Result<(), PipelineError> {
    write_jsonl(&out.join(POOL_FILE), pool.all())?;
    write_json_pretty(&out.join(EXPANSION_REPORT_FILE), report)
}

/// Runs (or resumes) expansion, checkpointing after every iteration.
fn expansion_phase(
    env: &mut Env,
    seeds: InstructionPool,
    cp: &mut PipelineCheckpoint,
    out: &Path,
    options: &RunOptions,
) -> Result<(InstructionPool, ExpansionReport), PipelineError> {
    let config = env.config.clone();
    let needs_model = config.expansion.as_ref().is_some_and(|e| e.m > 0 && e.k > 0);
    let (mut pool, mut report, start) = if cp.expansion.completed_iterations > 0 || cp.expansion.done {
        let saved: Vec<Instruction> = read_jsonl(&out.join(POOL_FILE))?;
        let report_bytes = std::fs::read(out.join(EXPANSION_REPORT_FILE))?;
        let report: ExpansionReport =
            serde_json::from_slice(&report_bytes).map_err(|e| PipelineError::Io(e.to_string()))?;
        (
            restore_pool(seeds, saved)?,
            report,
            cp.expansion.completed_iterations + 1,
        )
    } else {
        (seeds, ExpansionReport::default(), 1)
    };

    if !cp.expansion.done && needs_model {
        let expansion = config.expansion.as_ref().expect("checked above");
        let gateway = env.open_gateway(ROLE_EXPANDER, &default_clock(options))?;
        let template = env
            .templates
            .get(EXPAND)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let (p, r) = run_expansion_from(
            pool,
            report,
            start,
            expansion,
            config.stage,
            &gateway,
            template,
            |t, pool, report| {
                save_expansion_state(out, pool, report).map_err(|e| e.to_string())?;
                cp.expansion.completed_iterations = t;
                cp.save(out).map_err(|e| e.to_string())
            },
        )?;
        pool = p;
        report = r;
    }
    if !cp.expansion.done {
        save_expansion_state(out, &pool, &report)?;
        cp.expansion.done = true;
        cp.save(out)?;
    }
    Ok((pool, report))
}

fn apply_seeds_report(report: &mut RunReport, seeds: &LoadedSeeds) {
    report.seeds = seeds.pool.seed_count();
    report.seeds_dropped = seeds.dropped.len();
}

/// Seed loading and expansion only. Writes `seeds.jsonl`, `pool.jsonl`,
/// `expansion_report.json` and `run.log`.
pub fn run_expand(config: &RunConfig, options: &RunOptions) -> Result<RunReport, PipelineError> {
    config.validate()?;
    if config.expansion.is_none() {
        return Err(PipelineError::Config("[expansion] with m is required".into()));
    }
    let seeds = load_seed_file(config.paths.seeds.as_deref(), "seeds", config.stage)?;
    let templates = config.templates()?;
    let hash = config.config_hash(&templates)?;
    let out = config.paths.output_dir.clone();
    let mut cp = open_checkpoint(&out, config, &hash, false)?;
    let mut env = Env::new(config.clone(), templates);
    let mut report = RunReport {
        run_id: config.run_id.clone(),
        stage: config.stage,
        config_hash: hash,
        ..RunReport::default()
    };
    apply_seeds_report(&mut report, &seeds);
    let (pool, expansion) = expansion_phase(&mut env, seeds.pool, &mut cp, &out, options)?;
    write_jsonl(&out.join("seeds.jsonl"), export_seeds(&pool))?;
    report.expansion = expansion;
    report.pool_size = pool.len();
    write_atomic(&out.join("run.log"), report.summary().as_bytes())?;
    Ok(report)
}

fn synthesize_item(env: &Env, ins: &Instruction, options: &RunOptions) -> Result<SynthesisEntry, PipelineError> {
    let mut warnings = Vec::new();
    let mut contexts = Vec::new();
    let result = (|| -> Result<SftRecord, ItemError> {
        let (assembled, all) = env.gather_evidence(ins, &mut warnings)?;
        contexts = all;
        if assembled.is_empty() && !env.config.allow_ungrounded {
            return Err(ItemError::Skipped("no_evidence".into()));
        }
        let template = env.templates.get(ANSWER).map_err(fatal)?;
        let answer = generate_answer(ins, &assembled, env.gateway(ROLE_ANSWERER), template)?;
        Ok(emit_record(
            ins,
            &answer,
            assembled.used_ids.clone(),
            options.stamp(),
            env.config.synthesis.max_answer_chars,
        )?)
    })();
    let (outcome, reason, record) = match result {
        Ok(record) => (Outcome::Succeeded, None, Some(record)),
        Err(ItemError::Failed(r)) => (Outcome::Failed, Some(r), None),
        Err(ItemError::Skipped(r)) => (Outcome::Skipped, Some(r), None),
        Err(ItemError::Fatal(e)) => return Err(e),
    };
    for w in &warnings {
        tracing::warn!(id = %ins.id, "{w}");
    }
    Ok(SynthesisEntry {
        id: ins.id.clone(),
        outcome,
        reason,
        record,
        contexts,
        warnings,
    })
}

/// Runs every journal-pending item and journals its entry; returns all
/// entries (previous and new) keyed by id.
#[allow(clippy::too_many_arguments)]
pub(crate) fn process_phase<E>(
    env: &Env,
    phase: &str,
    items: &[Instruction],
    cp: &mut PipelineCheckpoint,
    out: &Path,
    options: &RunOptions,
    journal_name: &str,
    id_of: impl Fn(&E) -> &str,
    work: impl Fn(&Instruction) -> Result<E, PipelineError> + Sync,
) -> Result<BTreeMap<String, E>, PipelineError>
where
    E: Serialize + serde::de::DeserializeOwned + Send,
{
    let path = out.join(journal_name);
    let (mut journal, prior): (Journal, Vec<E>) = if options.resume {
        Journal::open(&path)?
    } else {
        (Journal::create(&path)?, Vec::new())
    };
    let mut entries = BTreeMap::new();
    for e in prior {
        let id = id_of(&e).to_string();
        entries.entry(id).or_insert(e);
    }
    let done = cp.completed.entry(phase.to_string()).or_default();
    done.extend(entries.keys().cloned());
    let pending: Vec<Instruction> = items.iter().filter(|i| !entries.contains_key(&i.id)).cloned().collect();
    let save_every = (pending.len() / 100).max(1);
    let mut handled = 0usize;
    let stop_after = match options.fault {
        Some(Fault::AfterItems(n)) => Some(n),
        _ => None,
    };
    cp.save(out)?;

    run_items(&pending, env.config.parallelism, work, |_, result| {
        let entry = result?;
        journal.append(&entry)?;
        let id = id_of(&entry).to_string();
        cp.completed.entry(phase.to_string()).or_default().insert(id.clone());
        entries.insert(id, entry);
        handled += 1;
        if handled.is_multiple_of(save_every) {
            cp.save(out)?;
        }
        if stop_after == Some(handled) {
            cp.save(out)?;
            return Err(PipelineError::Interrupted(format!(
                "fault injected after {handled} items"
            )));
        }
        Ok(())
    })?;
    cp.save(out)?;
    Ok(entries)
}

/// The full run: seeds, expansion, then grounding and answer synthesis per
/// instruction.
pub fn run(config: &RunConfig, options: &RunOptions) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let seeds = load_seed_file(config.paths.seeds.as_deref(), "seeds", config.stage)?;
    let templates = config.templates()?;
    let hash = config.config_hash(&templates)?;
    let out = config.paths.output_dir.clone();
    let mut cp = open_checkpoint(&out, config, &hash, options.resume)?;
    let mut env = Env::new(config.clone(), templates);
    let clock = default_clock(options);
    env.open_gateway(ROLE_ANSWERER, &clock)?;
    env.open_grounding(&clock)?;

    let mut report = RunReport {
        run_id: config.run_id.clone(),
        stage: config.stage,
        config_hash: hash.clone(),
        ..RunReport::default()
    };
    apply_seeds_report(&mut report, &seeds);
    let (pool, expansion) = expansion_phase(&mut env, seeds.pool, &mut cp, &out, options)?;
    report.expansion = expansion;
    report.pool_size = pool.len();
    write_jsonl(&out.join("seeds.jsonl"), export_seeds(&pool))?;
    if options.fault == Some(Fault::AfterExpansion) {
        return Err(PipelineError::Interrupted("fault injected after expansion".into()));
    }

    let items = pool.all();
    let entries = process_phase(
        &env,
        PHASE_SYNTHESIS,
        &items,
        &mut cp,
        &out,
        options,
        SYNTHESIS_JOURNAL,
        |e: &SynthesisEntry| e.id.as_str(),
        |ins| synthesize_item(&env, ins, options),
    )?;

    let mut phase = PhaseReport::default();
    let mut by_stage: BTreeMap<u32, Vec<PairRecord>> = BTreeMap::new();
    let mut provenance = Vec::new();
    let mut contexts = Vec::new();
    for ins in &items {
        let Some(entry) = entries.get(&ins.id) else {
            continue;
        };
        phase.record(entry.outcome);
        contexts.extend(entry.contexts.iter());
        match &entry.record {
            Some(record) if entry.outcome == Outcome::Succeeded => {
                by_stage
                    .entry(record.instruction.stage)
                    .or_default()
                    .push(PairRecord::from(record));
                provenance.push(record);
            }
            _ => report.issues.push(ItemIssue {
                id: entry.id.clone(),
                outcome: entry.outcome,
                reason: entry.reason.clone().unwrap_or_default(),
            }),
        }
    }
    if by_stage.is_empty() {
        by_stage.insert(config.stage, Vec::new());
    }
    for (stage, records) in &by_stage {
        write_jsonl(&out.join(dataset_file_name(*stage)), records)?;
        report.records.insert(*stage, records.len());
    }
    write_jsonl(&out.join("contexts.jsonl"), contexts)?;
    write_jsonl(&out.join("provenance.jsonl"), provenance)?;
    report.synthesis = Some(phase);

    let summary = stage_summary(&out)?;
    write_json_pretty(
        &out.join("manifest.json"),
        &Manifest::from_counts(summary.stage_counts, options.stamp(), hash),
    )?;
    write_json_pretty(&out.join("report.json"), &report)?;
    write_atomic(&out.join("effective_config.toml"), config.to_toml().as_bytes())?;
    write_atomic(&out.join("run.log"), report.summary().as_bytes())?;
    Ok(report)
}
