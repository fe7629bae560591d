use serde::{Deserialize, Serialize};

use super::generate::{load_seed_file, process_phase, write_json_pretty};
use super::{
    default_clock, fatal, open_checkpoint, Env, ItemError, ItemIssue, Outcome, PhaseReport, PipelineError, RunConfig,
    RunOptions, RunReport, ROLE_BASE, ROLE_EDITOR,
};
use crate::editing::{
    capture_baseline, emit_triple, revise_answer, PreferenceRecord, QuarantineFlag, QuarantineRecord, TripleOutcome,
};
use crate::io::{write_atomic, write_jsonl};
use crate::model::{Instruction, PreferenceTriple, RetrievedContext};
use crate::prompts::{BASELINE, EDIT};

pub(crate) const PHASE_EDIT: &str = "edit";
const EDIT_JOURNAL: &str = "journal.edit.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EditEntry {
    id: String,
    outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triple: Option<PreferenceTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flag: Option<QuarantineFlag>,
    #[serde(default)]
    contexts: Vec<RetrievedContext>,
}

fn edit_item(env: &Env, ins: &Instruction) -> Result<EditEntry, PipelineError> {
    let mut warnings = Vec::new();
    let mut contexts = Vec::new();
    let result = (|| -> Result<TripleOutcome, ItemError> {
        let rejected = capture_baseline(ins, env.gateway(ROLE_BASE), env.templates.get(BASELINE).map_err(fatal)?)?;
        let (assembled, all) = env.gather_evidence(ins, &mut warnings)?;
        contexts = all;
        let template = env.templates.get(EDIT).map_err(fatal)?;
        let chosen = revise_answer(ins, &rejected, &assembled, env.gateway(ROLE_EDITOR), template)?;
        Ok(emit_triple(
            ins,
            &rejected,
            &chosen,
            assembled.used_ids.clone(),
            env.config.editing.max_edit_ratio,
        ))
    })();
    for w in &warnings {
        tracing::warn!(id = %ins.id, "{w}");
    }
    let mut entry = EditEntry {
        id: ins.id.clone(),
        outcome: Outcome::Succeeded,
        reason: None,
        triple: None,
        flag: None,
        contexts,
    };
    match result {
        Ok(TripleOutcome::Accepted(t)) => entry.triple = Some(t),
        Ok(TripleOutcome::Quarantined(t, flag)) => {
            entry.triple = Some(t);
            entry.flag = Some(flag);
        }
        Err(ItemError::Failed(r)) => {
            entry.outcome = Outcome::Failed;
            entry.reason = Some(r);
        }
        Err(ItemError::Skipped(r)) => {
            entry.outcome = Outcome::Skipped;
            entry.reason = Some(r);
        }
        Err(ItemError::Fatal(e)) => return Err(e),
    }
    Ok(entry)
}

/// The edit flow over `paths.edit_seeds`: baseline answer, evidence,
/// minimal revision, then routing to `preferences.jsonl` or
/// `quarantine.jsonl`.
pub fn run_edit(config: &RunConfig, options: &RunOptions) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let seeds = load_seed_file(config.paths.edit_seeds.as_deref(), "edit_seeds", config.stage)?;
    let templates = config.templates()?;
    let hash = config.config_hash(&templates)?;
    let out = config.paths.output_dir.clone();
    let mut env = Env::new(config.clone(), templates);
    let clock = default_clock(options);
    env.open_gateway(ROLE_BASE, &clock)?;
    env.open_gateway(ROLE_EDITOR, &clock)?;
    env.open_grounding(&clock)?;
    let mut cp = open_checkpoint(&out, config, &hash, options.resume)?;

    let items = seeds.pool.seed_instructions();
    let entries = process_phase(
        &env,
        PHASE_EDIT,
        &items,
        &mut cp,
        &out,
        options,
        EDIT_JOURNAL,
        |e: &EditEntry| e.id.as_str(),
        |ins| edit_item(&env, ins),
    )?;

    let mut report = RunReport {
        run_id: config.run_id.clone(),
        stage: config.stage,
        config_hash: hash,
        seeds: seeds.pool.seed_count(),
        seeds_dropped: seeds.dropped.len(),
        ..RunReport::default()
    };
    let mut phase = PhaseReport::default();
    let mut preferences = Vec::new();
    let mut quarantine = Vec::new();
    let mut contexts = Vec::new();
    for ins in &items {
        let Some(entry) = entries.get(&ins.id) else {
            continue;
        };
        phase.record(entry.outcome);
        contexts.extend(entry.contexts.iter());
        match (&entry.triple, entry.flag) {
            (Some(t), None) => preferences.push(PreferenceRecord::from(t)),
            (Some(t), Some(flag)) => quarantine.push(QuarantineRecord::new(t, flag)),
            (None, _) => report.issues.push(ItemIssue {
                id: entry.id.clone(),
                outcome: entry.outcome,
                reason: entry.reason.clone().unwrap_or_default(),
            }),
        }
    }
    report.preferences = preferences.len();
    report.quarantined = quarantine.len();
    report.edit = Some(phase);
    write_jsonl(&out.join("preferences.jsonl"), &preferences)?;
    write_jsonl(&out.join("quarantine.jsonl"), &quarantine)?;
    write_jsonl(&out.join("edit_contexts.jsonl"), contexts)?;
    write_json_pretty(&out.join("edit_report.json"), &report)?;
    write_atomic(&out.join("effective_config.toml"), config.to_toml().as_bytes())?;
    write_atomic(&out.join("run.log"), report.summary().as_bytes())?;
    Ok(report)
}
