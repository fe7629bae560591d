mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use common::*;
use groundset::editing::{edit_ratio, PreferenceRecord, QuarantineRecord};
use groundset::gateway::{FakeClock, MockReply, MockScript, MockStep, ProviderConfig};
use groundset::io::read_jsonl;
use groundset::model::InstructionOrigin;
use groundset::pipeline::{
    run, run_edit, run_expand, Fault, PipelineCheckpoint, PipelineError, RunOptions, ROLE_REWRITER,
};
use groundset::prompts::{TemplateSet, REWRITE};
use groundset::seeds::load_seeds;
use groundset::synthesis::PairRecord;

#[test]
fn toy_run_counts_follow_the_script() {
    let dir = tempfile::tempdir().unwrap();
    let report = run(&toy_config(dir.path()), &fixed_options()).unwrap();
    // Every expand reply holds 4 lexically distinct questions built from the
    // prompt hash, so 5 iterations admit 20 and all 30 are answered.
    let totals = report.expansion.totals();
    assert_eq!((totals.generated, totals.accepted), (20, 20));
    assert_eq!(report.pool_size, 30);
    let s = report.synthesis.unwrap();
    assert_eq!((s.attempted, s.succeeded, s.failed, s.skipped), (30, 30, 0, 0));
    assert_eq!(report.records, BTreeMap::from([(1, 30)]));

    let dataset: Vec<PairRecord> = read_jsonl(&dir.path().join("dataset.stage1.jsonl")).unwrap();
    let ids: Vec<&str> = dataset.iter().map(|r| r.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}

#[test]
fn pool_is_seeds_plus_expanded() {
    let dir = tempfile::tempdir().unwrap();
    run(&toy_config(dir.path()), &fixed_options()).unwrap();
    let pool = read_pool(dir.path());
    let seeds = load_seeds(&toy_dir().join("seeds.jsonl"), 1).unwrap().pool;
    let seed_ids: BTreeSet<String> = seeds.seeds().map(|s| s.id.clone()).collect();
    let all: BTreeSet<String> = pool.iter().map(|i| i.id.clone()).collect();
    assert_eq!(all.len(), pool.len());
    for ins in &pool {
        match ins.origin {
            InstructionOrigin::Seed => assert!(seed_ids.contains(&ins.id)),
            InstructionOrigin::Expanded => {
                assert!(!seed_ids.contains(&ins.id));
                assert!((1..=5).contains(&ins.iteration));
                assert!(!ins.parent_ids.is_empty());
                assert!(ins.parent_ids.iter().all(|p| all.contains(p)));
            }
        }
    }
    assert_eq!(
        pool.iter().filter(|i| i.origin == InstructionOrigin::Seed).count(),
        seed_ids.len()
    );
}

#[test]
fn no_expansion_answers_seeds_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = toy_config(dir.path());
    config.expansion.as_mut().unwrap().k = 0;
    let report = run(&config, &fixed_options()).unwrap();
    assert_eq!(report.pool_size, 10);
    assert_eq!(report.records[&1], 10);
}

#[test]
fn parallelism_does_not_change_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut serial = toy_config(a.path());
    serial.parallelism = 1;
    let mut wide = toy_config(b.path());
    wide.parallelism = 16;
    run(&serial, &fixed_options()).unwrap();
    run(&wide, &fixed_options()).unwrap();
    for name in DETERMINISTIC_OUTPUTS {
        assert_same_file(&a.path().join(name), &b.path().join(name));
    }
}

fn assert_resume_equivalent(fault: Fault) {
    let reference = tempfile::tempdir().unwrap();
    run(&toy_config(reference.path()), &fixed_options()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path());
    let killed = RunOptions {
        fault: Some(fault),
        ..fixed_options()
    };
    assert!(matches!(run(&config, &killed), Err(PipelineError::Interrupted(_))));
    run(&config, &resume_options()).unwrap();
    for name in DETERMINISTIC_OUTPUTS {
        assert_same_file(&reference.path().join(name), &dir.path().join(name));
    }
}

#[test]
fn resume_after_expansion_matches_uninterrupted() {
    assert_resume_equivalent(Fault::AfterExpansion);
}

#[test]
fn resume_mid_synthesis_matches_uninterrupted() {
    assert_resume_equivalent(Fault::AfterItems(7));
}

#[test]
fn resume_processes_each_item_once() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path());
    let killed = RunOptions {
        fault: Some(Fault::AfterItems(12)),
        ..fixed_options()
    };
    assert!(run(&config, &killed).is_err());
    let cp = PipelineCheckpoint::load(dir.path()).unwrap().unwrap();
    assert_eq!(cp.phase("synthesis").len(), 12);
    run(&config, &resume_options()).unwrap();
    let journal: Vec<serde_json::Value> = read_jsonl(&dir.path().join("journal.synthesis.jsonl")).unwrap();
    let ids: Vec<&str> = journal.iter().map(|e| e["id"].as_str().unwrap()).collect();
    let unique: BTreeSet<&str> = ids.iter().copied().collect();
    assert_eq!(ids.len(), 30);
    assert_eq!(unique.len(), 30);
}

#[test]
fn resume_is_refused_without_checkpoint_or_with_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = toy_config(dir.path());
    assert!(matches!(
        run(&config, &resume_options()),
        Err(PipelineError::ResumeRefused(_))
    ));
    run(&config, &fixed_options()).unwrap();
    config.expansion.as_mut().unwrap().rng_seed += 1;
    let err = run(&config, &resume_options()).unwrap_err();
    assert!(matches!(err, PipelineError::ResumeRefused(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn provider_failure_on_one_item_is_fail_soft() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = toy_config(dir.path());
    config.expansion.as_mut().unwrap().m = 0;
    let seeds = load_seeds(&toy_dir().join("seeds.jsonl"), 1)
        .unwrap()
        .pool
        .seed_instructions();
    let victim = &seeds[0];
    let request = TemplateSet::builtin()
        .get(REWRITE)
        .unwrap()
        .render(&[("instruction", &victim.text)])
        .unwrap();
    let mut script = MockScript::load(&toy_dir().join("mock_script.json")).unwrap();
    script.responses.insert(
        request.prompt_hash(),
        MockReply::Sequence(vec![MockStep::Status { status: 503 }]),
    );
    let mut rewriter = ProviderConfig::mock().with_script(script);
    rewriter.max_attempts = 3;
    config.providers.insert(ROLE_REWRITER.into(), rewriter);
    let options = RunOptions {
        clock: Some(Arc::new(FakeClock::default())),
        ..fixed_options()
    };
    let report = run(&config, &options).unwrap();
    let s = report.synthesis.unwrap();
    assert_eq!((s.attempted, s.succeeded, s.failed, s.skipped), (10, 9, 1, 0));
    assert_eq!(report.issues.len(), 1);
    assert_eq!(report.issues[0].id, victim.id);
    assert!(
        report.issues[0].reason.contains("3 attempts"),
        "{}",
        report.issues[0].reason
    );
}

#[test]
fn overlong_answers_fail_validation_without_aborting() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = toy_config(dir.path());
    config.synthesis.max_answer_chars = 10;
    let report = run(&config, &fixed_options()).unwrap();
    let s = report.synthesis.unwrap();
    assert_eq!((s.attempted, s.failed), (30, 30));
    assert!(s.is_balanced());
    assert_eq!(std::fs::read(dir.path().join("dataset.stage1.jsonl")).unwrap(), b"");
}

#[test]
fn expand_only_with_zero_iterations_echoes_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = toy_config(dir.path());
    config.expansion.as_mut().unwrap().m = 0;
    let report = run_expand(&config, &fixed_options()).unwrap();
    assert_eq!(report.pool_size, 10);
    let pool = read_pool(dir.path());
    assert!(pool.iter().all(|i| i.origin == InstructionOrigin::Seed));
}

#[test]
fn edit_run_routes_triples_as_scripted() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_edit(&toy_config(dir.path()), &fixed_options()).unwrap();
    assert_eq!((report.preferences, report.quarantined), (15, 5));
    let main: Vec<PreferenceRecord> = read_jsonl(&dir.path().join("preferences.jsonl")).unwrap();
    for t in &main {
        assert!(t.edit_ratio <= 0.5);
        assert_eq!(edit_ratio(&t.rejected, &t.chosen), t.edit_ratio);
        assert_ne!(t.rejected, t.chosen);
    }
    let q: Vec<QuarantineRecord> = read_jsonl(&dir.path().join("quarantine.jsonl")).unwrap();
    let flags: BTreeMap<String, usize> = q.iter().fold(BTreeMap::new(), |mut m, r| {
        *m.entry(serde_json::to_value(r.flag).unwrap().as_str().unwrap().to_string())
            .or_default() += 1;
        m
    });
    assert_eq!(
        flags,
        BTreeMap::from([("no_change_needed".into(), 3), ("over_ratio".into(), 2)])
    );
}

#[test]
fn edit_ratio_flag_moves_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = toy_config(dir.path());
    config.editing.max_edit_ratio = 0.1;
    let report = run_edit(&config, &fixed_options()).unwrap();
    // Ratios in the script at or below 0.1: 0.1, 0.0909 x5, 0.0833.
    assert_eq!(report.preferences, 7);
    assert_eq!(report.quarantined, 13);
}

#[test]
fn edit_resume_after_two_items() {
    let reference = tempfile::tempdir().unwrap();
    run_edit(&toy_config(reference.path()), &fixed_options()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path());
    let killed = RunOptions {
        fault: Some(Fault::AfterItems(2)),
        ..fixed_options()
    };
    assert!(run_edit(&config, &killed).is_err());
    run_edit(&config, &resume_options()).unwrap();
    for name in EDIT_OUTPUTS {
        assert_same_file(&reference.path().join(name), &dir.path().join(name));
    }
    let journal: Vec<serde_json::Value> = read_jsonl(&dir.path().join("journal.edit.jsonl")).unwrap();
    assert_eq!(journal.len(), 20);
}

#[test]
fn edit_item_without_evidence_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = dir.path().join("edit.jsonl");
    std::fs::write(
        &seeds,
        "{\"text\":\"Who is the current president of Iran?\",\"origin\":\"human\"}\n{\"text\":\"Qqzx vvrt plok?\",\"origin\":\"human\"}\n",
    )
    .unwrap();
    let mut config = toy_config(&dir.path().join("out"));
    config.paths.edit_seeds = Some(seeds);
    let report = run_edit(&config, &fixed_options()).unwrap();
    let e = report.edit.unwrap();
    assert_eq!((e.attempted, e.succeeded, e.skipped), (2, 1, 1));
    assert_eq!(report.issues[0].reason, "no_evidence");
}

#[test]
fn missing_editor_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = toy_config(dir.path());
    config.providers.remove("editor");
    let err = run_edit(&config, &fixed_options()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}
