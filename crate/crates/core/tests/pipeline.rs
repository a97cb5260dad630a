use std::path::Path;
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use mimir_core::ingest::{parse_topics, PoolSelection, Registry};
use mimir_core::pipeline::{run_dialogues, run_trajectories, run_verification, GenerateConfig, PipelineContext, RunControl};
use mimir_core::prompt::PromptTemplates;
use mimir_core::roleplay::RoleCatalog;
use mimir_core::trajectory::ToolRegistry;
use mimir_core::tuning::{export_dialogues, render_export, ExportBatch};
use mimir_core::types::{Framework, GenerationConfig, SeedFormat, TopicKind};
use mimir_core::verify::TurnSelection;
use mimir_core::ScriptedProvider;

fn registry() -> Registry {
    Registry::open(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../registry")).unwrap()
}

fn context(provider: ScriptedProvider) -> PipelineContext {
    PipelineContext {
        registry: Arc::new(registry()),
        roles: RoleCatalog::builtin(),
        templates: PromptTemplates::default(),
        tools: ToolRegistry::builtin(),
        provider: Arc::new(provider),
    }
}

fn replies(n: usize) -> ScriptedProvider {
    ScriptedProvider::sequence((0..n).map(|i| format!("reply {i}")))
}

#[test]
fn pool_is_a_pure_function_of_selection() {
    let registry = registry();
    let topics = parse_topics(b"Cataract surgery\nAnatomy\n", TopicKind::Keyword).unwrap();
    let ids = vec!["medqa".to_owned(), "symptom-notes".to_owned()];
    let at = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    let selection = |seed| PoolSelection {
        topics: &topics,
        dataset_ids: &ids,
        per_dataset_cap: Some(2),
        rng_seed: seed,
    };
    let a = registry.build_data_pool_at(&selection(9), at).unwrap();
    let b = registry.build_data_pool_at(&selection(9), at).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert_eq!(a.entries[0].seed_text(), "Cataract surgery");
    assert_eq!(a.entries[0].format(), SeedFormat::Keyword);
    assert_eq!(a.entries[2].format(), SeedFormat::Instruction);
    assert_eq!(a.entries[5].format(), SeedFormat::Raw);

    let seeds: std::collections::HashSet<Vec<String>> = (0..32)
        .map(|s| {
            registry
                .build_data_pool_at(&selection(s), at)
                .unwrap()
                .entries
                .iter()
                .map(|e| e.provenance().id.clone())
                .collect()
        })
        .collect();
    assert!(seeds.len() > 1, "seed never changes the sample");

    let uncapped = PoolSelection {
        per_dataset_cap: None,
        ..selection(0)
    };
    assert_eq!(registry.build_data_pool_at(&uncapped, at).unwrap().len(), 2 + 4 + 3);
}

#[tokio::test]
async fn dialogue_runs_export_identically() {
    let mut config = GenerateConfig {
        datasets: vec!["pubmedqa".into(), "symptom-notes".into()],
        per_dataset_cap: Some(2),
        chat_room: true,
        ..Default::default()
    };
    config.generation.rounds = 3;
    config.generation.rng_seed = 5;
    config.generation.picked_roles = vec!["Doctor".into(), "Nurse".into()];
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let ctx = context(replies(400));
        let run = run_dialogues(&ctx, &config, &[], &RunControl::none()).await.unwrap();
        assert_eq!(run.samples.len(), 4);
        assert_eq!(run.chat_rooms.len(), 4);
        for (i, sample) in run.samples.iter().enumerate() {
            assert!(sample.validate().is_ok());
            assert_eq!(sample.rounds(), 3);
            assert_eq!(sample.roles[0], if i % 2 == 0 { "Doctor" } else { "Nurse" });
            assert_eq!(sample.meta.temperature, 0.1);
            assert_eq!(sample.meta.max_tokens, 1000);
        }
        outputs.push(render_export(ExportBatch::Dialogues(&run.samples)).unwrap().0);
    }
    assert_eq!(outputs[0], outputs[1]);

    let dir = tempfile::tempdir().unwrap();
    let ctx = context(replies(400));
    let run = run_dialogues(&ctx, &config, &[], &RunControl::none()).await.unwrap();
    export_dialogues(&run.samples, &dir.path().join("d.jsonl")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("d.jsonl")).unwrap(), outputs[0]);
}

#[tokio::test]
async fn cancellation_and_progress() {
    let config = GenerateConfig {
        datasets: vec!["medqa".into()],
        ..Default::default()
    };
    let ctx = context(replies(100));
    let seen = std::sync::Mutex::new(Vec::new());
    let control = RunControl::new(|done, total| seen.lock().unwrap().push((done, total)), || false);
    run_dialogues(&ctx, &config, &[], &control).await.unwrap();
    assert_eq!(*seen.lock().unwrap(), [(0, 4), (1, 4), (2, 4), (3, 4), (4, 4)]);

    let control = RunControl::new(|_, _| {}, || true);
    assert!(matches!(
        run_dialogues(&ctx, &config, &[], &control).await,
        Err(mimir_core::pipeline::PipelineError::Canceled)
    ));
}

#[tokio::test]
async fn trajectories_for_each_framework() {
    let mut config = GenerateConfig {
        datasets: vec!["medqa".into()],
        max_samples: Some(2),
        ..Default::default()
    };
    config.generation.tools = vec!["mock_search".into()];
    let ctx = context(ScriptedProvider::sequence([
        "Thought: check\nAction: mock_search[a]",
        "Thought: ok\nFinal Answer: A",
        "Thought: ok\nFinal Answer: B",
    ]));
    let out = run_trajectories(&ctx, &config, &[], &RunControl::none()).await.unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].steps.len(), 2);
    assert_eq!(out[1].final_answer.as_deref(), Some("B"));

    config.generation.framework = Framework::Cot;
    config.generation.tools.clear();
    let ctx = context(ScriptedProvider::sequence(["Reasoning.\nFinal Answer: C", "Final Answer: D"]));
    let out = run_trajectories(&ctx, &config, &[], &RunControl::none()).await.unwrap();
    assert_eq!(out[0].final_answer.as_deref(), Some("C"));
    assert_eq!(out[0].meta.framework, Framework::Cot);

    config.generation.framework = Framework::React;
    let ctx = context(replies(0));
    let err = run_trajectories(&ctx, &config, &[], &RunControl::none()).await.unwrap_err();
    assert!(matches!(err, mimir_core::pipeline::PipelineError::InvalidConfig(ref f) if f[0].field == "tools"));
}

#[tokio::test]
async fn verification_groups_by_rounds() {
    let ctx = context(replies(100));
    let mut config = GenerateConfig {
        datasets: vec!["medqa".into()],
        max_samples: Some(2),
        ..Default::default()
    };
    config.generation.rounds = 2;
    let run = run_dialogues(&ctx, &config, &[], &RunControl::none()).await.unwrap();
    let verifier = ScriptedProvider::sequence([
        "SUPPORTED: fine",
        "HALLUCINATED - wrong dose",
        "Unknown",
        "supported",
    ]);
    let out = run_verification(
        &run.samples,
        &TurnSelection::All,
        &verifier,
        &GenerationConfig::default(),
        &RunControl::none(),
    )
    .await
    .unwrap();
    assert_eq!(out.verdicts.len(), 4);
    assert_eq!(out.verdicts[1].rationale, "wrong dose");
    assert_eq!(out.report.per_turn.get(&2), Some(&25.0));
    assert_eq!(out.report.overall, 25.0);
}
