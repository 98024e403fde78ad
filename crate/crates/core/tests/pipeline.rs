use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use pipediag::backend::{BackendClient, BackendSpec, LlmAgent, SimulatedFn};
use pipediag::error::Error;
use pipediag::pipeline::{
    run_pipeline, run_pipeline_patched, world_pair, InterventionSpec, OracleSet, Payload, PipelineLayout, Provenance,
    Task,
};
use pipediag::prescription::{render_patch, select_pool, CorrectionTriple};

type Log = Arc<Mutex<Vec<(String, String)>>>;

/// Simulated backend that answers in the schema the system prompt asks for
/// and records every (system, user) pair.
fn recording_agent() -> (LlmAgent, Log) {
    let log: Log = Arc::default();
    let sink = log.clone();
    let f: SimulatedFn = Arc::new(move |system, user, seed| {
        sink.lock().unwrap().push((system.to_string(), user.to_string()));
        if system.contains("\"intent\"") {
            format!("{{\"intent\": \"cancel\", \"slots\": {{\"n\": \"{}\"}}}}", user.len())
        } else if system.contains("\"tool\"") {
            format!(
                "{{\"tool\": \"cancel_order\", \"args\": {{\"order_id\": \"#W{}\"}}}}",
                seed % 1000
            )
        } else {
            format!("done {}", user.len())
        }
    });
    let client = BackendClient::new(BackendSpec::simulated("rec"))
        .unwrap()
        .with_simulated(f);
    (LlmAgent::new(client, PipelineLayout::four_stage()), log)
}

fn task() -> Task {
    Task {
        task_id: "t-001".into(),
        user_query: "please cancel my order".into(),
        domain_tag: "retail".into(),
        gold: None,
    }
}

fn oracle() -> OracleSet {
    let mut outputs = BTreeMap::new();
    outputs.insert(1, Payload::text("cancel order #W1"));
    outputs.insert(
        2,
        Payload::Intent {
            intent: "cancel".into(),
            slots: BTreeMap::new(),
        },
    );
    outputs.insert(
        3,
        Payload::ToolCall {
            tool: "cancel_order".into(),
            args: BTreeMap::new(),
        },
    );
    outputs.insert(4, Payload::text("cancelled"));
    OracleSet {
        task_id: "t-001".into(),
        outputs,
    }
}

#[test]
fn same_seed_gives_identical_episode() {
    let (agent, _) = recording_agent();
    let a = run_pipeline(&task(), &agent, &InterventionSpec::none(), None, 9).unwrap();
    let b = run_pipeline(&task(), &agent, &InterventionSpec::none(), None, 9).unwrap();
    assert_eq!(a.to_json_line().unwrap(), b.to_json_line().unwrap());
}

#[test]
fn replacement_reexecutes_only_downstream() {
    let (agent, log) = recording_agent();
    let base = run_pipeline(&task(), &agent, &InterventionSpec::none(), None, 1).unwrap();
    log.lock().unwrap().clear();
    let spec = InterventionSpec::replace(2, oracle().get(2).unwrap().clone());
    let ep = run_pipeline(&task(), &agent, &spec, Some(&base), 1).unwrap();
    assert_eq!(ep.outputs[0], base.outputs[0]);
    assert_eq!(ep.outputs[1].provenance, Provenance::Replaced);
    assert_eq!(ep.outputs[2].provenance, Provenance::Executed);
    // M1 is reused from the baseline, M2 is fixed: only M3 and M4 call out
    assert_eq!(log.lock().unwrap().len(), 2);
}

#[test]
fn frozen_without_baseline_is_an_error() {
    let (agent, _) = recording_agent();
    let mut spec = InterventionSpec::replace(1, Payload::text("x"));
    spec.frozen.insert(3);
    assert!(run_pipeline(&task(), &agent, &spec, None, 1).is_err());
}

#[test]
fn wrong_payload_kind_is_rejected() {
    let (agent, _) = recording_agent();
    let spec = InterventionSpec::replace(3, Payload::text("not a tool call"));
    let base = run_pipeline(&task(), &agent, &InterventionSpec::none(), None, 1).unwrap();
    assert!(run_pipeline(&task(), &agent, &spec, Some(&base), 1).is_err());
}

#[test]
fn world_b_holds_module_at_baseline() {
    let (agent, _) = recording_agent();
    let base = run_pipeline(&task(), &agent, &InterventionSpec::none(), None, 3).unwrap();
    let (a, b) = world_pair(&task(), &agent, &oracle(), 3, &base).unwrap();
    assert_eq!(b.outputs[2].payload, base.outputs[2].payload);
    assert_eq!(a.outputs[0].payload, *oracle().get(1).unwrap());
    assert_eq!(b.outputs[1].payload, *oracle().get(2).unwrap());
    assert!(matches!(
        world_pair(&task(), &agent, &oracle(), 1, &base),
        Err(Error::NoUpstream(1))
    ));
}

#[test]
fn patch_only_changes_target_prompt() {
    let (agent, log) = recording_agent();
    let cands = vec![CorrectionTriple {
        task_id: "d-1".into(),
        module_index: 3,
        input: "query: something".into(),
        wrong: Payload::ToolCall {
            tool: "get_order".into(),
            args: BTreeMap::new(),
        },
        correct: Payload::ToolCall {
            tool: "cancel_order".into(),
            args: BTreeMap::new(),
        },
        severity: 0.95,
    }];
    let patch = render_patch(&select_pool(3, cands, 0.3, 5).unwrap());

    run_pipeline(&task(), &agent, &InterventionSpec::none(), None, 5).unwrap();
    let plain: Vec<_> = std::mem::take(&mut *log.lock().unwrap());
    let ep = run_pipeline_patched(&task(), &agent, &InterventionSpec::none(), None, 5, Some(&patch)).unwrap();
    let patched: Vec<_> = log.lock().unwrap().clone();

    assert_eq!(plain.len(), 4);
    assert_eq!(patched.len(), 4);
    for i in [0, 1, 3] {
        assert_eq!(plain[i].0, patched[i].0, "system prompt of module {} changed", i + 1);
    }
    assert_ne!(plain[2].0, patched[2].0);
    assert!(patched[2].0.starts_with(&plain[2].0));
    assert!(patched[2].0.contains("### Example 1"));
    assert_eq!(ep.patch.unwrap().pool_hash, patch.pool_hash);
}
