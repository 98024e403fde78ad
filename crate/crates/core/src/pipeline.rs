//! k-module chain execution with output replacement (do) and freezing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prescription::PatchSpec;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    Text,
    IntentLabel,
    ToolCall,
}

impl fmt::Display for OutputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputKind::Text => "text",
            OutputKind::IntentLabel => "intent-label",
            OutputKind::ToolCall => "tool-call",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSlot {
    pub index: usize,
    pub name: String,
    pub output_kind: OutputKind,
}

/// Ordered slots of a pipeline. Indices are 1-based and contiguous.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineLayout {
    slots: Vec<ModuleSlot>,
}

impl PipelineLayout {
    pub fn new(slots: Vec<ModuleSlot>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::InvalidLayout("no slots".into()));
        }
        for (pos, slot) in slots.iter().enumerate() {
            if slot.index != pos + 1 {
                return Err(Error::InvalidLayout(format!(
                    "slot at position {} has index {}, expected {}",
                    pos,
                    slot.index,
                    pos + 1
                )));
            }
        }
        Ok(Self { slots })
    }

    /// query-rewrite → planner → router → response.
    pub fn four_stage() -> Self {
        let mk = |index, name: &str, output_kind| ModuleSlot {
            index,
            name: name.to_string(),
            output_kind,
        };
        Self {
            slots: vec![
                mk(1, "query-rewrite", OutputKind::Text),
                mk(2, "planner", OutputKind::IntentLabel),
                mk(3, "router", OutputKind::ToolCall),
                mk(4, "response", OutputKind::Text),
            ],
        }
    }

    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[ModuleSlot] {
        &self.slots
    }

    pub fn slot(&self, index: usize) -> Result<&ModuleSlot> {
        if index == 0 || index > self.slots.len() {
            return Err(Error::IndexOutOfRange {
                index,
                k: self.slots.len(),
            });
        }
        Ok(&self.slots[index - 1])
    }

    /// First slot producing the given kind, if any.
    pub fn first_of_kind(&self, kind: OutputKind) -> Option<usize> {
        self.slots.iter().find(|s| s.output_kind == kind).map(|s| s.index)
    }
}

/// Tagged module payload. Serialized untagged; the variants have disjoint
/// field names so they round-trip unambiguously.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Intent {
        intent: String,
        slots: BTreeMap<String, String>,
    },
    ToolCall {
        tool: String,
        args: BTreeMap<String, String>,
    },
    Text {
        text: String,
    },
}

impl Payload {
    pub fn text(s: impl Into<String>) -> Self {
        Payload::Text { text: s.into() }
    }

    pub fn kind(&self) -> OutputKind {
        match self {
            Payload::Text { .. } => OutputKind::Text,
            Payload::Intent { .. } => OutputKind::IntentLabel,
            Payload::ToolCall { .. } => OutputKind::ToolCall,
        }
    }

    /// Flat text rendering used for bag-of-words comparisons and prompts.
    pub fn render(&self) -> String {
        fn kv(map: &BTreeMap<String, String>) -> String {
            map.iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" ")
        }
        match self {
            Payload::Text { text } => text.clone(),
            Payload::Intent { intent, slots } => format!("{intent} {}", kv(slots)).trim().to_string(),
            Payload::ToolCall { tool, args } => format!("{tool} {}", kv(args)).trim().to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Executed,
    Replaced,
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleOutput {
    pub index: usize,
    pub kind: OutputKind,
    pub payload: Payload,
    pub provenance: Provenance,
}

/// do(M_i = v) replacements plus frozen modules.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSpec {
    #[serde(default)]
    pub replacements: BTreeMap<usize, Payload>,
    #[serde(default)]
    pub frozen: BTreeSet<usize>,
}

impl InterventionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn replace(index: usize, payload: Payload) -> Self {
        let mut spec = Self::default();
        spec.replacements.insert(index, payload);
        spec
    }

    pub fn is_empty(&self) -> bool {
        self.replacements.is_empty() && self.frozen.is_empty()
    }

    /// Lowest intervened index, if any.
    pub fn frontier(&self) -> Option<usize> {
        let r = self.replacements.keys().next().copied();
        let f = self.frozen.iter().next().copied();
        match (r, f) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn validate(&self, layout: &PipelineLayout, has_baseline: bool) -> Result<()> {
        for (&index, payload) in &self.replacements {
            let slot = layout.slot(index)?;
            if payload.kind() != slot.output_kind {
                return Err(Error::TypeMismatch {
                    index,
                    expected: slot.output_kind.to_string(),
                    found: payload.kind().to_string(),
                });
            }
            if self.frozen.contains(&index) {
                return Err(Error::InterventionConflict { index });
            }
        }
        for &index in &self.frozen {
            layout.slot(index)?;
            if !has_baseline {
                return Err(Error::FrozenWithoutBaseline { index });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub user_query: String,
    pub domain_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<OracleSet>,
}

/// Per-stage gold outputs S*_i for one task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleSet {
    pub task_id: String,
    pub outputs: BTreeMap<usize, Payload>,
}

impl OracleSet {
    pub fn get(&self, index: usize) -> Result<&Payload> {
        self.outputs.get(&index).ok_or_else(|| Error::MissingOracle {
            task_id: self.task_id.clone(),
            index,
        })
    }

    pub fn covers(&self, layout: &PipelineLayout) -> Result<()> {
        for slot in layout.slots() {
            self.get(slot.index)?;
        }
        Ok(())
    }
}

/// Source of per-task oracle sets, such as a sealed cache or a live model.
pub trait OracleSource: Send + Sync {
    fn oracle_for(&self, task: &Task) -> Result<OracleSet>;
}

impl OracleSource for BTreeMap<String, OracleSet> {
    fn oracle_for(&self, task: &Task) -> Result<OracleSet> {
        self.get(&task.task_id).cloned().ok_or_else(|| Error::MissingOracle {
            task_id: task.task_id.clone(),
            index: 0,
        })
    }
}

/// Marker recorded on episodes that ran with a prompt patch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMark {
    pub target: usize,
    pub pool_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: String,
    pub seed: u64,
    pub backend_tag: String,
    pub intervention: InterventionSpec,
    pub outputs: Vec<ModuleOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<PatchMark>,
}

impl Episode {
    pub fn payload(&self, index: usize) -> Result<&Payload> {
        self.outputs
            .get(index.wrapping_sub(1))
            .map(|o| &o.payload)
            .ok_or(Error::IndexOutOfRange {
                index,
                k: self.outputs.len(),
            })
    }

    pub fn payloads(&self) -> Vec<Payload> {
        self.outputs.iter().map(|o| o.payload.clone()).collect()
    }

    /// Canonical one-line JSON form.
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Everything a module sees when it runs.
pub struct ModuleCall<'a> {
    pub task: &'a Task,
    pub slot: &'a ModuleSlot,
    /// Outputs of modules 1..index-1, in order.
    pub upstream: &'a [Payload],
    pub seed: u64,
    /// Correction patch, present only on the patched module.
    pub patch: Option<&'a PatchSpec>,
}

impl ModuleCall<'_> {
    pub fn input_text(&self) -> String {
        module_input_text(self.task, self.upstream)
    }
}

/// Text a module sees as input: the user query followed by upstream
/// renderings.
pub fn module_input_text(task: &Task, upstream: &[Payload]) -> String {
    let mut out = format!("query: {}", task.user_query);
    for (i, p) in upstream.iter().enumerate() {
        out.push_str(&format!(" | M{}: {}", i + 1, p.render()));
    }
    out
}

/// A set of module backends serving one pipeline.
pub trait Agent: Send + Sync {
    fn layout(&self) -> &PipelineLayout;

    fn backend_tag(&self) -> String;

    /// Whether episodes may run concurrently against this agent.
    fn concurrent(&self) -> bool {
        true
    }

    fn execute(&self, call: &ModuleCall<'_>) -> std::result::Result<Payload, String>;
}

pub fn run_pipeline(
    task: &Task,
    agent: &dyn Agent,
    intervention: &InterventionSpec,
    baseline: Option<&Episode>,
    seed: u64,
) -> Result<Episode> {
    run_pipeline_patched(task, agent, intervention, baseline, seed, None)
}

/// Runs the chain. Modules upstream of the intervention frontier copy the
/// baseline when one is given; replaced and frozen modules emit their
/// fixed payloads; everything else executes on the current upstream.
pub fn run_pipeline_patched(
    task: &Task,
    agent: &dyn Agent,
    intervention: &InterventionSpec,
    baseline: Option<&Episode>,
    seed: u64,
    patch: Option<&PatchSpec>,
) -> Result<Episode> {
    let layout = agent.layout();
    let k = layout.k();
    intervention.validate(layout, baseline.is_some())?;
    if let Some(b) = baseline {
        if b.task_id != task.task_id {
            return Err(Error::BaselineMismatch(format!(
                "baseline task {} vs run task {}",
                b.task_id, task.task_id
            )));
        }
        if b.outputs.len() != k {
            return Err(Error::BaselineMismatch(format!(
                "baseline has {} outputs, pipeline has {k}",
                b.outputs.len()
            )));
        }
    }
    if let Some(p) = patch {
        layout.slot(p.target)?;
    }

    let mut frontier = intervention.frontier().unwrap_or(k + 1);
    if let Some(p) = patch {
        frontier = frontier.min(p.target);
    }

    let mut outputs: Vec<ModuleOutput> = Vec::with_capacity(k);
    let mut upstream: Vec<Payload> = Vec::with_capacity(k);
    for slot in layout.slots() {
        let index = slot.index;
        let out = if let Some(v) = intervention.replacements.get(&index) {
            ModuleOutput {
                index,
                kind: slot.output_kind,
                payload: v.clone(),
                provenance: Provenance::Replaced,
            }
        } else if intervention.frozen.contains(&index) {
            let b = baseline.ok_or(Error::FrozenWithoutBaseline { index })?;
            ModuleOutput {
                index,
                kind: slot.output_kind,
                payload: b.outputs[index - 1].payload.clone(),
                provenance: Provenance::Frozen,
            }
        } else if let (true, Some(b)) = (index < frontier, baseline) {
            b.outputs[index - 1].clone()
        } else {
            let call = ModuleCall {
                task,
                slot,
                upstream: &upstream,
                seed: seed::module_seed(seed, &task.task_id, index),
                patch: patch.filter(|p| p.target == index),
            };
            let payload = agent
                .execute(&call)
                .map_err(|message| Error::Backend { index, message })?;
            if payload.kind() != slot.output_kind {
                return Err(Error::TypeMismatch {
                    index,
                    expected: slot.output_kind.to_string(),
                    found: payload.kind().to_string(),
                });
            }
            ModuleOutput {
                index,
                kind: slot.output_kind,
                payload,
                provenance: Provenance::Executed,
            }
        };
        upstream.push(out.payload.clone());
        outputs.push(out);
    }

    Ok(Episode {
        task_id: task.task_id.clone(),
        seed,
        backend_tag: agent.backend_tag(),
        intervention: intervention.clone(),
        outputs,
        patch: patch.map(|p| PatchMark {
            target: p.target,
            pool_hash: p.pool_hash.clone(),
        }),
    })
}

/// The two mediation worlds for module `i`: A refreshes M_i on oracle
/// upstream, B holds M_i at its baseline output. Both re-execute M_{>i}.
pub fn world_pair(
    task: &Task,
    agent: &dyn Agent,
    oracle: &OracleSet,
    i: usize,
    baseline: &Episode,
) -> Result<(Episode, Episode)> {
    if i < 2 {
        return Err(Error::NoUpstream(i));
    }
    agent.layout().slot(i)?;
    let mut a = InterventionSpec::none();
    for j in 1..i {
        a.replacements.insert(j, oracle.get(j)?.clone());
    }
    let mut b = a.clone();
    b.frozen.insert(i);
    let world_a = run_pipeline(task, agent, &a, Some(baseline), baseline.seed)?;
    let world_b = run_pipeline(task, agent, &b, Some(baseline), baseline.seed)?;
    Ok((world_a, world_b))
}
