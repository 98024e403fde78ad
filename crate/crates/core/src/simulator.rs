//! Synthetic four-stage agent with a tunable coupling between the router's
//! argument convention and the responder's decoder.
//!
//! Each task carries one contract draw `u`. The router/responder pair is
//! co-adapted on that task when `u < κ`: the router then copies the surface
//! form leaked by the rewriter into its arguments, and the responder decodes
//! that form. Because `u` is fixed per task, raising κ only ever adds
//! contract tasks.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnosis::{self, DiagnosisSummary, FateCensus, TaskDiagnosis, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::pipeline::{
    run_pipeline, Agent, Episode, InterventionSpec, ModuleCall, OracleSet, OracleSource, Payload, PipelineLayout, Task,
};
use crate::prescription::{
    build_pools, compensator_rate, BaselineRecord, Configuration, ConfigurationResult, ConfigurationSummary,
    CorrectionPool, Prescriber, RoutingStats, DEFAULT_POOL_K, DEFAULT_TAU_DEMO, DEFAULT_Z_THR,
};
use crate::scoring::RubricJudge;
use crate::seed;
use crate::stats::{
    cascade_shift, comparison_family, correlation, wilcoxon_signed_rank, CorrelationKind, PairedSample, ShiftTable,
    StatReport, WilcoxonMode, WilcoxonResult,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    RetailLike,
    AirlineLike,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::RetailLike => "retail-like",
            Domain::AirlineLike => "airline-like",
        }
    }

    fn spec(self) -> &'static DomainSpec {
        match self {
            Domain::RetailLike => &RETAIL,
            Domain::AirlineLike => &AIRLINE,
        }
    }

    pub fn intents(self) -> &'static [&'static str] {
        self.spec().intents
    }

    pub fn tools(self) -> &'static [&'static str] {
        self.spec().tools
    }

    pub fn intent_index(self, intent: &str) -> Option<usize> {
        self.intents().iter().position(|i| *i == intent)
    }

    pub fn tool_index(self, tool: &str) -> Option<usize> {
        self.tools().iter().position(|t| *t == tool)
    }

    /// Intents (and, through the tool table, tools) a module may confuse
    /// with the one at `idx`.
    pub fn neighbours(self, idx: usize) -> &'static [usize] {
        self.spec().adjacency[idx]
    }

    /// Multiplier on the planner, router and responder error rates.
    pub fn difficulty(self) -> f64 {
        self.spec().difficulty
    }
}

struct DomainSpec {
    intents: &'static [&'static str],
    tools: &'static [&'static str],
    adjacency: &'static [&'static [usize]],
    verbs: &'static [&'static str],
    detail_keys: &'static [&'static str],
    requests: &'static [&'static str],
    id_prefix: &'static str,
    nouns: &'static [&'static str],
    difficulty: f64,
}

static RETAIL: DomainSpec = DomainSpec {
    intents: &["cancel", "modify-items", "modify-address", "exchange", "return"],
    tools: &[
        "cancel_pending_order",
        "modify_pending_order_items",
        "modify_pending_order_address",
        "exchange_delivered_order_items",
        "return_delivered_order_items",
    ],
    adjacency: &[&[1], &[0, 2], &[1], &[4], &[3]],
    verbs: &[
        "cancelled",
        "changed the items for",
        "updated the address for",
        "exchanged",
        "returned",
    ],
    detail_keys: &["reason", "new_item", "address", "new_item", "refund_method"],
    requests: &[
        "cancel",
        "swap out",
        "change the delivery address for",
        "exchange",
        "return",
    ],
    id_prefix: "W",
    nouns: &[
        "wallet",
        "backpack",
        "keyboard",
        "lamp",
        "kettle",
        "headphones",
        "jacket",
        "sneakers",
        "watch",
        "blender",
    ],
    difficulty: 1.0,
};

static AIRLINE: DomainSpec = DomainSpec {
    intents: &[
        "cancel-reservation",
        "change-flight",
        "change-baggage",
        "change-passengers",
        "book-reservation",
    ],
    tools: &[
        "cancel_reservation",
        "update_reservation_flights",
        "update_reservation_baggages",
        "update_reservation_passengers",
        "book_reservation",
    ],
    adjacency: &[&[1, 4], &[0, 2, 3, 4], &[1, 3], &[1, 2], &[0, 1]],
    verbs: &[
        "cancelled",
        "moved the flight for",
        "updated the baggage for",
        "updated the passengers for",
        "booked",
    ],
    detail_keys: &["reason", "new_flight", "bag_count", "passenger", "cabin"],
    requests: &[
        "cancel",
        "move to another flight",
        "add bags to",
        "change the traveller on",
        "book",
    ],
    id_prefix: "R",
    nouns: &["fare", "itinerary", "ticket", "seat", "segment", "booking"],
    difficulty: 1.5,
};

const ADJECTIVES: &[&str] = &[
    "blue",
    "black",
    "leather",
    "wireless",
    "compact",
    "vintage",
    "red",
    "steel",
    "canvas",
    "large",
    "flexible",
    "refundable",
];

const DETAIL_VALUES: &[&str] = &[
    "no longer needed",
    "ordered by mistake",
    "42 elm street",
    "gift card",
    "original payment",
    "morning departure",
    "two bags",
    "business cabin",
];

pub const OMISSION_TEXT: &str = "Sorry, I was unable to complete that request.";
pub const NOT_FOUND_TEXT: &str = "I could not locate the order or item you mentioned.";

/// Knobs of the synthetic agent. Every rate is a probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticAgentConfig {
    pub domain: Domain,
    pub seed: u64,
    /// Share of tasks whose router/responder pair is co-adapted.
    pub kappa: f64,
    /// Rewriter keeps the user's surface form (order-id sigil).
    pub m1_surface_rate: f64,
    /// Of those leaks, the share that also copies item adjectives verbatim.
    pub m1_verbatim_share: f64,
    pub m2_intent_flip_rate: f64,
    /// Extra flip probability when the rewrite carries verbatim adjectives.
    pub upstream_flip_gain: f64,
    pub m3_tool_confusion_rate: f64,
    /// Off-contract probability of name-form instead of id-form arguments.
    pub m3_arg_format_rate: f64,
    pub m4_omission_rate: f64,
    /// Probability the responder phrases its reply after the planner's
    /// intent when planner and router disagree.
    pub context_sharing: f64,
    /// Per-correction probability that a patched module adopts the lesson.
    pub p_adopt: f64,
    /// Per-stage corruption rate of the degraded routing oracle.
    pub routing_corruption: f64,
    pub n_diag: usize,
    pub n_presc: usize,
    pub tau_demo: f64,
    pub k: usize,
}

impl Default for SyntheticAgentConfig {
    fn default() -> Self {
        Self {
            domain: Domain::RetailLike,
            seed: 20_240_611,
            kappa: 0.9,
            m1_surface_rate: 0.95,
            m1_verbatim_share: 0.25,
            m2_intent_flip_rate: 0.10,
            upstream_flip_gain: 0.10,
            m3_tool_confusion_rate: 0.04,
            m3_arg_format_rate: 0.8,
            m4_omission_rate: 0.05,
            context_sharing: 0.1,
            p_adopt: 0.8,
            routing_corruption: 0.15,
            n_diag: 500,
            n_presc: 200,
            tau_demo: DEFAULT_TAU_DEMO,
            k: DEFAULT_POOL_K,
        }
    }
}

impl SyntheticAgentConfig {
    pub fn with_kappa(&self, kappa: f64) -> Self {
        Self { kappa, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("kappa", self.kappa),
            ("m1_surface_rate", self.m1_surface_rate),
            ("m1_verbatim_share", self.m1_verbatim_share),
            ("m2_intent_flip_rate", self.m2_intent_flip_rate),
            ("upstream_flip_gain", self.upstream_flip_gain),
            ("m3_tool_confusion_rate", self.m3_tool_confusion_rate),
            ("m3_arg_format_rate", self.m3_arg_format_rate),
            ("m4_omission_rate", self.m4_omission_rate),
            ("context_sharing", self.context_sharing),
            ("p_adopt", self.p_adopt),
            ("routing_corruption", self.routing_corruption),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name}: {v} is not in [0, 1]")));
            }
        }
        if !(self.tau_demo > 0.0 && self.tau_demo < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau_demo: {} is not in (0, 1)",
                self.tau_demo
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k: must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses a JSON config; unknown fields are rejected and every field
    /// defaults when absent.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn scaled(&self, rate: f64) -> f64 {
        (rate * self.domain.difficulty()).min(1.0)
    }
}

/// A generated task with both argument renderings of its gold call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    pub domain: Domain,
    pub gold_intent: String,
    pub gold_tool: String,
    /// Canonical order id, without the user's sigil.
    pub order_id: String,
    pub item_id: String,
    pub item_noun: String,
    /// Full item name as the user wrote it (adjectives plus noun).
    pub item_name: String,
    pub detail: String,
    pub query_text: String,
}

impl SyntheticTask {
    pub fn intent_index(&self) -> usize {
        self.domain.intent_index(&self.gold_intent).expect("generated intent")
    }

    pub fn id_form_args(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("order_id".to_string(), self.order_id.clone()),
            ("item_id".to_string(), self.item_id.clone()),
        ])
    }

    pub fn name_form_args(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("order_id".to_string(), format!("#{}", self.order_id)),
            ("item".to_string(), self.item_name.clone()),
        ])
    }

    fn hybrid_args(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("order_id".to_string(), self.order_id.clone()),
            ("item_id".to_string(), self.item_name.replace(' ', "-")),
        ])
    }

    pub fn canonical_rewrite(&self) -> String {
        format!("{}: order {} item {}", self.gold_intent, self.order_id, self.item_noun)
    }

    pub fn oracle(&self) -> OracleSet {
        let idx = self.intent_index();
        let spec = self.domain.spec();
        OracleSet {
            task_id: self.task_id.clone(),
            outputs: BTreeMap::from([
                (1, Payload::text(self.canonical_rewrite())),
                (
                    2,
                    Payload::Intent {
                        intent: self.gold_intent.clone(),
                        slots: planner_slots(self, idx),
                    },
                ),
                (
                    3,
                    Payload::ToolCall {
                        tool: spec.tools[idx].to_string(),
                        args: self.id_form_args(),
                    },
                ),
                (
                    4,
                    Payload::text(response_text(self.domain, idx, &self.order_id, &self.item_id)),
                ),
            ]),
        }
    }

    pub fn to_task(&self) -> Task {
        Task {
            task_id: self.task_id.clone(),
            user_query: self.query_text.clone(),
            domain_tag: self.domain.tag().to_string(),
            gold: Some(self.oracle()),
        }
    }
}

fn planner_slots(task: &SyntheticTask, intent: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("order_id".to_string(), task.order_id.clone()),
        ("item_id".to_string(), task.item_id.clone()),
        (task.domain.spec().detail_keys[intent].to_string(), task.detail.clone()),
    ])
}

fn response_text(domain: Domain, intent: usize, order_id: &str, item_id: &str) -> String {
    format!(
        "Done. I have {} item {item_id} on order {order_id}.",
        domain.spec().verbs[intent]
    )
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &'a [&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

/// Deterministic task catalogue. Intents cycle so every label appears
/// within any window of five tasks.
pub fn generate_tasks(n: usize, domain: Domain, seed: u64) -> Result<Vec<SyntheticTask>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let spec = domain.spec();
    let mut rng = seed::rng(seed::derive(seed, &["tasks", domain.tag()]));
    let tag = format!("{:08x}", seed::derive(seed, &["task-id"]) as u32);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let intent = (i + rng.gen_range(0..spec.intents.len())) % spec.intents.len();
        let noun = pick(&mut rng, spec.nouns);
        let a1 = pick(&mut rng, ADJECTIVES);
        let a2 = loop {
            let a = pick(&mut rng, ADJECTIVES);
            if a != a1 {
                break a;
            }
        };
        let item_name = format!("{a1} {a2} {noun}");
        let order_id = format!("{}{:07}", spec.id_prefix, rng.gen_range(1_000_000..10_000_000u32));
        let item_id = format!("{:010}", rng.gen_range(1_000_000_000u64..10_000_000_000));
        let detail = pick(&mut rng, DETAIL_VALUES).to_string();
        let opener = pick(&mut rng, &["Hi,", "Hello,", "Hey there,", "Good morning,"]);
        let query_text = format!(
            "{opener} I would like to {} the {item_name} on order #{order_id}. Details: {detail}.",
            spec.requests[intent]
        );
        out.push(SyntheticTask {
            task_id: format!("{}-{tag}-{i:04}", domain.tag()),
            domain,
            gold_intent: spec.intents[intent].to_string(),
            gold_tool: spec.tools[intent].to_string(),
            order_id,
            item_id,
            item_noun: noun.to_string(),
            item_name,
            detail,
            query_text,
        });
    }
    Ok(out)
}

/// Lessons a patched module takes away from the examples it adopted.
#[derive(Default)]
struct Lessons {
    adopted: Vec<usize>,
    intent_pairs: BTreeSet<(String, String)>,
    tool_pairs: BTreeSet<(String, String)>,
    name_form_seen: bool,
    omission_seen: bool,
    not_found_seen: bool,
}

/// The synthetic module set.
pub struct SimAgent {
    config: SyntheticAgentConfig,
    layout: PipelineLayout,
    catalog: BTreeMap<String, SyntheticTask>,
}

impl SimAgent {
    pub fn new(config: SyntheticAgentConfig, tasks: &[SyntheticTask]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            layout: PipelineLayout::four_stage(),
            catalog: tasks.iter().map(|t| (t.task_id.clone(), t.clone())).collect(),
        })
    }

    pub fn config(&self) -> &SyntheticAgentConfig {
        &self.config
    }

    /// Registers more tasks (e.g. the prescription split).
    pub fn extend(&mut self, tasks: &[SyntheticTask]) {
        for t in tasks {
            self.catalog.insert(t.task_id.clone(), t.clone());
        }
    }

    fn lookup(&self, task: &Task) -> std::result::Result<&SyntheticTask, String> {
        self.catalog
            .get(&task.task_id)
            .ok_or_else(|| format!("task {} is not in the simulator catalogue", task.task_id))
    }

    /// Uniform draw fixed per (agent seed, task); the pair is co-adapted on
    /// this task iff the draw falls below κ.
    pub fn contract_draw(&self, task_id: &str) -> f64 {
        seed::rng(seed::derive(self.config.seed, &["contract", task_id])).gen()
    }

    pub fn is_contract(&self, task_id: &str) -> bool {
        self.contract_draw(task_id) < self.config.kappa
    }

    fn lessons(&self, call: &ModuleCall<'_>) -> Lessons {
        let mut l = Lessons::default();
        let Some(patch) = call.patch else {
            return l;
        };
        for (j, ex) in patch.examples.iter().enumerate() {
            let u: f64 = seed::rng(seed::derive(call.seed, &["adopt", &j.to_string()])).gen();
            if u >= self.config.p_adopt {
                continue;
            }
            l.adopted.push(j);
            match (&ex.wrong, &ex.correct) {
                (Payload::Intent { intent: w, .. }, Payload::Intent { intent: c, .. }) => {
                    l.intent_pairs.insert((c.clone(), w.clone()));
                }
                (Payload::ToolCall { tool: w, args }, Payload::ToolCall { tool: c, .. }) => {
                    if w != c {
                        l.tool_pairs.insert((c.clone(), w.clone()));
                    }
                    if args.contains_key("item") {
                        l.name_form_seen = true;
                    }
                }
                (Payload::Text { text }, _) => {
                    if text == OMISSION_TEXT {
                        l.omission_seen = true;
                    }
                    if text == NOT_FOUND_TEXT {
                        l.not_found_seen = true;
                    }
                }
                _ => {}
            }
        }
        l
    }

    fn rewrite(&self, t: &SyntheticTask, call: &ModuleCall<'_>) -> Payload {
        let mut rng = seed::rng(call.seed);
        let u_leak: f64 = rng.gen();
        let u_verbatim: f64 = rng.gen();
        let lessons = self.lessons(call);
        if !lessons.adopted.is_empty() || u_leak >= self.config.m1_surface_rate {
            return Payload::text(t.canonical_rewrite());
        }
        let item = if u_verbatim < self.config.m1_verbatim_share {
            &t.item_name
        } else {
            &t.item_noun
        };
        Payload::text(format!("{}: order #{} item {item}", t.gold_intent, t.order_id))
    }

    fn plan(&self, t: &SyntheticTask, call: &ModuleCall<'_>) -> std::result::Result<Payload, String> {
        let mut rng = seed::rng(call.seed);
        let u_flip: f64 = rng.gen();
        let u_pick: f64 = rng.gen();
        let rewrite = match call.upstream.first() {
            Some(Payload::Text { text }) => text.as_str(),
            _ => return Err("planner expects a text rewrite upstream".into()),
        };
        let read = rewrite.split(':').next().unwrap_or_default().trim();
        let true_idx = t.domain.intent_index(read).unwrap_or_else(|| t.intent_index());
        let verbatim = rewrite.contains(&t.item_name);
        let rate = self.config.scaled(self.config.m2_intent_flip_rate)
            + if verbatim { self.config.upstream_flip_gain } else { 0.0 };
        let mut idx = true_idx;
        if u_flip < rate.min(1.0) {
            let nb = t.domain.neighbours(true_idx);
            let flipped = nb[((u_pick * nb.len() as f64) as usize).min(nb.len() - 1)];
            let intents = t.domain.intents();
            let pair = (intents[true_idx].to_string(), intents[flipped].to_string());
            if !self.lessons(call).intent_pairs.contains(&pair) {
                idx = flipped;
            }
        }
        Ok(Payload::Intent {
            intent: t.domain.intents()[idx].to_string(),
            slots: planner_slots(t, idx),
        })
    }

    fn route(&self, t: &SyntheticTask, call: &ModuleCall<'_>) -> std::result::Result<Payload, String> {
        let mut rng = seed::rng(call.seed);
        let u_conf: f64 = rng.gen();
        let u_pick: f64 = rng.gen();
        let u_fmt: f64 = rng.gen();
        let (rewrite, intent) = match call.upstream {
            [Payload::Text { text }, Payload::Intent { intent, .. }, ..] => (text, intent),
            _ => return Err("router expects a rewrite and a plan upstream".into()),
        };
        let idx = t
            .domain
            .intent_index(intent)
            .ok_or_else(|| format!("unknown intent {intent}"))?;
        let lessons = self.lessons(call);
        let tools = t.domain.tools();
        let mut tool = idx;
        if u_conf < self.config.scaled(self.config.m3_tool_confusion_rate) {
            let nb = t.domain.neighbours(idx);
            let confused = nb[((u_pick * nb.len() as f64) as usize).min(nb.len() - 1)];
            if !lessons
                .tool_pairs
                .contains(&(tools[idx].to_string(), tools[confused].to_string()))
            {
                tool = confused;
            }
        }
        let contract = self.is_contract(&t.task_id);
        let name_form = if contract {
            rewrite.contains('#')
        } else {
            u_fmt < self.config.m3_arg_format_rate
        };
        let args = match (name_form, lessons.name_form_seen, contract) {
            (false, _, _) => t.id_form_args(),
            (true, false, _) => t.name_form_args(),
            // the lesson pushes a co-adapted router off its convention
            // without landing on the canonical one
            (true, true, true) => t.hybrid_args(),
            (true, true, false) => t.id_form_args(),
        };
        Ok(Payload::ToolCall {
            tool: tools[tool].to_string(),
            args,
        })
    }

    fn respond(&self, t: &SyntheticTask, call: &ModuleCall<'_>) -> std::result::Result<Payload, String> {
        let mut rng = seed::rng(call.seed);
        let u_omit: f64 = rng.gen();
        let u_ctx: f64 = rng.gen();
        let (plan_intent, tool, args) = match call.upstream {
            [_, Payload::Intent { intent, .. }, Payload::ToolCall { tool, args }, ..] => (intent, tool, args),
            _ => return Err("responder expects a plan and a tool call upstream".into()),
        };
        let lessons = self.lessons(call);
        if u_omit < self.config.scaled(self.config.m4_omission_rate) && !lessons.omission_seen {
            return Ok(Payload::text(OMISSION_TEXT));
        }
        let decodes_names = self.is_contract(&t.task_id) || lessons.not_found_seen;
        let by_id = args.get("item_id") == Some(&t.item_id) && args.get("order_id") == Some(&t.order_id);
        let by_name = decodes_names
            && args.get("item") == Some(&t.item_name)
            && args.get("order_id").map(|o| o.trim_start_matches('#')) == Some(t.order_id.as_str());
        let ids = (by_id || by_name).then_some((t.order_id.as_str(), t.item_id.as_str()));
        let (Some((order_id, item_id)), Some(tool_idx)) = (ids, t.domain.tool_index(tool)) else {
            return Ok(Payload::text(NOT_FOUND_TEXT));
        };
        let mut phrase = tool_idx;
        if let Some(p) = t.domain.intent_index(plan_intent) {
            if p != tool_idx && u_ctx < self.config.context_sharing {
                phrase = p;
            }
        }
        Ok(Payload::text(response_text(t.domain, phrase, order_id, item_id)))
    }
}

impl Agent for SimAgent {
    fn layout(&self) -> &PipelineLayout {
        &self.layout
    }

    fn backend_tag(&self) -> String {
        format!("simulated:{}:kappa={}", self.config.domain.tag(), self.config.kappa)
    }

    fn execute(&self, call: &ModuleCall<'_>) -> std::result::Result<Payload, String> {
        let t = self.lookup(call.task)?;
        match call.slot.index {
            1 => Ok(self.rewrite(t, call)),
            2 => self.plan(t, call),
            3 => self.route(t, call),
            4 => self.respond(t, call),
            i => Err(format!("the simulator has no module {i}")),
        }
    }
}

/// Strong oracle backed by the gold outputs carried on each task.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaskGold;

impl OracleSource for TaskGold {
    fn oracle_for(&self, task: &Task) -> Result<OracleSet> {
        task.gold.clone().ok_or_else(|| Error::MissingOracle {
            task_id: task.task_id.clone(),
            index: 0,
        })
    }
}

/// Cheap routing oracle: each gold stage is corrupted independently.
#[derive(Clone, Debug)]
pub struct DegradedOracle {
    pub domain: Domain,
    pub rate: f64,
    pub seed: u64,
    /// Gold sets by task id; tasks not listed fall back to their own gold.
    gold: BTreeMap<String, OracleSet>,
}

impl DegradedOracle {
    pub fn new(domain: Domain, rate: f64, seed: u64, catalog: &[SyntheticTask]) -> Self {
        Self {
            domain,
            rate,
            seed,
            gold: catalog.iter().map(|t| (t.task_id.clone(), t.oracle())).collect(),
        }
    }

    fn corrupt(&self, task_id: &str, index: usize, gold: &Payload) -> Payload {
        let mut rng = seed::rng(seed::derive(
            self.seed,
            &["routing-oracle", task_id, &index.to_string()],
        ));
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        if u >= self.rate {
            return gold.clone();
        }
        let neighbour = |idx: usize| {
            let nb = self.domain.neighbours(idx);
            nb[((v * nb.len() as f64) as usize).min(nb.len() - 1)]
        };
        match gold {
            Payload::Text { text } if index == 1 => Payload::text(text.replacen("order ", "order #", 1)),
            Payload::Text { .. } => Payload::text(OMISSION_TEXT),
            Payload::Intent { intent, slots } => match self.domain.intent_index(intent) {
                Some(i) => Payload::Intent {
                    intent: self.domain.intents()[neighbour(i)].to_string(),
                    slots: slots.clone(),
                },
                None => gold.clone(),
            },
            Payload::ToolCall { tool, args } => match self.domain.tool_index(tool) {
                Some(i) => Payload::ToolCall {
                    tool: self.domain.tools()[neighbour(i)].to_string(),
                    args: args.clone(),
                },
                None => gold.clone(),
            },
        }
    }
}

impl OracleSource for DegradedOracle {
    fn oracle_for(&self, task: &Task) -> Result<OracleSet> {
        let gold = match self.gold.get(&task.task_id) {
            Some(g) => g.clone(),
            None => TaskGold.oracle_for(task)?,
        };
        Ok(OracleSet {
            task_id: gold.task_id.clone(),
            outputs: gold
                .outputs
                .iter()
                .map(|(&i, p)| (i, self.corrupt(&task.task_id, i, p)))
                .collect(),
        })
    }
}

/// Split seeds; the diagnosis and prescription catalogues never share ids.
pub fn split_seeds(seed: u64) -> (u64, u64) {
    (
        seed::derive(seed, &["split", "diag"]),
        seed::derive(seed, &["split", "presc"]),
    )
}

/// Baseline episodes for a catalogue, one per task under `run_seed`.
pub fn run_baselines(agent: &SimAgent, tasks: &[Task], run_seed: u64, jobs: usize) -> Result<Vec<Episode>> {
    crate::par::map_ordered(tasks, true, jobs, |t| {
        run_pipeline(t, agent, &InterventionSpec::none(), None, run_seed)
    })
}

/// Settings of a paradox run that are not agent behaviour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParadoxSpec {
    pub tau: f64,
    pub tau_sweep: Vec<f64>,
    pub z_thr: f64,
    pub jobs: usize,
    pub configurations: Vec<String>,
}

impl Default for ParadoxSpec {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            tau_sweep: vec![0.01, 0.05, 0.10, 0.20],
            z_thr: DEFAULT_Z_THR,
            jobs: 1,
            configurations: [
                "baseline",
                "popccp@M1",
                "popccp@M2",
                "popccp@M3",
                "popccp@M4",
                "oracle@M3",
                "adaptive-zscore",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineValidity {
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub mean_f_match: f64,
    pub mean_f_mismatch: f64,
    pub tool_match_rate: f64,
}

/// F against the tool-match indicator on the baseline of a split.
pub fn baseline_validity(baselines: &[BaselineRecord]) -> Result<BaselineValidity> {
    let f: Vec<f64> = baselines.iter().map(|b| b.f).collect();
    let m: Vec<f64> = baselines.iter().map(|b| f64::from(u8::from(b.tool_match))).collect();
    let (r, p) = correlation(&f, &m, CorrelationKind::Pearson)?;
    let mean = |want: bool| {
        let v: Vec<f64> = baselines.iter().filter(|b| b.tool_match == want).map(|b| b.f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(BaselineValidity {
        pearson_r: r,
        pearson_p: p,
        mean_f_match: mean(true),
        mean_f_mismatch: mean(false),
        tool_match_rate: m.iter().sum::<f64>() / m.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParadoxReport {
    pub config: SyntheticAgentConfig,
    pub spec: ParadoxSpec,
    pub diagnosis: DiagnosisSummary,
    /// Census at the primary τ.
    pub census: FateCensus,
    pub compensator_rate: BTreeMap<usize, f64>,
    pub pool_hashes: BTreeMap<usize, String>,
    pub configurations: Vec<ConfigurationSummary>,
    /// Paired F under CCP@M_1 against CCP@M_3 on the prescription split.
    pub contrast_m1_m3: WilcoxonResult,
    pub family: Vec<StatReport>,
    pub validity: BaselineValidity,
    pub cascade: BTreeMap<String, ShiftTable>,
    #[serde(skip)]
    pub results: Vec<ConfigurationResult>,
    #[serde(skip)]
    pub diagnoses: Vec<TaskDiagnosis>,
}

impl ParadoxReport {
    pub fn result(&self, tag: &str) -> Option<&ConfigurationResult> {
        self.results.iter().find(|r| r.configuration.tag == tag)
    }

    pub fn mean_delta(&self, tag: &str) -> Option<f64> {
        self.configurations.iter().find(|c| c.tag == tag).map(|c| c.mean_delta)
    }
}

fn paired(a: &ConfigurationResult, b: &ConfigurationResult) -> PairedSample {
    PairedSample {
        baseline: a.f_values(),
        treated: b.f_values(),
        labels: a.outcomes.iter().map(|o| o.task_id.clone()).collect(),
    }
}

/// Every intermediate the paradox run produces, for callers that write
/// artifacts.
pub struct ParadoxRun {
    pub report: ParadoxReport,
    pub diag_tasks: Vec<SyntheticTask>,
    pub presc_tasks: Vec<SyntheticTask>,
    pub pools: BTreeMap<usize, CorrectionPool>,
    pub routing: RoutingStats,
    pub baselines: Vec<BaselineRecord>,
}

/// Diagnosis on one split, pools, then the configuration sweep on a disjoint
/// split.
pub fn reproduce_paradox(config: &SyntheticAgentConfig, spec: &ParadoxSpec) -> Result<ParadoxRun> {
    config.validate()?;
    if config.n_presc < 2 || config.n_diag < 2 {
        return Err(Error::InvalidArgument("n_diag and n_presc must be at least 2".into()));
    }
    let (diag_seed, presc_seed) = split_seeds(config.seed);
    let diag_tasks = generate_tasks(config.n_diag, config.domain, diag_seed)?;
    let presc_tasks = generate_tasks(config.n_presc, config.domain, presc_seed)?;
    let mut agent = SimAgent::new(config.clone(), &diag_tasks)?;
    agent.extend(&presc_tasks);
    let judge = RubricJudge;
    let run_seed = seed::derive(config.seed, &["run"]);

    let diag: Vec<Task> = diag_tasks.iter().map(SyntheticTask::to_task).collect();
    let oracles: Vec<OracleSet> = diag_tasks.iter().map(SyntheticTask::oracle).collect();
    let diag_eps = run_baselines(&agent, &diag, run_seed, spec.jobs)?;
    let diagnoses = diagnosis::diagnose_all(&diag, &oracles, &diag_eps, &agent, &judge, spec.jobs)?;
    let summary = diagnosis::summarize(&diagnoses, spec.tau, &spec.tau_sweep)?;
    let census = diagnosis::fate_census(
        &diagnoses.iter().flat_map(|d| d.mediation.clone()).collect::<Vec<_>>(),
        spec.tau,
    )?;
    let triples: Vec<_> = diagnoses.iter().flat_map(|d| d.mediation.clone()).collect();
    let routing = RoutingStats::from_triples(&triples, spec.z_thr);
    let pools = build_pools(&diagnoses, agent.layout().k(), config.tau_demo, config.k)?;

    let presc: Vec<Task> = presc_tasks.iter().map(SyntheticTask::to_task).collect();
    let presc_eps = run_baselines(&agent, &presc, run_seed, spec.jobs)?;
    let degraded = DegradedOracle::new(config.domain, config.routing_corruption, config.seed, &[]);
    let prescriber = Prescriber {
        agent: &agent,
        judge: &judge,
        oracle: &TaskGold,
        routing_oracle: Some(&degraded),
        pools: &pools,
        routing: &routing,
        pop_target: summary.pop_target,
        naive_target: summary.naive_target,
        tau: spec.tau,
        jobs: spec.jobs,
    };
    let baselines = prescriber.baselines(&presc, &presc_eps)?;
    let mut results = Vec::new();
    for tag in &spec.configurations {
        let cfg = Configuration::parse(tag)?;
        results.push(prescriber.run_configuration(&cfg, &baselines)?);
    }
    let find = |tag: &str| -> Result<&ConfigurationResult> {
        results
            .iter()
            .find(|r| r.configuration.tag == tag)
            .ok_or_else(|| Error::UnknownConfiguration(format!("{tag} was not run")))
    };
    let pop_tag = format!("popccp@M{}", summary.pop_target);
    let base = find("baseline")?;
    let m1 = find("popccp@M1")?;
    let m3 = find("popccp@M3")?;
    let mpop = find(&pop_tag)?;
    let contrast = wilcoxon_signed_rank(&paired(m1, m3), WilcoxonMode::Auto)?;
    let mut samples = vec![
        ("baseline -> popccp@M1".to_string(), paired(base, m1)),
        (format!("baseline -> {pop_tag}"), paired(base, mpop)),
        (format!("popccp@M1 -> {pop_tag}"), paired(m1, mpop)),
    ];
    if let Ok(adaptive) = find("adaptive-zscore") {
        samples.push((format!("{pop_tag} -> adaptive-zscore"), paired(mpop, adaptive)));
    }
    let family = comparison_family(&samples, WilcoxonMode::Auto)?;
    let validity = baseline_validity(&baselines)?;
    let base_eps: Vec<Episode> = baselines.iter().map(|b| b.episode.clone()).collect();
    let mut cascade = BTreeMap::new();
    for tag in ["popccp@M1", "popccp@M3"] {
        cascade.insert(
            tag.to_string(),
            cascade_shift(agent.layout(), &base_eps, &find(tag)?.episodes, None)?,
        );
    }
    let compensator = (2..=agent.layout().k())
        .map(|i| compensator_rate(&census, i).map(|r| (i, r)))
        .collect::<Result<_>>()?;

    let report = ParadoxReport {
        config: config.clone(),
        spec: spec.clone(),
        diagnosis: summary,
        census,
        compensator_rate: compensator,
        pool_hashes: pools.iter().map(|(&i, p)| (i, p.content_hash.clone())).collect(),
        configurations: results.iter().map(|r| r.summary.clone()).collect(),
        contrast_m1_m3: contrast,
        family,
        validity,
        cascade,
        results,
        diagnoses,
    };
    Ok(ParadoxRun {
        report,
        diag_tasks,
        presc_tasks,
        pools,
        routing,
        baselines,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaPoint {
    pub kappa: f64,
    pub compensator_rate_m3: f64,
    pub mean_delta_ccp_m3: f64,
    pub mean_delta_ccp_m1: f64,
    pub pop_target: usize,
}

/// Re-runs the paradox at each κ with every other setting held fixed.
pub fn kappa_grid(config: &SyntheticAgentConfig, spec: &ParadoxSpec, kappas: &[f64]) -> Result<Vec<KappaPoint>> {
    kappas
        .iter()
        .map(|&kappa| {
            let run = reproduce_paradox(&config.with_kappa(kappa), spec)?;
            let r = &run.report;
            Ok(KappaPoint {
                kappa,
                compensator_rate_m3: r.compensator_rate.get(&3).copied().unwrap_or(f64::NAN),
                mean_delta_ccp_m3: r.mean_delta("popccp@M3").unwrap_or(f64::NAN),
                mean_delta_ccp_m1: r.mean_delta("popccp@M1").unwrap_or(f64::NAN),
                pop_target: r.diagnosis.pop_target,
            })
        })
        .collect()
}

/// First κ whose CCP@M_3 mean Δ is positive, if any.
pub fn hazard_onset(points: &[KappaPoint]) -> Option<&KappaPoint> {
    points.iter().find(|p| p.mean_delta_ccp_m3 > 0.0)
}
