//! Batch command surface: simulate → diagnose → prescribe → report, plus a
//! one-shot `paradox` run and a κ grid.
//!
//! Stages hand off through files in a run directory; every command appends
//! a record to `manifest.json` listing what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::backend::{BackendClient, BackendSpec, CacheMode, LlmAgent, LlmJudge, LlmOracle, OracleCache};
use crate::diagnosis::{self, DiagnosisSummary, DEFAULT_TAU};
use crate::pipeline::{Agent, Episode, OracleSet, OracleSource, PipelineLayout, Task};
use crate::prescription::{
    build_pools, compensator_rate, sha256_hex, Configuration, ConfigurationResult, PoolFile, Prescriber, RoutingStats,
    DEFAULT_Z_THR,
};
use crate::scoring::{read_failure_csv, Judge, RubricJudge};
use crate::simulator::{
    self, baseline_validity, kappa_grid, reproduce_paradox, DegradedOracle, ParadoxSpec, SimAgent,
    SyntheticAgentConfig, SyntheticTask, TaskGold,
};
use crate::stats::{
    cascade_shift, comparison_family, correlation, krippendorff_alpha_interval, CorrelationKind, PairedSample,
    StatReport, WilcoxonMode,
};

/// Note attached to every Holm table.
pub const HOLM_NOTE: &str = "Holm p-values use the standard step-down rule (sorted raw p, multiplier m-j+1, \
running maximum, capped at 1). Published tables that report larger adjusted values for the same raw p are not \
reproducible under this rule; no attempt is made to match them.";

#[derive(Parser, Debug)]
#[command(
    name = "pipediag",
    version,
    about = "Causal diagnosis and correction patching for modular agent pipelines"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate task catalogues and baseline episodes from a simulator config.
    Simulate(SimulateArgs),
    /// ΔF sweep, mediation, fate census, correction pools; seals the oracle cache.
    Diagnose(DiagnoseArgs),
    /// Run prescription configurations on the held-out split.
    Prescribe(PrescribeArgs),
    /// Consolidated text and JSON report for a run directory.
    Report(ReportArgs),
    /// Whole diagnose-then-prescribe study on the simulator in one process.
    Paradox(ParadoxArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Simulated,
    External,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Run directory produced by `simulate` (or prepared by hand for an
    /// external backend).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.10, 0.20])]
    pub tau_sweep: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, value_enum, default_value_t = BackendChoice::Simulated)]
    pub backend: BackendChoice,
    /// Backend roles for `--backend external` (JSON with agent, judge,
    /// oracle and optional routing_oracle specs).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PrescribeArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated configuration tags; defaults to the full list.
    #[arg(long, value_delimiter = ',')]
    pub configs: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_Z_THR)]
    pub z_thr: f64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, value_enum, default_value_t = BackendChoice::Simulated)]
    pub backend: BackendChoice,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also emit the cascade shift tables for CCP@M1 and CCP@M3.
    #[arg(long)]
    pub cascade: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Severity CSV from the first judge, for an agreement study.
    #[arg(long, requires = "judge_b")]
    pub judge_a: Option<PathBuf>,
    #[arg(long, requires = "judge_a")]
    pub judge_b: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParadoxArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.10, 0.20])]
    pub tau_sweep: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Also sweep κ over these values (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub kappa_grid: Vec<f64>,
    #[arg(long)]
    pub cascade: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command: String,
    pub args: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub backend: Option<BackendChoice>,
    pub config_hash: String,
    pub root_seed: u64,
    /// sha256 of every input and output file, by path relative to the run.
    pub dataset_hashes: BTreeMap<String, String>,
    pub commands: Vec<CommandRecord>,
}

impl RunManifest {
    fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let p = Self::path(dir);
        if !p.exists() {
            return Ok(Self::default());
        }
        read_json(&p)
    }

    fn record(&mut self, dir: &Path, command: &str, started: u64, outputs: &[PathBuf]) -> anyhow::Result<()> {
        let mut rel = Vec::new();
        for o in outputs {
            let name = o.strip_prefix(dir).unwrap_or(o).display().to_string();
            self.dataset_hashes.insert(name.clone(), file_hash(o)?);
            rel.push(name);
        }
        self.commands.push(CommandRecord {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            started_unix: started,
            finished_unix: now(),
            outputs: rel,
        });
        write_json(&Self::path(dir), self)
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_hash(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn with_writer(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> crate::Result<()>) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a simulator config, applying a seed override.
pub fn load_sim_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<SyntheticAgentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("config file {} could not be read", p.display()))?;
            SyntheticAgentConfig::from_json(&text).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => SyntheticAgentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Backend roles for an external run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalBackends {
    pub agent: BackendSpec,
    pub judge: Option<BackendSpec>,
    pub oracle: BackendSpec,
    #[serde(default)]
    pub routing_oracle: Option<BackendSpec>,
}

/// The backends a run directory is served by.
struct Services {
    agent: Box<dyn Agent>,
    judge: Box<dyn Judge>,
    /// Fills oracle-cache misses during diagnosis.
    oracle_fill: Box<dyn OracleSource>,
    routing: Option<Box<dyn OracleSource>>,
}

fn services(dir: &Path, backend: BackendChoice, config: Option<&Path>) -> anyhow::Result<Services> {
    match backend {
        BackendChoice::Simulated => {
            let cfg: SyntheticAgentConfig = read_json(&dir.join("config.json"))?;
            let catalog: Vec<SyntheticTask> = read_jsonl(&dir.join("catalog.jsonl"))?;
            let routing = DegradedOracle::new(cfg.domain, cfg.routing_corruption, cfg.seed, &catalog);
            Ok(Services {
                agent: Box::new(SimAgent::new(cfg, &catalog)?),
                judge: Box::new(RubricJudge),
                oracle_fill: Box::new(TaskGold),
                routing: Some(Box::new(routing)),
            })
        }
        BackendChoice::External => {
            let path = config
                .map(Path::to_path_buf)
                .unwrap_or_else(|| dir.join("backends.json"));
            let b: ExternalBackends = read_json(&path)?;
            let layout = PipelineLayout::four_stage();
            let judge: Box<dyn Judge> = match b.judge {
                Some(spec) => Box::new(LlmJudge::new(BackendClient::new(spec)?)),
                None => Box::new(RubricJudge),
            };
            let routing: Option<Box<dyn OracleSource>> = match b.routing_oracle {
                Some(spec) => Some(Box::new(LlmOracle::new(BackendClient::new(spec)?, layout.clone()))),
                None => None,
            };
            Ok(Services {
                agent: Box::new(LlmAgent::new(BackendClient::new(b.agent)?, layout.clone())),
                judge,
                oracle_fill: Box::new(LlmOracle::new(BackendClient::new(b.oracle)?, layout)),
                routing,
            })
        }
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let started = now();
    let cfg = load_sim_config(args.config.as_deref(), args.seed)?;
    let dir = &args.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (diag_seed, presc_seed) = simulator::split_seeds(cfg.seed);
    let diag = simulator::generate_tasks(cfg.n_diag, cfg.domain, diag_seed)?;
    let presc = simulator::generate_tasks(cfg.n_presc, cfg.domain, presc_seed)?;
    let catalog: Vec<SyntheticTask> = diag.iter().chain(&presc).cloned().collect();
    let agent = SimAgent::new(cfg.clone(), &catalog)?;
    let run_seed = crate::seed::derive(cfg.seed, &["run"]);
    // the on-disk tasks carry no gold; S* lives only in the oracle cache
    let strip = |t: &SyntheticTask| Task {
        gold: None,
        ..t.to_task()
    };
    let diag_tasks: Vec<Task> = diag.iter().map(strip).collect();
    let presc_tasks: Vec<Task> = presc.iter().map(strip).collect();
    let gold: Vec<Task> = catalog.iter().map(SyntheticTask::to_task).collect();
    let diag_eps = simulator::run_baselines(&agent, &gold[..diag.len()], run_seed, args.jobs)?;
    let presc_eps = simulator::run_baselines(&agent, &gold[diag.len()..], run_seed, args.jobs)?;

    let outputs = vec![
        dir.join("config.json"),
        dir.join("catalog.jsonl"),
        dir.join("tasks_diag.jsonl"),
        dir.join("tasks_presc.jsonl"),
        dir.join("episodes_diag.jsonl"),
        dir.join("episodes_presc.jsonl"),
        dir.join("oracle.jsonl"),
    ];
    write_json(&outputs[0], &cfg)?;
    write_jsonl(&outputs[1], &catalog)?;
    write_jsonl(&outputs[2], &diag_tasks)?;
    write_jsonl(&outputs[3], &presc_tasks)?;
    write_jsonl(&outputs[4], &diag_eps)?;
    write_jsonl(&outputs[5], &presc_eps)?;
    let _ = fs::remove_file(&outputs[6]);
    let cache = OracleCache::open(&outputs[6], "simulator-gold", CacheMode::ReadWrite)?;
    for t in &gold {
        let set = TaskGold.oracle_for(t)?;
        for (&i, p) in &set.outputs {
            cache.insert(&t.task_id, i, p.clone())?;
        }
    }
    drop(cache);

    let config_hash = file_hash(&outputs[0])?;
    let mut manifest = RunManifest {
        run_id: format!("run-{}", &config_hash[..12]),
        backend: Some(BackendChoice::Simulated),
        config_hash,
        root_seed: cfg.seed,
        ..RunManifest::default()
    };
    manifest.record(dir, "simulate", started, &outputs)?;
    info!(dir = %dir.display(), diag = diag.len(), presc = presc.len(), "simulation written");
    Ok(())
}

/// Diagnosis outputs other commands read back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusFile {
    pub summary: DiagnosisSummary,
    pub compensator_rate: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SealRecord {
    pub entries: usize,
    pub content_hash: String,
}

fn run_baselines_if_missing(
    dir: &Path,
    split: &str,
    tasks: &[Task],
    agent: &dyn Agent,
    seed: u64,
    jobs: usize,
) -> anyhow::Result<Vec<Episode>> {
    let path = dir.join(format!("episodes_{split}.jsonl"));
    if path.exists() {
        return read_jsonl(&path);
    }
    let eps = crate::par::map_ordered(tasks, agent.concurrent(), jobs, |t| {
        crate::pipeline::run_pipeline(t, agent, &crate::pipeline::InterventionSpec::none(), None, seed)
    })?;
    write_jsonl(&path, &eps)?;
    Ok(eps)
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> anyhow::Result<()> {
    let started = now();
    let dir = &args.out;
    let mut manifest = RunManifest::load(dir)?;
    let svc = services(dir, args.backend, args.config.as_deref())?;
    let tasks: Vec<Task> = read_jsonl(&dir.join("tasks_diag.jsonl"))?;
    let baselines = run_baselines_if_missing(dir, "diag", &tasks, svc.agent.as_ref(), manifest.root_seed, args.jobs)?;
    let layout = svc.agent.layout().clone();

    let cache_path = dir.join("oracle.jsonl");
    if dir.join("oracle.seal.json").exists() {
        bail!(
            "oracle cache in {} is already sealed; diagnosis would need fresh oracle values",
            dir.display()
        );
    }
    let cache = OracleCache::open(&cache_path, svc.agent.backend_tag(), CacheMode::ReadWrite)?;
    let source = cache.source(&layout, Some(svc.oracle_fill.as_ref()));
    let oracles: Vec<OracleSet> = tasks
        .iter()
        .map(|t| source.oracle_for(t))
        .collect::<crate::Result<_>>()?;
    // prescription needs S* for its split too; fill before sealing
    let presc_path = dir.join("tasks_presc.jsonl");
    if presc_path.exists() {
        for t in read_jsonl::<Task>(&presc_path)? {
            source.oracle_for(&t)?;
        }
    }
    let diags = diagnosis::diagnose_all(
        &tasks,
        &oracles,
        &baselines,
        svc.agent.as_ref(),
        svc.judge.as_ref(),
        args.jobs,
    )?;
    let summary = diagnosis::summarize(&diags, args.tau, &args.tau_sweep)?;
    let triples: Vec<_> = diags.iter().flat_map(|d| d.mediation.clone()).collect();
    let census = diagnosis::fate_census(&triples, args.tau)?;
    let compensator = (2..=layout.k())
        .map(|i| compensator_rate(&census, i).map(|r| (i, r)))
        .collect::<crate::Result<_>>()?;
    let routing = RoutingStats::from_triples(&triples, DEFAULT_Z_THR);
    let (tau_demo, k) = match read_json::<SyntheticAgentConfig>(&dir.join("config.json")) {
        Ok(c) => (c.tau_demo, c.k),
        Err(_) => (
            crate::prescription::DEFAULT_TAU_DEMO,
            crate::prescription::DEFAULT_POOL_K,
        ),
    };
    let pools = build_pools(&diags, layout.k(), tau_demo, k)?;
    cache.seal();
    let seal = SealRecord {
        entries: cache.len(),
        content_hash: cache.content_hash()?,
    };

    let outputs = vec![
        dir.join("sweep.csv"),
        dir.join("diagnoses.jsonl"),
        dir.join("census.json"),
        dir.join("pools.json"),
        dir.join("routing.json"),
        dir.join("oracle.seal.json"),
    ];
    with_writer(&outputs[0], |w| diagnosis::write_sweep_csv(&diags, args.tau, w))?;
    write_jsonl(&outputs[1], &diags)?;
    write_json(
        &outputs[2],
        &CensusFile {
            summary,
            compensator_rate: compensator,
        },
    )?;
    write_json(&outputs[3], &PoolFile::new(&pools)?)?;
    write_json(&outputs[4], &routing)?;
    write_json(&outputs[5], &seal)?;
    manifest.record(dir, "diagnose", started, &outputs)?;
    Ok(())
}

/// Everything `prescribe` writes besides per-configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrescribeSummary {
    pub pop_target: usize,
    pub configurations: Vec<crate::prescription::ConfigurationSummary>,
    pub table4: Vec<StatReport>,
    pub holm_note: String,
    pub validity: Option<simulator::BaselineValidity>,
    pub oracle_cache_hash: String,
}

/// The four pre-specified comparisons, in (from arm → to arm) order.
pub fn table4(results: &[ConfigurationResult], pop_target: usize) -> crate::Result<Vec<StatReport>> {
    let pop = format!("popccp@M{pop_target}");
    let find = |t: &str| results.iter().find(|r| r.configuration.tag == t);
    let pairs = [
        ("baseline", "popccp@M1"),
        ("baseline", pop.as_str()),
        ("popccp@M1", pop.as_str()),
        (pop.as_str(), "adaptive-zscore"),
    ];
    let mut samples = Vec::new();
    for (a, b) in pairs {
        if let (Some(ra), Some(rb)) = (find(a), find(b)) {
            samples.push((
                format!("{a} -> {b}"),
                PairedSample {
                    baseline: ra.f_values(),
                    treated: rb.f_values(),
                    labels: ra.outcomes.iter().map(|o| o.task_id.clone()).collect(),
                },
            ));
        }
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    comparison_family(&samples, WilcoxonMode::Auto)
}

fn write_table4_csv(path: &Path, rows: &[StatReport]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["comparison", "n", "W_plus", "mean_difference", "raw_p", "holm_p", "d_z"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.n.to_string(),
            r.statistic.to_string(),
            r.mean_difference.to_string(),
            r.raw_p.to_string(),
            r.holm_p.to_string(),
            r.d_z.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_prescribe(args: &PrescribeArgs) -> anyhow::Result<()> {
    let started = now();
    let dir = &args.out;
    let mut manifest = RunManifest::load(dir)?;
    let seal: SealRecord = read_json(&dir.join("oracle.seal.json"))
        .context("diagnosis has not sealed the oracle cache; run `diagnose` first")?;
    let svc = services(dir, args.backend, args.config.as_deref())?;
    let layout = svc.agent.layout().clone();
    let cache = OracleCache::open(dir.join("oracle.jsonl"), svc.agent.backend_tag(), CacheMode::Sealed)?;
    if cache.content_hash()? != seal.content_hash {
        bail!("oracle cache content does not match its seal");
    }
    let census: CensusFile = read_json(&dir.join("census.json"))?;
    let pools = read_json::<PoolFile>(&dir.join("pools.json"))?.into_map()?;
    let mut routing: RoutingStats = read_json(&dir.join("routing.json"))?;
    routing.z_thr = args.z_thr;
    let tasks: Vec<Task> = read_jsonl(&dir.join("tasks_presc.jsonl"))?;
    let episodes = run_baselines_if_missing(dir, "presc", &tasks, svc.agent.as_ref(), manifest.root_seed, args.jobs)?;

    let oracle = cache.source(&layout, None);
    let prescriber = Prescriber {
        agent: svc.agent.as_ref(),
        judge: svc.judge.as_ref(),
        oracle: &oracle,
        routing_oracle: svc.routing.as_deref(),
        pools: &pools,
        routing: &routing,
        pop_target: census.summary.pop_target,
        naive_target: census.summary.naive_target,
        tau: census.summary.tau,
        jobs: args.jobs,
    };
    let baselines = prescriber.baselines(&tasks, &episodes)?;
    let tags: Vec<String> = if args.configs.is_empty() {
        Configuration::default_tags().iter().map(|s| s.to_string()).collect()
    } else {
        args.configs.clone()
    };
    let configs: Vec<Configuration> = tags
        .iter()
        .map(|t| Configuration::parse(t))
        .collect::<crate::Result<_>>()?;
    let results_dir = dir.join("results");
    fs::create_dir_all(&results_dir)?;
    let mut outputs = Vec::new();
    let mut results = Vec::new();
    for cfg in &configs {
        let r = prescriber.run_configuration(cfg, &baselines)?;
        let stem = cfg.tag.replace('@', "_");
        let csv_path = results_dir.join(format!("{stem}.csv"));
        with_writer(&csv_path, |w| r.write_csv(w))?;
        let json_path = results_dir.join(format!("{stem}.json"));
        write_json(&json_path, &r.summary)?;
        outputs.push(csv_path);
        outputs.push(json_path);
        results.push(r);
    }
    let table = table4(&results, census.summary.pop_target)?;
    let table_path = dir.join("table4.csv");
    write_table4_csv(&table_path, &table)?;
    outputs.push(table_path);
    if args.cascade {
        let base: Vec<Episode> = baselines.iter().map(|b| b.episode.clone()).collect();
        let mut shifts = BTreeMap::new();
        for tag in ["popccp@M1", "popccp@M3"] {
            let r = match results.iter().find(|r| r.configuration.tag == tag) {
                Some(r) => r.clone(),
                None => prescriber.run_configuration(&Configuration::parse(tag)?, &baselines)?,
            };
            shifts.insert(tag.to_string(), cascade_shift(&layout, &base, &r.episodes, None)?);
        }
        let p = dir.join("cascade.json");
        write_json(&p, &shifts)?;
        outputs.push(p);
    }
    let hash_after = cache.content_hash()?;
    if hash_after != seal.content_hash {
        bail!("oracle cache changed during prescription");
    }
    let summary = PrescribeSummary {
        pop_target: census.summary.pop_target,
        configurations: results.iter().map(|r| r.summary.clone()).collect(),
        table4: table,
        holm_note: HOLM_NOTE.to_string(),
        validity: baseline_validity(&baselines).ok(),
        oracle_cache_hash: hash_after,
    };
    let p = dir.join("prescribe_summary.json");
    write_json(&p, &summary)?;
    outputs.push(p);
    manifest.record(dir, "prescribe", started, &outputs)?;
    Ok(())
}

/// Agreement between two judges' severity files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeAgreement {
    pub n_ratings: usize,
    pub krippendorff_alpha: f64,
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub mean_abs_difference: f64,
    /// Share of ratings on which both judges agree about sev ≥ 0.5.
    pub binary_agreement: f64,
}

pub fn judge_agreement(a: &Path, b: &Path) -> anyhow::Result<JudgeAgreement> {
    let load = |p: &Path| -> anyhow::Result<BTreeMap<String, Vec<f64>>> {
        let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        Ok(read_failure_csv(f)?.into_iter().collect())
    };
    let (ra, rb) = (load(a)?, load(b)?);
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for (task, sa) in &ra {
        let sb = rb
            .get(task)
            .ok_or_else(|| anyhow!("task {task} is in {} but not {}", a.display(), b.display()))?;
        if sa.len() != sb.len() {
            bail!("task {task}: {} vs {} module severities", sa.len(), sb.len());
        }
        xa.extend_from_slice(sa);
        xb.extend_from_slice(sb);
    }
    if ra.len() != rb.len() {
        bail!("the two severity files cover different task sets");
    }
    let n = xa.len();
    let agree = xa.iter().zip(&xb).filter(|(x, y)| (**x >= 0.5) == (**y >= 0.5)).count();
    Ok(JudgeAgreement {
        n_ratings: n,
        krippendorff_alpha: krippendorff_alpha_interval(&xa, &xb)?,
        pearson_r: correlation(&xa, &xb, CorrelationKind::Pearson)?.0,
        spearman_rho: correlation(&xa, &xb, CorrelationKind::Spearman)?.0,
        mean_abs_difference: xa.iter().zip(&xb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64,
        binary_agreement: agree as f64 / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub diagnosis: Option<CensusFile>,
    pub prescription: Option<PrescribeSummary>,
    pub missing_configurations: Vec<String>,
    pub kappa_grid: Option<Vec<simulator::KappaPoint>>,
    pub judge_agreement: Option<JudgeAgreement>,
    pub holm_note: String,
}

fn render_report(r: &RunReport) -> String {
    let mut s = String::new();
    let mut line = |t: String| {
        s.push_str(&t);
        s.push('\n');
    };
    line(format!("run {}", r.run_id));
    if let Some(d) = &r.diagnosis {
        line(String::new());
        line(format!("diagnosis on {} tasks (tau = {})", d.summary.n, d.summary.tau));
        for (i, v) in d.summary.mean_delta_f.iter().enumerate() {
            line(format!(
                "  M{}  mean dF = {:+.3}  mean sev = {:.3}",
                i + 1,
                v,
                d.summary.mean_severity.get(i).copied().unwrap_or(f64::NAN)
            ));
        }
        line(format!(
            "  population target M{}; severity target M{}",
            d.summary.pop_target, d.summary.naive_target
        ));
        line("  fate census (amplifier / propagator / compensator):".into());
        for c in &d.summary.censuses {
            let cells: Vec<String> = c
                .modules
                .iter()
                .map(|m| format!("M{} {}/{}/{}", m.module_index, m.amplifier, m.propagator, m.compensator))
                .collect();
            line(format!("    tau {:<5} {}", c.tau, cells.join("  ")));
        }
        for (i, rate) in &d.compensator_rate {
            line(format!("  compensator rate M{i}: {:.3}", rate));
        }
    }
    if let Some(p) = &r.prescription {
        line(String::new());
        line("configuration          n    mean F   mean delta  tool-match  patched".into());
        for c in &p.configurations {
            line(format!(
                "  {:<20} {:>4} {:>8.3} {:>+11.3} {:>11.2} {:>8.2}",
                c.tag, c.n, c.mean_f, c.mean_delta, c.tool_match_rate, c.patched_fraction
            ));
        }
        for m in &r.missing_configurations {
            line(format!("  {m:<20} MISSING (not run)"));
        }
        if !p.table4.is_empty() {
            line(String::new());
            line("comparison                           n   raw p     holm p    d_z".into());
            for t in &p.table4 {
                line(format!(
                    "  {:<32} {:>4} {:>9.3e} {:>9.3e} {:>+6.3}",
                    t.label, t.n, t.raw_p, t.holm_p, t.d_z
                ));
            }
        }
        if let Some(v) = &p.validity {
            line(format!(
                "  F vs tool-match: r = {:.3}; mean F match {:.3}, mismatch {:.3}",
                v.pearson_r, v.mean_f_match, v.mean_f_mismatch
            ));
        }
    } else {
        line(String::new());
        line("prescription: MISSING (run `prescribe`)".into());
    }
    if let Some(g) = &r.kappa_grid {
        line(String::new());
        line("kappa   comp rate M3   delta CCP@M3   delta CCP@M1".into());
        for p in g {
            line(format!(
                "  {:<6} {:>12.3} {:>+14.3} {:>+14.3}",
                p.kappa, p.compensator_rate_m3, p.mean_delta_ccp_m3, p.mean_delta_ccp_m1
            ));
        }
    }
    if let Some(j) = &r.judge_agreement {
        line(String::new());
        line(format!(
            "judge agreement over {} ratings: alpha {:.3}, pearson {:.3}, spearman {:.3}, mean |dsev| {:.3}, binary@0.5 {:.3}",
            j.n_ratings, j.krippendorff_alpha, j.pearson_r, j.spearman_rho, j.mean_abs_difference, j.binary_agreement
        ));
    }
    line(String::new());
    line(format!("note: {}", r.holm_note));
    s
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let started = now();
    let dir = &args.out;
    let mut manifest = RunManifest::load(dir)?;
    let census_path = dir.join("census.json");
    let presc_path = dir.join("prescribe_summary.json");
    if !census_path.exists() && !presc_path.exists() && args.judge_a.is_none() {
        bail!(
            "nothing to report in {}: no diagnosis or prescription outputs",
            dir.display()
        );
    }
    let diagnosis: Option<CensusFile> = census_path.exists().then(|| read_json(&census_path)).transpose()?;
    let prescription: Option<PrescribeSummary> = presc_path.exists().then(|| read_json(&presc_path)).transpose()?;
    let missing = match &prescription {
        Some(p) => Configuration::default_tags()
            .into_iter()
            .filter(|t| !p.configurations.iter().any(|c| c.tag == *t))
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    let grid_path = dir.join("kappa_grid.json");
    let kappa = grid_path.exists().then(|| read_json(&grid_path)).transpose()?;
    let agreement = match (&args.judge_a, &args.judge_b) {
        (Some(a), Some(b)) => Some(judge_agreement(a, b)?),
        _ => None,
    };
    let report = RunReport {
        run_id: manifest.run_id.clone(),
        diagnosis,
        prescription,
        missing_configurations: missing,
        kappa_grid: kappa,
        judge_agreement: agreement,
        holm_note: HOLM_NOTE.to_string(),
    };
    let txt = dir.join("report.txt");
    fs::write(&txt, render_report(&report))?;
    let json = dir.join("report.json");
    write_json(&json, &report)?;
    manifest.record(dir, "report", started, &[txt, json])?;
    Ok(())
}

pub fn cmd_paradox(args: &ParadoxArgs) -> anyhow::Result<()> {
    let started = now();
    let cfg = load_sim_config(args.config.as_deref(), args.seed)?;
    let dir = &args.out;
    fs::create_dir_all(dir)?;
    let spec = ParadoxSpec {
        tau: args.tau,
        tau_sweep: args.tau_sweep.clone(),
        jobs: args.jobs,
        ..ParadoxSpec::default()
    };
    let run = reproduce_paradox(&cfg, &spec)?;
    let mut outputs = vec![
        dir.join("config.json"),
        dir.join("paradox.json"),
        dir.join("paradox_f.csv"),
    ];
    write_json(&outputs[0], &cfg)?;
    let mut report = run.report.clone();
    if !args.cascade {
        report.cascade.clear();
    }
    write_json(&outputs[1], &report)?;
    {
        let mut w = csv::Writer::from_path(&outputs[2])?;
        w.write_record(["configuration", "task_id", "F_base", "F_patched", "delta", "tool_match"])?;
        for r in &run.report.results {
            for o in &r.outcomes {
                w.write_record([
                    r.configuration.tag.clone(),
                    o.task_id.clone(),
                    o.f_base.to_string(),
                    o.f_patched.to_string(),
                    o.delta.to_string(),
                    u8::from(o.tool_match).to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    let census = CensusFile {
        summary: run.report.diagnosis.clone(),
        compensator_rate: run.report.compensator_rate.clone(),
    };
    let census_path = dir.join("census.json");
    write_json(&census_path, &census)?;
    outputs.push(census_path);
    let summary = PrescribeSummary {
        pop_target: run.report.diagnosis.pop_target,
        configurations: run.report.configurations.clone(),
        table4: run.report.family.clone(),
        holm_note: HOLM_NOTE.to_string(),
        validity: Some(run.report.validity.clone()),
        oracle_cache_hash: String::new(),
    };
    let summary_path = dir.join("prescribe_summary.json");
    write_json(&summary_path, &summary)?;
    outputs.push(summary_path);
    if !args.kappa_grid.is_empty() {
        let grid = kappa_grid(&cfg, &spec, &args.kappa_grid)?;
        let p = dir.join("kappa_grid.json");
        write_json(&p, &grid)?;
        outputs.push(p);
    }
    let config_hash = file_hash(&outputs[0])?;
    let mut manifest = RunManifest {
        run_id: format!("paradox-{}", &config_hash[..12]),
        backend: Some(BackendChoice::Simulated),
        config_hash,
        root_seed: cfg.seed,
        ..RunManifest::default()
    };
    manifest.record(dir, "paradox", started, &outputs)?;
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Prescribe(a) => cmd_prescribe(a),
        Command::Report(a) => cmd_report(a),
        Command::Paradox(a) => cmd_paradox(a),
    }
}
