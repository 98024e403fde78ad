//! Correction pools, patch rendering and the prescription configuration
//! sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::diagnosis::{per_task_severity_target, score, tool_match, FateCensus, MediationTriple, TaskDiagnosis};
use crate::error::{Error, Result};
use crate::par;
use crate::pipeline::{
    run_pipeline, run_pipeline_patched, world_pair, Agent, Episode, InterventionSpec, OracleSource, Payload, Task,
};
use crate::scoring::Judge;

pub const DEFAULT_TAU_DEMO: f64 = 0.30;
pub const DEFAULT_POOL_K: usize = 5;
pub const DEFAULT_Z_THR: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTriple {
    pub task_id: String,
    pub module_index: usize,
    pub input: String,
    pub wrong: Payload,
    pub correct: Payload,
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPool {
    pub module_index: usize,
    /// Descending severity, ties by ascending task id.
    pub triples: Vec<CorrectionTriple>,
    pub tau_demo: f64,
    pub k: usize,
    pub content_hash: String,
}

impl CorrectionPool {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.triples.iter().map(|t| t.task_id.as_str())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn pool_hash(module_index: usize, tau_demo: f64, k: usize, triples: &[CorrectionTriple]) -> Result<String> {
    let body = serde_json::to_vec(&(module_index, tau_demo, k, triples))?;
    Ok(sha256_hex(&body))
}

/// Selects, per module, the top-k diagnosis triples with severity ≥ τ_demo.
pub fn select_pool(
    module_index: usize,
    candidates: Vec<CorrectionTriple>,
    tau_demo: f64,
    k: usize,
) -> Result<CorrectionPool> {
    if !(tau_demo > 0.0 && tau_demo < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "τ_demo must be in (0, 1), got {tau_demo}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("pool size k must be at least 1".into()));
    }
    let mut admitted: Vec<CorrectionTriple> = candidates
        .into_iter()
        .filter(|c| c.module_index == module_index && c.severity >= tau_demo)
        .collect();
    admitted.sort_by(|a, b| {
        b.severity
            .total_cmp(&a.severity)
            .then_with(|| a.task_id.cmp(&b.task_id))
    });
    admitted.truncate(k);
    let content_hash = pool_hash(module_index, tau_demo, k, &admitted)?;
    Ok(CorrectionPool {
        module_index,
        triples: admitted,
        tau_demo,
        k,
        content_hash,
    })
}

/// Builds every module's pool from the diagnosis sweep.
pub fn build_pools(
    diags: &[TaskDiagnosis],
    num_modules: usize,
    tau_demo: f64,
    k: usize,
) -> Result<BTreeMap<usize, CorrectionPool>> {
    let mut pools = BTreeMap::new();
    for m in 1..=num_modules {
        let mut candidates = Vec::new();
        for d in diags {
            let (Some(&sev), Some(wrong), Some(correct), Some(input)) = (
                d.baseline_sev.get(m - 1),
                d.baseline_payloads.get(m - 1),
                d.oracle_payloads.get(m - 1),
                d.module_inputs.get(m - 1),
            ) else {
                return Err(Error::LengthMismatch(format!(
                    "diagnosis for {} lacks module {m}",
                    d.task_id
                )));
            };
            candidates.push(CorrectionTriple {
                task_id: d.task_id.clone(),
                module_index: m,
                input: input.clone(),
                wrong: wrong.clone(),
                correct: correct.clone(),
                severity: sev,
            });
        }
        pools.insert(m, select_pool(m, candidates, tau_demo, k)?);
    }
    Ok(pools)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolFile {
    pub pools: Vec<CorrectionPool>,
    pub content_hash: String,
}

impl PoolFile {
    pub fn new(pools: &BTreeMap<usize, CorrectionPool>) -> Result<Self> {
        let hashes: Vec<&str> = pools.values().map(|p| p.content_hash.as_str()).collect();
        Ok(Self {
            pools: pools.values().cloned().collect(),
            content_hash: sha256_hex(hashes.join(",").as_bytes()),
        })
    }

    /// Rejects a file whose pools do not hash to their recorded values.
    pub fn into_map(self) -> Result<BTreeMap<usize, CorrectionPool>> {
        let mut map = BTreeMap::new();
        for p in self.pools {
            let h = pool_hash(p.module_index, p.tau_demo, p.k, &p.triples)?;
            if h != p.content_hash {
                return Err(Error::InvalidArgument(format!(
                    "pool for module {} fails its content hash",
                    p.module_index
                )));
            }
            map.insert(p.module_index, p);
        }
        Ok(map)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub target: usize,
    pub rendered_block: String,
    pub pool_hash: String,
    /// The triples the block was rendered from, for backends that act on
    /// structure rather than prompt text.
    pub examples: Vec<CorrectionTriple>,
}

fn prompt_text(p: &Payload) -> String {
    match p {
        Payload::Text { text } => text.clone(),
        other => serde_json::to_string(other).unwrap_or_else(|_| other.render()),
    }
}

/// One example block per triple, numbered in pool order.
pub fn render_patch(pool: &CorrectionPool) -> PatchSpec {
    let blocks: Vec<String> = pool
        .triples
        .iter()
        .enumerate()
        .map(|(j, t)| {
            format!(
                "### Example {}\nInput: {}\n\u{2717} Wrong: {}\n\u{2713} Correct: {}\n",
                j + 1,
                t.input,
                prompt_text(&t.wrong),
                prompt_text(&t.correct)
            )
        })
        .collect();
    PatchSpec {
        target: pool.module_index,
        rendered_block: blocks.join("\n"),
        pool_hash: pool.content_hash.clone(),
        examples: pool.triples.clone(),
    }
}

/// Per-module NIE mean and standard deviation from the diagnosis split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub mu: BTreeMap<usize, f64>,
    pub sigma: BTreeMap<usize, f64>,
    pub z_thr: f64,
}

impl RoutingStats {
    /// σ is the sample standard deviation (n − 1); a single observation has σ = 0.
    pub fn from_triples(triples: &[MediationTriple], z_thr: f64) -> Self {
        let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for t in triples {
            by.entry(t.module_index).or_default().push(t.nie);
        }
        let mut mu = BTreeMap::new();
        let mut sigma = BTreeMap::new();
        for (i, v) in by {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let s = if v.len() > 1 {
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            mu.insert(i, m);
            sigma.insert(i, s);
        }
        Self { mu, sigma, z_thr }
    }

    /// z_i; a zero (or missing) σ never fires.
    pub fn z(&self, module: usize, nie: f64) -> f64 {
        match (self.mu.get(&module), self.sigma.get(&module)) {
            (Some(m), Some(s)) if *s > 0.0 => (nie - m) / s,
            _ => f64::NEG_INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "module")]
pub enum TargetRule {
    Fixed(usize),
    PopTarget,
    NaivePopSeverity,
    PerTaskSeverity,
    AdaptiveAbsNie,
    AdaptiveZscore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Treatment {
    Ccp,
    OracleInject,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub tag: String,
    pub rule: Option<TargetRule>,
    pub treatment: Treatment,
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag)
    }
}

fn parse_target(s: &str, tag: &str) -> Result<TargetRule> {
    if s == "pop" {
        return Ok(TargetRule::PopTarget);
    }
    s.strip_prefix('M')
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .map(TargetRule::Fixed)
        .ok_or_else(|| Error::UnknownConfiguration(tag.to_string()))
}

impl Configuration {
    /// Parses tags such as `baseline`, `popccp@M3`, `oracle@pop`,
    /// `adaptive-zscore`, `rewrite@pop`.
    pub fn parse(tag: &str) -> Result<Self> {
        let tag = tag.trim();
        let mk = |rule, treatment| Configuration {
            tag: tag.to_string(),
            rule,
            treatment,
        };
        Ok(match tag {
            "baseline" => mk(None, Treatment::None),
            "naive-pop-severity" => mk(Some(TargetRule::NaivePopSeverity), Treatment::Ccp),
            "per-task-severity" => mk(Some(TargetRule::PerTaskSeverity), Treatment::Ccp),
            "adaptive-abs-nie" => mk(Some(TargetRule::AdaptiveAbsNie), Treatment::Ccp),
            "adaptive-zscore" => mk(Some(TargetRule::AdaptiveZscore), Treatment::Ccp),
            _ => {
                let (head, target) = tag
                    .split_once('@')
                    .ok_or_else(|| Error::UnknownConfiguration(tag.to_string()))?;
                let rule = parse_target(target, tag)?;
                match head {
                    "popccp" => mk(Some(rule), Treatment::Ccp),
                    "oracle" => mk(Some(rule), Treatment::OracleInject),
                    // treatments kept only as labelled no-op ablations
                    "rewrite" | "upgrade" => mk(Some(rule), Treatment::None),
                    _ => return Err(Error::UnknownConfiguration(tag.to_string())),
                }
            }
        })
    }

    pub fn default_tags() -> Vec<&'static str> {
        vec![
            "baseline",
            "popccp@M1",
            "popccp@M2",
            "popccp@M3",
            "popccp@M4",
            "adaptive-zscore",
            "oracle@pop",
            "naive-pop-severity",
            "per-task-severity",
            "adaptive-abs-nie",
            "rewrite@pop",
            "upgrade@pop",
        ]
    }
}

/// Baseline facts for one prescription task, scored against the strong oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub task: Task,
    pub episode: Episode,
    pub f: f64,
    pub tool_match: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    Absolute,
    Zscore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    /// NIE per mediable module against the routing oracle.
    pub nie: BTreeMap<usize, f64>,
    pub z: Option<BTreeMap<usize, f64>>,
    pub chosen: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub f_base: f64,
    pub f_patched: f64,
    pub delta: f64,
    pub tool_match: bool,
    /// Module the treatment landed on, if any.
    pub target: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationSummary {
    pub tag: String,
    pub n: usize,
    pub mean_f_base: f64,
    pub mean_f: f64,
    pub mean_delta: f64,
    pub tool_match_rate: f64,
    pub patched_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationResult {
    pub configuration: Configuration,
    pub outcomes: Vec<TaskOutcome>,
    pub summary: ConfigurationSummary,
    #[serde(skip)]
    pub episodes: Vec<Episode>,
}

impl ConfigurationResult {
    pub fn f_values(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.f_patched).collect()
    }

    /// CSV: task_id, F_base, F_patched, delta, tool_match.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task_id", "F_base", "F_patched", "delta", "tool_match"])?;
        for o in &self.outcomes {
            w.write_record([
                o.task_id.clone(),
                o.f_base.to_string(),
                o.f_patched.to_string(),
                o.delta.to_string(),
                u8::from(o.tool_match).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Everything a configuration run needs; immutable once built.
pub struct Prescriber<'a> {
    pub agent: &'a dyn Agent,
    pub judge: &'a dyn Judge,
    /// Strong cached oracle, used only for final scoring and oracle injection.
    pub oracle: &'a dyn OracleSource,
    /// Deployment-side oracle for adaptive and per-task-severity routing.
    pub routing_oracle: Option<&'a dyn OracleSource>,
    pub pools: &'a BTreeMap<usize, CorrectionPool>,
    pub routing: &'a RoutingStats,
    pub pop_target: usize,
    pub naive_target: usize,
    pub tau: f64,
    pub jobs: usize,
}

impl<'a> Prescriber<'a> {
    fn patch_for(&self, module: usize) -> Option<PatchSpec> {
        self.pools.get(&module).filter(|p| !p.is_empty()).map(render_patch)
    }

    /// Scores baselines of the prescription split against the strong oracle.
    pub fn baselines(&self, tasks: &[Task], episodes: &[Episode]) -> Result<Vec<BaselineRecord>> {
        if tasks.len() != episodes.len() {
            return Err(Error::LengthMismatch(format!(
                "{} tasks, {} baseline episodes",
                tasks.len(),
                episodes.len()
            )));
        }
        let idx: Vec<usize> = (0..tasks.len()).collect();
        par::map_ordered(&idx, self.agent.concurrent(), self.jobs, |&i| {
            let task = &tasks[i];
            let ep = &episodes[i];
            if ep.task_id != task.task_id {
                return Err(Error::BaselineMismatch(format!("{} vs {}", ep.task_id, task.task_id)));
            }
            let oracle = self.oracle.oracle_for(task)?;
            let (_, f) = score(ep, task, &oracle, self.judge, self.agent)?;
            Ok(BaselineRecord {
                task: task.clone(),
                episode: ep.clone(),
                f,
                tool_match: tool_match(ep, &oracle, self.agent.layout()).unwrap_or(false),
            })
        })
    }

    fn check_split_hygiene(&self, baselines: &[BaselineRecord]) -> Result<()> {
        let pooled: BTreeSet<&str> = self.pools.values().flat_map(|p| p.task_ids()).collect();
        for b in baselines {
            if pooled.contains(b.task.task_id.as_str()) {
                return Err(Error::SplitHygiene(b.task.task_id.clone()));
            }
        }
        Ok(())
    }

    fn resolve_fixed(&self, rule: TargetRule) -> Option<usize> {
        match rule {
            TargetRule::Fixed(i) => Some(i),
            TargetRule::PopTarget => Some(self.pop_target),
            TargetRule::NaivePopSeverity => Some(self.naive_target),
            _ => None,
        }
    }

    fn ccp(&self, base: &BaselineRecord, module: usize) -> Result<(Episode, Option<usize>)> {
        match self.patch_for(module) {
            Some(patch) => {
                let ep = run_pipeline_patched(
                    &base.task,
                    self.agent,
                    &InterventionSpec::none(),
                    Some(&base.episode),
                    base.episode.seed,
                    Some(&patch),
                )?;
                Ok((ep, Some(module)))
            }
            // empty pool: no-op patch
            None => Ok((base.episode.clone(), None)),
        }
    }

    /// Per-task NIE routing against the routing oracle. Falls back to no
    /// patch when the routing oracle fails.
    pub fn adaptive_route(&self, base: &BaselineRecord, mode: RoutingMode) -> Result<(RouteDecision, Episode)> {
        let no_patch = |nie, z| (RouteDecision { nie, z, chosen: None }, base.episode.clone());
        let Some(source) = self.routing_oracle else {
            warn!(task = %base.task.task_id, "no routing oracle configured; not patching");
            return Ok(no_patch(BTreeMap::new(), None));
        };
        let routing = match source.oracle_for(&base.task) {
            Ok(r) => r,
            Err(e) => {
                warn!(task = %base.task.task_id, error = %e, "routing oracle failed; not patching");
                return Ok(no_patch(BTreeMap::new(), None));
            }
        };
        let task = &base.task;
        // The baseline scoring against the routing oracle is the seventh of
        // the per-task judge calls (F(A), F(B) for M_2..M_4 plus this one).
        score(&base.episode, task, &routing, self.judge, self.agent)?;
        let mut nie = BTreeMap::new();
        for i in 2..=self.agent.layout().k() {
            let (a, b) = match world_pair(task, self.agent, &routing, i, &base.episode) {
                Ok(p) => p,
                Err(Error::Backend { index, message }) => {
                    warn!(task = %task.task_id, index, %message, "routing re-run failed; not patching");
                    return Ok(no_patch(nie, None));
                }
                Err(e) => return Err(e),
            };
            let (_, fa) = score(&a, task, &routing, self.judge, self.agent)?;
            let (_, fb) = score(&b, task, &routing, self.judge, self.agent)?;
            nie.insert(i, fa - fb);
        }
        let pick = |vals: &BTreeMap<usize, f64>| -> Option<(usize, f64)> {
            let mut best: Option<(usize, f64)> = None;
            for (&i, &v) in vals {
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((i, v));
                }
            }
            best
        };
        let (chosen, z) = match mode {
            RoutingMode::Absolute => {
                let fire = pick(&nie).filter(|(_, v)| *v > self.tau).map(|(i, _)| i);
                (fire, None)
            }
            RoutingMode::Zscore => {
                let z: BTreeMap<usize, f64> = nie.iter().map(|(&i, &v)| (i, self.routing.z(i, v))).collect();
                let fire = pick(&z).filter(|(_, v)| *v > self.routing.z_thr).map(|(i, _)| i);
                (fire, Some(z))
            }
        };
        let Some(target) = chosen else {
            return Ok(no_patch(nie, z));
        };
        let (ep, landed) = self.ccp(base, target)?;
        Ok((RouteDecision { nie, z, chosen: landed }, ep))
    }

    fn run_one(&self, config: &Configuration, base: &BaselineRecord) -> Result<(TaskOutcome, Episode)> {
        let task = &base.task;
        let (episode, target) = match (config.treatment, config.rule) {
            (Treatment::None, rule) => {
                let ep = run_pipeline(task, self.agent, &InterventionSpec::none(), None, base.episode.seed)?;
                (ep, rule.and_then(|r| self.resolve_fixed(r)))
            }
            (Treatment::OracleInject, Some(rule)) => {
                let module = self.resolve_fixed(rule).ok_or_else(|| {
                    Error::UnknownConfiguration(format!("{}: oracle injection needs a fixed target", config.tag))
                })?;
                let oracle = self.oracle.oracle_for(task)?;
                let spec = InterventionSpec::replace(module, oracle.get(module)?.clone());
                let ep = run_pipeline(task, self.agent, &spec, Some(&base.episode), base.episode.seed)?;
                (ep, Some(module))
            }
            (Treatment::Ccp, Some(rule)) => match rule {
                TargetRule::AdaptiveAbsNie => {
                    let (d, ep) = self.adaptive_route(base, RoutingMode::Absolute)?;
                    (ep, d.chosen)
                }
                TargetRule::AdaptiveZscore => {
                    let (d, ep) = self.adaptive_route(base, RoutingMode::Zscore)?;
                    (ep, d.chosen)
                }
                TargetRule::PerTaskSeverity => {
                    let source = self.routing_oracle.unwrap_or(self.oracle);
                    let routing = source.oracle_for(task)?;
                    let (sev, _) = score(&base.episode, task, &routing, self.judge, self.agent)?;
                    self.ccp(base, per_task_severity_target(&sev.sev)?)?
                }
                fixed => self.ccp(base, self.resolve_fixed(fixed).expect("fixed rule"))?,
            },
            (_, None) => {
                return Err(Error::UnknownConfiguration(format!(
                    "{}: treatment needs a target",
                    config.tag
                )))
            }
        };
        let oracle = self.oracle.oracle_for(task)?;
        let f = if target.is_none() && config.treatment == Treatment::Ccp {
            // unpatched: identical to baseline by construction
            base.f
        } else {
            score(&episode, task, &oracle, self.judge, self.agent)?.1
        };
        let tm = tool_match(&episode, &oracle, self.agent.layout()).unwrap_or(false);
        Ok((
            TaskOutcome {
                task_id: task.task_id.clone(),
                f_base: base.f,
                f_patched: f,
                delta: f - base.f,
                tool_match: tm,
                target,
            },
            episode,
        ))
    }

    pub fn run_configuration(
        &self,
        config: &Configuration,
        baselines: &[BaselineRecord],
    ) -> Result<ConfigurationResult> {
        self.check_split_hygiene(baselines)?;
        if baselines.is_empty() {
            return Err(Error::Empty("no prescription tasks".into()));
        }
        let rows = par::map_ordered(
            baselines,
            self.agent.concurrent() && self.judge.concurrent(),
            self.jobs,
            |b| self.run_one(config, b),
        )?;
        let (outcomes, episodes): (Vec<TaskOutcome>, Vec<Episode>) = rows.into_iter().unzip();
        let n = outcomes.len() as f64;
        let summary = ConfigurationSummary {
            tag: config.tag.clone(),
            n: outcomes.len(),
            mean_f_base: outcomes.iter().map(|o| o.f_base).sum::<f64>() / n,
            mean_f: outcomes.iter().map(|o| o.f_patched).sum::<f64>() / n,
            mean_delta: outcomes.iter().map(|o| o.delta).sum::<f64>() / n,
            tool_match_rate: outcomes.iter().filter(|o| o.tool_match).count() as f64 / n,
            patched_fraction: outcomes.iter().filter(|o| o.target.is_some()).count() as f64 / n,
        };
        Ok(ConfigurationResult {
            configuration: config.clone(),
            outcomes,
            summary,
            episodes,
        })
    }
}

/// comp_i / n at one module.
pub fn compensator_rate(census: &FateCensus, module: usize) -> Result<f64> {
    let m = census
        .module(module)
        .ok_or_else(|| Error::Empty(format!("no fate counts for module {module}")))?;
    let n = m.total();
    if n == 0 {
        return Err(Error::Empty(format!("no tasks counted at module {module}")));
    }
    Ok(m.compensator as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnosis::ModuleFates;

    fn cand(id: &str, sev: f64) -> CorrectionTriple {
        CorrectionTriple {
            task_id: id.into(),
            module_index: 2,
            input: format!("input {id}"),
            wrong: Payload::text(format!("wrong {id}")),
            correct: Payload::text(format!("right {id}")),
            severity: sev,
        }
    }

    #[test]
    fn pool_selection_rule() {
        let pool = select_pool(
            2,
            vec![cand("c1", 0.95), cand("c2", 0.70), cand("c3", 0.31), cand("c4", 0.29)],
            0.30,
            5,
        )
        .unwrap();
        let ids: Vec<&str> = pool.task_ids().collect();
        assert_eq!(ids, vec!["c1", "c2", "c3"]);

        let six: Vec<_> = (0..6).map(|i| cand(&format!("d{i}"), 0.5)).collect();
        assert_eq!(select_pool(2, six, 0.30, 5).unwrap().triples.len(), 5);

        let tie = select_pool(2, vec![cand("c12", 0.70), cand("c09", 0.70)], 0.30, 5).unwrap();
        assert_eq!(tie.task_ids().collect::<Vec<_>>(), vec!["c09", "c12"]);

        assert!(select_pool(2, vec![], 0.0, 5).is_err());
        assert!(select_pool(2, vec![], 0.3, 0).is_err());
        assert!(select_pool(2, vec![cand("x", 0.1)], 0.3, 5).unwrap().is_empty());
    }

    #[test]
    fn rendering_is_numbered_and_deterministic() {
        let one = select_pool(2, vec![cand("a", 0.7)], 0.3, 5).unwrap();
        let p = render_patch(&one);
        assert_eq!(p.rendered_block.matches("### Example").count(), 1);
        assert!(p.rendered_block.starts_with("### Example 1\nInput: input a\n"));

        let five = select_pool(
            2,
            (0..5).map(|i| cand(&format!("t{i}"), 0.9 - i as f64 * 0.1)).collect(),
            0.3,
            5,
        )
        .unwrap();
        let p5 = render_patch(&five);
        for j in 1..=5 {
            assert!(p5.rendered_block.contains(&format!("### Example {j}\n")));
        }
        let pos = |s: &str| p5.rendered_block.find(s).unwrap();
        assert!(pos("input t0") < pos("input t4"));
        assert_eq!(render_patch(&five), p5);

        let empty = select_pool(2, vec![], 0.3, 5).unwrap();
        assert_eq!(render_patch(&empty).rendered_block, "");
    }

    #[test]
    fn pool_file_detects_tampering() {
        let pool = select_pool(2, vec![cand("a", 0.7)], 0.3, 5).unwrap();
        let mut map = BTreeMap::new();
        map.insert(2, pool);
        let file = PoolFile::new(&map).unwrap();
        assert_eq!(file.clone().into_map().unwrap(), map);
        let mut bad = file;
        bad.pools[0].triples[0].severity = 0.9;
        assert!(bad.into_map().is_err());
    }

    #[test]
    fn configuration_tags() {
        assert_eq!(
            Configuration::parse("popccp@M3").unwrap().rule,
            Some(TargetRule::Fixed(3))
        );
        assert_eq!(
            Configuration::parse("oracle@pop").unwrap().treatment,
            Treatment::OracleInject
        );
        assert_eq!(Configuration::parse("rewrite@pop").unwrap().treatment, Treatment::None);
        assert_eq!(Configuration::parse("baseline").unwrap().rule, None);
        for tag in Configuration::default_tags() {
            Configuration::parse(tag).unwrap();
        }
        assert!(matches!(
            Configuration::parse("popccp@X"),
            Err(Error::UnknownConfiguration(_))
        ));
        assert!(matches!(
            Configuration::parse("magic"),
            Err(Error::UnknownConfiguration(_))
        ));
    }

    #[test]
    fn z_scores_and_zero_sigma() {
        let stats = RoutingStats {
            mu: BTreeMap::from([(2, 0.5), (3, 1.0), (4, 0.1)]),
            sigma: BTreeMap::from([(2, 0.1), (3, 0.2), (4, 0.05)]),
            z_thr: 1.0,
        };
        assert!((stats.z(2, 0.2) + 3.0).abs() < 1e-12);
        assert!((stats.z(3, 0.9) + 0.5).abs() < 1e-12);
        assert!(stats.z(4, 0.1).abs() < 1e-12);
        assert!((stats.z(3, 1.3) - 1.5).abs() < 1e-12);
        let flat = RoutingStats {
            mu: BTreeMap::from([(2, 0.0)]),
            sigma: BTreeMap::from([(2, 0.0)]),
            z_thr: 1.0,
        };
        assert_eq!(flat.z(2, 100.0), f64::NEG_INFINITY);
    }

    #[test]
    fn compensator_rate_examples() {
        let census = |comp: usize, n: usize| FateCensus {
            tau: 0.05,
            modules: vec![ModuleFates {
                module_index: 3,
                amplifier: 0,
                propagator: n - comp,
                compensator: comp,
                compensator_rate: 0.0,
            }],
        };
        assert!((compensator_rate(&census(491, 500), 3).unwrap() - 0.982).abs() < 1e-12);
        assert_eq!(compensator_rate(&census(0, 500), 3).unwrap(), 0.0);
        assert_eq!(compensator_rate(&census(7, 7), 3).unwrap(), 1.0);
        assert!(compensator_rate(&census(0, 0), 3).is_err());
        assert!(compensator_rate(&census(1, 1), 2).is_err());
    }
}
