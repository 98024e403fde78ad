//! Causal contributions, mediation triples, fates and censuses.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::pipeline::{
    module_input_text, run_pipeline, world_pair, Agent, Episode, InterventionSpec, OracleSet, OutputKind, Payload, Task,
};
use crate::scoring::{judge_episode, Judge, SeverityVector};

/// Default fate threshold.
pub const DEFAULT_TAU: f64 = 0.05;

/// Severities and F of one episode against an oracle.
pub fn score(
    episode: &Episode,
    task: &Task,
    oracle: &OracleSet,
    judge: &dyn Judge,
    agent: &dyn Agent,
) -> Result<(SeverityVector, f64)> {
    let sev = judge_episode(episode, oracle, judge, agent.layout(), &task.user_query)?;
    let f = sev.failure_index()?;
    Ok((sev, f))
}

/// ΔF_i = F(baseline) − F(do(M_i = S*_i)) for every module.
pub fn causal_contribution(
    task: &Task,
    agent: &dyn Agent,
    oracle: &OracleSet,
    judge: &dyn Judge,
    baseline: &Episode,
) -> Result<Vec<f64>> {
    oracle.covers(agent.layout())?;
    let (_, f_base) = score(baseline, task, oracle, judge, agent)?;
    agent
        .layout()
        .slots()
        .iter()
        .map(|slot| {
            let spec = InterventionSpec::replace(slot.index, oracle.get(slot.index)?.clone());
            let ep = run_pipeline(task, agent, &spec, Some(baseline), baseline.seed)?;
            let (_, f) = score(&ep, task, oracle, judge, agent)?;
            Ok(f_base - f)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediationTriple {
    pub task_id: String,
    pub module_index: usize,
    #[serde(rename = "TE")]
    pub te: f64,
    #[serde(rename = "NDE")]
    pub nde: f64,
    #[serde(rename = "NIE")]
    pub nie: f64,
}

/// Triple from the three failure indices. TE is taken directly as
/// F(A) − F(baseline), so TE = NDE + NIE holds only up to rounding.
pub fn triple_from_scores(task_id: &str, i: usize, f_base: f64, f_a: f64, f_b: f64) -> MediationTriple {
    let nie = f_a - f_b;
    let nde = f_b - f_base;
    MediationTriple {
        task_id: task_id.to_string(),
        module_index: i,
        te: f_a - f_base,
        nde,
        nie,
    }
}

/// NIE = F(A) − F(B), NDE = F(B) − F(baseline), TE = F(A) − F(baseline).
pub fn mediation(
    task: &Task,
    agent: &dyn Agent,
    oracle: &OracleSet,
    judge: &dyn Judge,
    baseline: &Episode,
    i: usize,
) -> Result<MediationTriple> {
    let (a, b) = world_pair(task, agent, oracle, i, baseline)?;
    let (_, f_base) = score(baseline, task, oracle, judge, agent)?;
    let (_, f_a) = score(&a, task, oracle, judge, agent)?;
    let (_, f_b) = score(&b, task, oracle, judge, agent)?;
    Ok(triple_from_scores(&task.task_id, i, f_base, f_a, f_b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fate {
    Amplifier,
    Propagator,
    Compensator,
}

impl std::fmt::Display for Fate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fate::Amplifier => "amplifier",
            Fate::Propagator => "propagator",
            Fate::Compensator => "compensator",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FateLabel {
    pub label: Fate,
    pub tau: f64,
}

/// Strict thresholds: |NIE| = τ is a propagator.
pub fn classify_fate(nie: f64, tau: f64) -> FateLabel {
    let label = if nie > tau {
        Fate::Amplifier
    } else if nie < -tau {
        Fate::Compensator
    } else {
        Fate::Propagator
    };
    FateLabel { label, tau }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleFates {
    pub module_index: usize,
    pub amplifier: usize,
    pub propagator: usize,
    pub compensator: usize,
    pub compensator_rate: f64,
}

impl ModuleFates {
    pub fn total(&self) -> usize {
        self.amplifier + self.propagator + self.compensator
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FateCensus {
    pub tau: f64,
    pub modules: Vec<ModuleFates>,
}

impl FateCensus {
    pub fn module(&self, index: usize) -> Option<&ModuleFates> {
        self.modules.iter().find(|m| m.module_index == index)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "fate threshold must be positive, got {tau}"
        )))
    }
}

/// Fate counts per module from cached NIE values.
pub fn fate_census(triples: &[MediationTriple], tau: f64) -> Result<FateCensus> {
    check_tau(tau)?;
    let mut by_module: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
    for t in triples {
        let counts = by_module.entry(t.module_index).or_default();
        match classify_fate(t.nie, tau).label {
            Fate::Amplifier => counts[0] += 1,
            Fate::Propagator => counts[1] += 1,
            Fate::Compensator => counts[2] += 1,
        }
    }
    let modules = by_module
        .into_iter()
        .map(|(module_index, [amplifier, propagator, compensator])| {
            let total = amplifier + propagator + compensator;
            ModuleFates {
                module_index,
                amplifier,
                propagator,
                compensator,
                compensator_rate: compensator as f64 / total as f64,
            }
        })
        .collect();
    Ok(FateCensus { tau, modules })
}

/// One census per τ (ascending, positive), recomputed from stored NIE.
pub fn tau_sensitivity(triples: &[MediationTriple], taus: &[f64]) -> Result<Vec<FateCensus>> {
    for w in taus.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidArgument("τ values must be strictly ascending".into()));
        }
    }
    taus.iter().map(|&t| fate_census(triples, t)).collect()
}

fn argmax_lowest(means: &[f64]) -> Result<usize> {
    if means.is_empty() {
        return Err(Error::Empty("no modules to choose from".into()));
    }
    let mut best = 0;
    for (i, &m) in means.iter().enumerate() {
        if m > means[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

fn column_means(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| Error::Empty("empty sweep".into()))?;
    let k = first.len();
    let mut sums = vec![0.0; k];
    for r in rows {
        if r.len() != k {
            return Err(Error::LengthMismatch(format!(
                "row of length {} in sweep of width {k}",
                r.len()
            )));
        }
        for (s, v) in sums.iter_mut().zip(r) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / rows.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalSweepResult {
    pub per_task: BTreeMap<String, Vec<f64>>,
    pub means: Vec<f64>,
    pub pop_target: usize,
}

impl CausalSweepResult {
    pub fn from_per_task(per_task: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = per_task.values().cloned().collect();
        let means = column_means(&rows)?;
        let pop_target = argmax_lowest(&means)?;
        Ok(Self {
            per_task,
            means,
            pop_target,
        })
    }
}

/// Module with the largest mean ΔF; ties go to the lowest index.
pub fn population_target(sweep: &CausalSweepResult) -> Result<usize> {
    if sweep.per_task.is_empty() {
        return Err(Error::Empty("empty sweep".into()));
    }
    argmax_lowest(&sweep.means)
}

pub fn population_target_from_means(means: &[f64]) -> Result<usize> {
    argmax_lowest(means)
}

/// Module with the largest mean baseline severity.
pub fn naive_severity_target(severities: &[Vec<f64>]) -> Result<usize> {
    argmax_lowest(&column_means(severities)?)
}

/// Module with the largest severity on one task.
pub fn per_task_severity_target(sev: &[f64]) -> Result<usize> {
    argmax_lowest(sev)
}

/// Everything the diagnosis sweep learns about one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDiagnosis {
    pub task_id: String,
    pub baseline_sev: Vec<f64>,
    pub baseline_f: f64,
    pub delta_f: Vec<f64>,
    pub mediation: Vec<MediationTriple>,
    /// What each module saw on the baseline run.
    pub module_inputs: Vec<String>,
    pub baseline_payloads: Vec<Payload>,
    pub oracle_payloads: Vec<Payload>,
}

pub fn diagnose_task(
    task: &Task,
    agent: &dyn Agent,
    oracle: &OracleSet,
    judge: &dyn Judge,
    baseline: &Episode,
) -> Result<TaskDiagnosis> {
    let layout = agent.layout();
    oracle.covers(layout)?;
    let (sev, f_base) = score(baseline, task, oracle, judge, agent)?;
    let delta_f = causal_contribution(task, agent, oracle, judge, baseline)?;
    let mut triples = Vec::new();
    for i in 2..=layout.k() {
        let (a, b) = world_pair(task, agent, oracle, i, baseline)?;
        let (_, f_a) = score(&a, task, oracle, judge, agent)?;
        let (_, f_b) = score(&b, task, oracle, judge, agent)?;
        triples.push(triple_from_scores(&task.task_id, i, f_base, f_a, f_b));
    }
    let payloads = baseline.payloads();
    let module_inputs = (0..layout.k())
        .map(|i| module_input_text(task, &payloads[..i]))
        .collect();
    Ok(TaskDiagnosis {
        task_id: task.task_id.clone(),
        baseline_sev: sev.sev,
        baseline_f: f_base,
        delta_f,
        mediation: triples,
        module_inputs,
        baseline_payloads: payloads,
        oracle_payloads: layout
            .slots()
            .iter()
            .map(|s| oracle.get(s.index).cloned())
            .collect::<Result<_>>()?,
    })
}

/// Runs `diagnose_task` over aligned (task, oracle, baseline) triples.
pub fn diagnose_all(
    tasks: &[Task],
    oracles: &[OracleSet],
    baselines: &[Episode],
    agent: &dyn Agent,
    judge: &dyn Judge,
    jobs: usize,
) -> Result<Vec<TaskDiagnosis>> {
    if tasks.len() != oracles.len() || tasks.len() != baselines.len() {
        return Err(Error::LengthMismatch(format!(
            "{} tasks, {} oracles, {} baselines",
            tasks.len(),
            oracles.len(),
            baselines.len()
        )));
    }
    let idx: Vec<usize> = (0..tasks.len()).collect();
    par::map_ordered(&idx, agent.concurrent() && judge.concurrent(), jobs, |&i| {
        diagnose_task(&tasks[i], agent, &oracles[i], judge, &baselines[i])
    })
}

/// Aggregate view over a diagnosis split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisSummary {
    pub n: usize,
    pub mean_delta_f: Vec<f64>,
    pub pop_target: usize,
    pub mean_severity: Vec<f64>,
    pub naive_target: usize,
    /// Mean NIE per mediable module (index ≥ 2).
    pub mean_nie: BTreeMap<usize, f64>,
    pub censuses: Vec<FateCensus>,
    pub tau: f64,
}

pub fn summarize(diags: &[TaskDiagnosis], tau: f64, tau_sweep: &[f64]) -> Result<DiagnosisSummary> {
    let sweep =
        CausalSweepResult::from_per_task(diags.iter().map(|d| (d.task_id.clone(), d.delta_f.clone())).collect())?;
    let sev_rows: Vec<Vec<f64>> = diags.iter().map(|d| d.baseline_sev.clone()).collect();
    let triples: Vec<MediationTriple> = diags.iter().flat_map(|d| d.mediation.clone()).collect();
    let mut nie_sum: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for t in &triples {
        let e = nie_sum.entry(t.module_index).or_default();
        e.0 += t.nie;
        e.1 += 1;
    }
    let mut taus: Vec<f64> = tau_sweep.to_vec();
    if !taus.contains(&tau) {
        taus.push(tau);
    }
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    Ok(DiagnosisSummary {
        n: diags.len(),
        pop_target: population_target(&sweep)?,
        mean_delta_f: sweep.means,
        naive_target: naive_severity_target(&sev_rows)?,
        mean_severity: column_means(&sev_rows)?,
        mean_nie: nie_sum.into_iter().map(|(i, (s, n))| (i, s / n as f64)).collect(),
        censuses: tau_sensitivity(&triples, &taus)?,
        tau,
    })
}

/// CSV: task_id, module, dF, TE, NDE, NIE, fate (mediation columns empty
/// for module 1).
pub fn write_sweep_csv<W: Write>(diags: &[TaskDiagnosis], tau: f64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task_id", "module", "dF", "TE", "NDE", "NIE", "fate"])?;
    for d in diags {
        for (i, df) in d.delta_f.iter().enumerate() {
            let module = i + 1;
            let row = match d.mediation.iter().find(|t| t.module_index == module) {
                Some(t) => vec![
                    d.task_id.clone(),
                    module.to_string(),
                    df.to_string(),
                    t.te.to_string(),
                    t.nde.to_string(),
                    t.nie.to_string(),
                    classify_fate(t.nie, tau).label.to_string(),
                ],
                None => vec![
                    d.task_id.clone(),
                    module.to_string(),
                    df.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ],
            };
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Whether the first tool-call module picked the oracle's tool.
pub fn tool_match(episode: &Episode, oracle: &OracleSet, kind_slots: &crate::pipeline::PipelineLayout) -> Option<bool> {
    let i = kind_slots.first_of_kind(OutputKind::ToolCall)?;
    match (episode.payload(i).ok()?, oracle.get(i).ok()?) {
        (Payload::ToolCall { tool: a, .. }, Payload::ToolCall { tool: b, .. }) => Some(a == b),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triples(nies: &[f64]) -> Vec<MediationTriple> {
        nies.iter()
            .enumerate()
            .map(|(i, &nie)| MediationTriple {
                task_id: format!("t{i}"),
                module_index: 3,
                te: nie,
                nde: 0.0,
                nie,
            })
            .collect()
    }

    #[test]
    fn fate_boundaries() {
        assert_eq!(classify_fate(-0.2, 0.05).label, Fate::Compensator);
        assert_eq!(classify_fate(0.05, 0.05).label, Fate::Propagator);
        assert_eq!(classify_fate(-0.05, 0.05).label, Fate::Propagator);
        assert_eq!(classify_fate(0.0501, 0.05).label, Fate::Amplifier);
    }

    #[test]
    fn tau_sweep_hand_classification() {
        let t = triples(&[-0.03, -0.07, 0.15]);
        let cs = tau_sensitivity(&t, &[0.01, 0.05, 0.20]).unwrap();
        let counts = |c: &FateCensus| {
            let m = c.module(3).unwrap();
            (m.amplifier, m.propagator, m.compensator)
        };
        assert_eq!(counts(&cs[0]), (1, 0, 2));
        assert_eq!(counts(&cs[1]), (1, 1, 1));
        assert_eq!(counts(&cs[2]), (0, 3, 0));
        assert_eq!(cs[1], fate_census(&t, 0.05).unwrap());
        assert!(tau_sensitivity(&t, &[0.05, 0.01]).is_err());
        assert!(fate_census(&t, 0.0).is_err());
    }

    #[test]
    fn census_of_zero_nie_is_all_propagators() {
        let c = fate_census(&triples(&[0.0; 5]), 0.05).unwrap();
        let m = c.module(3).unwrap();
        assert_eq!((m.amplifier, m.propagator, m.compensator), (0, 5, 0));
        assert_eq!(m.compensator_rate, 0.0);
    }

    #[test]
    fn target_rules() {
        assert_eq!(population_target_from_means(&[0.357, 0.817, 1.018, 0.589]).unwrap(), 3);
        assert_eq!(population_target_from_means(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 1);
        assert_eq!(population_target_from_means(&[2.0, 1.0, 1.0, 1.0]).unwrap(), 1);
        assert!(population_target_from_means(&[]).is_err());
        assert_eq!(naive_severity_target(&[vec![0.1, 0.2, 0.9, 0.3]]).unwrap(), 3);
        assert_eq!(naive_severity_target(&[vec![0.0; 4], vec![0.0; 4]]).unwrap(), 1);
        assert!(naive_severity_target(&[]).is_err());
        let empty = CausalSweepResult {
            per_task: BTreeMap::new(),
            means: vec![],
            pop_target: 1,
        };
        assert!(population_target(&empty).is_err());
    }

    #[test]
    fn telescoping_triple() {
        let t = triple_from_scores("x", 2, 4.1997, 1.2, 3.3);
        assert!((t.te - t.nde - t.nie).abs() < 1e-12);
        assert!((t.nie - (1.2 - 3.3)).abs() < 1e-12);
        assert!((t.nde - (3.3 - 4.1997)).abs() < 1e-12);
    }
}
