//! Per-module severities and the scalar failure index F.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Episode, ModuleSlot, OracleSet, Payload, PipelineLayout};
use crate::text::term_frequencies;

/// Highest severity a judge may assign; keeps F finite.
pub const SEVERITY_CEILING: f64 = 0.99;

/// Rubric tiers of the deterministic judge.
pub const SEV_EXACT: f64 = 0.0;
pub const SEV_SURFACE: f64 = 0.30;
pub const SEV_FORMAT: f64 = 0.70;
pub const SEV_TOOL: f64 = 0.95;

pub fn clamp_severity(s: f64) -> f64 {
    if s.is_nan() {
        return s;
    }
    s.clamp(0.0, SEVERITY_CEILING)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityVector {
    pub sev: Vec<f64>,
    pub judge_tag: String,
}

impl SeverityVector {
    /// Clamps every entry into [0, 0.99].
    pub fn new(sev: impl IntoIterator<Item = f64>, judge_tag: impl Into<String>) -> Self {
        Self {
            sev: sev.into_iter().map(clamp_severity).collect(),
            judge_tag: judge_tag.into(),
        }
    }

    pub fn failure_index(&self) -> Result<f64> {
        failure_index(&self.sev)
    }
}

/// F = -Σ ln(1 - sev_i).
pub fn failure_index(sev: &[f64]) -> Result<f64> {
    let mut f = 0.0;
    for (i, &s) in sev.iter().enumerate() {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::SeverityOutOfRange { index: i + 1, value: s });
        }
        f -= (1.0 - s).ln();
    }
    // -ln(1) is -0.0; report a clean zero
    Ok(if f == 0.0 { 0.0 } else { f })
}

pub trait Judge: Send + Sync {
    fn tag(&self) -> String;

    fn concurrent(&self) -> bool {
        true
    }

    /// Severity of `output` against `oracle` for one module, before clamping.
    fn score(&self, slot: &ModuleSlot, input: &str, output: &Payload, oracle: &Payload) -> Result<f64>;
}

/// Deterministic tiered rubric.
///
/// exact match → 0.0; surface-only difference (same normalized token
/// multiset) → 0.30; content, intent or slot-format mismatch → 0.70;
/// tool-name mismatch → 0.95.
#[derive(Clone, Copy, Debug, Default)]
pub struct RubricJudge;

fn same_tokens(a: &str, b: &str) -> bool {
    term_frequencies(a) == term_frequencies(b)
}

fn map_tier(a: &std::collections::BTreeMap<String, String>, b: &std::collections::BTreeMap<String, String>) -> f64 {
    if a == b {
        return SEV_EXACT;
    }
    if a.keys().ne(b.keys()) {
        return SEV_FORMAT;
    }
    if a.iter().zip(b.iter()).all(|((_, va), (_, vb))| same_tokens(va, vb)) {
        SEV_SURFACE
    } else {
        SEV_FORMAT
    }
}

impl RubricJudge {
    pub fn tier(output: &Payload, oracle: &Payload) -> Result<f64> {
        Ok(match (output, oracle) {
            (Payload::Text { text: a }, Payload::Text { text: b }) => {
                if a == b {
                    SEV_EXACT
                } else if same_tokens(a, b) {
                    SEV_SURFACE
                } else {
                    SEV_FORMAT
                }
            }
            (Payload::Intent { intent: ia, slots: sa }, Payload::Intent { intent: ib, slots: sb }) => {
                if ia != ib {
                    SEV_FORMAT
                } else {
                    map_tier(sa, sb)
                }
            }
            (Payload::ToolCall { tool: ta, args: aa }, Payload::ToolCall { tool: tb, args: ab }) => {
                if ta != tb {
                    SEV_TOOL
                } else {
                    map_tier(aa, ab)
                }
            }
            (a, b) => {
                return Err(Error::Judge(format!(
                    "cannot compare {} output with {} oracle",
                    a.kind(),
                    b.kind()
                )))
            }
        })
    }
}

impl Judge for RubricJudge {
    fn tag(&self) -> String {
        "rubric".into()
    }

    fn score(&self, _slot: &ModuleSlot, _input: &str, output: &Payload, oracle: &Payload) -> Result<f64> {
        Self::tier(output, oracle)
    }
}

/// Scores every module of an episode against the oracle.
pub fn judge_episode(
    episode: &Episode,
    oracle: &OracleSet,
    judge: &dyn Judge,
    layout: &PipelineLayout,
    user_query: &str,
) -> Result<SeverityVector> {
    if episode.outputs.len() != layout.k() {
        return Err(Error::LengthMismatch(format!(
            "episode has {} outputs, layout has {}",
            episode.outputs.len(),
            layout.k()
        )));
    }
    let mut sev = Vec::with_capacity(layout.k());
    let mut input = format!("query: {user_query}");
    for slot in layout.slots() {
        let out = &episode.outputs[slot.index - 1].payload;
        let gold = oracle.get(slot.index)?;
        sev.push(judge.score(slot, &input, out, gold)?);
        input.push_str(&format!(" | M{}: {}", slot.index, out.render()));
    }
    Ok(SeverityVector::new(sev, judge.tag()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub task_id: String,
    #[serde(rename = "F")]
    pub f: f64,
    pub severity: SeverityVector,
    pub configuration_tag: String,
}

impl FailureRecord {
    pub fn new(
        task_id: impl Into<String>,
        severity: SeverityVector,
        configuration_tag: impl Into<String>,
    ) -> Result<Self> {
        let f = severity.failure_index()?;
        Ok(Self {
            task_id: task_id.into(),
            f,
            severity,
            configuration_tag: configuration_tag.into(),
        })
    }
}

/// CSV columns: task_id, configuration_tag, F, sev_1..sev_k.
pub fn write_failure_csv<W: Write>(records: &[FailureRecord], k: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["task_id".to_string(), "configuration_tag".into(), "F".into()];
    header.extend((1..=k).map(|i| format!("sev_{i}")));
    w.write_record(&header)?;
    for r in records {
        if r.severity.sev.len() != k {
            return Err(Error::LengthMismatch(format!(
                "record {} has {} severities, expected {k}",
                r.task_id,
                r.severity.sev.len()
            )));
        }
        let mut row = vec![r.task_id.clone(), r.configuration_tag.clone(), format!("{}", r.f)];
        row.extend(r.severity.sev.iter().map(|s| format!("{s}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads (task_id, severities) rows back from a failure CSV.
pub fn read_failure_csv<R: std::io::Read>(input: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let sev_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("sev_"))
        .map(|(i, _)| i)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let sev = sev_cols
            .iter()
            .map(|&c| {
                rec.get(c)
                    .unwrap_or_default()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("severity column {c}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, sev));
    }
    Ok(rows)
}
