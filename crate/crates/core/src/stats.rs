//! Paired tests, multiplicity correction, effect sizes, agreement and
//! distributional shift.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::pipeline::{Episode, OutputKind, Payload, PipelineLayout};
use crate::text::term_frequencies;

/// Largest number of nonzero differences for which `Auto` enumerates.
pub const EXACT_AUTO_LIMIT: usize = 20;
const EXACT_HARD_LIMIT: usize = 120;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub baseline: Vec<f64>,
    pub treated: Vec<f64>,
    pub labels: Vec<String>,
}

impl PairedSample {
    pub fn new(baseline: Vec<f64>, treated: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if baseline.len() != treated.len() || baseline.len() != labels.len() {
            return Err(Error::LengthMismatch(format!(
                "baseline {}, treated {}, labels {}",
                baseline.len(),
                treated.len(),
                labels.len()
            )));
        }
        Ok(Self {
            baseline,
            treated,
            labels,
        })
    }

    /// Unlabeled sample from raw differences (baseline zero).
    pub fn from_differences(diffs: &[f64]) -> Self {
        Self {
            baseline: vec![0.0; diffs.len()],
            treated: diffs.to_vec(),
            labels: (0..diffs.len()).map(|i| i.to_string()).collect(),
        }
    }

    /// treated − baseline.
    pub fn differences(&self) -> Vec<f64> {
        self.treated.iter().zip(&self.baseline).map(|(t, b)| t - b).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMode {
    Exact,
    NormalApprox,
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// W+, the rank sum of positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub exact: bool,
}

/// Average ranks (1-based) of the values; ties share the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired Wilcoxon signed-rank test. Zero differences are
/// dropped; tied magnitudes get average ranks.
pub fn wilcoxon_signed_rank(sample: &PairedSample, mode: WilcoxonMode) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = sample.differences().into_iter().filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("non-finite difference".into()));
    }
    if diffs.is_empty() {
        return Err(Error::Degenerate("no nonzero differences".into()));
    }
    let m = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    let exact = match mode {
        WilcoxonMode::Exact => true,
        WilcoxonMode::NormalApprox => false,
        WilcoxonMode::Auto => m <= EXACT_AUTO_LIMIT,
    };
    let p_value = if exact {
        if m > EXACT_HARD_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "exact distribution limited to {EXACT_HARD_LIMIT} nonzero differences, got {m}"
            )));
        }
        exact_two_sided(&ranks, w_plus)
    } else {
        let mean = ranks.iter().sum::<f64>() / 2.0;
        let var = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.sf(z.abs())).min(1.0)
    };
    Ok(WilcoxonResult {
        statistic: w_plus,
        p_value,
        n: m,
        exact,
    })
}

/// Null distribution by dynamic programming over doubled (integer) ranks.
fn exact_two_sided(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u128; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let observed = (w_plus * 2.0).round() as i64;
    let t = total as i64;
    let dev = (2 * observed - t).abs();
    let extreme: u128 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (2 * *s as i64 - t).abs() >= dev)
        .map(|(_, c)| *c)
        .sum();
    let all: u128 = 1u128 << doubled.len();
    (extreme as f64 / all as f64).min(1.0)
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_correction(raw: &[f64]) -> Result<Vec<f64>> {
    for &p in raw {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("p-value {p} outside [0, 1]")));
        }
    }
    let m = raw.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
    let mut adjusted = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        let candidate = ((m - rank) as f64 * raw[idx]).min(1.0);
        running = running.max(candidate);
        adjusted[idx] = running;
    }
    Ok(adjusted)
}

/// Paired Cohen's d_z: mean difference over its sample standard deviation.
pub fn cohens_dz(sample: &PairedSample) -> Result<f64> {
    let d = sample.differences();
    if d.len() < 2 {
        return Err(Error::Degenerate("d_z needs at least two pairs".into()));
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::Degenerate("zero variance of differences".into()));
    }
    Ok(mean / var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Pearson,
    Spearman,
}

fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant input to correlation".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation coefficient with a two-sided p-value from the t approximation.
pub fn correlation(x: &[f64], y: &[f64], kind: CorrelationKind) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!("x {}, y {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Degenerate("correlation needs at least three points".into()));
    }
    let r = match kind {
        CorrelationKind::Pearson => pearson_r(x, y)?,
        CorrelationKind::Spearman => pearson_r(&average_ranks(x), &average_ranks(y))?,
    };
    let df = (x.len() - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok((r, p))
}

/// Interval-metric Krippendorff's alpha for two raters with no missing
/// values.
pub fn krippendorff_alpha_interval(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(format!(
            "rater a {}, rater b {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Degenerate("alpha needs at least two units".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len() as f64;
    // Σ over ordered pairs i≠j of (v_i - v_j)^2 = 2 (N Σv² - (Σv)²)
    let sum: f64 = pooled.iter().sum();
    let sum_sq: f64 = pooled.iter().map(|v| v * v).sum();
    let expected = 2.0 * (n * sum_sq - sum * sum);
    if expected <= 0.0 {
        return Err(Error::Degenerate(
            "zero expected disagreement (all ratings identical)".into(),
        ));
    }
    // each unit contributes two ordered pairs, divided by (m_u - 1) = 1
    let observed: f64 = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y).powi(2)).sum();
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Cosine of term-frequency vectors. Both empty → 1, one empty → 0.
pub fn bow_cosine(a: &str, b: &str) -> f64 {
    let ta = term_frequencies(a);
    let tb = term_frequencies(b);
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let dot: f64 = ta
        .iter()
        .filter_map(|(t, x)| tb.get(t).map(|y| f64::from(*x) * f64::from(*y)))
        .sum();
    let na: f64 = ta.values().map(|x| f64::from(*x).powi(2)).sum();
    let nb: f64 = tb.values().map(|x| f64::from(*x).powi(2)).sum();
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

/// Cosine of two dense vectors; used with host-supplied embeddings.
pub fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub label: String,
    pub raw_p: f64,
    pub holm_p: f64,
    pub d_z: f64,
    pub n: usize,
    pub statistic: f64,
    pub mean_difference: f64,
}

/// Wilcoxon + d_z for each comparison, Holm-adjusted as one family.
pub fn comparison_family(samples: &[(String, PairedSample)], mode: WilcoxonMode) -> Result<Vec<StatReport>> {
    let mut partial = Vec::with_capacity(samples.len());
    for (label, sample) in samples {
        let d = sample.differences();
        let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let (statistic, raw_p, n) = match wilcoxon_signed_rank(sample, mode) {
            Ok(w) => (w.statistic, w.p_value, w.n),
            // identical arms: no evidence of a difference
            Err(Error::Degenerate(_)) => (0.0, 1.0, 0),
            Err(e) => return Err(e),
        };
        let d_z = match cohens_dz(sample) {
            Ok(v) => v,
            Err(Error::Degenerate(_)) => 0.0,
            Err(e) => return Err(e),
        };
        partial.push((label.clone(), raw_p, d_z, n, statistic, mean));
    }
    let raw: Vec<f64> = partial.iter().map(|p| p.1).collect();
    let holm = holm_correction(&raw)?;
    Ok(partial
        .into_iter()
        .zip(holm)
        .map(
            |((label, raw_p, d_z, n, statistic, mean_difference), holm_p)| StatReport {
                label,
                raw_p,
                holm_p,
                d_z,
                n,
                statistic,
                mean_difference,
            },
        )
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftTable {
    /// Mean BoW cosine to baseline, one entry per module.
    pub cosine: Vec<f64>,
    /// Mean host-embedding cosine per module, when an embedding hook was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_cosine: Option<Vec<f64>>,
    pub intent_disagreement: Option<f64>,
    pub tool_disagreement: Option<f64>,
    pub slot_key_jaccard: Option<f64>,
    pub n: usize,
}

pub type EmbeddingHook<'a> = &'a (dyn Fn(&str) -> Vec<f64> + Sync);

fn jaccard(a: &BTreeSet<&String>, b: &BTreeSet<&String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Per-module shift between aligned baseline and treated episodes.
pub fn cascade_shift(
    layout: &PipelineLayout,
    baseline: &[Episode],
    treated: &[Episode],
    embed: Option<EmbeddingHook<'_>>,
) -> Result<ShiftTable> {
    if baseline.len() != treated.len() {
        return Err(Error::LengthMismatch(format!(
            "baseline {} episodes, treated {}",
            baseline.len(),
            treated.len()
        )));
    }
    if baseline.is_empty() {
        return Err(Error::Empty("no episodes to compare".into()));
    }
    let k = layout.k();
    let n = baseline.len() as f64;
    let mut cos = vec![0.0; k];
    let mut emb = vec![0.0; k];
    let intent_slot = layout.first_of_kind(OutputKind::IntentLabel);
    let tool_slot = layout.first_of_kind(OutputKind::ToolCall);
    let (mut intent_dis, mut tool_dis, mut jac) = (0.0, 0.0, 0.0);
    for (b, t) in baseline.iter().zip(treated) {
        if b.task_id != t.task_id {
            return Err(Error::LengthMismatch(format!(
                "misaligned task sets: {} vs {}",
                b.task_id, t.task_id
            )));
        }
        if b.outputs.len() != k || t.outputs.len() != k {
            return Err(Error::LengthMismatch(format!("episode {} has wrong arity", b.task_id)));
        }
        for i in 0..k {
            let rb = b.outputs[i].payload.render();
            let rt = t.outputs[i].payload.render();
            cos[i] += bow_cosine(&rb, &rt);
            if let Some(f) = embed {
                emb[i] += dense_cosine(&f(&rb), &f(&rt));
            }
        }
        if let Some(i) = intent_slot {
            if let (Payload::Intent { intent: ib, slots: sb }, Payload::Intent { intent: it, slots: st }) =
                (&b.outputs[i - 1].payload, &t.outputs[i - 1].payload)
            {
                if ib != it {
                    intent_dis += 1.0;
                }
                jac += jaccard(&sb.keys().collect(), &st.keys().collect());
            }
        }
        if let Some(i) = tool_slot {
            if let (Payload::ToolCall { tool: tb, .. }, Payload::ToolCall { tool: tt, .. }) =
                (&b.outputs[i - 1].payload, &t.outputs[i - 1].payload)
            {
                if tb != tt {
                    tool_dis += 1.0;
                }
            }
        }
    }
    Ok(ShiftTable {
        cosine: cos.into_iter().map(|c| c / n).collect(),
        embedding_cosine: embed.map(|_| emb.into_iter().map(|c| c / n).collect()),
        intent_disagreement: intent_slot.map(|_| intent_dis / n),
        tool_disagreement: tool_slot.map(|_| tool_dis / n),
        slot_key_jaccard: intent_slot.map(|_| jac / n),
        n: baseline.len(),
    })
}
