//! Faithfulness metrics: the violation test plus AUC-TP, sufficiency,
//! comprehensiveness and rank correlation, per replacement strategy and
//! averaged across strategies.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::explain::{explain, ExplainConfig, Explanation, Method};
use crate::models::{predict_traced, Classifier};
use crate::perturb::{
    delta_confidence_from, perturbed_confidence, rank_by_magnitude, top_fraction_indices, Reference, ReplacementStrategy,
    SelectMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Violation,
    AucTp,
    Sufficiency,
    Comprehensiveness,
    RankCorrelation,
}

impl Metric {
    pub const ALL: [Metric; 5] =
        [Metric::AucTp, Metric::Violation, Metric::Sufficiency, Metric::Comprehensiveness, Metric::RankCorrelation];
}

/// What "performance" means on the AUC-TP curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TpPerformance {
    #[default]
    Accuracy,
    /// Mean confidence of the originally predicted class.
    Confidence,
}

/// How the rank-correlation perturbation `x \ x_{:j}` is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankRemoval {
    /// Remove only the rank-j token.
    #[default]
    SingleToken,
    /// Remove the top-j tokens together.
    CumulativePrefix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Sparsity levels for sufficiency and comprehensiveness, as fractions.
    pub levels: Vec<f64>,
    /// AUC-TP thresholds as fractions, starting at 0.
    pub thresholds: Vec<f64>,
    pub strategies: Vec<ReplacementStrategy>,
    pub metrics: Vec<Metric>,
    pub tp_performance: TpPerformance,
    pub rank_removal: RankRemoval,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            levels: vec![0.05, 0.1, 0.2, 0.5],
            thresholds: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            strategies: ReplacementStrategy::DEFAULT_SET.to_vec(),
            metrics: Metric::ALL.to_vec(),
            tp_performance: TpPerformance::Accuracy,
            rank_removal: RankRemoval::SingleToken,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let sorted = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.levels.is_empty() || !sorted(&self.levels) || self.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(invalid("sparsity levels must be ascending fractions in (0, 1)"));
        }
        if self.thresholds.len() < 2 || self.thresholds[0] != 0.0 || !sorted(&self.thresholds) || self.thresholds.iter().any(|t| *t >= 1.0) {
            return Err(invalid("AUC-TP thresholds must ascend from 0 and stay below 1"));
        }
        if self.strategies.is_empty() {
            return Err(invalid("no replacement strategy configured"));
        }
        Ok(())
    }

    pub fn wants(&self, m: Metric) -> bool {
        self.metrics.contains(&m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub example_id: String,
    /// Most influential token `x*`; `None` for an all-zero explanation.
    pub index: Option<usize>,
    pub weight: f64,
    pub delta: f64,
    /// `None` when undefined (all-zero explanation).
    pub violation: Option<bool>,
    pub strategy: ReplacementStrategy,
}

/// Polarity disagreement: `w(x*) · ΔC < 0`, strictly.
pub fn is_violation(weight: f64, delta: f64) -> bool {
    weight * delta < 0.0
}

pub fn violation_test(
    model: &dyn Classifier,
    example_id: &str,
    tokens: &[usize],
    reference: &Reference,
    explanation: &Explanation,
    strategy: ReplacementStrategy,
) -> Result<ViolationRecord> {
    check_length(tokens, explanation)?;
    if explanation.is_all_zero() {
        return Ok(ViolationRecord { example_id: example_id.into(), index: None, weight: 0.0, delta: 0.0, violation: None, strategy });
    }
    let star = rank_by_magnitude(&explanation.weights)[0];
    let out = delta_confidence_from(model, tokens, reference, &[star], strategy)?;
    let weight = explanation.weights[star];
    Ok(ViolationRecord {
        example_id: example_id.into(),
        index: Some(star),
        weight,
        delta: out.delta,
        violation: Some(is_violation(weight, out.delta)),
        strategy,
    })
}

fn check_length(tokens: &[usize], e: &Explanation) -> Result<()> {
    if tokens.len() != e.len() {
        return Err(invalid(format!("explanation has {} weights for {} tokens", e.len(), tokens.len())));
    }
    Ok(())
}

/// Area under `values` over `thresholds` (trapezoid), normalized by the span.
pub fn trapezoid_auc(thresholds: &[f64], values: &[f64]) -> f64 {
    assert_eq!(thresholds.len(), values.len());
    let span = thresholds[thresholds.len() - 1] - thresholds[0];
    let area: f64 = thresholds
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| (t[1] - t[0]) * (v[0] + v[1]) / 2.0)
        .sum();
    area / span
}

/// Per-threshold performance of one example after removing its top-t tokens:
/// 1/0 correctness, or the original class's confidence.
pub fn threshold_scores(
    model: &dyn Classifier,
    tokens: &[usize],
    label: usize,
    reference: &Reference,
    explanation: &Explanation,
    strategy: ReplacementStrategy,
    cfg: &MetricConfig,
) -> Result<Option<Vec<f64>>> {
    check_length(tokens, explanation)?;
    if tokens.len() < 2 {
        return Ok(None);
    }
    let score = |conf: &[f64]| match cfg.tp_performance {
        TpPerformance::Accuracy => f64::from(u8::from(crate::models::argmax(conf) == label)),
        TpPerformance::Confidence => conf[reference.predicted],
    };
    cfg.thresholds
        .iter()
        .map(|&t| {
            if t == 0.0 {
                return Ok(score(&reference.confidence));
            }
            let idx = top_fraction_indices(&explanation.weights, t, SelectMode::RemoveTop)?;
            Ok(score(&perturbed_confidence(model, tokens, &idx, strategy)?))
        })
        .collect::<Result<Vec<f64>>>()
        .map(Some)
}

/// Corpus AUC-TP from per-example threshold scores.
pub fn auc_tp(per_example: &[Vec<f64>], thresholds: &[f64]) -> Option<f64> {
    if per_example.is_empty() {
        return None;
    }
    let curve: Vec<f64> = (0..thresholds.len())
        .map(|k| per_example.iter().map(|s| s[k]).sum::<f64>() / per_example.len() as f64)
        .collect();
    Some(trapezoid_auc(thresholds, &curve))
}

fn level_deltas(
    model: &dyn Classifier,
    tokens: &[usize],
    reference: &Reference,
    weights: &[f64],
    strategy: ReplacementStrategy,
    levels: &[f64],
    mode: SelectMode,
) -> Result<Option<Vec<f64>>> {
    let y = reference.predicted;
    let mut out = Vec::with_capacity(levels.len());
    for &k in levels {
        let idx = top_fraction_indices(weights, k, mode)?;
        if idx.is_empty() {
            // keeping everything changes nothing
            out.push(0.0);
        } else if idx.len() == tokens.len() {
            return Ok(None);
        } else {
            out.push(reference.confidence[y] - perturbed_confidence(model, tokens, &idx, strategy)?[y]);
        }
    }
    Ok(Some(out))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean confidence drop when only the top-k% tokens are kept. Lower is better.
pub fn sufficiency(
    model: &dyn Classifier,
    tokens: &[usize],
    reference: &Reference,
    explanation: &Explanation,
    strategy: ReplacementStrategy,
    levels: &[f64],
) -> Result<Option<f64>> {
    check_length(tokens, explanation)?;
    Ok(level_deltas(model, tokens, reference, &explanation.weights, strategy, levels, SelectMode::KeepTop)?.map(|d| mean(&d)))
}

/// Mean confidence drop when the top-k% tokens are removed. Higher is better.
pub fn comprehensiveness(
    model: &dyn Classifier,
    tokens: &[usize],
    reference: &Reference,
    explanation: &Explanation,
    strategy: ReplacementStrategy,
    levels: &[f64],
) -> Result<Option<f64>> {
    check_length(tokens, explanation)?;
    Ok(level_deltas(model, tokens, reference, &explanation.weights, strategy, levels, SelectMode::RemoveTop)?.map(|d| mean(&d)))
}

/// Spearman correlation between sorted `|weights|` and the total confidence
/// change caused by removing the token(s) at each rank.
pub fn rank_correlation(
    model: &dyn Classifier,
    tokens: &[usize],
    reference: &Reference,
    explanation: &Explanation,
    strategy: ReplacementStrategy,
    removal: RankRemoval,
) -> Result<Option<f64>> {
    check_length(tokens, explanation)?;
    let n = tokens.len();
    if n < 2 {
        return Ok(None);
    }
    let order = rank_by_magnitude(&explanation.weights);
    let ranks = match removal {
        RankRemoval::SingleToken => n,
        RankRemoval::CumulativePrefix => n - 1,
    };
    let mut e = Vec::with_capacity(ranks);
    let mut p = Vec::with_capacity(ranks);
    for j in 0..ranks {
        let removed = match removal {
            RankRemoval::SingleToken => vec![order[j]],
            RankRemoval::CumulativePrefix => order[..=j].to_vec(),
        };
        let after = perturbed_confidence(model, tokens, &removed, strategy)?;
        e.push(explanation.weights[order[j]].abs());
        p.push(reference.confidence.iter().zip(&after).map(|(a, b)| (a - b).abs()).sum());
    }
    Ok(spearman(&e, &p))
}

/// Ranks starting at 1; tied values share the average of their ranks.
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
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Spearman's ρ with average ranks for ties; `None` if either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Every metric of one example under one method and strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub example_id: String,
    pub label: usize,
    pub predicted: usize,
    pub violation: Option<ViolationRecord>,
    pub threshold_scores: Option<Vec<f64>>,
    pub sufficiency: Option<f64>,
    pub comprehensiveness: Option<f64>,
    pub rank_correlation: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_example(
    model: &dyn Classifier,
    example_id: &str,
    tokens: &[usize],
    label: usize,
    reference: &Reference,
    explanation: &Explanation,
    strategy: ReplacementStrategy,
    cfg: &MetricConfig,
) -> Result<ExampleMetrics> {
    Ok(ExampleMetrics {
        example_id: example_id.into(),
        label,
        predicted: reference.predicted,
        violation: if cfg.wants(Metric::Violation) {
            Some(violation_test(model, example_id, tokens, reference, explanation, strategy)?)
        } else {
            None
        },
        threshold_scores: if cfg.wants(Metric::AucTp) {
            threshold_scores(model, tokens, label, reference, explanation, strategy, cfg)?
        } else {
            None
        },
        sufficiency: if cfg.wants(Metric::Sufficiency) {
            sufficiency(model, tokens, reference, explanation, strategy, &cfg.levels)?
        } else {
            None
        },
        comprehensiveness: if cfg.wants(Metric::Comprehensiveness) {
            comprehensiveness(model, tokens, reference, explanation, strategy, &cfg.levels)?
        } else {
            None
        },
        rank_correlation: if cfg.wants(Metric::RankCorrelation) {
            rank_correlation(model, tokens, reference, explanation, strategy, cfg.rank_removal)?
        } else {
            None
        },
    })
}

/// Metric values of one (method, strategy) cell, or their strategy average.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub auc_tp: Option<f64>,
    pub violation: Option<f64>,
    pub sufficiency: Option<f64>,
    pub comprehensiveness: Option<f64>,
    pub rank_correlation: Option<f64>,
}

impl MetricValues {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::AucTp => self.auc_tp,
            Metric::Violation => self.violation,
            Metric::Sufficiency => self.sufficiency,
            Metric::Comprehensiveness => self.comprehensiveness,
            Metric::RankCorrelation => self.rank_correlation,
        }
    }

    fn set(&mut self, m: Metric, v: Option<f64>) {
        let slot = match m {
            Metric::AucTp => &mut self.auc_tp,
            Metric::Violation => &mut self.violation,
            Metric::Sufficiency => &mut self.sufficiency,
            Metric::Comprehensiveness => &mut self.comprehensiveness,
            Metric::RankCorrelation => &mut self.rank_correlation,
        };
        *slot = v;
    }
}

/// Examples excluded from each metric because it was undefined for them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusions {
    pub violation: usize,
    pub auc_tp: usize,
    pub sufficiency: usize,
    pub comprehensiveness: usize,
    pub rank_correlation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub method: Method,
    pub strategy: ReplacementStrategy,
    pub examples: usize,
    pub values: MetricValues,
    pub excluded: Exclusions,
    pub records: Vec<ExampleMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>, excluded: &mut usize) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => *excluded += 1,
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Reduce per-example records to the metric values of one cell.
pub fn summarize(method: Method, strategy: ReplacementStrategy, records: Vec<ExampleMetrics>, cfg: &MetricConfig) -> StrategyReport {
    let mut ex = Exclusions::default();
    let mut values = MetricValues::default();
    if cfg.wants(Metric::Violation) {
        let bits = records.iter().map(|r| r.violation.as_ref().and_then(|v| v.violation).map(|b| f64::from(u8::from(b))));
        values.violation = mean_defined(bits, &mut ex.violation);
    }
    if cfg.wants(Metric::AucTp) {
        let defined: Vec<Vec<f64>> = records.iter().filter_map(|r| r.threshold_scores.clone()).collect();
        ex.auc_tp = records.len() - defined.len();
        values.auc_tp = auc_tp(&defined, &cfg.thresholds);
    }
    if cfg.wants(Metric::Sufficiency) {
        values.sufficiency = mean_defined(records.iter().map(|r| r.sufficiency), &mut ex.sufficiency);
    }
    if cfg.wants(Metric::Comprehensiveness) {
        values.comprehensiveness = mean_defined(records.iter().map(|r| r.comprehensiveness), &mut ex.comprehensiveness);
    }
    if cfg.wants(Metric::RankCorrelation) {
        values.rank_correlation = mean_defined(records.iter().map(|r| r.rank_correlation), &mut ex.rank_correlation);
    }
    StrategyReport { method, strategy, examples: records.len(), values, excluded: ex, records }
}

/// Unweighted mean over strategies of each metric (strategies where a metric
/// is undefined are skipped for that metric).
pub fn average_over_strategies(cells: &[MetricValues]) -> MetricValues {
    let mut out = MetricValues::default();
    for m in Metric::ALL {
        let defined: Vec<f64> = cells.iter().filter_map(|c| c.get(m)).collect();
        out.set(m, (!defined.is_empty()).then(|| mean(&defined)));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub per_strategy: Vec<StrategyReport>,
    pub average: MetricValues,
}

pub fn aggregate(method: Method, per_strategy: Vec<StrategyReport>) -> MethodReport {
    let cells: Vec<MetricValues> = per_strategy.iter().map(|r| r.values.clone()).collect();
    MethodReport { method, average: average_over_strategies(&cells), per_strategy }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub model: String,
    pub methods: Vec<MethodReport>,
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl FaithfulnessReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    /// Table-shaped CSV: one row per method and strategy plus an `average` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,method,strategy,AUCTP,Violation,Suf,Comp,RC\n");
        let mut row = |strategy: &str, method: Method, v: &MetricValues| {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.model,
                method,
                strategy,
                fmt_cell(v.auc_tp),
                fmt_cell(v.violation),
                fmt_cell(v.sufficiency),
                fmt_cell(v.comprehensiveness),
                fmt_cell(v.rank_correlation)
            );
        };
        for m in &self.methods {
            for cell in &m.per_strategy {
                row(cell.strategy.id(), m.method, &cell.values);
            }
            row("average", m.method, &m.average);
        }
        s
    }

    /// One JSON object per (method, strategy, example).
    pub fn write_records<W: Write>(&self, out: &mut W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            model: &'a str,
            method: Method,
            strategy: ReplacementStrategy,
            #[serde(flatten)]
            record: &'a ExampleMetrics,
        }
        for m in &self.methods {
            for cell in &m.per_strategy {
                for record in &cell.records {
                    serde_json::to_writer(&mut *out, &Row { model: &self.model, method: m.method, strategy: cell.strategy, record })?;
                    out.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }
}

/// One example to evaluate.
#[derive(Clone, Copy, Debug)]
pub struct EvalExample<'a> {
    pub id: &'a str,
    pub tokens: &'a [usize],
    pub label: usize,
}

/// Explanations and metric records of one example for every requested cell.
struct ExampleResult {
    cells: Vec<ExampleMetrics>,
}

/// Full grid: methods × strategies × configured metrics over `examples`.
/// Methods that do not apply to the model are skipped.
pub fn evaluate(
    model: &dyn Classifier,
    examples: &[EvalExample],
    methods: &[Method],
    explain_cfg: &ExplainConfig,
    cfg: &MetricConfig,
) -> Result<FaithfulnessReport> {
    cfg.validate()?;
    let methods: Vec<Method> = methods.iter().copied().filter(|m| m.applicable(model.family())).collect();
    let strategies = &cfg.strategies;
    let results: Vec<ExampleResult> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let trace = predict_traced(model, ex.tokens)?;
            let reference = Reference::of(model, ex.tokens)?;
            let mut cells = Vec::with_capacity(methods.len() * strategies.len());
            for &m in &methods {
                let e = explain(model, &trace, m, explain_cfg, i)?;
                for &s in strategies {
                    cells.push(evaluate_example(model, ex.id, ex.tokens, ex.label, &reference, &e, s, cfg)?);
                }
            }
            Ok(ExampleResult { cells })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_method = Vec::with_capacity(methods.len());
    for (mi, &m) in methods.iter().enumerate() {
        let per_strategy = strategies
            .iter()
            .enumerate()
            .map(|(si, &s)| {
                let records = results.iter().map(|r| r.cells[mi * strategies.len() + si].clone()).collect();
                summarize(m, s, records, cfg)
            })
            .collect();
        per_method.push(aggregate(m, per_strategy));
    }
    Ok(FaithfulnessReport { model: model.name(), methods: per_method })
}
