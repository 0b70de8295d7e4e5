//! End-to-end runs: training the zoo, the full evaluation grid, the
//! attention-gradient ablation, the depth study, and plot data files.
//!
//! Every run writes into a subdirectory of the configured output directory,
//! echoes the effective configuration there as `config.toml` and keeps a
//! plain-text `run.log`. Nothing time- or host-dependent is written, so a
//! rerun with the same configuration reproduces every file byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_corpus, load_corpus_with_vocab, split, Corpus, Example, Format, Split, SyntheticSpec};
use crate::error::{invalid, Error, Result};
use crate::explain::{explain, ExplainConfig, Explanation, Method};
use crate::metrics::{
    self, evaluate, rank_correlation, violation_test, EvalExample, FaithfulnessReport, Metric, MetricConfig, StrategyReport,
};
use crate::models::{accuracy, predict_traced, train, Classifier, Family, ModelSpec, TrainConfig, TrainedModel};
use crate::perturb::{delta_confidence_from, rank_by_magnitude, top_fraction_indices, Reference, ReplacementStrategy, SelectMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Separate train and test files; the vocabulary comes from `train`.
    Files { train: PathBuf, test: PathBuf, format: Option<Format>, classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub source: DataSource,
    /// Train/val/test fractions for synthetic corpora; for files, the
    /// training file is split into train/val by the first two.
    #[serde(default = "default_fractions")]
    pub fractions: (f64, f64, f64),
}

fn default_fractions() -> (f64, f64, f64) {
    (0.7, 0.1, 0.2)
}

impl DatasetConfig {
    pub fn synthetic(name: &str, spec: SyntheticSpec) -> Self {
        DatasetConfig { name: name.into(), source: DataSource::Synthetic(spec), fractions: default_fractions() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub datasets: Vec<DatasetConfig>,
    /// Shared architecture settings; encoder and attention come from `models`.
    pub model: ModelSpec,
    /// Zoo names: lstm-tanh, lstm-dot, cnn-tanh, cnn-dot, transformer.
    pub models: Vec<String>,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
    pub methods: Vec<Method>,
    pub metrics: MetricConfig,
    /// Test examples evaluated per dataset (0 = all).
    pub eval_examples: usize,
    pub depths: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "faithfulness".into(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            datasets: vec![
                DatasetConfig::synthetic("sentiment", SyntheticSpec { examples: 2500, seed: 1, ..SyntheticSpec::default() }),
                DatasetConfig::synthetic(
                    "topic",
                    SyntheticSpec { classes: 4, examples: 2500, words_per_class: 6, seed: 2, ..SyntheticSpec::default() },
                ),
            ],
            model: ModelSpec::default(),
            models: ModelSpec::zoo(&ModelSpec::default()).iter().map(ModelSpec::name).collect(),
            train: TrainConfig::default(),
            explain: ExplainConfig::default(),
            methods: Method::ALL.to_vec(),
            metrics: MetricConfig::default(),
            eval_examples: 500,
            depths: vec![1, 2, 4, 6],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Command-line overrides of the output directory and seed list.
    pub fn with_overrides(mut self, output_dir: Option<PathBuf>, seed: Option<u64>) -> Self {
        if let Some(dir) = output_dir {
            self.output_dir = dir;
        }
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.datasets.is_empty() || self.models.is_empty() || self.methods.is_empty() {
            return Err(invalid("seeds, datasets, models and methods must all be non-empty"));
        }
        for name in &self.models {
            self.spec_for(name, 2)?;
        }
        for d in &self.datasets {
            if d.name.is_empty() || d.name.contains(['/', '\\']) {
                return Err(invalid(format!("bad dataset name {:?}", d.name)));
            }
        }
        if self.depths.contains(&0) {
            return Err(invalid("depths must be at least 1"));
        }
        self.metrics.validate()
    }

    /// Resolve a zoo name against the shared architecture settings.
    pub fn spec_for(&self, name: &str, classes: usize) -> Result<ModelSpec> {
        ModelSpec::zoo(&ModelSpec { classes, ..self.model.clone() })
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| invalid(format!("unknown model `{name}`")))
    }

    fn general_models(&self) -> Vec<String> {
        self.models.iter().filter(|m| self.spec_for(m, 2).map(|s| s.family() == Family::General).unwrap_or(false)).cloned().collect()
    }
}

/// A dataset ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub name: String,
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

pub fn prepare_dataset(d: &DatasetConfig) -> Result<PreparedData> {
    let (train, val, test) = match &d.source {
        DataSource::Synthetic(spec) => split(&generate_synthetic(spec)?, d.fractions, spec.seed)?,
        DataSource::Files { train, test, format, classes } => {
            let fmt = format.unwrap_or_else(|| Format::from_path(train));
            let full = load_corpus(train, fmt, *classes)?;
            let (a, b, _) = d.fractions;
            let (tr, va, rest) = split(&full, (a / (a + b), b / (a + b), 0.0), 0)?;
            debug_assert!(rest.is_empty());
            let te = load_corpus_with_vocab(test, format.unwrap_or_else(|| Format::from_path(test)), &full.vocab, *classes, Split::Test)?;
            (tr, va, te)
        }
    };
    Ok(PreparedData { name: d.name.clone(), train, val, test })
}

/// One output directory with its config echo and run log.
struct RunDir {
    dir: PathBuf,
    log: String,
}

impl RunDir {
    fn create(cfg: &ExperimentConfig, sub: &str) -> Result<RunDir> {
        let dir = cfg.output_dir.join(sub);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        Ok(RunDir { dir, log: String::new() })
    }

    fn log(&mut self, line: impl AsRef<str>) {
        self.log.push_str(line.as_ref());
        self.log.push('\n');
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, contents)?;
        Ok(())
    }

    fn finish(self) -> Result<()> {
        fs::write(self.dir.join("run.log"), self.log)?;
        Ok(())
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

fn checkpoint_path(root: &Path, dataset: &str, model: &str, seed: u64) -> PathBuf {
    root.join(dataset).join(format!("{model}-seed{seed}.json"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub below_floor: bool,
    pub checkpoint: PathBuf,
}

fn train_one(cfg: &ExperimentConfig, data: &PreparedData, spec: &ModelSpec, path: &Path) -> Result<TrainedModel> {
    let val = (!data.val.is_empty()).then_some(&data.val);
    let model = train(&data.train, val, spec, &cfg.train)?;
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    model.save(path)?;
    Ok(model)
}

/// Train every (dataset, model, seed) and write one checkpoint for each.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let mut run = RunDir::create(cfg, "train")?;
    let root = cfg.output_dir.join("checkpoints");
    let mut records = Vec::new();
    let mut csv = String::from("dataset,model,seed,epochs,train_accuracy,val_accuracy,test_accuracy,below_floor\n");
    for d in &cfg.datasets {
        let data = prepare_dataset(d)?;
        run.log(format!(
            "dataset {}: {} train / {} val / {} test examples, vocabulary {}",
            data.name,
            data.train.len(),
            data.val.len(),
            data.test.len(),
            data.train.vocab.len()
        ));
        for name in &cfg.models {
            for &seed in &cfg.seeds {
                let spec = ModelSpec { seed, ..cfg.spec_for(name, data.train.classes)? };
                let path = checkpoint_path(&root, &data.name, name, seed);
                let model = train_one(cfg, &data, &spec, &path)?;
                let test_accuracy = accuracy(&model, &data.test)?;
                let m = &model.meta;
                run.log(format!(
                    "{} {} seed {}: {} epochs, train accuracy {:.4}, val accuracy {}, test accuracy {:.4}",
                    data.name,
                    name,
                    seed,
                    m.epochs,
                    m.train_accuracy,
                    cell(m.val_accuracy),
                    test_accuracy
                ));
                if m.below_floor {
                    run.log(format!(
                        "warning: {} {} seed {} stays below the accuracy floor {:.2}",
                        data.name, name, seed, cfg.train.accuracy_floor
                    ));
                }
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{:.6},{},{:.6},{}",
                    data.name,
                    name,
                    seed,
                    m.epochs,
                    m.train_accuracy,
                    cell(m.val_accuracy),
                    test_accuracy,
                    m.below_floor
                );
                records.push(TrainRecord {
                    dataset: data.name.clone(),
                    model: name.clone(),
                    seed,
                    epochs: m.epochs,
                    train_accuracy: m.train_accuracy,
                    val_accuracy: m.val_accuracy,
                    test_accuracy,
                    below_floor: m.below_floor,
                    checkpoint: path,
                });
            }
        }
    }
    run.write("train_log.csv", &csv)?;
    run.finish()?;
    Ok(records)
}

fn load_checkpoint(cfg: &ExperimentConfig, dataset: &str, model: &str, seed: u64) -> Result<TrainedModel> {
    let path = checkpoint_path(&cfg.output_dir.join("checkpoints"), dataset, model, seed);
    if !path.exists() {
        return Err(invalid(format!("missing checkpoint {} (run `train` first)", path.display())));
    }
    TrainedModel::load(&path)
}

fn eval_split(cfg: &ExperimentConfig, data: &PreparedData) -> Vec<Example> {
    let n = if cfg.eval_examples == 0 { data.test.len() } else { cfg.eval_examples.min(data.test.len()) };
    data.test.examples[..n].to_vec()
}

fn example_ids(dataset: &str, examples: &[Example]) -> Vec<String> {
    examples.iter().map(|e| format!("{dataset}-{}", e.id)).collect()
}

fn eval_examples<'a>(ids: &'a [String], examples: &'a [Example]) -> Vec<EvalExample<'a>> {
    ids.iter().zip(examples).map(|(id, e)| EvalExample { id, tokens: &e.tokens, label: e.label }).collect()
}

/// Explanation settings for one model seed (the random baseline varies with it).
fn seeded(cfg: &ExperimentConfig, seed: u64) -> ExplainConfig {
    ExplainConfig { seed: cfg.explain.seed ^ seed.wrapping_mul(0x2545_F491_4F6C_DD1D), ..cfg.explain.clone() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub report: FaithfulnessReport,
}

/// The method × strategy grid for one model, resuming from finished cells.
fn evaluate_with_resume(
    model: &TrainedModel,
    examples: &[EvalExample],
    methods: &[Method],
    explain_cfg: &ExplainConfig,
    metric_cfg: &MetricConfig,
    cells_dir: &Path,
) -> Result<FaithfulnessReport> {
    fs::create_dir_all(cells_dir)?;
    let mut out = Vec::new();
    for &m in methods.iter().filter(|m| m.applicable(model.family())) {
        let path = |s: &ReplacementStrategy| cells_dir.join(format!("{}__{}.json", m.id(), s.id()));
        let mut done: Vec<Option<StrategyReport>> = Vec::with_capacity(metric_cfg.strategies.len());
        for s in &metric_cfg.strategies {
            let p = path(s);
            done.push(if p.exists() { Some(serde_json::from_str(&fs::read_to_string(p)?)?) } else { None });
        }
        let missing: Vec<ReplacementStrategy> =
            metric_cfg.strategies.iter().zip(&done).filter(|(_, d)| d.is_none()).map(|(s, _)| *s).collect();
        if !missing.is_empty() {
            let partial = MetricConfig { strategies: missing, ..metric_cfg.clone() };
            let report = evaluate(model, examples, &[m], explain_cfg, &partial)?;
            for cell in report.methods.into_iter().flat_map(|r| r.per_strategy) {
                fs::write(path(&cell.strategy), serde_json::to_string(&cell)?)?;
                let slot = metric_cfg.strategies.iter().position(|s| *s == cell.strategy).expect("configured strategy");
                done[slot] = Some(cell);
            }
        }
        out.push(metrics::aggregate(m, done.into_iter().map(|c| c.expect("every cell evaluated")).collect()));
    }
    Ok(FaithfulnessReport { model: model.name(), methods: out })
}

/// Full grid over datasets, models and seeds. Requires the checkpoints of
/// [`run_train`].
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<Vec<EvaluationResult>> {
    cfg.validate()?;
    let mut run = RunDir::create(cfg, "evaluate")?;
    let mut results = Vec::new();
    let mut summary = String::from("dataset,model,seed,method,strategy,AUCTP,Violation,Suf,Comp,RC\n");
    for d in &cfg.datasets {
        let data = prepare_dataset(d)?;
        let examples = eval_split(cfg, &data);
        let ids = example_ids(&data.name, &examples);
        let eval = eval_examples(&ids, &examples);
        for name in &cfg.models {
            for &seed in &cfg.seeds {
                let model = load_checkpoint(cfg, &data.name, name, seed)?;
                let sub = format!("{}/{}-seed{}", data.name, name, seed);
                let report = evaluate_with_resume(
                    &model,
                    &eval,
                    &cfg.methods,
                    &seeded(cfg, seed),
                    &cfg.metrics,
                    &run.dir.join(&sub).join("cells"),
                )?;
                run.write(&format!("{sub}/summary.csv"), &report.to_csv())?;
                let mut records = Vec::new();
                report.write_records(&mut records)?;
                run.write(&format!("{sub}/records.jsonl"), std::str::from_utf8(&records).expect("json is utf-8"))?;
                for line in report.to_csv().lines().skip(1) {
                    let rest = line.split_once(',').map_or(line, |(_, r)| r);
                    let _ = writeln!(summary, "{},{},{},{}", data.name, name, seed, rest);
                }
                run.log(format!("{} {} seed {}: {} examples, {} methods", data.name, name, seed, eval.len(), report.methods.len()));
                results.push(EvaluationResult { dataset: data.name.clone(), model: name.clone(), seed, report });
            }
        }
    }
    run.write("summary.csv", &summary)?;
    run.write("table.csv", &seed_averaged_table(&results))?;
    run.finish()?;
    Ok(results)
}

/// Strategy-averaged metrics further averaged over seeds, one row per
/// (dataset, model, method).
pub fn seed_averaged_table(results: &[EvaluationResult]) -> String {
    let mut keys: Vec<(String, String, Method)> = Vec::new();
    for r in results {
        for m in &r.report.methods {
            let k = (r.dataset.clone(), r.model.clone(), m.method);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    let mut s = String::from("dataset,model,method,AUCTP,Violation,Suf,Comp,RC\n");
    for (dataset, model, method) in keys {
        let cells: Vec<metrics::MetricValues> = results
            .iter()
            .filter(|r| r.dataset == dataset && r.model == model)
            .filter_map(|r| r.report.method(method).map(|m| m.average.clone()))
            .collect();
        let avg = metrics::average_over_strategies(&cells);
        let _ = writeln!(
            s,
            "{dataset},{model},{method},{},{},{},{},{}",
            cell(avg.auc_tp),
            cell(avg.violation),
            cell(avg.sufficiency),
            cell(avg.comprehensiveness),
            cell(avg.rank_correlation)
        );
    }
    s
}

/// The attention rows of the ablation table with their display labels.
pub const ABLATION_METHODS: [(Method, &str); 4] = [
    (Method::RawAtt, "alpha"),
    (Method::AttGrad, "alpha*grad"),
    (Method::AttGradAbs, "alpha*|grad|"),
    (Method::AttGradSign, "alpha*sign(grad)"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub method: Method,
    pub label: String,
    /// Mean over general models, seeds and strategies.
    pub violation: f64,
}

fn violation_only(cfg: &ExperimentConfig) -> MetricConfig {
    MetricConfig { metrics: vec![Metric::Violation], ..cfg.metrics.clone() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Violation ratios of α, α⊙∇α, α⊙|∇α| and α⊙sign(∇α) per dataset, averaged
/// over the general attention models, seeds and strategies.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut run = RunDir::create(cfg, "ablation")?;
    let methods: Vec<Method> = ABLATION_METHODS.iter().map(|(m, _)| *m).collect();
    let models = cfg.general_models();
    if models.is_empty() {
        return Err(invalid("the ablation needs at least one general attention model"));
    }
    let metric_cfg = violation_only(cfg);
    let mut rows = Vec::new();
    let mut detail = String::from("dataset,model,seed,method,strategy,violation\n");
    for d in &cfg.datasets {
        let data = prepare_dataset(d)?;
        let examples = eval_split(cfg, &data);
        let ids = example_ids(&data.name, &examples);
        let eval = eval_examples(&ids, &examples);
        let mut per_method: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
        for name in &models {
            for &seed in &cfg.seeds {
                let model = load_checkpoint(cfg, &data.name, name, seed)?;
                let report = evaluate(&model, &eval, &methods, &seeded(cfg, seed), &metric_cfg)?;
                for (i, m) in report.methods.iter().enumerate() {
                    for c in &m.per_strategy {
                        let _ = writeln!(detail, "{},{},{},{},{},{}", data.name, name, seed, m.method, c.strategy, cell(c.values.violation));
                    }
                    if let Some(v) = m.average.violation {
                        per_method[i].push(v);
                    }
                }
            }
        }
        for ((m, label), values) in ABLATION_METHODS.iter().zip(&per_method) {
            let violation = mean(values);
            run.log(format!("{} {}: violation {:.4} over {} model runs", data.name, label, violation, values.len()));
            rows.push(AblationRow { dataset: data.name.clone(), method: *m, label: label.to_string(), violation });
        }
    }
    let mut csv = String::from("dataset,method,label,violation\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{:.6}", r.dataset, r.method, r.label, r.violation);
    }
    run.write("ablation.csv", &csv)?;
    run.write("detail.csv", &detail)?;
    run.finish()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    pub dataset: String,
    pub depth: usize,
    pub method: Method,
    pub violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthTrend {
    pub dataset: String,
    pub method: Method,
    /// Spearman correlation between depth and violation ratio.
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthStudy {
    pub points: Vec<DepthPoint>,
    pub trends: Vec<DepthTrend>,
}

/// Violation ratio per classifier-head depth, averaged over the general
/// attention models, seeds and strategies. Trains its own models (cached
/// under `depth/checkpoints`).
pub fn run_depth_study(cfg: &ExperimentConfig, depths: &[usize]) -> Result<DepthStudy> {
    cfg.validate()?;
    if depths.is_empty() || depths.contains(&0) {
        return Err(invalid("depth list must be non-empty and positive"));
    }
    let mut run = RunDir::create(cfg, "depth")?;
    let models = cfg.general_models();
    if models.is_empty() {
        return Err(invalid("the depth study needs at least one general attention model"));
    }
    let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.applicable(Family::General)).collect();
    let metric_cfg = violation_only(cfg);
    let root = run.dir.join("checkpoints");
    let mut points = Vec::new();
    let mut trends = Vec::new();
    for d in &cfg.datasets {
        let data = prepare_dataset(d)?;
        let examples = eval_split(cfg, &data);
        let ids = example_ids(&data.name, &examples);
        let eval = eval_examples(&ids, &examples);
        for &depth in depths {
            let mut per_method: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
            for name in &models {
                for &seed in &cfg.seeds {
                    let spec = ModelSpec { seed, head_depth: depth, ..cfg.spec_for(name, data.train.classes)? };
                    let path = checkpoint_path(&root, &data.name, &format!("{name}-depth{depth}"), seed);
                    let model = if path.exists() { TrainedModel::load(&path)? } else { train_one(cfg, &data, &spec, &path)? };
                    run.log(format!(
                        "{} depth {} {} seed {}: train accuracy {:.4}",
                        data.name, depth, name, seed, model.meta.train_accuracy
                    ));
                    let report = evaluate(&model, &eval, &methods, &seeded(cfg, seed), &metric_cfg)?;
                    for (i, m) in report.methods.iter().enumerate() {
                        if let Some(v) = m.average.violation {
                            per_method[i].push(v);
                        }
                    }
                }
            }
            for (m, values) in methods.iter().zip(&per_method) {
                points.push(DepthPoint { dataset: data.name.clone(), depth, method: *m, violation: mean(values) });
            }
        }
        for &m in &methods {
            let curve: Vec<&DepthPoint> = points.iter().filter(|p| p.dataset == data.name && p.method == m).collect();
            let xs: Vec<f64> = curve.iter().map(|p| p.depth as f64).collect();
            let ys: Vec<f64> = curve.iter().map(|p| p.violation).collect();
            let rho = metrics::spearman(&xs, &ys);
            run.log(format!("{} {}: depth trend spearman {}", data.name, m, cell(rho)));
            trends.push(DepthTrend { dataset: data.name.clone(), method: m, spearman: rho });
        }
    }
    let mut csv = String::from("dataset,depth,method,violation\n");
    for p in &points {
        let _ = writeln!(csv, "{},{},{},{:.6}", p.dataset, p.depth, p.method, p.violation);
    }
    run.write("depth_curve.csv", &csv)?;
    let mut csv = String::from("dataset,method,spearman\n");
    for t in &trends {
        let _ = writeln!(csv, "{},{},{}", t.dataset, t.method, cell(t.spearman));
    }
    run.write("depth_trend.csv", &csv)?;
    run.finish()?;
    Ok(DepthStudy { points, trends })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatamapPoint {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub method: Method,
    pub strategy: ReplacementStrategy,
    pub example_id: String,
    pub rank_correlation: Option<f64>,
    /// ΔC after removing the top-10% tokens by |weight|.
    pub delta_top10: f64,
    pub violation: Option<bool>,
}

/// Per-model evaluation inputs shared by the plot-data emitters.
struct ModelRun<'a> {
    dataset: &'a str,
    name: &'a str,
    seed: u64,
    model: TrainedModel,
}

/// Explanations of every applicable configured method for every example.
fn explain_all(
    model: &TrainedModel,
    examples: &[EvalExample],
    methods: &[Method],
    explain_cfg: &ExplainConfig,
) -> Result<Vec<(Reference, Vec<Explanation>)>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let trace = predict_traced(model, ex.tokens)?;
            let reference = Reference::of(model, ex.tokens)?;
            let exps = methods.iter().map(|&m| explain(model, &trace, m, explain_cfg, i)).collect::<Result<Vec<_>>>()?;
            Ok((reference, exps))
        })
        .collect()
}

fn for_each_model(cfg: &ExperimentConfig, mut f: impl FnMut(&ModelRun, &[EvalExample]) -> Result<()>) -> Result<()> {
    for d in &cfg.datasets {
        let data = prepare_dataset(d)?;
        let examples = eval_split(cfg, &data);
        let ids = example_ids(&data.name, &examples);
        let eval = eval_examples(&ids, &examples);
        for name in &cfg.models {
            for &seed in &cfg.seeds {
                let model = load_checkpoint(cfg, &data.name, name, seed)?;
                f(&ModelRun { dataset: &data.name, name, seed, model }, &eval)?;
            }
        }
    }
    Ok(())
}

/// Per-example (rank correlation, ΔC at top-10% removal, violation) points.
pub fn emit_datamap(cfg: &ExperimentConfig) -> Result<Vec<DatamapPoint>> {
    cfg.validate()?;
    let mut run = RunDir::create(cfg, "datamap")?;
    let mut points = Vec::new();
    for_each_model(cfg, |r, eval| {
        let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.applicable(r.model.family())).collect();
        let explained = explain_all(&r.model, eval, &methods, &seeded(cfg, r.seed))?;
        for (mi, &m) in methods.iter().enumerate() {
            for &s in &cfg.metrics.strategies {
                let rows: Vec<DatamapPoint> = eval
                    .par_iter()
                    .zip(&explained)
                    .map(|(ex, (reference, exps))| {
                        let e = &exps[mi];
                        let v = violation_test(&r.model, ex.id, ex.tokens, reference, e, s)?;
                        let rc = rank_correlation(&r.model, ex.tokens, reference, e, s, cfg.metrics.rank_removal)?;
                        let top = top_fraction_indices(&e.weights, 0.1, SelectMode::RemoveTop)?;
                        let delta = if top.len() == ex.tokens.len() {
                            0.0
                        } else {
                            delta_confidence_from(&r.model, ex.tokens, reference, &top, s)?.delta
                        };
                        Ok(DatamapPoint {
                            dataset: r.dataset.to_string(),
                            model: r.name.to_string(),
                            seed: r.seed,
                            method: m,
                            strategy: s,
                            example_id: ex.id.to_string(),
                            rank_correlation: rc,
                            delta_top10: delta,
                            violation: v.violation,
                        })
                    })
                    .collect::<Result<_>>()?;
                let violators = rows.iter().filter(|p| p.violation == Some(true)).count();
                run.log(format!("{} {} seed {} {} {}: {} of {} violate", r.dataset, r.name, r.seed, m, s, violators, rows.len()));
                points.extend(rows);
            }
        }
        Ok(())
    })?;
    let mut csv = String::from("dataset,model,seed,method,strategy,example_id,rank_correlation,delta_top10,violation\n");
    for p in &points {
        let v = p.violation.map_or_else(String::new, |b| u8::from(b).to_string());
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{:.6},{}",
            p.dataset, p.model, p.seed, p.method, p.strategy, p.example_id, cell(p.rank_correlation), p.delta_top10, v
        );
    }
    run.write("datamap.csv", &csv)?;
    run.finish()?;
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorProfile {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub method: Method,
    pub strategy: ReplacementStrategy,
    pub violators: bool,
    pub examples: usize,
    /// Mean weight at each |weight| rank (`None` where no example has that rank).
    pub mean_weight: Vec<Option<f64>>,
    /// Mean ΔC of removing the token at each rank alone.
    pub mean_delta: Vec<Option<f64>>,
}

/// Violation bit, weights by |weight| rank, ΔC by rank.
type RankProfile = (Option<bool>, Vec<f64>, Vec<f64>);

/// Rank profiles of violators and non-violators.
pub fn emit_behavior_profile(cfg: &ExperimentConfig) -> Result<Vec<BehaviorProfile>> {
    cfg.validate()?;
    let mut run = RunDir::create(cfg, "behavior")?;
    let mut profiles = Vec::new();
    let mut width = 0;
    for_each_model(cfg, |r, eval| {
        let max_len = eval.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        width = width.max(max_len);
        let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.applicable(r.model.family())).collect();
        let explained = explain_all(&r.model, eval, &methods, &seeded(cfg, r.seed))?;
        for (mi, &m) in methods.iter().enumerate() {
            for &s in &cfg.metrics.strategies {
                let per_example: Vec<RankProfile> = eval
                    .par_iter()
                    .zip(&explained)
                    .map(|(ex, (reference, exps))| {
                        let e = &exps[mi];
                        let v = violation_test(&r.model, ex.id, ex.tokens, reference, e, s)?;
                        let order = rank_by_magnitude(&e.weights);
                        let weights = order.iter().map(|&i| e.weights[i]).collect();
                        let deltas = if ex.tokens.len() < 2 {
                            vec![]
                        } else {
                            order
                                .iter()
                                .map(|&i| Ok(delta_confidence_from(&r.model, ex.tokens, reference, &[i], s)?.delta))
                                .collect::<Result<Vec<f64>>>()?
                        };
                        Ok((v.violation, weights, deltas))
                    })
                    .collect::<Result<_>>()?;
                for group in [true, false] {
                    let members: Vec<&RankProfile> =
                        per_example.iter().filter(|p| p.0 == Some(group)).collect();
                    let column_mean = |pick: &dyn Fn(&RankProfile) -> Option<f64>| {
                        let vals: Vec<f64> = members.iter().filter_map(|p| pick(p)).collect();
                        (!vals.is_empty()).then(|| mean(&vals))
                    };
                    let mean_weight = (0..max_len).map(|k| column_mean(&|p| p.1.get(k).copied())).collect();
                    let mean_delta = (0..max_len).map(|k| column_mean(&|p| p.2.get(k).copied())).collect();
                    profiles.push(BehaviorProfile {
                        dataset: r.dataset.to_string(),
                        model: r.name.to_string(),
                        seed: r.seed,
                        method: m,
                        strategy: s,
                        violators: group,
                        examples: members.len(),
                        mean_weight,
                        mean_delta,
                    });
                }
                run.log(format!("{} {} seed {} {} {}: profiled {} examples", r.dataset, r.name, r.seed, m, s, per_example.len()));
            }
        }
        Ok(())
    })?;
    let mut csv = String::from("dataset,model,seed,method,strategy,group,quantity,examples");
    for k in 1..=width {
        let _ = write!(csv, ",rank{k}");
    }
    csv.push('\n');
    for p in &profiles {
        let group = if p.violators { "violator" } else { "non-violator" };
        for (quantity, values) in [("weight", &p.mean_weight), ("delta", &p.mean_delta)] {
            let _ = write!(csv, "{},{},{},{},{},{},{},{}", p.dataset, p.model, p.seed, p.method, p.strategy, group, quantity, p.examples);
            for k in 0..width {
                let _ = write!(csv, ",{}", cell(values.get(k).copied().flatten()));
            }
            csv.push('\n');
        }
    }
    run.write("behavior.csv", &csv)?;
    run.finish()?;
    Ok(profiles)
}
