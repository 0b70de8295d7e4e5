//! Train a tiny model on a synthetic corpus and check the evaluation pipeline
//! end to end against independent recomputation from per-example records.

use faithbench::data::{generate_synthetic, split, SyntheticSpec};
use faithbench::metrics::{evaluate, EvalExample, Metric, MetricConfig};
use faithbench::models::{accuracy, train, TrainConfig};
use faithbench::{ExplainConfig, Method, ModelSpec};

#[test]
fn aggregates_equal_recomputation_from_records() {
    let corpus = generate_synthetic(&SyntheticSpec { examples: 240, seed: 3, ..SyntheticSpec::default() }).unwrap();
    let (tr, va, te) = split(&corpus, (0.7, 0.1, 0.2), 3).unwrap();
    let spec = ModelSpec { embed_dim: 8, hidden_dim: 8, ..ModelSpec::general_zoo(&ModelSpec::default())[1].clone() };
    let model = train(&tr, Some(&va), &spec, &TrainConfig { max_epochs: 4, learning_rate: 1e-2, ..TrainConfig::default() }).unwrap();
    assert!((accuracy(&model, &tr).unwrap() - model.meta.train_accuracy).abs() < 1e-12);

    let ids: Vec<String> = te.examples.iter().map(|e| e.id.to_string()).collect();
    let examples: Vec<EvalExample> =
        te.examples.iter().zip(&ids).map(|(e, id)| EvalExample { id, tokens: &e.tokens, label: e.label }).collect();
    let cfg = MetricConfig::default();
    let methods = [Method::RawAtt, Method::AttGrad, Method::Random];
    let report = evaluate(&model, &examples, &methods, &ExplainConfig::default(), &cfg).unwrap();

    assert_eq!(report.methods.len(), methods.len());
    for m in &report.methods {
        assert_eq!(m.per_strategy.len(), cfg.strategies.len());
        for cell in &m.per_strategy {
            assert_eq!(cell.records.len(), examples.len());
            let bits: Vec<bool> = cell.records.iter().filter_map(|r| r.violation.as_ref()?.violation).collect();
            let ratio = bits.iter().filter(|b| **b).count() as f64 / bits.len() as f64;
            assert!((cell.values.violation.unwrap() - ratio).abs() < 1e-12);
            let suf: Vec<f64> = cell.records.iter().filter_map(|r| r.sufficiency).collect();
            let mean = suf.iter().sum::<f64>() / suf.len() as f64;
            assert!((cell.values.sufficiency.unwrap() - mean).abs() < 1e-12);
        }
        let avg: f64 =
            m.per_strategy.iter().map(|c| c.values.get(Metric::Violation).unwrap()).sum::<f64>() / m.per_strategy.len() as f64;
        assert!((m.average.violation.unwrap() - avg).abs() < 1e-12);
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + methods.len() * (cfg.strategies.len() + 1));
}
