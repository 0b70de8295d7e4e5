use super::*;
use crate::data::Vocab;
use crate::models::{predict_traced, AttentionKind, EncoderKind, LinearSoftmaxModel, ModelSpec, TrainedModel};
use crate::tensor::{finite_difference, relative_error};

fn vocab() -> Vocab {
    Vocab::from_tokens((3..24).map(|i| format!("w{i}")))
}

fn spec(encoder: EncoderKind, attention: AttentionKind) -> ModelSpec {
    ModelSpec { encoder, attention, embed_dim: 8, hidden_dim: 8, seed: 11, ..ModelSpec::default() }
}

fn transformer(layers: usize, heads: usize) -> TrainedModel {
    let s = ModelSpec { layers, heads, ..spec(EncoderKind::Transformer, AttentionKind::MultiHead) };
    TrainedModel::init(&s, &vocab()).unwrap()
}

fn general_models() -> Vec<TrainedModel> {
    ModelSpec::general_zoo(&spec(EncoderKind::Lstm, AttentionKind::Tanh))
        .iter()
        .map(|s| TrainedModel::init(s, &vocab()).unwrap())
        .collect()
}

fn set_param(model: &mut TrainedModel, name: &str, f: impl Fn(f64) -> f64) {
    let p = model.params.iter_mut().find(|p| p.name == name).expect("parameter exists");
    p.values.iter_mut().for_each(|v| *v = f(*v));
}

const TOKENS: [usize; 6] = [3, 8, 5, 13, 7, 20];

#[test]
fn method_ids_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.id().parse::<Method>().unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
    }
    assert!("attention".parse::<Method>().is_err());
}

#[test]
fn raw_att_is_a_distribution_on_general_models() {
    for model in general_models() {
        let trace = predict_traced(&model, &TOKENS).unwrap();
        let e = raw_att(&trace).unwrap();
        assert_eq!(e.len(), TOKENS.len());
        assert!(e.weights.iter().all(|w| *w >= 0.0));
        assert!((e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn raw_att_on_transformers_is_the_head_mean_of_the_cls_row() {
    let model = transformer(2, 2);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    let rec = trace.cache.last().unwrap();
    let e = raw_att(&trace).unwrap();
    for i in 0..TOKENS.len() {
        let mean = (rec.heads[0].alpha_row(0)[i + 1] + rec.heads[1].alpha_row(0)[i + 1]) / 2.0;
        assert_eq!(e.weights[i], mean);
    }
}

#[test]
fn att_grad_is_alpha_times_its_gradient() {
    for model in general_models() {
        let trace = predict_traced(&model, &TOKENS).unwrap();
        let alpha = trace.cache.last().unwrap().heads[0].alpha.values().to_vec();
        let grad = trace.alpha_grad(0, 0, ClassScore::Logit).unwrap();
        let e = att_grad(&trace, ClassScore::Logit).unwrap();
        for i in 0..TOKENS.len() {
            assert_eq!(e.weights[i], alpha[i] * grad[i]);
            assert_eq!(sign(e.weights[i]), sign(grad[i]));
        }
    }
}

#[test]
fn att_input_norm_scales_alpha_by_value_norms() {
    for model in general_models() {
        let trace = predict_traced(&model, &TOKENS).unwrap();
        let head = &trace.cache.last().unwrap().heads[0];
        let e = att_input_norm(&trace).unwrap();
        for i in 0..TOKENS.len() {
            assert_eq!(e.weights[i], head.alpha.values()[i] * head.value_norms[i]);
            assert!(e.weights[i] >= 0.0);
        }
    }
}

#[test]
fn ablation_variants_have_their_value_sets() {
    let model = transformer(2, 2);
    let general = &general_models()[1];
    for trace in [predict_traced(&model, &TOKENS).unwrap(), predict_traced(general, &TOKENS).unwrap()] {
        let plain = att_grad(&trace, ClassScore::Logit).unwrap();
        let abs = att_grad_ablation(&trace, AblationVariant::Abs, ClassScore::Logit).unwrap();
        let sgn = att_grad_ablation(&trace, AblationVariant::Sign, ClassScore::Logit).unwrap();
        assert!(abs.weights.iter().all(|w| *w >= 0.0));
        assert!(abs.weights.iter().zip(&plain.weights).all(|(a, p)| *a >= p.abs() - 1e-15));
        if trace.family == Family::General {
            let alpha = raw_att(&trace).unwrap().weights;
            for i in 0..TOKENS.len() {
                let s = sgn.weights[i];
                assert!(s == alpha[i] || s == -alpha[i] || s == 0.0);
                if plain.weights[i] != 0.0 {
                    assert_eq!(sign(s), sign(plain.weights[i]));
                }
            }
        }
    }
}

#[test]
fn input_grad_on_linear_model_is_analytic() {
    let model = LinearSoftmaxModel::random(24, 5, 4);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    let e = input_grad(&trace, ClassScore::Logit).unwrap();
    let sign = if trace.predicted == 0 { 1.0 } else { -1.0 };
    for (i, &t) in TOKENS.iter().enumerate() {
        let x = &model.embedding[t * 5..(t + 1) * 5];
        let expected: f64 = sign * x.iter().zip(&model.weight).map(|(a, b)| a * b).sum::<f64>();
        assert!((e.weights[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn input_grad_matches_directional_finite_differences() {
    for model in general_models() {
        let trace = predict_traced(&model, &TOKENS).unwrap();
        let e = input_grad(&trace, ClassScore::Logit).unwrap();
        let x = model.embed(&TOKENS).unwrap();
        let y = trace.predicted;
        let g = finite_difference(
            |t| model.logits(&ModelInput { tokens: &TOKENS, embeddings: Some(t.clone()), mask: None }).unwrap()[y],
            &x,
            1e-5,
        );
        let numeric = token_sums(x.values(), &g, x.cols());
        assert!(relative_error(&e.weights, &numeric) < 1e-6);
    }
}

#[test]
fn zero_embedding_gives_zero_input_grad() {
    let model = LinearSoftmaxModel::random(24, 5, 4);
    let trace = predict_traced(&model, &[3, MASK, 5]).unwrap();
    assert_eq!(input_grad(&trace, ClassScore::Logit).unwrap().weights[1], 0.0);
}

#[test]
fn ig_on_linear_model_equals_input_grad() {
    let model = LinearSoftmaxModel::random(24, 5, 9);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    let ig_expected = input_grad(&trace, ClassScore::Logit).unwrap();
    for steps in [8, 16] {
        for baseline in [Baseline::Mask, Baseline::Zero] {
            let base = baseline_embeddings(&model, TOKENS.len(), baseline).unwrap();
            let ig = integrated_gradients(&model, &TOKENS, trace.predicted, &base, steps, ClassScore::Logit).unwrap();
            assert!(relative_error(&ig.weights, &ig_expected.weights) < 1e-12);
        }
    }
}

#[test]
fn ig_completeness_on_every_model() {
    let mut models: Vec<TrainedModel> = general_models();
    models.push(transformer(2, 2));
    for model in &models {
        let target = model.predict(&TOKENS).unwrap();
        let base = baseline_embeddings(model, TOKENS.len(), Baseline::Mask).unwrap();
        let ig = integrated_gradients(model, &TOKENS, target, &base, 128, ClassScore::Logit).unwrap();
        let fx = model.logits(&ModelInput::tokens(&TOKENS)).unwrap()[target];
        let fb = model.logits(&ModelInput { tokens: &TOKENS, embeddings: Some(base), mask: None }).unwrap()[target];
        let total: f64 = ig.weights.iter().sum();
        assert!((total - (fx - fb)).abs() < 1e-2, "{}: {total} vs {}", model.name(), fx - fb);
    }
}

#[test]
fn ig_of_the_baseline_itself_is_zero() {
    let model = transformer(1, 2);
    let tokens = [MASK, MASK, MASK];
    let base = baseline_embeddings(&model, 3, Baseline::Mask).unwrap();
    let ig = integrated_gradients(&model, &tokens, 0, &base, 8, ClassScore::Logit).unwrap();
    assert!(ig.weights.iter().all(|w| *w == 0.0));
}

#[test]
fn ig_rejects_bad_steps_and_baselines() {
    let model = transformer(1, 2);
    let base = baseline_embeddings(&model, TOKENS.len(), Baseline::Zero).unwrap();
    assert!(integrated_gradients(&model, &TOKENS, 0, &base, 4, ClassScore::Logit).is_err());
    let short = baseline_embeddings(&model, 2, Baseline::Zero).unwrap();
    assert!(matches!(
        integrated_gradients(&model, &TOKENS, 0, &short, 16, ClassScore::Logit),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn transformer_methods_are_not_applicable_to_general_models() {
    let model = &general_models()[0];
    let trace = predict_traced(model, &TOKENS).unwrap();
    for m in [Method::Plrp, Method::Rollout, Method::TransAtt, Method::GenAtt] {
        let err = explain(model, &trace, m, &ExplainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::NotApplicable { .. }));
    }
}

#[test]
fn rollout_of_one_layer_one_head_is_the_half_mixed_row() {
    let model = transformer(1, 1);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    let row = trace.cache.last().unwrap().heads[0].alpha_row(0).to_vec();
    let e = rollout(&trace).unwrap();
    for i in 0..TOKENS.len() {
        assert!((e.weights[i] - 0.5 * row[i + 1]).abs() < 1e-15);
    }
}

#[test]
fn rollout_product_is_row_stochastic() {
    let model = transformer(3, 2);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    let maps = layer_maps(&trace, None, None, |a, _, _| a).unwrap();
    let k = TOKENS.len() + 1;
    let mut r = identity(k);
    for a in &maps {
        let mut step: Vec<f64> = identity(k).iter().zip(a).map(|(i, v)| 0.5 * i + 0.5 * v).collect();
        normalize_rows(&mut step, k);
        r = matmul_square(&step, &r, k);
    }
    for row in r.chunks(k) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
    assert!(rollout(&trace).unwrap().weights.iter().all(|w| *w >= 0.0));
}

#[test]
fn rollout_of_uniform_attention_is_uniform() {
    let mut model = transformer(2, 2);
    for name in ["block0.attention.h0.query", "block0.attention.h1.query", "block1.attention.h0.query", "block1.attention.h1.query"] {
        set_param(&mut model, name, |_| 0.0);
    }
    let trace = predict_traced(&model, &TOKENS).unwrap();
    let e = rollout(&trace).unwrap();
    assert!(e.weights.iter().all(|w| (w - e.weights[0]).abs() < 1e-12));
}

/// Independent single-layer computation of the identity-added aggregation.
fn one_layer_reference(trace: &AttentionTrace, cell: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let rec = trace.cache.last().unwrap();
    let k = rec.heads[0].n_keys();
    let row: Vec<f64> = (0..k)
        .map(|j| {
            let mean = (0..rec.heads.len()).map(|h| cell(h, j)).sum::<f64>() / rec.heads.len() as f64;
            mean + if j == 0 { 1.0 } else { 0.0 }
        })
        .collect();
    let s: f64 = row.iter().sum();
    row[1..].iter().map(|v| v / s).collect()
}

#[test]
fn gen_att_single_layer_matches_hand_computation() {
    let model = transformer(1, 2);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    let grads: Vec<Vec<f64>> = (0..2).map(|h| trace.alpha_grad(0, h, ClassScore::Logit).unwrap()).collect();
    let rec = trace.cache.last().unwrap();
    let expected = one_layer_reference(&trace, |h, j| (rec.heads[h].alpha_row(0)[j] * grads[h][j]).max(0.0));
    let e = gen_att(&trace, ClassScore::Logit).unwrap();
    assert!(relative_error(&e.weights, &expected) < 1e-12);
}

#[test]
fn trans_att_single_layer_matches_hand_computation() {
    let model = transformer(1, 2);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    let map = propagate_relevance(&trace, DEFAULT_EPSILON).unwrap();
    let rec = trace.cache.last().unwrap();
    let rel: Vec<Vec<f64>> = rec.heads.iter().map(|h| map.readout(&h.alpha).unwrap().to_vec()).collect();
    let grads: Vec<Vec<f64>> = (0..2).map(|h| trace.alpha_grad(0, h, ClassScore::Logit).unwrap()).collect();
    let expected = one_layer_reference(&trace, |h, j| (grads[h][j] * rel[h][j]).max(0.0));
    let e = trans_att(&trace, ClassScore::Logit, DEFAULT_EPSILON).unwrap();
    assert!(relative_error(&e.weights, &expected) < 1e-12);
}

#[test]
fn zero_gradients_leave_the_identity_aggregation() {
    let mut model = transformer(2, 2);
    set_param(&mut model, "output.weight", |_| 0.0);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    for e in [gen_att(&trace, ClassScore::Logit).unwrap(), trans_att(&trace, ClassScore::Logit, DEFAULT_EPSILON).unwrap()] {
        assert!(e.weights.iter().all(|w| *w == 0.0), "{:?}", e.method);
    }
}

#[test]
fn plrp_with_one_head_is_that_heads_relevance_row() {
    let model = transformer(2, 1);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    let map = propagate_relevance(&trace, DEFAULT_EPSILON).unwrap();
    let ro = map.readout(&trace.cache.last().unwrap().heads[0].alpha).unwrap();
    let e = plrp(&trace, DEFAULT_EPSILON).unwrap();
    assert_eq!(e.weights, ro[1..=TOKENS.len()].to_vec());
}

#[test]
fn lrp_conserves_on_two_layer_relu_networks() {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::matrix(1, 6, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let w1 = Tensor::matrix(6, 10, (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w2 = Tensor::matrix(10, 1, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let h = tape.relu(&tape.matmul(&x, &w1).unwrap()).unwrap();
        let out = tape.reshape(&tape.matmul(&h, &w2).unwrap(), &[]).unwrap();
        let z = out.item();
        if z.abs() < 1e-3 {
            continue;
        }
        let map = propagate(&tape, &out, &[z], &[&x], DEFAULT_EPSILON).unwrap();
        let total: f64 = map.of(&x).unwrap().iter().sum();
        assert!((total - z).abs() / z.abs() < 0.05);
    }
}

#[test]
fn zero_logit_gives_zero_relevance_through_the_transformer() {
    let mut model = transformer(2, 2);
    set_param(&mut model, "output.weight", |_| 0.0);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    let map = propagate_relevance(&trace, DEFAULT_EPSILON).unwrap();
    assert!(map.of(&trace.embeddings).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn random_explanation_is_seeded_and_balanced() {
    assert_eq!(random_explanation(7, 0, 3), random_explanation(7, 0, 3));
    assert_ne!(random_explanation(7, 0, 3).weights, random_explanation(7, 0, 4).weights);
    let e = random_explanation(10_000, 0, 1);
    assert_eq!(e.len(), 10_000);
    let positive = e.weights.iter().filter(|w| **w > 0.0).count() as f64 / 10_000.0;
    assert!((positive - 0.5).abs() < 0.02);
    assert!(e.weights.iter().all(|w| (-1.0..1.0).contains(w)));
}

#[test]
fn att_grad_argmax_is_invariant_to_logit_rescaling() {
    for mut model in general_models() {
        let before = att_grad(&predict_traced(&model, &TOKENS).unwrap(), ClassScore::Logit).unwrap();
        set_param(&mut model, "output.weight", |v| 3.5 * v);
        set_param(&mut model, "output.bias", |v| 3.5 * v);
        let after = att_grad(&predict_traced(&model, &TOKENS).unwrap(), ClassScore::Logit).unwrap();
        let top = |w: &[f64]| crate::models::argmax(&w.iter().map(|v| v.abs()).collect::<Vec<_>>());
        assert_eq!(top(&before.weights), top(&after.weights));
        for (a, b) in before.weights.iter().zip(&after.weights) {
            assert!((3.5 * a - b).abs() <= 1e-12 * b.abs().max(1e-12) + 1e-15);
        }
    }
}

#[test]
fn explanations_permute_with_the_tokens() {
    let mut model = transformer(2, 2);
    set_param(&mut model, "positions", |_| 0.0);
    let perm = [4, 2, 0, 5, 1, 3];
    let permuted: Vec<usize> = perm.iter().map(|&i| TOKENS[i]).collect();
    let cfg = ExplainConfig::default();
    let a = predict_traced(&model, &TOKENS).unwrap();
    let b = predict_traced(&model, &permuted).unwrap();
    for m in Method::for_family(Family::Transformer).into_iter().filter(|m| *m != Method::Random) {
        let ea = explain(&model, &a, m, &cfg, 0).unwrap();
        let eb = explain(&model, &b, m, &cfg, 0).unwrap();
        let expected: Vec<f64> = perm.iter().map(|&i| ea.weights[i]).collect();
        assert!(relative_error(&eb.weights, &expected) < 1e-9, "{m}");
    }
}

#[test]
fn single_polarity_methods_never_go_negative() {
    let model = transformer(2, 2);
    let trace = predict_traced(&model, &TOKENS).unwrap();
    for m in Method::ALL.into_iter().filter(|m| m.single_polarity()) {
        let e = explain(&model, &trace, m, &ExplainConfig::default(), 0).unwrap();
        assert!(e.weights.iter().all(|w| *w >= 0.0), "{m}");
    }
}

#[test]
fn jsonl_export_has_one_row_per_explanation() {
    let e = random_explanation(3, 1, 0);
    let mut buf = Vec::new();
    write_jsonl(&mut buf, [("ex-1", &e), ("ex-2", &e)]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["method"], "random");
    assert_eq!(rows[1]["example_id"], "ex-2");
    assert_eq!(rows[0]["target"], 1);
    assert_eq!(rows[0]["weights"].as_array().unwrap().len(), 3);
}
