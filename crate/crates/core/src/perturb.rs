//! Token removal and the confidence perturbation it causes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::MASK;
use crate::error::{invalid, Error, Result};
use crate::layers::KeyMask;
use crate::models::{argmax, Classifier, ModelInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Drop the tokens; the sequence gets shorter.
    SliceOut,
    /// Keep the tokens but zero their attention weights.
    AttentionMask,
    /// Replace the tokens by the reserved MASK id.
    MaskToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ReplacementStrategy {
    pub kind: StrategyKind,
    /// Attention-mask only: renormalize α over the surviving keys.
    pub renormalize: bool,
}

impl ReplacementStrategy {
    pub const SLICE_OUT: ReplacementStrategy = ReplacementStrategy { kind: StrategyKind::SliceOut, renormalize: false };
    pub const ATTENTION_MASK: ReplacementStrategy =
        ReplacementStrategy { kind: StrategyKind::AttentionMask, renormalize: false };
    pub const MASK_TOKEN: ReplacementStrategy = ReplacementStrategy { kind: StrategyKind::MaskToken, renormalize: false };

    /// The three replacement functions averaged in reports.
    pub const DEFAULT_SET: [ReplacementStrategy; 3] =
        [ReplacementStrategy::SLICE_OUT, ReplacementStrategy::ATTENTION_MASK, ReplacementStrategy::MASK_TOKEN];

    pub fn renormalized(self) -> Self {
        ReplacementStrategy { renormalize: true, ..self }
    }

    pub fn id(&self) -> &'static str {
        match (self.kind, self.renormalize) {
            (StrategyKind::SliceOut, _) => "slice-out",
            (StrategyKind::AttentionMask, false) => "attention-mask",
            (StrategyKind::AttentionMask, true) => "attention-mask-renorm",
            (StrategyKind::MaskToken, _) => "mask-token",
        }
    }
}

impl fmt::Display for ReplacementStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ReplacementStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slice-out" => Ok(ReplacementStrategy::SLICE_OUT),
            "attention-mask" => Ok(ReplacementStrategy::ATTENTION_MASK),
            "attention-mask-renorm" => Ok(ReplacementStrategy::ATTENTION_MASK.renormalized()),
            "mask-token" => Ok(ReplacementStrategy::MASK_TOKEN),
            other => Err(invalid(format!("unknown replacement strategy `{other}`"))),
        }
    }
}

impl TryFrom<String> for ReplacementStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ReplacementStrategy> for String {
    fn from(s: ReplacementStrategy) -> String {
        s.id().to_string()
    }
}

/// An input with some tokens removed, ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub tokens: Vec<usize>,
    pub mask: Option<KeyMask>,
}

impl Perturbed {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput { tokens: &self.tokens, embeddings: None, mask: self.mask.as_ref() }
    }
}

pub fn remove_tokens(tokens: &[usize], indices: &[usize], strategy: ReplacementStrategy) -> Result<Perturbed> {
    if indices.is_empty() {
        return Err(invalid("no tokens to remove"));
    }
    let n = tokens.len();
    let mut removed = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(invalid(format!("token index {i} out of bounds for {n} tokens")));
        }
        removed[i] = true;
    }
    if removed.iter().all(|r| *r) {
        return Err(invalid("cannot remove every token"));
    }
    Ok(match strategy.kind {
        StrategyKind::SliceOut => Perturbed {
            tokens: tokens.iter().zip(&removed).filter(|(_, r)| !**r).map(|(t, _)| *t).collect(),
            mask: None,
        },
        StrategyKind::AttentionMask => Perturbed {
            tokens: tokens.to_vec(),
            mask: Some(KeyMask { keep: removed.iter().map(|r| !r).collect(), renormalize: strategy.renormalize }),
        },
        StrategyKind::MaskToken => Perturbed {
            tokens: tokens.iter().zip(&removed).map(|(t, r)| if *r { MASK } else { *t }).collect(),
            mask: None,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOutcome {
    pub removed: Vec<usize>,
    pub strategy: ReplacementStrategy,
    pub original: f64,
    pub perturbed: f64,
    /// `original − perturbed`.
    pub delta: f64,
    pub predicted: usize,
}

/// Unperturbed prediction, reusable across many perturbations of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub confidence: Vec<f64>,
    pub predicted: usize,
}

impl Reference {
    pub fn of(model: &dyn Classifier, tokens: &[usize]) -> Result<Reference> {
        let confidence = model.confidence(&ModelInput::tokens(tokens))?;
        let predicted = argmax(&confidence);
        Ok(Reference { confidence, predicted })
    }
}

/// Confidences after removing `indices`.
pub fn perturbed_confidence(
    model: &dyn Classifier,
    tokens: &[usize],
    indices: &[usize],
    strategy: ReplacementStrategy,
) -> Result<Vec<f64>> {
    let p = remove_tokens(tokens, indices, strategy)?;
    model.confidence(&p.input())
}

pub fn delta_confidence_from(
    model: &dyn Classifier,
    tokens: &[usize],
    reference: &Reference,
    indices: &[usize],
    strategy: ReplacementStrategy,
) -> Result<PerturbationOutcome> {
    let after = perturbed_confidence(model, tokens, indices, strategy)?;
    let y = reference.predicted;
    let mut removed = indices.to_vec();
    removed.sort_unstable();
    removed.dedup();
    Ok(PerturbationOutcome {
        removed,
        strategy,
        original: reference.confidence[y],
        perturbed: after[y],
        delta: reference.confidence[y] - after[y],
        predicted: y,
    })
}

/// `ΔC = f(x)_ŷ − f(x \ x*)_ŷ` with ŷ from the unperturbed pass.
pub fn delta_confidence(
    model: &dyn Classifier,
    tokens: &[usize],
    indices: &[usize],
    strategy: ReplacementStrategy,
) -> Result<PerturbationOutcome> {
    let reference = Reference::of(model, tokens)?;
    delta_confidence_from(model, tokens, &reference, indices, strategy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMode {
    RemoveTop,
    KeepTop,
}

/// Token indices by decreasing `|weight|`, ties by ascending index.
pub fn rank_by_magnitude(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
    order
}

/// Indices to remove: the top `max(1, ⌊fraction·N⌋)` tokens by `|weight|`
/// (remove-top) or all the others (keep-top). Sorted ascending.
pub fn top_fraction_indices(weights: &[f64], fraction: f64, mode: SelectMode) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid(format!("fraction must be in (0, 1), got {fraction}")));
    }
    let n = weights.len();
    let count = ((fraction * n as f64).floor() as usize).max(1).min(n);
    let order = rank_by_magnitude(weights);
    let mut out: Vec<usize> = match mode {
        SelectMode::RemoveTop => order[..count].to_vec(),
        SelectMode::KeepTop => order[count..].to_vec(),
    };
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use crate::models::{predict_traced, softmax, AttentionKind, EncoderKind, LinearSoftmaxModel, ModelSpec, TrainedModel};
    use crate::tensor::Tape;

    fn vocab() -> Vocab {
        Vocab::from_tokens((3..30).map(|i| format!("w{i}")))
    }

    fn model(encoder: EncoderKind, attention: AttentionKind, seed: u64) -> TrainedModel {
        let s = ModelSpec { encoder, attention, embed_dim: 8, hidden_dim: 8, seed, ..ModelSpec::default() };
        TrainedModel::init(&s, &vocab()).unwrap()
    }

    #[test]
    fn slice_out_drops_tokens() {
        let p = remove_tokens(&[10, 11, 12], &[0], ReplacementStrategy::SLICE_OUT).unwrap();
        assert_eq!(p.tokens, vec![11, 12]);
        assert!(p.mask.is_none());
    }

    #[test]
    fn mask_token_preserves_length() {
        let p = remove_tokens(&[10, 11, 12], &[2, 0], ReplacementStrategy::MASK_TOKEN).unwrap();
        assert_eq!(p.tokens, vec![MASK, 11, MASK]);
    }

    #[test]
    fn degenerate_removals_are_rejected() {
        for s in ReplacementStrategy::DEFAULT_SET {
            assert!(remove_tokens(&[10, 11], &[0, 1], s).is_err());
            assert!(remove_tokens(&[10, 11], &[], s).is_err());
            assert!(remove_tokens(&[10, 11], &[2], s).is_err());
        }
    }

    #[test]
    fn renormalized_mask_of_all_but_one_puts_all_attention_on_the_survivor() {
        let m = model(EncoderKind::Lstm, AttentionKind::Tanh, 1);
        let tokens = [3, 4, 5, 6];
        let p = remove_tokens(&tokens, &[0, 1, 3], ReplacementStrategy::ATTENTION_MASK.renormalized()).unwrap();
        let tape = Tape::new();
        let pass = m.forward(&tape, &p.input(), false).unwrap();
        assert_eq!(pass.cache.attention[0].heads[0].alpha.values(), &[0.0, 0.0, 1.0, 0.0]);
        let p = remove_tokens(&tokens, &[0, 1, 3], ReplacementStrategy::ATTENTION_MASK).unwrap();
        let pass = m.forward(&tape, &p.input(), false).unwrap();
        let alpha = pass.cache.attention[0].heads[0].alpha.values().to_vec();
        assert!(alpha[2] > 0.0 && alpha[2] < 1.0 && alpha[0] == 0.0);
    }

    #[test]
    fn transformer_attention_mask_hides_keys_in_every_layer() {
        let m = model(EncoderKind::Transformer, AttentionKind::MultiHead, 2);
        let p = remove_tokens(&[3, 4, 5], &[1], ReplacementStrategy::ATTENTION_MASK).unwrap();
        let tape = Tape::new();
        let pass = m.forward(&tape, &p.input(), false).unwrap();
        for rec in &pass.cache.attention {
            for h in &rec.heads {
                for q in 0..4 {
                    assert_eq!(h.alpha_row(q)[2], 0.0);
                }
            }
        }
    }

    #[test]
    fn mask_on_mask_is_the_identity() {
        for (e, a) in [
            (EncoderKind::Lstm, AttentionKind::Tanh),
            (EncoderKind::Cnn, AttentionKind::Dot),
            (EncoderKind::Transformer, AttentionKind::MultiHead),
        ] {
            let m = model(e, a, 3);
            let out = delta_confidence(&m, &[3, MASK, 5], &[1], ReplacementStrategy::MASK_TOKEN).unwrap();
            assert_eq!(out.delta, 0.0);
        }
    }

    #[test]
    fn keep_all_attention_mask_is_the_identity() {
        let m = model(EncoderKind::Cnn, AttentionKind::Tanh, 4);
        let tokens = [3, 4, 5, 6];
        let plain = m.confidence(&ModelInput::tokens(&tokens)).unwrap();
        for renormalize in [false, true] {
            let mask = KeyMask { keep: vec![true; 4], renormalize };
            let masked = m.confidence(&ModelInput { tokens: &tokens, embeddings: None, mask: Some(&mask) }).unwrap();
            assert!((plain[0] - masked[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_on_linear_softmax_model_is_closed_form() {
        let m = LinearSoftmaxModel::random(30, 4, 6);
        let tokens = [3, 9, 14, 20, 27];
        let dot = |t: usize| m.embedding[t * 4..(t + 1) * 4].iter().zip(&m.weight).map(|(a, b)| a * b).sum::<f64>();
        let s: f64 = tokens.iter().map(|&t| dot(t)).sum();
        let y = if s >= 0.0 { 0 } else { 1 };
        for i in 0..tokens.len() {
            let s2 = s - dot(tokens[i]);
            let expected = softmax(&[s, -s])[y] - softmax(&[s2, -s2])[y];
            let out = delta_confidence(&m, &tokens, &[i], ReplacementStrategy::MASK_TOKEN).unwrap();
            assert!((out.delta - expected).abs() < 1e-12);
            let sliced = delta_confidence(&m, &tokens, &[i], ReplacementStrategy::SLICE_OUT).unwrap();
            assert!((sliced.delta - expected).abs() < 1e-12);
            assert_eq!(out.delta, out.original - out.perturbed);
        }
        assert!(matches!(
            delta_confidence(&m, &tokens, &[0], ReplacementStrategy::ATTENTION_MASK),
            Err(Error::NotApplicable { .. })
        ));
    }

    #[test]
    fn slice_out_and_renormalized_mask_agree_on_window_one_cnns() {
        for seed in 0..20 {
            for attention in [AttentionKind::Tanh, AttentionKind::Dot] {
                let s = ModelSpec {
                    encoder: EncoderKind::Cnn,
                    attention,
                    kernel_width: 1,
                    embed_dim: 6,
                    hidden_dim: 6,
                    seed,
                    ..ModelSpec::default()
                };
                let m = TrainedModel::init(&s, &vocab()).unwrap();
                let tokens: Vec<usize> = (0..7).map(|i| 3 + (seed as usize * 5 + i * 3) % 27).collect();
                for remove in [vec![0], vec![2, 5], vec![1, 3, 6]] {
                    let a = delta_confidence(&m, &tokens, &remove, ReplacementStrategy::SLICE_OUT).unwrap();
                    let b = delta_confidence(&m, &tokens, &remove, ReplacementStrategy::ATTENTION_MASK.renormalized()).unwrap();
                    assert!((a.delta - b.delta).abs() < 1e-12, "seed {seed}: {} vs {}", a.delta, b.delta);
                }
            }
        }
    }

    #[test]
    fn deltas_stay_in_range() {
        let m = model(EncoderKind::Lstm, AttentionKind::Dot, 8);
        let tokens = [3, 4, 5, 6, 7];
        let trace = predict_traced(&m, &tokens).unwrap();
        for s in ReplacementStrategy::DEFAULT_SET {
            for i in 0..5 {
                let d = delta_confidence(&m, &tokens, &[i], s).unwrap();
                assert!((-1.0..=1.0).contains(&d.delta));
                assert_eq!(d.predicted, trace.predicted);
            }
        }
    }

    #[test]
    fn top_fraction_selection() {
        let w = [0.1, -0.9, 0.3, 0.0, 0.2, 0.05, -0.4, 0.6, 0.15, 0.25];
        assert_eq!(top_fraction_indices(&w, 0.1, SelectMode::RemoveTop).unwrap(), vec![1]);
        assert_eq!(top_fraction_indices(&w, 0.05, SelectMode::RemoveTop).unwrap(), vec![1]);
        assert_eq!(top_fraction_indices(&w, 0.2, SelectMode::RemoveTop).unwrap(), vec![1, 7]);
        let keep = top_fraction_indices(&w, 0.2, SelectMode::KeepTop).unwrap();
        assert_eq!(keep, vec![0, 2, 3, 4, 5, 6, 8, 9]);
        assert!(top_fraction_indices(&w, 1.0, SelectMode::RemoveTop).is_err());
        assert!(top_fraction_indices(&w, 0.0, SelectMode::RemoveTop).is_err());
    }

    #[test]
    fn ties_rank_by_ascending_index() {
        assert_eq!(rank_by_magnitude(&[0.5, -0.5, 0.5, 0.1]), vec![0, 1, 2, 3]);
        assert_eq!(top_fraction_indices(&[0.2, -0.2, 0.2, 0.2], 0.5, SelectMode::RemoveTop).unwrap(), vec![0, 1]);
    }

    #[test]
    fn strategy_ids_round_trip() {
        for s in ReplacementStrategy::DEFAULT_SET.into_iter().chain([ReplacementStrategy::ATTENTION_MASK.renormalized()]) {
            assert_eq!(s.id().parse::<ReplacementStrategy>().unwrap(), s);
        }
    }
}
