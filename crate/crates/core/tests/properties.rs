use faithbench::data::MASK;
use faithbench::explain::random_explanation;
use faithbench::metrics::{average_ranks, is_violation, spearman, trapezoid_auc};
use faithbench::models::softmax;
use faithbench::perturb::{rank_by_magnitude, remove_tokens, top_fraction_indices, ReplacementStrategy, SelectMode};
use faithbench::tensor::{finite_difference, relative_error};
use faithbench::{Tape, Tensor};
use proptest::prelude::*;

fn ranks_by_counting(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn tied_list(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..6).prop_map(|v| v as f64 * 0.25), len)
}

proptest! {
    #[test]
    fn average_ranks_match_counting(v in tied_list(1..30)) {
        let r = average_ranks(&v);
        prop_assert_eq!(&r, &ranks_by_counting(&v));
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn spearman_is_symmetric_and_bounded(a in tied_list(2..25), seed in 0u64..1000) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| ((i as u64 * 31 + seed) % 7) as f64 - x).collect();
        match (spearman(&a, &b), spearman(&b, &a)) {
            (Some(x), Some(y)) => {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
            }
            (None, None) => {}
            other => prop_assert!(false, "definedness differs: {:?}", other),
        }
    }

    #[test]
    fn spearman_of_monotone_map_is_one(a in prop::collection::vec(-50.0f64..50.0, 2..20)) {
        let b: Vec<f64> = a.iter().map(|x| x.powi(3) + 2.0).collect();
        if let Some(rho) = spearman(&a, &b) {
            prop_assert!((rho - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn remove_and_keep_partition_tokens(weights in prop::collection::vec(-1.0f64..1.0, 2..40), frac in 0.01f64..0.99) {
        let removed = top_fraction_indices(&weights, frac, SelectMode::RemoveTop).unwrap();
        let kept_out = top_fraction_indices(&weights, frac, SelectMode::KeepTop).unwrap();
        let n = weights.len();
        let k = ((frac * n as f64).floor() as usize).max(1);
        prop_assert_eq!(removed.len(), k.min(n));
        let mut all: Vec<usize> = removed.iter().chain(&kept_out).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        // removed tokens are never smaller in magnitude than survivors
        let min_removed = removed.iter().map(|&i| weights[i].abs()).fold(f64::INFINITY, f64::min);
        prop_assert!(kept_out.iter().all(|&i| weights[i].abs() <= min_removed));
    }

    #[test]
    fn rank_by_magnitude_is_a_descending_permutation(weights in prop::collection::vec(-3.0f64..3.0, 1..30)) {
        let order = rank_by_magnitude(&weights);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..weights.len()).collect::<Vec<_>>());
        prop_assert!(order.windows(2).all(|w| weights[w[0]].abs() >= weights[w[1]].abs()));
    }

    #[test]
    fn replacement_strategies_shape(tokens in prop::collection::vec(3usize..50, 2..20), pick in 0usize..1000) {
        let i = pick % tokens.len();
        let sliced = remove_tokens(&tokens, &[i], ReplacementStrategy::SLICE_OUT).unwrap();
        prop_assert_eq!(sliced.tokens.len(), tokens.len() - 1);
        let masked = remove_tokens(&tokens, &[i], ReplacementStrategy::MASK_TOKEN).unwrap();
        prop_assert_eq!(masked.tokens[i], MASK);
        prop_assert_eq!(masked.tokens.len(), tokens.len());
        let att = remove_tokens(&tokens, &[i], ReplacementStrategy::ATTENTION_MASK).unwrap();
        prop_assert_eq!(&att.tokens, &tokens);
        let keep = &att.mask.as_ref().unwrap().keep;
        prop_assert_eq!(keep.iter().filter(|k| !**k).count(), 1);
        prop_assert!(!keep[i]);
    }

    #[test]
    fn violation_needs_opposite_signs(w in -2.0f64..2.0, d in -1.0f64..1.0) {
        prop_assert_eq!(is_violation(w, d), (w > 0.0 && d < 0.0) || (w < 0.0 && d > 0.0));
    }

    #[test]
    fn constant_curve_auc_is_the_constant(c in 0.0f64..1.0) {
        let t = [0.0, 0.05, 0.1, 0.2, 0.5, 0.9];
        prop_assert!((trapezoid_auc(&t, &[c; 6]) - c).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-300.0f64..300.0, 1..10)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn random_explanation_is_seeded_and_bounded(n in 1usize..50, seed in any::<u64>()) {
        let a = random_explanation(n, 0, seed);
        prop_assert_eq!(&a.weights, &random_explanation(n, 0, seed).weights);
        prop_assert!(a.weights.iter().all(|w| (-1.0..1.0).contains(w)));
    }

    #[test]
    fn chained_ops_match_finite_differences(values in prop::collection::vec(-1.5f64..1.5, 6), mix in prop::collection::vec(-1.0f64..1.0, 6)) {
        let x0 = Tensor::matrix(2, 3, values).unwrap();
        let m = Tensor::matrix(3, 2, mix).unwrap();
        let f = |x: &Tensor| {
            let tape = Tape::new();
            let h = tape.tanh(&tape.matmul(x, &m).unwrap()).unwrap();
            let s = tape.softmax(&h, 1).unwrap();
            let l = tape.log(&tape.add(&s, &Tensor::matrix(2, 2, vec![1.0; 4]).unwrap()).unwrap()).unwrap();
            tape.sum(&tape.mul(&l, &tape.sigmoid(&h).unwrap()).unwrap(), None).unwrap().item()
        };
        let tape = Tape::new();
        let x = tape.leaf(&x0);
        let h = tape.tanh(&tape.matmul(&x, &m).unwrap()).unwrap();
        let s = tape.softmax(&h, 1).unwrap();
        let l = tape.log(&tape.add(&s, &Tensor::matrix(2, 2, vec![1.0; 4]).unwrap()).unwrap()).unwrap();
        let root = tape.sum(&tape.mul(&l, &tape.sigmoid(&h).unwrap()).unwrap(), None).unwrap();
        let g = tape.backward(&root).unwrap();
        prop_assert!(relative_error(&g.wrt(&x), &finite_difference(f, &x0, 1e-5)) < 1e-6);
    }
}
