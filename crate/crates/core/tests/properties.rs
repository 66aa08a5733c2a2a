use proptest::prelude::*;
use zenith_core::evaluator::{auc, similarity_matrix};
use zenith_core::featurizer::{validate_token_plan, FeatureKind, FeatureSchema, FeatureSpec, TokenPlan};
use zenith_core::token_boost::{top_k, RouterTrace};
use zenith_core::token_fusion::{detokenize, retokenize};
use zenith_core::trainer::warmup_lr;
use zenith_core::{grouped_matmul, matmul, Tensor};

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(prop::bool::ANY, n - 2).prop_map(|mut v| {
                v.push(true);
                v.push(false);
                v.into_iter().map(|b| f64::from(u8::from(b))).collect()
            }),
        )
    })
}

fn token_batch() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(b, t, d)| {
        prop::collection::vec(-3.0f64..3.0, b * t * d).prop_map(move |v| Tensor::new(vec![b, t, d], v).unwrap())
    })
}

fn schema() -> impl Strategy<Value = FeatureSchema> {
    let kind = prop_oneof![Just(FeatureKind::Id), Just(FeatureKind::Categorical), Just(FeatureKind::Dense)];
    prop::collection::vec((kind, 0usize..4), 1..16).prop_map(|specs| FeatureSchema {
        features: specs
            .into_iter()
            .enumerate()
            .map(|(i, (kind, g))| FeatureSpec {
                name: format!("f{i}"),
                kind,
                vocab: 5,
                group: format!("g{g}"),
                emb_dim: 2,
            })
            .collect(),
    })
}

proptest! {
    #[test]
    fn auc_is_invariant_to_monotone_transforms((scores, labels) in scores_and_labels(), a in 0.1f64..4.0, b in -2.0f64..2.0) {
        let base = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| a * s + s.powi(3) + b).collect();
        prop_assert!((auc(&mapped, &labels).unwrap() - base).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn flipping_labels_mirrors_auc((scores, labels) in scores_and_labels()) {
        let flipped: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
        let sum = auc(&scores, &labels).unwrap() + auc(&scores, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_is_symmetric_bounded_and_scale_free(x in token_batch(), c in 0.1f64..10.0) {
        let m = similarity_matrix(&x, 1).unwrap();
        let scaled = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect()).unwrap();
        let ms = similarity_matrix(&scaled, 1).unwrap();
        for i in 0..m.tokens {
            for j in 0..m.tokens {
                prop_assert!((m.at(i, j) - m.at(j, i)).abs() < 1e-12);
                prop_assert!(m.at(i, j) <= 1.0 + 1e-12 && m.at(i, j) >= -1e-12);
                prop_assert!((m.at(i, j) - ms.at(i, j)).abs() < 1e-9);
            }
        }
        if m.zero_tokens == 0 {
            for i in 0..m.tokens {
                prop_assert!((m.at(i, i) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warmup_is_monotone_and_reaches_base(base in 1e-5f64..1.0, warmup in 0usize..500, step in 0usize..1000) {
        let lr = warmup_lr(step, base, warmup);
        prop_assert!(lr > 0.0 && lr <= base);
        prop_assert!(warmup_lr(step + 1, base, warmup) >= lr);
        if step >= warmup {
            prop_assert_eq!(lr, base);
        }
    }

    #[test]
    fn retokenize_round_trips(t in 1usize..9, k in 1usize..17, d in 1usize..17, seed in any::<u64>()) {
        prop_assume!((t * k) % d == 0);
        let x = Tensor::from_fn(&[t, k], |i| (i as u64 ^ seed) as f64);
        let y = retokenize(x.clone(), d).unwrap();
        prop_assert_eq!(y.shape(), &[t * k / d, d]);
        prop_assert_eq!(y.data(), x.data());
        prop_assert_eq!(detokenize(y, k).unwrap(), x);
    }

    #[test]
    fn router_traces_satisfy_invariants(
        (b, t, e, a, logits) in (1usize..4, 1usize..5, 1usize..7).prop_flat_map(|(b, t, e)| {
            (Just(b), Just(t), Just(e), 1..=e, prop::collection::vec(-20.0f64..20.0, b * t * e))
        })
    ) {
        let trace = RouterTrace::from_logits(logits.clone(), b, t, e, a);
        prop_assert!(trace.check_invariants(1e-9).is_ok());
        prop_assert!((trace.mean_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (pos, row) in logits.chunks(e).enumerate() {
            let chosen = top_k(row, a);
            let worst_in = chosen.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
            for j in 0..e {
                let m = trace.mask[pos * e + j];
                prop_assert_eq!(m, chosen.contains(&j));
                if !m {
                    prop_assert!(row[j] <= worst_in);
                }
            }
        }
    }

    #[test]
    fn default_token_plans_follow_the_rules(s in schema(), max_per_token in 1usize..5) {
        let plan = TokenPlan::from_schema(&s, 8, max_per_token, None);
        prop_assert!(validate_token_plan(&s, &plan).is_empty());
        prop_assert!(plan.tokens.iter().all(|t| t.features.len() <= max_per_token));
    }

    #[test]
    fn grouped_matmul_equals_loop(
        dims in prop::collection::vec((1usize..9, 1usize..9, 1usize..9), 1..6),
        seed in any::<u64>(),
    ) {
        let fill = |r: usize, c: usize, salt: u64| {
            Tensor::from_fn(&[r, c], |i| ((i as u64).wrapping_mul(2654435761) ^ seed ^ salt) as f64 % 7.0 - 3.0)
        };
        let lhs: Vec<Tensor> = dims.iter().enumerate().map(|(g, &(m, k, _))| fill(m, k, g as u64)).collect();
        let rhs: Vec<Tensor> = dims.iter().enumerate().map(|(g, &(_, k, n))| fill(k, n, 100 + g as u64)).collect();
        let packed = grouped_matmul(&lhs, &rhs).unwrap();
        for ((a, b), c) in lhs.iter().zip(&rhs).zip(&packed) {
            prop_assert!(matmul(a, b).unwrap().max_abs_diff(c).unwrap() <= 1e-12);
        }
    }
}
