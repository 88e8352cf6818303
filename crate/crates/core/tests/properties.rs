use std::collections::BTreeSet;

use proptest::prelude::*;
use trajagg_core::gspo::group_weights;
use trajagg_core::rewards::{r_key, r_len};
use trajagg_core::{emit_output, normalize_answer, parse_output};

fn body() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.!?<>/\\[\\]\"'\n\t-]{1,60}"
        .prop_filter("non-blank", |s| !s.trim().is_empty())
        .prop_filter("no reserved tags", |s| {
            !["think", "visual_keys", "visual_key", "answer", "final_answer"]
                .iter()
                .any(|t| s.contains(&format!("<{t}>")) || s.contains(&format!("</{t}>")))
        })
}

fn key() -> impl Strategy<Value = String> {
    "[a-z0-9 ,'\"\\]\\[-]{1,12}".prop_filter_map("folded key", |s| {
        let k = s.trim().to_string();
        (!k.is_empty()).then_some(k)
    })
}

fn names() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["van", "Lady", " shirt", "dog", "DOG", "", "mug"]), 0..6)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn emitted_outputs_parse_back(think in body(), keys in prop::collection::btree_set(key(), 0..5), answer in body()) {
        let text = emit_output(&think, keys.iter().map(String::as_str), &answer).unwrap();
        let parsed = parse_output(&text, true).unwrap();
        let got: BTreeSet<String> = parsed.visual_keys.unwrap().into_iter().collect();
        prop_assert_eq!(got, keys);
        prop_assert_eq!(parsed.think, think.trim());
        prop_assert_eq!(parsed.answer, answer.trim());
    }

    #[test]
    fn parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_output(&text, false);
        let _ = parse_output(&text, true);
    }

    #[test]
    fn key_reward_is_bounded_and_symmetric_at_half(k in names(), g in names(), alpha in 0.0f64..=1.0) {
        let r = r_key::<f64>(k.iter().map(String::as_str), g.iter().map(String::as_str), alpha, 1e-8);
        prop_assert!((0.0..=1.0).contains(&r));
        let ab = r_key::<f64>(k.iter().map(String::as_str), g.iter().map(String::as_str), 0.5, 1e-8);
        let ba = r_key::<f64>(g.iter().map(String::as_str), k.iter().map(String::as_str), 0.5, 1e-8);
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn length_penalty_is_never_positive_and_monotone(n in 0usize..5000, extra in 0usize..100, p in 0.0f64..=1.0, beta in 0.0f64..0.1, j in 1usize..16) {
        let a = r_len(n, p, beta, j);
        prop_assert!(a <= 0.0);
        prop_assert!(r_len(n + extra, p, beta, j) <= a);
    }

    #[test]
    fn group_weights_form_a_distribution(rewards in prop::collection::vec(-5.0f64..5.0, 1..12), lambda in 0.0f64..10.0, shift in -100.0f64..100.0) {
        let w = group_weights(&rewards, lambda).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let ws = group_weights(&shifted, lambda).unwrap();
        for (a, b) in w.iter().zip(&ws) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        // higher reward never gets less weight
        for i in 0..rewards.len() {
            for j in 0..rewards.len() {
                if rewards[i] > rewards[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn normalization_is_idempotent(s in "[a-zA-Z ().:!?,]{0,40}|(the )?(final )?answer( is|:) ?\\(?[a-dA-D][.)]?.{0,10}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }
}
