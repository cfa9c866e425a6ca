mod support {
    pub mod bleu_oracle;
}

use qurag_core::evaluation::bleu;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use support::bleu_oracle::oracle_bleu;

const VOCAB: [&str; 8] = ["wasi", "allin", "tusuy", "qam", "ñuqa", "yaku", "inti", "mama"];

fn sentence(rng: &mut StdRng, max: usize) -> String {
    let len = rng.random_range(0..=max);
    (0..len)
        .map(|_| VOCAB[rng.random_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn matches_oracle_on_random_corpora() {
    let mut rng = StdRng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=6);
        let cands: Vec<String> = (0..n).map(|_| sentence(&mut rng, 9)).collect();
        let refs: Vec<String> = (0..n).map(|_| sentence(&mut rng, 9)).collect();
        let got = bleu(&cands, &refs).unwrap();
        worst = worst.max((got - oracle_bleu(&cands, &refs)).abs());
    }
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn identity_and_disjoint() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..100 {
        let xs: Vec<String> = (0..4).map(|_| sentence(&mut rng, 8)).collect();
        assert_eq!(bleu(&xs, &xs).unwrap(), 1.0);
    }
    assert_eq!(bleu(&["wasi allin"], &["yaku inti mama"]).unwrap(), 0.0);
}

mod properties {
    use super::*;
    use proptest::prelude::*;
    use qurag_core::evaluation::{aggregate, EvaluationScore, Metric};
    use qurag_core::{PromptCondition, RetrievalMode};

    fn text() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(VOCAB.to_vec()), 0..8).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn bleu_bounded_and_order_free(pairs in prop::collection::vec((text(), text()), 1..8), seed in any::<u64>()) {
            let (c, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
            let v = bleu(&c, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let mut shuffled = pairs.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut StdRng::seed_from_u64(seed));
            let (c2, r2): (Vec<String>, Vec<String>) = shuffled.into_iter().unzip();
            prop_assert_eq!(bleu(&c2, &r2).unwrap(), v);
            prop_assert_eq!(bleu(&c, &c).unwrap(), 1.0);
        }

        #[test]
        fn means_are_order_free(values in prop::collection::vec(0.0f64..1.0, 1..40), v in -10.0f64..10.0, n in 1usize..200) {
            let mk = |vals: &[f64]| -> Vec<EvaluationScore> {
                vals.iter().enumerate().map(|(i, x)| EvaluationScore {
                    item_id: format!("q{i}"),
                    model_id: "m".into(),
                    condition: PromptCondition::MORPH,
                    mode: RetrievalMode::Auto,
                    metric: Metric::External,
                    value: *x,
                }).collect()
            };
            let fwd = aggregate(&mk(&values))[0].mean;
            let rev: Vec<f64> = values.iter().rev().copied().collect();
            prop_assert!((aggregate(&mk(&rev))[0].mean - fwd).abs() < 1e-12);
            prop_assert_eq!(aggregate(&mk(&vec![v; n]))[0].mean, v);
        }
    }
}
