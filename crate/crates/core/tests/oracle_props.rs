use insertion_parser::oracle::{oracle_schedule, sample_subsequence, steps_lower_bound, subsequence_at, tree_weights, uniform_weights};
use insertion_parser::parse_ir::{TargetSequence, TargetToken};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn letters(body: &[u8]) -> TargetSequence {
    TargetSequence::from_body(body.iter().map(|&b| TargetToken::OpenIntent(((b'A' + b) as char).to_string())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn tree_weights_are_a_symmetric_peaked_distribution(i in 1usize..200, tau in 0.05f64..5.0) {
        let w = tree_weights(i, tau).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..i {
            prop_assert!((w[j] - w[i - 1 - j]).abs() < 1e-12);
        }
        // non-increasing away from the centre
        let c = (i - 1) / 2;
        for j in 0..c {
            prop_assert!(w[j] <= w[j + 1] + 1e-15);
        }
        for j in c + 1..i {
            prop_assert!(w[j] <= w[j - 1] + 1e-15);
        }
    }

    #[test]
    fn sharper_tau_concentrates_on_the_centre(i in 2usize..100, tau in 0.1f64..3.0) {
        let c = (i - 1) / 2;
        prop_assert!(tree_weights(i, tau / 2.0).unwrap()[c] >= tree_weights(i, tau).unwrap()[c] - 1e-15);
        prop_assert!(tree_weights(i, tau).unwrap()[c] >= uniform_weights(i).unwrap()[c] - 1e-15);
    }

    #[test]
    fn sampled_subsequences_reassemble(body in prop::collection::vec(0u8..3, 0..20), seed in any::<u64>()) {
        let target = letters(&body);
        let (hyp, cands) = sample_subsequence(&target, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(cands.len(), hyp.body().len() + 1);
        let mut rebuilt = Vec::new();
        for (k, c) in cands.iter().enumerate() {
            rebuilt.extend(c.candidates.iter().cloned());
            if k < hyp.body().len() {
                rebuilt.push(hyp.body()[k].clone());
            }
        }
        prop_assert_eq!(&rebuilt[..], target.body());
    }

    #[test]
    fn schedule_is_optimal_and_ends_at_target(body in prop::collection::vec(0u8..4, 0..300)) {
        let target = letters(&body);
        let schedule = oracle_schedule(&target);
        prop_assert_eq!(schedule.len(), steps_lower_bound(body.len()));
        if let Some(last) = schedule.last() {
            prop_assert_eq!(last.hypothesis.body(), target.body());
        }
        // every intermediate hypothesis is a subsequence with well-formed candidates
        for step in &schedule {
            prop_assert!(step.hypothesis.body().len() <= body.len());
        }
    }

    #[test]
    fn subsequence_at_keeps_exactly_the_positions(body in prop::collection::vec(0u8..5, 1..30), mask in any::<u32>()) {
        let target = letters(&body);
        let positions: Vec<usize> = (0..body.len()).filter(|b| mask & (1 << (b % 32)) != 0).collect();
        let (hyp, cands) = subsequence_at(&target, &positions);
        prop_assert_eq!(hyp.body().len(), positions.len());
        let total: usize = cands.iter().map(|c| c.count()).sum();
        prop_assert_eq!(total + positions.len(), body.len());
    }
}
