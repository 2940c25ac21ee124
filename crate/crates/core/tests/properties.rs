use proptest::prelude::*;

use prepo::objective::{clipped_term, group_advantage, ClipConfig};
use prepo::scheduler::{select_window, window_start, Pacing, ScoredBatch, SelectionState};
use prepo::weighting::{effective_batch_size, relative_weights, EntropyMode};
use prepo::Rollout;

fn pacing() -> impl Strategy<Value = Pacing> {
    prop_oneof![Just(Pacing::Linear), Just(Pacing::Quadratic), Just(Pacing::Exponential)]
}

fn batch() -> impl Strategy<Value = Vec<Rollout>> {
    prop::collection::vec(prop::collection::vec(0.01f64..3.0, 1..12), 1..16).prop_map(|seqs| {
        seqs.into_iter()
            .enumerate()
            .map(|(i, h)| Rollout::from_entropies(i, h))
            .collect()
    })
}

proptest! {
    #[test]
    fn window_start_is_bounded_and_monotone(
        (b, k) in (1usize..200).prop_flat_map(|b| (Just(b), 1..=b)),
        r1 in 0.0f64..=1.0,
        r2 in 0.0f64..=1.0,
        p in pacing(),
    ) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let s_lo = window_start(lo, b, k, p).unwrap();
        let s_hi = window_start(hi, b, k, p).unwrap();
        prop_assert!(s_hi <= b - k);
        prop_assert!(s_lo <= s_hi);
        prop_assert_eq!(window_start(0.0, b, k, p).unwrap(), 0);
        prop_assert_eq!(window_start(1.0, b, k, p).unwrap(), b - k);
    }

    #[test]
    fn selection_is_a_sorted_window(
        scores in prop::collection::vec(1.0f64..50.0, 1..60),
        k_frac in 0.0f64..1.0,
        rho in 0.0f64..=1.0,
        p in pacing(),
    ) {
        let n = scores.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let scored = ScoredBatch::new(scores.iter().copied().enumerate().collect()).unwrap();
        let sel = select_window(&scored, &SelectionState::new(rho, k, n, p).unwrap()).unwrap();
        let sorted = scored.sorted();
        prop_assert_eq!(sel.ids.len(), k);
        let expected: Vec<usize> = sorted[sel.start..sel.start + k].iter().map(|e| e.0).collect();
        prop_assert_eq!(sel.ids, expected);
    }

    #[test]
    fn token_weighted_weights_preserve_mean_length(b in batch()) {
        let w = relative_weights(&b, EntropyMode::TokenWeighted).unwrap();
        let n = b.len() as f64;
        let lhs: f64 = w.weights.iter().zip(&w.lengths).map(|(w, &l)| w * l as f64).sum::<f64>() / n;
        let rhs = w.lengths.iter().sum::<usize>() as f64 / n;
        prop_assert!((lhs - rhs).abs() < 1e-9 * rhs.max(1.0));
        prop_assert!(w.weights.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn sequence_mean_weights_average_to_one(b in batch()) {
        let w = relative_weights(&b, EntropyMode::SequenceMean).unwrap();
        let mean = w.weights.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn power_of_two_scaling_is_bit_exact(b in batch(), e in -4i32..6) {
        let c = 2f64.powi(e);
        for mode in [EntropyMode::TokenWeighted, EntropyMode::SequenceMean] {
            let base = relative_weights(&b, mode).unwrap();
            let scaled: Vec<Rollout> = b
                .iter()
                .map(|r| Rollout::from_entropies(r.prompt_id, r.token_entropies.iter().map(|h| h * c).collect()))
                .collect();
            prop_assert_eq!(relative_weights(&scaled, mode).unwrap().weights, base.weights);
        }
    }

    #[test]
    fn equal_lengths_give_unit_effective_batch(
        seqs in prop::collection::vec(prop::collection::vec(0.01f64..3.0, 5), 1..16),
    ) {
        let b: Vec<Rollout> = seqs.into_iter().enumerate().map(|(i, h)| Rollout::from_entropies(i, h)).collect();
        for mode in [EntropyMode::TokenWeighted, EntropyMode::SequenceMean] {
            prop_assert_eq!(effective_batch_size(&relative_weights(&b, mode).unwrap()), 1.0);
        }
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-5.0f64..5.0, 2..32)) {
        let (adv, zero) = group_advantage(&rewards).unwrap();
        if !zero {
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(adv.iter().all(|a| *a == 0.0));
        }
    }

    #[test]
    fn clipped_term_never_exceeds_unclipped(ratio in 0.0f64..4.0, adv in -3.0f64..3.0) {
        let clip = ClipConfig::default();
        prop_assert!(clipped_term(ratio, adv, &clip) <= ratio * adv);
        if (1.0 - clip.eps_low..=1.0 + clip.eps_high).contains(&ratio) {
            prop_assert_eq!(clipped_term(ratio, adv, &clip), ratio * adv);
        }
    }
}
