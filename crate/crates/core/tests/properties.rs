//! Randomized invariants across modules.

mod common;

use proptest::prelude::*;

use uedpo_lab::preference_loss::{dpo_loss, uedpo_loss};
use uedpo_lab::theory_lab::{optimal_policy, random_problem};
use uedpo_lab::toy_policy::{log_softmax, DecodingState};
use uedpo_lab::uncertainty::{probe_response, quantile, SequenceDiagnostics};
use uedpo_lab::visual_noise::{build_schedule, noise_vector};

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn quantile_is_monotone_and_bracketed(
        values in prop::collection::vec(-1e3f64..1e3, 1..40),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (ql, qh) = (quantile(&values, lo).unwrap(), quantile(&values, hi).unwrap());
        prop_assert!(ql <= qh);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(ql >= min && qh <= max);
        prop_assert_eq!(quantile(&values, 0.0).unwrap(), min);
        prop_assert_eq!(quantile(&values, 1.0).unwrap(), max);
    }

    #[test]
    fn log_probs_normalize(seed in 0u64..10_000) {
        let inst = common::instance(seed);
        let img = inst.pair.image.values();
        let s = DecodingState::new(img, &inst.pair.prompt, &inst.pair.chosen);
        let lp = log_softmax(&inst.theta.logits(&s).unwrap());
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probes_vanish_without_corruption(seed in 0u64..10_000) {
        let inst = common::instance(seed);
        let img = inst.pair.image.values();
        let probes = probe_response(&inst.theta, img, img, &inst.pair.prompt, &inst.pair.chosen).unwrap();
        let lp = |t: usize| {
            let s = DecodingState::new(img, &inst.pair.prompt, &inst.pair.chosen[..t]);
            inst.theta.logits(&s).unwrap()
        };
        for (t, p) in probes.iter().enumerate() {
            prop_assert_eq!(p.delta, 0.0);
            // u falls back to the gap between the top logit and the token's
            let logits = lp(t);
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(p.u, top - logits[inst.pair.chosen[t] as usize]);
        }
    }

    #[test]
    fn probes_are_finite_at_every_noise_level(seed in 0u64..10_000, k in 0usize..1000) {
        let inst = common::instance(seed);
        let img = inst.pair.image.values();
        let schedule = build_schedule(1000).unwrap();
        let blurred = schedule.corrupt(img, k, &noise_vector(seed, 0, 0, img.len())).unwrap();
        let probes = probe_response(&inst.theta, img, &blurred.values, &inst.pair.prompt, &inst.pair.chosen).unwrap();
        prop_assert_eq!(probes.len(), inst.pair.chosen.len());
        prop_assert!(probes.iter().all(|p| p.delta.is_finite() && p.u.is_finite()));
    }

    #[test]
    fn identical_policies_give_ln2_for_any_factors(seed in 0u64..10_000, lw in 0.5f64..1.5, ll in 0.5f64..1.5) {
        let inst = common::instance(seed);
        let d = dpo_loss(&inst.theta, &inst.theta, &inst.pair, 0.1).unwrap();
        prop_assert!((d.loss - std::f64::consts::LN_2).abs() < 1e-15);
        // factors scale log pi, so with pi = ref the margin is no longer 0
        let w = SequenceDiagnostics::constant(inst.pair.chosen.len(), lw);
        let l = SequenceDiagnostics::constant(inst.pair.rejected.len(), ll);
        let u = uedpo_loss(&inst.theta, &inst.theta, &inst.pair, 0.1, &w, &l).unwrap();
        let expect = 0.1
            * ((lw - 1.0) * u.chosen_tokens.iter().map(|t| t.policy_logp).sum::<f64>()
                - (ll - 1.0) * u.rejected_tokens.iter().map(|t| t.policy_logp).sum::<f64>());
        prop_assert!((u.margin - expect).abs() < 1e-12);
    }

    #[test]
    fn optimal_policy_lies_on_the_simplex(seed in 0u64..10_000, actions in 2usize..8, beta in 0.05f64..2.0) {
        let p = random_problem(seed, actions, beta, (0.5, 2.0)).unwrap();
        let s = optimal_policy(&p).unwrap();
        prop_assert!(s.pi_star.iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!((s.pi_star.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!((p.objective(&s.pi_star) - s.v_star).abs() < 1e-9);
    }
}
