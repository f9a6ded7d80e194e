use ospd_core::langmodel::{seq_logprob, TableOracle};
use ospd_core::obfuscation::{
    build_virtual_prompts, gqs, prf_index, verify_bound, winnow, FakeNgramSet, ObfuscationConfig, Span, TaggedPrompt,
};
use ospd_core::protocol::{Controller, GateMode, Message, Tag, Verdict};
use ospd_core::security::{success_bounds, wilson_interval};
use proptest::prelude::*;

fn dist(weights: &[f64]) -> Vec<f64> {
    let z: f64 = weights.iter().sum();
    weights.iter().map(|w| w / z).collect()
}

/// A table oracle whose distribution after each one-token context is given.
fn oracle(default: &[f64], per_ctx: &[Vec<f64>]) -> TableOracle {
    let mut o = TableOracle::new(dist(default)).unwrap();
    for (c, d) in per_ctx.iter().enumerate() {
        o = o.with(&[c as u32], dist(d)).unwrap();
    }
    o
}

fn weights(v: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gqs_candidates_within_bound(
        default in weights(8),
        ctx in prop::collection::vec(weights(8), 8),
        tokens in prop::collection::vec(0u32..8, 2..5),
        start in 0usize..2,
        eps in 0.01f64..2.0,
        lambda_max in 1usize..20,
    ) {
        let o = oracle(&default, &ctx);
        let len = tokens.len() - start;
        let prompt = TaggedPrompt::new(tokens.clone(), vec![Span::new(start, len)]).unwrap();
        let cfg = ObfuscationConfig { epsilon: eps, lambda_max, ..Default::default() };
        let set = gqs(&prompt, 0, &cfg, &o).unwrap();
        let auth = &tokens[start..];
        prop_assert!(set.includes_authentic());
        prop_assert!(set.len() <= lambda_max + 1);
        for c in set.candidates() {
            prop_assert_eq!(c.len(), len);
            prop_assert!(verify_bound(auth, c, &tokens[..start], eps, &o));
        }
    }

    #[test]
    fn candidate_pool_grows_with_epsilon(
        default in weights(12),
        ctx in prop::collection::vec(weights(12), 12),
        tokens in prop::collection::vec(0u32..12, 2..4),
        k in -6i32..2,
    ) {
        let o = oracle(&default, &ctx);
        let prompt = TaggedPrompt::new(tokens.clone(), vec![Span::new(1, tokens.len() - 1)]).unwrap();
        let size = |eps: f64| {
            let cfg = ObfuscationConfig { epsilon: eps, lambda_max: 10_000, ..Default::default() };
            gqs(&prompt, 0, &cfg, &o).unwrap().len()
        };
        let eps = 2f64.powi(k);
        prop_assert!(size(eps) <= size(2.0 * eps));
    }

    #[test]
    fn virtual_prompts_hide_the_authentic_one(
        tokens in prop::collection::vec(0u32..50, 3..8),
        fakes in prop::collection::btree_set(50u32..90, 1..6),
        lambda_max in 1usize..8,
        session in any::<u64>(),
    ) {
        let last = tokens.len() - 1;
        let prompt = TaggedPrompt::new(tokens.clone(), vec![Span::new(last, 1)]).unwrap();
        let set = FakeNgramSet::new(0, 1.0, vec![tokens[last]], fakes.iter().map(|f| vec![*f]).collect()).unwrap();
        let cfg = ObfuscationConfig { lambda_max, lambda_min: 0, ..Default::default() };
        let vps = build_virtual_prompts(&prompt, &[set], &cfg, session).unwrap();
        prop_assert_eq!(vps.lambda(), lambda_max.min(fakes.len()));
        prop_assert_eq!(vps.prompts().len(), vps.lambda() + 1);
        prop_assert_eq!(vps.authentic(), tokens.as_slice());
        prop_assert_eq!(vps.idx(), prf_index(&cfg.prf_key, session, vps.lambda()));
        let mut distinct = vps.prompts().to_vec();
        distinct.sort();
        distinct.dedup();
        prop_assert_eq!(distinct.len(), vps.prompts().len());
        for p in vps.prompts() {
            prop_assert_eq!(p.len(), tokens.len());
            prop_assert_eq!(&p[..last], &tokens[..last]);
        }
        prop_assert_eq!(winnow(vps.prompts(), vps.idx()).unwrap(), tokens);
    }

    #[test]
    fn prf_index_in_range(key in prop::collection::vec(any::<u8>(), 0..32), session in any::<u64>(), lambda in 0usize..1000) {
        prop_assert!(prf_index(&key, session, lambda) <= lambda);
    }

    #[test]
    fn bounds_ordered_and_falling(eta in 1usize..10, lambda in 9usize..60, eps in 0.0f64..3.0, delta in 0.0f64..1.0) {
        let (lo, hi) = success_bounds(eta, lambda, eps, delta).unwrap();
        let (lo2, hi2) = success_bounds(eta, lambda + 1, eps, delta).unwrap();
        prop_assert!(0.0 < lo && lo <= hi && hi <= 1.0);
        prop_assert!(lo2 <= lo && hi2 <= hi);
        let (wlo, whi) = success_bounds(eta, lambda, eps + 0.5, delta).unwrap();
        prop_assert!(wlo <= lo && whi >= hi);
    }

    #[test]
    fn wilson_brackets_the_estimate(k in 0u64..1000, extra in 0u64..1000) {
        let n = k + extra + 1;
        let (lo, hi) = wilson_interval(k, n, 3.0);
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }

    #[test]
    fn controller_blocks_every_non_token(
        tag in prop::sample::select(vec![Tag::Query, Tag::Partial, Tag::FinalY, Tag::Control, Tag::Abort]),
        session in 0u32..4,
        payload in prop::collection::vec(any::<u8>(), 0..64),
    ) {
        let mut c = Controller::new(GateMode::Exact);
        c.expect(session, 1);
        prop_assert_eq!(c.gate(&Message::new(tag, session, 0, 0, payload)), Verdict::Block);
        prop_assert!(c.is_killed(session));
    }
}

#[test]
fn seq_logprob_adds_up() {
    let o = oracle(&[1.0, 2.0, 3.0], &[vec![3.0, 2.0, 1.0]]);
    let lp = seq_logprob(&o, &[0, 2], &[]);
    assert!((lp - 2.0 * (1.0f64 / 6.0).ln()).abs() < 1e-12, "{lp}");
}
