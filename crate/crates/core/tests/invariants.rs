use std::collections::{BTreeMap, BTreeSet};

use oodt_core::decision::{
    audience_matrix, build_sts_outcome, fragment_for, Activation, Audience, BrokerData,
    DecisionOutcome, Listing, MarketExpectation, MarketView, ObjectPresentation, OutcomeDraft,
    Reasons,
};
use oodt_core::kernel::{
    extract_behavior, interleave, use_service, ConstantService, InstructionSequence,
};
use oodt_core::market::{run_scenario, MarketScenario, Setup, SrcEstimate, WtpDistribution};
use oodt_core::price::{
    acceptance_threshold, aggregate_rule_estimates, evaluate_bid, market_activity_signal,
    mv_bounds, BidVerdict, Comparable, ComparableKind, Money, Motive, MotiveProfile, PriceSheet,
    RuleEstimate, Signal,
};
use oodt_core::protocol::{
    owner, run_selling_thread, Action as Step, Bid, EngagementMode, LogItem, OwnerPolicy,
    ProtocolConfig, ProtocolEvent, SaleRoute, TimedEvent,
};
use proptest::prelude::*;

prop_compose! {
    fn sheet()(
        icsrp in 0i64..1_000_000,
        d1 in 1i64..400_000,
        d2 in 0i64..400_000,
        d3 in 1i64..100_000,
        d4 in 0i64..100_000,
        d5 in 0i64..100_000,
        d6 in 1i64..100_000,
        srt in 1u32..400,
        extra in 0u32..60,
        srpf in proptest::option::of(0.05f64..5.0),
    ) -> PriceSheet {
        let fsrp = icsrp + d1;
        let isrp = fsrp + d2;
        let smv = isrp + d3;
        let mv = smv + d4;
        let lp = mv + d5;
        PriceSheet {
            icsrp: Money(icsrp),
            fsrp: Money(fsrp),
            isrp: Money(isrp),
            smv: Money(smv),
            mv: Money(mv),
            lp: Money(lp),
            ip: Some(Money(lp + d6)),
            srt,
            src: 0.75,
            oetom: srt + extra,
            srpf,
        }
    }
}

fn outcome(ps: PriceSheet, listings: usize) -> DecisionOutcome {
    build_sts_outcome(OutcomeDraft {
        object_presentation: Some(ObjectPresentation {
            text: "object".into(),
            media: vec![],
        }),
        price_settings: Some(ps),
        broker: Some(BrokerData {
            identity: "broker".into(),
            commission_bps: 200,
        }),
        marketing_method: Some(
            (0..listings.max(1))
                .map(|i| Listing {
                    service: format!("l{i}"),
                    activation: Activation::Direct,
                })
                .collect(),
        ),
        reasons: Some(Reasons {
            motives: MotiveProfile {
                utility_rate: 1.0,
                disutility_rate: 2.0,
                motive_weights: BTreeMap::from([(Motive::ExpectedProfit, 1.0)]),
            },
            text: String::new(),
        }),
        market_view: Some(MarketView {
            expectation: MarketExpectation::Normal,
            text: String::new(),
        }),
        taken_by: Some("owner".into()),
        taken_at: 0,
    })
    .unwrap()
}

proptest! {
    #[test]
    fn threshold_stays_between_reservation_prices(ps in sheet(), a in 0u32..400, b in 0u32..400) {
        let (a, b) = (a.min(ps.srt), b.min(ps.srt));
        let (lo, hi) = (a.min(b), a.max(b));
        let t_lo = acceptance_threshold(&ps, lo).unwrap();
        let t_hi = acceptance_threshold(&ps, hi).unwrap();
        prop_assert!(t_hi <= t_lo);
        prop_assert!(ps.fsrp <= t_hi && t_lo <= ps.isrp);
    }

    #[test]
    fn outsiders_at_or_below_icsrp_are_never_eligible(ps in sheet(), cut in 0i64..=1000, tom in 0u32..400) {
        let bid = Money((ps.icsrp.0 - cut).max(0));
        let v = evaluate_bid(&ps, bid, tom.min(ps.srt), false).unwrap();
        prop_assert_eq!(v, BidVerdict::RejectInnerCircleGuard);
    }

    #[test]
    fn burst_and_bubble_exclude_each_other(ps in sheet(), tom in 0u32..200, p in 0u64..2000, bf in 1.0f64..5.0) {
        let s = market_activity_signal(&ps, tom, p, bf);
        if let (Some(srpf), true) = (ps.srpf, tom > 0) {
            let expected = srpf * tom as f64;
            prop_assert_eq!(s == Signal::Burst, expected > p as f64);
            prop_assert_eq!(s == Signal::Bubble, p as f64 >= bf * expected);
        } else {
            prop_assert_eq!(s, Signal::Normal);
        }
    }

    #[test]
    fn aggregation_ignores_rule_order(
        rules in proptest::collection::vec((0.0f64..1e6, 0.01f64..1.0, 0.01f64..1.0), 1..12),
        seed in any::<u64>(),
    ) {
        let rs: Vec<RuleEstimate> = rules
            .iter()
            .map(|&(value, confidence, relevance)| RuleEstimate {
                quantity: "mv".into(),
                value,
                confidence,
                relevance,
                source: String::new(),
            })
            .collect();
        let mut shuffled = rs.clone();
        // Deterministic permutation from the seed.
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.rotate_left(i as u32) % (i as u64 + 1)) as usize);
        }
        let a = aggregate_rule_estimates(&rs, "mv", 0.5).unwrap();
        let b = aggregate_rule_estimates(&shuffled, "mv", 0.5).unwrap();
        prop_assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        prop_assert_eq!(a.total_weight.to_bits(), b.total_weight.to_bits());
        prop_assert_eq!(a.conflicts.len(), b.conflicts.len());
    }

    #[test]
    fn more_comparables_only_narrow_mv_bounds(
        prices in proptest::collection::vec((0usize..3, 100_000i64..200_000), 1..10),
        extra_kind in 0usize..3,
        extra in 100_000i64..200_000,
    ) {
        let kinds = [
            ComparableKind::ListedUnsoldBeyondSrt,
            ComparableKind::SoldOutperformer,
            ComparableKind::SoldUnderperformer,
        ];
        let comps: Vec<Comparable> = prices
            .iter()
            .map(|&(k, p)| Comparable { kind: kinds[k], price: Money(p), observed_tom: 0 })
            .collect();
        let mut more = comps.clone();
        more.push(Comparable { kind: kinds[extra_kind], price: Money(extra), observed_tom: 0 });
        if let (Ok(a), Ok(b)) = (mv_bounds(&comps), mv_bounds(&more)) {
            if let (Some(x), Some(y)) = (a.lower, b.lower) {
                prop_assert!(y >= x);
            }
            if let (Some(x), Some(y)) = (a.upper, b.upper) {
                prop_assert!(y <= x);
            }
        }
    }

    #[test]
    fn fragments_never_exceed_their_audience(ps in sheet(), listings in 1usize..4) {
        let o = outcome(ps, listings);
        let matrix = audience_matrix();
        for a in Audience::ALL {
            let fields: BTreeSet<_> = fragment_for(&o, a).fields().into_keys().collect();
            prop_assert_eq!(&fields, &matrix[&a]);
        }
    }

    #[test]
    fn threshold_policy_sales_are_never_below_threshold(
        ps in sheet(),
        bids in proptest::collection::vec((0u32..60, 0i64..1_500_000, any::<bool>()), 0..20),
        auto_accept in any::<bool>(),
    ) {
        let o = outcome(ps.clone(), 1);
        let events = bids
            .iter()
            .enumerate()
            .map(|(i, &(day, price, conditional))| {
                TimedEvent::new(
                    day,
                    i as u64,
                    ProtocolEvent::BidReceived(Bid {
                        buyer: format!("b{i}"),
                        price: Money(price.max(1)),
                        valid_until: day + 7,
                        conditions: if conditional { vec![format!("c{i}")] } else { vec![] },
                    }),
                )
            })
            .collect();
        let config = ProtocolConfig { auto_accept, silent_expiry: true, ..ProtocolConfig::default() };
        let r = run_selling_thread(
            o,
            EngagementMode::SingleActorWithBrokerProposal,
            config,
            [],
            &mut owner(OwnerPolicy::ThresholdOnly),
            events,
            ps.srt + 30,
        )
        .unwrap();
        for e in r.final_state().log() {
            if let LogItem::Action(Step::Sold(sale)) = &e.item {
                prop_assert!(sale.route != SaleRoute::OptionExercise);
                let t = acceptance_threshold(&ps, sale.accepted_at).unwrap();
                prop_assert!(sale.price >= t, "sold {} below threshold {}", sale.price, t);
                prop_assert!(sale.price > ps.icsrp);
            }
        }
        prop_assert!(r.final_state().phase().is_terminal() || r.final_state().tom() <= ps.srt);
    }

    #[test]
    fn use_with_foreign_focus_changes_nothing(text in "(\\+|-)?[ab]\\.m(; (\\+|-)?[ab]\\.m|; !|; #[0-3]){0,5}") {
        let iseq: InstructionSequence = text.parse().unwrap();
        let t = extract_behavior(&iseq, 16).unwrap();
        let used = use_service(&t, &ConstantService::new("z", true), &(), 64).unwrap();
        prop_assert!(used.same_behavior(&t));
        prop_assert!(interleave(std::slice::from_ref(&t)).same_behavior(&t));
        prop_assert_eq!(extract_behavior(&iseq, 16).unwrap(), t);
    }

    #[test]
    fn estimate_is_independent_of_run_order(seed in any::<u64>(), rate in 0.0f64..2.0) {
        let ps = PriceSheet {
            icsrp: Money(100_000),
            fsrp: Money(200_000),
            isrp: Money(240_000),
            smv: Money(250_000),
            mv: Money(260_000),
            lp: Money(280_000),
            ip: Some(Money(300_000)),
            srt: 20,
            src: 0.75,
            oetom: 20,
            srpf: None,
        };
        let setup = Setup {
            outcome: outcome(ps, 1),
            mode: EngagementMode::SingleActorWithBrokerProposal,
            config: ProtocolConfig { silent_expiry: true, ..ProtocolConfig::default() },
            policy: OwnerPolicy::ThresholdOnly,
        };
        let sc = MarketScenario {
            arrival_rate: rate,
            wtp_distribution: WtpDistribution::Uniform { lo: Money(150_000), hi: Money(300_000) },
            bid_fraction: 0.95,
            preferred_buyers: vec![],
            horizon: 30,
            seed,
            bubble_mode: false,
            conditional_bid_rate: 0.0,
            condition_success_rate: 1.0,
            condition_delay: 5,
        };
        let forward: Vec<_> = (0..20).map(|i| run_scenario(&sc, &setup, i).unwrap().result).collect();
        let backward: Vec<_> = (0..20).rev().map(|i| run_scenario(&sc, &setup, i).unwrap().result).collect();
        prop_assert_eq!(SrcEstimate::from_results(&forward), SrcEstimate::from_results(&backward));
        let mut reversed = backward.clone();
        reversed.reverse();
        prop_assert_eq!(forward, reversed);
    }
}
