//! Seeded buyer behavior and Monte-Carlo estimates of selling-reservation
//! certainty.
//!
//! Every run draws from its own ChaCha8 stream: the scenario seed picks the
//! key and the run index picks the stream, so run `i` is reproducible on
//! its own and runs may be evaluated in any order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::decision::DecisionOutcome;
use crate::kernel::Bound;
use crate::price::{Days, Money, PriceSheet, Signal};
use crate::protocol::{
    run_selling_thread, Bid, EngagementMode, OwnerContext, OwnerPolicy, ProtocolConfig,
    ProtocolError, ProtocolEvent, RunTrace, SaleRoute, TerminationReason, TimedEvent,
};

pub const RNG_ALGORITHM: &str = "chacha8";
pub const DEFAULT_BID_FRACTION: f64 = 0.95;
pub const BID_VALIDITY_DAYS: Days = 7;
pub const DEFAULT_CONDITION_DELAY: Days = 5;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WtpDistribution {
    PointMass { value: Money },
    Uniform { lo: Money, hi: Money },
    /// Log of the willingness to pay, in minor units, is `N(mu, sigma²)`.
    LogNormal { mu: f64, sigma: f64 },
}

impl WtpDistribution {
    fn sample<R: Rng>(&self, rng: &mut R) -> Money {
        match *self {
            WtpDistribution::PointMass { value } => value,
            WtpDistribution::Uniform { lo, hi } => Money(rng.random_range(lo.0..=hi.0)),
            WtpDistribution::LogNormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma).expect("validated scenario");
                let x = d.sample(rng);
                Money(libm::round(x.min(i64::MAX as f64 / 2.0)) as i64)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferredBuyer {
    pub id: String,
    pub wtp: Money,
}

fn default_bid_fraction() -> f64 {
    DEFAULT_BID_FRACTION
}

fn default_condition_delay() -> Days {
    DEFAULT_CONDITION_DELAY
}

fn default_condition_success() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketScenario {
    /// Expected prospects per day.
    pub arrival_rate: f64,
    pub wtp_distribution: WtpDistribution,
    /// A buyer opens at this fraction of `min(wtp, lp)`.
    #[serde(default = "default_bid_fraction")]
    pub bid_fraction: f64,
    #[serde(default)]
    pub preferred_buyers: Vec<PreferredBuyer>,
    pub horizon: Days,
    pub seed: u64,
    /// Heated market: bids are taken on the whole willingness to pay and may
    /// exceed the list price.
    #[serde(default)]
    pub bubble_mode: bool,
    /// Probability that an outside bid is conditional on financing.
    #[serde(default)]
    pub conditional_bid_rate: f64,
    #[serde(default = "default_condition_success")]
    pub condition_success_rate: f64,
    #[serde(default = "default_condition_delay")]
    pub condition_delay: Days,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("arrival rate must be finite and non-negative, got {0}")]
    ArrivalRate(f64),
    #[error("bid fraction must lie in (0, 1], got {0}")]
    BidFraction(f64),
    #[error("horizon must be at least one day")]
    Horizon,
    #[error("invalid willingness-to-pay distribution: {0}")]
    Wtp(String),
    #[error("{name} must lie in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("at least one run is required")]
    NoRuns,
}

impl MarketScenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.arrival_rate.is_finite() && self.arrival_rate >= 0.0) {
            return Err(ScenarioError::ArrivalRate(self.arrival_rate));
        }
        if !(self.bid_fraction > 0.0 && self.bid_fraction <= 1.0) {
            return Err(ScenarioError::BidFraction(self.bid_fraction));
        }
        if self.horizon < 1 {
            return Err(ScenarioError::Horizon);
        }
        match self.wtp_distribution {
            WtpDistribution::PointMass { value } if value.0 < 0 => {
                return Err(ScenarioError::Wtp(format!("negative point mass {value}")))
            }
            WtpDistribution::Uniform { lo, hi } if lo.0 < 0 || lo > hi => {
                return Err(ScenarioError::Wtp(format!("empty range [{lo}, {hi}]")))
            }
            WtpDistribution::LogNormal { mu, sigma }
                if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) =>
            {
                return Err(ScenarioError::Wtp(format!("mu {mu}, sigma {sigma}")))
            }
            _ => {}
        }
        for (name, value) in [
            ("conditional_bid_rate", self.conditional_bid_rate),
            ("condition_success_rate", self.condition_success_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ScenarioError::Probability { name, value });
            }
        }
        Ok(())
    }

    /// The generator for run `run`.
    pub fn rng(&self, run: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(run);
        rng
    }

    /// The same market under another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

fn scaled(m: Money, fraction: f64) -> Money {
    Money(libm::round(m.0 as f64 * fraction) as i64)
}

/// The input events of run `run`, in processing order.
///
/// Daily arrivals are Poisson; each prospect registers, and bids
/// `γ · min(wtp, lp)` when `min(wtp, lp) ≥ fsrp`. Preferred buyers each
/// register on one uniformly drawn day and bid `γ · min(wtp, icsrp)`.
pub fn generate_events(sc: &MarketScenario, ps: &PriceSheet, run: u64) -> Vec<TimedEvent> {
    let mut rng = sc.rng(run);
    let mut events = Vec::new();
    let mut id = 0u64;
    let mut push = |events: &mut Vec<TimedEvent>, day: Days, event: ProtocolEvent| {
        id += 1;
        events.push(TimedEvent::new(day, id, event));
    };

    let preferred_days: Vec<Days> = sc
        .preferred_buyers
        .iter()
        .map(|_| rng.random_range(0..sc.horizon))
        .collect();
    let arrivals = (sc.arrival_rate > 0.0).then(|| Poisson::new(sc.arrival_rate).expect("validated"));

    for day in 0..sc.horizon {
        for (pb, _) in sc
            .preferred_buyers
            .iter()
            .zip(&preferred_days)
            .filter(|(_, d)| **d == day)
        {
            push(
                &mut events,
                day,
                ProtocolEvent::ProspectArrived {
                    prospect: pb.id.clone(),
                },
            );
            let price = scaled(core::cmp::min(pb.wtp, ps.icsrp), sc.bid_fraction);
            if price.0 > 0 {
                push(
                    &mut events,
                    day,
                    ProtocolEvent::BidReceived(Bid {
                        buyer: pb.id.clone(),
                        price,
                        valid_until: day + BID_VALIDITY_DAYS,
                        conditions: Vec::new(),
                    }),
                );
            }
        }
        let count = match &arrivals {
            Some(d) => d.sample(&mut rng) as u64,
            None => 0,
        };
        for k in 0..count {
            let prospect = format!("p{day}-{k}");
            push(
                &mut events,
                day,
                ProtocolEvent::ProspectArrived {
                    prospect: prospect.clone(),
                },
            );
            let wtp = sc.wtp_distribution.sample(&mut rng);
            let capped = core::cmp::min(wtp, ps.lp);
            if capped < ps.fsrp {
                continue;
            }
            let base = if sc.bubble_mode { wtp } else { capped };
            let price = scaled(base, sc.bid_fraction);
            let conditional =
                sc.conditional_bid_rate > 0.0 && rng.random_bool(sc.conditional_bid_rate);
            let mut conditions = Vec::new();
            if conditional {
                let condition = format!("financing:{prospect}");
                let met = rng.random_bool(sc.condition_success_rate);
                let at = day + core::cmp::max(1, sc.condition_delay);
                let event = if met {
                    ProtocolEvent::ConditionMet {
                        condition: condition.clone(),
                    }
                } else {
                    ProtocolEvent::ConditionFailed {
                        condition: condition.clone(),
                    }
                };
                push(&mut events, at, event);
                conditions.push(condition);
            }
            push(
                &mut events,
                day,
                ProtocolEvent::BidReceived(Bid {
                    buyer: prospect,
                    price,
                    valid_until: day + BID_VALIDITY_DAYS,
                    conditions,
                }),
            );
        }
    }
    crate::protocol::order_events(&mut events);
    events
}

/// Everything a run needs besides the market.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub outcome: DecisionOutcome,
    pub mode: EngagementMode,
    pub config: ProtocolConfig,
    pub policy: OwnerPolicy,
}

/// The result record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub run: u64,
    pub seed: u64,
    pub rng: String,
    pub sold: bool,
    pub price: Option<Money>,
    pub buyer: Option<String>,
    pub route: Option<SaleRoute>,
    pub commission: Option<Money>,
    pub tom: Days,
    pub srt: Days,
    pub fsrp: Money,
    pub termination: Option<TerminationReason>,
    pub signals: Vec<(Days, Signal)>,
    pub unique_prospects: u64,
    /// Bids the thread received before it finished.
    pub bids: u64,
    pub options_issued: u32,
    pub options_exercised: u32,
    pub steering_calls: u64,
}

impl SimulationResult {
    /// Sold at no less than the final reservation price within the
    /// originally planned selling time.
    pub fn is_success(&self) -> bool {
        self.sold && self.price.is_some_and(|p| p >= self.fsrp) && self.tom <= self.srt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub result: SimulationResult,
    pub trace: RunTrace,
}

pub fn run_scenario(
    sc: &MarketScenario,
    setup: &Setup,
    run: u64,
) -> Result<SimulationRun, ProtocolError> {
    let ps = setup.outcome.price_settings();
    let events = generate_events(sc, ps, run);
    let mut owner = Bound::new(setup.policy.clone(), OwnerContext::default());
    let r = run_selling_thread(
        setup.outcome.clone(),
        setup.mode,
        setup.config.clone(),
        sc.preferred_buyers.iter().map(|p| p.id.clone()),
        &mut owner,
        events,
        sc.horizon,
    )?;
    let s = r.final_state().summary();
    let bids = r
        .final_state()
        .recorded_inputs()
        .iter()
        .filter(|(_, e)| matches!(e, ProtocolEvent::BidReceived(_)))
        .count() as u64;
    let result = SimulationResult {
        run,
        seed: sc.seed,
        rng: RNG_ALGORITHM.into(),
        sold: s.sold,
        price: s.price,
        buyer: s.buyer,
        route: s.route,
        commission: s.commission,
        tom: s.tom,
        srt: s.original_srt,
        fsrp: ps.fsrp,
        termination: s.termination,
        signals: s.signals,
        unique_prospects: s.unique_prospects,
        bids,
        options_issued: s.options_issued,
        options_exercised: s.options_exercised,
        steering_calls: r.trace.steering_calls().count() as u64,
    };
    Ok(SimulationRun {
        result,
        trace: r.trace,
    })
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z95 * libm::sqrt(p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)) / denom;
    (
        (centre - half).max(0.0),
        (centre + half).min(1.0),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrcEstimate {
    pub n_runs: u64,
    pub successes: u64,
    pub p_hat: f64,
    pub ci95: (f64, f64),
}

impl SrcEstimate {
    pub fn from_counts(successes: u64, n_runs: u64) -> Self {
        Self {
            n_runs,
            successes,
            p_hat: if n_runs == 0 {
                0.0
            } else {
                successes as f64 / n_runs as f64
            },
            ci95: wilson_interval(successes, n_runs),
        }
    }

    pub fn from_results<'a>(results: impl IntoIterator<Item = &'a SimulationResult>) -> Self {
        let (mut successes, mut n) = (0, 0);
        for r in results {
            n += 1;
            successes += u64::from(r.is_success());
        }
        Self::from_counts(successes, n)
    }

    pub fn half_width(&self) -> f64 {
        (self.ci95.1 - self.ci95.0) / 2.0
    }

    pub fn covers(&self, p: f64) -> bool {
        self.ci95.0 <= p && p <= self.ci95.1
    }
}

/// Runs `0..n_runs` in order and estimates the probability of a sale at
/// or above fsrp within srt.
pub fn estimate_src(
    sc: &MarketScenario,
    setup: &Setup,
    n_runs: u64,
) -> Result<SrcEstimate, EstimateError> {
    if n_runs == 0 {
        return Err(EstimateError::Scenario(ScenarioError::NoRuns));
    }
    sc.validate()?;
    let mut successes = 0;
    for run in 0..n_runs {
        successes += u64::from(run_scenario(sc, setup, run)?.result.is_success());
    }
    Ok(SrcEstimate::from_counts(successes, n_runs))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimateError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// `1 − e^{−λ·days}`: the chance of at least one Poisson arrival.
pub fn analytic_arrival_probability(arrival_rate: f64, days: Days) -> f64 {
    1.0 - libm::exp(-arrival_rate * days as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::{build_sts_outcome, sample_draft};
    use alloc::vec;

    fn setup_with(srt: Days, config: ProtocolConfig, policy: OwnerPolicy) -> Setup {
        let mut draft = sample_draft();
        let ps = draft.price_settings.as_mut().unwrap();
        ps.srt = srt;
        ps.oetom = srt;
        ps.srpf = None;
        Setup {
            outcome: build_sts_outcome(draft).unwrap(),
            mode: EngagementMode::SingleActorWithBrokerProposal,
            config,
            policy,
        }
    }

    fn market(rate: f64, wtp: i64, gamma: f64, horizon: Days) -> MarketScenario {
        MarketScenario {
            arrival_rate: rate,
            wtp_distribution: WtpDistribution::PointMass { value: Money(wtp) },
            bid_fraction: gamma,
            preferred_buyers: Vec::new(),
            horizon,
            seed: 42,
            bubble_mode: false,
            conditional_bid_rate: 0.0,
            condition_success_rate: 1.0,
            condition_delay: 5,
        }
    }

    #[test]
    fn null_market_generates_nothing() {
        let setup = setup_with(30, ProtocolConfig::default(), OwnerPolicy::ThresholdOnly);
        let ev = generate_events(&market(0.0, 300_000, 1.0, 30), setup.outcome.price_settings(), 0);
        assert!(ev.is_empty());
    }

    #[test]
    fn null_market_with_silent_expiry_ends_unsold_at_srt() {
        let config = ProtocolConfig {
            silent_expiry: true,
            ..ProtocolConfig::default()
        };
        let setup = setup_with(30, config, OwnerPolicy::AlwaysAccept);
        let r = run_scenario(&market(0.0, 300_000, 1.0, 60), &setup, 0).unwrap();
        assert!(!r.result.sold);
        assert_eq!(r.result.tom, 30);
        assert_eq!(r.result.termination, Some(TerminationReason::SrtExpired));
        let est = estimate_src(&market(0.0, 300_000, 1.0, 60), &setup, 100).unwrap();
        assert_eq!(est.p_hat, 0.0);
    }

    #[test]
    fn point_mass_above_lp_bids_lp_on_first_day() {
        let setup = setup_with(30, ProtocolConfig::default(), OwnerPolicy::ThresholdOnly);
        let ev = generate_events(&market(50.0, 500_000, 1.0, 3), setup.outcome.price_settings(), 0);
        let first = ev
            .iter()
            .find_map(|e| match &e.event {
                ProtocolEvent::BidReceived(b) => Some((e.day, b.price)),
                _ => None,
            })
            .unwrap();
        assert_eq!(first, (0, Money(280_000)));
    }

    #[test]
    fn forced_sale_always_sells_at_or_above_threshold() {
        let config = ProtocolConfig {
            auto_accept: true,
            ..ProtocolConfig::default()
        };
        let setup = setup_with(30, config, OwnerPolicy::AlwaysReject);
        let sc = market(10.0, 250_000, 1.0, 60);
        for run in 0..20 {
            let r = run_scenario(&sc, &setup, run).unwrap();
            assert!(r.result.sold);
            let ps = setup.outcome.price_settings();
            let t = crate::price::acceptance_threshold(ps, r.result.tom).unwrap();
            assert!(r.result.price.unwrap() >= t);
        }
        assert_eq!(estimate_src(&sc, &setup, 100).unwrap().p_hat, 1.0);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let setup = setup_with(30, ProtocolConfig::default(), OwnerPolicy::ThresholdOnly);
        let mut sc = market(2.0, 0, 1.0, 20);
        sc.wtp_distribution = WtpDistribution::Uniform {
            lo: Money(150_000),
            hi: Money(300_000),
        };
        let ps = setup.outcome.price_settings();
        assert_eq!(generate_events(&sc, ps, 3), generate_events(&sc, ps, 3));
        assert_ne!(generate_events(&sc, ps, 3), generate_events(&sc, ps, 4));
        assert_ne!(
            generate_events(&sc, ps, 3),
            generate_events(&sc.with_seed(43), ps, 3)
        );
    }

    #[test]
    fn normal_market_bids_never_exceed_lp() {
        let setup = setup_with(30, ProtocolConfig::default(), OwnerPolicy::ThresholdOnly);
        let mut sc = market(5.0, 0, 1.0, 30);
        sc.wtp_distribution = WtpDistribution::LogNormal {
            mu: libm::log(260_000.0),
            sigma: 0.3,
        };
        let ps = setup.outcome.price_settings();
        let prices = |sc: &MarketScenario| -> Vec<Money> {
            generate_events(sc, ps, 0)
                .into_iter()
                .filter_map(|e| match e.event {
                    ProtocolEvent::BidReceived(b) => Some(b.price),
                    _ => None,
                })
                .collect()
        };
        let normal = prices(&sc);
        assert!(!normal.is_empty());
        assert!(normal.iter().all(|p| *p <= ps.lp && *p >= ps.fsrp));
        sc.bubble_mode = true;
        assert!(prices(&sc).iter().any(|p| *p > ps.lp));
    }

    #[test]
    fn preferred_buyers_bid_at_most_icsrp() {
        let setup = setup_with(30, ProtocolConfig::default(), OwnerPolicy::ThresholdOnly);
        let mut sc = market(0.0, 0, 1.0, 30);
        sc.preferred_buyers = vec![PreferredBuyer {
            id: "aunt".into(),
            wtp: Money(900_000),
        }];
        let ev = generate_events(&sc, setup.outcome.price_settings(), 0);
        let bid = ev
            .iter()
            .find_map(|e| match &e.event {
                ProtocolEvent::BidReceived(b) => Some(b.price),
                _ => None,
            })
            .unwrap();
        assert_eq!(bid, Money(100_000));
    }

    #[test]
    fn wilson_interval_matches_reference_values() {
        // p = 0.5, n = 100: centre 0.5, half-width 0.0962.
        let (lo, hi) = wilson_interval(50, 100);
        assert!((lo - 0.403_832).abs() < 1e-5, "{lo}");
        assert!((hi - 0.596_168).abs() < 1e-5, "{hi}");
        let (lo, hi) = wilson_interval(0, 100);
        assert!(lo.abs() < 1e-12);
        assert!((hi - 0.036_994).abs() < 1e-5, "{hi}");
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut sc = market(-1.0, 1, 1.0, 10);
        assert!(matches!(sc.validate(), Err(ScenarioError::ArrivalRate(_))));
        sc.arrival_rate = 1.0;
        sc.bid_fraction = 0.0;
        assert!(matches!(sc.validate(), Err(ScenarioError::BidFraction(_))));
        sc.bid_fraction = 1.0;
        sc.horizon = 0;
        assert_eq!(sc.validate(), Err(ScenarioError::Horizon));
    }
}
