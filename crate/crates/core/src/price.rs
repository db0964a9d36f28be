//! Seller-side prices and values, their ordering rules, and the checks
//! built on them.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

/// Amount of money in integer minor currency units.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Money(pub i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn minor_units(self) -> i64 {
        self.0
    }

    /// `self · numerator / denominator`, rounded half-up. `denominator` must
    /// be positive.
    pub fn scale(self, numerator: i64, denominator: i64) -> Money {
        Money(div_round_half_up(
            self.0 as i128 * numerator as i128,
            denominator as i128,
        ) as i64)
    }

    /// Applies a rate in basis points, rounded half-up.
    pub fn basis_points(self, bps: u32) -> Money {
        self.scale(bps as i64, 10_000)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Durations and time on market are whole days.
pub type Days = u32;

/// `round(num / den)` with halves rounded towards +∞; `den > 0`.
pub(crate) fn div_round_half_up(num: i128, den: i128) -> i128 {
    (2 * num + den).div_euclid(2 * den)
}

pub const DEFAULT_SRC: f64 = 0.75;
pub const DEFAULT_BUBBLE_FACTOR: f64 = 2.0;
pub const DEFAULT_CONFLICT_DISPERSION: f64 = 0.5;

fn default_src() -> f64 {
    DEFAULT_SRC
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PriceError {
    #[error("time on market {tom} outside 0..={srt}")]
    TomOutOfRange { tom: Days, srt: Days },
    #[error("lower bound {lower} exceeds upper bound {upper}")]
    InconsistentBounds { lower: Money, upper: Money },
    #[error("no rule with positive weight estimates `{0}`")]
    NoApplicableRules(String),
    #[error("motive weights sum to {0}, expected 1")]
    MotiveWeightsNotNormalized(f64),
    #[error("motive weight {0} outside [0, 1]")]
    MotiveWeightOutOfRange(f64),
}

/// Everything the seller fixes about prices before a selling thread starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSheet {
    /// Inner-circle separating reservation price.
    pub icsrp: Money,
    /// Final seller reservation price, reached when time on market equals `srt`.
    pub fsrp: Money,
    /// Initial seller reservation price, in force at time on market zero.
    pub isrp: Money,
    /// Subjective market value.
    pub smv: Money,
    /// Objective market value.
    pub mv: Money,
    /// List price.
    pub lp: Money,
    /// Ideal price; the list price stands in when absent.
    #[serde(default)]
    pub ip: Option<Money>,
    /// Seller reservation time.
    pub srt: Days,
    /// Seller reservation certainty.
    #[serde(default = "default_src")]
    pub src: f64,
    /// Objectively expected time on market.
    pub oetom: Days,
    /// Seller reservation prospect frequency, prospects per day.
    #[serde(default)]
    pub srpf: Option<f64>,
}

impl PriceSheet {
    pub fn ideal_price(&self) -> Money {
        self.ip.unwrap_or(self.lp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PriceField {
    Icsrp,
    Fsrp,
    Isrp,
    Smv,
    Mv,
    Lp,
    Ip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Constraint {
    /// `icsrp < fsrp`.
    PreferredBuyerGuardViolated,
    /// `fsrp ≤ isrp`.
    IsrpBelowFsrp,
    /// `isrp ≤ smv`.
    IsrpAboveSmv,
    /// `fsrp < smv`.
    FsrpNotBelowSmv,
    /// `mv ≤ lp`.
    MvAboveLp,
    /// `mv < ip`.
    MvNotBelowIp,
    NonPositiveMoney(PriceField),
    SrtNotPositive,
    SrcOutOfRange,
    SrpfNotPositive,
    /// `srt < oetom` but `smv > mv`.
    SmvAboveMvUnderTimePressure,
    /// `srt = oetom` and `smv > mv`.
    SmvExceedsMvAnomaly,
    /// `ip` defaulted to `lp` and `mv = lp`, so `mv < ip` fails.
    DefaultedIdealPriceEqualsMv,
}

impl Constraint {
    pub fn severity(self) -> Severity {
        match self {
            Constraint::SmvAboveMvUnderTimePressure
            | Constraint::SmvExceedsMvAnomaly
            | Constraint::DefaultedIdealPriceEqualsMv => Severity::Warning,
            _ => Severity::Error,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Constraint::PreferredBuyerGuardViolated => "icsrp must be below fsrp",
            Constraint::IsrpBelowFsrp => "isrp must be at or above fsrp",
            Constraint::IsrpAboveSmv => "isrp must be at or below smv",
            Constraint::FsrpNotBelowSmv => "fsrp must be below smv",
            Constraint::MvAboveLp => "mv must be at or below lp",
            Constraint::MvNotBelowIp => "mv must be below ip",
            Constraint::NonPositiveMoney(_) => "money values must be positive",
            Constraint::SrtNotPositive => "srt must be at least one day",
            Constraint::SrcOutOfRange => "src must lie in [0, 1]",
            Constraint::SrpfNotPositive => "srpf must be positive",
            Constraint::SmvAboveMvUnderTimePressure => "smv above mv although srt < oetom",
            Constraint::SmvExceedsMvAnomaly => "smv above mv although srt = oetom",
            Constraint::DefaultedIdealPriceEqualsMv => "ip defaults to lp, which equals mv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub constraint: Constraint,
    pub severity: Severity,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    fn push(&mut self, constraint: Constraint) {
        self.issues.push(Issue {
            constraint,
            severity: constraint.severity(),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    pub fn errors(&self) -> impl Iterator<Item = Constraint> + '_ {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Error)
            .map(|i| i.constraint)
    }

    pub fn warnings(&self) -> impl Iterator<Item = Constraint> + '_ {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Warning)
            .map(|i| i.constraint)
    }
}

/// Checks every ordering rule of the sheet. A startup decision may only
/// be taken on a sheet whose report has no errors.
///
/// `icsrp` may be zero (an empty inner circle); every other price must be
/// positive.
pub fn validate_price_sheet(ps: &PriceSheet) -> ValidationReport {
    let mut report = ValidationReport::default();
    if ps.icsrp < Money::ZERO {
        report.push(Constraint::NonPositiveMoney(PriceField::Icsrp));
    }
    for (field, value) in [
        (PriceField::Fsrp, ps.fsrp),
        (PriceField::Isrp, ps.isrp),
        (PriceField::Smv, ps.smv),
        (PriceField::Mv, ps.mv),
        (PriceField::Lp, ps.lp),
    ] {
        if value <= Money::ZERO {
            report.push(Constraint::NonPositiveMoney(field));
        }
    }
    if matches!(ps.ip, Some(ip) if ip <= Money::ZERO) {
        report.push(Constraint::NonPositiveMoney(PriceField::Ip));
    }
    if ps.srt == 0 {
        report.push(Constraint::SrtNotPositive);
    }
    if !(0.0..=1.0).contains(&ps.src) {
        report.push(Constraint::SrcOutOfRange);
    }
    if matches!(ps.srpf, Some(r) if !(r > 0.0 && r.is_finite())) {
        report.push(Constraint::SrpfNotPositive);
    }

    if ps.icsrp >= ps.fsrp {
        report.push(Constraint::PreferredBuyerGuardViolated);
    }
    if ps.fsrp > ps.isrp {
        report.push(Constraint::IsrpBelowFsrp);
    }
    if ps.isrp > ps.smv {
        report.push(Constraint::IsrpAboveSmv);
    }
    if ps.fsrp >= ps.smv {
        report.push(Constraint::FsrpNotBelowSmv);
    }
    if ps.mv > ps.lp {
        report.push(Constraint::MvAboveLp);
    }
    match ps.ip {
        Some(ip) if ps.mv >= ip => report.push(Constraint::MvNotBelowIp),
        None if ps.mv == ps.lp => report.push(Constraint::DefaultedIdealPriceEqualsMv),
        _ => {}
    }
    if ps.smv > ps.mv {
        if ps.srt < ps.oetom {
            report.push(Constraint::SmvAboveMvUnderTimePressure);
        } else if ps.srt == ps.oetom {
            report.push(Constraint::SmvExceedsMvAnomaly);
        }
    }
    report
}

/// Reservation value in force at `tom`:
/// `fsrp + (srt − tom)/srt · (isrp − fsrp)`, rounded half-up to a minor
/// unit. Exact at both ends.
pub fn acceptance_threshold(ps: &PriceSheet, tom: Days) -> Result<Money, PriceError> {
    if tom > ps.srt || ps.srt == 0 {
        return Err(PriceError::TomOutOfRange { tom, srt: ps.srt });
    }
    let span = (ps.isrp.0 as i128) - (ps.fsrp.0 as i128);
    let remaining = (ps.srt - tom) as i128;
    let offset = div_round_half_up(remaining * span, ps.srt as i128);
    Ok(Money(ps.fsrp.0 + offset as i64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BidVerdict {
    /// A non-preferred buyer bid at or below the inner-circle price.
    RejectInnerCircleGuard,
    /// At or above the acceptance threshold.
    Accept,
    BelowThreshold,
}

pub fn evaluate_bid(
    ps: &PriceSheet,
    bid: Money,
    tom: Days,
    buyer_is_preferred: bool,
) -> Result<BidVerdict, PriceError> {
    let threshold = acceptance_threshold(ps, tom)?;
    if !buyer_is_preferred && bid <= ps.icsrp {
        return Ok(BidVerdict::RejectInnerCircleGuard);
    }
    Ok(if bid >= threshold {
        BidVerdict::Accept
    } else {
        BidVerdict::BelowThreshold
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Signal {
    Normal,
    /// Fewer prospects than the reservation frequency promised: lower the list price.
    Burst,
    /// Far more prospects than expected: raise the list price or invite offers above it.
    Bubble,
}

impl Signal {
    pub fn advice(self) -> &'static str {
        match self {
            Signal::Normal => "none",
            Signal::Burst => "lower lp",
            Signal::Bubble => "raise lp or invite offers above lp",
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Signal::Normal => "normal",
            Signal::Burst => "burst",
            Signal::Bubble => "bubble",
        })
    }
}

/// Burst when `srpf · tom > prospects`; bubble when
/// `prospects ≥ bubble_factor · srpf · tom`. Burst wins; a sheet without
/// `srpf`, or `tom = 0`, is always normal.
pub fn market_activity_signal(
    ps: &PriceSheet,
    tom: Days,
    unique_prospects: u64,
    bubble_factor: f64,
) -> Signal {
    let Some(srpf) = ps.srpf else {
        return Signal::Normal;
    };
    if tom == 0 {
        return Signal::Normal;
    }
    let expected = srpf * tom as f64;
    let seen = unique_prospects as f64;
    if expected > seen {
        Signal::Burst
    } else if seen >= bubble_factor * expected {
        Signal::Bubble
    } else {
        Signal::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComparableKind {
    /// Comparable object listed below its price for longer than srt.
    ListedUnsoldBeyondSrt,
    /// Object that outperforms the good, recently sold.
    SoldOutperformer,
    /// Object that underperforms the good, recently sold.
    SoldUnderperformer,
    SoldComparable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparable {
    pub kind: ComparableKind,
    pub price: Money,
    pub observed_tom: Days,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MvBounds {
    pub lower: Option<Money>,
    pub upper: Option<Money>,
    /// Mean price of sold comparables, rounded half-up.
    pub point_estimate: Option<Money>,
}

pub fn mv_bounds(comps: &[Comparable]) -> Result<MvBounds, PriceError> {
    let upper = comps
        .iter()
        .filter(|c| {
            matches!(
                c.kind,
                ComparableKind::ListedUnsoldBeyondSrt | ComparableKind::SoldOutperformer
            )
        })
        .map(|c| c.price)
        .min();
    let lower = comps
        .iter()
        .filter(|c| c.kind == ComparableKind::SoldUnderperformer)
        .map(|c| c.price)
        .max();
    if let (Some(lower), Some(upper)) = (lower, upper) {
        if lower > upper {
            return Err(PriceError::InconsistentBounds { lower, upper });
        }
    }
    let sold: Vec<i128> = comps
        .iter()
        .filter(|c| c.kind == ComparableKind::SoldComparable)
        .map(|c| c.price.0 as i128)
        .collect();
    let point_estimate = (!sold.is_empty()).then(|| {
        Money(div_round_half_up(sold.iter().sum(), sold.len() as i128) as i64)
    });
    Ok(MvBounds {
        lower,
        upper,
        point_estimate,
    })
}

/// One rule's estimate of a quantity, with its confidence and relevance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEstimate {
    pub quantity: String,
    pub value: f64,
    pub confidence: f64,
    pub relevance: f64,
    #[serde(default)]
    pub source: String,
}

impl RuleEstimate {
    pub fn weight(&self) -> f64 {
        self.confidence * self.relevance
    }
}

/// Indices (into the input list) of two rules whose values disagree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleConflict {
    pub first: usize,
    pub second: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub estimate: f64,
    pub total_weight: f64,
    pub conflicts: Vec<RuleConflict>,
}

fn relative_dispersion(a: f64, b: f64) -> f64 {
    let scale = libm::fmax(libm::fabs(a), libm::fabs(b));
    if scale == 0.0 {
        0.0
    } else {
        libm::fabs(a - b) / scale
    }
}

/// Weighted mean of the rules for `quantity`, each weighted by
/// confidence · relevance. Pairs whose relative dispersion exceeds `tau`
/// are listed as conflicts and left unresolved.
pub fn aggregate_rule_estimates(
    rules: &[RuleEstimate],
    quantity: &str,
    tau: f64,
) -> Result<Aggregate, PriceError> {
    let applicable: Vec<(usize, &RuleEstimate)> = rules
        .iter()
        .enumerate()
        .filter(|(_, r)| r.quantity == quantity && r.weight() > 0.0)
        .collect();
    if applicable.is_empty() {
        return Err(PriceError::NoApplicableRules(quantity.into()));
    }
    // Summing in a canonical order makes the result independent of input order.
    let mut terms: Vec<(f64, f64)> = applicable.iter().map(|(_, r)| (r.value, r.weight())).collect();
    terms.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let total_weight: f64 = terms.iter().map(|t| t.1).sum();
    let weighted: f64 = terms.iter().map(|t| t.0 * t.1).sum();

    let mut conflicts = Vec::new();
    for (i, (ia, ra)) in applicable.iter().enumerate() {
        for (ib, rb) in &applicable[i + 1..] {
            if relative_dispersion(ra.value, rb.value) > tau {
                conflicts.push(RuleConflict {
                    first: *ia,
                    second: *ib,
                });
            }
        }
    }
    Ok(Aggregate {
        estimate: weighted / total_weight,
        total_weight,
        conflicts,
    })
}

/// Highest price any preferred buyer is willing to pay; zero without
/// preferred buyers.
pub fn compute_icsrp(preferred_wtp: &[Money]) -> Money {
    preferred_wtp.iter().copied().max().unwrap_or(Money::ZERO)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motive {
    CostsTooHighLimitedUtility,
    CostsTooHighDespiteHighUtility,
    UtilityTooLow,
    ExpectedUtilityDegradation,
    UtilityDegradedRecoverFunds,
    ValueDegradationRisk,
    ExpectedProfit,
    UpgradeWithAvailableMeans,
}

impl Motive {
    pub const ALL: [Motive; 8] = [
        Motive::CostsTooHighLimitedUtility,
        Motive::CostsTooHighDespiteHighUtility,
        Motive::UtilityTooLow,
        Motive::ExpectedUtilityDegradation,
        Motive::UtilityDegradedRecoverFunds,
        Motive::ValueDegradationRisk,
        Motive::ExpectedProfit,
        Motive::UpgradeWithAvailableMeans,
    ];
}

/// Utility and disutility of ownership (per day) and the mix of motives
/// behind a wish to sell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotiveProfile {
    pub utility_rate: f64,
    pub disutility_rate: f64,
    #[serde(default)]
    pub motive_weights: BTreeMap<Motive, f64>,
}

impl MotiveProfile {
    pub fn validate(&self) -> Result<(), PriceError> {
        if self.motive_weights.is_empty() {
            return Ok(());
        }
        if let Some(&w) = self.motive_weights.values().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(PriceError::MotiveWeightOutOfRange(w));
        }
        let sum: f64 = self.motive_weights.values().sum();
        if libm::fabs(sum - 1.0) > 1e-9 {
            return Err(PriceError::MotiveWeightsNotNormalized(sum));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SellRecommendation {
    ContemplateSelling,
    Hold,
}

pub fn sell_trigger(mp: &MotiveProfile) -> SellRecommendation {
    if mp.utility_rate < mp.disutility_rate {
        SellRecommendation::ContemplateSelling
    } else {
        SellRecommendation::Hold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskFlag {
    FsrpBelowIcsrp,
    /// `(isrp − fsrp)/fsrp < 2%`.
    NarrowMargin,
    SmvMvAnomaly,
    MissingBubbleGuard,
    /// A preferred buyer is willing to pay the inner-circle price or more.
    PreferredBuyerMiss,
}

/// Facts about the scenario that the sheet alone does not carry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskContext {
    pub preferred_wtp: Vec<Money>,
}

pub fn risk_report(ps: &PriceSheet, ctx: &RiskContext) -> Vec<RiskFlag> {
    let mut flags = Vec::new();
    if ps.fsrp <= ps.icsrp {
        flags.push(RiskFlag::FsrpBelowIcsrp);
    }
    if ps.fsrp > Money::ZERO && 50 * (ps.isrp.0 as i128 - ps.fsrp.0 as i128) < ps.fsrp.0 as i128 {
        flags.push(RiskFlag::NarrowMargin);
    }
    if ps.srt == ps.oetom && ps.smv > ps.mv {
        flags.push(RiskFlag::SmvMvAnomaly);
    }
    if ps.srpf.is_none() {
        flags.push(RiskFlag::MissingBubbleGuard);
    }
    if ctx.preferred_wtp.iter().any(|&w| w >= ps.icsrp) {
        flags.push(RiskFlag::PreferredBuyerMiss);
    }
    flags
}

#[cfg(test)]
pub(crate) fn sample_sheet() -> PriceSheet {
    PriceSheet {
        icsrp: Money(100_000),
        fsrp: Money(200_000),
        isrp: Money(240_000),
        smv: Money(250_000),
        mv: Money(260_000),
        lp: Money(280_000),
        ip: Some(Money(280_000)),
        srt: 180,
        src: 0.75,
        oetom: 200,
        srpf: Some(1.0),
    }
}
