//! Decision types, the selling-thread startup outcome, and the audience
//! fragments it is split into once the decision is taken.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::kernel::InstructionSequence;
use crate::price::{validate_price_sheet, Days, Money, MotiveProfile, PriceError, PriceSheet, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    Proactive,
    Reactive,
}

/// The decision types around a selling thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DecisionKind {
    SellingThreadStartup,
    BidAcceptance,
    BidRejection,
    BidAcceptanceEscape,
    CallOptionProposal,
    SellingThreadTermination,
    SellingThreadRepositioning,
    BrokerDisengagement,
    BrokerEngagement,
    MarketingThreadStartup,
    MarketingThreadTermination,
    MarketingThreadRepositioning,
}

impl DecisionKind {
    /// Decisions implied by the startup decision, in catalog order.
    pub const IMPLIED_BY_STARTUP: [DecisionKind; 11] = [
        DecisionKind::BidAcceptance,
        DecisionKind::BidRejection,
        DecisionKind::BidAcceptanceEscape,
        DecisionKind::CallOptionProposal,
        DecisionKind::SellingThreadTermination,
        DecisionKind::SellingThreadRepositioning,
        DecisionKind::BrokerDisengagement,
        DecisionKind::BrokerEngagement,
        DecisionKind::MarketingThreadStartup,
        DecisionKind::MarketingThreadTermination,
        DecisionKind::MarketingThreadRepositioning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecisionKind::SellingThreadStartup => "SellingThreadStartup",
            DecisionKind::BidAcceptance => "BidAcceptance",
            DecisionKind::BidRejection => "BidRejection",
            DecisionKind::BidAcceptanceEscape => "BidAcceptanceEscape",
            DecisionKind::CallOptionProposal => "CallOptionProposal",
            DecisionKind::SellingThreadTermination => "SellingThreadTermination",
            DecisionKind::SellingThreadRepositioning => "SellingThreadRepositioning",
            DecisionKind::BrokerDisengagement => "BrokerDisengagement",
            DecisionKind::BrokerEngagement => "BrokerEngagement",
            DecisionKind::MarketingThreadStartup => "MarketingThreadStartup",
            DecisionKind::MarketingThreadTermination => "MarketingThreadTermination",
            DecisionKind::MarketingThreadRepositioning => "MarketingThreadRepositioning",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::IMPLIED_BY_STARTUP
            .iter()
            .copied()
            .chain([DecisionKind::SellingThreadStartup])
            .find(|k| k.name() == name)
    }

    /// Reactive decisions answer the behavior of other agents; the rest are
    /// taken on the seller's own initiative.
    pub fn timing(self) -> Timing {
        match self {
            DecisionKind::BidAcceptance
            | DecisionKind::BidRejection
            | DecisionKind::BidAcceptanceEscape
            | DecisionKind::CallOptionProposal => Timing::Reactive,
            _ => Timing::Proactive,
        }
    }
}

impl fmt::Display for DecisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecisionError {
    #[error("unknown decision type `{0}`")]
    UnknownDecisionType(String),
    #[error("decision type `{0}` is already registered")]
    DuplicateDecisionType(String),
    #[error("preparation task serves no decision type")]
    EmptyServes,
}

/// A decision type: outcome type, taking protocol and optional preparation
/// protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionType {
    pub name: String,
    /// Name of the outcome schema.
    pub dot: String,
    pub dtp: Option<InstructionSequence>,
    pub dpp: Option<InstructionSequence>,
    pub timing: Timing,
    /// Only meaningful for reactive types.
    pub urgent: bool,
}

impl DecisionType {
    pub fn of_kind(kind: DecisionKind) -> Self {
        Self {
            name: kind.name().to_string(),
            dot: {
                let mut s = kind.name().to_string();
                s.push_str("Outcome");
                s
            },
            dtp: None,
            dpp: None,
            timing: kind.timing(),
            urgent: matches!(kind, DecisionKind::BidAcceptance | DecisionKind::BidRejection),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DecisionRegistry {
    types: BTreeMap<String, (DecisionType, Vec<String>)>,
}

impl DecisionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every selling-thread decision type, with the startup decision
    /// implying the other eleven.
    pub fn selling() -> Self {
        let mut reg = Self::new();
        let implied = DecisionKind::IMPLIED_BY_STARTUP
            .iter()
            .map(|k| k.name().to_string())
            .collect();
        reg.register(
            DecisionType::of_kind(DecisionKind::SellingThreadStartup),
            implied,
        )
        .expect("fresh registry");
        for kind in DecisionKind::IMPLIED_BY_STARTUP {
            reg.register(DecisionType::of_kind(kind), Vec::new())
                .expect("catalog names are unique");
        }
        reg
    }

    pub fn register(&mut self, dt: DecisionType, implied: Vec<String>) -> Result<(), DecisionError> {
        if self.types.contains_key(&dt.name) {
            return Err(DecisionError::DuplicateDecisionType(dt.name));
        }
        self.types.insert(dt.name.clone(), (dt, implied));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DecisionType> {
        self.types.get(name).map(|(dt, _)| dt)
    }

    pub fn implied_decisions(&self, name: &str) -> Result<Vec<(DecisionType, Timing)>, DecisionError> {
        let (_, implied) = self
            .types
            .get(name)
            .ok_or_else(|| DecisionError::UnknownDecisionType(name.to_string()))?;
        implied
            .iter()
            .map(|n| {
                self.get(n)
                    .map(|dt| (dt.clone(), dt.timing))
                    .ok_or_else(|| DecisionError::UnknownDecisionType(n.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreparationTiming {
    BeforeTimingKnown,
    AfterTimingKnown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparationTask {
    pub id: String,
    pub serves: BTreeSet<String>,
    pub performed: PreparationTiming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreparationMode {
    JustInTime,
    TacticalWellInAdvance,
    StrategicWellInAdvance,
}

pub fn classify_preparation(task: &PreparationTask) -> Result<PreparationMode, DecisionError> {
    if task.serves.is_empty() {
        return Err(DecisionError::EmptyServes);
    }
    Ok(match (task.performed, task.serves.len()) {
        (PreparationTiming::AfterTimingKnown, _) => PreparationMode::JustInTime,
        (PreparationTiming::BeforeTimingKnown, 1) => PreparationMode::TacticalWellInAdvance,
        (PreparationTiming::BeforeTimingKnown, _) => PreparationMode::StrategicWellInAdvance,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectPresentation {
    pub text: String,
    #[serde(default)]
    pub media: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerData {
    pub identity: String,
    /// Commission in basis points of the sale price.
    pub commission_bps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Direct,
    BrokerActivated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Listing {
    pub service: String,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reasons {
    pub motives: MotiveProfile,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarketExpectation {
    Normal,
    Bubble,
    Burst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketView {
    pub expectation: MarketExpectation,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    ObjectPresentation,
    PriceSettings,
    Broker,
    MarketingMethod,
    Reasons,
    MarketView,
    TakenBy,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::ObjectPresentation => "object_presentation",
            Section::PriceSettings => "price_settings",
            Section::Broker => "broker",
            Section::MarketingMethod => "marketing_method",
            Section::Reasons => "reasons",
            Section::MarketView => "market_view",
            Section::TakenBy => "taken_by",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeProblem {
    MissingSection(Section),
    InvalidPriceSheet(ValidationReport),
    InvalidReasons(PriceError),
}

impl fmt::Display for OutcomeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeProblem::MissingSection(s) => write!(f, "MissingSection({s})"),
            OutcomeProblem::InvalidPriceSheet(r) => {
                f.write_str("InvalidPriceSheet(")?;
                for (i, c) in r.errors().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{c:?}")?;
                }
                f.write_str(")")
            }
            OutcomeProblem::InvalidReasons(e) => write!(f, "InvalidReasons({e})"),
        }
    }
}

/// Why a startup outcome could not be built; lists every problem found.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("rejected startup outcome: {}", display_problems(.problems))]
pub struct OutcomeError {
    pub problems: Vec<OutcomeProblem>,
}

fn display_problems(problems: &[OutcomeProblem]) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    for (i, p) in problems.iter().enumerate() {
        if i > 0 {
            s.push_str("; ");
        }
        let _ = write!(s, "{p}");
    }
    s
}

impl OutcomeError {
    pub fn missing_sections(&self) -> impl Iterator<Item = Section> + '_ {
        self.problems.iter().filter_map(|p| match p {
            OutcomeProblem::MissingSection(s) => Some(*s),
            _ => None,
        })
    }

    pub fn price_report(&self) -> Option<&ValidationReport> {
        self.problems.iter().find_map(|p| match p {
            OutcomeProblem::InvalidPriceSheet(r) => Some(r),
            _ => None,
        })
    }
}

/// Raw sections as gathered during preparation, before validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeDraft {
    #[serde(default)]
    pub object_presentation: Option<ObjectPresentation>,
    #[serde(default)]
    pub price_settings: Option<PriceSheet>,
    #[serde(default)]
    pub broker: Option<BrokerData>,
    #[serde(default)]
    pub marketing_method: Option<Vec<Listing>>,
    #[serde(default)]
    pub reasons: Option<Reasons>,
    #[serde(default)]
    pub market_view: Option<MarketView>,
    #[serde(default)]
    pub taken_by: Option<String>,
    #[serde(default)]
    pub taken_at: u64,
}

/// A validated selling-thread startup outcome. Only [`build_sts_outcome`]
/// creates one, so every instance has all sections and an error-free
/// price sheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OutcomeDraft", into = "OutcomeDraft")]
pub struct DecisionOutcome {
    object_presentation: ObjectPresentation,
    price_settings: PriceSheet,
    broker: BrokerData,
    marketing_method: Vec<Listing>,
    reasons: Reasons,
    market_view: MarketView,
    taken_by: String,
    taken_at: u64,
}

impl TryFrom<OutcomeDraft> for DecisionOutcome {
    type Error = OutcomeError;

    fn try_from(draft: OutcomeDraft) -> Result<Self, Self::Error> {
        build_sts_outcome(draft)
    }
}

impl From<DecisionOutcome> for OutcomeDraft {
    fn from(o: DecisionOutcome) -> Self {
        OutcomeDraft {
            object_presentation: Some(o.object_presentation),
            price_settings: Some(o.price_settings),
            broker: Some(o.broker),
            marketing_method: Some(o.marketing_method),
            reasons: Some(o.reasons),
            market_view: Some(o.market_view),
            taken_by: Some(o.taken_by),
            taken_at: o.taken_at,
        }
    }
}

impl DecisionOutcome {
    pub fn object_presentation(&self) -> &ObjectPresentation {
        &self.object_presentation
    }

    pub fn price_settings(&self) -> &PriceSheet {
        &self.price_settings
    }

    pub fn broker(&self) -> &BrokerData {
        &self.broker
    }

    pub fn marketing_method(&self) -> &[Listing] {
        &self.marketing_method
    }

    pub fn reasons(&self) -> &Reasons {
        &self.reasons
    }

    pub fn market_view(&self) -> &MarketView {
        &self.market_view
    }

    pub fn taken_by(&self) -> &str {
        &self.taken_by
    }

    pub fn taken_at(&self) -> u64 {
        self.taken_at
    }

    pub fn to_draft(&self) -> OutcomeDraft {
        self.clone().into()
    }

    /// A copy with a different price sheet, revalidated.
    pub fn with_price_settings(&self, ps: PriceSheet) -> Result<Self, OutcomeError> {
        self.amend(|d| d.price_settings = Some(ps))
    }

    /// Applies `change` to the sections and revalidates the result.
    pub fn amend(&self, change: impl FnOnce(&mut OutcomeDraft)) -> Result<Self, OutcomeError> {
        let mut draft = self.to_draft();
        change(&mut draft);
        build_sts_outcome(draft)
    }
}

/// Validates all sections together and builds the outcome, or reports
/// every missing or invalid section.
pub fn build_sts_outcome(draft: OutcomeDraft) -> Result<DecisionOutcome, OutcomeError> {
    let mut problems = Vec::new();
    let mut missing = |s| problems.push(OutcomeProblem::MissingSection(s));

    let presentation = draft.object_presentation.filter(|p| !p.text.trim().is_empty());
    if presentation.is_none() {
        missing(Section::ObjectPresentation);
    }
    if draft.price_settings.is_none() {
        missing(Section::PriceSettings);
    }
    let broker = draft.broker.filter(|b| !b.identity.trim().is_empty());
    if broker.is_none() {
        missing(Section::Broker);
    }
    let listings = draft.marketing_method.filter(|m| !m.is_empty());
    if listings.is_none() {
        missing(Section::MarketingMethod);
    }
    let reasons = draft
        .reasons
        .filter(|r| !r.text.trim().is_empty() || !r.motives.motive_weights.is_empty());
    if reasons.is_none() {
        missing(Section::Reasons);
    }
    if draft.market_view.is_none() {
        missing(Section::MarketView);
    }
    let taken_by = draft.taken_by.filter(|t| !t.trim().is_empty());
    if taken_by.is_none() {
        missing(Section::TakenBy);
    }
    if let Some(ps) = &draft.price_settings {
        let report = validate_price_sheet(ps);
        if report.has_errors() {
            problems.push(OutcomeProblem::InvalidPriceSheet(report));
        }
    }
    if let Some(r) = &reasons {
        if let Err(e) = r.motives.validate() {
            problems.push(OutcomeProblem::InvalidReasons(e));
        }
    }
    if !problems.is_empty() {
        return Err(OutcomeError { problems });
    }
    Ok(DecisionOutcome {
        object_presentation: presentation.expect("checked"),
        price_settings: draft.price_settings.expect("checked"),
        broker: broker.expect("checked"),
        marketing_method: listings.expect("checked"),
        reasons: reasons.expect("checked"),
        market_view: draft.market_view.expect("checked"),
        taken_by: taken_by.expect("checked"),
        taken_at: draft.taken_at,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audience {
    #[serde(rename = "self")]
    Seller,
    InnerCircle,
    Broker,
    ListingService,
}

impl Audience {
    pub const ALL: [Audience; 4] = [
        Audience::Seller,
        Audience::InnerCircle,
        Audience::Broker,
        Audience::ListingService,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Audience::Seller => "self",
            Audience::InnerCircle => "inner_circle",
            Audience::Broker => "broker",
            Audience::ListingService => "listing",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "self" | "seller" => Some(Audience::Seller),
            "inner_circle" | "inner-circle" => Some(Audience::InnerCircle),
            "broker" => Some(Audience::Broker),
            "listing" | "listing_service" | "listing-service" => Some(Audience::ListingService),
            _ => None,
        }
    }
}

impl fmt::Display for Audience {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Individually projectable pieces of an outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    ObjectPresentation,
    Icsrp,
    Fsrp,
    Isrp,
    Smv,
    Mv,
    Lp,
    Ip,
    Srt,
    Src,
    Oetom,
    Srpf,
    BrokerIdentity,
    Commission,
    MarketingMethod,
    Reasons,
    MarketView,
    TakenBy,
    TakenAt,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Presentation(ObjectPresentation),
    Money(Money),
    Days(Days),
    Ratio(f64),
    Rate(Option<f64>),
    Text(String),
    BasisPoints(u32),
    Listings(Vec<Listing>),
    Reasons(Reasons),
    MarketView(MarketView),
    Timestamp(u64),
}

impl DecisionOutcome {
    /// Every projectable field with its value. `Ip` is the effective ideal
    /// price.
    pub fn fields(&self) -> BTreeMap<Field, FieldValue> {
        let ps = &self.price_settings;
        BTreeMap::from([
            (
                Field::ObjectPresentation,
                FieldValue::Presentation(self.object_presentation.clone()),
            ),
            (Field::Icsrp, FieldValue::Money(ps.icsrp)),
            (Field::Fsrp, FieldValue::Money(ps.fsrp)),
            (Field::Isrp, FieldValue::Money(ps.isrp)),
            (Field::Smv, FieldValue::Money(ps.smv)),
            (Field::Mv, FieldValue::Money(ps.mv)),
            (Field::Lp, FieldValue::Money(ps.lp)),
            (Field::Ip, FieldValue::Money(ps.ideal_price())),
            (Field::Srt, FieldValue::Days(ps.srt)),
            (Field::Src, FieldValue::Ratio(ps.src)),
            (Field::Oetom, FieldValue::Days(ps.oetom)),
            (Field::Srpf, FieldValue::Rate(ps.srpf)),
            (
                Field::BrokerIdentity,
                FieldValue::Text(self.broker.identity.clone()),
            ),
            (
                Field::Commission,
                FieldValue::BasisPoints(self.broker.commission_bps),
            ),
            (
                Field::MarketingMethod,
                FieldValue::Listings(self.marketing_method.clone()),
            ),
            (Field::Reasons, FieldValue::Reasons(self.reasons.clone())),
            (Field::MarketView, FieldValue::MarketView(self.market_view.clone())),
            (Field::TakenBy, FieldValue::Text(self.taken_by.clone())),
            (Field::TakenAt, FieldValue::Timestamp(self.taken_at)),
        ])
    }
}

/// The fields a non-self audience receives. Absent fields are withheld.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_presentation: Option<ObjectPresentation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icsrp: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fsrp: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isrp: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smv: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lp: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub srt: Option<Days>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub broker_identity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commission_bps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marketing_method: Option<Vec<Listing>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasons: Option<Reasons>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market_view: Option<MarketView>,
}

impl PartialPayload {
    pub fn fields(&self) -> BTreeMap<Field, FieldValue> {
        let mut out = BTreeMap::new();
        let mut put = |field, value: Option<FieldValue>| {
            if let Some(v) = value {
                out.insert(field, v);
            }
        };
        put(
            Field::ObjectPresentation,
            self.object_presentation.clone().map(FieldValue::Presentation),
        );
        put(Field::Icsrp, self.icsrp.map(FieldValue::Money));
        put(Field::Fsrp, self.fsrp.map(FieldValue::Money));
        put(Field::Isrp, self.isrp.map(FieldValue::Money));
        put(Field::Smv, self.smv.map(FieldValue::Money));
        put(Field::Lp, self.lp.map(FieldValue::Money));
        put(Field::Srt, self.srt.map(FieldValue::Days));
        put(
            Field::BrokerIdentity,
            self.broker_identity.clone().map(FieldValue::Text),
        );
        put(Field::Commission, self.commission_bps.map(FieldValue::BasisPoints));
        put(
            Field::MarketingMethod,
            self.marketing_method.clone().map(FieldValue::Listings),
        );
        put(Field::Reasons, self.reasons.clone().map(FieldValue::Reasons));
        put(Field::MarketView, self.market_view.clone().map(FieldValue::MarketView));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FragmentPayload {
    /// The seller keeps the complete outcome.
    Full(DecisionOutcome),
    Partial(PartialPayload),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub audience: Audience,
    pub payload: FragmentPayload,
}

impl Fragment {
    pub fn fields(&self) -> BTreeMap<Field, FieldValue> {
        match &self.payload {
            FragmentPayload::Full(o) => o.fields(),
            FragmentPayload::Partial(p) => p.fields(),
        }
    }
}

/// Projection of an outcome for one audience.
pub fn fragment_for(o: &DecisionOutcome, audience: Audience) -> Fragment {
    let ps = &o.price_settings;
    let payload = match audience {
        Audience::Seller => FragmentPayload::Full(o.clone()),
        Audience::InnerCircle => FragmentPayload::Partial(PartialPayload {
            object_presentation: Some(o.object_presentation.clone()),
            icsrp: Some(ps.icsrp),
            lp: Some(ps.lp),
            broker_identity: Some(o.broker.identity.clone()),
            marketing_method: Some(o.marketing_method.clone()),
            reasons: Some(o.reasons.clone()),
            ..PartialPayload::default()
        }),
        Audience::Broker => FragmentPayload::Partial(PartialPayload {
            fsrp: Some(ps.fsrp),
            isrp: Some(ps.isrp),
            srt: Some(ps.srt),
            commission_bps: Some(o.broker.commission_bps),
            smv: Some(ps.smv),
            lp: Some(ps.lp),
            marketing_method: Some(o.marketing_method.clone()),
            market_view: Some(o.market_view.clone()),
            ..PartialPayload::default()
        }),
        Audience::ListingService => FragmentPayload::Partial(PartialPayload {
            object_presentation: Some(o.object_presentation.clone()),
            lp: Some(ps.lp),
            ..PartialPayload::default()
        }),
    };
    Fragment { audience, payload }
}

/// Splits the outcome into one fragment per audience, in
/// [`Audience::ALL`] order.
pub fn fragment_outcome(o: &DecisionOutcome) -> Vec<Fragment> {
    Audience::ALL.iter().map(|&a| fragment_for(o, a)).collect()
}

/// Which fields each audience is allowed to see.
pub fn audience_matrix() -> BTreeMap<Audience, BTreeSet<Field>> {
    use Field::*;
    BTreeMap::from([
        (
            Audience::Seller,
            BTreeSet::from([
                ObjectPresentation,
                Icsrp,
                Fsrp,
                Isrp,
                Smv,
                Mv,
                Lp,
                Ip,
                Srt,
                Src,
                Oetom,
                Srpf,
                BrokerIdentity,
                Commission,
                MarketingMethod,
                Reasons,
                MarketView,
                TakenBy,
                TakenAt,
            ]),
        ),
        (
            Audience::InnerCircle,
            BTreeSet::from([ObjectPresentation, Icsrp, Lp, BrokerIdentity, MarketingMethod, Reasons]),
        ),
        (
            Audience::Broker,
            BTreeSet::from([Fsrp, Isrp, Srt, Commission, Smv, Lp, MarketingMethod, MarketView]),
        ),
        (Audience::ListingService, BTreeSet::from([ObjectPresentation, Lp])),
    ])
}

#[cfg(test)]
use alloc::vec;

#[cfg(test)]
pub(crate) fn sample_draft() -> OutcomeDraft {
    OutcomeDraft {
        object_presentation: Some(ObjectPresentation {
            text: "Three-bedroom terraced house, 110 m², garden facing south".into(),
            media: vec!["front.jpg".into()],
        }),
        price_settings: Some(crate::price::sample_sheet()),
        broker: Some(BrokerData {
            identity: "Makelaardij Noord".into(),
            commission_bps: 150,
        }),
        marketing_method: Some(vec![
            Listing {
                service: "mls".into(),
                activation: Activation::BrokerActivated,
            },
            Listing {
                service: "newspaper".into(),
                activation: Activation::Direct,
            },
        ]),
        reasons: Some(Reasons {
            motives: MotiveProfile {
                utility_rate: 4.0,
                disutility_rate: 6.0,
                motive_weights: BTreeMap::from([
                    (crate::price::Motive::UtilityDegradedRecoverFunds, 0.7),
                    (crate::price::Motive::ExpectedProfit, 0.3),
                ]),
            },
            text: "new job in another city".into(),
        }),
        market_view: Some(MarketView {
            expectation: MarketExpectation::Normal,
            text: "stable prices".into(),
        }),
        taken_by: Some("owner".into()),
        taken_at: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::price::Constraint;

    #[test]
    fn builds_complete_outcome() {
        let o = build_sts_outcome(sample_draft()).unwrap();
        assert_eq!(o.price_settings().fsrp, Money(200_000));
        assert!(!validate_price_sheet(o.price_settings()).has_errors());
    }

    #[test]
    fn missing_market_view() {
        let draft = OutcomeDraft {
            market_view: None,
            ..sample_draft()
        };
        let err = build_sts_outcome(draft).unwrap_err();
        assert_eq!(err.missing_sections().collect::<Vec<_>>(), vec![Section::MarketView]);
    }

    #[test]
    fn empty_sections_count_as_missing() {
        let mut draft = sample_draft();
        draft.marketing_method = Some(vec![]);
        draft.object_presentation = Some(ObjectPresentation::default());
        let err = build_sts_outcome(draft).unwrap_err();
        assert_eq!(
            err.missing_sections().collect::<Vec<_>>(),
            vec![Section::ObjectPresentation, Section::MarketingMethod]
        );
    }

    #[test]
    fn invalid_price_sheet_is_rejected() {
        let mut draft = sample_draft();
        let ps = draft.price_settings.as_mut().unwrap();
        ps.icsrp = ps.fsrp;
        let err = build_sts_outcome(draft).unwrap_err();
        let report = err.price_report().expect("price problem");
        assert_eq!(
            report.errors().collect::<Vec<_>>(),
            vec![Constraint::PreferredBuyerGuardViolated]
        );
    }

    #[test]
    fn reasons_with_bad_weights_are_rejected() {
        let mut draft = sample_draft();
        draft
            .reasons
            .as_mut()
            .unwrap()
            .motives
            .motive_weights
            .insert(crate::price::Motive::UtilityTooLow, 0.5);
        let err = build_sts_outcome(draft).unwrap_err();
        assert!(matches!(err.problems[0], OutcomeProblem::InvalidReasons(_)));
    }

    #[test]
    fn fragments_follow_matrix() {
        let o = build_sts_outcome(sample_draft()).unwrap();
        let frags = fragment_outcome(&o);
        assert_eq!(frags.len(), 4);
        let matrix = audience_matrix();
        let full = o.fields();
        for f in &frags {
            let fields = f.fields();
            assert_eq!(
                fields.keys().copied().collect::<BTreeSet<_>>(),
                matrix[&f.audience],
                "{:?}",
                f.audience
            );
            for (k, v) in &fields {
                assert_eq!(&full[k], v);
            }
        }
    }

    #[test]
    fn listing_fragment_has_lp_only() {
        let o = build_sts_outcome(sample_draft()).unwrap();
        let f = fragment_for(&o, Audience::ListingService);
        let FragmentPayload::Partial(p) = &f.payload else {
            panic!("listing payload must be partial")
        };
        assert_eq!(p.lp, Some(Money(280_000)));
        assert!(p.fsrp.is_none() && p.icsrp.is_none() && p.isrp.is_none());
    }

    #[test]
    fn inner_circle_sees_icsrp_not_fsrp() {
        let o = build_sts_outcome(sample_draft()).unwrap();
        let fields = fragment_for(&o, Audience::InnerCircle).fields();
        assert!(fields.contains_key(&Field::Icsrp));
        assert!(!fields.contains_key(&Field::Fsrp));
    }

    #[test]
    fn self_fragment_is_the_outcome() {
        let o = build_sts_outcome(sample_draft()).unwrap();
        assert_eq!(
            fragment_for(&o, Audience::Seller).payload,
            FragmentPayload::Full(o.clone())
        );
    }

    #[test]
    fn classification() {
        let task = |serves: &[&str], performed| PreparationTask {
            id: "t".into(),
            serves: serves.iter().map(|s| s.to_string()).collect(),
            performed,
        };
        assert_eq!(
            classify_preparation(&task(&["STS"], PreparationTiming::AfterTimingKnown)),
            Ok(PreparationMode::JustInTime)
        );
        assert_eq!(
            classify_preparation(&task(&["STS"], PreparationTiming::BeforeTimingKnown)),
            Ok(PreparationMode::TacticalWellInAdvance)
        );
        assert_eq!(
            classify_preparation(&task(
                &["STS", "BidAcceptance"],
                PreparationTiming::BeforeTimingKnown
            )),
            Ok(PreparationMode::StrategicWellInAdvance)
        );
        assert_eq!(
            classify_preparation(&task(&[], PreparationTiming::AfterTimingKnown)),
            Err(DecisionError::EmptyServes)
        );
    }

    #[test]
    fn startup_implies_the_catalog() {
        let reg = DecisionRegistry::selling();
        let implied = reg.implied_decisions("SellingThreadStartup").unwrap();
        assert_eq!(implied.len(), 11);
        let has = |name: &str, timing| implied.iter().any(|(dt, t)| dt.name == name && *t == timing);
        assert!(has("BidAcceptance", Timing::Reactive));
        assert!(has("BidRejection", Timing::Reactive));
        assert!(has("BidAcceptanceEscape", Timing::Reactive));
        assert!(has("CallOptionProposal", Timing::Reactive));
        assert!(has("SellingThreadRepositioning", Timing::Proactive));
        assert!(has("MarketingThreadRepositioning", Timing::Proactive));
        assert_eq!(
            implied.iter().filter(|(_, t)| *t == Timing::Proactive).count(),
            7
        );
        assert!(reg.implied_decisions("BidAcceptance").unwrap().is_empty());
        assert_eq!(
            reg.implied_decisions("Nope"),
            Err(DecisionError::UnknownDecisionType("Nope".into()))
        );
    }

    #[test]
    fn registry_rejects_duplicates() {
        let mut reg = DecisionRegistry::selling();
        assert!(matches!(
            reg.register(DecisionType::of_kind(DecisionKind::BidAcceptance), vec![]),
            Err(DecisionError::DuplicateDecisionType(_))
        ));
    }

    #[test]
    fn decision_kind_names_round_trip() {
        for k in DecisionKind::IMPLIED_BY_STARTUP {
            assert_eq!(DecisionKind::from_name(k.name()), Some(k));
        }
    }
}
