//! The selling thread: a broker-run state machine that consults the owner
//! through steering calls whenever a decision is due.
//!
//! Each steering call is a one-action thread `owner.<method> ∘ (S ⊴ D)`
//! resolved with [`run_to_trace`] against the owner service; `Stop` means
//! the owner said yes. Everything the thread does is appended to its log,
//! which renders as trace records extended with time on market and phase.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::decision::{
    fragment_for, Activation, Audience, BrokerData, DecisionKind, DecisionOutcome, Listing,
    OutcomeError,
};
use crate::kernel::{
    apply_service, extract_behavior, run_to_trace, Action as KernelAction, Attachment, Bound, End,
    InstructionSequence, KernelError, Reply, Service, Thread, Trace, TraceEvent,
};
use crate::price::{
    acceptance_threshold, evaluate_bid, market_activity_signal, BidVerdict, Days, Money,
    PriceSheet, Signal, DEFAULT_BUBBLE_FACTOR,
};

pub const OWNER_FOCUS: &str = "owner";

/// Steering methods the broker calls on the owner.
pub mod method {
    pub const ACCEPT_BID: &str = "accept_bid";
    pub const PROPOSE_OPTION: &str = "propose_option";
    pub const ESCAPE: &str = "escape";
    pub const EXTEND_OR_TERMINATE: &str = "extend_or_terminate";
    pub const REPOSITION_LP: &str = "reposition_lp";

    pub const ALL: [&str; 5] = [
        ACCEPT_BID,
        PROPOSE_OPTION,
        ESCAPE,
        EXTEND_OR_TERMINATE,
        REPOSITION_LP,
    ];
}

/// The decision a steering reply amounts to.
pub fn steering_decision(method_name: &str, reply: bool) -> Option<DecisionKind> {
    Some(match (method_name, reply) {
        (method::ACCEPT_BID, true) => DecisionKind::BidAcceptance,
        (method::ACCEPT_BID, false) => DecisionKind::BidRejection,
        (method::PROPOSE_OPTION, _) => DecisionKind::CallOptionProposal,
        (method::ESCAPE, _) => DecisionKind::BidAcceptanceEscape,
        (method::EXTEND_OR_TERMINATE, true) => DecisionKind::SellingThreadRepositioning,
        (method::EXTEND_OR_TERMINATE, false) => DecisionKind::SellingThreadTermination,
        (method::REPOSITION_LP, _) => DecisionKind::SellingThreadRepositioning,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("selling thread {thread} is {phase} and accepts no events")]
    EventInTerminalPhase { thread: usize, phase: PhaseKind },
    #[error("bid by `{buyer}` expired on day {valid_until}, time on market is {tom}")]
    StaleBid {
        buyer: String,
        valid_until: Days,
        tom: Days,
    },
    #[error("engagement mode does not fit the outcome: {0}")]
    ModeMismatch(String),
    #[error("buyer `{0}` already holds an open option")]
    DuplicateOptionForBuyer(String),
    #[error("invalid outcome: {0}")]
    InvalidOutcome(#[from] OutcomeError),
    #[error("owner policy failed: {0}")]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngagementMode {
    SingleActorWithBrokerProposal,
    /// The owner also plays the broker, at zero commission.
    NoBrokerRoleSplit,
    /// Broker engaged jointly; every listing is left to the broker.
    JointActor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Accept eligible bids by action determination, without a steering call.
    pub auto_accept: bool,
    /// Reaching srt terminates without consulting the owner.
    pub silent_expiry: bool,
    pub bubble_factor: f64,
    pub option_horizon: Days,
    pub option_premium_bps: u32,
    pub escape_window: Days,
    /// Days added to srt when the owner extends at expiry.
    pub srt_extension: Days,
    /// List price change applied when the owner answers a market signal.
    pub lp_adjust_bps: u32,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            auto_accept: false,
            silent_expiry: false,
            bubble_factor: DEFAULT_BUBBLE_FACTOR,
            option_horizon: 14,
            option_premium_bps: 250,
            escape_window: 14,
            srt_extension: 30,
            lp_adjust_bps: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    SrtExpired,
    OwnerDecision,
    SiblingSold,
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminationReason::SrtExpired => "srt_expired",
            TerminationReason::OwnerDecision => "owner_decision",
            TerminationReason::SiblingSold => "sibling_sold",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaleRoute {
    /// Accepted through a bid acceptance decision.
    Decision,
    /// Accepted by action determination (`auto_accept`).
    ActionDetermination,
    OptionExercise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sale {
    pub buyer: String,
    pub price: Money,
    pub tom: Days,
    /// Time on market when the bid was accepted; differs from `tom` after
    /// an escape window.
    pub accepted_at: Days,
    pub route: SaleRoute,
    pub commission: Money,
    pub preferred: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscapeWindow {
    pub buyer: String,
    pub price: Money,
    pub accepted_at: Days,
    pub deadline: Days,
    pub pending: BTreeSet<String>,
    pub route: SaleRoute,
    pub escape_declined: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Active,
    EscapeWindow(EscapeWindow),
    Sold(Sale),
    Terminated(TerminationReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Active,
    EscapeWindow,
    Sold,
    Terminated,
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseKind::Active => "active",
            PhaseKind::EscapeWindow => "escape_window",
            PhaseKind::Sold => "sold",
            PhaseKind::Terminated => "terminated",
        })
    }
}

impl Phase {
    pub fn kind(&self) -> PhaseKind {
        match self {
            Phase::Active => PhaseKind::Active,
            Phase::EscapeWindow(_) => PhaseKind::EscapeWindow,
            Phase::Sold(_) => PhaseKind::Sold,
            Phase::Terminated(_) => PhaseKind::Terminated,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Phase::Sold(_) | Phase::Terminated(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListingState {
    /// Waiting for the broker to activate it.
    Pending,
    Active,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallOption {
    pub buyer: String,
    /// Execution price: the bid that was not accepted.
    pub strike: Money,
    pub premium: Money,
    pub created: Days,
    pub expiry: Days,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bid {
    pub buyer: String,
    pub price: Money,
    /// Last day (time on market) on which the bid may be accepted.
    pub valid_until: Days,
    #[serde(default)]
    pub conditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Repositioning {
    /// A new list price; nothing else changes.
    ListPrice(Money),
    /// A revised sheet. `icsrp`, `fsrp` and `smv` must be unchanged.
    Sheet(PriceSheet),
    /// A full repositioning outcome taken by the owner.
    Outcome(Box<DecisionOutcome>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Directive {
    Reposition(Repositioning),
    Terminate,
    EngageBroker(BrokerData),
    DisengageBroker,
    StartMarketing(Listing),
    StopMarketing { service: String },
}

impl Directive {
    pub fn decision(&self) -> DecisionKind {
        match self {
            Directive::Reposition(_) => DecisionKind::SellingThreadRepositioning,
            Directive::Terminate => DecisionKind::SellingThreadTermination,
            Directive::EngageBroker(_) => DecisionKind::BrokerEngagement,
            Directive::DisengageBroker => DecisionKind::BrokerDisengagement,
            Directive::StartMarketing(_) => DecisionKind::MarketingThreadStartup,
            Directive::StopMarketing { .. } => DecisionKind::MarketingThreadTermination,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProtocolEvent {
    ProspectArrived { prospect: String },
    BidReceived(Bid),
    ConditionMet { condition: String },
    ConditionFailed { condition: String },
    OptionExercised { buyer: String },
    Tick { days: Days },
    OwnerDirective(Directive),
}

impl ProtocolEvent {
    /// Order of simultaneous events.
    pub fn rank(&self) -> u8 {
        match self {
            ProtocolEvent::ProspectArrived { .. } => 0,
            ProtocolEvent::ConditionMet { .. } => 1,
            ProtocolEvent::ConditionFailed { .. } => 2,
            ProtocolEvent::OptionExercised { .. } => 3,
            ProtocolEvent::BidReceived(_) => 4,
            ProtocolEvent::OwnerDirective(_) => 5,
            ProtocolEvent::Tick { .. } => 6,
        }
    }
}

/// An input event at a day on the market, addressed to one selling thread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub day: Days,
    #[serde(default)]
    pub thread: usize,
    pub id: u64,
    pub event: ProtocolEvent,
}

impl TimedEvent {
    pub fn new(day: Days, id: u64, event: ProtocolEvent) -> Self {
        Self {
            day,
            thread: 0,
            id,
            event,
        }
    }

    pub fn sort_key(&self) -> (Days, u8, usize, u64) {
        (self.day, self.event.rank(), self.thread, self.id)
    }
}

/// Puts events in their deterministic processing order.
pub fn order_events(events: &mut [TimedEvent]) {
    events.sort_by_key(TimedEvent::sort_key);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionCause {
    InnerCircleGuard,
    Owner,
    EscapeWindowOpen,
    OptionHeld,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionEnd {
    Lapsed,
    Outbid,
    Superseded,
}

/// Everything a selling thread does, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    DispatchFragment {
        audience: Audience,
        listing: Option<String>,
    },
    ActivateListing {
        service: String,
    },
    DeactivateListing {
        service: String,
    },
    Steering {
        method: String,
        reply: bool,
        decision: DecisionKind,
    },
    ProspectRegistered {
        prospect: String,
        unique: u64,
    },
    SignalRaised(Signal),
    BidEvaluated {
        buyer: String,
        price: Money,
        threshold: Money,
        verdict: BidVerdict,
    },
    BidRejected {
        buyer: String,
        price: Money,
        cause: RejectionCause,
    },
    BidAccepted {
        buyer: String,
        price: Money,
        route: SaleRoute,
    },
    EscapeWindowOpened {
        deadline: Days,
    },
    ConditionResolved {
        condition: String,
        met: bool,
    },
    EscapeTaken,
    Sold(Sale),
    OptionIssued(CallOption),
    OptionEnded {
        buyer: String,
        end: OptionEnd,
    },
    OptionExerciseRefused {
        buyer: String,
    },
    Repositioned {
        lp: Money,
        srt: Days,
        full_outcome: bool,
    },
    ListingRepositioned {
        service: String,
        lp: Money,
    },
    DirectiveApplied(DecisionKind),
    DirectiveRejected {
        decision: DecisionKind,
        reason: String,
    },
    Ignored {
        reason: String,
    },
    Terminated(TerminationReason),
}

impl Action {
    /// The (focus, method, reply) under which the action appears in traces.
    pub fn trace_parts(&self) -> (&'static str, String, bool) {
        let s = |m: &str| m.to_string();
        match self {
            Action::DispatchFragment { audience, .. } => ("mkt", format!("dispatch_{audience}"), true),
            Action::ActivateListing { .. } => ("mkt", s("activate_listing"), true),
            Action::DeactivateListing { .. } => ("mkt", s("deactivate_listing"), true),
            Action::Steering { method, reply, .. } => (OWNER_FOCUS, method.clone(), *reply),
            Action::ProspectRegistered { .. } => ("buyers", s("register_prospect"), true),
            Action::SignalRaised(sig) => ("mkt", format!("signal_{sig}"), true),
            Action::BidEvaluated { verdict, .. } => {
                ("buyers", s("evaluate_bid"), *verdict == BidVerdict::Accept)
            }
            Action::BidRejected { .. } => ("buyers", s("reject_bid"), true),
            Action::BidAccepted { .. } => ("buyers", s("accept_bid"), true),
            Action::EscapeWindowOpened { .. } => ("buyers", s("open_escape_window"), true),
            Action::ConditionResolved { met, .. } => ("buyers", s("resolve_condition"), *met),
            Action::EscapeTaken => ("buyers", s("escape"), true),
            Action::Sold(_) => ("buyers", s("sell"), true),
            Action::OptionIssued(_) => ("buyers", s("issue_option"), true),
            Action::OptionEnded { .. } => ("buyers", s("end_option"), true),
            Action::OptionExerciseRefused { .. } => ("buyers", s("exercise_option"), false),
            Action::Repositioned { .. } => ("broker", s("reposition"), true),
            Action::ListingRepositioned { .. } => ("mkt", s("reposition_listing"), true),
            Action::DirectiveApplied(_) => ("broker", s("apply_directive"), true),
            Action::DirectiveRejected { .. } => ("broker", s("apply_directive"), false),
            Action::Ignored { .. } => ("broker", s("ignore"), true),
            Action::Terminated(_) => ("broker", s("terminate"), true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LogItem {
    Input(ProtocolEvent),
    Action(Action),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub tom: Days,
    pub phase: PhaseKind,
    pub item: LogItem,
}

/// What the owner service sees of a steering call.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct OwnerContext {
    /// The method being asked plus the facts of the situation, e.g.
    /// `eligible`, `conditional`, `preferred`, `burst`.
    pub facts: BTreeSet<String>,
    pub calls: u64,
}

/// Answers fact queries `q.<fact>` of a decision-taking program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactService {
    pub facts: BTreeSet<String>,
}

pub const FACT_FOCUS: &str = "q";

impl Service for FactService {
    type State = ();

    fn focus(&self) -> &str {
        FACT_FOCUS
    }

    fn reply(&self, method: &str, _: &()) -> Reply<()> {
        Reply::new(self.facts.contains(method), ())
    }
}

/// How the owner answers steering calls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OwnerPolicy {
    AlwaysAccept,
    AlwaysReject,
    /// Accepts exactly the bids at or above the threshold; declines
    /// everything else.
    ThresholdOnly,
    /// A decision-taking program over focus `q`; the owner says yes when
    /// it stops and no when it deadlocks.
    Program(Thread),
}

impl OwnerPolicy {
    pub fn program(iseq: &InstructionSequence) -> Result<Self, KernelError> {
        let thread = extract_behavior(iseq, iseq.len() + 1)?;
        if let Some(f) = thread.foci().into_iter().find(|f| f != FACT_FOCUS) {
            return Err(KernelError::UnservedFocus(f));
        }
        Ok(OwnerPolicy::Program(thread))
    }

    pub fn name(&self) -> &'static str {
        match self {
            OwnerPolicy::AlwaysAccept => "always_accept",
            OwnerPolicy::AlwaysReject => "always_reject",
            OwnerPolicy::ThresholdOnly => "threshold_only",
            OwnerPolicy::Program(_) => "program",
        }
    }
}

impl Service for OwnerPolicy {
    type State = OwnerContext;

    fn focus(&self) -> &str {
        OWNER_FOCUS
    }

    fn reply(&self, method_name: &str, ctx: &OwnerContext) -> Reply<OwnerContext> {
        let value = match self {
            OwnerPolicy::AlwaysAccept => true,
            OwnerPolicy::AlwaysReject => false,
            OwnerPolicy::ThresholdOnly => {
                method_name == method::ACCEPT_BID && ctx.facts.contains("eligible")
            }
            OwnerPolicy::Program(thread) => {
                let facts = FactService {
                    facts: ctx.facts.clone(),
                };
                // Foci were checked at construction and programs cannot loop.
                matches!(
                    apply_service(thread, &facts, &(), thread.nodes().len() + 1),
                    Ok(applied) if applied.end == End::Stop
                )
            }
        };
        let next = OwnerContext {
            facts: ctx.facts.clone(),
            calls: ctx.calls + 1,
        };
        let mut reply = Reply::new(value, next);
        if let Some(kind) = steering_decision(method_name, value) {
            reply = reply.with_attachment(Attachment::new("decision", kind.name()));
        }
        reply
    }
}

/// Live state of one selling thread.
#[derive(Debug, Clone, PartialEq)]
pub struct SellingThread {
    pub thread_id: usize,
    outcome: DecisionOutcome,
    original_srt: Days,
    mode: EngagementMode,
    config: ProtocolConfig,
    phase: Phase,
    tom: Days,
    prospects: BTreeSet<String>,
    inner_circle: BTreeSet<String>,
    marketing: BTreeMap<String, ListingState>,
    options: Vec<CallOption>,
    last_signal: Signal,
    signals: Vec<(Days, Signal)>,
    options_issued: u32,
    options_exercised: u32,
    log: Vec<LogEntry>,
}

/// Validates the mode against the outcome and starts the thread at time on
/// market zero. Returns the startup actions (fragment dispatch and direct
/// listings); broker-activated listings stay pending until
/// [`SellingThread::activate_pending_listings`].
pub fn start_selling_thread(
    outcome: DecisionOutcome,
    mode: EngagementMode,
    config: ProtocolConfig,
) -> Result<(SellingThread, Vec<Action>), ProtocolError> {
    let outcome = match mode {
        EngagementMode::NoBrokerRoleSplit => {
            let broker = outcome.broker();
            if broker.commission_bps != 0 {
                return Err(ProtocolError::ModeMismatch(format!(
                    "role split needs zero commission, found {} bps",
                    broker.commission_bps
                )));
            }
            if broker.identity != outcome.taken_by() {
                return Err(ProtocolError::ModeMismatch(format!(
                    "role split needs the owner `{}` as broker, found `{}`",
                    outcome.taken_by(),
                    broker.identity
                )));
            }
            outcome
        }
        EngagementMode::JointActor => outcome.amend(|d| {
            for l in d.marketing_method.iter_mut().flatten() {
                l.activation = Activation::BrokerActivated;
            }
        })?,
        EngagementMode::SingleActorWithBrokerProposal => outcome,
    };
    let mut thread = SellingThread {
        thread_id: 0,
        original_srt: outcome.price_settings().srt,
        outcome,
        mode,
        config,
        phase: Phase::Active,
        tom: 0,
        prospects: BTreeSet::new(),
        inner_circle: BTreeSet::new(),
        marketing: BTreeMap::new(),
        options: Vec::new(),
        last_signal: Signal::Normal,
        signals: Vec::new(),
        options_issued: 0,
        options_exercised: 0,
        log: Vec::new(),
    };
    let mut actions = Vec::new();
    for audience in [Audience::Seller, Audience::InnerCircle, Audience::Broker] {
        thread.emit(
            &mut actions,
            Action::DispatchFragment {
                audience,
                listing: None,
            },
        );
    }
    let listings: Vec<Listing> = thread.outcome.marketing_method().to_vec();
    for l in listings {
        match l.activation {
            Activation::Direct => thread.activate_listing(&mut actions, &l.service),
            Activation::BrokerActivated => {
                thread.marketing.insert(l.service.clone(), ListingState::Pending);
            }
        }
    }
    Ok((thread, actions))
}

impl SellingThread {
    pub fn with_inner_circle(mut self, members: impl IntoIterator<Item = String>) -> Self {
        self.inner_circle.extend(members);
        self
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.thread_id = id;
        self
    }

    pub fn outcome(&self) -> &DecisionOutcome {
        &self.outcome
    }

    pub fn mode(&self) -> EngagementMode {
        self.mode
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn tom(&self) -> Days {
        self.tom
    }

    pub fn unique_prospects(&self) -> u64 {
        self.prospects.len() as u64
    }

    pub fn marketing_threads(&self) -> &BTreeMap<String, ListingState> {
        &self.marketing
    }

    pub fn open_options(&self) -> &[CallOption] {
        &self.options
    }

    pub fn signals(&self) -> &[(Days, Signal)] {
        &self.signals
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn is_preferred(&self, buyer: &str) -> bool {
        self.inner_circle.contains(buyer)
    }

    fn sheet(&self) -> &PriceSheet {
        self.outcome.price_settings()
    }

    fn emit(&mut self, out: &mut Vec<Action>, action: Action) {
        self.log.push(LogEntry {
            tom: self.tom,
            phase: self.phase.kind(),
            item: LogItem::Action(action.clone()),
        });
        out.push(action);
    }

    fn activate_listing(&mut self, out: &mut Vec<Action>, service: &str) {
        self.marketing.insert(service.to_string(), ListingState::Active);
        self.emit(
            out,
            Action::ActivateListing {
                service: service.to_string(),
            },
        );
        self.emit(
            out,
            Action::DispatchFragment {
                audience: Audience::ListingService,
                listing: Some(service.to_string()),
            },
        );
    }

    /// The broker activates every listing left to it.
    pub fn activate_pending_listings(&mut self) -> Vec<Action> {
        let mut out = Vec::new();
        if self.phase.is_terminal() {
            return out;
        }
        let pending: Vec<String> = self
            .marketing
            .iter()
            .filter(|(_, s)| **s == ListingState::Pending)
            .map(|(k, _)| k.clone())
            .collect();
        for service in pending {
            self.activate_listing(&mut out, &service);
        }
        out
    }

    /// The fragment a listing service receives on activation.
    pub fn listing_fragment(&self) -> crate::decision::Fragment {
        fragment_for(&self.outcome, Audience::ListingService)
    }

    fn steer<O: Service<State = OwnerContext>>(
        &mut self,
        out: &mut Vec<Action>,
        owner: &mut Bound<O>,
        method_name: &str,
        facts: &[&str],
    ) -> Result<bool, ProtocolError> {
        let mut set: BTreeSet<String> = facts.iter().map(|f| f.to_string()).collect();
        set.insert(method_name.to_string());
        owner.state.facts = set;
        let call = Thread::post_cond(
            KernelAction::new(OWNER_FOCUS, method_name),
            Thread::stop(),
            Thread::deadlock(),
        );
        let trace = run_to_trace(&call, &mut [owner], 2)?;
        let reply = trace.end == End::Stop;
        let decision = steering_decision(method_name, reply)
            .expect("steering methods map to decisions");
        self.emit(
            out,
            Action::Steering {
                method: method_name.to_string(),
                reply,
                decision,
            },
        );
        Ok(reply)
    }

    fn finish_listings(&mut self, out: &mut Vec<Action>) {
        let active: Vec<String> = self
            .marketing
            .iter()
            .filter(|(_, s)| **s != ListingState::Terminated)
            .map(|(k, _)| k.clone())
            .collect();
        for service in active {
            self.marketing.insert(service.clone(), ListingState::Terminated);
            self.emit(out, Action::DeactivateListing { service });
        }
    }

    fn end_all_options(&mut self, out: &mut Vec<Action>, end: OptionEnd) {
        for opt in core::mem::take(&mut self.options) {
            self.emit(
                out,
                Action::OptionEnded {
                    buyer: opt.buyer,
                    end,
                },
            );
        }
    }

    fn sell(&mut self, out: &mut Vec<Action>, mut sale: Sale) {
        sale.commission = sale.price.basis_points(self.outcome.broker().commission_bps);
        self.phase = Phase::Sold(sale.clone());
        self.emit(out, Action::Sold(sale));
        self.end_all_options(out, OptionEnd::Superseded);
        self.finish_listings(out);
    }

    fn terminate(&mut self, out: &mut Vec<Action>, reason: TerminationReason) {
        self.phase = Phase::Terminated(reason);
        self.emit(out, Action::Terminated(reason));
        self.end_all_options(out, OptionEnd::Superseded);
        self.finish_listings(out);
    }

    /// Ends a thread whose good was sold by another thread.
    pub fn terminate_as_sibling(&mut self) -> Vec<Action> {
        let mut out = Vec::new();
        if !self.phase.is_terminal() {
            self.terminate(&mut out, TerminationReason::SiblingSold);
        }
        out
    }

    /// Offers the bidder a call option at the bid price.
    pub fn propose_call_option(&mut self, bid: &Bid) -> Result<CallOption, ProtocolError> {
        if self.options.iter().any(|o| o.buyer == bid.buyer) {
            return Err(ProtocolError::DuplicateOptionForBuyer(bid.buyer.clone()));
        }
        let premium = core::cmp::max(
            Money(1),
            bid.price.basis_points(self.config.option_premium_bps),
        );
        let option = CallOption {
            buyer: bid.buyer.clone(),
            strike: bid.price,
            premium,
            created: self.tom,
            expiry: self.tom + core::cmp::max(1, self.config.option_horizon),
        };
        self.options.push(option.clone());
        self.options_issued += 1;
        Ok(option)
    }

    fn register(&mut self, out: &mut Vec<Action>, prospect: &str) -> bool {
        if !self.prospects.insert(prospect.to_string()) {
            return false;
        }
        let unique = self.unique_prospects();
        self.emit(
            out,
            Action::ProspectRegistered {
                prospect: prospect.to_string(),
                unique,
            },
        );
        true
    }

    fn signal_facts(signal: Signal) -> [&'static str; 1] {
        match signal {
            Signal::Burst => ["burst"],
            Signal::Bubble => ["bubble"],
            Signal::Normal => ["normal"],
        }
    }

    fn reevaluate_signal<O: Service<State = OwnerContext>>(
        &mut self,
        out: &mut Vec<Action>,
        owner: &mut Bound<O>,
    ) -> Result<(), ProtocolError> {
        if self.phase != Phase::Active {
            return Ok(());
        }
        let signal = market_activity_signal(
            self.sheet(),
            self.tom,
            self.unique_prospects(),
            self.config.bubble_factor,
        );
        if signal == self.last_signal {
            return Ok(());
        }
        self.last_signal = signal;
        if signal == Signal::Normal {
            return Ok(());
        }
        self.signals.push((self.tom, signal));
        self.emit(out, Action::SignalRaised(signal));
        if self.steer(out, owner, method::REPOSITION_LP, &Self::signal_facts(signal))? {
            let ps = self.sheet().clone();
            let step = ps.lp.basis_points(self.config.lp_adjust_bps);
            let lp = match signal {
                Signal::Burst => core::cmp::max(ps.mv, ps.lp - step),
                _ => ps.lp + step,
            };
            if lp == ps.lp {
                self.emit(
                    out,
                    Action::DirectiveRejected {
                        decision: DecisionKind::SellingThreadRepositioning,
                        reason: "list price already at market value".into(),
                    },
                );
            } else {
                // The owner's yes is the owner-role decision; record it as a
                // full repositioning outcome.
                let next = PriceSheet { lp, ..ps };
                self.replace_sheet(out, next, true)?;
            }
        }
        Ok(())
    }

    fn replace_outcome(&mut self, out: &mut Vec<Action>, outcome: DecisionOutcome, full: bool) {
        let old_lp = self.sheet().lp;
        self.outcome = outcome;
        let lp = self.sheet().lp;
        let srt = self.sheet().srt;
        self.emit(
            out,
            Action::Repositioned {
                lp,
                srt,
                full_outcome: full,
            },
        );
        if lp != old_lp {
            let listings: Vec<String> = self
                .marketing
                .iter()
                .filter(|(_, s)| **s == ListingState::Active)
                .map(|(k, _)| k.clone())
                .collect();
            for service in listings {
                self.emit(out, Action::ListingRepositioned { service, lp });
            }
        }
    }

    fn replace_sheet(
        &mut self,
        out: &mut Vec<Action>,
        ps: PriceSheet,
        full: bool,
    ) -> Result<(), ProtocolError> {
        match self.outcome.with_price_settings(ps) {
            Ok(next) => {
                self.replace_outcome(out, next, full);
                Ok(())
            }
            Err(e) => {
                self.emit(
                    out,
                    Action::DirectiveRejected {
                        decision: DecisionKind::SellingThreadRepositioning,
                        reason: e.to_string(),
                    },
                );
                Ok(())
            }
        }
    }

    fn check_expiry<O: Service<State = OwnerContext>>(
        &mut self,
        out: &mut Vec<Action>,
        owner: &mut Bound<O>,
    ) -> Result<(), ProtocolError> {
        while self.phase == Phase::Active && self.tom >= self.sheet().srt {
            if self.config.silent_expiry
                || !self.steer(out, owner, method::EXTEND_OR_TERMINATE, &["srt_reached"])?
            {
                self.terminate(out, TerminationReason::SrtExpired);
                break;
            }
            let ps = self.sheet().clone();
            let srt = core::cmp::max(ps.srt, self.tom) + core::cmp::max(1, self.config.srt_extension);
            self.replace_sheet(out, PriceSheet { srt, ..ps }, true)?;
        }
        Ok(())
    }

    fn tick_one_day<O: Service<State = OwnerContext>>(
        &mut self,
        out: &mut Vec<Action>,
        owner: &mut Bound<O>,
    ) -> Result<(), ProtocolError> {
        self.tom += 1;
        let tom = self.tom;
        let (expired, open): (Vec<CallOption>, Vec<CallOption>) =
            core::mem::take(&mut self.options).into_iter().partition(|o| o.expiry < tom);
        self.options = open;
        for o in expired {
            self.emit(
                out,
                Action::OptionEnded {
                    buyer: o.buyer,
                    end: OptionEnd::Lapsed,
                },
            );
        }
        if let Phase::EscapeWindow(w) = &self.phase {
            if tom >= w.deadline {
                let w = w.clone();
                self.close_escape_window(out, owner, w)?;
            }
        }
        self.reevaluate_signal(out, owner)?;
        self.check_expiry(out, owner)
    }

    fn close_escape_window<O: Service<State = OwnerContext>>(
        &mut self,
        out: &mut Vec<Action>,
        owner: &mut Bound<O>,
        w: EscapeWindow,
    ) -> Result<(), ProtocolError> {
        let escape = !w.escape_declined
            && !w.pending.is_empty()
            && self.steer(out, owner, method::ESCAPE, &["conditions_unmet"])?;
        if escape {
            self.phase = Phase::Active;
            self.emit(out, Action::EscapeTaken);
            return self.check_expiry(out, owner);
        }
        let sale = Sale {
            buyer: w.buyer.clone(),
            price: w.price,
            tom: self.tom,
            accepted_at: w.accepted_at,
            route: w.route,
            commission: Money::ZERO,
            preferred: self.is_preferred(&w.buyer),
        };
        self.sell(out, sale);
        Ok(())
    }

    fn accept(&mut self, out: &mut Vec<Action>, bid: &Bid, route: SaleRoute) {
        self.emit(
            out,
            Action::BidAccepted {
                buyer: bid.buyer.clone(),
                price: bid.price,
                route,
            },
        );
        if bid.conditions.is_empty() {
            let sale = Sale {
                buyer: bid.buyer.clone(),
                price: bid.price,
                tom: self.tom,
                accepted_at: self.tom,
                route,
                commission: Money::ZERO,
                preferred: self.is_preferred(&bid.buyer),
            };
            self.sell(out, sale);
        } else {
            let deadline = self.tom + core::cmp::max(1, self.config.escape_window);
            self.phase = Phase::EscapeWindow(EscapeWindow {
                buyer: bid.buyer.clone(),
                price: bid.price,
                accepted_at: self.tom,
                deadline,
                pending: bid.conditions.iter().cloned().collect(),
                route,
                escape_declined: false,
            });
            self.end_all_options(out, OptionEnd::Superseded);
            self.emit(out, Action::EscapeWindowOpened { deadline });
        }
    }

    fn maybe_offer_option<O: Service<State = OwnerContext>>(
        &mut self,
        out: &mut Vec<Action>,
        owner: &mut Bound<O>,
        bid: &Bid,
        facts: &[&str],
    ) -> Result<(), ProtocolError> {
        if self.options.iter().any(|o| o.buyer == bid.buyer) {
            self.emit(
                out,
                Action::BidRejected {
                    buyer: bid.buyer.clone(),
                    price: bid.price,
                    cause: RejectionCause::OptionHeld,
                },
            );
            return Ok(());
        }
        if self.steer(out, owner, method::PROPOSE_OPTION, facts)? {
            let option = self.propose_call_option(bid)?;
            self.emit(out, Action::OptionIssued(option));
        } else {
            self.emit(
                out,
                Action::BidRejected {
                    buyer: bid.buyer.clone(),
                    price: bid.price,
                    cause: RejectionCause::Owner,
                },
            );
        }
        Ok(())
    }

    fn handle_bid<O: Service<State = OwnerContext>>(
        &mut self,
        out: &mut Vec<Action>,
        owner: &mut Bound<O>,
        bid: &Bid,
    ) -> Result<(), ProtocolError> {
        if bid.valid_until < self.tom {
            return Err(ProtocolError::StaleBid {
                buyer: bid.buyer.clone(),
                valid_until: bid.valid_until,
                tom: self.tom,
            });
        }
        if matches!(self.phase, Phase::EscapeWindow(_)) {
            self.emit(
                out,
                Action::BidRejected {
                    buyer: bid.buyer.clone(),
                    price: bid.price,
                    cause: RejectionCause::EscapeWindowOpen,
                },
            );
            return Ok(());
        }
        if self.register(out, &bid.buyer) {
            self.reevaluate_signal(out, owner)?;
        }
        // A competing bid above strike + premium voids the option.
        let (outbid, kept): (Vec<CallOption>, Vec<CallOption>) = core::mem::take(&mut self.options)
            .into_iter()
            .partition(|o| o.buyer != bid.buyer && bid.price > o.strike + o.premium);
        self.options = kept;
        for o in outbid {
            self.emit(
                out,
                Action::OptionEnded {
                    buyer: o.buyer,
                    end: OptionEnd::Outbid,
                },
            );
        }

        let preferred = self.is_preferred(&bid.buyer);
        let threshold = acceptance_threshold(self.sheet(), self.tom)
            .expect("active threads stay within srt");
        let verdict = evaluate_bid(self.sheet(), bid.price, self.tom, preferred)
            .expect("active threads stay within srt");
        self.emit(
            out,
            Action::BidEvaluated {
                buyer: bid.buyer.clone(),
                price: bid.price,
                threshold,
                verdict,
            },
        );
        let mut facts: Vec<&str> = Vec::new();
        if preferred {
            facts.push("preferred");
        }
        if !bid.conditions.is_empty() {
            facts.push("conditional");
        }
        match verdict {
            BidVerdict::RejectInnerCircleGuard => {
                self.emit(
                    out,
                    Action::BidRejected {
                        buyer: bid.buyer.clone(),
                        price: bid.price,
                        cause: RejectionCause::InnerCircleGuard,
                    },
                );
            }
            BidVerdict::Accept => {
                facts.push("eligible");
                if self.config.auto_accept {
                    self.accept(out, bid, SaleRoute::ActionDetermination);
                } else if self.steer(out, owner, method::ACCEPT_BID, &facts)? {
                    self.accept(out, bid, SaleRoute::Decision);
                } else {
                    facts.push("rejected_eligible");
                    self.maybe_offer_option(out, owner, bid, &facts)?;
                }
            }
            BidVerdict::BelowThreshold => {
                facts.push("below_threshold");
                self.maybe_offer_option(out, owner, bid, &facts)?;
            }
        }
        Ok(())
    }

    fn handle_directive(&mut self, out: &mut Vec<Action>, directive: &Directive) {
        let decision = directive.decision();
        let reject = |me: &mut Self, out: &mut Vec<Action>, reason: &str| {
            me.emit(
                out,
                Action::DirectiveRejected {
                    decision,
                    reason: reason.to_string(),
                },
            );
        };
        if matches!(self.phase, Phase::EscapeWindow(_)) && !matches!(directive, Directive::Terminate)
        {
            reject(self, out, "escape window open");
            return;
        }
        match directive {
            Directive::Terminate => {
                self.emit(out, Action::DirectiveApplied(decision));
                self.terminate(out, TerminationReason::OwnerDecision);
            }
            Directive::Reposition(r) => {
                let current = self.sheet().clone();
                let proposed = match r {
                    Repositioning::Outcome(next) => {
                        if next.price_settings().srt < self.tom {
                            reject(self, out, "srt already passed");
                        } else {
                            self.replace_outcome(out, (**next).clone(), true);
                        }
                        return;
                    }
                    Repositioning::ListPrice(lp) => PriceSheet {
                        lp: *lp,
                        ..current.clone()
                    },
                    Repositioning::Sheet(ps) => ps.clone(),
                };
                if self.mode == EngagementMode::NoBrokerRoleSplit {
                    reject(self, out, "role split: parameters change only with an owner outcome");
                    return;
                }
                if proposed.icsrp != current.icsrp
                    || proposed.fsrp != current.fsrp
                    || proposed.smv != current.smv
                {
                    reject(self, out, "icsrp, fsrp and smv change only with a full outcome");
                    return;
                }
                if proposed.srt < self.tom {
                    reject(self, out, "srt already passed");
                    return;
                }
                // `replace_sheet` logs its own rejection on an invalid sheet.
                let _ = self.replace_sheet(out, proposed, false);
            }
            Directive::EngageBroker(broker) => {
                let broker = broker.clone();
                match self.outcome.amend(|d| d.broker = Some(broker)) {
                    Ok(next) => {
                        self.outcome = next;
                        if self.mode == EngagementMode::NoBrokerRoleSplit {
                            self.mode = EngagementMode::SingleActorWithBrokerProposal;
                        }
                        self.emit(out, Action::DirectiveApplied(decision));
                    }
                    Err(e) => reject(self, out, &e.to_string()),
                }
            }
            Directive::DisengageBroker => {
                let owner = self.outcome.taken_by().to_string();
                match self.outcome.amend(|d| {
                    d.broker = Some(BrokerData {
                        identity: owner,
                        commission_bps: 0,
                    })
                }) {
                    Ok(next) => {
                        self.outcome = next;
                        self.mode = EngagementMode::NoBrokerRoleSplit;
                        self.emit(out, Action::DirectiveApplied(decision));
                    }
                    Err(e) => reject(self, out, &e.to_string()),
                }
            }
            Directive::StartMarketing(listing) => {
                if self.marketing.contains_key(&listing.service) {
                    reject(self, out, "listing already exists");
                    return;
                }
                let mut listing = listing.clone();
                if self.mode == EngagementMode::JointActor {
                    listing.activation = Activation::BrokerActivated;
                }
                let added = listing.clone();
                match self.outcome.amend(|d| d.marketing_method.get_or_insert_with(Vec::new).push(added)) {
                    Ok(next) => {
                        self.outcome = next;
                        self.emit(out, Action::DirectiveApplied(decision));
                        self.activate_listing(out, &listing.service);
                    }
                    Err(e) => reject(self, out, &e.to_string()),
                }
            }
            Directive::StopMarketing { service } => match self.marketing.get(service) {
                Some(ListingState::Active) | Some(ListingState::Pending) => {
                    self.marketing.insert(service.clone(), ListingState::Terminated);
                    self.emit(out, Action::DirectiveApplied(decision));
                    self.emit(
                        out,
                        Action::DeactivateListing {
                            service: service.clone(),
                        },
                    );
                }
                _ => reject(self, out, "no such active listing"),
            },
        }
    }

    /// Applies one input event. Steering calls go to `owner`.
    pub fn handle_event<O: Service<State = OwnerContext>>(
        &mut self,
        event: &ProtocolEvent,
        owner: &mut Bound<O>,
    ) -> Result<Vec<Action>, ProtocolError> {
        if self.phase.is_terminal() {
            return Err(ProtocolError::EventInTerminalPhase {
                thread: self.thread_id,
                phase: self.phase.kind(),
            });
        }
        self.log.push(LogEntry {
            tom: self.tom,
            phase: self.phase.kind(),
            item: LogItem::Input(event.clone()),
        });
        let mut out = Vec::new();
        match event {
            ProtocolEvent::ProspectArrived { prospect } => {
                if self.register(&mut out, prospect) {
                    self.reevaluate_signal(&mut out, owner)?;
                }
            }
            ProtocolEvent::BidReceived(bid) => self.handle_bid(&mut out, owner, bid)?,
            ProtocolEvent::ConditionMet { condition } | ProtocolEvent::ConditionFailed { condition } => {
                let met = matches!(event, ProtocolEvent::ConditionMet { .. });
                let Phase::EscapeWindow(w) = &mut self.phase else {
                    self.emit(
                        &mut out,
                        Action::Ignored {
                            reason: format!("condition `{condition}` outside an escape window"),
                        },
                    );
                    return Ok(out);
                };
                if !w.pending.remove(condition) {
                    self.emit(
                        &mut out,
                        Action::Ignored {
                            reason: format!("condition `{condition}` not pending"),
                        },
                    );
                    return Ok(out);
                }
                let w = w.clone();
                self.emit(
                    &mut out,
                    Action::ConditionResolved {
                        condition: condition.clone(),
                        met,
                    },
                );
                if met {
                    if w.pending.is_empty() && !w.escape_declined {
                        self.close_escape_window(&mut out, owner, w)?;
                    }
                } else if !w.escape_declined {
                    if self.steer(&mut out, owner, method::ESCAPE, &["condition_failed"])? {
                        self.phase = Phase::Active;
                        self.emit(&mut out, Action::EscapeTaken);
                        self.check_expiry(&mut out, owner)?;
                    } else if let Phase::EscapeWindow(w) = &mut self.phase {
                        w.escape_declined = true;
                    }
                }
            }
            ProtocolEvent::OptionExercised { buyer } => {
                let held = self
                    .options
                    .iter()
                    .position(|o| &o.buyer == buyer && self.tom <= o.expiry);
                match (held, &self.phase) {
                    (Some(i), Phase::Active) => {
                        let option = self.options.remove(i);
                        self.options_exercised += 1;
                        let sale = Sale {
                            buyer: option.buyer.clone(),
                            price: option.strike,
                            tom: self.tom,
                            accepted_at: self.tom,
                            route: SaleRoute::OptionExercise,
                            commission: Money::ZERO,
                            preferred: self.is_preferred(&option.buyer),
                        };
                        self.sell(&mut out, sale);
                    }
                    _ => self.emit(
                        &mut out,
                        Action::OptionExerciseRefused {
                            buyer: buyer.clone(),
                        },
                    ),
                }
            }
            ProtocolEvent::Tick { days } => {
                for _ in 0..*days {
                    if self.phase.is_terminal() {
                        break;
                    }
                    self.tick_one_day(&mut out, owner)?;
                }
            }
            ProtocolEvent::OwnerDirective(d) => self.handle_directive(&mut out, d),
        }
        Ok(out)
    }

    /// Trace records of everything this thread did.
    pub fn trace_records(&self) -> impl Iterator<Item = TraceRecord> + '_ {
        self.log.iter().filter_map(move |entry| match &entry.item {
            LogItem::Action(a) => {
                let (focus, method_name, reply) = a.trace_parts();
                Some(TraceRecord {
                    seq: 0,
                    thread: self.thread_id,
                    focus: focus.to_string(),
                    method: method_name,
                    reply,
                    tom: entry.tom,
                    phase: entry.phase,
                })
            }
            LogItem::Input(_) => None,
        })
    }

    /// The timed input events recorded in the log, for replay.
    pub fn recorded_inputs(&self) -> Vec<(Days, ProtocolEvent)> {
        self.log
            .iter()
            .filter_map(|e| match &e.item {
                LogItem::Input(ev) => Some((e.tom, ev.clone())),
                LogItem::Action(_) => None,
            })
            .collect()
    }

    pub fn summary(&self) -> ThreadSummary {
        let (sale, termination) = match &self.phase {
            Phase::Sold(s) => (Some(s.clone()), None),
            Phase::Terminated(r) => (None, Some(*r)),
            _ => (None, None),
        };
        ThreadSummary {
            thread: self.thread_id,
            phase: self.phase.kind(),
            sold: sale.is_some(),
            price: sale.as_ref().map(|s| s.price),
            buyer: sale.as_ref().map(|s| s.buyer.clone()),
            route: sale.as_ref().map(|s| s.route),
            commission: sale.as_ref().map(|s| s.commission),
            tom: self.tom,
            original_srt: self.original_srt,
            termination,
            signals: self.signals.clone(),
            options_issued: self.options_issued,
            options_exercised: self.options_exercised,
            unique_prospects: self.unique_prospects(),
        }
    }
}

/// One line of a run trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: usize,
    pub thread: usize,
    pub focus: String,
    pub method: String,
    pub reply: bool,
    pub tom: Days,
    pub phase: PhaseKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub end: End,
    /// Whether records carry a `thread=` field.
    pub multi_thread: bool,
}

impl RunTrace {
    /// The kernel-level trace (focus, method, reply) of the run.
    pub fn to_kernel_trace(&self) -> Trace {
        Trace {
            events: self
                .records
                .iter()
                .map(|r| TraceEvent {
                    focus: r.focus.clone(),
                    method: r.method.clone(),
                    reply: r.reply,
                    attachment: None,
                })
                .collect(),
            end: self.end,
        }
    }

    pub fn steering_calls(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.focus == OWNER_FOCUS)
    }
}

impl fmt::Display for RunTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.records {
            write!(
                f,
                "seq={} focus={} method={} reply={} tom={} phase={}",
                r.seq, r.focus, r.method, r.reply, r.tom, r.phase
            )?;
            if self.multi_thread {
                write!(f, " thread={}", r.thread)?;
            }
            writeln!(f)?;
        }
        writeln!(f, "end={}", self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadSummary {
    pub thread: usize,
    pub phase: PhaseKind,
    pub sold: bool,
    pub price: Option<Money>,
    pub buyer: Option<String>,
    pub route: Option<SaleRoute>,
    pub commission: Option<Money>,
    pub tom: Days,
    pub original_srt: Days,
    /// `None` while still active at the horizon, or when sold.
    pub termination: Option<TerminationReason>,
    pub signals: Vec<(Days, Signal)>,
    pub options_issued: u32,
    pub options_exercised: u32,
    pub unique_prospects: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub threads: Vec<SellingThread>,
    pub trace: RunTrace,
}

impl RunResult {
    pub fn final_state(&self) -> &SellingThread {
        &self.threads[0]
    }

    pub fn summaries(&self) -> Vec<ThreadSummary> {
        self.threads.iter().map(SellingThread::summary).collect()
    }
}

/// Runs selling threads for one good in a single day-by-day loop.
///
/// Each day, the day's events are applied in [`order_events`] order, then
/// every open thread advances one day. When one thread sells, the others
/// terminate. The loop stops when every thread is finished or at
/// `horizon` days.
pub fn run_selling_threads<O: Service<State = OwnerContext>>(
    mut threads: Vec<SellingThread>,
    owner: &mut Bound<O>,
    mut events: Vec<TimedEvent>,
    horizon: Days,
) -> Result<RunResult, ProtocolError> {
    for (i, t) in threads.iter_mut().enumerate() {
        t.thread_id = i;
    }
    order_events(&mut events);
    let multi = threads.len() > 1;
    // Records are collected in processing order across threads.
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mark = |threads: &Vec<SellingThread>, order: &mut Vec<(usize, usize)>, i: usize, from: usize| {
        for k in from..threads[i].log.len() {
            if matches!(threads[i].log[k].item, LogItem::Action(_)) {
                order.push((i, k));
            }
        }
    };
    for i in 0..threads.len() {
        mark(&threads, &mut order, i, 0);
    }
    for i in 0..threads.len() {
        let from = threads[i].log.len();
        threads[i].activate_pending_listings();
        mark(&threads, &mut order, i, from);
    }

    let settle = |threads: &mut Vec<SellingThread>, order: &mut Vec<(usize, usize)>, sold: usize| {
        for (j, t) in threads.iter_mut().enumerate() {
            if j != sold && !t.phase.is_terminal() {
                let from = t.log.len();
                t.terminate_as_sibling();
                order.extend((from..t.log.len()).map(|k| (j, k)));
            }
        }
    };

    let mut next = 0usize;
    let mut day: Days = 0;
    loop {
        while next < events.len() && events[next].day <= day {
            let ev = &events[next];
            next += 1;
            let i = ev.thread;
            if i >= threads.len() || threads[i].phase.is_terminal() {
                continue;
            }
            let from = threads[i].log.len();
            threads[i].handle_event(&ev.event, owner)?;
            mark(&threads, &mut order, i, from);
            if matches!(threads[i].phase, Phase::Sold(_)) {
                settle(&mut threads, &mut order, i);
            }
        }
        if threads.iter().all(|t| t.phase.is_terminal()) || day >= horizon {
            break;
        }
        for i in 0..threads.len() {
            if threads[i].phase.is_terminal() {
                continue;
            }
            let from = threads[i].log.len();
            threads[i].handle_event(&ProtocolEvent::Tick { days: 1 }, owner)?;
            mark(&threads, &mut order, i, from);
            if matches!(threads[i].phase, Phase::Sold(_)) {
                settle(&mut threads, &mut order, i);
            }
        }
        day += 1;
    }

    let records = order
        .iter()
        .enumerate()
        .map(|(seq, &(i, k))| {
            let entry = &threads[i].log[k];
            let LogItem::Action(a) = &entry.item else {
                unreachable!("only actions are ordered")
            };
            let (focus, method_name, reply) = a.trace_parts();
            TraceRecord {
                seq: seq + 1,
                thread: i,
                focus: focus.to_string(),
                method: method_name,
                reply,
                tom: entry.tom,
                phase: entry.phase,
            }
        })
        .collect();
    let end = if threads.iter().all(|t| t.phase.is_terminal()) {
        End::Stop
    } else {
        End::Deadlock
    };
    Ok(RunResult {
        threads,
        trace: RunTrace {
            records,
            end,
            multi_thread: multi,
        },
    })
}

/// Starts one selling thread and runs it against the event stream.
pub fn run_selling_thread<O: Service<State = OwnerContext>>(
    outcome: DecisionOutcome,
    mode: EngagementMode,
    config: ProtocolConfig,
    inner_circle: impl IntoIterator<Item = String>,
    owner: &mut Bound<O>,
    events: Vec<TimedEvent>,
    horizon: Days,
) -> Result<RunResult, ProtocolError> {
    let (thread, _) = start_selling_thread(outcome, mode, config)?;
    let thread = thread.with_inner_circle(inner_circle);
    run_selling_threads(vec![thread], owner, events, horizon)
}

pub fn owner(policy: OwnerPolicy) -> Bound<OwnerPolicy> {
    Bound::new(policy, OwnerContext::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::{build_sts_outcome, sample_draft};

    fn outcome_with(change: impl FnOnce(&mut PriceSheet)) -> DecisionOutcome {
        let mut draft = sample_draft();
        let ps = draft.price_settings.as_mut().unwrap();
        ps.srpf = None;
        change(ps);
        build_sts_outcome(draft).unwrap()
    }

    fn outcome() -> DecisionOutcome {
        outcome_with(|_| {})
    }

    fn bid(day: Days, id: u64, buyer: &str, price: i64) -> TimedEvent {
        TimedEvent::new(
            day,
            id,
            ProtocolEvent::BidReceived(Bid {
                buyer: buyer.into(),
                price: Money(price),
                valid_until: day + 7,
                conditions: Vec::new(),
            }),
        )
    }

    fn run(
        policy: OwnerPolicy,
        config: ProtocolConfig,
        events: Vec<TimedEvent>,
        horizon: Days,
    ) -> RunResult {
        run_selling_thread(
            outcome(),
            EngagementMode::SingleActorWithBrokerProposal,
            config,
            ["aunt".to_string()],
            &mut owner(policy),
            events,
            horizon,
        )
        .unwrap()
    }

    #[test]
    fn bid_at_initial_reservation_price_sells_on_day_zero() {
        let r = run(
            OwnerPolicy::ThresholdOnly,
            ProtocolConfig::default(),
            vec![bid(0, 1, "b1", 240_000)],
            400,
        );
        let s = r.final_state().summary();
        assert!(s.sold);
        assert_eq!(s.price, Some(Money(240_000)));
        assert_eq!(s.tom, 0);
        assert_eq!(s.route, Some(SaleRoute::Decision));
        assert_eq!(s.commission, Some(Money(3_600)));
        assert_eq!(r.trace.end, End::Stop);
        let calls: Vec<_> = r.trace.steering_calls().map(|c| c.method.as_str()).collect();
        assert_eq!(calls, [method::ACCEPT_BID]);
    }

    #[test]
    fn threshold_falls_linearly_with_time_on_market() {
        let r = run(
            OwnerPolicy::ThresholdOnly,
            ProtocolConfig::default(),
            vec![bid(90, 1, "b1", 219_999), bid(90, 2, "b2", 220_000)],
            400,
        );
        let s = r.final_state().summary();
        assert_eq!(s.buyer.as_deref(), Some("b2"));
        assert_eq!(s.tom, 90);
        let threshold = r.final_state().log().iter().find_map(|e| match &e.item {
            LogItem::Action(Action::BidEvaluated { threshold, .. }) => Some(*threshold),
            _ => None,
        });
        assert_eq!(threshold, Some(Money(220_000)));
    }

    #[test]
    fn guard_rejects_low_outside_bid_without_asking_owner() {
        let r = run(
            OwnerPolicy::AlwaysAccept,
            ProtocolConfig::default(),
            vec![bid(3, 1, "b1", 100_000)],
            10,
        );
        assert!(!r.final_state().summary().sold);
        assert_eq!(r.trace.steering_calls().count(), 0);
        assert!(r.final_state().log().iter().any(|e| matches!(
            &e.item,
            LogItem::Action(Action::BidRejected {
                cause: RejectionCause::InnerCircleGuard,
                ..
            })
        )));
    }

    #[test]
    fn preferred_low_bid_reaches_owner_as_option_proposal() {
        let r = run(
            OwnerPolicy::AlwaysAccept,
            ProtocolConfig::default(),
            vec![bid(3, 1, "aunt", 100_000)],
            10,
        );
        let t = r.final_state();
        assert!(!t.summary().sold);
        let opt = &t.open_options()[0];
        assert_eq!(opt.strike, Money(100_000));
        assert_eq!(opt.premium, Money(2_500));
        assert_eq!(opt.expiry, 17);
        assert_eq!(t.summary().options_issued, 1);
    }

    #[test]
    fn option_premium_has_a_floor_of_one_minor_unit() {
        let (mut t, _) = start_selling_thread(
            outcome(),
            EngagementMode::SingleActorWithBrokerProposal,
            ProtocolConfig::default(),
        )
        .unwrap();
        let b = Bid {
            buyer: "x".into(),
            price: Money(10),
            valid_until: 5,
            conditions: vec![],
        };
        assert_eq!(t.propose_call_option(&b).unwrap().premium, Money(1));
        assert_eq!(
            t.propose_call_option(&b),
            Err(ProtocolError::DuplicateOptionForBuyer("x".into()))
        );
    }

    #[test]
    fn exercised_option_sells_at_strike() {
        let mut events = vec![bid(1, 1, "b1", 210_000)];
        events.push(TimedEvent::new(
            4,
            2,
            ProtocolEvent::OptionExercised { buyer: "b1".into() },
        ));
        let r = run(OwnerPolicy::AlwaysReject, ProtocolConfig::default(), events.clone(), 30);
        assert!(!r.final_state().summary().sold);
        let policy = OwnerPolicy::program(&"-q.accept_bid; !; #0".parse().unwrap()).unwrap();
        let r = run(policy, ProtocolConfig::default(), events, 30);
        let s = r.final_state().summary();
        assert_eq!(s.route, Some(SaleRoute::OptionExercise));
        assert_eq!(s.price, Some(Money(210_000)));
        assert_eq!(s.tom, 4);
        assert_eq!(s.options_exercised, 1);
    }

    #[test]
    fn competing_bid_above_strike_plus_premium_voids_option() {
        let events = vec![
            bid(1, 1, "b1", 200_000),
            bid(2, 2, "b2", 205_000),
            bid(3, 3, "b3", 205_001),
            TimedEvent::new(4, 4, ProtocolEvent::OptionExercised { buyer: "b1".into() }),
        ];
        // Owner offers options but never accepts a bid outright.
        let policy = OwnerPolicy::program(&"-q.accept_bid; !; #0".parse().unwrap()).unwrap();
        let r = run(policy, ProtocolConfig::default(), events, 30);
        let t = r.final_state();
        assert!(!t.summary().sold);
        let outbid: Vec<_> = t
            .log()
            .iter()
            .filter_map(|e| match &e.item {
                LogItem::Action(Action::OptionEnded {
                    buyer,
                    end: OptionEnd::Outbid,
                }) => Some((buyer.as_str(), e.tom)),
                _ => None,
            })
            .collect();
        assert_eq!(outbid, [("b1", 3)]);
    }

    #[test]
    fn silent_expiry_terminates_at_srt() {
        let config = ProtocolConfig {
            silent_expiry: true,
            ..ProtocolConfig::default()
        };
        let r = run(OwnerPolicy::AlwaysAccept, config, Vec::new(), 400);
        let s = r.final_state().summary();
        assert_eq!(s.termination, Some(TerminationReason::SrtExpired));
        assert_eq!(s.tom, 180);
        assert_eq!(r.trace.end, End::Stop);
        assert_eq!(r.trace.steering_calls().count(), 0);
    }

    #[test]
    fn owner_extension_keeps_thread_open_until_horizon() {
        let r = run(OwnerPolicy::AlwaysAccept, ProtocolConfig::default(), Vec::new(), 250);
        let t = r.final_state();
        assert_eq!(t.phase(), &Phase::Active);
        assert_eq!(t.outcome().price_settings().srt, 270);
        assert_eq!(t.tom(), 250);
        assert_eq!(r.trace.end, End::Deadlock);
        let s = t.summary();
        assert_eq!(s.termination, None);
        assert_eq!(s.original_srt, 180);
    }

    #[test]
    fn owner_declining_extension_terminates() {
        let r = run(OwnerPolicy::AlwaysReject, ProtocolConfig::default(), Vec::new(), 400);
        assert_eq!(
            r.final_state().phase(),
            &Phase::Terminated(TerminationReason::SrtExpired)
        );
        let calls: Vec<_> = r.trace.steering_calls().map(|c| (c.method.as_str(), c.reply)).collect();
        assert_eq!(calls, [(method::EXTEND_OR_TERMINATE, false)]);
    }

    fn conditional(day: Days, buyer: &str, price: i64) -> TimedEvent {
        TimedEvent::new(
            day,
            1,
            ProtocolEvent::BidReceived(Bid {
                buyer: buyer.into(),
                price: Money(price),
                valid_until: day + 7,
                conditions: vec![format!("financing:{buyer}")],
            }),
        )
    }

    #[test]
    fn failed_condition_lets_owner_escape() {
        let events = vec![
            conditional(0, "b1", 250_000),
            TimedEvent::new(
                5,
                2,
                ProtocolEvent::ConditionFailed {
                    condition: "financing:b1".into(),
                },
            ),
            bid(6, 3, "b2", 240_000),
        ];
        let r = run(OwnerPolicy::AlwaysAccept, ProtocolConfig::default(), events, 30);
        let s = r.final_state().summary();
        assert_eq!(s.buyer.as_deref(), Some("b2"));
        assert_eq!(s.tom, 6);
    }

    #[test]
    fn met_condition_completes_sale_at_bid_price() {
        let events = vec![
            conditional(0, "b1", 250_000),
            bid(2, 3, "b2", 270_000),
            TimedEvent::new(
                5,
                2,
                ProtocolEvent::ConditionMet {
                    condition: "financing:b1".into(),
                },
            ),
        ];
        let r = run(OwnerPolicy::AlwaysAccept, ProtocolConfig::default(), events, 30);
        let s = r.final_state().summary();
        assert_eq!(s.buyer.as_deref(), Some("b1"));
        assert_eq!(s.price, Some(Money(250_000)));
        assert_eq!(s.tom, 5);
        let Phase::Sold(sale) = r.final_state().phase() else {
            panic!()
        };
        assert_eq!(sale.accepted_at, 0);
    }

    #[test]
    fn declined_escape_sells_at_deadline() {
        let config = ProtocolConfig {
            auto_accept: true,
            ..ProtocolConfig::default()
        };
        let events = vec![
            conditional(0, "b1", 250_000),
            TimedEvent::new(
                5,
                2,
                ProtocolEvent::ConditionFailed {
                    condition: "financing:b1".into(),
                },
            ),
        ];
        let r = run(OwnerPolicy::AlwaysReject, config, events, 30);
        let s = r.final_state().summary();
        assert_eq!(s.route, Some(SaleRoute::ActionDetermination));
        assert_eq!(s.tom, 14);
    }

    #[test]
    fn burst_prompts_owner_to_lower_list_price_down_to_mv() {
        let mut draft = sample_draft();
        draft.price_settings.as_mut().unwrap().srpf = Some(1.0);
        let o = build_sts_outcome(draft).unwrap();
        let mut own = owner(OwnerPolicy::AlwaysAccept);
        let r = run_selling_thread(
            o,
            EngagementMode::SingleActorWithBrokerProposal,
            ProtocolConfig::default(),
            [],
            &mut own,
            Vec::new(),
            3,
        )
        .unwrap();
        let t = r.final_state();
        assert_eq!(t.signals(), &[(1, Signal::Burst)]);
        // 280000 - 5% = 266000, still above mv.
        assert_eq!(t.outcome().price_settings().lp, Money(266_000));
        let calls: Vec<_> = r.trace.steering_calls().map(|c| c.method.as_str()).collect();
        assert_eq!(calls, [method::REPOSITION_LP]);
    }

    #[test]
    fn sheet_reposition_may_not_touch_reservation_prices() {
        let (mut t, _) = start_selling_thread(
            outcome(),
            EngagementMode::SingleActorWithBrokerProposal,
            ProtocolConfig::default(),
        )
        .unwrap();
        let mut own = owner(OwnerPolicy::AlwaysAccept);
        let mut ps = t.outcome().price_settings().clone();
        ps.fsrp = Money(210_000);
        let out = t
            .handle_event(
                &ProtocolEvent::OwnerDirective(Directive::Reposition(Repositioning::Sheet(ps))),
                &mut own,
            )
            .unwrap();
        assert!(matches!(out[0], Action::DirectiveRejected { .. }));
        assert_eq!(t.outcome().price_settings().fsrp, Money(200_000));

        let out = t
            .handle_event(
                &ProtocolEvent::OwnerDirective(Directive::Reposition(Repositioning::ListPrice(
                    Money(270_000),
                ))),
                &mut own,
            )
            .unwrap();
        assert!(matches!(out[0], Action::Repositioned { lp: Money(270_000), .. }));
    }

    #[test]
    fn role_split_requires_owner_as_zero_commission_broker() {
        let err = start_selling_thread(
            outcome(),
            EngagementMode::NoBrokerRoleSplit,
            ProtocolConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::ModeMismatch(_)));

        let o = outcome()
            .amend(|d| {
                d.broker = Some(BrokerData {
                    identity: "owner".into(),
                    commission_bps: 0,
                })
            })
            .unwrap();
        let (mut t, _) =
            start_selling_thread(o, EngagementMode::NoBrokerRoleSplit, ProtocolConfig::default())
                .unwrap();
        let out = t
            .handle_event(
                &ProtocolEvent::OwnerDirective(Directive::Reposition(Repositioning::ListPrice(
                    Money(270_000),
                ))),
                &mut owner(OwnerPolicy::AlwaysAccept),
            )
            .unwrap();
        assert!(matches!(out[0], Action::DirectiveRejected { .. }));
    }

    #[test]
    fn joint_actor_leaves_every_listing_to_broker() {
        let (t, actions) = start_selling_thread(
            outcome(),
            EngagementMode::JointActor,
            ProtocolConfig::default(),
        )
        .unwrap();
        assert!(t
            .marketing_threads()
            .values()
            .all(|s| *s == ListingState::Pending));
        assert_eq!(actions.len(), 3);
    }

    #[test]
    fn startup_activates_direct_listings_only() {
        let (mut t, actions) = start_selling_thread(
            outcome(),
            EngagementMode::SingleActorWithBrokerProposal,
            ProtocolConfig::default(),
        )
        .unwrap();
        assert_eq!(t.marketing_threads()["newspaper"], ListingState::Active);
        assert_eq!(t.marketing_threads()["mls"], ListingState::Pending);
        assert_eq!(actions.len(), 5);
        t.activate_pending_listings();
        assert_eq!(t.marketing_threads()["mls"], ListingState::Active);
    }

    #[test]
    fn sale_in_one_thread_terminates_siblings() {
        let mk = || {
            start_selling_thread(
                outcome(),
                EngagementMode::SingleActorWithBrokerProposal,
                ProtocolConfig::default(),
            )
            .unwrap()
            .0
        };
        let mut events = vec![bid(5, 1, "b1", 250_000)];
        events[0].thread = 1;
        let r = run_selling_threads(
            vec![mk(), mk()],
            &mut owner(OwnerPolicy::ThresholdOnly),
            events,
            100,
        )
        .unwrap();
        assert_eq!(
            r.threads[0].phase(),
            &Phase::Terminated(TerminationReason::SiblingSold)
        );
        assert!(matches!(r.threads[1].phase(), Phase::Sold(_)));
        assert!(r.trace.to_string().contains(" thread=1"));
        let seqs: Vec<usize> = r.trace.records.iter().map(|r| r.seq).collect();
        assert_eq!(seqs, (1..=seqs.len()).collect::<Vec<_>>());
    }

    #[test]
    fn events_after_sale_are_refused() {
        let (mut t, _) = start_selling_thread(
            outcome(),
            EngagementMode::SingleActorWithBrokerProposal,
            ProtocolConfig::default(),
        )
        .unwrap();
        let mut own = owner(OwnerPolicy::AlwaysAccept);
        let b = ProtocolEvent::BidReceived(Bid {
            buyer: "b1".into(),
            price: Money(260_000),
            valid_until: 0,
            conditions: vec![],
        });
        t.handle_event(&b, &mut own).unwrap();
        assert!(matches!(
            t.handle_event(&b, &mut own),
            Err(ProtocolError::EventInTerminalPhase { .. })
        ));
    }

    #[test]
    fn stale_bid_is_an_error() {
        let (mut t, _) = start_selling_thread(
            outcome(),
            EngagementMode::SingleActorWithBrokerProposal,
            ProtocolConfig::default(),
        )
        .unwrap();
        let mut own = owner(OwnerPolicy::AlwaysAccept);
        t.handle_event(&ProtocolEvent::Tick { days: 3 }, &mut own).unwrap();
        let b = ProtocolEvent::BidReceived(Bid {
            buyer: "b1".into(),
            price: Money(260_000),
            valid_until: 2,
            conditions: vec![],
        });
        assert!(matches!(
            t.handle_event(&b, &mut own),
            Err(ProtocolError::StaleBid { .. })
        ));
    }

    #[test]
    fn program_policy_reads_facts() {
        let p = OwnerPolicy::program(&"+q.eligible; !".parse().unwrap()).unwrap();
        let mut ctx = OwnerContext::default();
        assert!(!p.reply(method::ACCEPT_BID, &ctx).value);
        ctx.facts.insert("eligible".into());
        let reply = p.reply(method::ACCEPT_BID, &ctx);
        assert!(reply.value);
        assert_eq!(reply.state.calls, 1);
        assert_eq!(reply.attachment.unwrap().body, "BidAcceptance");
        assert!(matches!(
            OwnerPolicy::program(&"+x.eligible; !".parse().unwrap()),
            Err(KernelError::UnservedFocus(_))
        ));
    }

    #[test]
    fn simultaneous_events_follow_rank_then_thread_then_id() {
        let mut ev = vec![
            TimedEvent::new(1, 9, ProtocolEvent::Tick { days: 1 }),
            bid(1, 2, "b", 1),
            TimedEvent::new(1, 1, ProtocolEvent::ProspectArrived { prospect: "p".into() }),
            bid(0, 3, "a", 1),
        ];
        order_events(&mut ev);
        let ids: Vec<u64> = ev.iter().map(|e| e.id).collect();
        assert_eq!(ids, [3, 1, 2, 9]);
    }
}
