//! Scenario files: loading, normalization and conversion into a run setup.

use std::fs;
use std::path::Path;

use oodt_core::decision::{
    build_sts_outcome, BrokerData, DecisionOutcome, Listing, MarketView, ObjectPresentation,
    OutcomeDraft, OutcomeError, Reasons,
};
use oodt_core::kernel::{InstructionSequence, KernelError};
use oodt_core::market::{MarketScenario, PreferredBuyer, Setup, WtpDistribution};
use oodt_core::price::{Days, PriceSheet, DEFAULT_BUBBLE_FACTOR, DEFAULT_CONFLICT_DISPERSION};
use oodt_core::protocol::{EngagementMode, OwnerPolicy, ProtocolConfig};
use serde::{Deserialize, Serialize};

pub const SPEC_VERSION: &str = "1.0";

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported spec_version `{0}`, expected `{SPEC_VERSION}`")]
    Version(String),
}

impl From<serde_json::Error> for LoadError {
    fn from(e: serde_json::Error) -> Self {
        LoadError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// The non-price sections of the startup outcome. Missing sections are
/// reported by validation, not by the parser.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSection {
    #[serde(default)]
    pub object_presentation: Option<ObjectPresentation>,
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinPolicy {
    AlwaysAccept,
    AlwaysReject,
    ThresholdOnly,
}

/// `{"builtin": "threshold_only"}` or `{"program": "+q.eligible; !"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Builtin(BuiltinPolicy),
    Program(String),
}

impl PolicySpec {
    pub fn to_policy(&self) -> Result<OwnerPolicy, KernelError> {
        Ok(match self {
            PolicySpec::Builtin(BuiltinPolicy::AlwaysAccept) => OwnerPolicy::AlwaysAccept,
            PolicySpec::Builtin(BuiltinPolicy::AlwaysReject) => OwnerPolicy::AlwaysReject,
            PolicySpec::Builtin(BuiltinPolicy::ThresholdOnly) => OwnerPolicy::ThresholdOnly,
            PolicySpec::Program(text) => OwnerPolicy::program(&InstructionSequence::parse(text)?)?,
        })
    }
}

fn default_true_rate() -> f64 {
    1.0
}
fn default_bid_fraction() -> f64 {
    oodt_core::market::DEFAULT_BID_FRACTION
}
fn default_condition_delay() -> Days {
    oodt_core::market::DEFAULT_CONDITION_DELAY
}

/// The market section. The seed lives with the run controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub arrival_rate: f64,
    pub wtp_distribution: WtpDistribution,
    #[serde(default = "default_bid_fraction")]
    pub bid_fraction: f64,
    #[serde(default)]
    pub preferred_buyers: Vec<PreferredBuyer>,
    pub horizon: Days,
    #[serde(default)]
    pub bubble_mode: bool,
    #[serde(default)]
    pub conditional_bid_rate: f64,
    #[serde(default = "default_true_rate")]
    pub condition_success_rate: f64,
    #[serde(default = "default_condition_delay")]
    pub condition_delay: Days,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunControls {
    pub n_runs: u64,
    pub seed: u64,
    pub auto_accept: bool,
    pub silent_expiry: bool,
    pub bubble_factor: f64,
    /// Dispersion bound for rule-based estimates.
    pub tau: f64,
    pub option_horizon: Days,
    pub option_premium_rate: f64,
    pub escape_window: Days,
    pub srt_extension: Days,
    pub lp_adjust_rate: f64,
}

impl Default for RunControls {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            n_runs: 1000,
            seed: 0,
            auto_accept: p.auto_accept,
            silent_expiry: p.silent_expiry,
            bubble_factor: DEFAULT_BUBBLE_FACTOR,
            tau: DEFAULT_CONFLICT_DISPERSION,
            option_horizon: p.option_horizon,
            option_premium_rate: p.option_premium_bps as f64 / 10_000.0,
            escape_window: p.escape_window,
            srt_extension: p.srt_extension,
            lp_adjust_rate: p.lp_adjust_bps as f64 / 10_000.0,
        }
    }
}

fn rate_to_bps(rate: f64) -> u32 {
    (rate * 10_000.0).round().clamp(0.0, u32::MAX as f64) as u32
}

impl RunControls {
    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            auto_accept: self.auto_accept,
            silent_expiry: self.silent_expiry,
            bubble_factor: self.bubble_factor,
            option_horizon: self.option_horizon,
            option_premium_bps: rate_to_bps(self.option_premium_rate),
            escape_window: self.escape_window,
            srt_extension: self.srt_extension,
            lp_adjust_bps: rate_to_bps(self.lp_adjust_rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub spec_version: String,
    pub price_sheet: PriceSheet,
    #[serde(default)]
    pub outcome: OutcomeSection,
    pub engagement_mode: EngagementMode,
    pub owner_policy: PolicySpec,
    pub market: MarketSection,
    #[serde(default)]
    pub run: RunControls,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, LoadError> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        if file.spec_version != SPEC_VERSION {
            return Err(LoadError::Version(file.spec_version));
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Pretty JSON with every default written out.
    pub fn normalized(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.run.seed = seed;
        }
        self
    }

    pub fn draft(&self) -> OutcomeDraft {
        let o = self.outcome.clone();
        OutcomeDraft {
            object_presentation: o.object_presentation,
            price_settings: Some(self.price_sheet.clone()),
            broker: o.broker,
            marketing_method: o.marketing_method,
            reasons: o.reasons,
            market_view: o.market_view,
            taken_by: o.taken_by,
            taken_at: o.taken_at,
        }
    }

    pub fn outcome(&self) -> Result<DecisionOutcome, OutcomeError> {
        build_sts_outcome(self.draft())
    }

    pub fn market(&self) -> MarketScenario {
        let m = self.market.clone();
        MarketScenario {
            arrival_rate: m.arrival_rate,
            wtp_distribution: m.wtp_distribution,
            bid_fraction: m.bid_fraction,
            preferred_buyers: m.preferred_buyers,
            horizon: m.horizon,
            seed: self.run.seed,
            bubble_mode: m.bubble_mode,
            conditional_bid_rate: m.conditional_bid_rate,
            condition_success_rate: m.condition_success_rate,
            condition_delay: m.condition_delay,
        }
    }

    pub fn setup(&self) -> Result<Setup, SetupError> {
        Ok(Setup {
            outcome: self.outcome()?,
            mode: self.engagement_mode,
            config: self.run.protocol_config(),
            policy: self.owner_policy.to_policy()?,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error(transparent)]
    Outcome(#[from] OutcomeError),
    #[error("owner policy: {0}")]
    Policy(#[from] KernelError),
}
