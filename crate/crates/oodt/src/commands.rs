//! The five commands. Each returns an exit status and the text to print.

use std::path::{Path, PathBuf};

use oodt_core::decision::{fragment_for, Audience, OutcomeProblem};
use oodt_core::market::{run_scenario, MarketScenario, Setup, SimulationRun, SrcEstimate};
use oodt_core::price::{
    risk_report, validate_price_sheet, Money, PriceSheet, RiskContext, RiskFlag, Severity,
};
use oodt_core::protocol::{start_selling_thread, ProtocolError};
use rayon::prelude::*;
use serde::Serialize;

use crate::report::{self, Summary, RESULTS_FILE, TRACE_FILE};
use crate::scenario::{LoadError, ScenarioFile, SetupError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Invalid = 1,
    Parse = 2,
    Runtime = 3,
}

impl Exit {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub exit: Exit,
    pub text: String,
    pub files: Vec<PathBuf>,
}

impl Output {
    fn text(exit: Exit, text: impl Into<String>) -> Self {
        Self {
            exit,
            text: text.into(),
            files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

fn load(path: &Path, opts: &Options) -> Result<ScenarioFile, Output> {
    ScenarioFile::load(path)
        .map(|f| f.with_seed(opts.seed))
        .map_err(|e| match e {
            LoadError::Io { .. } => Output::text(Exit::Runtime, e.to_string()),
            _ => Output::text(Exit::Parse, e.to_string()),
        })
}

fn setup(file: &ScenarioFile) -> Result<(MarketScenario, Setup), Output> {
    let market = file.market();
    if let Err(e) = market.validate() {
        return Err(Output::text(Exit::Invalid, format!("error: market: {e}")));
    }
    match file.setup() {
        Ok(s) => Ok((market, s)),
        Err(e @ SetupError::Outcome(_)) | Err(e @ SetupError::Policy(_)) => {
            Err(Output::text(Exit::Invalid, format!("error: {e}; run `validate` for details")))
        }
    }
}

fn write_failed(e: std::io::Error) -> Output {
    Output::text(Exit::Runtime, format!("cannot write output: {e}"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    pub risk_flags: Vec<RiskFlag>,
}

impl ValidationSummary {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.errors {
            s.push_str(&format!("error: {e}\n"));
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        for r in &self.risk_flags {
            s.push_str(&format!("risk: {r:?}\n"));
        }
        s.push_str(if self.is_valid() { "valid\n" } else { "invalid\n" });
        s
    }
}

/// Every check a scenario must pass before it can run.
pub fn check(file: &ScenarioFile) -> ValidationSummary {
    let mut v = ValidationSummary::default();
    let report = validate_price_sheet(&file.price_sheet);
    for issue in &report.issues {
        let line = format!("{:?}: {}", issue.constraint, issue.constraint.describe());
        match issue.severity {
            Severity::Error => v.errors.push(line),
            Severity::Warning => v.warnings.push(line),
        }
    }
    match file.outcome() {
        Ok(outcome) => {
            if let Err(e) = start_selling_thread(outcome, file.engagement_mode, file.run.protocol_config())
            {
                v.errors.push(format!("EngagementMode: {e}"));
            }
        }
        Err(e) => {
            for p in &e.problems {
                match p {
                    // Already listed constraint by constraint.
                    OutcomeProblem::InvalidPriceSheet(_) => {}
                    OutcomeProblem::MissingSection(s) => v.errors.push(format!("MissingSection: {s}")),
                    OutcomeProblem::InvalidReasons(r) => v.errors.push(format!("InvalidReasons: {r}")),
                }
            }
        }
    }
    if let Err(e) = file.owner_policy.to_policy() {
        v.errors.push(format!("OwnerPolicy: {e}"));
    }
    if let Err(e) = file.market().validate() {
        v.errors.push(format!("Market: {e}"));
    }
    let ctx = RiskContext {
        preferred_wtp: file.market.preferred_buyers.iter().map(|p| p.wtp).collect(),
    };
    v.risk_flags = risk_report(&file.price_sheet, &ctx);
    v
}

pub fn validate(path: &Path, opts: &Options) -> Output {
    let file = match load(path, opts) {
        Ok(f) => f,
        Err(o) => return o,
    };
    let v = check(&file);
    Output::text(if v.is_valid() { Exit::Ok } else { Exit::Invalid }, v.render())
}

fn runtime(e: impl std::fmt::Display) -> Output {
    Output::text(Exit::Runtime, format!("run failed: {e}"))
}

fn price_bucket(ps: &PriceSheet) -> Money {
    Money(((ps.lp.0 - ps.fsrp.0) / 10).max(1))
}

/// Runs the scenario once, as run 0 of its seed, and writes the result
/// record and the trace.
pub fn run(path: &Path, opts: &Options) -> Output {
    let file = match load(path, opts) {
        Ok(f) => f,
        Err(o) => return o,
    };
    let (market, setup) = match setup(&file) {
        Ok(s) => s,
        Err(o) => return o,
    };
    let SimulationRun { result, trace } = match run_scenario(&market, &setup, 0) {
        Ok(r) => r,
        Err(e) => return runtime(e),
    };
    let summary = Summary::new(market.seed, std::slice::from_ref(&result), price_bucket(&file.price_sheet));
    let dir = match report::ensure_dir(&opts.out_dir) {
        Ok(d) => d,
        Err(e) => return write_failed(e),
    };
    let results = dir.join(RESULTS_FILE);
    let trace_path = dir.join(TRACE_FILE);
    if let Err(e) = report::write_results(&results, std::slice::from_ref(&result), &summary)
        .and_then(|_| report::write_text(&trace_path, &trace.to_string()))
    {
        return write_failed(e);
    }
    let text = match (&result.price, &result.buyer) {
        (Some(p), Some(b)) => format!("sold to {b} at {p} after {} days\n", result.tom),
        _ => format!("not sold after {} days\n", result.tom),
    };
    Output {
        exit: Exit::Ok,
        text,
        files: vec![results, trace_path],
    }
}

/// Runs `0..n` in parallel; results come back in run order.
pub fn simulate_batch(
    market: &MarketScenario,
    setup: &Setup,
    n: u64,
) -> Result<Vec<SimulationRun>, ProtocolError> {
    (0..n)
        .into_par_iter()
        .map(|run| run_scenario(market, setup, run))
        .collect()
}

pub fn batch(path: &Path, opts: &Options, runs: Option<u64>, traces: bool) -> Output {
    let file = match load(path, opts) {
        Ok(f) => f,
        Err(o) => return o,
    };
    let (market, setup) = match setup(&file) {
        Ok(s) => s,
        Err(o) => return o,
    };
    let n = runs.unwrap_or(file.run.n_runs);
    if n == 0 {
        return Output::text(Exit::Invalid, "error: at least one run is required");
    }
    let done = match simulate_batch(&market, &setup, n) {
        Ok(r) => r,
        Err(e) => return runtime(e),
    };
    let results: Vec<_> = done.iter().map(|r| r.result.clone()).collect();
    let summary = Summary::new(market.seed, &results, price_bucket(&file.price_sheet));
    let dir = match report::ensure_dir(&opts.out_dir) {
        Ok(d) => d,
        Err(e) => return write_failed(e),
    };
    let results_path = dir.join(RESULTS_FILE);
    if let Err(e) = report::write_results(&results_path, &results, &summary) {
        return write_failed(e);
    }
    let mut files = vec![results_path];
    if traces {
        let tdir = dir.join("traces");
        if let Err(e) = report::ensure_dir(&tdir) {
            return write_failed(e);
        }
        for r in &done {
            let p = tdir.join(format!("run-{:06}.txt", r.result.run));
            if let Err(e) = report::write_text(&p, &r.trace.to_string()) {
                return write_failed(e);
            }
            files.push(p);
        }
    }
    let (lo, hi) = summary.ci95;
    Output {
        exit: Exit::Ok,
        text: format!(
            "runs={} successes={} p_hat={:.4} ci95=[{lo:.4}, {hi:.4}]\n",
            summary.n_runs, summary.successes, summary.p_hat
        ),
        files,
    }
}

pub fn fragment(path: &Path, opts: &Options, audiences: &[Audience]) -> Output {
    let file = match load(path, opts) {
        Ok(f) => f,
        Err(o) => return o,
    };
    let outcome = match file.outcome() {
        Ok(o) => o,
        Err(e) => return Output::text(Exit::Invalid, format!("error: {e}")),
    };
    let dir = match report::ensure_dir(&opts.out_dir) {
        Ok(d) => d,
        Err(e) => return write_failed(e),
    };
    let mut files = Vec::new();
    for &audience in audiences {
        let fragment = fragment_for(&outcome, audience);
        let mut json = serde_json::to_string_pretty(&fragment).expect("fragment serializes");
        json.push('\n');
        let p = dir.join(format!("fragment-{}.json", audience.name()));
        if let Err(e) = report::write_text(&p, &json) {
            return write_failed(e);
        }
        files.push(p);
    }
    let text = files
        .iter()
        .map(|p| format!("{}\n", p.display()))
        .collect::<String>();
    Output {
        exit: Exit::Ok,
        text,
        files,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Calibrated,
    /// Even the lowest admissible fsrp misses the target.
    NonAchievable,
    NonMonotoneEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub fsrp: Money,
    pub estimate: SrcEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub status: CalibrationStatus,
    pub target_src: f64,
    pub n_runs: u64,
    pub seed: u64,
    pub current_fsrp: Money,
    pub suggested_fsrp: Option<Money>,
    pub adjustment: Option<Money>,
    pub probes: Vec<Probe>,
}

pub const CALIBRATION_FILE: &str = "calibration.json";

/// Largest fsrp in `(icsrp, isrp]` whose estimated certainty reaches
/// `target`, by bisection. Every probe uses the same run seeds.
pub fn calibrate_fsrp(
    market: &MarketScenario,
    setup: &Setup,
    target: f64,
    n: u64,
) -> Result<Calibration, ProtocolError> {
    let ps = setup.outcome.price_settings().clone();
    let mut probes: Vec<Probe> = Vec::new();
    let estimate = |fsrp: Money, probes: &mut Vec<Probe>| -> Result<Option<SrcEstimate>, ProtocolError> {
        let sheet = PriceSheet { fsrp, ..ps.clone() };
        let Ok(outcome) = setup.outcome.with_price_settings(sheet) else {
            return Ok(None);
        };
        let s = Setup {
            outcome,
            ..setup.clone()
        };
        let runs = simulate_batch(market, &s, n)?;
        let est = SrcEstimate::from_results(runs.iter().map(|r| &r.result));
        probes.push(Probe {
            fsrp,
            estimate: est,
        });
        Ok(Some(est))
    };
    let reaches = |e: &SrcEstimate| e.p_hat >= target;
    let finish = |status, best: Option<Money>, probes: Vec<Probe>| Calibration {
        status,
        target_src: target,
        n_runs: n,
        seed: market.seed,
        current_fsrp: ps.fsrp,
        suggested_fsrp: best,
        adjustment: best.map(|b| b - ps.fsrp),
        probes,
    };

    let upper = ps.isrp;
    // fsrp must stay strictly below smv and above icsrp.
    let upper = if upper >= ps.smv { ps.smv - Money(1) } else { upper };
    let lower = ps.icsrp + Money(1);
    if upper < lower {
        return Ok(finish(CalibrationStatus::NonAchievable, None, probes));
    }
    if let Some(e) = estimate(upper, &mut probes)? {
        if reaches(&e) {
            return Ok(finish(CalibrationStatus::Calibrated, Some(upper), probes));
        }
    }
    match estimate(lower, &mut probes)? {
        Some(e) if reaches(&e) => {}
        _ => return Ok(finish(CalibrationStatus::NonAchievable, None, probes)),
    }
    let (mut lo, mut hi) = (lower, upper);
    while hi.0 - lo.0 > 1 {
        let mid = Money(lo.0 + (hi.0 - lo.0) / 2);
        let Some(e) = estimate(mid, &mut probes)? else {
            hi = mid;
            continue;
        };
        if reaches(&e) {
            lo = mid;
        } else {
            hi = mid;
        }
        if !is_monotone(&probes) {
            return Ok(finish(CalibrationStatus::NonMonotoneEstimate, None, probes));
        }
    }
    Ok(finish(CalibrationStatus::Calibrated, Some(lo), probes))
}

/// Estimates must not rise with fsrp by more than their combined
/// Monte-Carlo half-widths.
pub fn is_monotone(probes: &[Probe]) -> bool {
    let mut sorted: Vec<&Probe> = probes.iter().collect();
    sorted.sort_by_key(|p| p.fsrp);
    sorted.windows(2).all(|w| {
        let (a, b) = (&w[0].estimate, &w[1].estimate);
        b.p_hat <= a.p_hat + a.half_width() + b.half_width()
    })
}

pub fn calibrate(path: &Path, opts: &Options, target: Option<f64>, runs: Option<u64>) -> Output {
    let file = match load(path, opts) {
        Ok(f) => f,
        Err(o) => return o,
    };
    let (market, setup) = match setup(&file) {
        Ok(s) => s,
        Err(o) => return o,
    };
    let target = target.unwrap_or(file.price_sheet.src);
    if !(0.0..=1.0).contains(&target) {
        return Output::text(Exit::Invalid, format!("error: target {target} outside [0, 1]"));
    }
    let n = runs.unwrap_or(file.run.n_runs).max(1);
    let c = match calibrate_fsrp(&market, &setup, target, n) {
        Ok(c) => c,
        Err(e) => return runtime(e),
    };
    let dir = match report::ensure_dir(&opts.out_dir) {
        Ok(d) => d,
        Err(e) => return write_failed(e),
    };
    let p = dir.join(CALIBRATION_FILE);
    let mut json = serde_json::to_string_pretty(&c).expect("calibration serializes");
    json.push('\n');
    if let Err(e) = report::write_text(&p, &json) {
        return write_failed(e);
    }
    let (exit, text) = match (&c.status, c.suggested_fsrp) {
        (CalibrationStatus::Calibrated, Some(f)) => (
            Exit::Ok,
            format!(
                "suggested fsrp {f} (current {}, adjustment {})\n",
                c.current_fsrp,
                f - c.current_fsrp
            ),
        ),
        (CalibrationStatus::NonMonotoneEstimate, _) => (
            Exit::Runtime,
            "NonMonotoneEstimate: certainty rose with fsrp; bisection aborted\n".to_string(),
        ),
        _ => (
            Exit::Ok,
            format!("NonAchievable: no fsrp reaches certainty {target}\n"),
        ),
    };
    Output {
        exit,
        text,
        files: vec![p],
    }
}
