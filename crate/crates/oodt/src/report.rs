//! Result records and the files they are written to.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use oodt_core::market::{SimulationResult, SrcEstimate, RNG_ALGORITHM};
use oodt_core::price::{Days, Money};
use serde::Serialize;

use crate::scenario::SPEC_VERSION;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const TRACE_FILE: &str = "trace.txt";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub spec_version: &'static str,
    pub seed: u64,
    pub rng: &'static str,
    pub n_runs: u64,
    pub successes: u64,
    pub sold: u64,
    pub p_hat: f64,
    pub ci95: (f64, f64),
    /// Sale prices, bucketed by `price_bucket` minor units; keys are bucket
    /// lower bounds.
    pub price_bucket: i64,
    pub price_histogram: BTreeMap<i64, u64>,
    pub tom_bucket: Days,
    pub tom_histogram: BTreeMap<Days, u64>,
}

pub const TOM_BUCKET: Days = 10;

impl Summary {
    pub fn new(seed: u64, results: &[SimulationResult], price_bucket: Money) -> Self {
        let est = SrcEstimate::from_results(results);
        let bucket = price_bucket.0.max(1);
        let mut price_histogram = BTreeMap::new();
        let mut tom_histogram = BTreeMap::new();
        for r in results {
            if let Some(p) = r.price {
                *price_histogram.entry(p.0.div_euclid(bucket) * bucket).or_default() += 1;
                *tom_histogram.entry(r.tom / TOM_BUCKET * TOM_BUCKET).or_default() += 1;
            }
        }
        Self {
            spec_version: SPEC_VERSION,
            seed,
            rng: RNG_ALGORITHM,
            n_runs: est.n_runs,
            successes: est.successes,
            sold: results.iter().filter(|r| r.sold).count() as u64,
            p_hat: est.p_hat,
            ci95: est.ci95,
            price_bucket: bucket,
            price_histogram,
            tom_bucket: TOM_BUCKET,
            tom_histogram,
        }
    }

    pub fn estimate(&self) -> SrcEstimate {
        SrcEstimate::from_counts(self.successes, self.n_runs)
    }
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record<'a> {
    Run(&'a SimulationResult),
    Summary(&'a Summary),
}

/// Writes a results file: one line per run, then the summary line.
pub fn write_results(
    path: &Path,
    results: &[SimulationResult],
    summary: &Summary,
) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut out, &Record::Run(r))?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut out, &Record::Summary(summary))?;
    out.write_all(b"\n")?;
    out.flush()
}

pub fn write_text(path: &Path, text: &str) -> io::Result<()> {
    fs::write(path, text)
}

pub fn ensure_dir(dir: &Path) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}
