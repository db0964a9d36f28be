use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use oodt::commands::{self, Options};
use oodt_core::decision::Audience;

#[derive(Parser)]
#[command(name = "oodt", version, about = "Selling-thread simulator")]
struct Cli {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "OODT_OUT_DIR", default_value = ".")]
    out: PathBuf,
    /// Print nothing on success.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AudienceArg {
    #[value(name = "self")]
    Seller,
    InnerCircle,
    Broker,
    Listing,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Check the price sheet, the outcome and the rest of a scenario.
    Validate { scenario: PathBuf },
    /// Run the scenario once and write its result record and trace.
    Run { scenario: PathBuf },
    /// Run the scenario many times and estimate the selling certainty.
    Batch {
        scenario: PathBuf,
        #[arg(long)]
        runs: Option<u64>,
        /// Also write one trace file per run.
        #[arg(long)]
        traces: bool,
    },
    /// Write the outcome fragment each audience receives.
    Fragment {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        audience: AudienceArg,
    },
    /// Suggest the highest fsrp that still reaches a target certainty.
    Calibrate {
        scenario: PathBuf,
        #[arg(long)]
        target_src: Option<f64>,
        #[arg(long)]
        runs: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = Options {
        out_dir: cli.out,
        seed: cli.seed,
    };
    let out = match &cli.command {
        Command::Validate { scenario } => commands::validate(scenario, &opts),
        Command::Run { scenario } => commands::run(scenario, &opts),
        Command::Batch {
            scenario,
            runs,
            traces,
        } => commands::batch(scenario, &opts, *runs, *traces),
        Command::Fragment { scenario, audience } => {
            let audiences = match audience {
                AudienceArg::Seller => vec![Audience::Seller],
                AudienceArg::InnerCircle => vec![Audience::InnerCircle],
                AudienceArg::Broker => vec![Audience::Broker],
                AudienceArg::Listing => vec![Audience::ListingService],
                AudienceArg::All => Audience::ALL.to_vec(),
            };
            commands::fragment(scenario, &opts, &audiences)
        }
        Command::Calibrate {
            scenario,
            target_src,
            runs,
        } => commands::calibrate(scenario, &opts, *target_src, *runs),
    };
    match out.exit {
        oodt::Exit::Ok if cli.quiet => {}
        oodt::Exit::Ok | oodt::Exit::Invalid => print!("{}", out.text),
        _ => eprint!("{}", out.text),
    }
    ExitCode::from(out.exit.code())
}
