use std::path::PathBuf;

use petsynth_core::checks::{run_check, CheckOptions, CHECK_NAMES};

use super::{init_logging, write_json};
use crate::error::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Corrector signal-to-noise ratio used by the sampling checks.
    #[arg(long, default_value_t = CheckOptions::default().snr)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the check names and exit.
    #[arg(long)]
    list: bool,
    /// Run only the named checks (repeatable).
    #[arg(long)]
    only: Vec<String>,
    /// Also write the outcomes as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn run(args: Args, log_level: Option<&str>) -> CliResult<()> {
    init_logging(log_level, "warn");
    if args.list {
        for name in CHECK_NAMES {
            println!("{name}");
        }
        return Ok(());
    }
    let names: Vec<&str> = if args.only.is_empty() {
        CHECK_NAMES.to_vec()
    } else {
        args.only.iter().map(String::as_str).collect()
    };
    if let Some(bad) = names.iter().find(|n| !CHECK_NAMES.contains(n)) {
        return Err(CliError::usage(format!(
            "unknown check `{bad}`; known checks: {}",
            CHECK_NAMES.join(", ")
        )));
    }
    let opts = CheckOptions {
        snr: args.snr,
        seed: args.seed,
    };
    let mut outcomes = Vec::with_capacity(names.len());
    for name in names {
        let o = run_check(name, &opts)?;
        println!(
            "{} {} ({:.1}s): {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        );
        outcomes.push(o);
    }
    if let Some(path) = &args.json {
        write_json(path, &outcomes)?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError::failure(format!("failed checks: {}", failed.join(", "))))
    }
}
