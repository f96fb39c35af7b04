use std::path::PathBuf;

use petsynth_core::data::{gen_phantom, split_ids, write_dataset, Normalization, PairedSlice, Split};

use super::{init_logging, prepare_output_dir};
use crate::error::CliResult;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Edge length in pixels; at least 16 and a multiple of 4.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of samples held out as the test split; 0 records no split.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

pub fn run(args: Args, log_level: Option<&str>) -> CliResult<()> {
    init_logging(log_level, "info");
    let slices = gen_phantom(args.count, args.size, args.seed)?;
    let ids: Vec<String> = slices.iter().map(|s| s.id.clone()).collect();
    let split = if args.test_fraction == 0.0 {
        Split::default()
    } else {
        split_ids(&ids, args.test_fraction, args.seed)?
    };
    // Bounds come from the training side only, so test intensities never leak into them.
    let fit_on: Vec<&PairedSlice> = if split.train.is_empty() {
        slices.iter().collect()
    } else {
        slices.iter().filter(|s| split.train.contains(&s.id)).collect()
    };
    let normalization = Normalization::fit_global(fit_on)?;
    prepare_output_dir(&args.out, args.force)?;
    let manifest = write_dataset(&args.out, &slices, normalization, split)?;
    println!(
        "wrote {} phantom pairs ({}x{}, seed {}) to {}: {} train / {} test",
        manifest.samples.len(),
        args.size,
        args.size,
        args.seed,
        args.out.display(),
        if manifest.split.train.is_empty() { manifest.samples.len() } else { manifest.split.train.len() },
        manifest.split.test.len()
    );
    Ok(())
}
