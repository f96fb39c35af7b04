use std::collections::BTreeMap;
use std::path::PathBuf;

use petsynth_core::data::{load_dataset, manifest_path, write_f32};
use petsynth_core::metrics::{error_map, evaluate_pair, MetricsReport};
use serde_json::json;

use super::{init_logging, write_json};
use crate::error::{CliError, CliResult};
use crate::images::write_gray_png;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset directory holding synthesized PET (as written by `sample`).
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory holding the reference PET.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Report path; defaults to `<pred>/metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write signed error maps (`.f32`) and absolute-error PNGs here.
    #[arg(long)]
    error_maps: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    data_range: f64,
}

pub fn run(args: Args, log_level: Option<&str>) -> CliResult<()> {
    init_logging(log_level, "info");
    if !(args.data_range > 0.0) {
        return Err(CliError::usage(format!("--data-range must be positive, got {}", args.data_range)));
    }
    for dir in [&args.pred, &args.reference] {
        if !manifest_path(dir).is_file() {
            return Err(CliError::usage(format!("dataset not found: {}", dir.display())));
        }
    }
    let pred = load_dataset(&args.pred)?;
    let reference = load_dataset(&args.reference)?;
    if pred.slices.is_empty() {
        return Err(CliError::usage(format!("{} holds no samples", args.pred.display())));
    }
    let by_id: BTreeMap<&str, _> = reference.slices.iter().map(|s| (s.id.as_str(), s)).collect();
    let missing: Vec<&str> = pred
        .slices
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::usage(format!(
            "{} predicted ids have no reference in {}: {}",
            missing.len(),
            args.reference.display(),
            missing.join(", ")
        )));
    }
    if let Some(dir) = &args.error_maps {
        std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    }

    let mut per_sample = Vec::with_capacity(pred.slices.len());
    for p in &pred.slices {
        let r = by_id[p.id.as_str()];
        per_sample.push(evaluate_pair(&p.id, p.pet.view(), r.pet.view(), args.data_range)?);
        if let Some(dir) = &args.error_maps {
            let signed = error_map(p.pet.view(), r.pet.view(), false)?.mapv(|v| v as f32);
            write_f32(&dir.join(format!("{}_error.f32", p.id)), &signed)?;
            let abs = signed.mapv(f32::abs);
            write_gray_png(&dir.join(format!("{}_error.png", p.id)), &abs, 0.0, args.data_range as f32)?;
        }
    }
    let config = json!({
        "pred": args.pred,
        "ref": args.reference,
        "data_range": args.data_range,
    });
    let report = MetricsReport::new(per_sample, args.data_range, config);
    let out = args.out.clone().unwrap_or_else(|| args.pred.join("metrics.json"));
    write_json(&out, &report)?;
    let a = &report.aggregate;
    println!(
        "n={} psnr {:.3} +/- {:.3} dB, ssim {:.4} +/- {:.4}; report {}",
        a.n,
        a.psnr_mean,
        a.psnr_std,
        a.ssim_mean,
        a.ssim_std,
        out.display()
    );
    Ok(())
}
