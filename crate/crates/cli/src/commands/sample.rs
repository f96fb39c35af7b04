use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use petsynth_core::data::{
    array_to_tensor, manifest_path, read_f32, tensor_to_array, write_dataset, DatasetManifest, Normalization,
    PairedSlice, SampleEntry, Split,
};
use petsynth_core::sampler::{pc_sample_observed, sample_unconditional_observed, StepTrace};
use petsynth_core::score_model::{load_checkpoint, read_meta, ScoreNet, Weights};
use petsynth_core::{DType, Device, Tensor};
use serde::Serialize;

use super::{init_logging, prepare_output_dir, write_json};
use crate::config::{RunConfig, SplitChoice};
use crate::error::{CliError, CliResult};
use crate::images::write_gray_png;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// JSON run configuration; model and schedule must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or manifest holding the MRI inputs (overrides data.dataset).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitChoice>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of noise levels N.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    corrector_steps: Option<usize>,
    /// Replace the MRI channel by zeros.
    #[arg(long)]
    unconditional: bool,
    /// Use the live weights instead of the EMA shadow.
    #[arg(long)]
    live: bool,
    /// Write per-level residual norms to trajectory.jsonl.
    #[arg(long)]
    trajectory: bool,
    /// Write PNG previews of the synthesized PET.
    #[arg(long)]
    png: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Sample only the first this many inputs of the split.
    #[arg(long)]
    limit: Option<usize>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    config: &'a RunConfig,
    checkpoint: &'a Path,
    checkpoint_step: u64,
    weights: &'static str,
    input: &'a Path,
    split: SplitChoice,
    ids: Vec<&'a str>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    first_item: usize,
    #[serde(flatten)]
    trace: &'a StepTrace,
}

fn select_entries(manifest: &DatasetManifest, split: SplitChoice) -> CliResult<Vec<SampleEntry>> {
    let ids: Option<&Vec<String>> = match split {
        SplitChoice::All => None,
        SplitChoice::Train if manifest.split.train.is_empty() && manifest.split.test.is_empty() => None,
        SplitChoice::Train => Some(&manifest.split.train),
        SplitChoice::Test => {
            if manifest.split.test.is_empty() {
                return Err(CliError::usage("dataset has no test split; pass --split all or --split train"));
            }
            Some(&manifest.split.test)
        }
    };
    Ok(match ids {
        None => manifest.samples.clone(),
        Some(ids) => manifest.samples.iter().filter(|e| ids.contains(&e.id)).cloned().collect(),
    })
}

/// Keeps only the normalization entries of the sampled ids.
fn restrict(normalization: &Normalization, entries: &[SampleEntry]) -> CliResult<Normalization> {
    Ok(match normalization {
        Normalization::PerSample { bounds } => Normalization::PerSample {
            bounds: entries
                .iter()
                .map(|e| {
                    bounds
                        .get(&e.id)
                        .map(|b| (e.id.clone(), *b))
                        .ok_or_else(|| CliError::usage(format!("no normalization bounds for `{}`", e.id)))
                })
                .collect::<CliResult<_>>()?,
        },
        other => other.clone(),
    })
}

fn build_config(args: &Args) -> CliResult<RunConfig> {
    let meta = read_meta(&args.checkpoint)?;
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut cfg = RunConfig {
                model: meta.unet.clone(),
                schedule: meta.schedule,
                ..RunConfig::default()
            };
            cfg.set_num_steps(meta.schedule.num_steps);
            cfg
        }
    };
    if let Some(n) = args.steps {
        cfg.set_num_steps(n);
    }
    let s = &mut cfg.sampler;
    s.core.seed = args.seed.unwrap_or(s.core.seed);
    s.core.snr = args.snr.unwrap_or(s.core.snr);
    s.core.corrector_steps = args.corrector_steps.unwrap_or(s.core.corrector_steps);
    s.batch_size = args.batch_size.unwrap_or(s.batch_size);
    if args.unconditional {
        s.core.conditional = false;
    }
    if args.live {
        s.use_ema = false;
    }
    if let Some(i) = &args.input {
        cfg.data.dataset = Some(i.clone());
    }
    if let Some(split) = args.split {
        cfg.data.sample_split = split;
    }
    cfg.io.output_dir = args.out.clone();
    Ok(cfg)
}

pub fn run(args: Args, log_level: Option<&str>) -> CliResult<()> {
    let cfg = build_config(&args)?;
    init_logging(log_level, &cfg.io.log_level);
    cfg.validate()?;
    let ckpt = load_checkpoint(&args.checkpoint, Some((&cfg.model, &cfg.schedule)))?;
    let weights = if cfg.sampler.use_ema { Weights::Ema } else { Weights::Live };
    let model = ScoreNet::from_params(&cfg.model, &cfg.schedule, &ckpt.params, weights)?;

    let input = cfg
        .data
        .dataset
        .clone()
        .ok_or_else(|| CliError::usage("no input given; set data.dataset or pass --input"))?;
    let manifest_file = manifest_path(&input);
    if !manifest_file.is_file() {
        return Err(CliError::usage(format!("input dataset not found: {}", input.display())));
    }
    let manifest = DatasetManifest::read(&manifest_file)?;
    let root = manifest_file.parent().map(Path::to_path_buf).unwrap_or_default();
    let split = cfg.data.sample_split;
    let mut entries = select_entries(&manifest, split)?;
    if let Some(n) = args.limit {
        entries.truncate(n);
    }
    if entries.is_empty() {
        return Err(CliError::usage("no inputs selected"));
    }
    if ckpt.meta.normalization.as_ref() != Some(&manifest.normalization) {
        log::warn!("input normalization differs from the training data recorded in the checkpoint");
    }
    prepare_output_dir(&args.out, args.force)?;

    // Only MRI files are read; PET files of the input are never touched.
    let mut raw_mri = Vec::with_capacity(entries.len());
    let mut norm_mri = Vec::with_capacity(entries.len());
    for e in &entries {
        let raw = read_f32(&root.join(&e.mri_path), e.height, e.width, &e.id)?;
        let norm = match manifest.normalization.bounds_for(&e.id)? {
            Some(b) => raw.mapv(|v| b.mri.forward(v)),
            None => raw.clone(),
        };
        raw_mri.push(raw);
        norm_mri.push(norm);
    }

    let mut trajectory = if args.trajectory {
        let path = args.out.join("trajectory.jsonl");
        let f = File::create(&path).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
        Some((path, BufWriter::new(f)))
    } else {
        None
    };
    let sampler_cfg = &cfg.sampler.core;
    let clock = Instant::now();
    let mut synthesized: Vec<Array2<f32>> = Vec::with_capacity(entries.len());
    let mut start = 0;
    while start < entries.len() {
        // A batch holds consecutive inputs of one shape.
        let shape = norm_mri[start].dim();
        let mut end = start + 1;
        while end < entries.len() && end - start < cfg.sampler.batch_size && norm_mri[end].dim() == shape {
            end += 1;
        }
        let mut observer = |t: &StepTrace| -> petsynth_core::Result<()> {
            if let Some((path, w)) = trajectory.as_mut() {
                let line = serde_json::to_string(&TraceLine { first_item: start, trace: t }).expect("serializes");
                writeln!(w, "{line}").map_err(|e| petsynth_core::Error::Io { path: path.clone(), source: e })?;
            }
            Ok(())
        };
        let out = if sampler_cfg.conditional {
            let mri = Tensor::stack(
                &norm_mri[start..end]
                    .iter()
                    .map(|a| array_to_tensor(a, DType::F32, &Device::Cpu))
                    .collect::<petsynth_core::Result<Vec<_>>>()?,
                0,
            )
            .map_err(petsynth_core::Error::from)?;
            pc_sample_observed(&model, &mri, &cfg.schedule, sampler_cfg, start as u64, &mut observer)?
        } else {
            sample_unconditional_observed(
                &model,
                &cfg.schedule,
                sampler_cfg,
                &[end - start, shape.0, shape.1],
                DType::F32,
                start as u64,
                &mut observer,
            )?
        };
        for k in 0..end - start {
            synthesized.push(tensor_to_array(&out.get(k).map_err(petsynth_core::Error::from)?)?);
        }
        log::info!("sampled {end}/{} ({:.1}s)", entries.len(), clock.elapsed().as_secs_f64());
        start = end;
    }
    if let Some((path, mut w)) = trajectory {
        w.flush().map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
    }

    let normalization = restrict(&manifest.normalization, &entries)?;
    let slices = entries
        .iter()
        .zip(raw_mri)
        .zip(&synthesized)
        .map(|((e, mri), pet)| {
            let pet = manifest.normalization.denormalize_pet(&e.id, pet)?;
            Ok(PairedSlice::new(e.id.clone(), mri, pet)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_dataset(&args.out, &slices, normalization, Split::default())?;
    if args.png {
        let dir = args.out.join("png");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
        for (e, pet) in entries.iter().zip(&synthesized) {
            write_gray_png(&dir.join(format!("{}_pet.png", e.id)), pet, 0.0, 1.0)?;
        }
    }
    let record = SampleRecord {
        config: &cfg,
        checkpoint: &args.checkpoint,
        checkpoint_step: ckpt.meta.step_count,
        weights: if cfg.sampler.use_ema { "ema" } else { "live" },
        input: &input,
        split,
        ids: entries.iter().map(|e| e.id.as_str()).collect(),
    };
    write_json(&args.out.join("sample_config.json"), &record)?;
    println!(
        "synthesized {} PET slices into {} ({}, {} weights, N={}, seed {}) in {:.1}s",
        entries.len(),
        args.out.display(),
        if sampler_cfg.conditional { "conditional" } else { "unconditional" },
        record.weights,
        cfg.schedule.num_steps,
        sampler_cfg.seed,
        clock.elapsed().as_secs_f64()
    );
    Ok(())
}
