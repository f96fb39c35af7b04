use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use petsynth_core::data::{load_dataset, manifest_path};
use petsynth_core::score_model::{
    build_unet, load_checkpoint, save_checkpoint, CheckpointMeta, ScoreNet, Weights, CHECKPOINT_FORMAT,
};
use petsynth_core::training::{train, Adam, TrainConfig, TrainEvent};
use petsynth_core::DType;

use super::init_logging;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Directory of the final checkpoint inside the output directory.
pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const LOSS_LOG: &str = "loss.jsonl";

#[derive(Debug, clap::Args)]
pub struct Args {
    /// JSON run configuration; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or manifest (overrides data.dataset).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory (overrides io.output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total optimizer steps, counted from step 0 even when resuming.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Probability of zeroing the MRI channel of a training pair.
    #[arg(long)]
    condition_dropout: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn apply_overrides(cfg: &mut RunConfig, args: &Args) {
    if let Some(d) = &args.dataset {
        cfg.data.dataset = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.io.output_dir = o.clone();
    }
    let t = &mut cfg.train;
    t.total_steps = args.steps.unwrap_or(t.total_steps);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = args.lr.unwrap_or(t.learning_rate);
    t.seed = args.seed.unwrap_or(t.seed);
    t.condition_dropout = args.condition_dropout.unwrap_or(t.condition_dropout);
    t.checkpoint_every = args.checkpoint_every.unwrap_or(t.checkpoint_every);
}

fn usage_io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::usage(format!("cannot write {}: {e}", path.display()))
}

pub fn run(args: Args, log_level: Option<&str>) -> CliResult<()> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    apply_overrides(&mut cfg, &args);
    init_logging(log_level, &cfg.io.log_level);
    cfg.validate()?;

    let dataset_path = cfg
        .data
        .dataset
        .clone()
        .ok_or_else(|| CliError::usage("no dataset given; set data.dataset or pass --dataset"))?;
    if !manifest_path(&dataset_path).is_file() {
        return Err(CliError::usage(format!("dataset not found: {}", dataset_path.display())));
    }
    let dataset = load_dataset(&dataset_path)?;
    let train_set = dataset.train();
    log::info!("loaded {} training pairs from {}", train_set.len(), dataset_path.display());

    let (mut params, mut optimizer) = match &args.resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir, Some((&cfg.model, &cfg.schedule)))?;
            let state = ckpt.optimizer.ok_or_else(|| {
                CliError::usage(format!("checkpoint {} has no optimizer state to resume from", dir.display()))
            })?;
            if ckpt.meta.normalization.as_ref() != Some(&dataset.manifest.normalization) {
                log::warn!("dataset normalization differs from the one recorded in the checkpoint");
            }
            log::info!("resuming from step {}", ckpt.params.step_count);
            (ckpt.params, Adam::new(cfg.train.learning_rate).with_state(state))
        }
        None => (build_unet(&cfg.model, cfg.train.seed)?, Adam::new(cfg.train.learning_rate)),
    };

    let out = cfg.io.output_dir.clone();
    fs::create_dir_all(&out).map_err(usage_io(&out))?;
    cfg.write(&out.join("config.json"))?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.to_string(),
        unet: cfg.model.clone(),
        schedule: cfg.schedule,
        ema_decay: cfg.train.ema_decay,
        step_count: params.step_count,
        normalization: Some(dataset.manifest.normalization.clone()),
        dtype: "f32".to_string(),
    };

    let start = params.step_count;
    if start >= cfg.train.total_steps {
        println!(
            "checkpoint is already at step {start}; train.total_steps is {}, nothing to do",
            cfg.train.total_steps
        );
        return Ok(());
    }
    let run_cfg = TrainConfig {
        total_steps: cfg.train.total_steps - start,
        ..cfg.train.clone()
    };

    let log_path = out.join(LOSS_LOG);
    let log_file: File = if args.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(usage_io(&log_path))?;
    let mut loss_log = BufWriter::new(log_file);

    let model = ScoreNet::from_params(&cfg.model, &cfg.schedule, &params, Weights::Live)?;
    let clock = Instant::now();
    let log_every = cfg.io.log_every;
    let (mut window_sum, mut window_len) = (0.0, 0u64);
    let mut first_loss = None;
    let history = train(
        &model,
        &mut params,
        &mut optimizer,
        &train_set,
        &cfg.schedule,
        &run_cfg,
        DType::F32,
        |event| {
            match event {
                TrainEvent::Step(record) => {
                    first_loss.get_or_insert(record.loss);
                    let line = serde_json::to_string(record).expect("record serializes");
                    writeln!(loss_log, "{line}").map_err(|e| petsynth_core::Error::Io {
                        path: log_path.clone(),
                        source: e,
                    })?;
                    window_sum += record.loss;
                    window_len += 1;
                    if record.step % log_every == 0 {
                        log::info!(
                            "step {} loss {:.5} ({:.1}s)",
                            record.step,
                            window_sum / window_len as f64,
                            clock.elapsed().as_secs_f64()
                        );
                        (window_sum, window_len) = (0.0, 0);
                    }
                }
                TrainEvent::Checkpoint { params, optimizer } => {
                    let dir = out.join("checkpoints").join(format!("step_{:06}", params.step_count));
                    save_checkpoint(&dir, &meta, params, Some(&optimizer.state))?;
                    log::info!("saved {}", dir.display());
                }
            }
            Ok(())
        },
    )?;
    loss_log.flush().map_err(usage_io(&log_path))?;

    let final_dir = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_dir, &meta, &params, Some(&optimizer.state))?;
    let last = history.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained steps {}..{} in {:.1}s: loss {:.5} -> {:.5}; checkpoint {}",
        start + 1,
        params.step_count,
        clock.elapsed().as_secs_f64(),
        first_loss.unwrap_or(f64::NAN),
        last,
        final_dir.display()
    );
    Ok(())
}
