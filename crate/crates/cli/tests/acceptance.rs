//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! The phantom end-to-end criterion trains the desk U-Net through the CLI. The
//! trained run is cached under the cargo target tmp dir and reused when its
//! configuration is unchanged; sampling and evaluation always rerun.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use petsynth_core::checks::{run_check, CheckOptions};
use petsynth_core::data::{gen_phantom, load_raw, write_dataset};
use petsynth_core::metrics::{psnr, ssim};
use petsynth_core::sampler::{corrector_step, langevin_step_size};
use petsynth_core::score_model::{load_checkpoint, read_meta, save_checkpoint, FnScore};
use petsynth_core::{Device, NoiseSchedule, Tensor};
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_petsynth");

struct Gate {
    results: Vec<(String, bool)>,
}

impl Gate {
    fn record(&mut self, id: &str, passed: bool, detail: &str) {
        println!("[{}] criterion {id}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.results.push((id.to_string(), passed));
    }
}

fn check(name: &str) -> (bool, String, f64) {
    match run_check(name, &CheckOptions::default()) {
        Ok(o) => (o.passed, o.detail, o.seconds),
        Err(e) => (false, format!("error: {e}"), 0.0),
    }
}

fn petsynth(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if out.status.success() {
        Ok(stdout)
    } else {
        Err(format!(
            "`petsynth {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn criterion_1(gate: &mut Gate) {
    let (ok, detail, secs) = check("unconditional_recovery");
    gate.record("1 analytic unconditional recovery", ok && secs < 60.0, &format!("{detail}; {secs:.1}s < 60s"));
}

fn criterion_2(gate: &mut Gate) {
    let (ok, detail, _) = check("conditional_identity");
    gate.record("2 conditional identity on Gaussians", ok, &detail);
}

fn criterion_3(gate: &mut Gate) {
    let mut all = true;
    let mut parts = Vec::new();
    for name in ["dsm_affine_slope", "dsm_oracle_loss", "dsm_zero_score"] {
        let (ok, detail, _) = check(name);
        all &= ok;
        parts.push(format!("{name}: {detail}"));
    }
    gate.record("3 DSM learns the score", all, &parts.join(" | "));
}

fn criterion_4(gate: &mut Gate) {
    let (ok, detail, _) = check("dsm_gradient_fd");
    gate.record("4 gradient correctness", ok, &detail);
}

fn criterion_7(gate: &mut Gate) {
    let (law_ok, law, _) = check("step_size_law");
    // The same law observed through a corrector step whose score equals its noise.
    let z = Tensor::from_vec((0..64).map(|k| ((k * 37 % 11) as f64) - 5.0).collect::<Vec<_>>(), (1, 8, 8), &Device::Cpu)
        .expect("tensor");
    let fixed = z.clone();
    let model = FnScore(move |_: &Tensor, _: &Tensor, _: &[f64]| Ok(fixed.clone()));
    let schedule = NoiseSchedule::new(0.01, 1.0, 10).expect("schedule");
    let eps = corrector_step(&model, &z.zeros_like().unwrap(), &z.zeros_like().unwrap(), 3, &schedule, 0.16, &z)
        .map(|(_, e)| e[0])
        .unwrap_or(f64::NAN);
    let base = langevin_step_size(0.16, 2.5, 4.0);
    let scaling_ok = [0.5, 2.0, 10.0]
        .iter()
        .all(|c| ((langevin_step_size(0.16, c * 2.5, 4.0) / base) - c * c).abs() <= 1e-12 * c * c);
    let ok = law_ok && (eps - 0.0512).abs() < 1e-15 && scaling_ok;
    gate.record(
        "7 corrector step-size law",
        ok,
        &format!("{law}; corrector step with s = z gives eps = {eps}; c^2 scaling holds: {scaling_ok}"),
    );
}

// Independent reference computations for criterion 6.

fn reference_psnr(a: ArrayView2<f32>, b: ArrayView2<f32>, range: f64) -> f64 {
    let n = a.len() as f64;
    let mse: f64 = a.iter().zip(b.iter()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n;
    10.0 * (range * range / mse).log10()
}

/// SSIM with an explicit 11x11 Gaussian window over every valid position.
fn reference_ssim(a: ArrayView2<f32>, b: ArrayView2<f32>, range: f64) -> f64 {
    let size = 11usize;
    let half = 5.0;
    let mut w = vec![vec![0.0f64; size]; size];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let (h, wd) = a.dim();
    let mut acc = 0.0;
    let mut count = 0.0;
    for r in 0..=h - size {
        for c in 0..=wd - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let k = w[i][j] / total;
                    let x = a[[r + i, c + j]] as f64;
                    let y = b[[r + i, c + j]] as f64;
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}

fn files_identical(a: &Path, b: &Path) -> Result<(), String> {
    let mut names: Vec<_> = fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    // The sampling record names its own output directory.
    names.retain(|n| n != "sample_config.json");
    for name in names {
        let (pa, pb) = (a.join(&name), b.join(&name));
        if pa.is_dir() {
            files_identical(&pa, &pb)?;
        } else if fs::read(&pa).map_err(|e| e.to_string())? != fs::read(&pb).map_err(|e| format!("{}: {e}", pb.display()))? {
            return Err(format!("{} differs", pb.display()));
        }
    }
    Ok(())
}

fn criterion_6(gate: &mut Gate, root: &Path) {
    let result = (|| -> Result<String, String> {
        let dir = root.join("determinism");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let data = dir.join("data");
        petsynth(&["gen-phantom", "--out", p(&data), "--count", "12", "--size", "16", "--seed", "5"])?;

        // Dataset round trip.
        let raw = load_raw(&data).map_err(|e| e.to_string())?;
        let copy = dir.join("data_copy");
        write_dataset(&copy, &raw.slices, raw.manifest.normalization.clone(), raw.manifest.split.clone())
            .map_err(|e| e.to_string())?;
        files_identical(&data, &copy)?;

        // Seeded training, twice, plus an interrupted-and-resumed run.
        let cfg = dir.join("tiny.json");
        let tiny = json!({
            "model": {"base_channels": 4, "channel_multipliers": [1, 2], "attention_levels": [1],
                      "groupnorm_groups": 2, "time_embedding_dim": 8},
            "schedule": {"sigma_max": 10.0, "num_steps": 8},
            "sampler": {"num_steps": 8},
            "train": {"batch_size": 4, "total_steps": 6, "checkpoint_every": 3, "learning_rate": 1e-3}
        });
        fs::write(&cfg, tiny.to_string()).map_err(|e| e.to_string())?;
        let run = |name: &str, extra: &[&str]| -> Result<PathBuf, String> {
            let out = dir.join(name);
            let mut args = vec!["train", "--config", p(&cfg), "--dataset", p(&data), "--out", p(&out)];
            args.extend_from_slice(extra);
            petsynth(&args)?;
            Ok(out)
        };
        let a = run("train_a", &[])?;
        let b = run("train_b", &[])?;
        files_identical(&a.join("checkpoint"), &b.join("checkpoint"))?;
        if fs::read(a.join("loss.jsonl")).ok() != fs::read(b.join("loss.jsonl")).ok() {
            return Err("loss histories differ between identical runs".into());
        }
        let half = run("train_c", &["--steps", "3"])?;
        let resumed = run("train_c", &["--resume", p(&half.join("checkpoint"))])?;
        files_identical(&a.join("checkpoint"), &resumed.join("checkpoint"))?;
        if fs::read(a.join("loss.jsonl")).ok() != fs::read(resumed.join("loss.jsonl")).ok() {
            return Err("resumed loss history differs from the uninterrupted one".into());
        }

        // Checkpoint round trip.
        let ckpt = load_checkpoint(&a.join("checkpoint"), None).map_err(|e| e.to_string())?;
        let resaved = dir.join("resaved");
        save_checkpoint(&resaved, &ckpt.meta, &ckpt.params, ckpt.optimizer.as_ref()).map_err(|e| e.to_string())?;
        files_identical(&a.join("checkpoint"), &resaved)?;
        if read_meta(&resaved).map_err(|e| e.to_string())? != ckpt.meta {
            return Err("checkpoint metadata changed on round trip".into());
        }

        // Seeded sampling, twice.
        let sample = |name: &str| -> Result<PathBuf, String> {
            let out = dir.join(name);
            petsynth(&[
                "sample", "--checkpoint", p(&a.join("checkpoint")), "--config", p(&cfg), "--input", p(&data),
                "--split", "all", "--seed", "9", "--out", p(&out),
            ])?;
            Ok(out)
        };
        let (s1, s2) = (sample("sample_1")?, sample("sample_2")?);
        files_identical(&s1, &s2)?;

        // Metrics against independent computations.
        let pairs = gen_phantom(6, 32, 11).map_err(|e| e.to_string())?;
        let (mut dp, mut ds) = (0.0f64, 0.0f64);
        for (k, s) in pairs.iter().enumerate() {
            let other = &pairs[(k + 1) % pairs.len()].pet;
            let blended: Array2<f32> = &s.pet * 0.7 + other * 0.3;
            dp = dp.max((psnr(s.pet.view(), blended.view(), 1.0).unwrap() - reference_psnr(s.pet.view(), blended.view(), 1.0)).abs());
            ds = ds.max((ssim(s.pet.view(), blended.view(), 1.0).unwrap() - reference_ssim(s.pet.view(), blended.view(), 1.0)).abs());
        }
        if dp > 1e-9 || ds > 1e-6 {
            return Err(format!("metric deviations psnr {dp:.2e} (<= 1e-9), ssim {ds:.2e} (<= 1e-6)"));
        }
        Ok(format!(
            "repeat train, resumed train, repeat sample identical; dataset and checkpoint round trips bit-exact; \
             max |psnr - ref| {dp:.1e} <= 1e-9, max |ssim - ref| {ds:.1e} <= 1e-6"
        ))
    })();
    match result {
        Ok(detail) => gate.record("6 determinism and formats", true, &detail),
        Err(e) => gate.record("6 determinism and formats", false, &e),
    }
}

const TRAIN_STEPS: u64 = 3000;
const TEST_PAIRS: usize = 32;

fn phantom_config() -> Value {
    json!({
        "schedule": {"sigma_min": 0.01, "sigma_max": 20.0, "num_steps": 100},
        "model": {"base_channels": 32, "channel_multipliers": [1, 2, 2], "num_res_blocks_per_level": 1,
                  "attention_levels": [2], "groupnorm_groups": 8, "dropout_rate": 0.1, "time_embedding_dim": 128},
        "train": {"batch_size": 8, "total_steps": TRAIN_STEPS, "learning_rate": 1e-3, "ema_decay": 0.995,
                  "grad_clip_norm": 1.0, "checkpoint_every": 250, "seed": 0, "condition_dropout": 0.15},
        "sampler": {"num_steps": 100, "corrector_steps": 1, "snr": 0.16, "seed": 1, "use_ema": true, "batch_size": 16},
        "io": {"log_every": 100}
    })
}

fn latest_periodic(run: &Path) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(run.join("checkpoints")).ok()?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    dirs.sort();
    dirs.into_iter().rev().find(|d| d.join("checkpoint.json").is_file())
}

fn per_sample_psnr(report: &Value) -> BTreeMap<String, f64> {
    report["per_sample"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|s| (s["id"].as_str().unwrap().to_string(), s["psnr_db"].as_f64().unwrap_or(f64::INFINITY)))
        .collect()
}

fn criterion_5(gate: &mut Gate, root: &Path) {
    let result = (|| -> Result<(bool, String), String> {
        let dir = root.join("phantom");
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let data = dir.join("data");
        // 2560 pairs with a 20% held-out split leave 2048 for training.
        if !data.join("manifest.json").is_file() {
            petsynth(&["gen-phantom", "--out", p(&data), "--count", "2560", "--size", "32", "--seed", "7",
                       "--test-fraction", "0.2", "--force"])?;
        }
        let cfg_path = dir.join("config.json");
        let cfg = phantom_config();
        fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).map_err(|e| e.to_string())?;
        let run = dir.join("run");
        let final_ckpt = run.join("checkpoint");
        let timing = run.join("train_seconds.txt");
        let cached = read_meta(&final_ckpt).map(|m| m.step_count >= TRAIN_STEPS).unwrap_or(false) && timing.is_file();
        let train_note = if cached {
            format!("cached run, trained in {}s", fs::read_to_string(&timing).unwrap_or_default().trim())
        } else {
            let clock = Instant::now();
            let prior: f64 = fs::read_to_string(run.join("partial_seconds.txt")).ok().and_then(|s| s.trim().parse().ok()).unwrap_or(0.0);
            let mut args = vec!["train".to_string(), "--config".into(), p(&cfg_path).into(), "--dataset".into(),
                                p(&data).into(), "--out".into(), p(&run).into()];
            if let Some(resume) = latest_periodic(&run) {
                args.extend(["--resume".to_string(), p(&resume).to_string()]);
            }
            // Progress survives interruption so a rerun resumes instead of restarting.
            let status = Command::new(BIN).args(&args).status().map_err(|e| e.to_string())?;
            let secs = prior + clock.elapsed().as_secs_f64();
            if !status.success() {
                let _ = fs::write(run.join("partial_seconds.txt"), format!("{secs:.0}"));
                return Err(format!("training exited with {:?}", status.code()));
            }
            fs::write(&timing, format!("{secs:.0}")).map_err(|e| e.to_string())?;
            format!("trained in {secs:.0}s")
        };
        let train_secs: f64 = fs::read_to_string(&timing).unwrap_or_default().trim().parse().unwrap_or(f64::INFINITY);

        let limit = TEST_PAIRS.to_string();
        let mut reports = Vec::new();
        for (name, extra) in [("cond", None), ("uncond", Some("--unconditional"))] {
            let out = dir.join(name);
            let mut args = vec!["sample", "--checkpoint", p(&final_ckpt), "--config", p(&cfg_path), "--input",
                                p(&data), "--split", "test", "--limit", &limit, "--out", p(&out), "--force"];
            args.extend(extra);
            petsynth(&args)?;
            petsynth(&["eval", "--pred", p(&out), "--ref", p(&data)])?;
            let report: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            reports.push(report);
        }
        let agg = &reports[0]["aggregate"];
        let psnr_mean = agg["psnr_mean"].as_f64().unwrap_or(f64::INFINITY);
        let ssim_mean = agg["ssim_mean"].as_f64().unwrap_or(f64::NAN);
        let uncond_mean = reports[1]["aggregate"]["psnr_mean"].as_f64().unwrap_or(f64::NAN);
        let cond = per_sample_psnr(&reports[0]);
        let uncond = per_sample_psnr(&reports[1]);
        let wins = cond.iter().filter(|(id, v)| uncond.get(*id).is_some_and(|u| *v > u)).count();
        let win_rate = wins as f64 / cond.len() as f64;
        let ok = psnr_mean >= 20.0 && ssim_mean >= 0.70 && win_rate >= 0.9 && train_secs <= 4.0 * 3600.0;
        Ok((
            ok,
            format!(
                "{TRAIN_STEPS} steps on 2048 pairs ({train_note}); {} held-out pairs: conditional PSNR {psnr_mean:.2} dB (>= 20), \
                 SSIM {ssim_mean:.3} (>= 0.70); unconditional PSNR {uncond_mean:.2} dB; conditional wins on {wins}/{} ({:.0}% >= 90%)",
                cond.len(),
                cond.len(),
                100.0 * win_rate
            ),
        ))
    })();
    match result {
        Ok((ok, detail)) => gate.record("5 phantom end-to-end", ok, &detail),
        Err(e) => gate.record("5 phantom end-to-end", false, &e),
    }
}

fn main() {
    // Ignore libtest-style flags such as `--nocapture`; a name filter that
    // does not mention acceptance skips the gate.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut gate = Gate { results: Vec::new() };
    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);
    criterion_4(&mut gate);
    criterion_6(&mut gate, &root);
    criterion_7(&mut gate);
    criterion_5(&mut gate, &root);
    let failed: Vec<&str> = gate.results.iter().filter(|(_, ok)| !ok).map(|(id, _)| id.as_str()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", gate.results.len());
    } else {
        println!("acceptance: {} of {} criteria failed: {}", failed.len(), gate.results.len(), failed.join(", "));
        std::process::exit(1);
    }
}
