//! Command-line harness: dataset generation, training, sampling, rollouts,
//! evaluation, gradient checking, ablations, and report rendering.
//!
//! Exit codes: 0 success, 1 validation error (flags/config/inputs),
//! 2 runtime failure.

mod svg;

use clap::{Parser, Subcommand};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use toolflow::config::RunConfig;
use toolflow::container::{Container, ContainerWriter};
use toolflow::grounding::GroundingTables;
use toolflow::metrics::ade_fde;
use toolflow::model::{Fusion, Model, ModelConfig};
use toolflow::scene::{AffordanceSample, DisplacementSequence};
use toolflow::sim::{
    rollout_log_line, run_rollout, RolloutMode, TaskSpec,
};
use toolflow::synth::{build_dataset, generate_scene, load_dataset};
use toolflow::train::{
    gradcheck, load_checkpoint, records_to_csv, save_checkpoint, train as run_train,
};

/// Environment variable that overrides `--config`.
const CONFIG_ENV: &str = "TOOLFLOW_CONFIG";

#[derive(Parser)]
#[command(name = "toolflow", about = "Role-conditioned point-flow pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a synthetic dataset container.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset; writes a checkpoint and a loss CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Override the language fusion strategy: early | late.
        #[arg(long)]
        fusion: Option<String>,
        /// Motion-aware loss weighting: on | off.
        #[arg(long)]
        wloss: Option<String>,
    },
    /// Sample predicted flows for every sample of a dataset.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the ground-truth flows instead of model samples.
        #[arg(long, default_value_t = false)]
        oracle: bool,
    },
    /// Execute rollouts in the simulator and append JSON-lines logs.
    Rollout {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// closed_loop | open_loop | oracle (overrides the config).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Compute ADE/FDE over a flows container, or success counts over a
    /// rollout log.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        flows: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full-model finite-difference gradient check on the tiny config.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate the {fusion} x {wloss} grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        holdout: PathBuf,
    },
    /// Render loss curves and trajectory overlays to SVG plus a summary CSV.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_csv: Option<PathBuf>,
        #[arg(long)]
        flows: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

enum AppError {
    Validation(String),
    Runtime(String),
}

fn validation(e: impl Display) -> AppError {
    AppError::Validation(e.to_string())
}

fn runtime(e: impl Display) -> AppError {
    AppError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(AppError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

/// Resolve the run configuration; the environment variable wins over the
/// flag. Returns whether an explicit config was consumed.
fn load_config(flag: &Option<PathBuf>) -> Result<(RunConfig, bool), AppError> {
    let path = std::env::var_os(CONFIG_ENV).map(PathBuf::from).or_else(|| flag.clone());
    match path {
        Some(p) => Ok((RunConfig::load(&p).map_err(validation)?, true)),
        None => Ok((RunConfig::default(), false)),
    }
}

fn tables_for(cfg: &RunConfig) -> Result<GroundingTables, AppError> {
    let path = cfg.get_str("ground.tables_file", "");
    if path.is_empty() {
        return Ok(GroundingTables::default());
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| AppError::Validation(format!("ground.tables_file '{path}': {e}")))?;
    GroundingTables::from_kv_text(&text)
        .map_err(|e| AppError::Validation(format!("ground.tables_file '{path}': {e}")))
}

fn parse_fusion(flag: &Option<String>, from_cfg: Fusion) -> Result<Fusion, AppError> {
    match flag.as_deref() {
        None => Ok(from_cfg),
        Some("early") => Ok(Fusion::Early),
        Some("late") => Ok(Fusion::Late),
        Some(other) => Err(AppError::Validation(format!(
            "--fusion '{other}' is not one of early|late (config key model.fusion)"
        ))),
    }
}

fn parse_wloss(flag: &Option<String>) -> Result<bool, AppError> {
    match flag.as_deref() {
        None | Some("on") => Ok(true),
        Some("off") => Ok(false),
        Some(other) => Err(AppError::Validation(format!(
            "--wloss '{other}' is not one of on|off (config key train.lambda_mix)"
        ))),
    }
}

fn load_model(
    checkpoint: &Option<PathBuf>,
    expected: Option<&ModelConfig>,
) -> Result<Model, AppError> {
    let dir = checkpoint
        .as_ref()
        .ok_or_else(|| AppError::Validation("--checkpoint is required for this mode".into()))?;
    let (model, _, _) = load_checkpoint(dir, expected).map_err(validation)?;
    Ok(model)
}

fn write_out(path: &Path, contents: &str) -> Result<(), AppError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| AppError::Runtime(format!("creating {}: {e}", parent.display())))?;
    }
    // temp-then-rename so concurrent invocations never interleave
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)
        .map_err(|e| AppError::Runtime(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| AppError::Runtime(format!("renaming to {}: {e}", path.display())))
}

fn sample_name(i: usize) -> String {
    format!("sample{i:05}/flow")
}

/// Predicted flows for a sample set, in dataset order.
fn sample_flows(
    model: &Model,
    samples: &[AffordanceSample],
    seed: u64,
) -> Result<Vec<DisplacementSequence>, AppError> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cond = model
                .condition(&s.scene, &s.queries, &s.instruction)
                .map_err(runtime)?;
            model
                .sample_flow(&cond, s.queries.role_mask(), seed.wrapping_add(i as u64))
                .map_err(runtime)
        })
        .collect()
}

fn run(cmd: Cmd) -> Result<(), AppError> {
    match cmd {
        Cmd::GenData { config, seed, out } => {
            let (cfg, _) = load_config(&config)?;
            let ds = cfg.dataset_config().map_err(validation)?;
            let tables = tables_for(&cfg)?;
            let report = build_dataset(&ds, seed, &tables, &out).map_err(runtime)?;
            println!(
                "built {} samples ({} skipped) into {} [config {}]",
                report.built,
                report.skipped.len(),
                out.display(),
                cfg.content_hash()
            );
            Ok(())
        }
        Cmd::Train { config, seed, out, data, fusion, wloss } => {
            let (cfg, _) = load_config(&config)?;
            let samples = load_dataset(&data).map_err(validation)?;
            let mut mcfg = cfg.model_config().map_err(validation)?;
            mcfg.fusion = parse_fusion(&fusion, mcfg.fusion)?;
            let weights = cfg.loss_weights(parse_wloss(&wloss)?).map_err(validation)?;
            let tcfg = cfg.train_config(seed).map_err(validation)?;
            let mut model = Model::new(mcfg, seed).map_err(validation)?;
            let records = run_train(&mut model, &samples, &tcfg, &weights).map_err(runtime)?;
            write_out(&out.join("train.csv"), &records_to_csv(&records))?;
            save_checkpoint(&model, None, tcfg.steps as u64, &out.join("checkpoint"))
                .map_err(runtime)?;
            let meta = serde_json::json!({
                "config_hash": cfg.content_hash(),
                "seed": seed,
                "steps": tcfg.steps,
                "final_total": records.last().map(|r| r.total),
            });
            write_out(&out.join("train_meta.json"), &meta.to_string())?;
            println!(
                "trained {} steps, final loss {:.4e} [config {}]",
                tcfg.steps,
                records.last().map(|r| r.total).unwrap_or(f64::NAN),
                cfg.content_hash()
            );
            Ok(())
        }
        Cmd::Sample { config, seed, out, data, checkpoint, oracle } => {
            let (cfg, explicit) = load_config(&config)?;
            let samples = load_dataset(&data).map_err(validation)?;
            let flows: Vec<DisplacementSequence> = if oracle {
                samples.iter().map(|s| s.gt_flow.clone()).collect()
            } else {
                let expected = if explicit {
                    Some(cfg.model_config().map_err(validation)?)
                } else {
                    None
                };
                let model = load_model(&checkpoint, expected.as_ref())?;
                sample_flows(&model, &samples, seed)?
            };
            let mut w = ContainerWriter::new();
            for (i, f) in flows.iter().enumerate() {
                w.push_f32(&sample_name(i), vec![f.n_q(), f.m(), 3], f.steps());
            }
            let meta = serde_json::json!({
                "config_hash": cfg.content_hash(),
                "seed": seed,
                "count": flows.len(),
                "oracle": oracle,
            });
            w.finish(&out, "flows", meta).map_err(runtime)?;
            println!("wrote {} flows to {}", flows.len(), out.display());
            Ok(())
        }
        Cmd::Rollout { config, seed, out, checkpoint, mode } => {
            let (cfg, explicit) = load_config(&config)?;
            let (rcfg, cfg_mode) = cfg.rollout_config().map_err(validation)?;
            let mode = match mode.as_deref() {
                None => cfg_mode,
                Some(s) => RolloutMode::parse(s).ok_or_else(|| {
                    AppError::Validation(format!(
                        "--mode '{s}' is not one of closed_loop|open_loop|oracle (config key rollout.mode)"
                    ))
                })?,
            };
            let model = if mode == RolloutMode::Oracle {
                None
            } else {
                let expected = if explicit {
                    Some(cfg.model_config().map_err(validation)?)
                } else {
                    None
                };
                Some(load_model(&checkpoint, expected.as_ref())?)
            };
            let ds = cfg.dataset_config().map_err(validation)?;
            let n = cfg.rollout_seeds().map_err(validation)?;
            let mut lines = Vec::new();
            for &kind in &ds.kinds {
                let mut ok = 0usize;
                for s in 0..n as u64 {
                    let scene =
                        generate_scene(kind, seed.wrapping_add(s), &ds.gen).map_err(runtime)?;
                    let task = TaskSpec::for_scene(&scene).map_err(runtime)?;
                    let r = run_rollout(&scene, &task, model.as_ref(), mode, &rcfg, seed + s)
                        .map_err(runtime)?;
                    ok += r.success as usize;
                    lines.push(rollout_log_line(kind, seed + s, mode, &r));
                }
                println!("{}: {ok}/{n} [{}]", kind.as_str(), mode.as_str());
            }
            write_out(&out.join("rollouts.jsonl"), &(lines.join("\n") + "\n"))?;
            Ok(())
        }
        Cmd::Eval { config, data, flows, log, out } => {
            let (cfg, _) = load_config(&config)?;
            let hash = cfg.content_hash();
            let csv = if let Some(log) = log {
                eval_log(&log, &hash)?
            } else {
                let data = data.ok_or_else(|| {
                    AppError::Validation("eval needs --log or both --data and --flows".into())
                })?;
                let flows = flows.ok_or_else(|| {
                    AppError::Validation("eval needs --log or both --data and --flows".into())
                })?;
                eval_flows(&data, &flows, &hash)?
            };
            match out {
                Some(dir) => write_out(&dir.join("eval.csv"), &csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Gradcheck { seed } => {
            let t0 = std::time::Instant::now();
            let r = gradcheck(seed, 1e-5, 4).map_err(runtime)?;
            println!(
                "gradcheck: max rel err {:.3e} at {} ({} entries over {} params, {:.1}s)",
                r.max_rel_err,
                r.worst_param,
                r.entries_checked,
                r.params_checked,
                t0.elapsed().as_secs_f64()
            );
            if r.max_rel_err < 1e-4 {
                Ok(())
            } else {
                Err(AppError::Runtime(format!(
                    "gradient check failed: max rel err {:.3e} >= 1e-4",
                    r.max_rel_err
                )))
            }
        }
        Cmd::Ablate { config, seed, out, data, holdout } => {
            let (cfg, _) = load_config(&config)?;
            let samples = load_dataset(&data).map_err(validation)?;
            let held = load_dataset(&holdout).map_err(validation)?;
            let tcfg = cfg.train_config(seed).map_err(validation)?;
            let base = cfg.model_config().map_err(validation)?;
            let mut csv = String::from("fusion,wloss,ade,fde,config_hash\n");
            for fusion in [Fusion::Late, Fusion::Early] {
                for wloss in [true, false] {
                    let mut mcfg = base.clone();
                    mcfg.fusion = fusion;
                    let weights = cfg.loss_weights(wloss).map_err(validation)?;
                    let mut model = Model::new(mcfg, seed).map_err(validation)?;
                    run_train(&mut model, &samples, &tcfg, &weights).map_err(runtime)?;
                    let flows = sample_flows(&model, &held, seed)?;
                    let (mut ade, mut fde) = (0.0, 0.0);
                    for (f, s) in flows.iter().zip(&held) {
                        let (a, d) = ade_fde(f, &s.gt_flow);
                        ade += a;
                        fde += d;
                    }
                    ade /= held.len() as f64;
                    fde /= held.len() as f64;
                    let fus = if fusion == Fusion::Early { "early" } else { "late" };
                    let wl = if wloss { "on" } else { "off" };
                    println!("fusion={fus} wloss={wl}: ade {ade:.4} fde {fde:.4}");
                    csv.push_str(&format!(
                        "{fus},{wl},{ade:.9e},{fde:.9e},{}\n",
                        cfg.content_hash()
                    ));
                }
            }
            write_out(&out.join("ablation.csv"), &csv)?;
            Ok(())
        }
        Cmd::Report { config, out, train_csv, flows, data } => {
            let (cfg, _) = load_config(&config)?;
            let hash = cfg.content_hash();
            let mut summary = format!("key,value\nconfig_hash,{hash}\n");
            if let Some(csv_path) = &train_csv {
                let text = std::fs::read_to_string(csv_path)
                    .map_err(|e| AppError::Validation(format!("{}: {e}", csv_path.display())))?;
                let (chart, finals) = loss_chart(&text)?;
                write_out(&out.join("loss_curves.svg"), &chart)?;
                for (name, v) in finals {
                    summary.push_str(&format!("final_{name},{v:.9e}\n"));
                }
            }
            if let (Some(flows), Some(data)) = (&flows, &data) {
                let samples = load_dataset(data).map_err(validation)?;
                let (svg_text, mean_ade) = overlay_chart(flows, &samples)?;
                write_out(&out.join("trajectories.svg"), &svg_text)?;
                summary.push_str(&format!("flows_mean_ade,{mean_ade:.9e}\n"));
            }
            write_out(&out.join("summary.csv"), &summary)?;
            println!("report written to {} [config {hash}]", out.display());
            Ok(())
        }
    }
}

/// Success counts per (task, mode) from a JSON-lines rollout log.
fn eval_log(path: &Path, hash: &str) -> Result<String, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Validation(format!("{}: {e}", path.display())))?;
    let mut counts: std::collections::BTreeMap<(String, String), (usize, usize)> =
        std::collections::BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| AppError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let task = v["task"].as_str().unwrap_or("?").to_string();
        let mode = v["mode"].as_str().unwrap_or("?").to_string();
        let entry = counts.entry((task, mode)).or_insert((0, 0));
        entry.0 += v["success"].as_bool().unwrap_or(false) as usize;
        entry.1 += 1;
    }
    let mut csv = String::from("task,mode,successes,total,config_hash\n");
    for ((task, mode), (k, n)) in counts {
        csv.push_str(&format!("{task},{mode},{k},{n},{hash}\n"));
    }
    Ok(csv)
}

/// Per-kind ADE/FDE of a flows container against dataset ground truth.
fn eval_flows(data: &Path, flows: &Path, hash: &str) -> Result<String, AppError> {
    let samples = load_dataset(data).map_err(validation)?;
    let c = Container::open(flows).map_err(validation)?;
    let mut per_kind: std::collections::BTreeMap<&'static str, (usize, f64, f64)> =
        std::collections::BTreeMap::new();
    let (mut tot_a, mut tot_f) = (0.0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        let (shape, vals) = c.read_f32(&sample_name(i)).map_err(validation)?;
        if shape != vec![s.gt_flow.n_q(), s.gt_flow.m(), 3] {
            return Err(AppError::Validation(format!(
                "flow record {} shape {shape:?} does not match dataset ({}, {}, 3)",
                sample_name(i),
                s.gt_flow.n_q(),
                s.gt_flow.m()
            )));
        }
        let pred = DisplacementSequence::new(
            vals,
            s.gt_flow.n_q(),
            s.gt_flow.m(),
            s.gt_flow.role_mask().to_vec(),
        )
        .map_err(validation)?;
        let (a, f) = ade_fde(&pred, &s.gt_flow);
        let e = per_kind.entry(s.meta.kind.as_str()).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += a;
        e.2 += f;
        tot_a += a;
        tot_f += f;
    }
    let mut csv = String::from("kind,n,ade,fde,config_hash\n");
    for (kind, (n, a, f)) in &per_kind {
        csv.push_str(&format!(
            "{kind},{n},{:.9e},{:.9e},{hash}\n",
            a / *n as f64,
            f / *n as f64
        ));
    }
    let n = samples.len().max(1) as f64;
    csv.push_str(&format!("all,{},{:.9e},{:.9e},{hash}\n", samples.len(), tot_a / n, tot_f / n));
    Ok(csv)
}

/// Parse a training CSV and render the loss curves; returns the chart and
/// the final value of each series.
fn loss_chart(text: &str) -> Result<(String, Vec<(&'static str, f64)>), AppError> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse().unwrap_or(f64::NAN))
            .collect();
        if cols.len() >= 5 {
            rows.push(cols);
        }
    }
    if rows.is_empty() {
        return Err(AppError::Validation("training CSV has no data rows".into()));
    }
    let series_def: [(&'static str, usize, &str); 4] = [
        ("l_diff", 1, "#1f77b4"),
        ("l_step", 2, "#ff7f0e"),
        ("l_acc", 3, "#2ca02c"),
        ("total", 4, "#d62728"),
    ];
    let series: Vec<svg::Series> = series_def
        .iter()
        .map(|(name, col, color)| svg::Series {
            name: name.to_string(),
            color: color.to_string(),
            points: rows.iter().map(|r| (r[0], r[*col])).collect(),
        })
        .collect();
    let finals = series_def
        .iter()
        .map(|(name, col, _)| (*name, rows.last().unwrap()[*col]))
        .collect();
    Ok((svg::line_chart("training loss", &series), finals))
}

/// Overlay predicted vs ground-truth trajectories (x-z projection) for the
/// first few samples of a flows container.
fn overlay_chart(
    flows: &Path,
    samples: &[AffordanceSample],
) -> Result<(String, f64), AppError> {
    let c = Container::open(flows).map_err(validation)?;
    let mut series = Vec::new();
    let mut ade_sum = 0.0;
    let mut n_eval = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let (_, vals) = c.read_f32(&sample_name(i)).map_err(validation)?;
        let pred = DisplacementSequence::new(
            vals,
            s.gt_flow.n_q(),
            s.gt_flow.m(),
            s.gt_flow.role_mask().to_vec(),
        )
        .map_err(validation)?;
        ade_sum += ade_fde(&pred, &s.gt_flow).0;
        n_eval += 1;
        if i >= 4 {
            continue; // plot only the first few samples
        }
        let queries = s.queries.all();
        for (seq, color) in [(&s.gt_flow, "#bbbbbb"), (&pred, "#1f77b4")] {
            let traj = seq.trajectories();
            let m = seq.m();
            for (q, start) in queries.iter().enumerate().take(24).map(|(qi, p)| (qi, p)) {
                let mut pts = vec![(start.x, start.z)];
                for t in 0..m {
                    let base = (q * m + t) * 3;
                    pts.push((start.x + traj[base], start.z + traj[base + 2]));
                }
                series.push(svg::Series {
                    name: String::new(),
                    color: color.to_string(),
                    points: pts,
                });
            }
        }
    }
    Ok((
        svg::overlay("trajectories (x-z): grey = ground truth", &series),
        ade_sum / n_eval.max(1) as f64,
    ))
}
