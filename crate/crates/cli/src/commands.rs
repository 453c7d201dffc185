use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use polarseg::config::{ModelConfig, RegressorKind, RunConfig};
use polarseg::diffcore::{load_checkpoint, ParamStore};
use polarseg::infer_eval::{count_flops, count_params_for, evaluate_model, prediction_records, render_overlay, EvalReport, GroundTruth, Manifest};
use polarseg::io::{json_lines, write_atomic};
use polarseg::network::{init_params, Network};
use polarseg::training::{generate_dataset, load_dataset, prepare_samples, save_dataset, train, SyntheticScene, TrainOutputs};
use serde::Serialize;

use crate::{Ablation, Command, Common};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, count } => gen_data(&common, count),
        Command::Train { common, data } => train_cmd(&common, data.as_deref()),
        Command::Eval { common, data } => eval_cmd(&common, data.as_deref()),
        Command::Infer { common, data } => infer_cmd(&common, data.as_deref()),
        Command::SweepAlpha { common, alphas } => sweep_alpha(&common, alphas),
        Command::Count {
            common,
            full_scale,
            height,
            width,
        } => count_cmd(&common, full_scale, height, width),
    }
}

/// Defaults, then the config file, then flags.
fn resolve(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.merge_text(&text).with_context(|| format!("in config {}", path.display()))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for a in &common.ablate {
        match a {
            Ablation::NoFine => cfg.model.fine_enabled = false,
            Ablation::NoHbb => cfg.model.hbb_enabled = false,
            Ablation::ImplicitCoarse => cfg.train.implicit_coarse = true,
            Ablation::DetachCoords => cfg.model.detach_sampling_coords = true,
            Ablation::StandardConv => cfg.model.regressor = RegressorKind::Standard,
        }
    }
    if let Some(alpha) = common.alpha {
        cfg.train.loss.alpha = alpha;
    }
    if let Some(levels) = &common.levels {
        cfg.set("model.fpn_levels", levels)?;
    }
    if let Some(rays) = common.rays {
        cfg.model.num_rays = rays;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn resolve_run(common: &Common) -> Result<RunConfig> {
    let cfg = resolve(common, RunConfig::default())?;
    cfg.validate()?;
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("{flag} is required"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    Ok(())
}

/// Seed of the held-out split when scenes are generated in memory.
fn eval_seed(cfg: &RunConfig) -> u64 {
    cfg.seed.wrapping_add(1)
}

fn scenes_from(data: Option<&Path>, seed: u64, count: usize, cfg: &RunConfig) -> Result<Vec<SyntheticScene>> {
    match data {
        Some(dir) => load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display())),
        None => Ok(generate_dataset(seed, count, &cfg.data)?),
    }
}

fn gen_data(common: &Common, count: Option<usize>) -> Result<()> {
    let cfg = resolve_run(common)?;
    let out = require(&common.out, "--out")?;
    let count = count.unwrap_or(cfg.data.num_train);
    let scenes = generate_dataset(cfg.seed, count, &cfg.data)?;
    save_dataset(out, &scenes, &cfg.data.classes)?;
    write_config(out, &cfg)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn train_cmd(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = resolve_run(common)?;
    let out = require(&common.out, "--out")?;
    let scenes = scenes_from(data, cfg.seed, cfg.data.num_train, &cfg)?;
    let samples = prepare_samples(&scenes, &cfg.model, &cfg.train)?;
    let mut store = init_params(&cfg.model, cfg.seed)?;
    if let Some(ckpt) = &common.ckpt {
        load_checkpoint(ckpt, &mut store, |_| false).with_context(|| format!("loading {}", ckpt.display()))?;
    }
    let outputs = TrainOutputs { dir: out.to_path_buf() };
    let outcome = train(&cfg, store, &samples, Some(&outputs))?;
    if let Some(last) = outcome.log.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    println!("checkpoint: {}", outputs.final_checkpoint().display());
    Ok(())
}

/// Inference parameters: the boundary branch is never loaded.
fn load_for_inference(cfg: &RunConfig, ckpt: &Path) -> Result<(Network, ParamStore)> {
    let model = ModelConfig {
        hbb_enabled: false,
        ..cfg.model.clone()
    };
    let mut store = init_params(&model, 0)?;
    load_checkpoint(ckpt, &mut store, |name| name.starts_with("hbb.")).with_context(|| format!("loading {}", ckpt.display()))?;
    let net = Network::bind(&model, &store)?;
    Ok((net, store))
}

fn with_ground_truth(scenes: &[SyntheticScene]) -> Vec<(polarseg::diffcore::Tensor, Vec<GroundTruth>)> {
    scenes
        .iter()
        .map(|s| {
            let gts = s
                .instances
                .iter()
                .map(|i| GroundTruth {
                    class: i.class,
                    mask: i.mask.clone(),
                })
                .collect();
            (s.network_input(), gts)
        })
        .collect()
}

fn eval_cmd(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = resolve_run(common)?;
    let ckpt = require(&common.ckpt, "--ckpt")?;
    let (net, store) = load_for_inference(&cfg, ckpt)?;
    let scenes = scenes_from(data, eval_seed(&cfg), cfg.data.num_eval, &cfg)?;
    let (report, _) = evaluate_model(&net, &store, &with_ground_truth(&scenes), &cfg.eval)?;
    print!("{}", report.table());
    if let Some(out) = &common.out {
        write_json(&out.join("eval_report.json"), &report)?;
        write_config(out, &cfg)?;
    }
    Ok(())
}

fn infer_cmd(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = resolve_run(common)?;
    let ckpt = require(&common.ckpt, "--ckpt")?;
    let out = require(&common.out, "--out")?;
    let (net, store) = load_for_inference(&cfg, ckpt)?;
    let scenes = scenes_from(data, eval_seed(&cfg), cfg.data.num_eval, &cfg)?;
    let mut preds = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let dets = polarseg::infer_eval::predict(&net, &store, &s.network_input(), &cfg.eval)?;
        let ppm = render_overlay(&s.image, &dets)?;
        write_atomic(&out.join("overlays").join(format!("scene_{i:05}.ppm")), &ppm)?;
        preds.push(dets);
    }
    write_atomic(&out.join("predictions.jsonl"), json_lines(prediction_records(&preds))?.as_bytes())?;
    write_config(out, &cfg)?;
    println!(
        "{} detections over {} images written to {}",
        preds.iter().map(Vec::len).sum::<usize>(),
        preds.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    alpha: f64,
    report: EvalReport,
}

fn sweep_alpha(common: &Common, alphas: Option<Vec<f64>>) -> Result<()> {
    let cfg = resolve_run(common)?;
    let out = require(&common.out, "--out")?;
    let alphas = alphas.unwrap_or_else(|| (3..=10).map(|i| i as f64 / 10.0).collect());
    if alphas.is_empty() {
        bail!("no alpha values given");
    }
    let scenes = generate_dataset(cfg.seed, cfg.data.num_train, &cfg.data)?;
    let eval = with_ground_truth(&generate_dataset(eval_seed(&cfg), cfg.data.num_eval, &cfg.data)?);
    let mut rows = Vec::with_capacity(alphas.len());
    let mut table = String::from("alpha\tAP\tAP50\tAP75\n");
    for alpha in alphas {
        let mut c = cfg.clone();
        c.train.loss.alpha = alpha;
        c.validate()?;
        let samples = prepare_samples(&scenes, &c.model, &c.train)?;
        let outputs = TrainOutputs {
            dir: out.join(format!("alpha_{alpha:.2}")),
        };
        let outcome = train(&c, init_params(&c.model, c.seed)?, &samples, Some(&outputs))?;
        let net = Network::bind(&c.model, &outcome.store)?;
        let (report, _) = evaluate_model(&net, &outcome.store, &eval, &c.eval)?;
        let line = format!("{alpha:.2}\t{:.4}\t{:.4}\t{:.4}\n", report.ap, report.ap50, report.ap75);
        print!("{line}");
        table.push_str(&line);
        rows.push(SweepRow { alpha, report });
    }
    write_atomic(&out.join("alpha_sweep.tsv"), table.as_bytes())?;
    write_json(&out.join("alpha_sweep.json"), &rows)?;
    write_config(out, &cfg)?;
    Ok(())
}

#[derive(Serialize)]
struct CountReport {
    height: usize,
    width: usize,
    params: Manifest,
    macs_train: Manifest,
    macs_inference: Manifest,
    /// Parameters and MACs added over the coarse-only, branch-free model.
    fine_delta_params: u64,
    hbb_delta_params: u64,
    fine_delta_macs: u64,
    hbb_delta_macs: u64,
}

fn count_cmd(common: &Common, full_scale: bool, height: usize, width: usize) -> Result<()> {
    let base = if full_scale {
        RunConfig {
            model: ModelConfig::full_scale(),
            ..RunConfig::default()
        }
    } else {
        RunConfig::default()
    };
    let cfg = resolve(common, base)?;
    let model = &cfg.model;
    model.validate()?;
    let baseline = ModelConfig {
        fine_enabled: false,
        hbb_enabled: false,
        ..model.clone()
    };
    let with_fine = ModelConfig {
        fine_enabled: true,
        hbb_enabled: false,
        ..model.clone()
    };
    let with_hbb = ModelConfig {
        fine_enabled: true,
        hbb_enabled: true,
        ..model.clone()
    };
    let p = |m: &ModelConfig| count_params_for(m).map(|x| x.total);
    let f = |m: &ModelConfig| count_flops(m, height, width, false).map(|x| x.total);
    let report = CountReport {
        height,
        width,
        params: count_params_for(model)?,
        macs_train: count_flops(model, height, width, false)?,
        macs_inference: count_flops(model, height, width, true)?,
        fine_delta_params: count_params_for(&with_fine)?.get("fine"),
        hbb_delta_params: p(&with_hbb)? - p(&with_fine)?,
        fine_delta_macs: f(&with_fine)? - f(&baseline)?,
        hbb_delta_macs: f(&with_hbb)? - f(&with_fine)?,
    };
    println!("module       params        MACs(train)      MACs(inference)");
    for m in &report.params.modules {
        println!(
            "{:<12} {:>10} {:>18} {:>18}",
            m.module,
            m.count,
            report.macs_train.get(&m.module),
            report.macs_inference.get(&m.module)
        );
    }
    println!(
        "{:<12} {:>10} {:>18} {:>18}",
        "total", report.params.total, report.macs_train.total, report.macs_inference.total
    );
    println!(
        "fine regressor: {} params ({:.2} M), {:.3} GMACs",
        report.fine_delta_params,
        report.fine_delta_params as f64 / 1e6,
        report.fine_delta_macs as f64 / 1e9
    );
    println!(
        "boundary branch: {} params ({:.2} M), {:.3} GMACs (training only)",
        report.hbb_delta_params,
        report.hbb_delta_params as f64 / 1e6,
        report.hbb_delta_macs as f64 / 1e9
    );
    if let Some(out) = &common.out {
        write_json(&out.join("count.json"), &report)?;
    }
    Ok(())
}
