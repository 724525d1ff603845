use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use skinmap_core::anchors::{crop_patch, mean_error_rate, predict_anchors, train_anchor_model, AnchorRegressor};
use skinmap_core::datamodel::{AnchorSet, Coord, Dataset, LandmarkSet, MeasureKind, PositionId};
use skinmap_core::evalmetrics::{
    ablation_ladder, evaluate, is_nondecreasing_within, leave_one_lighting_out, partition_shots, EvalReport,
};
use skinmap_core::heatmap::{interpolate_field, render_overlay, with_legend, ColorScale, FaceMask};
use skinmap_core::pavit::{train, Checkpoint, PatchSet};
use skinmap_core::synthgen::{gen_anchor_pairs, gen_dataset};

use crate::config::{Overrides, RunConfig};
use crate::manifest::Manifest;
use crate::{AnchorsCommand, Cli, Command, UsageError};

pub const DATASET_FILE: &str = "dataset.skd";
pub const ANCHOR_MODEL_FILE: &str = "anchor_model.safetensors";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const PREDICTIONS_FILE: &str = "predictions.json";

/// R² slack between consecutive ablation configs.
const TREND_TOL: f64 = 0.02;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_dataset(m: &mut Manifest, role: &str, path: &Path) -> Result<Dataset> {
    m.input(role, path)?;
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn patch_set(ds: &Dataset, kind: MeasureKind, cfg: &RunConfig) -> Result<PatchSet> {
    Ok(PatchSet::new(ds.patches(kind)?, &cfg.model)?)
}

fn check_inputs_exist(cmd: &Command) -> Result<()> {
    let mut paths: Vec<&PathBuf> = Vec::new();
    match cmd {
        Command::Synth { .. } => {}
        Command::Filter { data, .. } | Command::LooLighting { data } | Command::Ablation { data } => paths.push(data),
        Command::Train { data, val } => {
            paths.push(data);
            paths.extend(val);
        }
        Command::Predict { checkpoint, data } => paths.extend([checkpoint, data]),
        Command::Eval {
            checkpoint,
            data,
            train_data,
        } => paths.extend([checkpoint, data, train_data]),
        Command::Heatmap {
            predictions,
            image,
            landmarks,
            ..
        } => {
            paths.extend([predictions, image]);
            paths.extend(landmarks);
        }
        Command::Anchors { command } => match command {
            AnchorsCommand::Train { pairs } => paths.extend(pairs),
            AnchorsCommand::Eval { model, pairs } => {
                paths.push(model);
                paths.extend(pairs);
            }
            AnchorsCommand::Predict { model, landmarks } => paths.extend([model, landmarks]),
            AnchorsCommand::Pairs { .. } => {}
        },
    }
    for p in paths {
        if !p.is_file() {
            return Err(usage(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let ov = Overrides {
        seed: g.seed,
        output_dir: g.out.clone(),
        set: g.set.clone(),
    };
    let cfg = RunConfig::load(g.config.as_deref(), &ov).map_err(|e| usage(format!("{e:#}")))?;
    check_inputs_exist(&cli.command)?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let name = match &cli.command {
        Command::Synth { .. } => "synth",
        Command::Filter { .. } => "filter",
        Command::Anchors { command } => match command {
            AnchorsCommand::Train { .. } => "anchors-train",
            AnchorsCommand::Eval { .. } => "anchors-eval",
            AnchorsCommand::Predict { .. } => "anchors-predict",
            AnchorsCommand::Pairs { .. } => "anchors-pairs",
        },
        Command::Train { .. } => "train",
        Command::Predict { .. } => "predict",
        Command::Eval { .. } => "eval",
        Command::LooLighting { .. } => "loo-lighting",
        Command::Ablation { .. } => "ablation",
        Command::Heatmap { .. } => "heatmap",
    };
    let mut m = Manifest::new(name, &cfg)?;
    if let Some(c) = &g.config {
        m.input("config", c)?;
    }
    let summary = match &cli.command {
        Command::Synth { export_images } => synth(&cfg, &out, *export_images, &mut m)?,
        Command::Filter {
            data,
            lighting,
            angle,
            panelist,
            invert,
            name,
        } => {
            let ds = load_dataset(&mut m, "data", data)?;
            let keep = |r: &skinmap_core::datamodel::Record| {
                let hit = (lighting.is_empty() || lighting.contains(&r.image.lighting))
                    && (angle.is_empty() || angle.contains(&r.image.angle))
                    && (panelist.is_empty() || panelist.contains(&r.image.panelist_id));
                hit != *invert
            };
            let sub = ds.filter(keep);
            let path = out.join(name);
            sub.save(&path)?;
            m.output("data", &path)?;
            println!("kept {} of {} records -> {}", sub.len(), ds.len(), path.display());
            json!({ "kept": sub.len(), "of": ds.len() })
        }
        Command::Anchors { command } => anchors(&cfg, &out, command, &mut m)?,
        Command::Train { data, val } => train_cmd(&cfg, &out, data, val.as_deref(), &mut m)?,
        Command::Predict { checkpoint, data } => predict(&out, checkpoint, data, &mut m)?,
        Command::Eval {
            checkpoint,
            data,
            train_data,
        } => {
            m.input("checkpoint", checkpoint)?;
            let ck = Checkpoint::load(checkpoint)?;
            let test = load_dataset(&mut m, "data", data)?;
            let train_ds = load_dataset(&mut m, "train_data", train_data)?;
            let train_labels: Vec<f64> = train_ds.patches(ck.kind)?.iter().map(|p| p.label.value).collect();
            let partition = partition_shots(&train_labels, cfg.eval.bin_width)?;
            let set = PatchSet::new(test.patches(ck.kind)?, ck.model.config())?;
            let report = evaluate(&ck, &set, &partition)?;
            println!("{}\n{}", EvalReport::table_header(), report.table_row());
            let path = out.join("eval.json");
            write_json(&path, &json!({ "report": report, "partition": partition }))?;
            m.output("report", &path)?;
            serde_json::to_value(&report)?
        }
        Command::LooLighting { data } => {
            let ds = load_dataset(&mut m, "data", data)?;
            let folds = leave_one_lighting_out(&ds, &cfg.model, &cfg.train, cfg.eval.bin_width)?;
            println!("held-out    aug   {}", EvalReport::table_header());
            for f in &folds {
                println!("{:<11} yes   {}", f.held_out.name(), f.with_augmentation.table_row());
                println!("{:<11} no    {}", f.held_out.name(), f.without_augmentation.table_row());
            }
            let path = out.join("loo-lighting.json");
            write_json(&path, &folds)?;
            m.output("report", &path)?;
            json!({ "folds": folds.len() })
        }
        Command::Ablation { data } => ablation(&cfg, &out, data, &mut m)?,
        Command::Heatmap {
            predictions,
            image,
            record,
            kind,
            landmarks,
            alpha,
            no_legend,
            name,
        } => {
            let args = HeatmapArgs {
                predictions,
                image,
                record: *record,
                kind: *kind,
                landmarks: landmarks.as_deref(),
                alpha: alpha.unwrap_or(cfg.heatmap.alpha),
                legend: cfg.heatmap.legend && !no_legend,
                name,
            };
            heatmap(&cfg, &out, &args, &mut m)?
        }
    };
    m.summary = Some(summary);
    let path = m.write(&out)?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path, export_images: bool, m: &mut Manifest) -> Result<serde_json::Value> {
    let ds = gen_dataset(&cfg.synth)?;
    let path = out.join(DATASET_FILE);
    ds.save(&path)?;
    m.output("dataset", &path)?;
    if export_images {
        let dir = out.join("images");
        std::fs::create_dir_all(&dir)?;
        for (i, r) in ds.records().iter().enumerate() {
            let p = dir.join(format!("record-{i:04}.png"));
            r.image.pixels.save(&p).with_context(|| format!("writing {}", p.display()))?;
            m.output(&format!("image:{i}"), &p)?;
        }
    }
    let n_tewl = ds.num_patches(MeasureKind::Tewl);
    let n_sh = ds.num_patches(MeasureKind::Sh);
    println!(
        "{} records, {} TEWL / {} SH patches -> {} ({})",
        ds.len(),
        n_tewl,
        n_sh,
        path.display(),
        m.output_hash("dataset").unwrap_or_default()
    );
    Ok(json!({
        "records": ds.len(),
        "patches_tewl": n_tewl,
        "patches_sh": n_sh,
        "panelists": ds.panelists(),
        "lightings": ds.lightings(),
    }))
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    landmarks: LandmarkSet,
    anchors: AnchorSet,
}

fn read_pairs(path: &Path) -> Result<Vec<(LandmarkSet, AnchorSet)>> {
    let recs: Vec<PairRecord> = read_json(path)?;
    Ok(recs.into_iter().map(|r| (r.landmarks, r.anchors)).collect())
}

fn anchors(cfg: &RunConfig, out: &Path, cmd: &AnchorsCommand, m: &mut Manifest) -> Result<serde_json::Value> {
    let radius = cfg.synth.geometry.sticker_radius;
    match cmd {
        AnchorsCommand::Pairs { count, name } => {
            let pairs = gen_anchor_pairs(*count, &cfg.synth.geometry, cfg.seed)?;
            let recs: Vec<PairRecord> = pairs
                .into_iter()
                .map(|(landmarks, anchors)| PairRecord { landmarks, anchors })
                .collect();
            let path = out.join(name);
            write_json(&path, &recs)?;
            m.output("pairs", &path)?;
            println!("{} pairs -> {}", recs.len(), path.display());
            Ok(json!({ "pairs": recs.len() }))
        }
        AnchorsCommand::Train { pairs } => {
            let data = match pairs {
                Some(p) => {
                    m.input("pairs", p)?;
                    read_pairs(p)?
                }
                None => gen_anchor_pairs(cfg.anchors.train_pairs, &cfg.synth.geometry, cfg.seed)?,
            };
            let (model, losses) = train_anchor_model(&data, &cfg.anchor_config())?;
            let err = mean_error_rate(&model, &data, radius)?;
            let path = out.join(ANCHOR_MODEL_FILE);
            model.save(&path)?;
            m.output("model", &path)?;
            println!("trained on {} pairs; train error rate {err:.4}", data.len());
            Ok(json!({ "pairs": data.len(), "train_error_rate": err, "final_loss": losses.last() }))
        }
        AnchorsCommand::Eval { model, pairs } => {
            m.input("model", model)?;
            let reg = AnchorRegressor::load(model)?;
            let data = match pairs {
                Some(p) => {
                    m.input("pairs", p)?;
                    read_pairs(p)?
                }
                // a seed stream disjoint from the training pairs
                None => gen_anchor_pairs(
                    cfg.anchors.eval_pairs,
                    &cfg.synth.geometry,
                    cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
                )?,
            };
            let err = mean_error_rate(&reg, &data, radius)?;
            println!("mean error rate {err:.4} over {} pairs (radius {radius})", data.len());
            let path = out.join("anchor_eval.json");
            write_json(&path, &json!({ "mean_error_rate": err, "pairs": data.len(), "radius": radius }))?;
            m.output("report", &path)?;
            Ok(json!({ "mean_error_rate": err }))
        }
        AnchorsCommand::Predict { model, landmarks } => {
            m.input("model", model)?;
            m.input("landmarks", landmarks)?;
            let reg = AnchorRegressor::load(model)?;
            let lm: LandmarkSet = read_json(landmarks)?;
            let anchors = predict_anchors(&reg, &lm)?;
            let path = out.join("anchors.json");
            write_json(&path, &anchors)?;
            m.output("anchors", &path)?;
            println!("{} anchors -> {}", anchors.len(), path.display());
            Ok(json!({ "anchors": anchors.len() }))
        }
    }
}

fn train_cmd(cfg: &RunConfig, out: &Path, data: &Path, val: Option<&Path>, m: &mut Manifest) -> Result<serde_json::Value> {
    let kind = cfg.train.kind;
    let ds = load_dataset(m, "data", data)?;
    let set = patch_set(&ds, kind, cfg)?;
    let val_set = match val {
        Some(p) => Some(patch_set(&load_dataset(m, "val", p)?, kind, cfg)?),
        None => None,
    };
    let res = train(&cfg.model, &set, val_set.as_ref(), &cfg.train)?;
    if res.backbone_hash_before != res.backbone_hash_after {
        bail!("backbone weights changed during training");
    }
    let path = out.join(CHECKPOINT_FILE);
    res.checkpoint.save(&path)?;
    m.output("checkpoint", &path)?;
    let hist = out.join("history.json");
    write_json(&hist, &res.history)?;
    m.output("history", &hist)?;
    println!(
        "{} epochs on {} {} patches; final loss {:.5}; val R2 {}",
        cfg.train.epochs,
        set.len(),
        kind,
        res.history.final_loss().unwrap_or(f64::NAN),
        res.history.final_val_r2().map_or("-".into(), |r| format!("{r:.4}"))
    );
    Ok(json!({
        "patches": set.len(),
        "final_loss": res.history.final_loss(),
        "final_val_r2": res.history.final_val_r2(),
        "backbone_hash": res.backbone_hash_after,
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnchorPrediction {
    pub position: PositionId,
    pub row: f64,
    pub col: f64,
    pub value: f64,
    pub label: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordPredictions {
    pub record: usize,
    pub panelist: String,
    pub lighting: skinmap_core::datamodel::Lighting,
    pub angle: skinmap_core::datamodel::Angle,
    pub width: u32,
    pub height: u32,
    pub anchors: Vec<AnchorPrediction>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub kind: MeasureKind,
    pub records: Vec<RecordPredictions>,
}

fn predict(out: &Path, checkpoint: &Path, data: &Path, m: &mut Manifest) -> Result<serde_json::Value> {
    m.input("checkpoint", checkpoint)?;
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(m, "data", data)?;
    let mut records = Vec::with_capacity(ds.len());
    for (i, r) in ds.records().iter().enumerate() {
        let radius = r.image.modality.patch_radius();
        let mut crops = Vec::with_capacity(r.anchors.len());
        for (id, c) in r.anchors.iter() {
            crops.push((id, c, crop_patch(&r.image.pixels, id, c, radius)?));
        }
        let inputs: Vec<_> = crops.iter().map(|(id, _, img)| (img, *id)).collect();
        let values = ck.predict(&inputs)?;
        let anchors = crops
            .iter()
            .zip(values)
            .map(|((id, c, _), value)| AnchorPrediction {
                position: *id,
                row: c.row,
                col: c.col,
                value,
                label: r.label(*id, ck.kind).map(|l| l.value),
            })
            .collect();
        records.push(RecordPredictions {
            record: i,
            panelist: r.image.panelist_id.clone(),
            lighting: r.image.lighting,
            angle: r.image.angle,
            width: r.image.width(),
            height: r.image.height(),
            anchors,
        });
    }
    let file = PredictionsFile { kind: ck.kind, records };
    let path = out.join(PREDICTIONS_FILE);
    write_json(&path, &file)?;
    m.output("predictions", &path)?;
    let n: usize = file.records.iter().map(|r| r.anchors.len()).sum();
    println!("{n} predictions over {} records -> {}", file.records.len(), path.display());
    Ok(json!({ "records": file.records.len(), "predictions": n }))
}

/// Held-out panelists: the configured list, or the last third (at least one).
fn test_panelists(cfg: &RunConfig, ds: &Dataset) -> Result<BTreeSet<String>> {
    let all = ds.panelists();
    if !cfg.eval.test_panelists.is_empty() {
        let chosen: BTreeSet<String> = cfg.eval.test_panelists.iter().cloned().collect();
        if let Some(p) = chosen.iter().find(|p| !all.contains(*p)) {
            return Err(usage(format!("test panelist {p} is not in the dataset")));
        }
        return Ok(chosen);
    }
    if all.len() < 2 {
        bail!("a panelist split needs at least 2 panelists, found {}", all.len());
    }
    let n_test = (all.len() / 3).max(1);
    Ok(all.iter().skip(all.len() - n_test).cloned().collect())
}

fn ablation(cfg: &RunConfig, out: &Path, data: &Path, m: &mut Manifest) -> Result<serde_json::Value> {
    let ds = load_dataset(m, "data", data)?;
    let test_ids = test_panelists(cfg, &ds)?;
    let (train_ds, test_ds) = ds.split_by_panelist(&test_ids);
    let kind = cfg.train.kind;
    let train_set = patch_set(&train_ds, kind, cfg)?;
    let test_set = patch_set(&test_ds, kind, cfg)?;
    let runs = ablation_ladder(&cfg.model, &train_set, &test_set, &cfg.train, cfg.eval.bin_width)?;
    println!("cfg {}", EvalReport::table_header());
    for r in &runs {
        println!("{}   {}", r.config, r.report.table_row());
    }
    let r2s: Vec<f64> = runs.iter().map(|r| r.report.r2.unwrap_or(f64::NEG_INFINITY)).collect();
    let trend = is_nondecreasing_within(&r2s, TREND_TOL);
    println!("R2 nondecreasing A->E within {TREND_TOL}: {trend}");
    let path = out.join("ablation.json");
    write_json(
        &path,
        &json!({ "test_panelists": test_ids, "runs": runs, "nondecreasing": trend, "tolerance": TREND_TOL }),
    )?;
    m.output("report", &path)?;
    Ok(json!({ "r2": r2s, "nondecreasing": trend }))
}

struct HeatmapArgs<'a> {
    predictions: &'a Path,
    image: &'a Path,
    record: usize,
    kind: Option<MeasureKind>,
    landmarks: Option<&'a Path>,
    alpha: f64,
    legend: bool,
    name: &'a str,
}

fn heatmap(cfg: &RunConfig, out: &Path, a: &HeatmapArgs, m: &mut Manifest) -> Result<serde_json::Value> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(usage(format!("--alpha {} outside [0, 1]", a.alpha)));
    }
    if !a.name.to_ascii_lowercase().ends_with(".png") {
        return Err(usage("heatmap output must be a .png file"));
    }
    m.input("predictions", a.predictions)?;
    m.input("image", a.image)?;
    let preds: PredictionsFile = read_json(a.predictions)?;
    let rec = preds
        .records
        .get(a.record)
        .ok_or_else(|| usage(format!("record {} not in predictions ({} records)", a.record, preds.records.len())))?;
    let img = image::open(a.image)
        .with_context(|| format!("reading {}", a.image.display()))?
        .to_rgb8();
    if img.dimensions() != (rec.width, rec.height) {
        bail!(
            "image is {}x{} but record {} was {}x{}",
            img.width(),
            img.height(),
            a.record,
            rec.width,
            rec.height
        );
    }
    let mask = match a.landmarks {
        Some(p) => {
            m.input("landmarks", p)?;
            FaceMask::from_landmarks(&read_json::<LandmarkSet>(p)?)?
        }
        None => FaceMask::Full,
    };
    let coords: Vec<Coord> = rec.anchors.iter().map(|p| Coord::new(p.row, p.col)).collect();
    let values: Vec<f64> = rec.anchors.iter().map(|p| p.value).collect();
    let field = interpolate_field(&coords, &values, img.width(), img.height(), &mask)?;
    let scale = ColorScale::for_kind(a.kind.unwrap_or(preds.kind));
    let mut rendered = render_overlay(&img, &field, &scale, a.alpha)?;
    if a.legend {
        rendered = with_legend(&rendered, &scale, cfg.heatmap.legend_height);
    }
    let path = out.join(a.name);
    rendered.save(&path).map_err(|e| anyhow!("writing {}: {e}", path.display()))?;
    m.output("heatmap", &path)?;
    println!("{} heatmap for record {} -> {}", scale.kind, a.record, path.display());
    Ok(json!({ "kind": scale.kind, "anchors": coords.len(), "alpha": a.alpha }))
}
