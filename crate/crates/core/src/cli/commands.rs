use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Map, Value};

use crate::attention::AttentionConfig;
use crate::data::netpbm::{load_image, save_image, save_mask};
use crate::network::{layer_table, Model, ModelConfig, WidthPreset, ENCODER_STRIDE};
use crate::nn::Mode;
use crate::rng::{uniform, SeedTree};
use crate::tensor::{Graph, Tensor};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::train::{
    argmax_mask, check_classes, evaluate_sharded, load_dataset, predict_image, Trainer, LAST_CKPT,
};
use super::{threads, CliError, Command};

const CLASSIFIER: &str = "head.classifier.weight";

pub fn run(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Train {
            common,
            output_dir,
            resume,
            init_weights,
            partial,
        } => {
            let mut cfg = common.load()?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let report = train(cfg, resume, init_weights.as_deref(), partial)?;
            writeln!(out, "{report}")?;
        }
        Command::Eval {
            common,
            checkpoint,
            partial,
            tta,
            exclude_class,
            output,
            json: _,
        } => {
            let cfg = common.load()?;
            let report = eval(&cfg, checkpoint.as_deref(), partial, tta, &exclude_class)?;
            let path = output.unwrap_or_else(|| cfg.output_dir.join("eval.json"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, format!("{report:#}\n"))?;
            writeln!(out, "{report}")?;
        }
        Command::Infer {
            common,
            checkpoint,
            partial,
            input,
            output,
            color,
            tta,
        } => {
            let cfg = common.load()?;
            let report = infer(
                &cfg,
                checkpoint.as_deref(),
                partial,
                &input,
                &output,
                color.as_deref(),
                tta,
            )?;
            writeln!(out, "{report}")?;
        }
        Command::Bench {
            common,
            size,
            iters,
            warmup,
            preset,
            json: _,
        } => {
            let mut cfg = common.load()?;
            if let Some(p) = preset {
                cfg.model = with_preset(cfg.model, p.into());
            }
            writeln!(out, "{}", bench(&cfg, size, iters, warmup)?)?;
        }
        Command::Inspect {
            common,
            size,
            preset,
            classes,
            json,
        } => {
            let mut cfg = common.load()?;
            if let Some(p) = preset {
                cfg.model = with_preset(cfg.model, p.into());
            }
            if let Some(k) = classes {
                cfg.model.num_classes = k;
            }
            cfg.validate()?;
            let report = inspect(&cfg.model, size)?;
            if json {
                writeln!(out, "{report}")?;
            } else {
                write_table(out, &report)?;
            }
        }
    }
    Ok(())
}

/// `m` with the widths, window and heads of `preset`; switches and the
/// class count are kept.
pub fn with_preset(m: ModelConfig, preset: WidthPreset) -> ModelConfig {
    let a = m.attention;
    ModelConfig {
        width_preset: preset,
        attention: AttentionConfig {
            cross_window_interaction: a.cross_window_interaction,
            include_identity_term: a.include_identity_term,
            relative_position_bias: a.relative_position_bias,
            ..preset.attention()
        },
        ..m
    }
}

/// Fresh model for `cfg`, optionally overwritten by a checkpoint.
pub fn load_model(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    partial: bool,
) -> Result<Model<f32>, CliError> {
    let mut model = Model::new(cfg.model, &SeedTree::new(cfg.seed))?;
    if let Some(path) = checkpoint {
        let ck = Checkpoint::load(path)?;
        if let Some(w) = ck.get(CLASSIFIER) {
            if w.shape()[0] != cfg.model.num_classes {
                return Err(CliError::Data(format!(
                    "checkpoint predicts {} classes, configuration has {}",
                    w.shape()[0],
                    cfg.model.num_classes
                )));
            }
        }
        ck.apply_to(&mut model.store, partial)?;
    }
    Ok(model)
}

pub fn train(
    cfg: RunConfig,
    resume: bool,
    init_weights: Option<&Path>,
    partial: bool,
) -> Result<Value, CliError> {
    let dir = cfg.output_dir.clone();
    let mut trainer = Trainer::new(cfg)?;
    let mut init = Value::Null;
    if let Some(path) = init_weights {
        let r = Checkpoint::load(path)?.apply_to(&mut trainer.model.store, partial)?;
        init = json!({"loaded": r.loaded, "skipped": r.skipped, "missing": r.missing});
    }
    if resume {
        trainer.resume(&Checkpoint::load(&dir.join(LAST_CKPT))?)?;
    }
    let records = trainer.run(&dir, None)?;
    let names = trainer.dataset.meta.class_names.clone();
    let last = records.iter().rev().find_map(|r| r.metrics.as_ref());
    Ok(json!({
        "steps": trainer.step_count(),
        "epochs_run": records.len(),
        "best_miou": trainer.best_miou,
        "final_metrics": last.map(|m| m.to_json(&names)),
        "init_weights": init,
        "output_dir": dir,
    }))
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    partial: bool,
    tta: bool,
    exclude: &[usize],
) -> Result<Value, CliError> {
    let ds = load_dataset(cfg)?;
    check_classes(cfg, &ds.meta)?;
    let mut model = load_model(cfg, checkpoint, partial)?;
    let k = cfg.model.num_classes;
    let mut include = vec![true; k];
    for &c in exclude {
        *include
            .get_mut(c)
            .ok_or_else(|| CliError::Config(format!("--exclude-class {c} is not below {k}")))? =
            false;
    }
    let samples: Vec<_> = ds.samples().cloned().collect();
    let cm = evaluate_sharded(
        &mut model,
        &samples,
        cfg.data.tile.tile,
        tta,
        ds.meta.ignore_label,
        threads()?,
    )?;
    let mut report = cm.compute_masked(&include)?.to_json(&ds.meta.class_names);
    if let Value::Object(map) = &mut report {
        map.insert("images".into(), json!(samples.len()));
        map.insert("pixels".into(), json!(cm.total()));
        map.insert("tta".into(), json!(tta));
    }
    Ok(report)
}

fn palette(cfg: &RunConfig) -> Vec<[u8; 3]> {
    let named = &cfg.data.synth.palette;
    (0..cfg.model.num_classes)
        .map(|k| match named.get(k) {
            Some(s) => s.color,
            None => {
                let h = (k as u32).wrapping_mul(2_654_435_761);
                [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
            }
        })
        .collect()
}

pub fn infer(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    partial: bool,
    input: &Path,
    output: &Path,
    color: Option<&Path>,
    tta: bool,
) -> Result<Value, CliError> {
    let image = load_image(input)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut model = load_model(cfg, checkpoint, partial)?;
    let logits = predict_image(&mut model, &image, cfg.data.tile.tile, tta)?;
    let mask = argmax_mask(&logits)?;
    save_mask(output, &mask, h, w)?;
    if let Some(path) = color {
        let colors = palette(cfg);
        let rgb = Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            f32::from(colors[mask[p] as usize][c]) / 255.0
        });
        save_image(path, &rgb)?;
    }
    Ok(json!({"height": h, "width": w, "classes": cfg.model.num_classes, "output": output}))
}

pub fn bench(
    cfg: &RunConfig,
    (h, w): (usize, usize),
    iters: usize,
    warmup: usize,
) -> Result<Value, CliError> {
    if iters == 0 {
        return Err(CliError::Config("--iters must be at least 1".into()));
    }
    if !h.is_multiple_of(ENCODER_STRIDE) || !w.is_multiple_of(ENCODER_STRIDE) {
        return Err(CliError::Config(format!(
            "bench size {h}x{w} must be a multiple of {ENCODER_STRIDE}"
        )));
    }
    let seeds = SeedTree::new(cfg.seed);
    let mut model = Model::<f32>::new(cfg.model, &seeds)?;
    let x: Tensor<f32> = uniform(&mut seeds.stream("bench"), &[1, 3, h, w], 0.0, 1.0);
    let mut peak = 0;
    let mut pass = |model: &mut Model<f32>| -> Result<(), CliError> {
        let g = Graph::no_grad();
        let v = g.constant(x.clone());
        model.forward(&g, &v, Mode::Eval)?;
        peak = peak.max(g.produced_bytes());
        Ok(())
    };
    for _ in 0..warmup {
        pass(&mut model)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        pass(&mut model)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let param_bytes: usize = model.store.iter().map(|(_, p)| p.value().len() * 4).sum();
    let input_bytes = x.len() * 4;
    Ok(json!({
        "mean_ms": mean,
        "stddev_ms": var.sqrt(),
        "images_per_sec": 1e3 / mean,
        "iters": iters,
        "warmup": warmup,
        "height": h,
        "width": w,
        "preset": cfg.model.width_preset,
        "peak_bytes_estimate": param_bytes + input_bytes + peak,
    }))
}

pub fn inspect(cfg: &ModelConfig, (h, w): (usize, usize)) -> Result<Value, CliError> {
    let rows = layer_table(cfg, h, w).map_err(|e| CliError::Config(e.to_string()))?;
    let params: u64 = rows.iter().map(|r| r.params).sum();
    let macs: u64 = rows.iter().filter(|r| !r.train_only).map(|r| r.macs).sum();
    let train_macs: u64 = rows.iter().filter(|r| r.train_only).map(|r| r.macs).sum();
    let mut map = Map::new();
    map.insert("preset".into(), json!(cfg.width_preset));
    map.insert("num_classes".into(), json!(cfg.num_classes));
    map.insert("height".into(), json!(h));
    map.insert("width".into(), json!(w));
    map.insert(
        "layers".into(),
        serde_json::to_value(&rows).expect("rows serialize"),
    );
    map.insert("total_params".into(), json!(params));
    map.insert("total_macs".into(), json!(macs));
    map.insert("gmacs".into(), json!(macs as f64 / 1e9));
    map.insert("train_only_macs".into(), json!(train_macs));
    Ok(Value::Object(map))
}

fn write_table(out: &mut dyn Write, report: &Value) -> std::io::Result<()> {
    let rows = report["layers"]
        .as_array()
        .map(Vec::as_slice)
        .unwrap_or_default();
    let width = rows
        .iter()
        .filter_map(|r| r["name"].as_str())
        .map(str::len)
        .max()
        .unwrap_or(5)
        .max(5);
    writeln!(out, "{:<width$}  {:>12}  {:>16}", "layer", "params", "MACs")?;
    for r in rows {
        let flag = if r["train_only"].as_bool() == Some(true) {
            "  (train only)"
        } else {
            ""
        };
        writeln!(
            out,
            "{:<width$}  {:>12}  {:>16}{flag}",
            r["name"].as_str().unwrap_or(""),
            r["params"],
            r["macs"]
        )?;
    }
    writeln!(
        out,
        "{:<width$}  {:>12}  {:>16}",
        "total", report["total_params"], report["total_macs"]
    )?;
    writeln!(
        out,
        "{} at {}x{}: {:.3} GMACs (train-only rows excluded: {} MACs)",
        report["preset"].as_str().unwrap_or(""),
        report["height"],
        report["width"],
        report["gmacs"].as_f64().unwrap_or(0.0),
        report["train_only_macs"]
    )
}
