//! Training loop, train-split evaluation and tiled inference.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde_json::json;

use crate::data::tile::{tile_tensor, untile_tensor};
use crate::data::{augment, collate, synth_generate, tta_flip_infer, Dataset, DatasetMeta, Sample};
use crate::error::TensorError;
use crate::network::{Model, ENCODER_STRIDE};
use crate::nn::Mode;
use crate::objective::{total_loss, ConfusionMatrix, LossReport, MetricsReport};
use crate::optim::{cosine_lr, AdamW};
use crate::rng::SeedTree;
use crate::tensor::{Graph, Tensor};

use super::checkpoint::{limbs_to_u64, u64_to_limbs, Checkpoint, BEST_MIOU, SEED, STEP};
use super::config::RunConfig;
use super::CliError;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

/// Dataset from `cfg.data.root`, or the synthetic generator.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data.root {
        Some(root) => Ok(Dataset::load(root)?),
        None => {
            let spec = &cfg.data.synth;
            let items = synth_generate(spec)?
                .into_iter()
                .enumerate()
                .map(|(i, s)| (format!("scene{i:04}"), s))
                .collect();
            Ok(Dataset {
                meta: DatasetMeta {
                    num_classes: crate::data::synth::NUM_CLASSES,
                    ignore_label: cfg.loss.ignore_label,
                    class_names: spec.class_names(),
                },
                items,
            })
        }
    }
}

pub fn check_classes(cfg: &RunConfig, meta: &DatasetMeta) -> Result<(), CliError> {
    if meta.num_classes != cfg.model.num_classes {
        return Err(CliError::Data(format!(
            "dataset has {} classes, model has {}",
            meta.num_classes, cfg.model.num_classes
        )));
    }
    Ok(())
}

fn pad_to_multiple(s: &Sample, m: usize, ignore: u8) -> Sample {
    let (h, w) = (s.height(), s.width());
    let (ph, pw) = (h.div_ceil(m).max(1) * m, w.div_ceil(m).max(1) * m);
    if (ph, pw) == (h, w) {
        return s.clone();
    }
    let mut image = vec![0f32; 3 * ph * pw];
    let mut mask = vec![ignore; ph * pw];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                image[(c * ph + y) * pw + x] = s.image.data()[(c * h + y) * w + x];
            }
            mask[y * pw + x] = s.mask[y * w + x];
        }
    }
    Sample {
        image: Tensor::from_vec(&[3, ph, pw], image).expect("shape matches"),
        mask,
    }
}

/// Training inputs: oversized images are tiled, the rest padded to a
/// multiple of the encoder stride.
pub fn training_samples(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<Sample>, CliError> {
    let ignore = cfg.loss.ignore_label.unwrap_or(255);
    let tile = cfg.data.tile;
    let mut out = Vec::new();
    for s in ds.samples() {
        if s.height() > tile.tile || s.width() > tile.tile {
            let spec = crate::data::TileSpec {
                mask_pad: ignore,
                ..tile
            };
            out.extend(crate::data::pad_and_tile(s, &spec)?.0);
        } else {
            out.push(pad_to_multiple(s, ENCODER_STRIDE, ignore));
        }
    }
    Ok(out)
}

fn crop_chw(x: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let [c, ph, pw] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        x.data()[(ch * ph + rest / w) * pw + rest % w]
    })
}

/// Eval-mode logits `[K, H, W]` for one `[3, H, W]` image. Images larger
/// than `tile` on either side are processed tile by tile; others are padded
/// to a multiple of 32 and cropped back.
pub fn predict_image(
    model: &mut Model<f32>,
    image: &Tensor<f32>,
    tile: usize,
    tta: bool,
) -> Result<Tensor<f32>, CliError> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut run = |x: &Tensor<f32>| -> Result<Tensor<f32>, CliError> {
        let (c, th, tw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let batch = x.clone().reshaped(&[1, c, th, tw])?;
        let logits = if tta {
            tta_flip_infer(model, &batch)?
        } else {
            model.predict(&batch)?
        };
        let k = logits.shape()[1];
        Ok(logits.reshaped(&[k, th, tw])?)
    };
    if h > tile || w > tile {
        let (tiles, layout) = tile_tensor(image, tile, 0.0)?;
        let outs = tiles.iter().map(&mut run).collect::<Result<Vec<_>, _>>()?;
        Ok(untile_tensor(&outs, &layout)?)
    } else {
        let (ph, pw) = (
            h.div_ceil(ENCODER_STRIDE) * ENCODER_STRIDE,
            w.div_ceil(ENCODER_STRIDE) * ENCODER_STRIDE,
        );
        let padded = Tensor::from_fn(&[3, ph, pw], |i| {
            let (c, rest) = (i / (ph * pw), i % (ph * pw));
            let (y, x) = (rest / pw, rest % pw);
            if y < h && x < w {
                image.data()[(c * h + y) * w + x]
            } else {
                0.0
            }
        });
        Ok(crop_chw(&run(&padded)?, h, w))
    }
}

/// Argmax label map of `[K, H, W]` logits.
pub fn argmax_mask(logits: &Tensor<f32>) -> Result<Vec<u8>, CliError> {
    let s = logits.shape();
    Ok(logits
        .clone()
        .reshaped(&[1, s[0], s[1], s[2]])?
        .argmax_channels()?)
}

/// Confusion matrix of eval-mode predictions over `samples`.
pub fn evaluate(
    model: &mut Model<f32>,
    samples: &[Sample],
    tile: usize,
    tta: bool,
    ignore: Option<u8>,
) -> Result<ConfusionMatrix, CliError> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for s in samples {
        let logits = predict_image(model, &s.image, tile, tta)?;
        let pred = argmax_mask(&logits)?;
        cm.accumulate(&pred, &s.mask, ignore)?;
    }
    Ok(cm)
}

/// [`evaluate`] with the samples split into `workers` contiguous shards,
/// each scored by its own copy of the model. Confusion counts are integer
/// sums, so the result does not depend on `workers`.
pub fn evaluate_sharded(
    model: &mut Model<f32>,
    samples: &[Sample],
    tile: usize,
    tta: bool,
    ignore: Option<u8>,
    workers: usize,
) -> Result<ConfusionMatrix, CliError> {
    let workers = workers.clamp(1, samples.len().max(1));
    if workers == 1 {
        return evaluate(model, samples, tile, tta, ignore);
    }
    let cfg = *model.config();
    let weights = Checkpoint::from_store(&model.store, false);
    let chunk = samples.len().div_ceil(workers);
    let parts = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|shard| {
                let weights = &weights;
                scope.spawn(move || -> Result<ConfusionMatrix, CliError> {
                    let mut local = Model::<f32>::new(cfg, &SeedTree::new(0))?;
                    weights.apply_to(&mut local.store, false)?;
                    evaluate(&mut local, shard, tile, tta, ignore)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Vec<_>>()
    });
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    for part in parts {
        cm.merge(&part?)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub metrics: Option<MetricsReport>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model<f32>,
    pub optimizer: AdamW,
    pub dataset: Dataset,
    pub samples: Vec<Sample>,
    pub best_miou: Option<f64>,
    seeds: SeedTree,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let dataset = load_dataset(&cfg)?;
        check_classes(&cfg, &dataset.meta)?;
        let samples = training_samples(&cfg, &dataset)?;
        let seeds = SeedTree::new(cfg.seed);
        let model = Model::new(cfg.model, &seeds)?;
        let optimizer = AdamW::new(cfg.optimizer.adamw());
        Ok(Trainer {
            cfg,
            model,
            optimizer,
            dataset,
            samples,
            best_miou: None,
            seeds,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.samples.len().div_ceil(self.cfg.schedule.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.schedule.epochs
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    /// Training checkpoint: parameters, running statistics, optimizer
    /// moments, step counter, seed and best train mIoU.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.model.store, true);
        ck.push(STEP, u64_to_limbs(self.step_count()));
        ck.push(SEED, u64_to_limbs(self.cfg.seed));
        if let Some(best) = self.best_miou {
            ck.push(BEST_MIOU, u64_to_limbs(best.to_bits()));
        }
        ck
    }

    pub fn resume(&mut self, ck: &Checkpoint) -> Result<(), CliError> {
        let read = |name: &str| {
            ck.get(name)
                .and_then(limbs_to_u64)
                .ok_or_else(|| CliError::Data(format!("checkpoint lacks a valid {name}")))
        };
        let step = read(STEP)?;
        let seed = read(SEED)?;
        if seed != self.cfg.seed {
            return Err(CliError::Config(format!(
                "checkpoint was trained with seed {seed}, config says {}",
                self.cfg.seed
            )));
        }
        if step > self.total_steps() {
            return Err(CliError::Config(format!(
                "checkpoint is at step {step}, beyond the {} scheduled steps",
                self.total_steps()
            )));
        }
        ck.apply_to(&mut self.model.store, false)?;
        self.optimizer.set_steps_taken(step);
        self.best_miou = ck.get(BEST_MIOU).and_then(limbs_to_u64).map(f64::from_bits);
        Ok(())
    }

    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, within) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.seeds.split("shuffle").stream(&format!("epoch{epoch}")));
        let bs = self.cfg.schedule.batch_size;
        order[within * bs..((within + 1) * bs).min(order.len())].to_vec()
    }

    /// One optimizer step on the next batch of the schedule.
    pub fn step(&mut self) -> Result<StepRecord, CliError> {
        let step = self.step_count();
        let epoch = step / self.steps_per_epoch();
        let lr = cosine_lr(step, self.total_steps(), self.cfg.optimizer.lr)?;
        let aug_seed = self
            .seeds
            .split("augment")
            .split(&format!("epoch{epoch}"))
            .seed();
        let ignore = self.cfg.loss.ignore_label.unwrap_or(255);
        let batch = self
            .batch_indices(step)
            .into_iter()
            .map(|i| {
                augment(
                    &self.samples[i],
                    aug_seed,
                    i,
                    &self.cfg.data.augment,
                    ignore,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (images, target) = collate(&batch.iter().collect::<Vec<_>>())?;

        let numeric = |e: TensorError| match e {
            TensorError::NonFinite { .. } => CliError::Numeric(format!("step {step}: {e}")),
            other => CliError::Model(other),
        };
        let g = Graph::new();
        let x = g.constant(images);
        let out = self.model.forward(&g, &x, Mode::Train).map_err(numeric)?;
        let (loss, report) = total_loss(&g, &out.logits, out.aux.as_ref(), &target, &self.cfg.loss)
            .map_err(numeric)?;
        if !report.total.is_finite() {
            return Err(CliError::Numeric(format!("non-finite loss at step {step}")));
        }
        let grads = g.backward(&loss).map_err(numeric)?;
        self.model.store.zero_grad();
        self.model.store.accumulate(&grads);
        self.optimizer
            .step(&mut self.model.store, lr)
            .map_err(numeric)?;
        Ok(StepRecord {
            step,
            epoch,
            lr,
            loss: report,
        })
    }

    /// Eval-mode metrics on the (unaugmented) training split.
    pub fn train_metrics(&mut self) -> Result<MetricsReport, CliError> {
        let tile = self.cfg.data.tile.tile;
        let ignore = self.dataset.meta.ignore_label;
        let samples: Vec<Sample> = self.dataset.samples().cloned().collect();
        let cm = evaluate_sharded(
            &mut self.model,
            &samples,
            tile,
            false,
            ignore,
            super::threads()?,
        )?;
        Ok(cm.compute()?)
    }

    /// Trains until the schedule ends, or until `stop_after_epoch` epochs
    /// are complete. Appends to `train_log.jsonl` in the output directory
    /// and rewrites `last.ckpt` / `best.ckpt` after every evaluated epoch.
    pub fn run(
        &mut self,
        out_dir: &Path,
        stop_after_epoch: Option<u64>,
    ) -> Result<Vec<EpochRecord>, CliError> {
        fs::create_dir_all(out_dir)?;
        let file = if self.step_count() == 0 {
            File::create(out_dir.join(LOG_FILE))?
        } else {
            OpenOptions::new()
                .append(true)
                .create(true)
                .open(out_dir.join(LOG_FILE))?
        };
        let mut log = BufWriter::new(file);
        let spe = self.steps_per_epoch();
        let epochs = self.cfg.schedule.epochs;
        let last_epoch = stop_after_epoch.map_or(epochs, |e| e.min(epochs));
        let names = self.dataset.meta.class_names.clone();
        let mut records = Vec::new();
        while self.step_count() < last_epoch * spe {
            let r = self.step()?;
            let l = &r.loss;
            let line = json!({
                "kind": "step", "step": r.step, "epoch": r.epoch, "lr": r.lr,
                "ce": l.ce, "dice": l.dice, "principal": l.principal, "aux": l.aux, "total": l.total,
            });
            writeln!(log, "{line}")?;
            if !self.step_count().is_multiple_of(spe) {
                continue;
            }
            let epoch = self.step_count() / spe;
            let metrics = if epoch.is_multiple_of(self.cfg.schedule.eval_every) || epoch == epochs {
                Some(self.train_metrics()?)
            } else {
                None
            };
            let mut improved = false;
            if let Some(m) = &metrics {
                let miou = m.miou.unwrap_or(0.0);
                writeln!(
                    log,
                    "{}",
                    json!({"kind": "epoch", "epoch": epoch - 1, "step": self.step_count(), "metrics": m.to_json(&names)})
                )?;
                if self.best_miou.is_none_or(|b| miou > b) {
                    self.best_miou = Some(miou);
                    improved = true;
                }
            }
            log.flush()?;
            let ck = self.checkpoint();
            ck.save(&out_dir.join(LAST_CKPT))?;
            if improved {
                ck.save(&out_dir.join(BEST_CKPT))?;
            }
            records.push(EpochRecord {
                epoch: epoch - 1,
                step: self.step_count(),
                metrics,
            });
        }
        log.flush()?;
        Ok(records)
    }
}
