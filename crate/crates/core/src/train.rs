//! Adam, the step learning-rate schedule, whole-image inference and the
//! training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{crop_back, pad_to_multiple, quantize, save_checkpoint, save_image, PairedDataset, PatchSampler};
use crate::metrics::{luminance_metrics, negative_ssim_loss, MetricReport};
use crate::model::{Ablation, DerainOutput, Gradients, ModelConfig, ParameterStore, Srnet};
use crate::tensor::{RngState, Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParameterStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update. Moments always advance; parameters are
/// left untouched when `lr` is zero.
pub fn adam_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if grads.as_slice().len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Config("optimizer state does not match the parameter store".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    for (((param, g), m), v) in store.values_mut().zip(grads.as_slice()).zip(&mut state.m).zip(&mut state.v) {
        if param.shape() != g.shape() {
            return Err(Error::ShapeMismatch { op: "adam_step", expected: param.shape(), actual: g.shape() });
        }
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let g = g.as_f64();
            let mn = ADAM_BETA1 * m.as_f64() + (1.0 - ADAM_BETA1) * g;
            let vn = ADAM_BETA2 * v.as_f64() + (1.0 - ADAM_BETA2) * g * g;
            *m = T::from_f64(mn);
            *v = T::from_f64(vn);
            if lr != 0.0 {
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
                *p = T::from_f64(p.as_f64() - update);
            }
        }
    }
    Ok(())
}

/// Piecewise-constant learning rate divided by `factor` at each milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { base_lr: 1e-3, milestones: vec![30, 50, 80], factor: 5.0 }
    }
}

impl Schedule {
    /// Learning rate for the 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr / self.factor.powi(drops as i32)
    }

    /// Milestones rescaled from a 100-epoch plan to `epochs`.
    pub fn scaled_to(&self, epochs: usize) -> Self {
        let milestones = self.milestones.iter().map(|&m| (m * epochs).div_ceil(100).max(1)).collect();
        Self { milestones, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Small network and patches that train in minutes on a CPU.
    Desk,
    /// The full-size settings; meant for long runs.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub patch: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Extra evaluation epochs besides the schedule milestones and the end.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch: 18, patch: 100, schedule: Schedule::default(), seed: 0, eval_every: None }
    }
}

impl Preset {
    pub fn configs(self, variant: Ablation) -> (ModelConfig, TrainConfig) {
        match self {
            Preset::Paper => (ModelConfig::ablation(variant, 64, 2), TrainConfig::default()),
            Preset::Desk => {
                let epochs = 30;
                let train = TrainConfig {
                    epochs,
                    batch: 10,
                    patch: 48,
                    schedule: Schedule::default().scaled_to(epochs),
                    ..TrainConfig::default()
                };
                (ModelConfig::ablation(variant, 8, 1), train)
            }
        }
    }
}

/// Rainy/clean pair held in memory.
#[derive(Clone, Debug)]
pub struct Pair {
    pub name: String,
    pub rainy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

pub fn load_pairs(data: &PairedDataset) -> Result<Vec<Pair>> {
    (0..data.len())
        .map(|i| {
            let (rainy, clean) = data.load_pair(i)?;
            Ok(Pair { name: data.ids()[i].clone(), rainy, clean })
        })
        .collect()
}

/// Result of running the network on one image of any size.
#[derive(Clone, Debug)]
pub struct Derained<T: Scalar> {
    /// Background cropped to the input extent.
    pub background: Tensor<T>,
    /// Rain cropped to the input extent.
    pub rain: Tensor<T>,
    /// Input after alignment padding.
    pub padded_input: Tensor<T>,
    /// Full network output on the padded input.
    pub output: DerainOutput<T>,
    pub extent: (usize, usize),
}

/// Pads to the network alignment, runs forward, and crops back.
pub fn derain<T: Scalar>(model: &Srnet<T>, image: &Tensor<T>) -> Result<Derained<T>> {
    let (padded, extent) = pad_to_multiple(image, model.config().alignment())?;
    let (output, _) = model.forward(&padded)?;
    Ok(Derained {
        background: crop_back(&output.background, extent)?,
        rain: crop_back(&output.rain, extent)?,
        padded_input: padded,
        output,
        extent,
    })
}

/// Rounds to the 8-bit grid a saved PNG would hold.
pub fn quantize_image<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::from_f64(f64::from(quantize(v.as_f64())) / 255.0))
}

/// Luminance metrics of the derained (8-bit quantized) outputs.
pub fn evaluate(model: &Srnet<f32>, pairs: &[Pair]) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for p in pairs {
        let b = quantize_image(&derain(model, &p.rainy)?.background);
        let (psnr, ssim) = luminance_metrics(&b, &p.clean)?;
        report.push(p.name.clone(), psnr, ssim);
    }
    Ok(report)
}

/// Luminance metrics of the rainy inputs themselves.
pub fn evaluate_inputs(pairs: &[Pair]) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for p in pairs {
        let (psnr, ssim) = luminance_metrics(&p.rainy, &p.clean)?;
        report.push(p.name.clone(), psnr, ssim);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub psnr_y: Option<f64>,
    pub ssim_y: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}", prec = p));
        format!(
            "epoch {} lr {:.3e} loss {:.6} psnr_y {} ssim_y {} time {:.2}",
            self.epoch,
            self.lr,
            self.loss,
            opt(self.psnr_y, 4),
            opt(self.ssim_y, 4),
            self.seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    /// Luminance metrics of the untouched rainy held-out images.
    pub input_psnr_y: Option<f64>,
    pub input_ssim_y: Option<f64>,
    pub best_psnr_y: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_psnr_y: Option<f64>,
    pub final_ssim_y: Option<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Files written by [`train`]. Any of them may be omitted.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    /// Directory for the diagnostic dump on a non-finite loss.
    pub dump_dir: Option<PathBuf>,
}

impl TrainOutputs {
    /// `out` plus `<out>.best`, `<out>.log` and `<out>.json` siblings.
    pub fn beside(out: impl AsRef<Path>) -> Self {
        let out = out.as_ref();
        let with = |ext: &str| {
            let mut s = out.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        Self {
            checkpoint: Some(out.to_path_buf()),
            best_checkpoint: Some(with(".best")),
            log: Some(with(".log")),
            summary: Some(with(".json")),
            dump_dir: Some(with(".nonfinite")),
        }
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: Srnet<f32>,
    pub report: TrainReport,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    f.flush()?;
    Ok(())
}

fn dump_batch(
    dir: &Path,
    epoch: usize,
    step: usize,
    rainy: &Tensor<f32>,
    clean: &Tensor<f32>,
    why: &str,
) -> Result<()> {
    let dir = dir.join(format!("epoch{epoch}_step{step}"));
    fs::create_dir_all(&dir)?;
    for b in 0..rainy.shape().batch {
        save_image(&rainy.batch_item(b), dir.join(format!("rainy_{b}.png")))?;
        save_image(&clean.batch_item(b), dir.join(format!("clean_{b}.png")))?;
    }
    fs::write(dir.join("reason.txt"), format!("{why}\n"))?;
    Ok(())
}

fn eval_epochs(hyper: &TrainConfig) -> Vec<usize> {
    let mut e: Vec<usize> =
        hyper.schedule.milestones.iter().filter(|&&m| m >= 1 && m <= hyper.epochs).map(|m| m - 1).collect();
    if let Some(k) = hyper.eval_every.filter(|&k| k > 0) {
        e.extend((k - 1..hyper.epochs).step_by(k));
    }
    if hyper.epochs > 0 {
        e.push(hyper.epochs - 1);
    }
    e.sort_unstable();
    e.dedup();
    e
}

/// Trains a freshly initialized network on in-memory pairs.
///
/// Each epoch visits every training pair once in a seeded order, takes one
/// aligned random patch from each, and steps Adam once per batch on the
/// negative RGB SSIM between the background estimate and the clean patch.
/// The held-out pairs are evaluated on luminance after each milestone and
/// after the last epoch.
pub fn train(
    train_pairs: &[Pair],
    eval_pairs: &[Pair],
    config: ModelConfig,
    hyper: &TrainConfig,
    outputs: &TrainOutputs,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainResult> {
    config.validate()?;
    if hyper.batch == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if train_pairs.is_empty() && hyper.epochs > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut model = Srnet::<f32>::new(config.clone(), &mut RngState::new(hyper.seed).split(0))?;
    let mut state = OptimState::new(model.store());
    let mut report = TrainReport {
        seed: hyper.seed,
        config_hash: format!("{:016x}", config.fingerprint()),
        ..TrainReport::default()
    };
    if !eval_pairs.is_empty() {
        let r = evaluate_inputs(eval_pairs)?;
        report.input_psnr_y = Some(r.psnr_y());
        report.input_ssim_y = Some(r.ssim_y());
    }
    if let Some(log) = &outputs.log {
        if let Some(dir) = log.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(log, "")?;
    }
    let evals = eval_epochs(hyper);
    let order_seed = hyper.seed.wrapping_add(1);
    let patch_base = RngState::new(hyper.seed.wrapping_add(2));

    for epoch in 0..hyper.epochs {
        let start = Instant::now();
        let lr = hyper.schedule.lr_at(epoch);
        let order = crate::io::epoch_order(train_pairs.len(), epoch, order_seed);
        let mut sampler = PatchSampler::new(hyper.patch, config.alignment(), patch_base.split(epoch as u64))?;
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (step, chunk) in order.chunks(hyper.batch).enumerate() {
            let mut rainy = Vec::with_capacity(chunk.len());
            let mut clean = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (r, c) = sampler.sample_pair(&train_pairs[i].rainy, &train_pairs[i].clean)?;
                rainy.push(r);
                clean.push(c);
            }
            let (rainy, clean) = (Tensor::stack(&rainy)?, Tensor::stack(&clean)?);
            let (out, trace) = model.forward(&rainy)?;
            let (loss, grad) = negative_ssim_loss(&out.background, &clean)?;
            let grads = if loss.is_finite() { Some(model.backward(&grad, trace)?) } else { None };
            let bad = match &grads {
                None => Some(format!("loss {loss}")),
                Some(g) => g.as_slice().iter().position(|t| !t.is_finite()).map(|i| {
                    format!("gradient of {} is not finite", model.store().iter().nth(i).map_or("?", |p| &p.name))
                }),
            };
            if let Some(why) = bad {
                let why = format!("epoch {epoch} step {step}: {why}");
                if let Some(dir) = &outputs.dump_dir {
                    dump_batch(dir, epoch, step, &rainy, &clean, &why)?;
                }
                return Err(Error::NonFinite(why));
            }
            adam_step(model.store_mut(), &grads.expect("checked above"), &mut state, lr)?;
            loss_sum += loss;
            batches += 1;
        }
        let mut rec =
            EpochRecord { epoch, lr, loss: loss_sum / batches.max(1) as f64, psnr_y: None, ssim_y: None, seconds: 0.0 };
        if !eval_pairs.is_empty() && evals.contains(&epoch) {
            let r = evaluate(&model, eval_pairs)?;
            rec.psnr_y = Some(r.psnr_y());
            rec.ssim_y = Some(r.ssim_y());
            if report.best_psnr_y.is_none_or(|b| r.psnr_y() > b) {
                report.best_psnr_y = Some(r.psnr_y());
                report.best_epoch = Some(epoch);
                if let Some(p) = &outputs.best_checkpoint {
                    save_checkpoint(p, &model)?;
                }
            }
            report.final_psnr_y = rec.psnr_y;
            report.final_ssim_y = rec.ssim_y;
        }
        rec.seconds = start.elapsed().as_secs_f64();
        if let Some(log) = &outputs.log {
            append_line(log, &rec.log_line())?;
        }
        progress(&rec);
        report.epochs.push(rec);
    }
    if let Some(p) = &outputs.checkpoint {
        save_checkpoint(p, &model)?;
    }
    if let Some(p) = &outputs.summary {
        fs::write(p, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(TrainResult { model, report })
}
