//! Minibatch training, evaluation and difficult-subset selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::data::RgbdSample;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, ParamStore};
use crate::metrics::{aggregate, ImageMetrics, MetricsReport, DEFAULT_BOUNDARY_WIDTH};
use crate::segnet::{bce_graph, forward_graph, seeded_rng, stack, FusionMode, Network, NetworkConfig};
use crate::tensor::{Element, Tensor};

/// Stream id of the minibatch shuffle RNG.
pub const SHUFFLE_STREAM: u64 = 2;

/// Environment variable capping evaluation worker threads; 0 means run
/// sequentially.
pub const THREADS_ENV: &str = "GLASSFUSE_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball SGD with momentum 0.9.
    SgdMomentum,
    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr · (1 − step/total)^0.9`.
    Poly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Whatever `fusion_mode` says.
    None,
    /// Weighted fusion with both weights frozen at 0.5: plain feature
    /// summation.
    FAfOnly,
    /// Weighted fusion with learned weights.
    FAfAndFAw,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "f_af_only" | "f-af" => Ok(Ablation::FAfOnly),
            "f_af_and_f_aw" | "f-af-aw" => Ok(Ablation::FAfAndFAw),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected none, f-af or f-af-aw)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::FAfOnly => "f_af_only",
            Ablation::FAfAndFAw => "f_af_and_f_aw",
        })
    }
}

/// Training hyper-parameters and network shape. Read from a flat TOML file
/// whose keys are the field names; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub fusion_mode: FusionMode,
    pub ablation: Ablation,
    pub shallow_channels: usize,
    pub deep_channels: usize,
    pub shallow_stride: usize,
    pub deep_stride: usize,
    pub decoder_channels: usize,
    pub wff_hidden_relu: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetworkConfig::new(64, 64, FusionMode::Wff);
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Constant,
            fusion_mode: FusionMode::Wff,
            ablation: Ablation::None,
            shallow_channels: net.shallow_channels,
            deep_channels: net.deep_channels,
            shallow_stride: net.shallow_stride,
            deep_stride: net.deep_stride,
            decoder_channels: net.decoder_channels,
            wff_hidden_relu: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks the training fields. The learning rate may be zero, which
    /// leaves the parameters at their initial values.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.ablation != Ablation::None && self.fusion_mode != FusionMode::Wff {
            return Err(Error::Config(format!(
                "ablation {} requires fusion_mode = wff",
                self.ablation
            )));
        }
        Ok(())
    }

    /// Network configuration for inputs of the given size.
    pub fn network_config(&self, height: usize, width: usize) -> Result<NetworkConfig> {
        self.validate()?;
        let cfg = NetworkConfig {
            input_h: height,
            input_w: width,
            shallow_channels: self.shallow_channels,
            deep_channels: self.deep_channels,
            shallow_stride: self.shallow_stride,
            deep_stride: self.deep_stride,
            fusion_mode: self.fusion_mode,
            decoder_channels: self.decoder_channels,
            frozen_weights: self.ablation == Ablation::FAfOnly,
            wff_hidden_relu: self.wff_hidden_relu,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimizer with its per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Element = f32> {
    kind: OptimizerKind,
    step: i32,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Element> Optimizer<T> {
    pub const MOMENTUM: f64 = 0.9;
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update with learning rate `lr` to every parameter that has
    /// a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let lr_t = T::from_f64(lr);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer", p.shape(), g.shape()));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); p.len()]);
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = T::from_f64(Self::MOMENTUM);
                    for ((w, &gi), mi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mi = mu * *mi + gi;
                        *w = *w - lr_t * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| vec![T::zero(); p.len()]);
                    let (b1, b2) = (T::from_f64(Self::BETA1), T::from_f64(Self::BETA2));
                    let c1 = T::from_f64(1.0 - Self::BETA1.powi(self.step));
                    let c2 = T::from_f64(1.0 - Self::BETA2.powi(self.step));
                    let eps = T::from_f64(Self::EPSILON);
                    let one = T::one();
                    for (((w, &gi), mi), vi) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mi = b1 * *mi + (one - b1) * gi;
                        *vi = b2 * *vi + (one - b2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` (0-based) of `total`.
pub fn scheduled_lr(schedule: LrSchedule, base: f64, step: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Poly => base * (1.0 - step as f64 / total.max(1) as f64).max(0.0).powf(0.9),
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: Option<f64>,
    pub val_miou: Option<f64>,
    pub val_biou: Option<f64>,
    pub wall_time_s: f64,
    pub depth_stream_enabled: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint_path: Option<String>,
}

impl TrainLog {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

fn batch_inputs(samples: &[&RgbdSample], uses_depth: bool) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let rgb = stack(&samples.iter().map(|s| &s.rgb).collect::<Vec<_>>())?;
    let depth = if uses_depth {
        Some(stack(&samples.iter().map(|s| &s.depth).collect::<Vec<_>>())?)
    } else {
        None
    };
    Ok((rgb, depth))
}

fn check_sizes(samples: &[RgbdSample], config: &NetworkConfig) -> Result<()> {
    for s in samples {
        s.validate()?;
        if (s.height(), s.width()) != (config.input_h, config.input_w) {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "sample {} is {}x{} but the network expects {}x{}",
                    s.id,
                    s.height(),
                    s.width(),
                    config.input_h,
                    config.input_w
                ),
            ));
        }
    }
    Ok(())
}

/// Loss and gradients of one minibatch.
pub fn batch_gradients(
    network: &Network,
    samples: &[&RgbdSample],
) -> Result<(f64, Gradients<f32>)> {
    let (rgb, depth) = batch_inputs(samples, network.config.uses_depth())?;
    let mut g = Graph::new();
    let out = forward_graph(&mut g, &network.config, &network.params, rgb, depth)?;
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    let loss = bce_graph(&mut g, out.probs, &masks)?;
    let value = g.value(loss).data()[0] as f64;
    Ok((value, g.backward(loss)?))
}

/// Trains a fresh network. `on_epoch` sees each log record as soon as the
/// epoch finishes. An empty validation set skips validation.
pub fn train_with(
    config: &TrainConfig,
    train_set: &[RgbdSample],
    val_set: &[RgbdSample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::invalid("train", "training set is empty"))?;
    let net_config = config.network_config(first.height(), first.width())?;
    check_sizes(train_set, &net_config)?;
    check_sizes(val_set, &net_config)?;

    let mut network = Network::init(net_config, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut shuffle = seeded_rng(config.seed, SHUFFLE_STREAM);
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut log = TrainLog::default();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<&RgbdSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(&network, &samples)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch, loss });
            }
            let lr = scheduled_lr(config.lr_schedule, config.learning_rate, step, total_steps);
            optimizer.step(&mut network.params, &grads, lr)?;
            loss_sum += loss * idx.len() as f64;
            step += 1;
        }
        let (val_iou, val_miou, val_biou) = if val_set.is_empty() {
            (None, None, None)
        } else {
            let r = evaluate_network(&network, val_set)?;
            (Some(r.iou), Some(r.miou), Some(r.biou))
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_iou,
            val_miou,
            val_biou,
            wall_time_s: started.elapsed().as_secs_f64(),
            depth_stream_enabled: network.config.uses_depth(),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }

    let meta = TrainingMeta {
        seed: config.seed,
        epochs: config.epochs,
        final_loss: log.epochs.last().map(|e| e.train_loss),
    };
    Ok((Checkpoint::new(network, meta), log))
}

pub fn train(
    config: &TrainConfig,
    train_set: &[RgbdSample],
    val_set: &[RgbdSample],
) -> Result<(Checkpoint, TrainLog)> {
    train_with(config, train_set, val_set, |_| {})
}

/// Worker count from `GLASSFUSE_THREADS`; all cores when unset, one when 0.
pub fn worker_count() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) => 1,
        Some(n) => n.min(cores.max(1)),
        None => cores,
    }
}

fn image_metrics(network: &Network, sample: &RgbdSample) -> Result<ImageMetrics> {
    let (rgb, depth) = batch_inputs(&[sample], network.config.uses_depth())?;
    let pred = network.predict(rgb, depth)?.remove(0);
    ImageMetrics::compute(sample.id.clone(), &pred, &sample.mask, DEFAULT_BOUNDARY_WIDTH)
}

/// Per-image predictions in dataset order, spread over `workers` threads.
pub fn evaluate_with_workers(
    network: &Network,
    samples: &[RgbdSample],
    workers: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "dataset is empty"));
    }
    check_sizes(samples, &network.config)?;
    let workers = workers.clamp(1, samples.len());
    let per_image: Vec<ImageMetrics> = if workers == 1 {
        samples.iter().map(|s| image_metrics(network, s)).collect::<Result<_>>()?
    } else {
        let chunk = samples.len().div_ceil(workers);
        let parts: Vec<Result<Vec<ImageMetrics>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| image_metrics(network, s)).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(samples.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    aggregate(per_image)
}

pub fn evaluate_network(network: &Network, samples: &[RgbdSample]) -> Result<MetricsReport> {
    evaluate_with_workers(network, samples, worker_count())
}

/// Predicts every sample and aggregates the metrics. The checkpoint is not
/// modified.
pub fn evaluate(checkpoint: &Checkpoint, samples: &[RgbdSample]) -> Result<MetricsReport> {
    evaluate_network(&checkpoint.network()?, samples)
}

/// Ids of the `k` images with the lowest mIoU, lowest first, ties broken by
/// id.
pub fn select_difficult(per_image: &[ImageMetrics], k: usize) -> Result<Vec<String>> {
    let scores: Vec<(String, f64)> = per_image.iter().map(|m| (m.id.clone(), m.miou)).collect();
    lowest_k(scores, k)
}

/// Like [`select_difficult`] with each image scored by its mIoU averaged
/// over several reports. Every report must cover the same images.
pub fn select_difficult_from_reports(reports: &[MetricsReport], k: usize) -> Result<Vec<String>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("select_difficult", "no reports given"))?;
    let mut sums: BTreeMap<&str, f64> = first.per_image.iter().map(|m| (m.id.as_str(), 0.0)).collect();
    for r in reports {
        if r.per_image.len() != sums.len() {
            return Err(Error::invalid("select_difficult", "reports cover different images"));
        }
        for m in &r.per_image {
            *sums
                .get_mut(m.id.as_str())
                .ok_or_else(|| Error::invalid("select_difficult", format!("image {} is not in every report", m.id)))? += m.miou;
        }
    }
    let n = reports.len() as f64;
    lowest_k(sums.into_iter().map(|(id, s)| (id.to_string(), s / n)).collect(), k)
}

fn lowest_k(mut scores: Vec<(String, f64)>, k: usize) -> Result<Vec<String>> {
    if k > scores.len() {
        return Err(Error::invalid(
            "select_difficult",
            format!("k = {k} exceeds the {} available images", scores.len()),
        ));
    }
    scores.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scores.into_iter().take(k).map(|s| s.0).collect())
}
