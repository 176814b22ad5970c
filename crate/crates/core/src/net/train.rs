use ect_autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{compound_loss, LossConfig};
use super::{input_batch, target_batch, Mode, Network, NetworkConfig};
use crate::dataset::{add_noise_with, mirror_sample, stream_rng, Dataset, NoiseModel};
use crate::error::{Error, Result};
use crate::fem::CapacitanceMatrix;
use crate::image::PermittivityImage;
use crate::metrics::{iou, pearson_cc, IOU_THRESHOLD};

const SHUFFLE_STREAM: u64 = 3;
const NOISE_STREAM: u64 = 4;
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Replace each sample by its left-right mirror image with probability 1/2, drawn afresh every epoch.
    pub mirror: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            noise_std: 0.03,
            seed: 0,
            loss: LossConfig::default(),
            mirror: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        NoiseModel { std: self.noise_std }.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cc: f64,
    pub val_iou: f64,
    pub lambdas: [f64; 3],
}

impl EpochRecord {
    /// One UTF-8 line of JSON.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub train: TrainConfig,
    pub train_count: usize,
    pub val_count: usize,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_cc: f64,
    pub best_val_iou: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network<f32>,
    pub meta: TrainingMeta,
}

impl TrainedModel {
    pub fn predict(&self, c: &CapacitanceMatrix) -> Result<PermittivityImage> {
        self.network.predict(c)
    }
}

/// Mean CC and IoU of eval-mode predictions over `data`.
pub(crate) fn validation_scores(net: &Network<f32>, data: &Dataset) -> Result<(f64, f64)> {
    let (mut cc, mut io) = (0.0, 0.0);
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let cs: Vec<&CapacitanceMatrix> = chunk.iter().map(|s| &s.capacitance).collect();
        for (pred, s) in net.predict_batch(&cs)?.iter().zip(chunk) {
            cc += pearson_cc(pred.as_image(), s.image.as_image())?;
            io += iou(pred.as_image(), s.image.as_image(), IOU_THRESHOLD)?;
        }
    }
    let n = data.len().max(1) as f64;
    Ok((cc / n, io / n))
}

pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    train_with(train_set, val_set, net_cfg, cfg, |_| {})
}

/// Mini-batch Adam training. Each epoch reshuffles the training set and draws
/// fresh measurement noise for every sample; the parameters with the best
/// validation CC are returned. `on_epoch` sees every history record as it is produced.
pub fn train_with(
    train_set: &Dataset,
    val_set: &Dataset,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut net = Network::<f32>::new(net_cfg, cfg.seed)?;
    let mut adam = AdamState::new(net.params());
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let noise = NoiseModel { std: cfg.noise_std };
    let n = train_set.len();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Network<f32>, usize, f64, f64)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (noisy, images): (Vec<CapacitanceMatrix>, Vec<PermittivityImage>) = idx
                .iter()
                .map(|&i| {
                    let mut rng = stream_rng(cfg.seed, NOISE_STREAM, (epoch * n + i) as u64);
                    let s = &train_set.samples[i];
                    let (c, img) = if cfg.mirror && rng.random_bool(0.5) {
                        mirror_sample(&s.capacitance, &s.image)
                    } else {
                        (s.capacitance.clone(), s.image.clone())
                    };
                    (add_noise_with(&c, &noise, &mut rng), img)
                })
                .unzip();
            let refs: Vec<&CapacitanceMatrix> = noisy.iter().collect();
            let targets: Vec<&PermittivityImage> = images.iter().collect();

            let mut tape = Tape::<f32>::new();
            let x = tape.constant(input_batch(&refs, net_cfg)?);
            let y = tape.constant(target_batch(&targets)?);
            let pass = net.record(&mut tape, x, Mode::Train)?;
            let loss = compound_loss(&mut tape, pass.output, y, pass.lambda_raw(&net), &cfg.loss)?;
            let value = f64::from(tape.value(loss).item());
            let lambdas = net.lambdas();
            let diverged = || Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch: b,
                lambdas,
            };
            if !value.is_finite() {
                return Err(diverged());
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor<f32>> = pass.params.iter().map(|&v| grads.wrt(v)).collect();
            if let Err(e) = adam_step(net.params_mut(), &g, &mut adam, &adam_cfg) {
                return Err(match e {
                    ect_autodiff::Error::NonFiniteGradient { .. } => diverged(),
                    other => other.into(),
                });
            }
            net.update_running(&pass.batch_stats);
            loss_sum += value * idx.len() as f64;
        }
        let (val_cc, val_iou) = validation_scores(&net, val_set)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            val_cc,
            val_iou,
            lambdas: net.lambdas(),
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(_, _, cc, _)| val_cc > *cc) {
            best = Some((net.clone(), epoch + 1, val_cc, val_iou));
        }
    }
    let (network, best_epoch, best_val_cc, best_val_iou) = best.expect("at least one epoch");
    Ok(TrainedModel {
        network,
        meta: TrainingMeta {
            train: *cfg,
            train_count: n,
            val_count: val_set.len(),
            best_epoch,
            best_val_cc,
            best_val_iou,
            history,
        },
    })
}
