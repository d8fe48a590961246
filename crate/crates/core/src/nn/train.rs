use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{ensure, Result};
use crate::rng::{self, permutation};
use crate::tensor::Tensor2;

use super::loss::{cross_entropy_grad, cross_entropy_per_sample};
use super::mlp::Mlp;
use super::optim::{AdamWConfig, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` at each milestone, given as fractions of
    /// the total epoch count.
    MultiStep { milestones: Vec<f64>, gamma: f64 },
    /// Cosine decay from the base rate to `min_ratio * base` over the run.
    Cosine { min_ratio: f64 },
}

impl LrSchedule {
    /// Decays at 2/3 and 5/6 of training by a factor of 0.2.
    pub fn hard_label() -> Self {
        LrSchedule::MultiStep {
            milestones: vec![2.0 / 3.0, 5.0 / 6.0],
            gamma: 0.2,
        }
    }

    pub fn lr_at(&self, base: f64, epoch: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::MultiStep { milestones, gamma } => {
                let passed = milestones
                    .iter()
                    .filter(|&&m| epoch >= (m * total as f64).round() as usize)
                    .count();
                base * gamma.powi(passed as i32)
            }
            LrSchedule::Cosine { min_ratio } => {
                if total <= 1 {
                    return base;
                }
                let progress = epoch as f64 / (total - 1) as f64;
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                base * (min_ratio + (1.0 - min_ratio) * cos)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            optim: AdamWConfig::default(),
            schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch cross-entropy over the epoch.
    pub loss: f64,
    /// Fraction of samples classified correctly by the minibatch forward passes.
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "loss", "accuracy"])
            .map_err(crate::data::csv_err)?;
        for r in &self.records {
            out.write_record([r.epoch.to_string(), r.loss.to_string(), r.accuracy.to_string()])
                .map_err(crate::data::csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &Mlp, x: &Tensor2) -> Result<Vec<usize>> {
    let logits = params.forward(x)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

pub fn accuracy(params: &Mlp, data: &LabeledSet) -> Result<f64> {
    ensure!(!data.is_empty(), Config, "accuracy of an empty dataset");
    let pred = predict(params, &data.x)?;
    let correct = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// One pass over `data` in shuffled minibatches. `on_step` sees the
/// parameters after every optimizer update.
pub fn run_epoch(
    params: &mut Mlp,
    optim: &mut OptimState,
    data: &LabeledSet,
    batch_size: usize,
    lr: f64,
    rng: &mut impl Rng,
    on_step: &mut dyn FnMut(&Mlp) -> Result<()>,
) -> Result<(f64, f64)> {
    ensure!(!data.is_empty(), Config, "training on an empty dataset");
    ensure!(batch_size >= 1, Config, "batch size must be positive");
    let order = permutation(data.len(), rng);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut grads = vec![0.0; params.num_params()];
    for chunk in order.chunks(batch_size) {
        let batch = data.subset(chunk);
        let cache = params.forward_cached(&batch.x)?;
        let per = cross_entropy_per_sample(&cache.output, &batch.y)?;
        loss_sum += per.iter().sum::<f64>();
        correct += cache
            .output
            .iter_rows()
            .zip(&batch.y)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        let g_out = cross_entropy_grad(&cache.output, &batch.y, 1.0 / batch.len() as f64)?;
        grads.fill(0.0);
        params.backward(&cache, &g_out, Some(&mut grads))?;
        optim.step(params.params_mut(), &grads, lr)?;
        on_step(params)?;
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Trains a classifier with AdamW under `cfg`, seeding minibatch order from `seed`.
pub fn train_supervised(
    mut params: Mlp,
    data: &LabeledSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Mlp, TrainLog)> {
    ensure!(!data.is_empty(), Config, "training on an empty dataset");
    ensure!(
        data.dim() == params.input_dim(),
        Dimension,
        "data has {} features, network expects {}",
        data.dim(),
        params.input_dim()
    );
    ensure!(
        data.num_classes <= params.output_dim(),
        Dimension,
        "network has fewer outputs than classes"
    );
    let mut optim = OptimState::new(cfg.optim, params.num_params())?;
    let mut rng = rng::stream(seed, "minibatch", &[]);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.optim.lr, epoch, cfg.epochs);
        let (loss, acc) = run_epoch(
            &mut params,
            &mut optim,
            data,
            cfg.batch_size,
            lr,
            &mut rng,
            &mut |_| Ok(()),
        )?;
        log.records.push(EpochRecord {
            epoch,
            loss,
            accuracy: acc,
            lr,
        });
    }
    Ok((params, log))
}
