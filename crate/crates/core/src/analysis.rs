//! Diagnostics for distilled datasets.
//!
//! * [`cross_increment_matrix`]: train on one increment, test on another.
//! * [`error_probe`]: mistakes a model fitted to the first increment makes
//!   on later ones.
//! * [`loss_spikes`]: the jump in learner loss each time data is appended.
//! * [`dynamics_map`]: per-sample mean and spread of the ground-truth class
//!   probability over a short probe training run, summarised with
//!   [`categorize`] and compared across datasets with [`js_divergence`].
//! * [`in_distribution_map`]: reference-model confidence against probe mean.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{csv_err, LabeledSet};
use crate::distill::StagedLog;
use crate::error::{ensure, Error, Result};
use crate::learnability::class_probability;
use crate::nn::train::run_epoch;
use crate::nn::{predict, train_supervised, AdamWConfig, ClassifierArch, LrSchedule, Mlp, OptimState, TrainConfig};
use crate::rng;

/// How a fresh evaluation model is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub arch: ClassifierArch,
    pub train: TrainConfig,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::default(),
            train: TrainConfig {
                epochs: 300,
                batch_size: 32,
                optim: AdamWConfig::default(),
                schedule: LrSchedule::hard_label(),
            },
        }
    }
}

impl EvalProtocol {
    /// A fresh model trained on `data`, initialised and shuffled from
    /// streams named `name` at `coords`.
    pub fn fit(&self, data: &LabeledSet, master: u64, name: &str, coords: &[u64]) -> Result<Mlp> {
        let init = self
            .arch
            .build(data.dim(), data.num_classes, &mut rng::stream(master, name, coords))?;
        let seed = rng::derive_seed(master, name, coords);
        Ok(train_supervised(init, data, &self.train, seed)?.0)
    }
}

pub fn correct_count(model: &Mlp, data: &LabeledSet) -> Result<usize> {
    let pred = predict(model, &data.x)?;
    Ok(pred.iter().zip(&data.y).filter(|(p, y)| p == y).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyMatrix {
    pub label: String,
    /// `entries[r][c]`: accuracy on increment `c` of a model trained on
    /// increment `r` alone. `None` for rows that were skipped.
    pub entries: Vec<Vec<Option<f64>>>,
    /// Rows whose increment held a single class.
    pub skipped: Vec<usize>,
    /// Mean over off-diagonal entries of the rows that were trained.
    pub off_diagonal_mean: f64,
    pub diagonal_mean: f64,
}

impl RedundancyMatrix {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    /// Header `train\eval,0,1,...`, one row per training increment.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["train_increment".to_string()];
        header.extend((0..self.size()).map(|c| format!("eval_{c}")));
        out.write_record(&header).map_err(csv_err)?;
        for (r, row) in self.entries.iter().enumerate() {
            let mut rec = vec![r.to_string()];
            rec.extend(row.iter().map(|v| v.map_or(String::new(), |a| a.to_string())));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Cross-increment accuracies under `protocol`.
///
/// Row `r`'s model is trained from the stream `redundancy/[r]`, so rows are
/// independent of one another and of evaluation order.
pub fn cross_increment_matrix(
    increments: &[LabeledSet],
    protocol: &EvalProtocol,
    label: &str,
    master: u64,
) -> Result<RedundancyMatrix> {
    let k = increments.len();
    ensure!(k >= 2, Config, "redundancy needs at least two increments");
    ensure!(
        increments.iter().all(|i| !i.is_empty()),
        Config,
        "every increment must be non-empty"
    );
    let mut entries = vec![vec![None; k]; k];
    let mut skipped = Vec::new();
    let (mut off, mut n_off, mut diag, mut n_diag) = (0.0, 0usize, 0.0, 0usize);
    for (r, train) in increments.iter().enumerate() {
        if train.class_counts().iter().filter(|&&n| n > 0).count() < 2 {
            skipped.push(r);
            continue;
        }
        let model = protocol.fit(train, master, "redundancy", &[r as u64])?;
        for (c, eval) in increments.iter().enumerate() {
            let acc = correct_count(&model, eval)? as f64 / eval.len() as f64;
            entries[r][c] = Some(acc);
            if r == c {
                diag += acc;
                n_diag += 1;
            } else {
                off += acc;
                n_off += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(RedundancyMatrix {
        label: label.to_string(),
        entries,
        skipped,
        off_diagonal_mean: mean(off, n_off),
        diagonal_mean: mean(diag, n_diag),
    })
}

/// Misclassifications of `model` on each of `increments`; no training happens.
pub fn error_probe(model: &Mlp, increments: &[LabeledSet]) -> Result<Vec<usize>> {
    increments
        .iter()
        .map(|inc| Ok(inc.len() - correct_count(model, inc)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeSeries {
    /// `deltas[k]` belongs to stage `k + 2`.
    pub deltas: Vec<f64>,
    pub mean: f64,
}

impl SpikeSeries {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["stage", "delta"]).map_err(csv_err)?;
        for (k, d) in self.deltas.iter().enumerate() {
            out.write_record([(k + 2).to_string(), d.to_string()])
                .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `delta_i` = first-epoch loss of stage `i` minus last-epoch loss of stage `i - 1`.
pub fn loss_spikes(log: &StagedLog) -> Result<SpikeSeries> {
    let b = &log.boundaries;
    let n = log.records.len();
    let bad = |msg: &str| Error::Format(format!("training log: {msg}"));
    if b.len() < 2 {
        return Err(bad("fewer than two stage boundaries"));
    }
    if b[0] != 0 || b.windows(2).any(|w| w[0] >= w[1]) || b[b.len() - 1] >= n {
        return Err(bad("boundaries must start at 0, increase, and stay in range"));
    }
    for i in 1..n {
        if log.records[i].stage != log.records[i - 1].stage && !b.contains(&i) {
            return Err(bad(&format!("stage change at record {i} has no boundary marker")));
        }
    }
    let deltas: Vec<f64> = b[1..]
        .iter()
        .map(|&i| log.records[i].loss - log.records[i - 1].loss)
        .collect();
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    Ok(SpikeSeries { deltas, mean })
}

/// Probe training used for dynamics maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::default(),
            epochs: 50,
            batch_size: 32,
            optim: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPoint {
    /// Row index in the analysed dataset.
    pub id: usize,
    pub mu: f64,
    pub sigma: f64,
    pub ref_conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub points: Vec<DynamicsPoint>,
    /// `series[i][e]`: ground-truth probability of sample `i` after epoch `e`.
    pub series: Vec<Vec<f64>>,
}

impl Dynamics {
    /// `id,label,mu,sigma,ref_conf,p0,p1,...`
    pub fn write_csv<W: Write>(&self, labels: &[usize], w: W) -> Result<()> {
        ensure!(labels.len() == self.points.len(), Dimension, "label count mismatch");
        let epochs = self.series.first().map_or(0, Vec::len);
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["id", "label", "mu", "sigma", "ref_conf"].map(String::from).to_vec();
        header.extend((0..epochs).map(|e| format!("p{e}")));
        out.write_record(&header).map_err(csv_err)?;
        for ((p, s), y) in self.points.iter().zip(&self.series).zip(labels) {
            let mut rec = vec![
                p.id.to_string(),
                y.to_string(),
                p.mu.to_string(),
                p.sigma.to_string(),
                p.ref_conf.to_string(),
            ];
            rec.extend(s.iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Mean and population standard deviation of a series.
pub fn mean_std(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mu = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Builds points from recorded per-epoch probabilities.
pub fn dynamics_from_series(series: Vec<Vec<f64>>, ref_conf: &[f64]) -> Result<Dynamics> {
    ensure!(series.len() == ref_conf.len(), Dimension, "series and reference lengths differ");
    let points = series
        .iter()
        .zip(ref_conf)
        .enumerate()
        .map(|(id, (s, &rc))| {
            ensure!(!s.is_empty(), Config, "sample {id} has an empty probability series");
            let (mu, sigma) = mean_std(s);
            Ok(DynamicsPoint {
                id,
                mu,
                sigma,
                ref_conf: rc,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dynamics { points, series })
}

/// Trains a fresh probe on `data` for `cfg.epochs` epochs at a constant rate,
/// recording every sample's ground-truth probability after each epoch.
pub fn dynamics_map(data: &LabeledSet, cfg: &ProbeConfig, reference: &Mlp, master: u64) -> Result<Dynamics> {
    ensure!(cfg.epochs >= 2, Config, "dynamics need at least two epochs");
    ensure!(!data.is_empty(), Config, "dynamics of an empty dataset");
    let mut params = cfg
        .arch
        .build(data.dim(), data.num_classes, &mut rng::stream(master, "probe-init", &[]))?;
    let mut optim = OptimState::new(cfg.optim, params.num_params())?;
    let mut r = rng::stream(master, "probe-train", &[]);
    let mut series = vec![Vec::with_capacity(cfg.epochs); data.len()];
    for _ in 0..cfg.epochs {
        run_epoch(&mut params, &mut optim, data, cfg.batch_size, cfg.optim.lr, &mut r, &mut |_| Ok(()))?;
        for (s, p) in series.iter_mut().zip(class_probability(&params, &data.x, &data.y)?) {
            s.push(p);
        }
    }
    let ref_conf = class_probability(reference, &data.x, &data.y)?;
    dynamics_from_series(series, &ref_conf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryThresholds {
    pub mu_hi: f64,
    pub sigma_lo: f64,
    pub mu_lo: f64,
    pub sigma_hi: f64,
}

impl Default for CategoryThresholds {
    fn default() -> Self {
        Self {
            mu_hi: 0.8,
            sigma_lo: 0.1,
            mu_lo: 0.2,
            sigma_hi: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Categories {
    pub easy: f64,
    pub hard: f64,
    pub informative: f64,
}

/// Fractions of easy (`mu > mu_hi`, `sigma < sigma_lo`), hard
/// (`mu < mu_lo`, `sigma < sigma_lo`) and informative (`sigma >= sigma_hi`)
/// points. The remainder is uncategorised.
pub fn categorize(points: &[DynamicsPoint], th: &CategoryThresholds) -> Categories {
    if points.is_empty() {
        return Categories::default();
    }
    let n = points.len() as f64;
    let frac = |f: &dyn Fn(&DynamicsPoint) -> bool| points.iter().filter(|p| f(p)).count() as f64 / n;
    Categories {
        easy: frac(&|p| p.mu > th.mu_hi && p.sigma < th.sigma_lo),
        hard: frac(&|p| p.mu < th.mu_lo && p.sigma < th.sigma_lo),
        informative: frac(&|p| p.sigma >= th.sigma_hi),
    }
}

pub const SIGMA_MAX: f64 = 0.5;

/// Smoothed, normalised `bins x bins` histogram over `(mu, sigma)` on
/// `[0, 1] x [0, 0.5]`. Values on or beyond an edge go to the edge bin.
pub fn dynamics_histogram(points: &[DynamicsPoint], bins: usize, epsilon: f64) -> Vec<f64> {
    let cell = |v: f64, hi: f64| (((v / hi) * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    let mut h = vec![epsilon; bins * bins];
    for p in points {
        h[cell(p.mu, 1.0) * bins + cell(p.sigma, SIGMA_MAX)] += 1.0;
    }
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= total);
    h
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
}

/// Jensen-Shannon divergence in nats between the two dynamics histograms.
pub fn js_divergence(a: &[DynamicsPoint], b: &[DynamicsPoint], bins: usize, epsilon: f64) -> Result<f64> {
    ensure!(bins >= 2, Config, "need at least two bins per axis");
    ensure!(epsilon > 0.0, Config, "smoothing epsilon must be positive");
    ensure!(
        !a.is_empty() && !b.is_empty(),
        Domain,
        "JS divergence of an empty point set is undefined"
    );
    let p = dynamics_histogram(a, bins, epsilon);
    let q = dynamics_histogram(b, bins, epsilon);
    let m: Vec<f64> = p.iter().zip(&q).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok(0.5 * kl(&p, &m) + 0.5 * kl(&q, &m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub id: usize,
    /// Reference-model probability of the ground-truth class.
    pub ref_conf: f64,
    pub mu: f64,
    /// Whether the reference model's argmax is the ground-truth class.
    pub correct: bool,
}

/// Joins reference confidence and correctness with the dynamics points.
pub fn in_distribution_map(data: &LabeledSet, reference: &Mlp, points: &[DynamicsPoint]) -> Result<Vec<ScatterRow>> {
    ensure!(
        points.len() == data.len(),
        Dimension,
        "{} dynamics points for {} samples",
        points.len(),
        data.len()
    );
    let conf = class_probability(reference, &data.x, &data.y)?;
    let pred = predict(reference, &data.x)?;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.id != i {
                return Err(Error::Domain(format!("dynamics point {i} carries id {}", p.id)));
            }
            Ok(ScatterRow {
                id: i,
                ref_conf: conf[i],
                mu: p.mu,
                correct: pred[i] == data.y[i],
            })
        })
        .collect()
}

/// Fraction of rows with reference confidence below `threshold`.
pub fn low_confidence_fraction(rows: &[ScatterRow], threshold: f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.ref_conf < threshold).count() as f64 / rows.len() as f64
}

pub fn write_scatter_csv<W: Write>(rows: &[ScatterRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "ref_conf", "mu", "correct"]).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.id.to_string(),
            r.ref_conf.to_string(),
            r.mu.to_string(),
            u8::from(r.correct).to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
