use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{ensure, Result};
use crate::nn::{Activation, AdamWConfig, Checkpoint, LrSchedule, Mlp, OptimState};
use crate::rng::{self, permutation, standard_normal};
use crate::tensor::Tensor2;

use super::schedule::DiffusionSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorArch {
    pub width: usize,
    pub depth: usize,
    pub embed_dim: usize,
}

impl Default for PredictorArch {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 3,
            embed_dim: 16,
        }
    }
}

/// Class- and timestep-conditional noise predictor `eps(x_t, t, c)`.
///
/// The backbone sees `[x_t, class_embedding[c], time_embedding[t]]`; both
/// embedding tables are learned.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    pub backbone: Mlp,
    /// `classes x embed_dim`
    pub class_embedding: Tensor2,
    /// `T x embed_dim`, row `t - 1` for timestep `t`.
    pub time_embedding: Tensor2,
    dim: usize,
    classes: usize,
}

impl NoisePredictor {
    pub fn new(
        dim: usize,
        classes: usize,
        steps: usize,
        arch: PredictorArch,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure!(dim >= 1 && classes >= 1 && steps >= 1, Config, "empty predictor shape");
        let e = arch.embed_dim;
        let mut backbone = Mlp::with_hidden(dim + 2 * e, arch.width, arch.depth, dim, Activation::Gelu)?;
        backbone.init_random(rng);
        let mut class_embedding = Tensor2::zeros(classes, e);
        for v in class_embedding.data_mut() {
            *v = standard_normal(rng);
        }
        // sinusoidal start so neighbouring timesteps begin with similar codes
        let mut time_embedding = Tensor2::zeros(steps, e);
        for t in 0..steps {
            for k in 0..e {
                let freq = 1.0 / 10_000f64.powf((2 * (k / 2)) as f64 / e as f64);
                let angle = (t + 1) as f64 * freq;
                let v = if k % 2 == 0 { angle.sin() } else { angle.cos() };
                time_embedding.set(t, k, v);
            }
        }
        Ok(Self {
            backbone,
            class_embedding,
            time_embedding,
            dim,
            classes,
        })
    }

    /// A predictor whose backbone is all zeros, so it always predicts zero noise.
    pub fn zeros(dim: usize, classes: usize, steps: usize, arch: PredictorArch) -> Result<Self> {
        let e = arch.embed_dim;
        Ok(Self {
            backbone: Mlp::with_hidden(dim + 2 * e, arch.width, arch.depth, dim, Activation::Gelu)?,
            class_embedding: Tensor2::zeros(classes, e),
            time_embedding: Tensor2::zeros(steps, e),
            dim,
            classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn steps(&self) -> usize {
        self.time_embedding.rows()
    }

    fn embed_dim(&self) -> usize {
        self.class_embedding.cols()
    }

    fn params_iter(&self) -> impl Iterator<Item = &f64> {
        self.backbone
            .params()
            .iter()
            .chain(self.class_embedding.data())
            .chain(self.time_embedding.data())
    }

    fn params_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.backbone
            .params_mut()
            .iter_mut()
            .chain(self.class_embedding.data_mut().iter_mut())
            .chain(self.time_embedding.data_mut().iter_mut())
    }

    fn assemble(&self, x: &Tensor2, ts: &[usize], cs: &[usize]) -> Result<Tensor2> {
        ensure!(x.cols() == self.dim, Dimension, "predictor expects {} features", self.dim);
        let e = self.embed_dim();
        let mut input = Tensor2::zeros(x.rows(), self.dim + 2 * e);
        for r in 0..x.rows() {
            let (t, c) = (ts[r], cs[r]);
            ensure!(c < self.classes, Domain, "class {c} out of range");
            ensure!(t >= 1 && t <= self.steps(), Domain, "timestep {t} out of range");
            let row = input.row_mut(r);
            row[..self.dim].copy_from_slice(x.row(r));
            row[self.dim..self.dim + e].copy_from_slice(self.class_embedding.row(c));
            row[self.dim + e..].copy_from_slice(self.time_embedding.row(t - 1));
        }
        Ok(input)
    }

    /// Predicted noise for every row at a shared timestep and class.
    pub fn predict(&self, x_t: &Tensor2, t: usize, class: usize) -> Result<Tensor2> {
        let n = x_t.rows();
        self.predict_rows(x_t, &vec![t; n], &vec![class; n])
    }

    pub fn predict_rows(&self, x_t: &Tensor2, ts: &[usize], cs: &[usize]) -> Result<Tensor2> {
        ensure!(
            ts.len() == x_t.rows() && cs.len() == x_t.rows(),
            Dimension,
            "per-row timesteps/classes do not match the batch"
        );
        let input = self.assemble(x_t, ts, cs)?;
        self.backbone.forward(&input)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_mlp("backbone", &self.backbone);
        ck.push_tensor(
            "class_embedding",
            &[self.class_embedding.rows(), self.class_embedding.cols()],
            self.class_embedding.data(),
        )?;
        ck.push_tensor(
            "time_embedding",
            &[self.time_embedding.rows(), self.time_embedding.cols()],
            self.time_embedding.data(),
        )?;
        ck.meta = serde_json::json!({ "kind": "noise_predictor", "dim": self.dim, "classes": self.classes });
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let backbone = ck.mlp("backbone")?;
        let table = |name: &str| -> Result<Tensor2> {
            let (shape, values) = ck.tensor(name)?;
            ensure!(shape.len() == 2, Format, "{name} must be a matrix");
            Tensor2::from_vec(shape[0], shape[1], values.to_vec())
        };
        let class_embedding = table("class_embedding")?;
        let time_embedding = table("time_embedding")?;
        let e = class_embedding.cols();
        ensure!(time_embedding.cols() == e, Format, "embedding widths differ");
        let dim = backbone.output_dim();
        ensure!(
            backbone.input_dim() == dim + 2 * e,
            Format,
            "backbone input does not match embeddings"
        );
        Ok(Self {
            classes: class_embedding.rows(),
            backbone,
            class_embedding,
            time_embedding,
            dim,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainConfig {
    pub arch: PredictorArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub schedule: LrSchedule,
    /// Decay of the weight average that is returned instead of the raw
    /// iterate; 0 returns the raw weights.
    pub ema_decay: f64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            arch: PredictorArch::default(),
            epochs: 400,
            batch_size: 64,
            optim: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            schedule: LrSchedule::Cosine { min_ratio: 0.05 },
            ema_decay: 0.999,
        }
    }
}

/// Fits the predictor with the epsilon-MSE objective, `t` uniform on `1..=T`.
///
/// Returns the trained predictor and the mean training loss of every epoch.
pub fn train_predictor(
    data: &LabeledSet,
    sched: &DiffusionSchedule,
    cfg: &PredictorTrainConfig,
    seed: u64,
) -> Result<(NoisePredictor, Vec<f64>)> {
    ensure!(!data.is_empty(), Config, "cannot train a predictor on empty data");
    let mut init_rng = rng::stream(seed, "predictor-init", &[]);
    let pred = NoisePredictor::new(data.dim(), data.num_classes, sched.steps(), cfg.arch, &mut init_rng)?;
    continue_training(pred, data, sched, cfg, seed)
}

/// Same as [`train_predictor`] but starting from existing parameters.
pub fn continue_training(
    mut pred: NoisePredictor,
    data: &LabeledSet,
    sched: &DiffusionSchedule,
    cfg: &PredictorTrainConfig,
    seed: u64,
) -> Result<(NoisePredictor, Vec<f64>)> {
    ensure!(!data.is_empty(), Config, "cannot train a predictor on empty data");
    ensure!(cfg.batch_size >= 1, Config, "batch size must be positive");
    ensure!(pred.steps() == sched.steps(), Config, "predictor and schedule step counts differ");
    ensure!(
        (0.0..1.0).contains(&cfg.ema_decay),
        Config,
        "predictor EMA decay must lie in [0, 1)"
    );
    let mut avg = pred.clone();
    let d = pred.dim;
    let e = pred.embed_dim();
    let mut opt_backbone = OptimState::new(cfg.optim, pred.backbone.num_params())?;
    let mut opt_class = OptimState::new(cfg.optim, pred.class_embedding.data().len())?;
    let mut opt_time = OptimState::new(cfg.optim, pred.time_embedding.data().len())?;
    let mut rng = rng::stream(seed, "predictor-train", &[]);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut g_backbone = vec![0.0; pred.backbone.num_params()];
    let mut g_class = vec![0.0; pred.class_embedding.data().len()];
    let mut g_time = vec![0.0; pred.time_embedding.data().len()];

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.optim.lr, epoch, cfg.epochs);
        let order = permutation(data.len(), &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let x0 = data.x.select_rows(chunk);
            let cs: Vec<usize> = chunk.iter().map(|&i| data.y[i]).collect();
            let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
            let eps = rng::normal_tensor(n, d, &mut rng);
            let mut x_t = Tensor2::zeros(n, d);
            for r in 0..n {
                let ab = sched.alpha_bar(ts[r])?;
                let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                for (j, v) in x_t.row_mut(r).iter_mut().enumerate() {
                    *v = a * x0.get(r, j) + b * eps.get(r, j);
                }
            }
            let input = pred.assemble(&x_t, &ts, &cs)?;
            let cache = pred.backbone.forward_cached(&input)?;
            let scale = 1.0 / (n * d) as f64;
            let mut g_out = cache.output.sub(&eps)?;
            loss_sum += g_out.data().iter().map(|v| v * v).sum::<f64>() / d as f64;
            g_out.data_mut().iter_mut().for_each(|v| *v *= 2.0 * scale);

            g_backbone.fill(0.0);
            let g_in = pred.backbone.backward(&cache, &g_out, Some(&mut g_backbone))?;
            g_class.fill(0.0);
            g_time.fill(0.0);
            for r in 0..n {
                let gr = g_in.row(r);
                for k in 0..e {
                    g_class[cs[r] * e + k] += gr[d + k];
                    g_time[(ts[r] - 1) * e + k] += gr[d + e + k];
                }
            }
            opt_backbone.step(pred.backbone.params_mut(), &g_backbone, lr)?;
            opt_class.step(pred.class_embedding.data_mut(), &g_class, lr)?;
            opt_time.step(pred.time_embedding.data_mut(), &g_time, lr)?;
            let k = cfg.ema_decay;
            for (a, &p) in avg.params_iter_mut().zip(pred.params_iter()) {
                *a = k * *a + (1.0 - k) * p;
            }
        }
        losses.push(loss_sum / data.len() as f64);
    }
    if cfg.epochs == 0 {
        return Ok((pred, losses));
    }
    Ok((avg, losses))
}
