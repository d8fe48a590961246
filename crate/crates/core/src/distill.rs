//! Incremental distillation: seed, over-generate, select, retrain.
//!
//! Stage 1 is a seed dataset. Every later stage walks the classes and, for
//! each of `N_i` positions, draws `kappa` guided candidates against the
//! current memory snapshot, keeps the one with the highest learnability
//! score, and appends it to both the increment and the class memory before
//! the next position is generated. Once the increment is complete it is
//! merged into the cumulative dataset and the learner is retrained.
//!
//! Every random draw comes from a named stream of the master seed, so a run
//! is reproducible byte for byte and independent of how candidate batches
//! are scheduled.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{csv_err, parse_field, LabeledSet};
use crate::diffusion::{sample_batch, DiffusionSchedule, GuidanceHook, NoisePredictor};
use crate::error::{ensure, Result};
use crate::learnability::{
    learnability_scores, ClassifierGuidanceHook, LearnabilityConfig, LgdHook, MemoryBuffer, TelemetrySummary,
};
use crate::nn::train::run_epoch;
use crate::nn::{accuracy, AdamWConfig, ClassifierArch, EmaParams, LrSchedule, Mlp, OptimState};
use crate::rng::{self, permutation, StreamRng};
use crate::tensor::Tensor2;

/// How the first stage is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedMode {
    /// Unguided class-conditional samples from the predictor.
    #[default]
    UnguidedDiffusion,
    /// A random draw, without replacement, from the real training split.
    RandomReal,
}

/// Which guidance drives candidate generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Learnability plus deviation guidance.
    #[default]
    Learnability,
    /// Plain classifier guidance toward the target class with the reference
    /// model, strength `lambda`.
    Classifier,
}

/// Learner training: train to a training-loss plateau, then squeeze with a
/// cosine-decayed rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Epochs without a new best training loss before the plateau phase ends.
    pub patience: usize,
    pub squeeze_epochs: usize,
    pub min_lr_ratio: f64,
    /// Hard cap on plateau-phase epochs.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub ema_decay: f64,
    /// Retrain each stage from the previous stage's weights.
    pub warm_start: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            patience: 50,
            squeeze_epochs: 50,
            min_lr_ratio: 0.01,
            max_epochs: 1000,
            batch_size: 32,
            optim: AdamWConfig::default(),
            ema_decay: 0.99,
            warm_start: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.patience >= 1, Config, "patience must be at least 1");
        ensure!(
            self.min_lr_ratio > 0.0 && self.min_lr_ratio <= 1.0,
            Config,
            "min lr ratio must lie in (0, 1]"
        );
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.ema_decay),
            Config,
            "EMA decay must lie in [0, 1]"
        );
        self.optim.validate()
    }
}

/// Tracks the best loss seen and reports when `patience` epochs pass
/// without improving on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Records one epoch's loss; returns true once training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plateau,
    Squeeze,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageEpoch {
    pub stage: usize,
    /// Epoch index within the stage.
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Learner training history across stages. `boundaries[k]` is the index in
/// `records` of the first epoch of stage `k + 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StagedLog {
    pub records: Vec<StageEpoch>,
    pub boundaries: Vec<usize>,
}

impl StagedLog {
    pub fn append_stage(&mut self, records: Vec<StageEpoch>) {
        self.boundaries.push(self.records.len());
        self.records.extend(records);
    }

    /// `global_epoch,stage,epoch,phase,loss,accuracy,lr,boundary`, where
    /// `boundary` is 1 on the first epoch of every stage.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "global_epoch",
            "stage",
            "epoch",
            "phase",
            "loss",
            "accuracy",
            "lr",
            "boundary",
        ])
        .map_err(csv_err)?;
        for (i, r) in self.records.iter().enumerate() {
            let phase = match r.phase {
                Phase::Plateau => "plateau",
                Phase::Squeeze => "squeeze",
            };
            let boundary = if self.boundaries.contains(&i) { "1" } else { "0" };
            out.write_record([
                i.to_string(),
                r.stage.to_string(),
                r.epoch.to_string(),
                phase.to_string(),
                r.loss.to_string(),
                r.accuracy.to_string(),
                r.lr.to_string(),
                boundary.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut log = StagedLog::default();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            ensure!(rec.len() == 8, Format, "training log rows need 8 fields");
            let phase = match &rec[3] {
                "plateau" => Phase::Plateau,
                "squeeze" => Phase::Squeeze,
                other => return Err(crate::Error::Format(format!("unknown phase {other:?}"))),
            };
            if &rec[7] == "1" {
                log.boundaries.push(log.records.len());
            }
            log.records.push(StageEpoch {
                stage: parse_field(rec.get(1))?,
                epoch: parse_field(rec.get(2))?,
                phase,
                loss: parse_field(rec.get(4))?,
                accuracy: parse_field(rec.get(5))?,
                lr: parse_field(rec.get(6))?,
            });
        }
        Ok(log)
    }
}

/// Trains `params` on `data` until the training loss plateaus, then runs the
/// cosine squeeze. The EMA shadow is updated after every optimizer step.
pub fn train_learner_to_plateau(
    mut params: Mlp,
    ema: &mut EmaParams,
    data: &LabeledSet,
    sched: &TrainSchedule,
    stage: usize,
    rng: &mut StreamRng,
) -> Result<(Mlp, Vec<StageEpoch>)> {
    sched.validate()?;
    ensure!(!data.is_empty(), Config, "training on an empty dataset");
    let mut optim = OptimState::new(sched.optim, params.num_params())?;
    let base = sched.optim.lr;
    let mut records = Vec::new();
    let mut plateau = Plateau::new(sched.patience);
    let mut on_step = |p: &Mlp| ema.update(p);
    for epoch in 0..sched.max_epochs {
        let (loss, acc) = run_epoch(&mut params, &mut optim, data, sched.batch_size, base, rng, &mut on_step)?;
        records.push(StageEpoch {
            stage,
            epoch,
            phase: Phase::Plateau,
            loss,
            accuracy: acc,
            lr: base,
        });
        if plateau.observe(loss) {
            break;
        }
    }
    let squeeze = LrSchedule::Cosine {
        min_ratio: sched.min_lr_ratio,
    };
    let start = records.len();
    for k in 0..sched.squeeze_epochs {
        let lr = squeeze.lr_at(base, k, sched.squeeze_epochs);
        let (loss, acc) = run_epoch(&mut params, &mut optim, data, sched.batch_size, lr, rng, &mut on_step)?;
        records.push(StageEpoch {
            stage,
            epoch: start + k,
            phase: Phase::Squeeze,
            loss,
            accuracy: acc,
            lr,
        });
    }
    Ok((params, records))
}

/// Draws `kappa` candidates for one dataset position.
///
/// Candidate `k` uses the stream `candidate/[stage, class, position, k]`, so
/// the set is reproducible and each candidate is the same whether drawn
/// alone or in a batch.
#[allow(clippy::too_many_arguments)]
pub fn generate_candidates(
    pred: &NoisePredictor,
    sched: &DiffusionSchedule,
    hook: Option<&mut dyn GuidanceHook>,
    master: u64,
    stage: usize,
    class: usize,
    position: usize,
    kappa: usize,
) -> Result<Tensor2> {
    ensure!(kappa >= 1, Config, "kappa must be at least 1");
    let mut streams = candidate_streams(master, stage, class, position, kappa);
    sample_batch(pred, class, hook, sched, &mut streams)
}

pub fn candidate_streams(master: u64, stage: usize, class: usize, position: usize, kappa: usize) -> Vec<StreamRng> {
    (0..kappa)
        .map(|k| rng::stream(master, "candidate", &[stage as u64, class as u64, position as u64, k as u64]))
        .collect()
}

/// Index of the highest score; the lowest index wins ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Scores every candidate and returns the index of the best with all scores.
pub fn select_top1(
    candidates: &Tensor2,
    class: usize,
    learner: &Mlp,
    reference: &Mlp,
    omega: f64,
) -> Result<(usize, Vec<f64>)> {
    ensure!(candidates.rows() >= 1, Config, "no candidates to select from");
    let scores = learnability_scores(learner, reference, candidates, class, omega)?;
    let best = argmax_first(&scores).expect("non-empty scores");
    Ok((best, scores))
}

/// A selected sample with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub stage: usize,
    pub class: usize,
    pub position: usize,
    pub x: Vec<f64>,
    /// Scores of every candidate at this position; empty for seed samples.
    pub scores: Vec<f64>,
    pub chosen: usize,
}

/// The samples added at one stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Increment {
    pub index: usize,
    pub samples: Vec<Selected>,
}

impl Increment {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_labeled(&self, dim: usize, classes: usize) -> Result<LabeledSet> {
        let mut set = LabeledSet::empty(dim, classes);
        for s in &self.samples {
            set.push(&s.x, s.class)?;
        }
        Ok(set)
    }
}

/// Everything an increment needs to be generated.
pub struct Models<'a> {
    pub predictor: &'a NoisePredictor,
    pub schedule: &'a DiffusionSchedule,
    pub reference: &'a Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub ipc: usize,
    /// Number of stages, seed included.
    pub stages: usize,
    /// Samples per class added at each stage after the seed.
    pub per_stage: usize,
    pub seed_mode: SeedMode,
    pub guidance: GuidanceMode,
    pub learnability: LearnabilityConfig,
    pub learner_arch: ClassifierArch,
    pub train: TrainSchedule,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            ipc: 10,
            stages: 5,
            per_stage: 10,
            seed_mode: SeedMode::default(),
            guidance: GuidanceMode::default(),
            learnability: LearnabilityConfig::default(),
            learner_arch: ClassifierArch::default(),
            train: TrainSchedule::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.ipc >= 1, Config, "ipc must be at least 1");
        ensure!(self.stages >= 1, Config, "need at least one stage");
        ensure!(
            self.per_stage >= 1 || self.stages == 1,
            Config,
            "per-stage sample count must be positive"
        );
        self.learnability.validate()?;
        self.train.validate()
    }
}

/// Per-stage learner metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub dataset_size: usize,
    pub train_epochs: usize,
    pub final_train_loss: f64,
    pub train_accuracy: f64,
    /// Learner accuracy on the held-out test split, if one was given.
    pub test_accuracy: Option<f64>,
    pub telemetry: TelemetrySummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub master: u64,
    pub dim: usize,
    pub classes: usize,
    pub dataset: LabeledSet,
    pub increments: Vec<Increment>,
    pub memory: MemoryBuffer,
    pub learner: Mlp,
    pub ema: EmaParams,
    pub stage: usize,
    pub log: StagedLog,
    pub stages: Vec<StageRecord>,
}

/// Fills the first stage: `ipc` samples per class.
pub fn init_seed(
    mode: SeedMode,
    ipc: usize,
    models: &Models,
    real: &LabeledSet,
    master: u64,
) -> Result<(Increment, MemoryBuffer)> {
    ensure!(ipc >= 1, Config, "ipc must be at least 1");
    let classes = real.num_classes;
    let mut inc = Increment {
        index: 1,
        samples: Vec::new(),
    };
    let mut memory = MemoryBuffer::new(classes);
    for c in 0..classes {
        let rows: Vec<Vec<f64>> = match mode {
            SeedMode::UnguidedDiffusion => {
                let mut streams: Vec<_> = (0..ipc)
                    .map(|p| rng::stream(master, "seed", &[c as u64, p as u64]))
                    .collect();
                let x = sample_batch(models.predictor, c, None, models.schedule, &mut streams)?;
                x.iter_rows().map(<[f64]>::to_vec).collect()
            }
            SeedMode::RandomReal => {
                let idx = real.class_indices(c);
                ensure!(
                    idx.len() >= ipc,
                    Config,
                    "class {c} has {} real samples, seed needs {ipc}",
                    idx.len()
                );
                let mut r = rng::stream(master, "seed-real", &[c as u64]);
                let order = permutation(idx.len(), &mut r);
                order[..ipc].iter().map(|&k| real.x.row(idx[k]).to_vec()).collect()
            }
        };
        for (p, x) in rows.into_iter().enumerate() {
            memory.push(c, &x)?;
            inc.samples.push(Selected {
                stage: 1,
                class: c,
                position: p,
                x,
                scores: Vec::new(),
                chosen: 0,
            });
        }
    }
    Ok((inc, memory))
}

fn evaluate(state: &DistillState, records: &[StageEpoch], test: Option<&LabeledSet>) -> Result<StageRecord> {
    let last = records.last();
    Ok(StageRecord {
        stage: state.stage,
        dataset_size: state.dataset.len(),
        train_epochs: records.len(),
        final_train_loss: last.map_or(f64::NAN, |r| r.loss),
        train_accuracy: accuracy(&state.learner, &state.dataset)?,
        test_accuracy: test.map(|t| accuracy(&state.learner, t)).transpose()?,
        telemetry: TelemetrySummary::default(),
    })
}

/// Builds stage 1 and trains the first learner on it.
pub fn start(
    cfg: &DistillConfig,
    models: &Models,
    real: &LabeledSet,
    test: Option<&LabeledSet>,
    master: u64,
) -> Result<DistillState> {
    cfg.validate()?;
    let (dim, classes) = (real.dim(), real.num_classes);
    let (seed, memory) = init_seed(cfg.seed_mode, cfg.ipc, models, real, master)?;
    let dataset = seed.to_labeled(dim, classes)?;
    let init = cfg
        .learner_arch
        .build(dim, classes, &mut rng::stream(master, "learner-init", &[]))?;
    let mut ema = EmaParams::new(cfg.train.ema_decay, &init)?;
    let mut train_rng = rng::stream(master, "learner-train", &[1]);
    let (learner, records) = train_learner_to_plateau(init, &mut ema, &dataset, &cfg.train, 1, &mut train_rng)?;
    let mut state = DistillState {
        master,
        dim,
        classes,
        dataset,
        increments: vec![seed],
        memory,
        learner,
        ema,
        stage: 1,
        log: StagedLog::default(),
        stages: Vec::new(),
    };
    let rec = evaluate(&state, &records, test)?;
    state.log.append_stage(records);
    state.stages.push(rec);
    Ok(state)
}

/// Generates, selects and trains one further stage with `n` samples per class.
pub fn run_increment(
    state: &mut DistillState,
    n: usize,
    cfg: &DistillConfig,
    models: &Models,
    test: Option<&LabeledSet>,
) -> Result<()> {
    cfg.validate()?;
    let stage = state.stage + 1;
    let lcfg = &cfg.learnability;
    let mut inc = Increment {
        index: stage,
        samples: Vec::new(),
    };
    let mut telemetry = TelemetrySummary::default();
    let window = lcfg.window(models.schedule.steps())?;
    for c in 0..state.classes {
        for p in 0..n {
            let candidates = match cfg.guidance {
                GuidanceMode::Learnability => {
                    let guided = lcfg.lambda > 0.0 || lcfg.gamma > 0.0;
                    let mut hook = LgdHook::new(&state.ema.shadow, models.reference, &state.memory, lcfg, models.schedule)?;
                    let h: Option<&mut dyn GuidanceHook> = if guided { Some(&mut hook) } else { None };
                    let x = generate_candidates(
                        models.predictor,
                        models.schedule,
                        h,
                        state.master,
                        stage,
                        c,
                        p,
                        lcfg.kappa,
                    )?;
                    telemetry.merge(&hook.summary);
                    x
                }
                GuidanceMode::Classifier => {
                    let mut hook = ClassifierGuidanceHook::new(models.reference, lcfg.lambda, lcfg.guidance_sign, window);
                    generate_candidates(
                        models.predictor,
                        models.schedule,
                        Some(&mut hook),
                        state.master,
                        stage,
                        c,
                        p,
                        lcfg.kappa,
                    )?
                }
            };
            let (best, scores) = select_top1(&candidates, c, &state.learner, models.reference, lcfg.omega)?;
            let x = candidates.row(best).to_vec();
            state.memory.push(c, &x)?;
            inc.samples.push(Selected {
                stage,
                class: c,
                position: p,
                x,
                scores,
                chosen: best,
            });
        }
    }
    let added = inc.to_labeled(state.dim, state.classes)?;
    state.dataset.extend(&added)?;
    state.increments.push(inc);
    state.stage = stage;

    let start_params = if cfg.train.warm_start {
        state.learner.clone()
    } else {
        let fresh = cfg
            .learner_arch
            .build(state.dim, state.classes, &mut rng::stream(state.master, "learner-init", &[stage as u64]))?;
        state.ema = EmaParams::new(cfg.train.ema_decay, &fresh)?;
        fresh
    };
    let mut train_rng = rng::stream(state.master, "learner-train", &[stage as u64]);
    let (learner, records) = train_learner_to_plateau(
        start_params,
        &mut state.ema,
        &state.dataset,
        &cfg.train,
        stage,
        &mut train_rng,
    )?;
    state.learner = learner;
    let mut rec = evaluate(state, &records, test)?;
    rec.telemetry = telemetry;
    state.log.append_stage(records);
    state.stages.push(rec);
    Ok(())
}

/// Seed plus `stages - 1` increments of `per_stage` samples per class.
pub fn run_distillation(
    cfg: &DistillConfig,
    models: &Models,
    real: &LabeledSet,
    test: Option<&LabeledSet>,
    master: u64,
) -> Result<DistillState> {
    let mut state = start(cfg, models, real, test, master)?;
    for _ in 1..cfg.stages {
        run_increment(&mut state, cfg.per_stage, cfg, models, test)?;
    }
    Ok(state)
}

/// Writes `stage,class,position,x0,...` rows in increment order.
pub fn write_distilled_csv<W: Write>(increments: &[Increment], dim: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["stage".to_string(), "class".to_string(), "position".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    out.write_record(&header).map_err(csv_err)?;
    for inc in increments {
        for s in &inc.samples {
            let mut row = vec![s.stage.to_string(), s.class.to_string(), s.position.to_string()];
            row.extend(s.x.iter().map(|v| v.to_string()));
            out.write_record(&row).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the file written by [`write_distilled_csv`] back into increments.
pub fn read_distilled_csv<R: Read>(r: R) -> Result<Vec<Increment>> {
    let mut rdr = csv::Reader::from_reader(r);
    let width = rdr.headers().map_err(csv_err)?.len();
    ensure!(width > 3, Format, "distilled CSV has no feature columns");
    let mut incs: Vec<Increment> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        ensure!(rec.len() == width, Format, "ragged distilled CSV row");
        let stage: usize = parse_field(rec.get(0))?;
        let x = (3..width).map(|j| parse_field(rec.get(j))).collect::<Result<Vec<f64>>>()?;
        if incs.last().is_none_or(|i| i.index != stage) {
            ensure!(
                incs.iter().all(|i| i.index != stage),
                Format,
                "stage {stage} rows are not contiguous"
            );
            incs.push(Increment {
                index: stage,
                samples: Vec::new(),
            });
        }
        incs.last_mut().expect("just pushed").samples.push(Selected {
            stage,
            class: parse_field(rec.get(1))?,
            position: parse_field(rec.get(2))?,
            x,
            scores: Vec::new(),
            chosen: 0,
        });
    }
    Ok(incs)
}

/// `stage,class,position,candidate,score,chosen` rows for every scored candidate.
pub fn write_selection_csv<W: Write>(increments: &[Increment], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["stage", "class", "position", "candidate", "score", "chosen"])
        .map_err(csv_err)?;
    for s in increments.iter().flat_map(|i| &i.samples) {
        for (k, score) in s.scores.iter().enumerate() {
            out.write_record([
                s.stage.to_string(),
                s.class.to_string(),
                s.position.to_string(),
                k.to_string(),
                score.to_string(),
                u8::from(k == s.chosen).to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}
