//! The subcommands, as library functions over a locked run directory.
//!
//! Each command reads its inputs from the run directory, writes its
//! artifacts back into it and rewrites the manifest.

use std::fs::{self, File};
use std::path::Path;
use std::time::Instant;

use clap::ValueEnum;
use lgd_core::analysis::{
    categorize, cross_increment_matrix, dynamics_map, in_distribution_map, js_divergence, loss_spikes,
    low_confidence_fraction, mean_std, write_scatter_csv, Categories, Dynamics,
};
use lgd_core::data::LabeledSet;
use lgd_core::diffusion::{train_predictor, NoisePredictor};
use lgd_core::distill::{
    read_distilled_csv, run_increment, start, write_distilled_csv, write_selection_csv, Increment, Models,
    StageRecord, StagedLog,
};
use lgd_core::nn::{accuracy, Checkpoint, Mlp};
use lgd_core::rng::{derive_seed, permutation, stream};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::rundir::*;

const ANALYSIS_SUMMARY: &str = "analysis/summary.json";
const EVAL_STATIC: &str = "reports/eval_static.json";
const EVAL_FULL: &str = "reports/eval_full.json";
const REFERENCE_REPORT: &str = "reports/reference.json";

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn write_config(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    run.write_bytes(CONFIG, cfg.to_toml()?.as_bytes())
}

fn load_set(run: &RunDir, rel: &str, cfg: &RunConfig) -> Result<LabeledSet> {
    let set = LabeledSet::read_csv(File::open(run.path(rel))?, cfg.data.classes)?;
    if set.dim() != cfg.data.dim {
        return Err(CliError::config(format!(
            "{rel} has {} features but data.dim is {}",
            set.dim(),
            cfg.data.dim
        )));
    }
    Ok(set)
}

fn save_mlp(run: &RunDir, stem: &str, name: &str, mlp: &Mlp) -> Result<()> {
    let p = run.path(stem);
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut ck = Checkpoint::new();
    ck.push_mlp(name, mlp);
    ck.save(&p)?;
    Ok(())
}

fn load_reference(run: &RunDir) -> Result<Mlp> {
    Ok(Checkpoint::load(&run.path(REFERENCE))?.mlp("reference")?)
}

fn stacked(increments: &[Increment], cfg: &RunConfig) -> Result<LabeledSet> {
    let mut ds = LabeledSet::empty(cfg.data.dim, cfg.data.classes);
    for inc in increments {
        ds.extend(&inc.to_labeled(cfg.data.dim, cfg.data.classes)?)?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_class_counts: Vec<usize>,
}

/// Draws the synthetic mixture and writes the stratified train/test split.
pub fn gen_data(cfg: &RunConfig, run: &RunDir) -> Result<DataSummary> {
    let t = Instant::now();
    let spec = cfg.data.spec();
    let (train, test) = spec.generate(cfg.data.seed)?;
    write_config(run, cfg)?;
    train.write_csv(run.create(TRAIN_CSV)?)?;
    test.write_csv(run.create(TEST_CSV)?)?;
    run.write_json("data/spec.json", &spec)?;
    let summary = DataSummary {
        train_rows: train.len(),
        test_rows: test.len(),
        train_class_counts: train.class_counts(),
    };
    run.update_manifest(cfg, "gen-data", seconds(t), |_| {})?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub predictor_final_loss: f64,
}

/// Trains the reference classifier and the diffusion noise predictor on the
/// full train split, both seeded from the data seed.
pub fn train_reference(cfg: &RunConfig, run: &RunDir) -> Result<ReferenceReport> {
    let t = Instant::now();
    run.require(&[(TRAIN_CSV, "gen-data"), (TEST_CSV, "gen-data")])?;
    let train = load_set(run, TRAIN_CSV, cfg)?;
    let test = load_set(run, TEST_CSV, cfg)?;
    write_config(run, cfg)?;

    let reference = cfg.reference.fit(&train, cfg.data.seed, "reference", &[])?;
    save_mlp(run, REFERENCE, "reference", &reference)?;

    let sched = cfg.schedule.build()?;
    let (pred, losses) = train_predictor(&train, &sched, &cfg.predictor, cfg.data.seed)?;
    pred.to_checkpoint()?.save(&run.path(PREDICTOR))?;

    let report = ReferenceReport {
        train_accuracy: accuracy(&reference, &train)?,
        test_accuracy: accuracy(&reference, &test)?,
        predictor_final_loss: losses.last().copied().unwrap_or(f64::NAN),
    };
    run.write_json(REFERENCE_REPORT, &report)?;
    run.update_manifest(cfg, "train-reference", seconds(t), |m| {
        m.reference_test_accuracy = Some(report.test_accuracy);
    })?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub method: String,
    pub dataset_size: usize,
    pub stages: Vec<StageRecord>,
}

/// Runs the staged distillation for `cfg.method` and writes the distilled
/// dataset, the selection log, the learner log and one learner checkpoint
/// per stage. Reports from an earlier distillation are removed.
pub fn distill(cfg: &RunConfig, run: &RunDir) -> Result<DistillSummary> {
    let t = Instant::now();
    run.require(&[
        (TRAIN_CSV, "gen-data"),
        (TEST_CSV, "gen-data"),
        (&format!("{REFERENCE}.bin"), "train-reference"),
        (&format!("{PREDICTOR}.bin"), "train-reference"),
    ])?;
    let train = load_set(run, TRAIN_CSV, cfg)?;
    let test = load_set(run, TEST_CSV, cfg)?;
    let reference = load_reference(run)?;
    let predictor = NoisePredictor::from_checkpoint(&Checkpoint::load(&run.path(PREDICTOR))?)?;
    let schedule = cfg.schedule.build()?;
    if predictor.steps() != schedule.steps() {
        return Err(CliError::config(format!(
            "predictor was trained for {} steps but schedule.steps is {}",
            predictor.steps(),
            schedule.steps()
        )));
    }
    for stale in ["distill", "analysis", "reports/eval_static.json"] {
        let p = run.path(stale);
        if p.is_dir() {
            fs::remove_dir_all(&p)?;
        } else if p.exists() {
            fs::remove_file(&p)?;
        }
    }
    write_config(run, cfg)?;

    let dcfg = cfg.method.apply(&cfg.distill);
    let models = Models {
        predictor: &predictor,
        schedule: &schedule,
        reference: &reference,
    };
    let mut state = start(&dcfg, &models, &train, Some(&test), cfg.seed)?;
    save_mlp(run, "distill/models/stage_1", "learner", &state.learner)?;
    for _ in 1..dcfg.stages {
        run_increment(&mut state, dcfg.per_stage, &dcfg, &models, Some(&test))?;
        save_mlp(run, &format!("distill/models/stage_{}", state.stage), "learner", &state.learner)?;
    }

    write_distilled_csv(&state.increments, state.dim, run.create(DISTILLED_CSV)?)?;
    write_selection_csv(&state.increments, run.create(SELECTION_CSV)?)?;
    state.log.write_csv(run.create(TRAIN_LOG_CSV)?)?;
    run.write_json(STAGES_JSON, &state.stages)?;

    let summary = DistillSummary {
        method: cfg.method.name().to_string(),
        dataset_size: state.dataset.len(),
        stages: state.stages.clone(),
    };
    run.update_manifest(cfg, "distill", seconds(t), |m| {
        m.method = Some(summary.method.clone());
        m.stages = summary.stages.clone();
        m.static_eval = None;
        m.reports.clear();
    })?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRepeat {
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `distilled` or `full-train`.
    pub dataset: String,
    pub dataset_size: usize,
    pub repeats: Vec<EvalRepeat>,
    pub mean: f64,
    pub std: f64,
}

/// Trains `repeats` fresh models on the distilled dataset (or, with `full`,
/// on the whole train split) and reports test accuracy.
pub fn eval_static(cfg: &RunConfig, run: &RunDir, repeats: usize, full: bool) -> Result<EvalReport> {
    let t = Instant::now();
    if repeats == 0 {
        return Err(CliError::config("--repeats must be positive"));
    }
    let data = if full {
        run.require(&[(TRAIN_CSV, "gen-data"), (TEST_CSV, "gen-data")])?;
        load_set(run, TRAIN_CSV, cfg)?
    } else {
        run.require(&[(TEST_CSV, "gen-data"), (DISTILLED_CSV, "distill")])?;
        stacked(&read_distilled_csv(File::open(run.path(DISTILLED_CSV))?)?, cfg)?
    };
    let test = load_set(run, TEST_CSV, cfg)?;
    let name = if full { "eval-full" } else { "eval-static" };
    let mut rows = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let coords = [r as u64];
        let model = cfg.eval.protocol.fit(&data, cfg.seed, name, &coords)?;
        rows.push(EvalRepeat {
            repeat: r,
            seed: derive_seed(cfg.seed, name, &coords),
            accuracy: accuracy(&model, &test)?,
        });
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let report = EvalReport {
        dataset: if full { "full-train" } else { "distilled" }.to_string(),
        dataset_size: data.len(),
        repeats: rows,
        mean,
        std,
    };
    run.write_json(if full { EVAL_FULL } else { EVAL_STATIC }, &report)?;
    run.update_manifest(cfg, name, seconds(t), |m| {
        if !full {
            m.static_eval = Some(StaticEval {
                accuracies: accs.clone(),
                mean,
                std,
            });
        }
    })?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    Redundancy,
    Spikes,
    Dynamics,
    Indist,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancySummary {
    pub size: usize,
    pub off_diagonal_mean: f64,
    pub diagonal_mean: f64,
    pub skipped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeSummary {
    pub deltas: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummary {
    /// Jensen-Shannon divergence (nats) between the distilled set's dynamics
    /// histogram and that of a class-matched real subset of equal size.
    pub js: f64,
    pub categories: Categories,
    pub real_categories: Categories,
    pub real_subset_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndistSummary {
    pub threshold: f64,
    pub low_confidence_fraction: f64,
    pub reference_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub method: Option<String>,
    pub redundancy: Option<RedundancySummary>,
    pub spikes: Option<SpikeSummary>,
    pub dynamics: Option<DynamicsSummary>,
    pub indist: Option<IndistSummary>,
}

/// A real subset with the same per-class counts as `like`, drawn without
/// replacement from the stream `real-subset/[class]`.
pub fn matched_real_subset(real: &LabeledSet, like: &LabeledSet, master: u64) -> Result<LabeledSet> {
    let mut out = LabeledSet::empty(real.dim(), real.num_classes);
    for (c, &want) in like.class_counts().iter().enumerate() {
        let idx = real.class_indices(c);
        let order = permutation(idx.len(), &mut stream(master, "real-subset", &[c as u64]));
        for &k in order.iter().take(want) {
            out.push(real.x.row(idx[k]), c)?;
        }
    }
    Ok(out)
}

/// Writes the requested report groups under `analysis/` and merges their
/// headline numbers into `analysis/summary.json`.
pub fn analyze(cfg: &RunConfig, run: &RunDir, which: Which) -> Result<AnalysisSummary> {
    let t = Instant::now();
    run.require(&[
        (TRAIN_CSV, "gen-data"),
        (&format!("{REFERENCE}.bin"), "train-reference"),
        (DISTILLED_CSV, "distill"),
        (TRAIN_LOG_CSV, "distill"),
    ])?;
    let manifest = run.read_manifest()?.unwrap_or_default();
    let label = manifest.method.clone().unwrap_or_else(|| cfg.method.name().to_string());
    let increments = read_distilled_csv(File::open(run.path(DISTILLED_CSV))?)?;
    let data = stacked(&increments, cfg)?;
    let reference = load_reference(run)?;
    let a = &cfg.analysis;

    let mut summary: AnalysisSummary = if run.exists(ANALYSIS_SUMMARY) {
        serde_json::from_slice(&fs::read(run.path(ANALYSIS_SUMMARY))?)?
    } else {
        AnalysisSummary::default()
    };
    summary.method = Some(label.clone());
    let all = which == Which::All;
    let mut written = Vec::new();

    if all || which == Which::Redundancy {
        let sets = increments
            .iter()
            .map(|i| i.to_labeled(cfg.data.dim, cfg.data.classes))
            .collect::<lgd_core::Result<Vec<_>>>()?;
        let m = cross_increment_matrix(&sets, &a.redundancy, &label, cfg.seed)?;
        m.write_csv(run.create("analysis/redundancy.csv")?)?;
        written.push("analysis/redundancy.csv");
        summary.redundancy = Some(RedundancySummary {
            size: m.size(),
            off_diagonal_mean: m.off_diagonal_mean,
            diagonal_mean: m.diagonal_mean,
            skipped: m.skipped.clone(),
        });
    }

    if all || which == Which::Spikes {
        let log = StagedLog::read_csv(File::open(run.path(TRAIN_LOG_CSV))?)?;
        let s = loss_spikes(&log)?;
        s.write_csv(run.create("analysis/spikes.csv")?)?;
        written.push("analysis/spikes.csv");
        summary.spikes = Some(SpikeSummary {
            deltas: s.deltas.clone(),
            mean: s.mean,
        });
    }

    let mut dynamics: Option<Dynamics> = None;
    if all || which == Which::Dynamics {
        let d = dynamics_map(&data, &a.probe, &reference, cfg.seed)?;
        let train = load_set(run, TRAIN_CSV, cfg)?;
        let real = matched_real_subset(&train, &data, cfg.seed)?;
        let dr = dynamics_map(&real, &a.probe, &reference, cfg.seed)?;
        d.write_csv(&data.y, run.create("analysis/dynamics.csv")?)?;
        dr.write_csv(&real.y, run.create("analysis/real_dynamics.csv")?)?;
        written.push("analysis/dynamics.csv");
        written.push("analysis/real_dynamics.csv");
        summary.dynamics = Some(DynamicsSummary {
            js: js_divergence(&d.points, &dr.points, a.js_bins, a.js_epsilon)?,
            categories: categorize(&d.points, &a.thresholds),
            real_categories: categorize(&dr.points, &a.thresholds),
            real_subset_size: real.len(),
        });
        dynamics = Some(d);
    }

    if all || which == Which::Indist {
        let d = match dynamics {
            Some(d) => d,
            None => dynamics_map(&data, &a.probe, &reference, cfg.seed)?,
        };
        let rows = in_distribution_map(&data, &reference, &d.points)?;
        write_scatter_csv(&rows, run.create("analysis/scatter.csv")?)?;
        written.push("analysis/scatter.csv");
        summary.indist = Some(IndistSummary {
            threshold: a.low_confidence,
            low_confidence_fraction: low_confidence_fraction(&rows, a.low_confidence),
            reference_accuracy: accuracy(&reference, &data)?,
        });
    }

    run.write_json(ANALYSIS_SUMMARY, &summary)?;
    run.update_manifest(cfg, "analyze", seconds(t), |m| {
        for w in written.into_iter().chain([ANALYSIS_SUMMARY]) {
            if !m.reports.iter().any(|r| r == w) {
                m.reports.push(w.to_string());
            }
        }
        m.reports.sort();
    })?;
    Ok(summary)
}

/// One row of `lgd compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    pub method: String,
    pub master_seed: u64,
    pub static_accuracy: Option<f64>,
    pub off_diagonal_mean: Option<f64>,
    pub avg_spike: Option<f64>,
    pub js: Option<f64>,
    pub easy: Option<f64>,
    pub hard: Option<f64>,
    pub informative: Option<f64>,
    pub low_confidence: Option<f64>,
}

/// Side-by-side summary of runs built on the same data and models.
pub fn compare(runs: &[&Path]) -> Result<Vec<CompareRow>> {
    if runs.len() < 2 {
        return Err(CliError::config("compare needs at least two run directories"));
    }
    let mut rows = Vec::new();
    let mut data_hash: Option<String> = None;
    for dir in runs {
        let mp = dir.join(MANIFEST);
        if !mp.exists() {
            return Err(CliError::config(format!("{} has no manifest", dir.display())));
        }
        let m: RunManifest = serde_json::from_slice(&fs::read(&mp)?)?;
        match &data_hash {
            None => data_hash = Some(m.data_hash.clone()),
            Some(h) if *h != m.data_hash => {
                return Err(CliError::config(format!(
                    "{} was built from different data or models (data seed {}); runs are incomparable",
                    dir.display(),
                    m.data_seed
                )));
            }
            Some(_) => {}
        }
        let sp = dir.join(ANALYSIS_SUMMARY);
        let s: AnalysisSummary = if sp.exists() {
            serde_json::from_slice(&fs::read(&sp)?)?
        } else {
            AnalysisSummary::default()
        };
        let cats = s.dynamics.as_ref().map(|d| d.categories);
        rows.push(CompareRow {
            run: dir.display().to_string(),
            method: m.method.clone().unwrap_or_else(|| "-".into()),
            master_seed: m.master_seed,
            static_accuracy: m.static_eval.as_ref().map(|e| e.mean),
            off_diagonal_mean: s.redundancy.as_ref().map(|r| r.off_diagonal_mean),
            avg_spike: s.spikes.as_ref().map(|r| r.mean),
            js: s.dynamics.as_ref().map(|d| d.js),
            easy: cats.map(|c| c.easy),
            hard: cats.map(|c| c.hard),
            informative: cats.map(|c| c.informative),
            low_confidence: s.indist.as_ref().map(|i| i.low_confidence_fraction),
        });
    }
    Ok(rows)
}

/// Fixed-width text table of compare rows.
pub fn format_table(rows: &[CompareRow]) -> String {
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut out = format!(
        "{:<24} {:<20} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "run", "method", "seed", "static", "offdiag", "spike", "js", "easy", "hard", "inform", "lowconf"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:<20} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            r.run,
            r.method,
            r.master_seed,
            cell(r.static_accuracy),
            cell(r.off_diagonal_mean),
            cell(r.avg_spike),
            cell(r.js),
            cell(r.easy),
            cell(r.hard),
            cell(r.informative),
            cell(r.low_confidence),
        ));
    }
    out
}
