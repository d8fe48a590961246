//! End-to-end checks on small trained models: sampler statistics, the
//! distillation loop's bookkeeping and the analysis probes.

use std::collections::HashSet;
use std::sync::OnceLock;

use lgd_core::analysis::{
    cross_increment_matrix, dynamics_map, error_probe, EvalProtocol, ProbeConfig,
};
use lgd_core::data::{LabeledSet, MixtureMode, MixtureSpec};
use lgd_core::diffusion::{
    sample_batch, train_predictor, DiffusionSchedule, NoisePredictor, PredictorTrainConfig,
};
use lgd_core::distill::{
    candidate_streams, generate_candidates, init_seed, run_distillation, run_increment, start,
    train_learner_to_plateau, DistillConfig, Models, TrainSchedule,
};
use lgd_core::nn::{accuracy, ClassifierArch, EmaParams, Mlp, TrainConfig};
use lgd_core::rng::stream;

struct Fixture {
    train: LabeledSet,
    test: LabeledSet,
    sched: DiffusionSchedule,
    pred: NoisePredictor,
    reference: Mlp,
}

fn quick_protocol(epochs: usize) -> EvalProtocol {
    EvalProtocol {
        train: TrainConfig {
            epochs,
            batch_size: 64,
            ..EvalProtocol::default().train
        },
        ..EvalProtocol::default()
    }
}

fn quick_distill() -> DistillConfig {
    DistillConfig {
        stages: 3,
        train: TrainSchedule {
            patience: 20,
            squeeze_epochs: 20,
            max_epochs: 300,
            ..TrainSchedule::default()
        },
        ..DistillConfig::default()
    }
}

/// The default 3-class ring mixture with a shortened predictor schedule.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (train, test) = MixtureSpec::ring(2, 3, 3, 2.0, 0.3, 300).generate(1).unwrap();
        let sched = DiffusionSchedule::linear(200, 1e-4, 0.02).unwrap();
        let cfg = PredictorTrainConfig {
            epochs: 150,
            ..PredictorTrainConfig::default()
        };
        let (pred, _) = train_predictor(&train, &sched, &cfg, 1).unwrap();
        let reference = quick_protocol(100).fit(&train, 1, "reference", &[]).unwrap();
        Fixture {
            train,
            test,
            sched,
            pred,
            reference,
        }
    })
}

fn models(f: &Fixture) -> Models<'_> {
    Models {
        predictor: &f.pred,
        schedule: &f.sched,
        reference: &f.reference,
    }
}

fn column_means(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let rows: Vec<Vec<f64>> = rows.collect();
    let n = rows.len();
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let var = (0..dim)
        .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n as f64 - 1.0))
        .collect();
    (mean, var, n)
}

#[test]
fn single_mode_samples_centre_on_the_mode_and_match_data_means() {
    let spec = MixtureSpec {
        dim: 2,
        num_classes: 2,
        samples_per_class: 300,
        modes: vec![
            MixtureMode {
                class: 0,
                mean: vec![1.5, 0.5],
                std: 0.3,
            },
            MixtureMode {
                class: 1,
                mean: vec![-1.0, -1.0],
                std: 0.3,
            },
        ],
        test_fraction: 0.2,
    };
    let (train, _) = spec.generate(3).unwrap();
    let sched = DiffusionSchedule::linear(200, 1e-4, 0.02).unwrap();
    let (pred, _) = train_predictor(&train, &sched, &PredictorTrainConfig::default(), 3).unwrap();
    for c in 0..2 {
        let mut streams: Vec<_> = (0..500).map(|i| stream(4, "mode-check", &[c as u64, i])).collect();
        let x = sample_batch(&pred, c, None, &sched, &mut streams).unwrap();
        let (gen, var, n) = column_means(x.iter_rows().map(<[f64]>::to_vec), 2);
        let data = train.subset(&train.class_indices(c));
        let (real, _, _) = column_means(data.x.iter_rows().map(<[f64]>::to_vec), 2);
        for j in 0..2 {
            let mode = spec.modes[c].mean[j];
            assert!((gen[j] - mode).abs() < 0.15, "class {c} coord {j}: {} vs mode {mode}", gen[j]);
            let se = (var[j] / n as f64).sqrt();
            assert!((gen[j] - real[j]).abs() < 3.0 * se, "class {c} coord {j}: {} vs data {}", gen[j], real[j]);
        }
    }
}

#[test]
fn learner_fits_the_toy_data() {
    let f = fixture();
    let arch = ClassifierArch::default();
    let init = arch.build(2, 3, &mut stream(5, "init", &[])).unwrap();
    let mut ema = EmaParams::new(0.99, &init).unwrap();
    let sched = TrainSchedule {
        patience: 20,
        squeeze_epochs: 20,
        ..TrainSchedule::default()
    };
    let (learner, log) =
        train_learner_to_plateau(init, &mut ema, &f.train, &sched, 1, &mut stream(5, "train", &[])).unwrap();
    assert!(accuracy(&learner, &f.train).unwrap() >= 0.95);
    assert!(log.iter().all(|r| r.stage == 1));
}

#[test]
fn distillation_bookkeeping() {
    let f = fixture();
    let m = models(f);
    let cfg = quick_distill();
    let mut state = start(&cfg, &m, &f.train, Some(&f.test), 8).unwrap();
    assert_eq!(state.dataset.len(), 30);
    for c in 0..3 {
        assert_eq!(state.memory.len(c), 10);
    }

    for stage in 2..=cfg.stages {
        let before = state.dataset.len();
        let memory_before: Vec<Vec<Vec<f64>>> = (0..3).map(|c| state.memory.samples(c).to_vec()).collect();
        run_increment(&mut state, cfg.per_stage, &cfg, &m, Some(&f.test)).unwrap();

        // 30 selections, each out of kappa = 3 scored candidates
        let inc = state.increments.last().unwrap();
        assert_eq!(inc.index, stage);
        assert_eq!(inc.len(), 30);
        assert_eq!(inc.samples.iter().map(|s| s.scores.len()).sum::<usize>(), 90);
        assert_eq!(state.dataset.len(), before + 30);

        for s in &inc.samples {
            assert!(s.scores.iter().all(|&v| v <= s.scores[s.chosen]));
            assert!(state.memory.contains(s.class, &s.x));
        }
        for c in 0..3 {
            let now = state.memory.samples(c);
            assert_eq!(now.len(), 10 + (stage - 1) * 10);
            assert_eq!(&now[..memory_before[c].len()], &memory_before[c][..]);
        }
    }

    // the dataset is exactly the concatenation of increments, none repeated
    let mut seen = HashSet::new();
    let mut k = 0;
    for inc in &state.increments {
        for s in &inc.samples {
            assert!(seen.insert(s.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
            assert_eq!(state.dataset.x.row(k), &s.x[..]);
            assert_eq!(state.dataset.y[k], s.class);
            k += 1;
        }
    }
    assert_eq!(k, state.dataset.len());
    assert_eq!(state.stages.len(), cfg.stages);
    assert_eq!(state.log.boundaries.len(), cfg.stages);
}

#[test]
fn single_candidate_is_a_direct_sample() {
    let f = fixture();
    let via = generate_candidates(&f.pred, &f.sched, None, 3, 2, 1, 4, 1).unwrap();
    let mut streams = candidate_streams(3, 2, 1, 4, 1);
    let direct = sample_batch(&f.pred, 1, None, &f.sched, &mut streams).unwrap();
    assert_eq!(via, direct);
    let three = generate_candidates(&f.pred, &f.sched, None, 3, 2, 1, 4, 3).unwrap();
    assert_eq!(three.row(0), via.row(0));
    assert!(three.row(0) != three.row(1) && three.row(1) != three.row(2));
}

#[test]
fn one_stage_returns_the_seed() {
    let f = fixture();
    let m = models(f);
    let cfg = DistillConfig {
        stages: 1,
        ..quick_distill()
    };
    let state = run_distillation(&cfg, &m, &f.train, None, 9).unwrap();
    let (seed, _) = init_seed(cfg.seed_mode, cfg.ipc, &m, &f.train, 9).unwrap();
    assert_eq!(state.increments.len(), 1);
    assert_eq!(state.dataset, seed.to_labeled(2, 3).unwrap());
}

#[test]
fn identical_increments_are_fully_redundant() {
    let f = fixture();
    let idx: Vec<usize> = (0..f.train.len()).step_by(12).collect();
    let inc = f.train.subset(&idx);
    let m = cross_increment_matrix(&[inc.clone(), inc.clone()], &quick_protocol(150), "same", 2).unwrap();
    assert_eq!(m.off_diagonal_mean, m.diagonal_mean);
    assert!(m.diagonal_mean > 0.9);
}

#[test]
fn conflicting_labels_give_chance_accuracy() {
    let spec = MixtureSpec::ring(2, 3, 3, 2.0, 0.3, 300);
    // B puts one point of every class at each of A's modes, so a model that
    // learned A is right on exactly one label per mode
    let mut a = LabeledSet::empty(2, 3);
    let mut b = LabeledSet::empty(2, 3);
    for mode in &spec.modes {
        for i in 0..5 {
            let jitter = [0.05 * i as f64, -0.03 * i as f64];
            a.push(&[mode.mean[0] + jitter[0], mode.mean[1] + jitter[1]], mode.class).unwrap();
        }
        for c in 0..3 {
            b.push(&mode.mean, c).unwrap();
        }
    }
    let m = cross_increment_matrix(&[a.clone(), b], &quick_protocol(200), "chance", 4).unwrap();
    let ab = m.entries[0][1].unwrap();
    assert!((ab - 1.0 / 3.0).abs() < 1e-12, "{ab}");
    assert!(m.entries[0][0].unwrap() > 0.95);
}

#[test]
fn error_probe_on_own_increment_is_near_zero() {
    let f = fixture();
    let idx: Vec<usize> = (0..f.train.len()).step_by(8).collect();
    let first = f.train.subset(&idx);
    let model = quick_protocol(200).fit(&first, 6, "probe", &[]).unwrap();
    let errors = error_probe(&model, &[first.clone()]).unwrap();
    assert!(errors[0] <= 2, "{} errors out of {}", errors[0], first.len());
}

#[test]
fn mislabelled_sample_lands_in_the_hard_region() {
    let f = fixture();
    let idx: Vec<usize> = (0..f.train.len()).step_by(4).collect();
    let mut data = f.train.subset(&idx);
    let victim = 7;
    data.y[victim] = (data.y[victim] + 1) % 3;
    let dynamics = dynamics_map(&data, &ProbeConfig::default(), &f.reference, 10).unwrap();
    let p = dynamics.points[victim];
    assert!(p.mu < 0.2, "mislabelled mu {}", p.mu);
    assert!(p.ref_conf < 0.2);
    let clean_mu = dynamics.points.iter().filter(|q| q.id != victim).map(|q| q.mu).sum::<f64>()
        / (data.len() - 1) as f64;
    assert!(clean_mu > 0.8, "clean mean mu {clean_mu}");
}
