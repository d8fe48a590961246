use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{standard_normal, StreamRng};
use crate::tensor::Tensor2;

use super::predictor::NoisePredictor;
use super::schedule::DiffusionSchedule;

/// Inclusive range of timesteps on which a hook is consulted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceWindow {
    pub lo: usize,
    pub hi: usize,
}

impl GuidanceWindow {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        ensure!(lo <= hi, Config, "guidance window [{lo}, {hi}] is empty");
        Ok(Self { lo, hi })
    }

    /// The window covering the fractions `[lo, hi]` of a `steps`-step chain.
    pub fn fraction(steps: usize, lo: f64, hi: f64) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi,
            Config,
            "window fractions must satisfy 0 <= lo <= hi <= 1"
        );
        let lo_t = ((lo * steps as f64).round() as usize).max(1);
        let hi_t = ((hi * steps as f64).round() as usize).min(steps);
        Self::new(lo_t, hi_t)
    }

    pub fn contains(&self, t: usize) -> bool {
        self.lo <= t && t <= self.hi
    }
}

/// Adjusts the predicted noise during sampling.
///
/// The sampler only calls [`adjust`](GuidanceHook::adjust) for timesteps inside
/// [`window`](GuidanceHook::window); elsewhere the raw prediction is used
/// untouched. Every row of `x_t` is one independent trajectory of class `class`.
pub trait GuidanceHook {
    fn window(&self) -> GuidanceWindow;

    fn adjust(&mut self, x_t: &Tensor2, t: usize, class: usize, eps_hat: &Tensor2) -> Result<Tensor2>;
}

/// Returns the prediction unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityHook(pub GuidanceWindow);

impl GuidanceHook for IdentityHook {
    fn window(&self) -> GuidanceWindow {
        self.0
    }

    fn adjust(&mut self, _: &Tensor2, _: usize, _: usize, eps_hat: &Tensor2) -> Result<Tensor2> {
        Ok(eps_hat.clone())
    }
}

/// Draws one sample per rng stream, all of class `class`.
///
/// Row `r` of the result depends only on `streams[r]`: its starting noise
/// `x_T` and every per-step `z` come from that stream alone, so batching
/// never changes a trajectory.
pub fn sample_batch(
    pred: &NoisePredictor,
    class: usize,
    mut hook: Option<&mut dyn GuidanceHook>,
    sched: &DiffusionSchedule,
    streams: &mut [StreamRng],
) -> Result<Tensor2> {
    ensure!(class < pred.classes(), Domain, "class {class} out of range");
    ensure!(
        pred.steps() == sched.steps(),
        Config,
        "predictor trained for {} steps, schedule has {}",
        pred.steps(),
        sched.steps()
    );
    let n = streams.len();
    let d = pred.dim();
    let mut x = Tensor2::zeros(n, d);
    for (r, rng) in streams.iter_mut().enumerate() {
        for v in x.row_mut(r) {
            *v = standard_normal(rng);
        }
    }
    for t in (1..=sched.steps()).rev() {
        let mut eps = pred.predict(&x, t, class)?;
        if let Some(h) = hook.as_deref_mut() {
            if h.window().contains(t) {
                let adjusted = h.adjust(&x, t, class, &eps)?;
                adjusted.check_same_shape(&eps, "guidance hook output")?;
                eps = adjusted;
            }
        }
        let mut z = Tensor2::zeros(n, d);
        if t > 1 {
            for (r, rng) in streams.iter_mut().enumerate() {
                for v in z.row_mut(r) {
                    *v = standard_normal(rng);
                }
            }
        }
        x = sched.reverse_step(&x, t, &eps, &z)?;
    }
    Ok(x)
}

/// Single-trajectory convenience over [`sample_batch`].
pub fn sample(
    pred: &NoisePredictor,
    class: usize,
    hook: Option<&mut dyn GuidanceHook>,
    sched: &DiffusionSchedule,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let mut streams = [rng.clone()];
    let x = sample_batch(pred, class, hook, sched, &mut streams)?;
    *rng = streams[0].clone();
    Ok(x.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::PredictorArch;
    use crate::rng::stream;

    fn small_arch() -> PredictorArch {
        PredictorArch {
            width: 8,
            depth: 1,
            embed_dim: 4,
        }
    }

    #[test]
    fn window_fractions_scale_with_steps() {
        let w = GuidanceWindow::fraction(200, 0.2, 0.9).unwrap();
        assert_eq!((w.lo, w.hi), (40, 180));
        let w = GuidanceWindow::fraction(50, 0.2, 0.9).unwrap();
        assert_eq!((w.lo, w.hi), (10, 45));
        assert!(GuidanceWindow::new(5, 4).is_err());
    }

    #[test]
    fn single_step_zero_predictor_closed_form() {
        let sched = DiffusionSchedule::linear(1, 0.3, 0.3).unwrap();
        let pred = NoisePredictor::zeros(2, 1, 1, small_arch()).unwrap();
        let mut rng = stream(5, "s", &[]);
        let x0 = sample(&pred, 0, None, &sched, &mut rng.clone()).unwrap();
        let x1 = [standard_normal(&mut rng), standard_normal(&mut rng)];
        for (a, b) in x0.iter().zip(x1) {
            assert!((a - b / 0.7f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_hook_is_bit_identical() {
        let sched = DiffusionSchedule::linear(30, 1e-4, 0.02).unwrap();
        let pred = NoisePredictor::new(2, 2, 30, small_arch(), &mut stream(1, "p", &[])).unwrap();
        let mut s1 = vec![stream(2, "c", &[0]), stream(2, "c", &[1])];
        let mut s2 = s1.clone();
        let a = sample_batch(&pred, 1, None, &sched, &mut s1).unwrap();
        let mut hook = IdentityHook(GuidanceWindow::new(1, 30).unwrap());
        let b = sample_batch(&pred, 1, Some(&mut hook), &sched, &mut s2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_rows_match_single_draws() {
        let sched = DiffusionSchedule::linear(15, 1e-4, 0.02).unwrap();
        let pred = NoisePredictor::new(3, 2, 15, small_arch(), &mut stream(1, "p", &[])).unwrap();
        let mut streams: Vec<_> = (0..3).map(|k| stream(9, "c", &[k])).collect();
        let batch = sample_batch(&pred, 0, None, &sched, &mut streams).unwrap();
        for k in 0..3 {
            let single = sample(&pred, 0, None, &sched, &mut stream(9, "c", &[k])).unwrap();
            assert_eq!(batch.row(k as usize), single.as_slice());
        }
    }

    #[test]
    fn class_out_of_range() {
        let sched = DiffusionSchedule::linear(3, 1e-4, 0.02).unwrap();
        let pred = NoisePredictor::zeros(2, 2, 3, small_arch()).unwrap();
        assert!(sample(&pred, 2, None, &sched, &mut stream(0, "s", &[])).is_err());
    }
}
