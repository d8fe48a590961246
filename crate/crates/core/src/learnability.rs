//! Learnability score and the guidance terms built on it.
//!
//! The score of a labeled sample is the current learner's cross-entropy
//! minus `omega` times the reference model's:
//!
//! ```text
//! S(x, y) = CE(learner, x, y) - omega * CE(reference, x, y)
//! ```
//!
//! It is high where the learner still fails but the reference does not.
//! [`LgdHook`] plugs the score into diffusion sampling: inside its window it
//! adds `sign * lambda * rho_t * grad S` to the predicted noise, with
//! `rho_t = sqrt(1 - abar_t) * |eps| / |grad S|`, and then applies a cosine
//! deviation term that pushes each trajectory away from the nearest sample
//! already stored for its class.
//!
//! Noise enters the reverse mean with a negative sign, so moving `x` up the
//! score gradient needs `guidance_sign = -1` in noise space, and moving away
//! from memory needs `deviation_sign = -1`. Those are the defaults.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSchedule, GuidanceHook, GuidanceWindow};
use crate::error::{ensure, Result};
use crate::nn::{cross_entropy, cross_entropy_per_sample, input_gradient, softmax, InputLoss, Mlp};
use crate::tensor::{dot, norm, sq_dist, Tensor2};

/// Gradient norms below this skip the corresponding guidance term.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Which point the classifiers score during guided sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreInput {
    /// The noisy state `x_t` itself.
    #[default]
    Noisy,
    /// The clean estimate `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`, with
    /// `eps` held fixed when differentiating.
    PredictedClean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnabilityConfig {
    /// Weight of the reference-model loss.
    pub omega: f64,
    /// Learnability guidance strength.
    pub lambda: f64,
    /// Deviation guidance strength.
    pub gamma: f64,
    /// Candidates generated per dataset position.
    pub kappa: usize,
    /// Guidance window as fractions of the chain length.
    pub window_lo: f64,
    pub window_hi: f64,
    pub guidance_sign: f64,
    pub deviation_sign: f64,
    pub score_input: ScoreInput,
}

impl Default for LearnabilityConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            lambda: 0.5,
            gamma: 1.0,
            kappa: 3,
            window_lo: 0.2,
            window_hi: 0.9,
            guidance_sign: -1.0,
            deviation_sign: -1.0,
            score_input: ScoreInput::Noisy,
        }
    }
}

impl LearnabilityConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.omega >= 0.0, Config, "omega must be non-negative");
        ensure!(self.lambda >= 0.0, Config, "lambda must be non-negative");
        ensure!(self.gamma >= 0.0, Config, "gamma must be non-negative");
        ensure!(self.kappa >= 1, Config, "kappa must be at least 1");
        ensure!(
            self.guidance_sign.abs() == 1.0 && self.deviation_sign.abs() == 1.0,
            Config,
            "guidance signs must be +1 or -1"
        );
        GuidanceWindow::fraction(1000, self.window_lo, self.window_hi)?;
        Ok(())
    }

    pub fn window(&self, steps: usize) -> Result<GuidanceWindow> {
        GuidanceWindow::fraction(steps, self.window_lo, self.window_hi)
    }
}

/// `CE(learner) - omega * CE(reference)` on the batch (mean cross-entropy).
pub fn learnability_score(
    learner: &Mlp,
    reference: &Mlp,
    x: &Tensor2,
    y: usize,
    omega: f64,
) -> Result<f64> {
    let labels = vec![y; x.rows()];
    let l = cross_entropy(&learner.forward(x)?, &labels)?;
    let r = cross_entropy(&reference.forward(x)?, &labels)?;
    Ok(l - omega * r)
}

/// Score of every row separately.
pub fn learnability_scores(
    learner: &Mlp,
    reference: &Mlp,
    x: &Tensor2,
    y: usize,
    omega: f64,
) -> Result<Vec<f64>> {
    let labels = vec![y; x.rows()];
    let l = cross_entropy_per_sample(&learner.forward(x)?, &labels)?;
    let r = cross_entropy_per_sample(&reference.forward(x)?, &labels)?;
    Ok(l.iter().zip(&r).map(|(a, b)| a - omega * b).collect())
}

fn grad_with(
    learner: &Mlp,
    reference: &Mlp,
    x: &Tensor2,
    y: usize,
    omega: f64,
    loss: InputLoss,
) -> Result<Tensor2> {
    let labels = vec![y; x.rows()];
    let (_, gl) = input_gradient(learner, x, &labels, loss)?;
    if omega == 0.0 {
        return Ok(gl);
    }
    let (_, gr) = input_gradient(reference, x, &labels, loss)?;
    gl.add_scaled(&gr, -omega)
}

/// Gradient of [`learnability_score`] with respect to `x`.
pub fn learnability_grad(
    learner: &Mlp,
    reference: &Mlp,
    x: &Tensor2,
    y: usize,
    omega: f64,
) -> Result<Tensor2> {
    grad_with(learner, reference, x, y, omega, InputLoss::CrossEntropyMean)
}

/// Row `r` is the gradient of row `r`'s own score.
pub fn learnability_grad_rows(
    learner: &Mlp,
    reference: &Mlp,
    x: &Tensor2,
    y: usize,
    omega: f64,
) -> Result<Tensor2> {
    grad_with(learner, reference, x, y, omega, InputLoss::CrossEntropySum)
}

/// `rho_t = sqrt(1 - abar_t) * eps_norm / grad_norm`, or `None` when the
/// gradient is too small to normalise.
pub fn rho(t: usize, eps_norm: f64, grad_norm: f64, sched: &DiffusionSchedule) -> Result<Option<f64>> {
    let ab = sched.alpha_bar(t)?;
    if grad_norm < GRAD_NORM_FLOOR {
        return Ok(None);
    }
    Ok(Some((1.0 - ab).sqrt() * eps_norm / grad_norm))
}

/// `eps + sign * lambda * rho_t * grad_s`
pub fn apply_learnability_guidance(
    eps_hat: &Tensor2,
    grad_s: &Tensor2,
    lambda: f64,
    rho_t: f64,
    sign: f64,
) -> Result<Tensor2> {
    eps_hat.add_scaled(grad_s, sign * lambda * rho_t)
}

/// Cosine similarity, or `None` if either vector is zero.
pub fn cosine(x: &[f64], reference: &[f64]) -> Option<f64> {
    let (nx, nr) = (norm(x), norm(reference));
    if nx == 0.0 || nr == 0.0 {
        return None;
    }
    Some(dot(x, reference) / (nx * nr))
}

/// Cosine similarity of `x` to `reference`; zero vectors score 0.
pub fn deviation_objective(x: &[f64], reference: &[f64]) -> f64 {
    cosine(x, reference).unwrap_or(0.0)
}

/// `d cos(x, r) / dx = r / (|x||r|) - cos(x, r) x / |x|^2`, or `None` for zero vectors.
pub fn deviation_grad(x: &[f64], reference: &[f64]) -> Option<Vec<f64>> {
    let cos = cosine(x, reference)?;
    let (nx, nr) = (norm(x), norm(reference));
    Some(
        x.iter()
            .zip(reference)
            .map(|(&xi, &ri)| ri / (nx * nr) - cos * xi / (nx * nx))
            .collect(),
    )
}

/// `eps - sign * gamma * grad_gd`
pub fn apply_deviation_guidance(
    eps_tilde: &Tensor2,
    grad_gd: &Tensor2,
    gamma: f64,
    sign: f64,
) -> Result<Tensor2> {
    eps_tilde.add_scaled(grad_gd, -sign * gamma)
}

/// `eps + lambda * grad_logp`
pub fn classifier_guidance(eps_hat: &Tensor2, grad_logp: &Tensor2, lambda: f64) -> Result<Tensor2> {
    eps_hat.add_scaled(grad_logp, lambda)
}

/// Previously selected samples, per class, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryBuffer {
    per_class: Vec<Vec<Vec<f64>>>,
}

impl MemoryBuffer {
    pub fn new(classes: usize) -> Self {
        Self {
            per_class: vec![Vec::new(); classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn push(&mut self, class: usize, sample: &[f64]) -> Result<()> {
        ensure!(class < self.per_class.len(), Domain, "class {class} out of range");
        ensure!(
            sample.iter().all(|v| v.is_finite()),
            Domain,
            "memory samples must be finite"
        );
        self.per_class[class].push(sample.to_vec());
        Ok(())
    }

    pub fn len(&self, class: usize) -> usize {
        self.per_class.get(class).map_or(0, Vec::len)
    }

    pub fn samples(&self, class: usize) -> &[Vec<f64>] {
        self.per_class.get(class).map_or(&[], |v| v.as_slice())
    }

    pub fn contains(&self, class: usize, sample: &[f64]) -> bool {
        self.samples(class).iter().any(|s| s.as_slice() == sample)
    }

    /// Euclidean-nearest stored sample of `class`; ties go to the earliest
    /// insertion. `None` if the class has no samples.
    pub fn nearest(&self, x: &[f64], class: usize) -> Option<(usize, &[f64])> {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in self.samples(class).iter().enumerate() {
            let d = sq_dist(x, s);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| (i, self.per_class[class][i].as_slice()))
    }
}

/// One guided step of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub t: usize,
    pub row: usize,
    pub grad_norm: f64,
    /// `None` when the learnability term was skipped.
    pub rho: Option<f64>,
    pub score: f64,
    /// Cosine similarity to the nearest memory sample, if deviation guidance ran.
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySummary {
    pub guided_steps: u64,
    pub rho_skips: u64,
    pub memory_skips: u64,
    pub degenerate_deviation_skips: u64,
    pub mean_rho: f64,
    pub mean_score: f64,
}

impl TelemetrySummary {
    pub fn merge(&mut self, other: &TelemetrySummary) {
        let n = self.guided_steps + other.guided_steps;
        if n > 0 {
            let w = |a: f64, na: u64, b: f64, nb: u64| (a * na as f64 + b * nb as f64) / n as f64;
            self.mean_score = w(self.mean_score, self.guided_steps, other.mean_score, other.guided_steps);
            let ra = self.guided_steps - self.rho_skips;
            let rb = other.guided_steps - other.rho_skips;
            if ra + rb > 0 {
                self.mean_rho = (self.mean_rho * ra as f64 + other.mean_rho * rb as f64) / (ra + rb) as f64;
            }
        }
        self.guided_steps = n;
        self.rho_skips += other.rho_skips;
        self.memory_skips += other.memory_skips;
        self.degenerate_deviation_skips += other.degenerate_deviation_skips;
    }
}

pub fn write_telemetry_csv<W: Write>(records: &[StepTelemetry], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "row", "grad_norm", "rho", "score", "cosine"])
        .map_err(crate::data::csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in records {
        out.write_record([
            r.t.to_string(),
            r.row.to_string(),
            r.grad_norm.to_string(),
            opt(r.rho),
            r.score.to_string(),
            opt(r.cosine),
        ])
        .map_err(crate::data::csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Learnability plus deviation guidance against a fixed memory snapshot.
pub struct LgdHook<'a> {
    learner: &'a Mlp,
    reference: &'a Mlp,
    memory: &'a MemoryBuffer,
    cfg: LearnabilityConfig,
    sched: &'a DiffusionSchedule,
    window: GuidanceWindow,
    record: bool,
    pub telemetry: Vec<StepTelemetry>,
    pub summary: TelemetrySummary,
    rho_sum: f64,
    score_sum: f64,
}

impl<'a> LgdHook<'a> {
    pub fn new(
        learner: &'a Mlp,
        reference: &'a Mlp,
        memory: &'a MemoryBuffer,
        cfg: &LearnabilityConfig,
        sched: &'a DiffusionSchedule,
    ) -> Result<Self> {
        cfg.validate()?;
        ensure!(
            learner.input_dim() == reference.input_dim(),
            Dimension,
            "learner and reference disagree on input dimension"
        );
        Ok(Self {
            learner,
            reference,
            memory,
            window: cfg.window(sched.steps())?,
            cfg: cfg.clone(),
            sched,
            record: false,
            telemetry: Vec::new(),
            summary: TelemetrySummary::default(),
            rho_sum: 0.0,
            score_sum: 0.0,
        })
    }

    /// Keep a per-step, per-row telemetry record.
    pub fn recording(mut self, on: bool) -> Self {
        self.record = on;
        self
    }
}

impl GuidanceHook for LgdHook<'_> {
    fn window(&self) -> GuidanceWindow {
        self.window
    }

    fn adjust(&mut self, x_t: &Tensor2, t: usize, class: usize, eps_hat: &Tensor2) -> Result<Tensor2> {
        let cfg = &self.cfg;
        let mut eps = eps_hat.clone();
        let n = x_t.rows();

        let mut grad_norms = vec![0.0; n];
        let mut rhos = vec![None; n];
        let mut scores = vec![0.0; n];
        if cfg.lambda > 0.0 {
            let (probe, chain) = match cfg.score_input {
                ScoreInput::Noisy => (x_t.clone(), 1.0),
                ScoreInput::PredictedClean => {
                    (self.sched.predict_x0(x_t, t, eps_hat)?, 1.0 / self.sched.alpha_bar(t)?.sqrt())
                }
            };
            let mut grad = learnability_grad_rows(self.learner, self.reference, &probe, class, cfg.omega)?;
            if chain != 1.0 {
                grad = grad.scale(chain);
            }
            scores = learnability_scores(self.learner, self.reference, &probe, class, cfg.omega)?;
            for r in 0..n {
                let gn = norm(grad.row(r));
                grad_norms[r] = gn;
                match rho(t, norm(eps_hat.row(r)), gn, self.sched)? {
                    Some(rho_t) => {
                        let k = cfg.guidance_sign * cfg.lambda * rho_t;
                        for (e, g) in eps.row_mut(r).iter_mut().zip(grad.row(r)) {
                            *e += k * g;
                        }
                        rhos[r] = Some(rho_t);
                        self.rho_sum += rho_t;
                    }
                    None => self.summary.rho_skips += 1,
                }
            }
        }

        let mut cosines = vec![None; n];
        if cfg.gamma > 0.0 {
            for r in 0..n {
                let xr = x_t.row(r);
                let Some((_, nearest)) = self.memory.nearest(xr, class) else {
                    self.summary.memory_skips += 1;
                    continue;
                };
                let Some(g) = deviation_grad(xr, nearest) else {
                    self.summary.degenerate_deviation_skips += 1;
                    continue;
                };
                cosines[r] = cosine(xr, nearest);
                let k = -cfg.deviation_sign * cfg.gamma;
                for (e, gv) in eps.row_mut(r).iter_mut().zip(&g) {
                    *e += k * gv;
                }
            }
        }

        for r in 0..n {
            self.summary.guided_steps += 1;
            self.score_sum += scores[r];
            if self.record {
                self.telemetry.push(StepTelemetry {
                    t,
                    row: r,
                    grad_norm: grad_norms[r],
                    rho: rhos[r],
                    score: scores[r],
                    cosine: cosines[r],
                });
            }
        }
        let steps = self.summary.guided_steps as f64;
        self.summary.mean_score = self.score_sum / steps;
        let rho_steps = (self.summary.guided_steps - self.summary.rho_skips) as f64;
        if rho_steps > 0.0 {
            self.summary.mean_rho = self.rho_sum / rho_steps;
        }
        Ok(eps)
    }
}

/// Plain classifier guidance toward `class` using a single classifier:
/// `eps + lambda * sign * grad log p(class | x_t)`.
pub struct ClassifierGuidanceHook<'a> {
    classifier: &'a Mlp,
    lambda: f64,
    sign: f64,
    window: GuidanceWindow,
}

impl<'a> ClassifierGuidanceHook<'a> {
    pub fn new(classifier: &'a Mlp, lambda: f64, sign: f64, window: GuidanceWindow) -> Self {
        Self {
            classifier,
            lambda,
            sign,
            window,
        }
    }
}

impl GuidanceHook for ClassifierGuidanceHook<'_> {
    fn window(&self) -> GuidanceWindow {
        self.window
    }

    fn adjust(&mut self, x_t: &Tensor2, _t: usize, class: usize, eps_hat: &Tensor2) -> Result<Tensor2> {
        let labels = vec![class; x_t.rows()];
        // log p = -CE, so its gradient is the negated summed-CE gradient
        let (_, g) = input_gradient(self.classifier, x_t, &labels, InputLoss::CrossEntropySum)?;
        classifier_guidance(eps_hat, &g.scale(-self.sign), self.lambda)
    }
}

/// Probability the classifier assigns to the labeled class, per row.
pub fn class_probability(params: &Mlp, x: &Tensor2, labels: &[usize]) -> Result<Vec<f64>> {
    let p = softmax(&params.forward(x)?);
    ensure!(labels.len() == x.rows(), Dimension, "label count mismatch");
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            ensure!(y < p.cols(), Domain, "label {y} out of range");
            Ok(p.get(r, y))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ClassifierArch};
    use crate::rng::stream;

    fn scalar(v: f64) -> Tensor2 {
        Tensor2::row_vector(&[v])
    }

    fn const_logit_net(logits: &[f64]) -> Mlp {
        // zero weights, biases = logits: output independent of x
        let c = logits.len();
        let mut params = vec![0.0; 2 * c];
        params.extend_from_slice(logits);
        Mlp::from_parts(vec![2, c], vec![Activation::Identity], params).unwrap()
    }

    #[test]
    fn score_arithmetic() {
        let x = Tensor2::row_vector(&[0.3, -0.2]);
        let a = const_logit_net(&[0.0, 1.0]);
        assert_eq!(learnability_score(&a, &a, &x, 0, 1.0).unwrap(), 0.0);

        // CE = log(1 + e^{-z}) for logits [z, 0], label 0; solve for losses 2 and 1
        let logit_for = |loss: f64| -((loss as f64).exp() - 1.0).ln();
        let learner = const_logit_net(&[logit_for(2.0), 0.0]);
        let reference = const_logit_net(&[logit_for(1.0), 0.0]);
        let s = learnability_score(&learner, &reference, &x, 0, 0.5).unwrap();
        assert!((s - 1.5).abs() < 1e-12);

        let s0 = learnability_score(&learner, &reference, &x, 0, 0.0).unwrap();
        let l = cross_entropy(&learner.forward(&x).unwrap(), &[0]).unwrap();
        assert_eq!(s0, l);
    }

    #[test]
    fn score_class_out_of_range() {
        let a = const_logit_net(&[0.0, 1.0]);
        let x = Tensor2::row_vector(&[0.0, 0.0]);
        assert!(learnability_score(&a, &a, &x, 2, 0.5).is_err());
    }

    #[test]
    fn grad_cancellation_and_degenerate_weight() {
        let arch = ClassifierArch { width: 8, depth: 2 };
        let learner = arch.build(2, 3, &mut stream(1, "l", &[])).unwrap();
        let reference = arch.build(2, 3, &mut stream(2, "r", &[])).unwrap();
        let x = crate::rng::normal_tensor(4, 2, &mut stream(3, "x", &[]));
        let g = learnability_grad(&learner, &learner, &x, 1, 1.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g0 = learnability_grad(&learner, &reference, &x, 1, 0.0).unwrap();
        let (_, gl) = input_gradient(&learner, &x, &[1; 4], InputLoss::CrossEntropyMean).unwrap();
        assert_eq!(g0, gl);
    }

    #[test]
    fn rho_cases() {
        // single-step schedule with beta = 0.25 gives abar = 0.75
        let s = DiffusionSchedule::from_betas(vec![0.25]).unwrap();
        assert!((rho(1, 3.0, 3.0, &s).unwrap().unwrap() - 0.5).abs() < 1e-12);
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.1, 1.0 - 0.19 / 0.81]).unwrap();
        // abar_3 = 0.19
        assert!((s.alpha_bar(3).unwrap() - 0.19).abs() < 1e-12);
        assert!((rho(3, 2.0, 4.0, &s).unwrap().unwrap() - 0.45).abs() < 1e-12);
        let clean = DiffusionSchedule::from_betas(vec![1e-12]).unwrap();
        assert!(rho(1, 1.0, 1.0, &clean).unwrap().unwrap() < 1e-5);
        assert_eq!(rho(1, 1.0, 1e-13, &clean).unwrap(), None);
    }

    #[test]
    fn guidance_arithmetic() {
        let e = scalar(1.0);
        assert_eq!(apply_learnability_guidance(&e, &scalar(0.2), 0.0, 0.1, 1.0).unwrap(), e);
        assert_eq!(apply_learnability_guidance(&e, &scalar(0.0), 15.0, 0.1, 1.0).unwrap(), e);
        let g = apply_learnability_guidance(&e, &scalar(0.2), 15.0, 0.1, 1.0).unwrap();
        assert!((g.get(0, 0) - 1.3).abs() < 1e-12);

        assert_eq!(apply_deviation_guidance(&e, &scalar(0.01), 0.0, 1.0).unwrap(), e);
        assert_eq!(apply_deviation_guidance(&e, &scalar(0.0), 50.0, 1.0).unwrap(), e);
        let d = apply_deviation_guidance(&e, &scalar(0.01), 50.0, 1.0).unwrap();
        assert!((d.get(0, 0) - 0.5).abs() < 1e-12);

        assert_eq!(classifier_guidance(&e, &scalar(0.25), 0.0).unwrap(), e);
        assert_eq!(classifier_guidance(&e, &scalar(0.0), 2.0).unwrap(), e);
        assert!((classifier_guidance(&e, &scalar(0.25), 2.0).unwrap().get(0, 0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_objective_cases() {
        assert!((deviation_objective(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(deviation_objective(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((deviation_objective(&[1.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((deviation_objective(&[1.0, 0.0], &[1.0, 1.0]) - 0.707107).abs() < 1e-6);
        assert_eq!(deviation_objective(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert!(deviation_grad(&[0.0, 0.0], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn deviation_grad_matches_differences() {
        let x = [0.7, -1.3, 0.4];
        let r = [-0.2, 0.5, 1.1];
        let g = deviation_grad(&x, &r).unwrap();
        for k in 0..3 {
            let h = 1e-6;
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            let fd = (deviation_objective(&xp, &r) - deviation_objective(&xm, &r)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn nearest_memory_rules() {
        let mut m = MemoryBuffer::new(2);
        m.push(0, &[0.0, 0.0]).unwrap();
        m.push(0, &[10.0, 10.0]).unwrap();
        assert_eq!(m.nearest(&[1.0, 1.0], 0).unwrap().1, &[0.0, 0.0]);
        assert!(m.nearest(&[1.0, 1.0], 1).is_none());
        m.push(1, &[5.0, 5.0]).unwrap();
        assert_eq!(m.nearest(&[-100.0, 3.0], 1).unwrap().1, &[5.0, 5.0]);
        let mut tie = MemoryBuffer::new(1);
        tie.push(0, &[1.0, 0.0]).unwrap();
        tie.push(0, &[-1.0, 0.0]).unwrap();
        assert_eq!(tie.nearest(&[0.0, 0.0], 0).unwrap().0, 0);
    }

    #[test]
    fn zero_strength_hook_is_identity() {
        let sched = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
        let arch = ClassifierArch { width: 8, depth: 1 };
        let l = arch.build(2, 2, &mut stream(1, "l", &[])).unwrap();
        let r = arch.build(2, 2, &mut stream(2, "r", &[])).unwrap();
        let mut mem = MemoryBuffer::new(2);
        mem.push(0, &[1.0, 1.0]).unwrap();
        let cfg = LearnabilityConfig {
            lambda: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let mut hook = LgdHook::new(&l, &r, &mem, &cfg, &sched).unwrap();
        let x = crate::rng::normal_tensor(3, 2, &mut stream(3, "x", &[]));
        let e = crate::rng::normal_tensor(3, 2, &mut stream(4, "e", &[]));
        assert_eq!(hook.adjust(&x, 5, 0, &e).unwrap(), e);
    }

    #[test]
    fn empty_memory_reduces_to_learnability_only() {
        let sched = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
        let arch = ClassifierArch { width: 8, depth: 1 };
        let l = arch.build(2, 2, &mut stream(1, "l", &[])).unwrap();
        let r = arch.build(2, 2, &mut stream(2, "r", &[])).unwrap();
        let empty = MemoryBuffer::new(2);
        let x = crate::rng::normal_tensor(3, 2, &mut stream(3, "x", &[]));
        let e = crate::rng::normal_tensor(3, 2, &mut stream(4, "e", &[]));
        let full = LearnabilityConfig::default();
        let no_dev = LearnabilityConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let mut a = LgdHook::new(&l, &r, &empty, &full, &sched).unwrap();
        let mut b = LgdHook::new(&l, &r, &empty, &no_dev, &sched).unwrap();
        assert_eq!(a.adjust(&x, 5, 1, &e).unwrap(), b.adjust(&x, 5, 1, &e).unwrap());
        assert_eq!(a.summary.memory_skips, 3);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = LearnabilityConfig {
            kappa: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = LearnabilityConfig {
            guidance_sign: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
