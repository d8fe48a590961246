use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor2;

/// Per-step DDPM constants, indexed by `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear `beta` ramp from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 1, Config, "schedule needs at least one step");
        ensure!(
            beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            Config,
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        );
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        ensure!(!beta.is_empty(), Config, "schedule needs at least one step");
        ensure!(
            beta.iter().all(|&b| b > 0.0 && b < 1.0),
            Config,
            "every beta must lie in (0, 1)"
        );
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        ensure!(
            t >= 1 && t <= self.steps(),
            Domain,
            "timestep {t} outside 1..={}",
            self.steps()
        );
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.idx(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`
    pub fn forward_noise(&self, x0: &Tensor2, t: usize, eps: &Tensor2) -> Result<Tensor2> {
        x0.check_same_shape(eps, "forward_noise")?;
        let ab = self.alpha_bar(t)?;
        x0.scale(ab.sqrt()).add_scaled(eps, (1.0 - ab).sqrt())
    }

    /// Inverts [`forward_noise`](Self::forward_noise) given the noise.
    pub fn predict_x0(&self, x_t: &Tensor2, t: usize, eps: &Tensor2) -> Result<Tensor2> {
        let ab = self.alpha_bar(t)?;
        Ok(x_t.add_scaled(eps, -(1.0 - ab).sqrt())?.scale(1.0 / ab.sqrt()))
    }

    /// `mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(1 - beta_t)`
    pub fn reverse_mean(&self, x_t: &Tensor2, t: usize, eps_hat: &Tensor2) -> Result<Tensor2> {
        x_t.check_same_shape(eps_hat, "reverse_mean")?;
        let b = self.beta(t)?;
        let ab = self.alpha_bar(t)?;
        Ok(x_t
            .add_scaled(eps_hat, -b / (1.0 - ab).sqrt())?
            .scale(1.0 / (1.0 - b).sqrt()))
    }

    /// `x_{t-1} = mu + sigma_t z`; the noise term is dropped at `t = 1`.
    pub fn reverse_step(
        &self,
        x_t: &Tensor2,
        t: usize,
        eps_hat: &Tensor2,
        z: &Tensor2,
    ) -> Result<Tensor2> {
        x_t.check_same_shape(z, "reverse_step noise")?;
        let mu = self.reverse_mean(x_t, t, eps_hat)?;
        if t == 1 {
            return Ok(mu);
        }
        mu.add_scaled(z, self.sigma(t)?)
    }

    /// `t,beta,alpha,alpha_bar,sigma` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "beta", "alpha", "alpha_bar", "sigma"])
            .map_err(crate::data::csv_err)?;
        for i in 0..self.steps() {
            out.write_record([
                (i + 1).to_string(),
                self.beta[i].to_string(),
                self.alpha[i].to_string(),
                self.alpha_bar[i].to_string(),
                self.sigma[i].to_string(),
            ])
            .map_err(crate::data::csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}
