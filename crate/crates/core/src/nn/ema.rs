use crate::error::{ensure, Result};

use super::mlp::Mlp;

/// Exponential moving average of a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams {
    pub decay: f64,
    pub shadow: Mlp,
}

impl EmaParams {
    pub fn new(decay: f64, init: &Mlp) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&decay),
            Config,
            "EMA decay {decay} outside [0, 1]"
        );
        Ok(Self {
            decay,
            shadow: init.clone(),
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * current`
    pub fn update(&mut self, current: &Mlp) -> Result<()> {
        ensure!(
            self.shadow.same_shape(current),
            Dimension,
            "EMA shadow and tracked network differ in shape"
        );
        if self.decay == 0.0 {
            self.shadow.params_mut().copy_from_slice(current.params());
            return Ok(());
        }
        // written as a step toward `current` so that current == shadow is an exact fixed point
        let k = 1.0 - self.decay;
        for (s, &c) in self.shadow.params_mut().iter_mut().zip(current.params()) {
            *s += k * (c - *s);
        }
        Ok(())
    }
}
