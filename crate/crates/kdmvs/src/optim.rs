//! Adaptive-moment gradient descent over named parameter grids.
//!
//! First and second moment estimates are kept per parameter name, so one
//! optimizer instance follows a model across training steps regardless of
//! how the per-step tape was built. A step with a non-finite gradient is
//! refused before touching any parameter.

use crate::grid::Grid;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: Vec<(String, Grid, Grid)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every entry. `grad_of` returns the gradient grid for
    /// a parameter name, or `None` for parameters the loss never touched
    /// (treated as zero gradient, so their momentum keeps decaying).
    pub fn step(
        &mut self,
        entries: &mut [(String, Grid)],
        grad_of: impl Fn(&str) -> Option<Grid>,
    ) -> Result<()> {
        let grads: Vec<Option<Grid>> = entries
            .iter()
            .map(|(name, param)| {
                let g = grad_of(name);
                if let Some(g) = &g {
                    if g.shape() != param.shape() {
                        return Err(Error::ShapeMismatch {
                            left: g.shape(),
                            right: param.shape(),
                            context: "gradient vs parameter",
                        });
                    }
                    if !g.all_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient for parameter '{name}'"
                        )));
                    }
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;

        self.t += 1;
        let c = self.cfg.clone();
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((name, param), grad) in entries.iter_mut().zip(grads) {
            if !self.moments.iter().any(|(n, _, _)| n == name) {
                self.moments.push((
                    name.clone(),
                    Grid::zeros(param.h(), param.w(), param.c()),
                    Grid::zeros(param.h(), param.w(), param.c()),
                ));
            }
            let (_, m, v) = self
                .moments
                .iter_mut()
                .find(|(n, _, _)| n == name)
                .unwrap();
            let zero;
            let g = match &grad {
                Some(g) => g,
                None => {
                    zero = Grid::zeros(param.h(), param.w(), param.c());
                    &zero
                }
            };
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
