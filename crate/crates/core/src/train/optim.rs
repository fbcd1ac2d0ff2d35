use crate::error::{Error, Result};
use crate::model::{HeadParams, TENSOR_NAMES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam()
    }
}

/// Step counter plus Adam moment estimates shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: HeadParams,
    pub second_moment: HeadParams,
}

impl OptimizerState {
    pub fn new(params: &HeadParams) -> Self {
        let mut zero = params.clone();
        for t in zero.tensors_mut() {
            t.fill(0.0);
        }
        Self {
            step: 0,
            first_moment: zero.clone(),
            second_moment: zero,
        }
    }

    /// Applies one update. Non-finite gradients abort without touching
    /// `params`.
    pub fn apply(&mut self, params: &mut HeadParams, grads: &HeadParams, lr: f64, optimizer: Optimizer) -> Result<()> {
        for (t, name) in grads.tensors().iter().zip(TENSOR_NAMES) {
            if let Some(i) = t.as_slice().iter().position(|x| !x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in {name}[{i}] at step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        match optimizer {
            Optimizer::Sgd => {
                for (w, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (x, gx) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *x -= lr * gx;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let moments = self.first_moment.tensors_mut().into_iter().zip(self.second_moment.tensors_mut());
                for ((w, g), (m, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
                    let it = w
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
                    for ((x, &gx), (mx, vx)) in it {
                        *mx = beta1 * *mx + (1.0 - beta1) * gx;
                        *vx = beta2 * *vx + (1.0 - beta2) * gx * gx;
                        *x -= lr * (*mx / c1) / ((*vx / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
