//! Plain SGD and Adam over named flat parameter tensors.

use serde::{Deserialize, Serialize};

use crate::encoders::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    hyper: AdamHyper,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, hyper: AdamHyper) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self { kind, lr, hyper, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `params` and `grads` must list the same tensors in
    /// the same order. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<(String, &mut [f64])>, grads: Vec<(String, &[f64])>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter tensors vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((pn, p), (gn, g)) in params.iter().zip(&grads) {
            if pn != gn || p.len() != g.len() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {pn} ({}) vs gradient {gn} ({})",
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: gn.clone() });
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), (_, g)) in params.into_iter().zip(grads) {
                    for (w, dw) in p.iter_mut().zip(g) {
                        *w -= self.lr * dw;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                let AdamHyper { beta1, beta2, eps } = self.hyper;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (k, ((_, p), (_, g))) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step_model(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        self.step(params.tensors_mut(), grads.tensors())?;
        if !params.is_finite() {
            return Err(Error::NonFiniteGradient { tensor: "updated parameters".into() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one(opt: &mut Optimizer, w: &mut f64, g: f64) -> Result<()> {
        opt.step(vec![("w".into(), std::slice::from_mut(w))], vec![("w".into(), std::slice::from_ref(&g))])
    }

    #[test]
    fn sgd_on_square() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, AdamHyper::default()).unwrap();
        let mut w = 1.0;
        let g = 2.0 * w;
        one(&mut opt, &mut w, g).unwrap();
        assert_abs_diff_eq!(w, 0.8, epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.1, AdamHyper::default()).unwrap();
            let mut w = 0.37;
            one(&mut opt, &mut w, 0.0).unwrap();
            assert_eq!(w, 0.37);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let hyper = AdamHyper::default();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, hyper).unwrap();
        let mut w = 1.0;
        one(&mut opt, &mut w, 0.5).unwrap();
        assert_abs_diff_eq!(w, 1.0 - 0.01 * 0.5 / (0.5 + hyper.eps), epsilon = 1e-15);
        // second step with the same gradient: the bias-corrected moments are unchanged
        one(&mut opt, &mut w, 0.5).unwrap();
        assert_abs_diff_eq!(w, 1.0 - 2.0 * 0.01 * 0.5 / (0.5 + hyper.eps), epsilon = 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, AdamHyper::default()).unwrap();
        let mut w = 1.0;
        let err = one(&mut opt, &mut w, f64::NAN).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref tensor } if tensor == "w"));
        assert_eq!(w, 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.0, AdamHyper::default()).is_err());
    }
}
