//! Parameter update rules.

use super::{GradError, Param};

/// Which update rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd|adam)")),
        }
    }
}

impl std::fmt::Display for OptimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Adam => "adam",
        })
    }
}

/// Optimizer state for a fixed list of parameters, matched by position.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    // Adam first/second moment estimates, one vec per parameter.
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, params: &[&Param]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// Fails (leaving parameters untouched) if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<(), GradError> {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter list mismatch");
        for p in params.iter() {
            if let Some(bad) = p.grad.iter().find(|g| !g.is_finite()) {
                return Err(GradError::NonFiniteGradient(format!(
                    "{}: {bad}",
                    p.name
                )));
            }
        }
        self.step_count += 1;
        match self.kind {
            OptimKind::Sgd => {
                for p in params.iter_mut() {
                    for (w, g) in p.data.iter_mut().zip(&p.grad) {
                        *w -= self.lr * g;
                    }
                }
            }
            OptimKind::Adam => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (i, p) in params.iter_mut().enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, &g)) in p.data.iter_mut().zip(&p.grad).enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        for p in params.iter_mut() {
            p.zero_grad();
        }
        Ok(())
    }
}
