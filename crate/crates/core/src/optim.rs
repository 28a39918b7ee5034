//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::InvalidValue(format!("optimizer `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Heavy-ball momentum for SGD; first-moment decay is fixed at 0.9 for Adam.
    pub momentum: f64,
}

/// SGD with momentum (PyTorch convention) or Adam, with L2 weight decay
/// added to the gradient.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Self {
        let v = match cfg.kind {
            OptimizerKind::Adam => vec![0.0; n_params],
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer {
            cfg,
            m: vec![0.0; n_params],
            v,
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.m.len() {
            return Err(Error::Layout {
                left: params.len(),
                right: grad.len(),
            });
        }
        self.t += 1;
        let lr = self.cfg.lr as f32;
        let wd = self.cfg.weight_decay as f32;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                let mu = self.cfg.momentum as f32;
                for ((p, &g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    let g = g + wd * *p;
                    *m = if self.t == 1 { g } else { mu * *m + g };
                    *p -= lr * if mu > 0.0 { *m } else { g };
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    let g = g + wd * *p;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: OptimizerKind, momentum: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            lr: 0.1,
            weight_decay: 0.0,
            momentum,
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = Optimizer::new(cfg(OptimizerKind::Sgd, 0.0), 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, 1.0]).unwrap();
        assert_eq!(p, vec![0.95, -1.1]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Optimizer::new(cfg(OptimizerKind::Sgd, 0.9), 1);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0]).unwrap();
        opt.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - -(0.1 + 0.19)).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut opt = Optimizer::new(cfg(OptimizerKind::Adam, 0.9), 2);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.01]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-5);
        assert!((p[1] - 0.1).abs() < 1e-3);
    }

    #[test]
    fn minimizes_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(cfg(kind, 0.5), 1);
            let mut p = vec![4.0f32];
            for _ in 0..500 {
                let g = [2.0 * (p[0] - 1.0)];
                opt.step(&mut p, &g).unwrap();
            }
            assert!((p[0] - 1.0).abs() < 1e-2, "{kind:?}: {}", p[0]);
        }
    }

    #[test]
    fn layout_mismatch() {
        let mut opt = Optimizer::new(cfg(OptimizerKind::Sgd, 0.0), 2);
        assert!(opt.step(&mut [0.0, 0.0], &[1.0]).is_err());
    }
}
