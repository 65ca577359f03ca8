//! Optimizers and learning-rate schedules.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::backbones::Family;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum and coupled weight decay.
    Sgd,
    AdamW,
}

impl OptimizerKind {
    /// Momentum SGD for convolutional students, AdamW for token students.
    pub fn for_family(family: Family) -> Self {
        match family {
            Family::Cnn => OptimizerKind::Sgd,
            Family::Vit | Family::Mlp => OptimizerKind::AdamW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    /// Cosine decay to zero over the configured number of steps.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub schedule: Schedule,
}

impl OptimConfig {
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            weight_decay: 5e-4,
            momentum: 0.9,
            schedule: Schedule::Cosine,
        }
    }

    pub fn adamw() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.05,
            momentum: 0.9,
            schedule: Schedule::Cosine,
        }
    }

    pub fn for_family(family: Family) -> Self {
        match OptimizerKind::for_family(family) {
            OptimizerKind::Sgd => Self::sgd(),
            OptimizerKind::AdamW => Self::adamw(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("optim.lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optim.momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based) of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = (step as f64 / total.max(1) as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// SGD with momentum: `v ← μ·v + (g + λ·p)`, `p ← p − η·v`.
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor() - (&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

pub enum Optimizer {
    Sgd(Sgd),
    AdamW(AdamW),
}

impl Optimizer {
    pub fn new(config: &OptimConfig, vars: Vec<Var>) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(
                vars,
                config.lr,
                config.momentum,
                config.weight_decay,
            )),
            OptimizerKind::AdamW => Optimizer::AdamW(AdamW::new(
                vars,
                ParamsAdamW {
                    lr: config.lr,
                    weight_decay: config.weight_decay,
                    ..Default::default()
                },
            )?),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(s) => s.lr = lr,
            Optimizer::AdamW(a) => a.set_learning_rate(lr),
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => s.step(grads),
            Optimizer::AdamW(a) => Ok(a.step(grads)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn sgd_momentum_matches_hand_updates() {
        // loss = 0.5·p², gradient p
        let p = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = Sgd::new(vec![p.clone()], 0.1, 0.9, 0.0);
        let mut want = 1.0f64;
        let mut v = 0.0f64;
        for i in 0..3 {
            let loss = (p.as_tensor().sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
            v = if i == 0 { want } else { 0.9 * v + want };
            want -= 0.1 * v;
            let got = p.as_tensor().to_vec1::<f64>().unwrap()[0];
            assert!((got - want).abs() < 1e-15, "step {i}: {got} vs {want}");
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = OptimConfig::sgd();
        assert_eq!(c.lr_at(0, 10), 0.05);
        assert!(c.lr_at(10, 10).abs() < 1e-15);
        assert!((c.lr_at(5, 10) - 0.025).abs() < 1e-15);
        let k = OptimConfig { schedule: Schedule::Constant, ..c };
        assert_eq!(k.lr_at(7, 10), 0.05);
    }

    #[test]
    fn adamw_decreases_quadratic() {
        let p = Var::new(&[2.0f32, -1.0], &Device::Cpu).unwrap();
        let mut opt = Optimizer::new(&OptimConfig::adamw(), vec![p.clone()]).unwrap();
        let loss0 = p.as_tensor().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        for _ in 0..20 {
            let loss = p.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let loss1 = p.as_tensor().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(loss1 < loss0);
        assert_eq!(p.dtype(), DType::F32);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig { lr: 0.0, ..OptimConfig::sgd() }.validate().is_err());
        assert!(OptimConfig { momentum: 1.0, ..OptimConfig::sgd() }.validate().is_err());
    }
}
