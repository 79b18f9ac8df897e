//! First-order optimizers, learning-rate schedules and divergence detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradientSet, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Nesterov,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Sgd,
        OptimizerKind::Momentum,
        OptimizerKind::Nesterov,
        OptimizerKind::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Nesterov => "nesterov",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown optimizer '{s}'")))
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !unit.contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !unit.contains(&self.beta1) || !unit.contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    StepMultiply,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    #[serde(default = "one")]
    pub factor: f64,
    #[serde(default = "one_epoch")]
    pub period: u32,
}

fn one() -> f64 {
    1.0
}
fn one_epoch() -> u32 {
    1
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::constant()
    }
}

impl Schedule {
    pub fn constant() -> Self {
        Self {
            kind: ScheduleKind::Constant,
            factor: 1.0,
            period: 1,
        }
    }

    pub fn step_multiply(factor: f64, period: u32) -> Self {
        Self {
            kind: ScheduleKind::StepMultiply,
            factor,
            period,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::Config(format!(
                "schedule factor must be in (0, 1], got {}",
                self.factor
            )));
        }
        if self.period == 0 {
            return Err(Error::Config("schedule period must be at least one epoch".into()));
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (zero-based).
pub fn schedule_lr(base: f64, epoch: u32, schedule: &Schedule) -> f64 {
    match schedule.kind {
        ScheduleKind::Constant => base,
        ScheduleKind::StepMultiply => {
            base * schedule.factor.powi((epoch / schedule.period.max(1)) as i32)
        }
    }
}

/// Auxiliary per-parameter buffers. `first` holds the velocity for the
/// momentum methods and the first moment for Adam; `second` is only used by
/// Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let zeros = |on: bool| -> Vec<Vec<f64>> {
            if on {
                sizes.iter().map(|&n| vec![0.0; n]).collect()
            } else {
                Vec::new()
            }
        };
        Self {
            step: 0,
            first: zeros(kind != OptimizerKind::Sgd),
            second: zeros(kind == OptimizerKind::Adam),
        }
    }

    pub fn for_network(kind: OptimizerKind, net: &Network) -> Self {
        let sizes: Vec<usize> = net.params().iter().map(|t| t.len()).collect();
        Self::new(kind, &sizes)
    }

    /// Flattens the state into value blocks: `[step]`, then every `first`
    /// buffer, then every `second` buffer.
    pub fn to_blocks(&self) -> Vec<Vec<f64>> {
        let mut blocks = vec![vec![f64::from_bits(self.step)]];
        blocks.extend(self.first.iter().cloned());
        blocks.extend(self.second.iter().cloned());
        blocks
    }

    pub fn from_blocks(kind: OptimizerKind, sizes: &[usize], blocks: &[Vec<f64>]) -> Result<Self> {
        let mut state = Self::new(kind, sizes);
        let expected = 1 + state.first.len() + state.second.len();
        if blocks.len() != expected || blocks[0].len() != 1 {
            return Err(Error::Config(format!(
                "optimizer state has {} blocks, expected {expected}",
                blocks.len()
            )));
        }
        state.step = blocks[0][0].to_bits();
        let buffers = state.first.iter_mut().chain(state.second.iter_mut());
        for (dst, src) in buffers.zip(&blocks[1..]) {
            if dst.len() != src.len() {
                return Err(Error::shape("optimizer state buffer", &[dst.len()], &[src.len()]));
            }
            dst.copy_from_slice(src);
        }
        Ok(state)
    }

    /// Applies one update in place with learning rate `lr`.
    pub fn apply(
        &mut self,
        cfg: &OptimizerConfig,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer gradients", &[params.len()], &[grads.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape(format!("gradient {i}"), &[p.len()], &[g.len()]));
            }
            if self.first.len() > i && self.first[i].len() != p.len() {
                return Err(Error::shape(format!("optimizer buffer {i}"), &[p.len()], &[self.first[i].len()]));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                step: self.step,
                reason: "non-finite gradient".into(),
            });
        }
        let expected_buffers = match cfg.kind {
            OptimizerKind::Sgd => 0,
            _ => params.len(),
        };
        if self.first.len() != expected_buffers {
            return Err(Error::Config(format!(
                "optimizer state was created for a different optimizer ({} buffers, expected {expected_buffers})",
                self.first.len()
            )));
        }
        self.step += 1;
        let mu = cfg.momentum;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.iter_mut().zip(*g) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Momentum => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, d), vel) in p.iter_mut().zip(*g).zip(v.iter_mut()) {
                        *vel = mu * *vel - lr * d;
                        *w += *vel;
                    }
                }
            }
            OptimizerKind::Nesterov => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, d), vel) in p.iter_mut().zip(*g).zip(v.iter_mut()) {
                        *vel = mu * *vel - lr * d;
                        *w += mu * *vel - lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                let buffers = self.first.iter_mut().zip(self.second.iter_mut());
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(buffers) {
                    for (((w, &d), mi), vi) in p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * d;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * d * d;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Updates every network parameter.
    pub fn step_network(
        &mut self,
        cfg: &OptimizerConfig,
        net: &mut Network,
        grads: &GradientSet,
        lr: f64,
    ) -> Result<()> {
        let g: Vec<&[f64]> = grads.grads.iter().map(|t| t.data()).collect();
        let mut params = net.params_mut();
        let mut p: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data_mut()).collect();
        self.apply(cfg, &mut p, &g, lr)
    }
}

/// Loss ratio above which a run counts as diverged.
pub const DIVERGENCE_RATIO: f64 = 1e3;

/// Flags a run once its loss is non-finite or exceeds `DIVERGENCE_RATIO`
/// times the first observed loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMonitor {
    initial: Option<f64>,
}

impl DivergenceMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn initial(&self) -> Option<f64> {
        self.initial
    }

    pub fn check(&mut self, step: u64, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss became {loss}"),
            });
        }
        match self.initial {
            None => self.initial = Some(loss),
            Some(l0) if loss > DIVERGENCE_RATIO * l0.max(f64::MIN_POSITIVE) => {
                return Err(Error::Divergence {
                    step,
                    reason: format!("loss {loss:.4e} exceeds {DIVERGENCE_RATIO}x the initial {l0:.4e}"),
                })
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn run_scalar(cfg: &OptimizerConfig, theta0: f64, grads: &[f64]) -> (f64, OptimizerState) {
        let mut state = OptimizerState::new(cfg.kind, &[1]);
        let mut theta = [theta0];
        for &g in grads {
            state
                .apply(cfg, &mut [&mut theta[..]], &[&[g][..]], cfg.learning_rate)
                .unwrap();
        }
        (theta[0], state)
    }

    #[test]
    fn sgd_single_step() {
        let (t, _) = run_scalar(&OptimizerConfig::new(OptimizerKind::Sgd, 0.1), 1.0, &[0.5]);
        assert_relative_eq!(t, 0.95);
    }

    #[test]
    fn momentum_two_steps() {
        let cfg = OptimizerConfig::new(OptimizerKind::Momentum, 0.1).with_momentum(0.9);
        let (t1, s1) = run_scalar(&cfg, 0.0, &[1.0]);
        assert_relative_eq!(s1.first[0][0], -0.1);
        assert_relative_eq!(t1, -0.1);
        let (t2, _) = run_scalar(&cfg, 0.0, &[1.0, 1.0]);
        assert_relative_eq!(t2, -0.29, epsilon = 1e-15);
    }

    #[test]
    fn nesterov_two_steps() {
        let cfg = OptimizerConfig::new(OptimizerKind::Nesterov, 0.1).with_momentum(0.9);
        // v1 = -0.1, step1 = 0.9*-0.1 - 0.1 = -0.19
        // v2 = -0.19, step2 = 0.9*-0.19 - 0.1 = -0.271
        let (t, _) = run_scalar(&cfg, 0.0, &[1.0, 1.0]);
        assert_relative_eq!(t, -0.461, epsilon = 1e-15);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.001);
        let (t, _) = run_scalar(&cfg, 0.0, &[1.0]);
        assert_relative_eq!(t, -0.001, max_relative = 1e-6);
        let (t, _) = run_scalar(&cfg, 0.0, &[-250.0]);
        assert_relative_eq!(t, 0.001, max_relative = 1e-6);
    }

    #[test]
    fn zero_momentum_variants_agree_with_sgd() {
        let grads = [0.3, -1.2, 2.5, 0.0, 0.7];
        let sgd = run_scalar(&OptimizerConfig::new(OptimizerKind::Sgd, 0.05), 2.0, &grads).0;
        for kind in [OptimizerKind::Momentum, OptimizerKind::Nesterov] {
            let cfg = OptimizerConfig::new(kind, 0.05).with_momentum(0.0);
            assert_eq!(run_scalar(&cfg, 2.0, &grads).0, sgd);
        }
    }

    #[test]
    fn every_optimizer_solves_a_quadratic() {
        for kind in OptimizerKind::ALL {
            let lr = if kind == OptimizerKind::Adam { 0.01 } else { 0.05 };
            let cfg = OptimizerConfig::new(kind, lr);
            let mut state = OptimizerState::new(kind, &[1]);
            let mut theta = [3.0];
            for _ in 0..1000 {
                let g = 2.0 * theta[0];
                state.apply(&cfg, &mut [&mut theta[..]], &[&[g][..]], lr).unwrap();
            }
            assert!(theta[0].abs() < 1e-3, "{kind:?} ended at {}", theta[0]);
        }
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.1);
        let mut state = OptimizerState::new(cfg.kind, &[2]);
        let mut p = [0.0, 0.0];
        state.apply(&cfg, &mut [&mut p[..]], &[&[1.0, 1.0][..]], 0.1).unwrap();
        let err = state
            .apply(&cfg, &mut [&mut p[..]], &[&[f64::NAN, 1.0][..]], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
    }

    #[test]
    fn schedule_values() {
        let s = Schedule::step_multiply(0.5, 10);
        assert_relative_eq!(schedule_lr(0.1, 25, &s), 0.025, epsilon = 1e-15);
        assert_eq!(schedule_lr(0.1, 0, &s), 0.1);
        assert_eq!(schedule_lr(0.1, 40, &Schedule::step_multiply(1.0, 3)), 0.1);
        assert_eq!(schedule_lr(0.1, 40, &Schedule::constant()), 0.1);
        assert!(Schedule::step_multiply(0.0, 3).validate().is_err());
        assert!(Schedule::step_multiply(0.5, 0).validate().is_err());
    }

    #[test]
    fn state_round_trips_bit_exactly() {
        let cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.01);
        let mut state = OptimizerState::new(cfg.kind, &[3, 1]);
        let mut a = [0.1, 0.2, 0.3];
        let mut b = [1.0 / 3.0];
        for k in 0..5 {
            let g1 = [0.1 * k as f64, -0.7, 1e-9];
            let g2 = [std::f64::consts::PI];
            state.apply(&cfg, &mut [&mut a[..], &mut b[..]], &[&g1[..], &g2[..]], 0.01).unwrap();
        }
        let back = OptimizerState::from_blocks(cfg.kind, &[3, 1], &state.to_blocks()).unwrap();
        assert_eq!(back, state);
        let json = serde_json::to_string(&state).unwrap();
        let back: OptimizerState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, state);
        assert!(OptimizerState::from_blocks(OptimizerKind::Momentum, &[3, 1], &state.to_blocks()).is_err());
    }

    #[test]
    fn divergence_monitor() {
        let mut m = DivergenceMonitor::new();
        m.check(0, 2.0).unwrap();
        m.check(1, 1999.0).unwrap();
        assert!(matches!(m.check(2, 2001.0), Err(Error::Divergence { step: 2, .. })));
        assert!(m.check(3, f64::INFINITY).is_err());
        assert!(m.check(4, f64::NAN).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::new(OptimizerKind::Sgd, 0.0).validate().is_err());
        assert!(OptimizerConfig::new(OptimizerKind::Momentum, 0.1).with_momentum(1.0).validate().is_err());
        assert!(OptimizerConfig::new(OptimizerKind::Adam, 0.1).validate().is_ok());
        assert_eq!("Nesterov".parse::<OptimizerKind>().unwrap(), OptimizerKind::Nesterov);
    }
}
