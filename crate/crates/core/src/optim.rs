//! Baseline optimizers (heavy-ball SGD, Adam, Lookahead) and per-step
//! learning-rate schedules.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::param::{DType, ParameterSet};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LA_ALPHA: f64 = 0.8;
pub const DEFAULT_LA_K: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerConfig {
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Lookahead {
        inner: Box<OptimizerConfig>,
        alpha: f64,
        k: usize,
    },
}

impl OptimizerConfig {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerConfig::Sgd { momentum }
    }

    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_ADAM_EPS,
        }
    }

    pub fn lookahead(inner: OptimizerConfig, alpha: f64, k: usize) -> Self {
        OptimizerConfig::Lookahead {
            inner: Box::new(inner),
            alpha,
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64, closed_top: bool| {
            let ok = v >= 0.0 && if closed_top { v <= 1.0 } else { v < 1.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} out of range: {v}")))
            }
        };
        match self {
            OptimizerConfig::Sgd { momentum } => unit("momentum", *momentum, false),
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                unit("beta1", *beta1, false)?;
                unit("beta2", *beta2, false)?;
                if eps.is_nan() || *eps <= 0.0 {
                    return Err(Error::Config(format!("adam eps must be positive, got {eps}")));
                }
                Ok(())
            }
            OptimizerConfig::Lookahead { inner, alpha, k } => {
                if matches!(**inner, OptimizerConfig::Lookahead { .. }) {
                    return Err(Error::Config("lookahead cannot wrap lookahead".into()));
                }
                if *k == 0 {
                    return Err(Error::Config("lookahead k must be at least 1".into()));
                }
                unit("lookahead alpha", *alpha, true)?;
                inner.validate()
            }
        }
    }

    pub fn build(&self) -> Result<Optimizer> {
        Optimizer::new(self.clone())
    }
}

#[derive(Clone, Debug)]
enum State {
    Sgd {
        velocity: Vec<Vec<f64>>,
    },
    Adam {
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
    Lookahead {
        inner: Box<Optimizer>,
        slow: Option<ParameterSet>,
        counter: usize,
    },
}

/// Optimizer together with its per-parameter buffers.
///
/// Buffers are allocated lazily on the first step and must keep matching
/// the parameter layout afterwards.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    state: State,
}

fn zeros_for(params: &ParameterSet) -> Vec<Vec<f64>> {
    params.iter().map(|(_, t)| vec![0.0; t.len()]).collect()
}

fn check_buffers(params: &ParameterSet, bufs: &[Vec<f64>]) -> Result<()> {
    if bufs.len() != params.len() {
        return Err(Error::mismatch(
            params.names().next().unwrap_or("<empty>"),
            format!("optimizer holds {} buffers for {} entries", bufs.len(), params.len()),
        ));
    }
    for ((name, t), b) in params.iter().zip(bufs) {
        if t.len() != b.len() {
            return Err(Error::mismatch(name, "optimizer buffer size differs"));
        }
    }
    Ok(())
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        let state = match &config {
            OptimizerConfig::Sgd { .. } => State::Sgd { velocity: Vec::new() },
            OptimizerConfig::Adam { .. } => State::Adam {
                m: Vec::new(),
                v: Vec::new(),
            },
            OptimizerConfig::Lookahead { inner, .. } => State::Lookahead {
                inner: Box::new(Optimizer::new((**inner).clone())?),
                slow: None,
                counter: 0,
            },
        };
        Ok(Optimizer { config, step: 0, state })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Lookahead inner-step counter; always in `[0, k)` between calls.
    pub fn lookahead_counter(&self) -> Option<usize> {
        match &self.state {
            State::Lookahead { counter, .. } => Some(*counter),
            _ => None,
        }
    }

    /// Value-semantics wrapper around [`Optimizer::step`].
    pub fn apply(&mut self, params: &ParameterSet, grads: &ParameterSet, lr: f64) -> Result<ParameterSet> {
        let mut out = params.clone();
        self.step(&mut out, grads, lr)?;
        Ok(out)
    }

    /// One optimizer update of `params` in place.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        params.check_structure(grads)?;
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGrad { entry: name.to_owned() });
        }
        let t = self.step + 1;
        match (&self.config, &mut self.state) {
            (OptimizerConfig::Sgd { momentum }, State::Sgd { velocity }) => {
                if velocity.is_empty() && !params.is_empty() {
                    *velocity = zeros_for(params);
                }
                check_buffers(params, velocity)?;
                for (i, (_, theta)) in params.iter_mut().enumerate() {
                    let g = grads.tensor(i);
                    let v = &mut velocity[i];
                    theta.update(|j, x| {
                        v[j] = momentum * v[j] + g.get(j);
                        x - lr * v[j]
                    });
                }
            }
            (OptimizerConfig::Adam { beta1, beta2, eps }, State::Adam { m, v }) => {
                if m.is_empty() && !params.is_empty() {
                    *m = zeros_for(params);
                    *v = zeros_for(params);
                }
                check_buffers(params, m)?;
                check_buffers(params, v)?;
                let bc1 = 1.0 - beta1.powf(t as f64);
                let bc2 = 1.0 - beta2.powf(t as f64);
                for (i, (_, theta)) in params.iter_mut().enumerate() {
                    let g = grads.tensor(i);
                    let (m, v) = (&mut m[i], &mut v[i]);
                    theta.update(|j, x| {
                        let gj = g.get(j);
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        x - lr * m_hat / (v_hat.sqrt() + eps)
                    });
                }
            }
            (OptimizerConfig::Lookahead { alpha, k, .. }, State::Lookahead { inner, slow, counter }) => {
                let slow = slow.get_or_insert_with(|| params.cast(DType::F64));
                inner.step(params, grads, lr)?;
                *counter += 1;
                if *counter == *k {
                    for ((_, phi), (_, theta)) in slow.iter_mut().zip(params.iter_mut()) {
                        let phi_vals = phi.as_f64_mut().expect("slow weights are f64");
                        for (j, p) in phi_vals.iter_mut().enumerate() {
                            *p += alpha * (theta.get(j) - *p);
                        }
                        theta.assign(phi_vals);
                    }
                    *counter = 0;
                }
            }
            _ => unreachable!("optimizer state always matches its config"),
        }
        self.step = t;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `base * (1 + cos(pi * t / total)) / 2`
    Cosine {
        base: f64,
        total: u64,
    },
    /// Linear warmup to `peak` over `warmup` steps, then polynomial decay
    /// to `end` at `total`.
    PolyWarmup {
        peak: f64,
        total: u64,
        warmup: u64,
        end: f64,
        power: f64,
    },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        match *self {
            LrSchedule::Constant { lr } => nonneg("lr", lr),
            LrSchedule::Cosine { base, total } => {
                nonneg("lr", base)?;
                if total == 0 {
                    return Err(Error::Config("cosine schedule needs total steps >= 1".into()));
                }
                Ok(())
            }
            LrSchedule::PolyWarmup {
                peak,
                total,
                warmup,
                end,
                power,
            } => {
                nonneg("peak lr", peak)?;
                nonneg("end lr", end)?;
                if power <= 0.0 || !power.is_finite() {
                    return Err(Error::Config(format!("power must be positive, got {power}")));
                }
                if warmup > total {
                    return Err(Error::Config(format!(
                        "warmup steps {warmup} exceed total steps {total}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn total_steps(&self) -> Option<u64> {
        match *self {
            LrSchedule::Constant { .. } => None,
            LrSchedule::Cosine { total, .. } | LrSchedule::PolyWarmup { total, .. } => Some(total),
        }
    }

    /// Rate at optimizer step `t`; steps beyond the horizon clamp to it.
    pub fn lr_at(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { base, total } => {
                let t = t.min(total) as f64;
                // clamp away the tiny negative cos(pi) rounding
                (base * 0.5 * (1.0 + (PI * t / total as f64).cos())).max(0.0)
            }
            LrSchedule::PolyWarmup {
                peak,
                total,
                warmup,
                end,
                power,
            } => {
                let t = t.min(total);
                if t < warmup {
                    peak * t as f64 / warmup as f64
                } else if total == warmup {
                    peak
                } else {
                    let frac = (t - warmup) as f64 / (total - warmup) as f64;
                    end + (peak - end) * (1.0 - frac).powf(power)
                }
            }
        }
    }
}
