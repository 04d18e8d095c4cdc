//! SGD and Adam over flat parameter vectors, optionally with a separate
//! learning rate per layer group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::param::{Group, ParamVector, PerGroup};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::Adam => "ADAM",
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    kind: OptimizerKind,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    /// `n_params` sizes the Adam moment buffers and is ignored for SGD.
    pub fn new(kind: OptimizerKind, lr: T, n_params: usize) -> Self {
        let n = if kind == OptimizerKind::Adam { n_params } else { 0 };
        OptimizerState {
            kind,
            lr,
            beta1: T::lit(ADAM_BETA1),
            beta2: T::lit(ADAM_BETA2),
            eps: T::lit(ADAM_EPS),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn sgd(lr: T) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0)
    }

    pub fn adam(lr: T, n_params: usize) -> Self {
        Self::new(OptimizerKind::Adam, lr, n_params)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> T {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }

    /// One update with the optimizer's own learning rate.
    pub fn step(&mut self, params: &mut ParamVector<T>, grad: &ParamVector<T>) -> Result<()> {
        let lr = self.lr;
        self.step_grouped(params, grad, PerGroup::uniform(lr))
    }

    /// One update with an explicit learning rate per group. A group whose rate
    /// is exactly zero keeps its parameters bit-for-bit.
    pub fn step_grouped(&mut self, params: &mut ParamVector<T>, grad: &ParamVector<T>, lr: PerGroup<T>) -> Result<()> {
        params.check_compatible(grad)?;
        match self.kind {
            OptimizerKind::Sgd => {
                for group in Group::ALL {
                    let rate = lr.get(group);
                    if rate == T::zero() {
                        continue;
                    }
                    let g = grad.group_view(group);
                    for (p, gi) in params.group_view_mut(group).iter_mut().zip(g) {
                        *p -= rate * *gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::LengthMismatch { expected: self.m.len(), got: params.len() });
                }
                self.step += 1;
                let t = self.step as i32;
                let bc1 = T::one() - self.beta1.powi(t);
                let bc2 = T::one() - self.beta2.powi(t);
                for group in Group::ALL {
                    let rate = lr.get(group);
                    let span = params.span(group);
                    let g = grad.group_view(group);
                    let m = &mut self.m[span.range()];
                    let v = &mut self.v[span.range()];
                    let p = params.group_view_mut(group);
                    for i in 0..span.len {
                        m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                        if rate != T::zero() {
                            let m_hat = m[i] / bc1;
                            let v_hat = v[i] / bc2;
                            p[i] -= rate * m_hat / (v_hat.sqrt() + self.eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn expect_kind<T>(opt: &OptimizerState<T>, kind: OptimizerKind) -> Result<()> {
    if opt.kind != kind {
        return Err(Error::WrongOptimizer { expected: kind.name(), actual: opt.kind.name() });
    }
    Ok(())
}

/// `params - lr * grad`, elementwise.
pub fn sgd_step<T: Real>(opt: &OptimizerState<T>, params: &ParamVector<T>, grad: &ParamVector<T>) -> Result<ParamVector<T>> {
    expect_kind(opt, OptimizerKind::Sgd)?;
    let mut out = params.clone();
    opt.clone().step(&mut out, grad)?;
    Ok(out)
}

/// Bias-corrected Adam update; advances the moments and step counter of `opt`.
pub fn adam_step<T: Real>(
    opt: &mut OptimizerState<T>,
    params: &ParamVector<T>,
    grad: &ParamVector<T>,
) -> Result<ParamVector<T>> {
    expect_kind(opt, OptimizerKind::Adam)?;
    let mut out = params.clone();
    opt.step(&mut out, grad)?;
    Ok(out)
}
