//! AdamW with decoupled weight decay.
//!
//! One step on parameter `p` with gradient `g` at step `t`:
//!
//! ```text
//! p ← p·(1 − lr·wd)
//! m ← β1·m + (1 − β1)·g        v ← β2·v + (1 − β2)·g²
//! p ← p − lr · (m / (1 − β1^t)) / (sqrt(v / (1 − β2^t)) + ε)
//! ```
//!
//! Column-sparse updates touch only the listed columns, leaving both the
//! parameters and the moments of every other column bit-identical.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    slots: Vec<Moments>,
}

impl AdamW {
    /// One moment slot per parameter, sized by `lens`.
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64, lens: &[usize]) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: ADAM_EPS,
            weight_decay,
            step: 0,
            slots: lens
                .iter()
                .map(|&n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub(crate) fn from_parts(
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        step: u64,
        slots: Vec<Moments>,
    ) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &[Moments] {
        &self.slots
    }

    /// Advances the shared step counter used for bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    fn corrections(&self) -> Result<(f64, f64)> {
        if self.step == 0 {
            return Err(Error::State("optimizer update before begin_step".into()));
        }
        let t = self.step as i32;
        Ok((1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t)))
    }

    fn slot(&mut self, slot: usize, len: usize) -> Result<&mut Moments> {
        let n = self.slots.len();
        let s = self.slots.get_mut(slot).ok_or(Error::OutOfRange {
            what: "optimizer slots",
            index: slot,
            len: n,
        })?;
        if s.m.len() != len {
            return Err(Error::Shape {
                op: "adamw",
                lhs: vec![s.m.len()],
                rhs: vec![len],
            });
        }
        Ok(s)
    }

    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn apply(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, b: (f64, f64), c: (f64, f64), wd: f64, eps: f64) {
        *p *= 1.0 - lr * wd;
        *m = b.0 * *m + (1.0 - b.0) * g;
        *v = b.1 * *v + (1.0 - b.1) * g * g;
        let mhat = *m / c.0;
        let vhat = *v / c.1;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }

    /// Dense update of every element of `param`.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        check_finite(grad, slot)?;
        if param.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let c = self.corrections()?;
        let (b, wd, eps) = ((self.beta1, self.beta2), self.weight_decay, self.eps);
        let s = self.slot(slot, param.len())?;
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(s.m.iter_mut())
            .zip(s.v.iter_mut())
        {
            Self::apply(p, g, m, v, lr, b, c, wd, eps);
        }
        Ok(())
    }

    /// Updates only `cols` of a `d×C` parameter.
    pub fn update_columns(
        &mut self,
        slot: usize,
        param: &mut Tensor,
        grad: &Tensor,
        cols: &[usize],
        lr: f64,
    ) -> Result<()> {
        check_finite(grad, slot)?;
        if param.shape() != grad.shape() || param.shape().len() != 2 {
            return Err(Error::Shape {
                op: "adamw columns",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let (d, c_total) = param.dims2();
        let c = self.corrections()?;
        let (b, wd, eps) = ((self.beta1, self.beta2), self.weight_decay, self.eps);
        let s = self.slot(slot, param.len())?;
        let data = param.data_mut();
        for &j in cols {
            if j >= c_total {
                return Err(Error::OutOfRange {
                    what: "columns",
                    index: j,
                    len: c_total,
                });
            }
            for r in 0..d {
                let k = r * c_total + j;
                Self::apply(
                    &mut data[k],
                    grad.data()[k],
                    &mut s.m[k],
                    &mut s.v[k],
                    lr,
                    b,
                    c,
                    wd,
                    eps,
                );
            }
        }
        Ok(())
    }
}

pub fn check_finite(grad: &Tensor, slot: usize) -> Result<()> {
    if let Some(i) = grad.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!(
            "gradient of parameter {slot} at element {i} ({})",
            grad.data()[i]
        )));
    }
    Ok(())
}

/// Dense step over a list of parameters (slot `i` ↔ `params[i]`).
pub fn optimizer_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamW, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            op: "optimizer_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (i, g) in grads.iter().enumerate() {
        check_finite(g, i)?;
    }
    state.begin_step();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(i, p, g, lr)?;
    }
    Ok(())
}
