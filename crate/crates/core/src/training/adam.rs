use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Matrix,
    pub v: Matrix,
}

impl AdamSlot {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of completed updates.
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

/// One bias-corrected Adam update of a single parameter at step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    slot: &mut AdamSlot,
    param: &mut Matrix,
    grad: &Matrix,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || slot.m.shape() != grad.shape() {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient passed to adam_step".into(),
        });
    }
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let m = slot.m.data_mut();
    let v = slot.v.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            slots: params
                .into_iter()
                .map(|p| AdamSlot::new(p.rows(), p.cols()))
                .collect(),
        }
    }

    /// Updates every parameter. Nothing is modified unless all gradients are
    /// finite and correctly shaped.
    pub fn update(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam update", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of parameter #{i}"),
                });
            }
        }
        self.step += 1;
        let t = self.step;
        for ((slot, p), g) in self.slots.iter_mut().zip(params).zip(grads) {
            adam_step(slot, p, g, t, lr, self.beta1, self.beta2, self.epsilon)?;
        }
        Ok(())
    }
}
