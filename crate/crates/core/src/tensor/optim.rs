//! Adam with a step-decay learning-rate schedule.

use super::Tensor;
use crate::error::{Error, Result};

/// Base learning rate multiplied by each milestone factor whose epoch has been
/// reached.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    /// 1e-3, decayed by 0.1 at epochs 180 and 190.
    fn default() -> Self {
        LrSchedule {
            base_lr: 1e-3,
            milestones: vec![(180, 0.1), (190, 0.1)],
        }
    }
}

impl LrSchedule {
    /// The default decay structure scaled to `total_epochs`: drops at 90% and
    /// 95% of the run (180/190 of 200, 18/19 of 20).
    pub fn for_total_epochs(base_lr: f64, total_epochs: usize) -> Self {
        LrSchedule {
            base_lr,
            milestones: vec![(total_epochs * 9 / 10, 0.1), (total_epochs * 19 / 20, 0.1)],
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        // Sequential multiplication keeps 1e-3 * 0.1 * 0.1 == 1e-5 exactly.
        self.milestones
            .iter()
            .filter(|(at, _)| epoch >= *at)
            .fold(self.base_lr, |lr, (_, m)| lr * m)
    }
}

/// Adam optimizer state for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: LrSchedule,
    step_count: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, schedule: LrSchedule) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule,
            step_count: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.schedule.lr(epoch)
    }

    /// One bias-corrected update of every parameter at the learning rate
    /// scheduled for `epoch`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        epoch: usize,
    ) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} moments, {} params, {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), m.shape()),
                ));
            }
            g.ensure_finite("adam_step")?;
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.schedule.lr(epoch);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
