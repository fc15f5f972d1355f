//! SGD with momentum and L2 weight decay, and the one-cycle learning-rate
//! schedule.

use super::{NetError, ParameterSet};

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.5,
            weight_decay: 5e-4,
        }
    }
}

/// Per-parameter velocity buffers.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: ParameterSet,
}

impl SgdState {
    pub fn new(params: &ParameterSet) -> Self {
        SgdState {
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &ParameterSet {
        &self.velocity
    }
}

/// One update: `v <- momentum*v + (grad + weight_decay*param)`;
/// `param <- param - lr*v`.
pub fn sgd_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    lr: f64,
    cfg: &SgdConfig,
    state: &mut SgdState,
) -> Result<(), NetError> {
    if !params.same_layout(grads) || !params.same_layout(&state.velocity) {
        return Err(NetError::ShapeMismatch {
            expected: "aligned parameter/gradient/velocity layouts".to_string(),
            got: "mismatched layouts".to_string(),
        });
    }
    let lr = lr as f32;
    for (((_, p), (_, g)), (_, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.velocity.iter_mut())
    {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = cfg.momentum * *vv + (gv + cfg.weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

pub const ONE_CYCLE_DIV: f64 = 25.0;
pub const ONE_CYCLE_WARMUP_FRACTION: f64 = 0.3;
pub const ONE_CYCLE_FINAL_DIV: f64 = 1e4;

/// One-cycle schedule: linear warm-up from `max_lr/25` to `max_lr` over the
/// first 30% of steps, then cosine annealing down to `max_lr/(25*1e4)`.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64, NetError> {
    if step >= total_steps {
        return Err(NetError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let peak = (ONE_CYCLE_WARMUP_FRACTION * total_steps as f64).floor() as usize;
    let start = max_lr / ONE_CYCLE_DIV;
    let floor_lr = max_lr / (ONE_CYCLE_DIV * ONE_CYCLE_FINAL_DIV);
    if step < peak {
        Ok(start + (max_lr - start) * step as f64 / peak as f64)
    } else if step == peak || total_steps - 1 == peak {
        Ok(max_lr)
    } else {
        let progress = (step - peak) as f64 / (total_steps - 1 - peak) as f64;
        Ok(floor_lr + (max_lr - floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_params(v: f32) -> ParameterSet {
        ParameterSet::from_entries(vec![("p".to_string(), Tensor::from_vec(&[1], vec![v]))])
    }

    #[test]
    fn zero_lr_updates_velocity_but_not_params() {
        let mut p = scalar_params(1.0);
        let g = scalar_params(2.0);
        let mut st = SgdState::new(&p);
        sgd_step(&mut p, &g, 0.0, &SgdConfig { momentum: 0.5, weight_decay: 0.0 }, &mut st).unwrap();
        assert_eq!(p.get("p").data()[0], 1.0);
        assert_eq!(st.velocity().get("p").data()[0], 2.0);
    }

    #[test]
    fn zero_grad_zero_wd_zero_velocity_is_identity() {
        let mut p = scalar_params(1.5);
        let g = scalar_params(0.0);
        let mut st = SgdState::new(&p);
        sgd_step(&mut p, &g, 0.1, &SgdConfig { momentum: 0.5, weight_decay: 0.0 }, &mut st).unwrap();
        assert_eq!(p.get("p").data()[0], 1.5);
    }

    #[test]
    fn two_hand_iterated_steps() {
        // param=1, grad=1 each step, v0=0, lr=0.1, momentum=0.5, wd=0:
        // v1=1, p=0.9; v2=1.5, p=0.75.
        let mut p = scalar_params(1.0);
        let g = scalar_params(1.0);
        let cfg = SgdConfig { momentum: 0.5, weight_decay: 0.0 };
        let mut st = SgdState::new(&p);
        sgd_step(&mut p, &g, 0.1, &cfg, &mut st).unwrap();
        assert!((p.get("p").data()[0] - 0.9).abs() < 1e-7);
        sgd_step(&mut p, &g, 0.1, &cfg, &mut st).unwrap();
        assert!((p.get("p").data()[0] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = scalar_params(10.0);
        let g = scalar_params(0.0);
        let mut st = SgdState::new(&p);
        sgd_step(&mut p, &g, 0.1, &SgdConfig { momentum: 0.0, weight_decay: 0.1 }, &mut st).unwrap();
        assert!((p.get("p").data()[0] - 9.9).abs() < 1e-6);
    }

    #[test]
    fn one_cycle_endpoints_and_peak() {
        let max_lr = 0.1;
        assert_eq!(one_cycle_lr(0, 100, max_lr).unwrap(), max_lr / 25.0);
        assert_eq!(one_cycle_lr(30, 100, max_lr).unwrap(), max_lr);
        let last = one_cycle_lr(99, 100, max_lr).unwrap();
        assert!((last - max_lr / 25.0e4).abs() < 1e-12);
        assert!(one_cycle_lr(100, 100, max_lr).is_err());
    }

    #[test]
    fn one_cycle_monotone_up_then_down() {
        let total = 100;
        let peak = 30;
        let mut prev = f64::NEG_INFINITY;
        for s in 0..=peak {
            let lr = one_cycle_lr(s, total, 0.1).unwrap();
            assert!(lr > prev, "warm-up not increasing at {s}");
            prev = lr;
        }
        for s in peak + 1..total {
            let lr = one_cycle_lr(s, total, 0.1).unwrap();
            assert!(lr < prev, "anneal not decreasing at {s}");
            prev = lr;
        }
    }

    #[test]
    fn one_cycle_single_step_run() {
        assert_eq!(one_cycle_lr(0, 1, 0.1).unwrap(), 0.1);
    }
}
