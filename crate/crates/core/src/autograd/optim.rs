//! SGD with momentum, Nesterov lookahead and L2 weight decay.
//!
//! Update rule, per parameter `w` with gradient `g`:
//!
//! ```text
//! d = g + wd·w
//! v ← μ·v + d
//! w ← w − lr·v            (classic)
//! w ← w − lr·(d + μ·v)    (nesterov)
//! ```

use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.nesterov && self.momentum == 0.0 {
            return Err(Error::InvalidArgument(
                "nesterov requires a positive momentum".into(),
            ));
        }
        Ok(())
    }
}

/// Velocity buffers paired by position with a fixed parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F: Float = f32> {
    pub config: SgdConfig,
    velocities: Vec<Vec<F>>,
}

impl<F: Float> OptimizerState<F> {
    pub fn new(params: &[Tensor<F>], config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            velocities: params.iter().map(|p| vec![F::ZERO; p.numel()]).collect(),
        })
    }

    pub fn velocities(&self) -> &[Vec<F>] {
        &self.velocities
    }

    pub fn velocities_mut(&mut self) -> &mut [Vec<F>] {
        &mut self.velocities
    }

    /// Applies one update to every parameter holding a gradient. Parameters
    /// without a gradient are left untouched, velocity included.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &[Tensor<F>], lr: f64) -> Result<()> {
        if params.len() != self.velocities.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} buffers but got {} parameters",
                self.velocities.len(),
                params.len()
            )));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        let grads: Vec<Option<Vec<F>>> = params.iter().map(Tensor::grad).collect();
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.numel() != self.velocities[i].len() {
                return Err(Error::shape("sgd_step", p.shape(), &[self.velocities[i].len()]));
            }
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of parameter {i}")));
                }
            }
        }

        let lr = F::from_f64(lr);
        let mu = F::from_f64(self.config.momentum);
        let wd = F::from_f64(self.config.weight_decay);
        let nesterov = self.config.nesterov;
        for ((p, g), v) in params.iter().zip(grads).zip(self.velocities.iter_mut()) {
            let Some(g) = g else { continue };
            p.update_data(|w| {
                for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                    let d = g + wd * *w;
                    *v = mu * *v + d;
                    let delta = if nesterov { d + mu * *v } else { *v };
                    *w -= lr * delta;
                }
            })?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.config.momentum.to_le_bytes());
        out.extend_from_slice(&self.config.weight_decay.to_le_bytes());
        out.push(self.config.nesterov as u8);
        out.extend_from_slice(&(self.velocities.len() as u64).to_le_bytes());
        for v in &self.velocities {
            out.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for x in v {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let momentum = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let weight_decay = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let nesterov = r.take(1)?[0] != 0;
        let count = r.u64()? as usize;
        let mut velocities = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(F::BYTES).ok_or_else(truncated)?)?;
            velocities.push(raw.chunks(F::BYTES).map(F::read_le).collect());
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        Ok(OptimizerState {
            config: SgdConfig {
                momentum,
                weight_decay,
                nesterov,
            },
            velocities,
        })
    }
}

fn truncated() -> Error {
    Error::Checkpoint("truncated optimizer state".into())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let w = Tensor::parameter(&[], vec![v]).unwrap();
        // produce grad g via d(g·w)/dw
        w.scale(g).backward().unwrap();
        w
    }

    fn sgd(momentum: f64, weight_decay: f64, nesterov: bool) -> SgdConfig {
        SgdConfig {
            momentum,
            weight_decay,
            nesterov,
        }
    }

    #[test]
    fn plain_step() {
        let w = param(1.0, 0.5);
        let mut st = OptimizerState::new(std::slice::from_ref(&w), sgd(0.0, 0.0, false)).unwrap();
        st.step(std::slice::from_ref(&w), 0.1).unwrap();
        assert!((w.item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_with_previous_velocity() {
        let w = param(1.0, 0.0);
        let mut st = OptimizerState::new(std::slice::from_ref(&w), sgd(0.9, 0.0, false)).unwrap();
        st.velocities_mut()[0][0] = 1.0;
        st.step(std::slice::from_ref(&w), 0.1).unwrap();
        assert!((st.velocities()[0][0] - 0.9).abs() < 1e-15);
        assert!((w.item() - 0.91).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        // constant g = 0.5, lr = 0.1, mu = 0.9, wd = 0.01
        let (g, lr, mu, wd) = (0.5, 0.1, 0.9, 0.01);
        let w = Tensor::<f64>::parameter(&[], vec![1.0]).unwrap();
        let mut st = OptimizerState::new(std::slice::from_ref(&w), sgd(mu, wd, false)).unwrap();
        for _ in 0..2 {
            w.zero_grad();
            w.scale(g).backward().unwrap();
            st.step(std::slice::from_ref(&w), lr).unwrap();
        }
        // step 1: d = 0.5 + 0.01 = 0.51; v = 0.51; w = 1 - 0.051 = 0.949
        // step 2: d = 0.5 + 0.00949 = 0.50949; v = 0.459 + 0.50949 = 0.96849;
        //         w = 0.949 - 0.096849 = 0.852151
        assert!((st.velocities()[0][0] - 0.96849).abs() < 1e-12);
        assert!((w.item() - 0.852151).abs() < 1e-12);
    }

    #[test]
    fn nesterov_lookahead() {
        let w = param(1.0, 0.5);
        let mut st = OptimizerState::new(std::slice::from_ref(&w), sgd(0.9, 0.0, true)).unwrap();
        st.step(std::slice::from_ref(&w), 0.1).unwrap();
        // v = 0.5; delta = 0.5 + 0.45 = 0.95
        assert!((w.item() - 0.905).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_identity() {
        let w = param(0.3, 2.0);
        let mut st = OptimizerState::new(std::slice::from_ref(&w), sgd(0.9, 1e-3, false)).unwrap();
        st.step(std::slice::from_ref(&w), 0.0).unwrap();
        assert_eq!(w.item(), 0.3);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let a = param(1.0, 1.0);
        let b = param(2.0, f64::NAN);
        let params = [a.clone(), b];
        let mut st = OptimizerState::new(&params, sgd(0.9, 0.0, false)).unwrap();
        assert!(matches!(st.step(&params, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(a.item(), 1.0);
        assert_eq!(st.velocities()[0][0], 0.0);
    }

    #[test]
    fn bytes_round_trip() {
        let w = param(1.0, 0.5);
        let mut st = OptimizerState::new(std::slice::from_ref(&w), sgd(0.9, 1e-4, true)).unwrap();
        st.step(std::slice::from_ref(&w), 0.1).unwrap();
        let back = OptimizerState::<f64>::from_bytes(&st.to_bytes()).unwrap();
        assert_eq!(back, st);
        assert!(OptimizerState::<f64>::from_bytes(&st.to_bytes()[..10]).is_err());
    }
}
