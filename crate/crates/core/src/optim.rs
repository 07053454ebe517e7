//! Adam with state kept on the single-precision grid.
//!
//! Parameters and both moment estimates are rounded to the nearest `f32`
//! after every update, so a checkpoint stored as 32-bit floats resumes the
//! exact same trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::transforms::to_f32_grid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("grad_clip", "must be positive when set");
            }
        }
        Ok(())
    }
}

/// Serializable optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: AdamState {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        })
    }

    pub fn from_state(config: AdamConfig, state: AdamState) -> Result<Self> {
        config.validate()?;
        check_dim("adam second moment", state.m.len(), state.v.len())?;
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One update of `params` against `grads`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("adam parameters", self.state.m.len(), params.len())?;
        check_dim("adam gradient", self.state.m.len(), grads.len())?;
        let c = &self.config;
        let scale = match c.grad_clip {
            Some(limit) => {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k] * scale;
            let m = to_f32_grid(c.beta1 * self.state.m[k] + (1.0 - c.beta1) * g);
            let v = to_f32_grid(c.beta2 * self.state.v[k] + (1.0 - c.beta2) * g * g);
            self.state.m[k] = m;
            self.state.v[k] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p = to_f32_grid(*p - c.learning_rate * m_hat / (v_hat.sqrt() + c.eps));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = Adam::new(AdamConfig::default(), 2).unwrap();
        let mut p = vec![0.5, -0.25];
        opt.update(&mut p, &[3.0, -0.01]).unwrap();
        assert!((p[0] - (0.5 - 1e-4)).abs() < 1e-7);
        assert!((p[1] - (-0.25 + 1e-4)).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = Adam::new(AdamConfig::default(), 3).unwrap();
        let mut p = vec![0.5, -0.25, 0.125];
        let before = p.clone();
        for _ in 0..5 {
            opt.update(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, 1).unwrap();
        let mut p = vec![2.0];
        for _ in 0..500 {
            let g = 2.0 * (p[0] - 0.75);
            opt.update(&mut p, &[g]).unwrap();
        }
        assert!((p[0] - 0.75).abs() < 1e-2);
    }

    #[test]
    fn state_stays_on_f32_grid() {
        let mut opt = Adam::new(AdamConfig::default(), 2).unwrap();
        let mut p = vec![0.1, 0.2];
        opt.update(&mut p, &[0.123456789, -1.0e-3]).unwrap();
        for v in p.iter().chain(&opt.state().m).chain(&opt.state().v) {
            assert_eq!(*v, (*v as f32) as f64);
        }
    }

    #[test]
    fn resumed_optimizer_matches() {
        let mut a = Adam::new(AdamConfig::default(), 1).unwrap();
        let mut pa = vec![1.0];
        a.update(&mut pa, &[0.3]).unwrap();
        let mut b = Adam::from_state(*a.config(), a.state().clone()).unwrap();
        let mut pb = pa.clone();
        a.update(&mut pa, &[-0.7]).unwrap();
        b.update(&mut pb, &[-0.7]).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn clip_bounds_the_step_direction() {
        let cfg = AdamConfig {
            grad_clip: Some(1.0),
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, 2).unwrap();
        let mut p = vec![0.0, 0.0];
        opt.update(&mut p, &[300.0, 400.0]).unwrap();
        assert!((opt.state().m[0] - 0.1 * 0.6).abs() < 1e-7);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            AdamConfig {
                learning_rate: -1e-4,
                ..AdamConfig::default()
            },
            AdamConfig {
                beta1: 1.0,
                ..AdamConfig::default()
            },
            AdamConfig {
                eps: 0.0,
                ..AdamConfig::default()
            },
            AdamConfig {
                grad_clip: Some(0.0),
                ..AdamConfig::default()
            },
        ] {
            assert!(Adam::new(cfg, 1).is_err());
        }
        assert!(Adam::new(AdamConfig::default(), 2).unwrap().update(&mut [0.0], &[0.0]).is_err());
    }
}
