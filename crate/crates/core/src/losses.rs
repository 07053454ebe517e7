//! Regression, realism and content losses, each with its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::image::{FeatureMap, Features};
use crate::latent::AttributeVector;

/// Arguments of logarithms are clamped to `[LOG_CLAMP, 1 − LOG_CLAMP]`.
pub const LOG_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub reg: f64,
    pub disc: f64,
    pub content: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg: 10.0,
            disc: 0.05,
            content: 0.05,
        }
    }
}

impl LossWeights {
    pub fn new(reg: f64, disc: f64, content: f64) -> Result<Self> {
        let w = Self { reg, disc, content };
        w.validate()?;
        Ok(w)
    }

    pub fn zero() -> Self {
        Self {
            reg: 0.0,
            disc: 0.0,
            content: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("weights.reg", self.reg),
            ("weights.disc", self.disc),
            ("weights.content", self.content),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config {
                    field: name.into(),
                    reason: format!("must be a non-negative number, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Orientation of the regression cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegMode {
    /// `−α′ ln α̂′ − (1 − α′) ln(1 − α̂′)`: target `α′`, prediction `α̂′`.
    #[default]
    Standard,
    /// Target and prediction exchanged:
    /// `−α̂′ ln α′ − (1 − α̂′) ln(1 − α′)`. Its minimizer over `α̂′`
    /// saturates at 0 or 1 unless `α′ = 0.5`.
    Swapped,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub disc: f64,
    pub content: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(reg: f64, disc: f64, content: f64, w: &LossWeights) -> Self {
        Self {
            reg,
            disc,
            content,
            total: w.reg * reg + w.disc * disc + w.content * content,
        }
    }

    /// Term-wise mean; `None` for an empty slice.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.reg += b.reg;
            acc.disc += b.disc;
            acc.content += b.content;
            acc.total += b.total;
        }
        Some(LossBreakdown {
            reg: acc.reg / n,
            disc: acc.disc / n,
            content: acc.content / n,
            total: acc.total / n,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.reg.is_finite() && self.disc.is_finite() && self.content.is_finite() && self.total.is_finite()
    }
}

fn clamp_log(p: f64) -> f64 {
    p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
}

/// Mean over attributes of the cross-entropy between prediction
/// `alpha_hat_prime` and target `alpha_prime`; gradient w.r.t. the prediction.
pub fn reg_loss(
    alpha_hat_prime: &AttributeVector,
    alpha_prime: &AttributeVector,
    mode: RegMode,
) -> Result<(f64, Vec<f64>)> {
    check_dim("reg_loss attributes", alpha_prime.len(), alpha_hat_prime.len())?;
    let n = alpha_prime.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(alpha_prime.len());
    for (&pred, &target) in alpha_hat_prime.as_slice().iter().zip(alpha_prime.as_slice()) {
        match mode {
            RegMode::Standard => {
                let p = clamp_log(pred);
                loss += -target * p.ln() - (1.0 - target) * (1.0 - p).ln();
                // The clamp is flat outside its interval.
                let inside = pred > LOG_CLAMP && pred < 1.0 - LOG_CLAMP;
                grad.push(if inside {
                    (-target / p + (1.0 - target) / (1.0 - p)) / n
                } else {
                    0.0
                });
            }
            RegMode::Swapped => {
                let t = clamp_log(target);
                loss += -pred * t.ln() - (1.0 - pred) * (1.0 - t).ln();
                grad.push((-t.ln() + (1.0 - t).ln()) / n);
            }
        }
    }
    Ok((loss / n, grad))
}

/// `ln(1 − D)` and its derivative `−1 / (1 − D)`, with `D` clamped.
pub fn disc_loss(score: f64) -> (f64, f64) {
    let d = clamp_log(score);
    ((1.0 - d).ln(), -1.0 / (1.0 - d))
}

/// Sum over levels and elements of squared differences; gradient w.r.t. the
/// edited features.
pub fn content_loss(edited: &Features, original: &Features) -> Result<(f64, Features)> {
    check_dim("feature levels", original.len(), edited.len())?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(edited.len());
    for (e, o) in edited.iter().zip(original) {
        if e.height != o.height || e.width != o.width || e.values.len() != o.values.len() {
            return Err(Error::DimensionMismatch {
                context: "feature map shape",
                expected: o.values.len(),
                actual: e.values.len(),
            });
        }
        let mut g = Vec::with_capacity(e.values.len());
        for (a, b) in e.values.iter().zip(&o.values) {
            let diff = a - b;
            loss += diff * diff;
            g.push(2.0 * diff);
        }
        grad.push(FeatureMap {
            height: e.height,
            width: e.width,
            values: g,
        });
    }
    Ok((loss, grad))
}

/// The three loss terms of one edited sample with their gradients.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub reg: f64,
    pub reg_grad: Vec<f64>,
    pub disc: f64,
    pub disc_grad: f64,
    pub content: f64,
    pub content_grad: Features,
}

impl LossTerms {
    pub fn compute(
        alpha_hat_prime: &AttributeVector,
        alpha_prime: &AttributeVector,
        score: f64,
        feats_edited: &Features,
        feats_original: &Features,
        mode: RegMode,
    ) -> Result<Self> {
        let (reg, reg_grad) = reg_loss(alpha_hat_prime, alpha_prime, mode)?;
        let (disc, disc_grad) = disc_loss(score);
        let (content, content_grad) = content_loss(feats_edited, feats_original)?;
        Ok(Self {
            reg,
            reg_grad,
            disc,
            disc_grad,
            content,
            content_grad,
        })
    }
}

/// Gradient of the weighted total w.r.t. the regressor output, the
/// discriminator score and the edited features.
#[derive(Clone, Debug)]
pub struct WeightedGradient {
    pub attributes: Vec<f64>,
    pub score: f64,
    pub features: Features,
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> (LossBreakdown, WeightedGradient) {
    let breakdown = LossBreakdown::new(terms.reg, terms.disc, terms.content, w);
    let grad = WeightedGradient {
        attributes: terms.reg_grad.iter().map(|g| w.reg * g).collect(),
        score: w.disc * terms.disc_grad,
        features: terms
            .content_grad
            .iter()
            .map(|m| FeatureMap {
                height: m.height,
                width: m.width,
                values: m.values.iter().map(|g| w.content * g).collect(),
            })
            .collect(),
    };
    (breakdown, grad)
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;

    fn av(v: &[f64]) -> AttributeVector {
        AttributeVector::new(v.to_vec()).unwrap()
    }

    fn level(values: Vec<f64>) -> FeatureMap {
        FeatureMap {
            height: 1,
            width: values.len(),
            values,
        }
    }

    #[test]
    fn reg_spot_values() {
        let (l, _) = reg_loss(&av(&[0.5]), &av(&[0.5]), RegMode::Standard).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = reg_loss(&av(&[0.9]), &av(&[0.9]), RegMode::Standard).unwrap();
        assert!((l - 0.32508).abs() < 1e-5, "{l}");
    }

    #[test]
    fn reg_gradient_pushes_toward_target() {
        let (_, g) = reg_loss(&av(&[0.5]), &av(&[0.9]), RegMode::Standard).unwrap();
        assert!(g[0] < 0.0);
        let (_, g) = reg_loss(&av(&[0.5]), &av(&[0.1]), RegMode::Standard).unwrap();
        assert!(g[0] > 0.0);
    }

    #[test]
    fn reg_length_mismatch() {
        assert!(reg_loss(&av(&[0.5]), &av(&[0.5, 0.5]), RegMode::Standard).is_err());
    }

    #[test]
    fn swapped_is_linear_in_prediction() {
        let target = av(&[0.9]);
        let (a, ga) = reg_loss(&av(&[0.2]), &target, RegMode::Swapped).unwrap();
        let (b, gb) = reg_loss(&av(&[0.7]), &target, RegMode::Swapped).unwrap();
        assert_eq!(ga, gb);
        assert!(((b - a) / 0.5 - ga[0]).abs() < 1e-12);
        // Minimizer saturates: pushing the prediction to 1 keeps lowering it.
        assert!(ga[0] < 0.0);
    }

    #[test]
    fn disc_spot_values() {
        let (l, g) = disc_loss(0.5);
        assert!((l + 0.69315).abs() < 1e-5);
        assert!((g + 2.0).abs() < 1e-12);
        let (l, _) = disc_loss(1.0);
        assert!((l + 13.8155).abs() < 1e-4, "{l}");
        for s in [0.0, 0.1, 0.5, 0.9, 1.0] {
            assert!(disc_loss(s).1 < 0.0);
        }
    }

    #[test]
    fn content_spot_values() {
        let a = vec![level(vec![1.0, -1.0])];
        let z = vec![level(vec![0.0, 0.0])];
        let (l, g) = content_loss(&a, &z).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g[0].values, vec![2.0, -2.0]);
        let (l, _) = content_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(content_loss(&a, &vec![level(vec![0.0; 3])]).is_err());
        assert!(content_loss(&a, &vec![]).is_err());
    }

    #[test]
    fn default_total() {
        let w = LossWeights::default();
        let b = LossBreakdown::new(0.32508, -0.69315, 0.0, &w);
        assert!((b.total - 3.21614).abs() < 1e-4, "{}", b.total);
        let only_reg = LossBreakdown::new(0.3, -0.7, 5.0, &LossWeights::new(1.0, 0.0, 0.0).unwrap());
        assert_eq!(only_reg.total, 0.3);
    }

    #[test]
    fn weights_must_be_non_negative() {
        assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(1.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn zero_term_gradients_stay_zero() {
        let terms = LossTerms {
            reg: 0.1,
            reg_grad: vec![0.0; 3],
            disc: -0.2,
            disc_grad: 0.0,
            content: 0.0,
            content_grad: vec![level(vec![0.0; 4])],
        };
        let (_, g) = total_loss(&terms, &LossWeights::default());
        assert!(g.attributes.iter().all(|&v| v == 0.0));
        assert_eq!(g.score, 0.0);
        assert!(g.features[0].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn breakdown_mean() {
        let w = LossWeights::default();
        let m = LossBreakdown::mean(&[LossBreakdown::new(1.0, 0.0, 0.0, &w), LossBreakdown::new(3.0, 0.0, 0.0, &w)])
            .unwrap();
        assert_eq!(m.reg, 2.0);
        assert_eq!(m.total, 20.0);
        assert!(LossBreakdown::mean(&[]).is_none());
    }
}
