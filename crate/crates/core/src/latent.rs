//! Latent/attribute data model and the shift-sampling procedure that produces
//! training targets.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::SeededRng;

/// Reason attached to errors for NaN or infinite latent components.
pub(crate) const NON_FINITE: &str = "non-finite component";

/// A point in the generator's input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidValue {
                field: "latent".into(),
                reason: "must have at least one component".into(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue {
                field: format!("latent[{i}]"),
                reason: NON_FINITE.into(),
            });
        }
        Ok(Self(values))
    }

    pub fn zeros(m: usize) -> Self {
        Self(vec![0.0; m])
    }

    /// Draw from the standard normal prior.
    pub fn sample_prior(m: usize, rng: &mut SeededRng) -> Self {
        Self(rng.normal_vec(m))
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Per-attribute scores, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeVector(Vec<f64>);

impl AttributeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::InvalidValue {
                    field: format!("attribute[{i}]"),
                    reason: format!("{v} outside [0, 1]"),
                });
            }
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self + delta`, clamped into the unit cube.
    pub fn shifted(&self, delta: &EditDelta) -> AttributeVector {
        AttributeVector(
            self.0
                .iter()
                .zip(delta.as_slice())
                .map(|(a, d)| (a + d).clamp(0.0, 1.0))
                .collect(),
        )
    }
}

/// Realized per-attribute shift, already clipped against the originating
/// attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EditDelta(Vec<f64>);

impl EditDelta {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Wrap raw shifts. Each component must be finite with `|δ| ≤ 1`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1.0 {
                return Err(Error::InvalidValue {
                    field: format!("delta[{i}]"),
                    reason: format!("{v} is not a finite shift in [-1, 1]"),
                });
            }
        }
        Ok(Self(values))
    }

    /// Shift that moves `alpha` by `requested` but never leaves `[0, 1]`.
    pub fn clipped(alpha: &AttributeVector, requested: &[f64]) -> Result<Self> {
        check_dim("shift length", alpha.len(), requested.len())?;
        Ok(Self(
            alpha
                .as_slice()
                .iter()
                .zip(requested)
                .map(|(&a, &e)| clip_component(a, e))
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&d| d == 0.0)
    }

    /// Keep only component `index`.
    pub fn restricted_to(&self, index: usize) -> Self {
        Self(
            self.0
                .iter()
                .enumerate()
                .map(|(i, &d)| if i == index { d } else { 0.0 })
                .collect(),
        )
    }
}

/// `clip(a + e, [0, 1]) - a`, returning `e` untouched when no clipping occurs.
fn clip_component(a: f64, e: f64) -> f64 {
    let moved = a + e;
    if moved > 1.0 {
        1.0 - a
    } else if moved < 0.0 {
        -a
    } else {
        e
    }
}

/// Draw `ε ~ U[-1, 1]^N` independently per attribute and clip it against `alpha`.
pub fn sample_epsilon(alpha: &AttributeVector, rng: &mut SeededRng) -> (Vec<f64>, EditDelta) {
    let eps: Vec<f64> = (0..alpha.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let delta = EditDelta::clipped(alpha, &eps).expect("lengths agree by construction");
    (eps, delta)
}

/// Anything that can move a latent by an attribute shift.
pub trait LatentEditor: Send + Sync {
    fn latent_dim(&self) -> usize;
    fn num_attributes(&self) -> usize;
    fn edit(&self, z: &LatentVector, delta: &EditDelta) -> Result<LatentVector>;
}

/// `z' = z + Σ δ_i d_i(z)`.
pub fn apply_edit(
    z: &LatentVector,
    editor: &dyn LatentEditor,
    delta: &EditDelta,
) -> Result<LatentVector> {
    check_dim("latent", editor.latent_dim(), z.dim())?;
    check_dim("delta", editor.num_attributes(), delta.len())?;
    editor.edit(z, delta)
}
