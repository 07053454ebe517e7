//! Interactive editing sessions: a starting latent, a history of applied
//! shifts, and the current render. The HTTP service wraps these.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::inversion::{invert, InversionConfig};
use crate::latent::{AttributeVector, EditDelta, LatentEditor, LatentVector};
use crate::models::ModelBundle;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditMode {
    /// Values are shifts `ε_i`, clipped against the current attributes.
    #[default]
    Relative,
    /// Values are target attribute values `t_i`; the shift is `t_i − α_i`.
    AbsoluteTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOutcome {
    pub image: Image,
    pub attributes: AttributeVector,
    /// Per-attribute request, as shifts, before clipping.
    pub requested: Vec<f64>,
    pub applied: EditDelta,
    /// `applied − requested`; nonzero where clipping kicked in.
    pub clip_adjustments: Vec<f64>,
    /// Identity cosine against the session's original image.
    pub identity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditSession {
    initial_z: LatentVector,
    z: LatentVector,
    original: Image,
    baseline: AttributeVector,
    current: Image,
    attributes: AttributeVector,
    history: Vec<EditDelta>,
    inversion_mse: Option<f64>,
}

impl EditSession {
    pub fn from_latent(bundle: &ModelBundle, z: LatentVector) -> Result<Self> {
        crate::error::check_dim("latent", bundle.latent_dim(), z.dim())?;
        let original = bundle.generator.generate(&z)?;
        let baseline = bundle.regressor.regress(&original)?;
        Ok(Self {
            initial_z: z.clone(),
            z,
            current: original.clone(),
            attributes: baseline.clone(),
            original,
            baseline,
            history: Vec::new(),
            inversion_mse: None,
        })
    }

    /// Start from a prior sample drawn with `seed`.
    pub fn from_seed(bundle: &ModelBundle, seed: u64) -> Result<Self> {
        let z = LatentVector::sample_prior(bundle.latent_dim(), &mut SeededRng::new(seed));
        Self::from_latent(bundle, z)
    }

    /// Start from the inversion of `target`.
    pub fn from_image(bundle: &ModelBundle, target: &Image, cfg: &InversionConfig, seed: u64) -> Result<Self> {
        let r = invert(target, bundle, cfg, &SeededRng::new(seed))?;
        let mut s = Self::from_latent(bundle, r.z)?;
        s.inversion_mse = Some(r.final_mse);
        Ok(s)
    }

    pub fn initial_latent(&self) -> &LatentVector {
        &self.initial_z
    }

    pub fn latent(&self) -> &LatentVector {
        &self.z
    }

    pub fn original(&self) -> &Image {
        &self.original
    }

    pub fn baseline(&self) -> &AttributeVector {
        &self.baseline
    }

    pub fn image(&self) -> &Image {
        &self.current
    }

    pub fn attributes(&self) -> &AttributeVector {
        &self.attributes
    }

    pub fn history(&self) -> &[EditDelta] {
        &self.history
    }

    pub fn inversion_mse(&self) -> Option<f64> {
        self.inversion_mse
    }

    /// Turn `{name: value}` into per-attribute shifts under `mode`.
    pub fn resolve(&self, names: &[String], request: &BTreeMap<String, f64>, mode: EditMode) -> Result<Vec<f64>> {
        let mut out = vec![0.0; names.len()];
        for (key, &value) in request {
            let i = names.iter().position(|n| n == key).ok_or_else(|| Error::InvalidValue {
                field: "delta".into(),
                reason: format!("unknown attribute `{key}`"),
            })?;
            if !value.is_finite() {
                return Err(Error::InvalidValue {
                    field: format!("delta.{key}"),
                    reason: "must be finite".into(),
                });
            }
            out[i] = match mode {
                EditMode::Relative => value,
                EditMode::AbsoluteTarget => value - self.attributes.as_slice()[i],
            };
        }
        Ok(out)
    }

    pub fn edit<E: LatentEditor + ?Sized>(
        &mut self,
        bundle: &ModelBundle,
        editor: &E,
        request: &BTreeMap<String, f64>,
        mode: EditMode,
    ) -> Result<EditOutcome> {
        let requested = self.resolve(&bundle.regressor.attribute_names(), request, mode)?;
        let applied = EditDelta::clipped(&self.attributes, &requested)?;
        if !applied.is_zero() {
            self.z = editor.edit(&self.z, &applied)?;
            self.current = bundle.generator.generate(&self.z)?;
            self.attributes = bundle.regressor.regress(&self.current)?;
        }
        self.history.push(applied.clone());
        Ok(EditOutcome {
            image: self.current.clone(),
            attributes: self.attributes.clone(),
            clip_adjustments: applied.as_slice().iter().zip(&requested).map(|(a, r)| a - r).collect(),
            requested,
            applied,
            identity: bundle.identity_similarity(&self.original, &self.current)?,
        })
    }

    pub fn reset(&mut self) {
        self.z = self.initial_z.clone();
        self.current = self.original.clone();
        self.attributes = self.baseline.clone();
        self.history.clear();
    }

    /// Re-apply the history to the initial latent.
    pub fn replay<E: LatentEditor + ?Sized>(&self, bundle: &ModelBundle, editor: &E) -> Result<(LatentVector, Image)> {
        let mut z = self.initial_z.clone();
        let mut img = self.original.clone();
        for d in &self.history {
            if !d.is_zero() {
                z = editor.edit(&z, d)?;
                img = bundle.generator.generate(&z)?;
            }
        }
        Ok((z, img))
    }
}
