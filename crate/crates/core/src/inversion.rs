//! Latent recovery: find `z*` whose generated image best reconstructs a
//! target, by Adam descent on pixel MSE with restarts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::image::Image;
use crate::latent::{AttributeVector, EditDelta, LatentEditor, LatentVector};
use crate::losses::content_loss;
use crate::models::ModelBundle;
use crate::optim::{Adam, AdamConfig};
use crate::rng::SeededRng;

/// Recorded in every result so readers know how the MSE was normalized.
pub const MSE_CONVENTION: &str = "mean over pixels";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Descents from `z = 0` plus `restarts − 1` prior samples.
    pub restarts: usize,
    pub content_weight: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            restarts: 3,
            content_weight: 0.0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.steps == 0 {
            return bad("steps", "must be at least 1");
        }
        if self.restarts == 0 {
            return bad("restarts", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive and finite");
        }
        if !(self.content_weight >= 0.0 && self.content_weight.is_finite()) {
            return bad("content_weight", "must be non-negative and finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub z: LatentVector,
    pub final_mse: f64,
    /// Best pixel MSE seen so far across all restarts, per step.
    pub trace: Vec<f64>,
    pub mse_convention: String,
}

struct Descent {
    best_z: Vec<f64>,
    best: f64,
    trace: Vec<f64>,
}

/// Objective and its latent gradient.
fn objective(bundle: &ModelBundle, target: &Image, z: &[f64], cfg: &InversionConfig) -> Result<(f64, f64, Vec<f64>)> {
    let zv = LatentVector::new(z.to_vec())?;
    let img = bundle.generator.generate(&zv)?;
    let npx = img.as_slice().len() as f64;
    let mse = img.mse(target)?;
    let mut g = Image::new(
        img.height(),
        img.width(),
        img.as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| 2.0 * (a - b) / npx)
            .collect(),
    )?;
    let mut loss = mse;
    if cfg.content_weight > 0.0 {
        let fa = bundle.features.features(&img)?;
        let fb = bundle.features.features(target)?;
        let (c, mut cg) = content_loss(&fa, &fb)?;
        loss += cfg.content_weight * c;
        for level in &mut cg {
            level.values.iter_mut().for_each(|v| *v *= cfg.content_weight);
        }
        let back = bundle.features.features_vjp(&img, &cg)?;
        for (a, b) in g.as_mut_slice().iter_mut().zip(back.as_slice()) {
            *a += b;
        }
    }
    Ok((loss, mse, bundle.generator.generate_vjp(&zv, &g)?))
}

fn descend(bundle: &ModelBundle, target: &Image, start: Vec<f64>, cfg: &InversionConfig) -> Result<Descent> {
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        start.len(),
    )?;
    let mut z = start;
    let mut best = f64::INFINITY;
    let mut best_z = z.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (loss, mse, grad) = objective(bundle, target, &z, cfg)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: trace.len() as u64 + 1,
            });
        }
        if mse < best {
            best = mse;
            best_z.clone_from(&z);
        }
        trace.push(best);
        adam.update(&mut z, &grad)?;
    }
    Ok(Descent { best_z, best, trace })
}

pub fn invert(target: &Image, bundle: &ModelBundle, cfg: &InversionConfig, rng: &SeededRng) -> Result<InversionResult> {
    cfg.validate()?;
    let (h, w) = bundle.image_shape();
    check_dim("target height", h, target.height())?;
    check_dim("target width", w, target.width())?;
    let m = bundle.latent_dim();
    let runs: Vec<Option<Descent>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|k| {
            let start = if k == 0 {
                vec![0.0; m]
            } else {
                LatentVector::sample_prior(m, &mut rng.substream(&[k as u64])).into_inner()
            };
            descend(bundle, target, start, cfg).ok()
        })
        .collect();
    let runs: Vec<Descent> = runs.into_iter().flatten().collect();
    let best = runs
        .iter()
        .min_by(|a, b| a.best.total_cmp(&b.best))
        .ok_or(Error::InversionFailed {
            restarts: cfg.restarts,
        })?;
    let trace: Vec<f64> = (0..cfg.steps)
        .map(|t| runs.iter().map(|r| r.trace[t]).fold(f64::INFINITY, f64::min))
        .collect();
    Ok(InversionResult {
        z: LatentVector::new(best.best_z.clone())?,
        final_mse: *trace.last().expect("steps >= 1"),
        trace,
        mse_convention: MSE_CONVENTION.into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub inversion_mse: f64,
    /// Identity cosine between reconstruction and edited image.
    pub identity: f64,
    pub attributes_before: AttributeVector,
    pub attributes_after: AttributeVector,
    /// `R(edited) − R(reconstruction)`.
    pub attribute_change: Vec<f64>,
    pub applied_delta: EditDelta,
    pub mse_convention: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedEdit {
    pub inversion: InversionResult,
    pub reconstruction: Image,
    pub edited: Image,
    pub report: EditReport,
}

/// Invert `target`, then edit the recovered latent by `requested`, clipped
/// against the reconstruction's measured attributes.
pub fn invert_then_edit<E: LatentEditor + ?Sized>(
    target: &Image,
    bundle: &ModelBundle,
    editor: &E,
    requested: &[f64],
    cfg: &InversionConfig,
    rng: &SeededRng,
) -> Result<InvertedEdit> {
    check_dim("delta", bundle.num_attributes(), requested.len())?;
    let inversion = invert(target, bundle, cfg, rng)?;
    let reconstruction = bundle.generator.generate(&inversion.z)?;
    let before = bundle.regressor.regress(&reconstruction)?;
    let delta = EditDelta::clipped(&before, requested)?;
    let edited = if delta.is_zero() {
        reconstruction.clone()
    } else {
        bundle.generator.generate(&editor.edit(&inversion.z, &delta)?)?
    };
    let after = bundle.regressor.regress(&edited)?;
    let report = EditReport {
        inversion_mse: inversion.final_mse,
        identity: bundle.identity_similarity(&reconstruction, &edited)?,
        attribute_change: after.as_slice().iter().zip(before.as_slice()).map(|(a, b)| a - b).collect(),
        attributes_before: before,
        attributes_after: after,
        applied_delta: delta,
        mse_convention: MSE_CONVENTION.into(),
    };
    Ok(InvertedEdit {
        inversion,
        reconstruction,
        edited,
        report,
    })
}
