//! Analytic stand-ins for the generator, regressor, discriminator, feature
//! extractor and identity embedder.
//!
//! The toy generator renders a soft disk on a flat background plus a fixed
//! low-frequency texture:
//!
//! ```text
//! M(p)   = σ((r(z) − ‖p − center‖) / τ)
//! img(p) = b(z)·(1 − M) + c(z)·M + a_tex · tanh(P_tex · z[3..8])
//! b = σ(z_0), r = 4 + 8·σ(z_1), c = σ(z_2)
//! ```
//!
//! The texture is zero on the four corner patches and the center block, and is
//! odd under point reflection through the image center, so it never moves the
//! regressor's statistics. The disk and background are even under the same
//! reflection, so the identity embedder (which only sees the odd part of the
//! image) depends on the texture coordinates alone. Attribute edits along the
//! oracle directions therefore preserve identity exactly, and any latent
//! motion in the texture coordinates shows up as identity loss.

mod measure;
mod render;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{AttributeVector, EditDelta, LatentEditor, LatentVector};
use crate::rng::SeededRng;

pub use measure::{soft_relu, DISC_SHARPNESS, LAPLACIAN_SMOOTHING};

pub const ATTRIBUTE_NAMES: [&str; 3] = ["background", "size", "disk"];

const CORNER_PATCH: usize = 4;
/// Regressor's disk-intensity probe: rows/cols 15..=17.
const CENTER_BLOCK: std::ops::RangeInclusive<usize> = 15..=17;
/// Texture-free region around the center, symmetric under reflection.
const CENTER_MASK: std::ops::RangeInclusive<usize> = 14..=17;
const TEXTURE_DIMS: usize = 5;
const IDENTITY_DIM: usize = 32;
const POOLED: usize = 8;
/// Texture wave vectors in cycles per image; no two are parallel.
const WAVE_VECTORS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (1.0, -1.0),
    (2.0, 1.0),
    (1.0, 2.0),
    (2.0, -1.0),
    (1.0, -2.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub texture_seed: u64,
    pub identity_seed: u64,
    /// RMS of the texture pre-activation for a unit-variance latent.
    pub texture_gain: f64,
    pub texture_amplitude: f64,
    pub edge_softness: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            texture_seed: 0x7E47_0001,
            identity_seed: 0x1D_0002,
            texture_gain: 1.0,
            texture_amplitude: 0.1,
            edge_softness: 1.0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.edge_softness > 0.0) {
            return Err(Error::InvalidValue {
                field: "toy.edge_softness".into(),
                reason: "must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.texture_amplitude) {
            return Err(Error::InvalidValue {
                field: "toy.texture_amplitude".into(),
                reason: "must lie in [0, 1)".into(),
            });
        }
        if !(self.texture_gain >= 0.0 && self.texture_gain.is_finite()) {
            return Err(Error::InvalidValue {
                field: "toy.texture_gain".into(),
                reason: "must be non-negative".into(),
            });
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Analytic toy world; implements every model contract in [`crate::models`].
#[derive(Clone, Debug)]
pub struct ToyWorld {
    config: ToyConfig,
    /// Per-pixel texture projection, row-major `[H·W][5]`.
    texture: Vec<f64>,
    /// Identity projection, row-major `[32][64]`.
    identity: Vec<f64>,
    /// Distance of each pixel center to the disk center.
    distance: Vec<f64>,
}

impl ToyWorld {
    pub const LATENT_DIM: usize = 8;
    pub const NUM_ATTRIBUTES: usize = 3;
    pub const SIZE: usize = 32;
    pub const CENTER: f64 = 16.0;
    pub const RADIUS_BASE: f64 = 4.0;
    pub const RADIUS_SPAN: f64 = 8.0;

    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let n = Self::SIZE;
        let distance = (0..n * n)
            .map(|p| {
                let (y, x) = ((p / n) as f64 + 0.5, (p % n) as f64 + 0.5);
                ((x - Self::CENTER).powi(2) + (y - Self::CENTER).powi(2)).sqrt()
            })
            .collect();
        Ok(Self {
            texture: build_texture(&config),
            identity: build_identity(config.identity_seed),
            distance,
            config,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Ground-truth attributes `(σ(z_0), σ(z_1), σ(z_2))`.
    pub fn oracle_attributes(z: &LatentVector) -> Result<AttributeVector> {
        crate::error::check_dim("latent", Self::LATENT_DIM, z.dim())?;
        let v = z.as_slice();
        AttributeVector::new(vec![sigmoid(v[0]), sigmoid(v[1]), sigmoid(v[2])])
    }

    /// Latent displacement that moves ground-truth attribute `index` by
    /// exactly `delta` and touches nothing else.
    pub fn oracle_direction(z: &LatentVector, index: usize, delta: f64) -> Result<LatentVector> {
        crate::error::check_dim("latent", Self::LATENT_DIM, z.dim())?;
        if index >= Self::NUM_ATTRIBUTES {
            return Err(Error::InvalidValue {
                field: "attribute index".into(),
                reason: format!("{index} out of range"),
            });
        }
        let alpha = sigmoid(z.as_slice()[index]);
        let target = alpha + delta;
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::OracleTargetOutOfRange { index, target });
        }
        let mut out = vec![0.0; Self::LATENT_DIM];
        out[index] = logit(target) - logit(alpha);
        Ok(LatentVector::from_vec_unchecked(out))
    }

    fn in_corner(y: usize, x: usize) -> bool {
        let n = Self::SIZE;
        let edge = |v: usize| v < CORNER_PATCH || v >= n - CORNER_PATCH;
        edge(y) && edge(x)
    }
}

fn texture_mask(y: usize, x: usize) -> f64 {
    if ToyWorld::in_corner(y, x) || (CENTER_MASK.contains(&y) && CENTER_MASK.contains(&x)) {
        0.0
    } else {
        1.0
    }
}

fn build_texture(config: &ToyConfig) -> Vec<f64> {
    let n = ToyWorld::SIZE;
    // One odd plane wave per texture coordinate. Wave vectors are distinct
    // integer cycle counts over the image, so the modes stay close to
    // orthogonal after masking and pooling.
    let mut candidates = WAVE_VECTORS.to_vec();
    let mut rng = SeededRng::new(config.texture_seed);
    for i in (1..candidates.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        candidates.swap(i, j);
    }
    let omega = std::f64::consts::TAU / n as f64;
    let waves: Vec<(f64, f64)> = candidates[..TEXTURE_DIMS]
        .iter()
        .map(|&(kx, ky)| (kx * omega, ky * omega))
        .collect();
    let mut proj = vec![0.0; n * n * TEXTURE_DIMS];
    let mut energy = 0.0;
    let mut textured = 0usize;
    for y in 0..n {
        for x in 0..n {
            let mask = texture_mask(y, x);
            let (dy, dx) = (y as f64 + 0.5 - ToyWorld::CENTER, x as f64 + 0.5 - ToyWorld::CENTER);
            let p = y * n + x;
            for (k, w) in waves.iter().enumerate() {
                let v = (w.0 * dx + w.1 * dy).sin();
                proj[p * TEXTURE_DIMS + k] = mask * v;
                energy += (mask * v).powi(2);
            }
            if mask > 0.0 {
                textured += 1;
            }
        }
    }
    let scale = config.texture_gain / (energy / textured as f64).sqrt();
    proj.iter_mut().for_each(|v| *v *= scale);
    proj
}

fn build_identity(seed: u64) -> Vec<f64> {
    let cols = POOLED * POOLED;
    let mut rng = SeededRng::new(seed);
    let mut proj: Vec<f64> = (0..IDENTITY_DIM * cols).map(|_| rng.normal()).collect();
    // Unit-norm columns.
    for c in 0..cols {
        let len = (0..IDENTITY_DIM)
            .map(|r| proj[r * cols + c].powi(2))
            .sum::<f64>()
            .sqrt();
        for r in 0..IDENTITY_DIM {
            proj[r * cols + c] /= len;
        }
    }
    proj
}

/// Closed-form oracle editor for the toy world.
///
/// Moves each ground-truth attribute by exactly `δ_i` along its own latent
/// axis. Targets are saturated to `[1e-6, 1 − 1e-6]` because shifts are
/// clipped against the regressor's estimate, which can differ slightly from
/// the ground truth.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleEditor;

const ORACLE_SATURATION: f64 = 1e-6;

impl LatentEditor for OracleEditor {
    fn latent_dim(&self) -> usize {
        ToyWorld::LATENT_DIM
    }

    fn num_attributes(&self) -> usize {
        ToyWorld::NUM_ATTRIBUTES
    }

    fn edit(&self, z: &LatentVector, delta: &EditDelta) -> Result<LatentVector> {
        crate::error::check_dim("latent", ToyWorld::LATENT_DIM, z.dim())?;
        crate::error::check_dim("delta", ToyWorld::NUM_ATTRIBUTES, delta.len())?;
        let mut out = z.as_slice().to_vec();
        for (i, &d) in delta.as_slice().iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let alpha = sigmoid(z.as_slice()[i]);
            let target = (alpha + d).clamp(ORACLE_SATURATION, 1.0 - ORACLE_SATURATION);
            out[i] += logit(target) - logit(alpha);
        }
        LatentVector::new(out)
    }
}
