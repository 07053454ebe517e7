//! Parameterizations of the direction module `T`.
//!
//! * `global-linear`: one constant direction per attribute (an `m × N` matrix).
//! * `local-linear`: `d_i(z) = W_i z + b_i`.
//! * `local-mlp`: `d_i(z)` is a three-layer perceptron `m → m → m → m` with
//!   leaky-ReLU on the two hidden layers and a linear output.
//!
//! Any kind may be wrapped with per-column normalization, which rescales each
//! direction to a fixed Euclidean length.
//!
//! Parameters are stored as `f64` values that are always exactly representable
//! in `f32`; this keeps checkpoints (32-bit payloads) lossless.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::latent::{EditDelta, LatentEditor, LatentVector};
use crate::rng::SeededRng;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_NORMALIZATION_SCALE: f64 = 3.0;
const GLOBAL_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    GlobalLinear,
    LocalLinear,
    LocalMlp,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::GlobalLinear => "global-linear",
            TransformKind::LocalLinear => "local-linear",
            TransformKind::LocalMlp => "local-mlp",
        }
    }

    pub fn is_local(self) -> bool {
        !matches!(self, TransformKind::GlobalLinear)
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global-linear" => Ok(TransformKind::GlobalLinear),
            "local-linear" => Ok(TransformKind::LocalLinear),
            "local-mlp" => Ok(TransformKind::LocalMlp),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub initializer: String,
}

impl ManifestEntry {
    fn new(name: String, shape: &[usize], initializer: &str) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
            initializer: initializer.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered layout of the flat parameter array.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamManifest {
    pub entries: Vec<ManifestEntry>,
}

impl ParamManifest {
    pub fn for_kind(kind: TransformKind, m: usize, n: usize) -> Self {
        let mut entries = Vec::new();
        match kind {
            TransformKind::GlobalLinear => {
                entries.push(ManifestEntry::new("directions".into(), &[m, n], "normal(0,0.1)"));
            }
            TransformKind::LocalLinear => {
                for i in 0..n {
                    entries.push(ManifestEntry::new(
                        format!("attr{i}.weight"),
                        &[m, m],
                        "uniform_fan_in",
                    ));
                    entries.push(ManifestEntry::new(format!("attr{i}.bias"), &[m], "zeros"));
                }
            }
            TransformKind::LocalMlp => {
                for i in 0..n {
                    for layer in 0..3 {
                        entries.push(ManifestEntry::new(
                            format!("attr{i}.layer{layer}.weight"),
                            &[m, m],
                            "uniform_fan_in",
                        ));
                        entries.push(ManifestEntry::new(
                            format!("attr{i}.layer{layer}.bias"),
                            &[m],
                            "zeros",
                        ));
                    }
                }
            }
        }
        Self { entries }
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(ManifestEntry::len).sum()
    }
}

/// `N` direction columns, each of length `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Directions {
    columns: Vec<Vec<f64>>,
}

impl Directions {
    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn num_attributes(&self) -> usize {
        self.columns.len()
    }
}

/// Gradient of `upstream · (z + Σ δ_i d_i(z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformGrad {
    pub params: Vec<f64>,
    /// Gradient with respect to `z`, including the identity path.
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformModule {
    kind: TransformKind,
    latent_dim: usize,
    num_attributes: usize,
    leaky_slope: f64,
    normalization: Option<f64>,
    manifest: ParamManifest,
    params: Vec<f64>,
}

pub(crate) fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

fn lrelu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn lrelu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// `W x + b` for a row-major `m × m` weight.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let m = b.len();
    (0..m)
        .map(|r| {
            let row = &w[r * m..(r + 1) * m];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[r]
        })
        .collect()
}

/// Accumulates parameter gradients of `W x + b` and returns `Wᵀ g`.
fn affine_backward(w: &[f64], x: &[f64], g: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let m = g.len();
    let mut gx = vec![0.0; x.len()];
    for r in 0..m {
        gb[r] += g[r];
        if g[r] == 0.0 {
            continue;
        }
        for c in 0..x.len() {
            gw[r * m + c] += g[r] * x[c];
            gx[c] += w[r * m + c] * g[r];
        }
    }
    gx
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct MlpCache {
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl TransformModule {
    /// Fresh transform with scaled-uniform weights, zero biases, and
    /// `Normal(0, 0.1²)` global columns.
    pub fn init(kind: TransformKind, m: usize, n: usize, rng: &mut SeededRng) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidValue {
                field: "transform dims".into(),
                reason: format!("m={m} and N={n} must both be at least 1"),
            });
        }
        let manifest = ParamManifest::for_kind(kind, m, n);
        let mut params = Vec::with_capacity(manifest.total());
        let normal = Normal::new(0.0, GLOBAL_INIT_STD).expect("valid std");
        for entry in &manifest.entries {
            let fan_in = *entry.shape.last().unwrap_or(&1) as f64;
            let bound = (1.0 / fan_in).sqrt();
            for _ in 0..entry.len() {
                let v = match entry.initializer.as_str() {
                    "zeros" => 0.0,
                    "uniform_fan_in" => rng.uniform(-bound, bound),
                    _ => normal.sample(rng),
                };
                params.push(to_f32_grid(v));
            }
        }
        Ok(Self {
            kind,
            latent_dim: m,
            num_attributes: n,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            normalization: None,
            manifest,
            params,
        })
    }

    /// Rebuild from stored parts, validating the parameter count.
    pub fn from_parts(
        kind: TransformKind,
        m: usize,
        n: usize,
        normalization: Option<f64>,
        leaky_slope: f64,
        params: Vec<f64>,
    ) -> Result<Self> {
        let manifest = ParamManifest::for_kind(kind, m, n);
        check_dim("transform parameter count", manifest.total(), params.len())?;
        let t = Self {
            kind,
            latent_dim: m,
            num_attributes: n,
            leaky_slope,
            normalization: None,
            manifest,
            params,
        };
        match normalization {
            Some(scale) => t.with_normalization(scale),
            None => Ok(t),
        }
    }

    /// Global-linear transform with the given columns.
    pub fn global_from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let n = columns.len();
        let m = columns.first().map(Vec::len).unwrap_or(0);
        let mut params = vec![0.0; m * n];
        for (i, col) in columns.iter().enumerate() {
            check_dim("direction column", m, col.len())?;
            for (j, v) in col.iter().enumerate() {
                params[j * n + i] = *v;
            }
        }
        Self::from_parts(TransformKind::GlobalLinear, m, n, None, DEFAULT_LEAKY_SLOPE, params)
    }

    pub fn with_normalization(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidValue {
                field: "normalization.scale".into(),
                reason: format!("{scale} must be positive"),
            });
        }
        self.normalization = Some(scale);
        Ok(self)
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn normalization(&self) -> Option<f64> {
        self.normalization
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn manifest(&self) -> &ParamManifest {
        &self.manifest
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Raw mutable access. Values written here are not snapped to the `f32`
    /// grid; call [`TransformModule::quantize`] before persisting.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn quantize(&mut self) {
        for p in &mut self.params {
            *p = to_f32_grid(*p);
        }
    }

    fn block(&self) -> usize {
        let m = self.latent_dim;
        match self.kind {
            TransformKind::GlobalLinear => 0,
            TransformKind::LocalLinear => m * m + m,
            TransformKind::LocalMlp => 3 * (m * m + m),
        }
    }

    fn mlp_forward(&self, i: usize, z: &[f64]) -> MlpCache {
        let m = self.latent_dim;
        let layer = m * m + m;
        let base = i * self.block();
        let p = &self.params;
        let w = |l: usize| &p[base + l * layer..base + l * layer + m * m];
        let b = |l: usize| &p[base + l * layer + m * m..base + (l + 1) * layer];
        let pre1 = affine(w(0), b(0), z);
        let h1: Vec<f64> = pre1.iter().map(|&x| lrelu(x, self.leaky_slope)).collect();
        let pre2 = affine(w(1), b(1), &h1);
        let h2: Vec<f64> = pre2.iter().map(|&x| lrelu(x, self.leaky_slope)).collect();
        let out = affine(w(2), b(2), &h2);
        MlpCache {
            pre1,
            h1,
            pre2,
            h2,
            out,
        }
    }

    /// Unnormalized `d_i(z)`.
    fn raw_column(&self, i: usize, z: &[f64]) -> Vec<f64> {
        let m = self.latent_dim;
        let n = self.num_attributes;
        match self.kind {
            TransformKind::GlobalLinear => (0..m).map(|j| self.params[j * n + i]).collect(),
            TransformKind::LocalLinear => {
                let base = i * self.block();
                let w = &self.params[base..base + m * m];
                let b = &self.params[base + m * m..base + m * m + m];
                affine(w, b, z)
            }
            TransformKind::LocalMlp => self.mlp_forward(i, z).out,
        }
    }

    /// Column `i` is `d_i(z)`, or `λ d_i / ‖d_i‖` when normalization is on.
    pub fn directions(&self, z: &LatentVector) -> Result<Directions> {
        check_dim("latent", self.latent_dim, z.dim())?;
        let columns = (0..self.num_attributes)
            .map(|i| {
                let d = self.raw_column(i, z.as_slice());
                match self.normalization {
                    None => Ok(d),
                    Some(scale) => {
                        let len = norm(&d);
                        if len == 0.0 || !len.is_finite() {
                            Err(Error::DegenerateDirection { index: i })
                        } else {
                            Ok(d.iter().map(|v| scale * v / len).collect())
                        }
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Directions { columns })
    }

    /// Vector-Jacobian product of `z ↦ z + Σ δ_i d_i(z)` with respect to the
    /// parameters and to `z`.
    pub fn vjp(&self, z: &LatentVector, delta: &EditDelta, upstream: &[f64]) -> Result<TransformGrad> {
        let m = self.latent_dim;
        let n = self.num_attributes;
        check_dim("latent", m, z.dim())?;
        check_dim("delta", n, delta.len())?;
        check_dim("upstream", m, upstream.len())?;
        let z = z.as_slice();
        let mut gp = vec![0.0; self.params.len()];
        let mut gz = upstream.to_vec();

        for (i, &d_i) in delta.as_slice().iter().enumerate() {
            if d_i == 0.0 {
                continue;
            }
            let mlp = matches!(self.kind, TransformKind::LocalMlp).then(|| self.mlp_forward(i, z));
            let raw = match &mlp {
                Some(cache) => cache.out.clone(),
                None => self.raw_column(i, z),
            };
            // Gradient with respect to the (possibly normalized) column.
            let g_col: Vec<f64> = upstream.iter().map(|u| d_i * u).collect();
            let g_raw = match self.normalization {
                None => g_col,
                Some(scale) => {
                    let len = norm(&raw);
                    if len == 0.0 || !len.is_finite() {
                        return Err(Error::DegenerateDirection { index: i });
                    }
                    let proj: f64 = raw.iter().zip(&g_col).map(|(a, g)| a * g).sum::<f64>() / len;
                    raw.iter()
                        .zip(&g_col)
                        .map(|(a, g)| scale / len * (g - a / len * proj))
                        .collect()
                }
            };

            match self.kind {
                TransformKind::GlobalLinear => {
                    for j in 0..m {
                        gp[j * n + i] += g_raw[j];
                    }
                }
                TransformKind::LocalLinear => {
                    let base = i * self.block();
                    let (gw, gb) = gp[base..base + m * m + m].split_at_mut(m * m);
                    let w = &self.params[base..base + m * m];
                    let gx = affine_backward(w, z, &g_raw, gw, gb);
                    for (a, b) in gz.iter_mut().zip(gx) {
                        *a += b;
                    }
                }
                TransformKind::LocalMlp => {
                    let cache = mlp.expect("computed above");
                    let layer = m * m + m;
                    let base = i * self.block();
                    let slope = self.leaky_slope;
                    let w = |l: usize| &self.params[base + l * layer..base + l * layer + m * m];

                    let g_h2 = {
                        let (gw, gb) = gp[base + 2 * layer..base + 3 * layer].split_at_mut(m * m);
                        affine_backward(w(2), &cache.h2, &g_raw, gw, gb)
                    };
                    let g_pre2: Vec<f64> =
                        g_h2.iter().zip(&cache.pre2).map(|(g, &x)| g * lrelu_grad(x, slope)).collect();
                    let g_h1 = {
                        let (gw, gb) = gp[base + layer..base + 2 * layer].split_at_mut(m * m);
                        affine_backward(w(1), &cache.h1, &g_pre2, gw, gb)
                    };
                    let g_pre1: Vec<f64> =
                        g_h1.iter().zip(&cache.pre1).map(|(g, &x)| g * lrelu_grad(x, slope)).collect();
                    let gx = {
                        let (gw, gb) = gp[base..base + layer].split_at_mut(m * m);
                        affine_backward(w(0), z, &g_pre1, gw, gb)
                    };
                    for (a, b) in gz.iter_mut().zip(gx) {
                        *a += b;
                    }
                }
            }
        }
        Ok(TransformGrad {
            params: gp,
            latent: gz,
        })
    }
}

impl LatentEditor for TransformModule {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    fn edit(&self, z: &LatentVector, delta: &EditDelta) -> Result<LatentVector> {
        check_dim("delta", self.num_attributes, delta.len())?;
        let dirs = self.directions(z)?;
        let mut out = z.as_slice().to_vec();
        for (i, &d) in delta.as_slice().iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(dirs.column(i)) {
                *o += d * v;
            }
        }
        LatentVector::new(out)
    }
}
