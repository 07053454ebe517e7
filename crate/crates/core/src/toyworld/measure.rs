use super::{sigmoid, ToyWorld, ATTRIBUTE_NAMES, CENTER_BLOCK, IDENTITY_DIM, POOLED};
use crate::error::{check_dim, Result};
use crate::image::{FeatureMap, Features, Image};
use crate::latent::AttributeVector;
use crate::models::{Discriminator, FeatureExtractor, IdentityEmbedder, Regressor};

/// Guard added to the contrast denominator of the coverage estimate.
const CONTRAST_GUARD: f64 = 1e-3;
/// Sharpness of the softplus used in place of hard ReLU penalties.
pub const DISC_SHARPNESS: f64 = 100.0;
/// Smoothing of the absolute value applied to Laplacian responses.
pub const LAPLACIAN_SMOOTHING: f64 = 5e-2;
const DISC_GAIN: f64 = 10.0;
const DISC_MARGIN: f64 = 0.05;
/// Annulus (in px) that can contain the disk edge for any latent; excluded
/// from the high-frequency statistic.
const EDGE_BAND: (f64, f64) = (2.0, 15.0);
const POOL_FACTORS: [usize; 4] = [1, 2, 4, 8];
const EMBED_EPS: f64 = 1e-12;

/// `ln(1 + e^{βx}) / β`, a smooth ReLU.
pub fn soft_relu(x: f64) -> f64 {
    let bx = DISC_SHARPNESS * x;
    if bx > 0.0 {
        x + (-bx).exp().ln_1p() / DISC_SHARPNESS
    } else {
        bx.exp().ln_1p() / DISC_SHARPNESS
    }
}

fn soft_relu_grad(x: f64) -> f64 {
    sigmoid(DISC_SHARPNESS * x)
}

fn smooth_abs(x: f64) -> f64 {
    (x * x + LAPLACIAN_SMOOTHING * LAPLACIAN_SMOOTHING).sqrt() - LAPLACIAN_SMOOTHING
}

fn smooth_abs_grad(x: f64) -> f64 {
    x / (x * x + LAPLACIAN_SMOOTHING * LAPLACIAN_SMOOTHING).sqrt()
}

fn check_toy_image(img: &Image) -> Result<()> {
    check_dim("image height", ToyWorld::SIZE, img.height())?;
    check_dim("image width", ToyWorld::SIZE, img.width())
}

fn corner_pixels() -> impl Iterator<Item = usize> {
    let n = ToyWorld::SIZE;
    (0..n * n).filter(move |&p| ToyWorld::in_corner(p / n, p % n))
}

fn center_pixels() -> impl Iterator<Item = usize> {
    let n = ToyWorld::SIZE;
    CENTER_BLOCK.flat_map(move |y| CENTER_BLOCK.map(move |x| y * n + x))
}

fn pool(img: &[f64], n: usize, k: usize) -> FeatureMap {
    let m = n / k;
    let mut values = vec![0.0; m * m];
    for y in 0..n {
        for x in 0..n {
            values[(y / k) * m + x / k] += img[y * n + x];
        }
    }
    let inv = 1.0 / (k * k) as f64;
    values.iter_mut().for_each(|v| *v *= inv);
    FeatureMap {
        height: m,
        width: m,
        values,
    }
}

/// Intermediate quantities of the regressor.
struct Estimate {
    background: f64,
    disk: f64,
    denom: f64,
    coverage: f64,
    radius: f64,
}

impl ToyWorld {
    fn estimate(&self, img: &Image) -> Estimate {
        let px = img.as_slice();
        let corners: Vec<usize> = corner_pixels().collect();
        let center: Vec<usize> = center_pixels().collect();
        let background = corners.iter().map(|&p| px[p]).sum::<f64>() / corners.len() as f64;
        let disk = center.iter().map(|&p| px[p]).sum::<f64>() / center.len() as f64;
        let mean = img.mean();
        let sign = if disk >= background { 1.0 } else { -1.0 };
        let denom = disk - background + CONTRAST_GUARD * sign;
        let coverage = (mean - background) / denom;
        let radius = self.radius_squared(coverage).max(0.0).sqrt();
        Estimate {
            background,
            disk,
            denom,
            coverage,
            radius,
        }
    }

    /// Squared disk radius implied by a coverage fraction. A logistic edge of
    /// width τ adds `π³τ²/3` px² to the area of a hard disk.
    fn radius_squared(&self, coverage: f64) -> f64 {
        let pi = std::f64::consts::PI;
        let tau = self.config.edge_softness;
        let area = (Self::SIZE * Self::SIZE) as f64;
        coverage * area / pi - pi * pi * tau * tau / 3.0
    }

    /// Returns the high-frequency statistic, the Laplacian at each included
    /// pixel, and the number of included pixels.
    fn high_frequency(&self, px: &[f64]) -> (f64, Vec<(usize, f64)>, usize) {
        let n = Self::SIZE;
        let mut terms = Vec::new();
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let p = y * n + x;
                let d = self.distance[p];
                if d >= EDGE_BAND.0 && d <= EDGE_BAND.1 {
                    continue;
                }
                let lap = 4.0 * px[p] - px[p - 1] - px[p + 1] - px[p - n] - px[p + n];
                terms.push((p, lap));
            }
        }
        let count = terms.len();
        let hf = terms.iter().map(|(_, l)| smooth_abs(*l)).sum::<f64>() / count as f64;
        (hf, terms, count)
    }

    /// Range penalties start at `[−a_tex, 1 + a_tex]`, the generator's own
    /// output range, and are rescaled so a pixel at 2.0 still costs 1.
    fn off_manifold(&self, px: &[f64]) -> (f64, f64) {
        let slack = self.config.texture_amplitude;
        let range: f64 = px
            .iter()
            .map(|&v| soft_relu(v - 1.0 - slack) + soft_relu(-v - slack))
            .sum::<f64>()
            / (px.len() as f64 * (1.0 - slack));
        let (hf, _, _) = self.high_frequency(px);
        (range + soft_relu(hf - 2.0 * self.config.texture_amplitude), hf)
    }

    fn embedding_raw(&self, img: &Image) -> Vec<f64> {
        let v = pool(img.as_slice(), Self::SIZE, Self::SIZE / POOLED).values;
        let k = v.len();
        let odd: Vec<f64> = (0..k).map(|i| 0.5 * (v[i] - v[k - 1 - i])).collect();
        self.identity
            .chunks(k)
            .map(|row| row.iter().zip(&odd).map(|(a, b)| a * b).sum())
            .collect()
    }
}

impl Regressor for ToyWorld {
    fn num_attributes(&self) -> usize {
        Self::NUM_ATTRIBUTES
    }

    fn attribute_names(&self) -> Vec<String> {
        ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn regress(&self, img: &Image) -> Result<AttributeVector> {
        check_toy_image(img)?;
        let e = self.estimate(img);
        let size = (e.radius - Self::RADIUS_BASE) / Self::RADIUS_SPAN;
        AttributeVector::new(vec![
            e.background.clamp(0.0, 1.0),
            size.clamp(0.0, 1.0),
            e.disk.clamp(0.0, 1.0),
        ])
    }

    fn regress_vjp(&self, img: &Image, upstream: &[f64]) -> Result<Image> {
        check_toy_image(img)?;
        check_dim("regressor upstream", Self::NUM_ATTRIBUTES, upstream.len())?;
        let e = self.estimate(img);
        let inside = |v: f64| v > 0.0 && v < 1.0;
        let mut g_bg = if inside(e.background) { upstream[0] } else { 0.0 };
        let mut g_disk = if inside(e.disk) { upstream[2] } else { 0.0 };
        let mut g_mean = 0.0;
        let size = (e.radius - Self::RADIUS_BASE) / Self::RADIUS_SPAN;
        if inside(size) && self.radius_squared(e.coverage) > 0.0 {
            let area = (Self::SIZE * Self::SIZE) as f64;
            let g_radius = upstream[1] / Self::RADIUS_SPAN;
            let g_cov = g_radius * area / std::f64::consts::PI / (2.0 * e.radius);
            g_mean += g_cov / e.denom;
            g_bg += g_cov * (e.coverage - 1.0) / e.denom;
            g_disk += g_cov * (-e.coverage / e.denom);
        }
        let n_px = (Self::SIZE * Self::SIZE) as f64;
        let mut grad = vec![g_mean / n_px; Self::SIZE * Self::SIZE];
        let corners: Vec<usize> = corner_pixels().collect();
        let per_corner = g_bg / corners.len() as f64;
        for p in corners {
            grad[p] += per_corner;
        }
        let center: Vec<usize> = center_pixels().collect();
        let per_center = g_disk / center.len() as f64;
        for p in center {
            grad[p] += per_center;
        }
        Image::new(Self::SIZE, Self::SIZE, grad)
    }
}

impl Discriminator for ToyWorld {
    fn discriminate(&self, img: &Image) -> Result<f64> {
        check_toy_image(img)?;
        let (off, _) = self.off_manifold(img.as_slice());
        Ok(sigmoid(DISC_GAIN * (DISC_MARGIN - off)))
    }

    fn discriminate_vjp(&self, img: &Image, upstream: f64) -> Result<Image> {
        check_toy_image(img)?;
        let px = img.as_slice();
        let (off, hf) = self.off_manifold(px);
        let d = sigmoid(DISC_GAIN * (DISC_MARGIN - off));
        let g_off = upstream * (-DISC_GAIN) * d * (1.0 - d);
        let slack = self.config.texture_amplitude;
        let inv_n = 1.0 / (px.len() as f64 * (1.0 - slack));
        let mut grad: Vec<f64> = px
            .iter()
            .map(|&v| g_off * inv_n * (soft_relu_grad(v - 1.0 - slack) - soft_relu_grad(-v - slack)))
            .collect();
        let g_hf = g_off * soft_relu_grad(hf - 2.0 * self.config.texture_amplitude);
        if g_hf != 0.0 {
            let n = Self::SIZE;
            let (_, terms, count) = self.high_frequency(px);
            for (p, lap) in terms {
                let c = g_hf * smooth_abs_grad(lap) / count as f64;
                grad[p] += 4.0 * c;
                grad[p - 1] -= c;
                grad[p + 1] -= c;
                grad[p - n] -= c;
                grad[p + n] -= c;
            }
        }
        Image::new(Self::SIZE, Self::SIZE, grad)
    }
}

impl FeatureExtractor for ToyWorld {
    fn features(&self, img: &Image) -> Result<Features> {
        check_toy_image(img)?;
        Ok(POOL_FACTORS
            .iter()
            .map(|&k| pool(img.as_slice(), Self::SIZE, k))
            .collect())
    }

    fn features_vjp(&self, img: &Image, upstream: &Features) -> Result<Image> {
        check_toy_image(img)?;
        check_dim("feature levels", POOL_FACTORS.len(), upstream.len())?;
        let n = Self::SIZE;
        let mut grad = vec![0.0; n * n];
        for (&k, level) in POOL_FACTORS.iter().zip(upstream) {
            let m = n / k;
            check_dim("feature map size", m * m, level.values.len())?;
            let inv = 1.0 / (k * k) as f64;
            for y in 0..n {
                for x in 0..n {
                    grad[y * n + x] += level.values[(y / k) * m + x / k] * inv;
                }
            }
        }
        Image::new(n, n, grad)
    }
}

impl IdentityEmbedder for ToyWorld {
    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        check_toy_image(img)?;
        let e = self.embedding_raw(img);
        let len = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len < EMBED_EPS {
            let mut canonical = vec![0.0; IDENTITY_DIM];
            canonical[0] = 1.0;
            return Ok(canonical);
        }
        Ok(e.iter().map(|v| v / len).collect())
    }

    fn embed_vjp(&self, img: &Image, upstream: &[f64]) -> Result<Image> {
        check_toy_image(img)?;
        check_dim("identity upstream", IDENTITY_DIM, upstream.len())?;
        let n = Self::SIZE;
        let e = self.embedding_raw(img);
        let len = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len < EMBED_EPS {
            return Ok(Image::filled(n, n, 0.0));
        }
        let unit: Vec<f64> = e.iter().map(|v| v / len).collect();
        let proj: f64 = unit.iter().zip(upstream).map(|(a, b)| a * b).sum();
        let g_e: Vec<f64> = upstream
            .iter()
            .zip(&unit)
            .map(|(g, u)| (g - u * proj) / len)
            .collect();
        let k = POOLED * POOLED;
        let mut g_odd = vec![0.0; k];
        for (r, ge) in g_e.iter().enumerate() {
            for c in 0..k {
                g_odd[c] += self.identity[r * k + c] * ge;
            }
        }
        let g_pool: Vec<f64> = (0..k).map(|i| 0.5 * (g_odd[i] - g_odd[k - 1 - i])).collect();
        let f = n / POOLED;
        let inv = 1.0 / (f * f) as f64;
        let mut grad = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                grad[y * n + x] = g_pool[(y / f) * POOLED + x / f] * inv;
            }
        }
        Image::new(n, n, grad)
    }

    fn frozen_parameters(&self) -> Vec<f64> {
        self.identity.clone()
    }
}
