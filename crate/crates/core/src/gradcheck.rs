//! Central finite-difference checks for analytic gradients.
//!
//! The error of one check point is measured over the whole gradient vector:
//!
//! ```text
//! rel = max_k |a_k − n_k| / max(max_k |a_k|, max_k |n_k|, 1e-6)
//! ```
//!
//! so components that are tiny compared to the rest of the gradient do not
//! dominate. A kink (leaky-ReLU switch, clamp boundary) inside the step makes
//! the two one-sided differences of a component disagree by about twice the
//! central-difference error, while for a smooth function they differ only by
//! `h·|f''|`. A failing point whose worst component shows a one-sided gap at
//! least as large as its error is therefore resampled rather than scored, and
//! the number of resamples is reported.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{FeatureMap, Image};
use crate::latent::{AttributeVector, LatentVector};
use crate::losses::{content_loss, disc_loss, reg_loss, total_loss, LossTerms, LossWeights, RegMode};
use crate::models::ModelBundle;
use crate::rng::SeededRng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Below this gradient scale, central differences at `FD_STEP` are dominated by
/// roundoff (about `ε_mach·|f| / h ≈ 1e-12`) and errors are measured absolutely.
const SCALE_FLOOR: f64 = 1e-6;
const MAX_ATTEMPTS_PER_POINT: usize = 20;

/// Outcome of comparing one analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointCheck {
    pub rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub kinked: bool,
}

/// Compare `analytic` with the central-difference gradient of `f` at `x`.
pub fn compare<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<PointCheck>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    crate::error::check_dim("analytic gradient", x.len(), analytic.len())?;
    let f0 = f(x)?;
    let (numeric, one_sided_gap): (Vec<f64>, Vec<f64>) = (0..x.len())
        .into_par_iter()
        .map(|k| {
            let mut probe = x.to_vec();
            probe[k] = x[k] + h;
            let up = f(&probe)?;
            probe[k] = x[k] - h;
            let down = f(&probe)?;
            Ok(((up - down) / (2.0 * h), ((up - f0) - (f0 - down)).abs() / h))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(SCALE_FLOOR, |acc, v| acc.max(v.abs()));
    let (mut worst_index, mut worst) = (0, 0.0);
    for k in 0..x.len() {
        let err = (analytic[k] - numeric[k]).abs();
        if err > worst || !err.is_finite() {
            worst = err;
            worst_index = k;
        }
    }
    let rel_error = worst / scale;
    Ok(PointCheck {
        rel_error: if rel_error.is_nan() { f64::INFINITY } else { rel_error },
        worst_index,
        analytic: analytic.get(worst_index).copied().unwrap_or(0.0),
        numeric: numeric.get(worst_index).copied().unwrap_or(0.0),
        kinked: rel_error > FD_TOLERANCE && one_sided_gap.get(worst_index).is_some_and(|g| *g >= worst),
    })
}

/// Aggregate over many random check points.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientSummary {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub worst: Option<PointCheck>,
    pub kinks_resampled: usize,
}

impl GradientSummary {
    pub fn passes(&self) -> bool {
        self.max_rel_error <= FD_TOLERANCE
    }
}

impl std::fmt::Display for GradientSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} points={:<4} max_rel_error={:.3e} resampled={}",
            self.name, self.points, self.max_rel_error, self.kinks_resampled
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " worst[{}] analytic={:.6e} numeric={:.6e}",
                w.worst_index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Run `check` on `points` random states, resampling kinked ones.
pub fn survey<F>(name: &str, points: usize, rng: &mut SeededRng, mut check: F) -> Result<GradientSummary>
where
    F: FnMut(&mut SeededRng) -> Result<PointCheck>,
{
    let mut summary = GradientSummary {
        name: name.to_string(),
        points: 0,
        max_rel_error: 0.0,
        worst: None,
        kinks_resampled: 0,
    };
    let budget = points.saturating_mul(MAX_ATTEMPTS_PER_POINT).max(1);
    let mut attempts = 0;
    while summary.points < points {
        if attempts == budget {
            return Err(Error::InvalidValue {
                field: format!("gradient check {name}"),
                reason: format!("only {} smooth points in {attempts} attempts", summary.points),
            });
        }
        attempts += 1;
        let pc = check(rng)?;
        if pc.kinked {
            summary.kinks_resampled += 1;
            continue;
        }
        summary.points += 1;
        if summary.worst.is_none() || pc.rel_error > summary.max_rel_error {
            summary.max_rel_error = pc.rel_error;
            summary.worst = Some(pc);
        }
    }
    Ok(summary)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_latent(bundle: &ModelBundle, rng: &mut SeededRng) -> LatentVector {
    LatentVector::from_vec_unchecked((0..bundle.latent_dim()).map(|_| rng.uniform(-3.0, 3.0)).collect())
}

/// A rendered image, perturbed on every other draw so off-manifold penalties
/// are exercised too.
fn random_image(bundle: &ModelBundle, rng: &mut SeededRng) -> Result<Image> {
    let mut img = bundle.generator.generate(&random_latent(bundle, rng))?;
    if rng.coin() {
        let sigma = rng.uniform(0.0, 0.1);
        img.as_mut_slice().iter_mut().for_each(|v| *v += sigma * rng.normal());
    }
    Ok(img)
}

fn as_image(like: &Image, pixels: &[f64]) -> Result<Image> {
    Image::new(like.height(), like.width(), pixels.to_vec())
}

/// Check every model VJP in the bundle against central differences of a
/// random linear functional of its output.
pub fn model_surveys(bundle: &ModelBundle, points: usize, rng: &mut SeededRng) -> Result<Vec<GradientSummary>> {
    let mut out = Vec::new();

    out.push(survey("generate", points, rng, |rng| {
        let z = random_latent(bundle, rng);
        let (h, w) = bundle.image_shape();
        let up = Image::new(h, w, rng.normal_vec(h * w))?;
        let analytic = bundle.generator.generate_vjp(&z, &up)?;
        compare(
            |x| Ok(dot(bundle.generator.generate(&LatentVector::new(x.to_vec())?)?.as_slice(), up.as_slice())),
            z.as_slice(),
            &analytic,
            FD_STEP,
        )
    })?);

    out.push(survey("regress", points, rng, |rng| {
        let img = random_image(bundle, rng)?;
        let up = rng.normal_vec(bundle.num_attributes());
        let analytic = bundle.regressor.regress_vjp(&img, &up)?;
        compare(
            |x| Ok(dot(bundle.regressor.regress(&as_image(&img, x)?)?.as_slice(), &up)),
            img.as_slice(),
            analytic.as_slice(),
            FD_STEP,
        )
    })?);

    out.push(survey("discriminate", points, rng, |rng| {
        let img = random_image(bundle, rng)?;
        let analytic = bundle.discriminator.discriminate_vjp(&img, 1.0)?;
        compare(
            |x| bundle.discriminator.discriminate(&as_image(&img, x)?),
            img.as_slice(),
            analytic.as_slice(),
            FD_STEP,
        )
    })?);

    out.push(survey("features", points, rng, |rng| {
        let img = random_image(bundle, rng)?;
        let up: Vec<FeatureMap> = bundle
            .features
            .features(&img)?
            .into_iter()
            .map(|m| FeatureMap {
                values: rng.normal_vec(m.values.len()),
                ..m
            })
            .collect();
        let analytic = bundle.features.features_vjp(&img, &up)?;
        compare(
            |x| {
                let f = bundle.features.features(&as_image(&img, x)?)?;
                Ok(f.iter().zip(&up).map(|(a, b)| dot(&a.values, &b.values)).sum())
            },
            img.as_slice(),
            analytic.as_slice(),
            FD_STEP,
        )
    })?);

    out.push(survey("embed_identity", points, rng, |rng| {
        let img = random_image(bundle, rng)?;
        let dim = bundle.identity.embed(&img)?.len();
        let up = rng.normal_vec(dim);
        let analytic = bundle.identity.embed_vjp(&img, &up)?;
        compare(
            |x| Ok(dot(&bundle.identity.embed(&as_image(&img, x)?)?, &up)),
            img.as_slice(),
            analytic.as_slice(),
            FD_STEP,
        )
    })?);

    Ok(out)
}

fn random_pyramid(rng: &mut SeededRng) -> Vec<FeatureMap> {
    [32usize, 16, 8, 4]
        .iter()
        .map(|&n| FeatureMap {
            height: n,
            width: n,
            values: (0..n * n).map(|_| rng.uniform(0.0, 1.0)).collect(),
        })
        .collect()
}

fn flatten(maps: &[FeatureMap]) -> Vec<f64> {
    maps.iter().flat_map(|m| m.values.iter().copied()).collect()
}

fn unflatten(like: &[FeatureMap], flat: &[f64]) -> Vec<FeatureMap> {
    let mut at = 0;
    like.iter()
        .map(|m| {
            let values = flat[at..at + m.values.len()].to_vec();
            at += m.values.len();
            FeatureMap { values, ..m.clone() }
        })
        .collect()
}

fn random_attributes(n: usize, rng: &mut SeededRng) -> AttributeVector {
    AttributeVector::new((0..n).map(|_| rng.uniform(0.0, 1.0)).collect()).expect("values in [0, 1]")
}

/// Check the loss terms and their weighted total on random inputs.
pub fn loss_surveys(points: usize, rng: &mut SeededRng) -> Result<Vec<GradientSummary>> {
    const N: usize = 3;
    let mut out = Vec::new();
    for (name, mode) in [("reg_loss", RegMode::Standard), ("reg_loss_swapped", RegMode::Swapped)] {
        out.push(survey(name, points, rng, |rng| {
            let target = random_attributes(N, rng);
            let pred: Vec<f64> = (0..N).map(|_| rng.uniform(0.01, 0.99)).collect();
            let (_, analytic) = reg_loss(&AttributeVector::new(pred.clone())?, &target, mode)?;
            compare(
                |x| Ok(reg_loss(&AttributeVector::new(x.to_vec())?, &target, mode)?.0),
                &pred,
                &analytic,
                FD_STEP,
            )
        })?);
    }
    out.push(survey("disc_loss", points, rng, |rng| {
        let score = rng.uniform(0.01, 0.99);
        compare(|x| Ok(disc_loss(x[0]).0), &[score], &[disc_loss(score).1], FD_STEP)
    })?);
    out.push(survey("content_loss", points, rng, |rng| {
        let original = random_pyramid(rng);
        let edited = random_pyramid(rng);
        let (_, grad) = content_loss(&edited, &original)?;
        compare(
            |x| Ok(content_loss(&unflatten(&edited, x), &original)?.0),
            &flatten(&edited),
            &flatten(&grad),
            FD_STEP,
        )
    })?);
    out.push(survey("total_loss", points, rng, |rng| {
        let target = random_attributes(N, rng);
        let original = random_pyramid(rng);
        let edited = random_pyramid(rng);
        let weights = LossWeights {
            reg: rng.uniform(0.0, 10.0),
            disc: rng.uniform(0.0, 1.0),
            content: rng.uniform(0.0, 1.0),
        };
        let mut x: Vec<f64> = (0..N).map(|_| rng.uniform(0.01, 0.99)).collect();
        x.push(rng.uniform(0.01, 0.99));
        x.extend(flatten(&edited));
        let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let terms = LossTerms::compute(
                &AttributeVector::new(x[..N].to_vec())?,
                &target,
                x[N],
                &unflatten(&edited, &x[N + 1..]),
                &original,
                RegMode::Standard,
            )?;
            let (b, g) = total_loss(&terms, &weights);
            let mut flat = g.attributes;
            flat.push(g.score);
            flat.extend(flatten(&g.features));
            Ok((b.total, flat))
        };
        let (_, analytic) = eval(&x)?;
        compare(|v| Ok(eval(v)?.0), &x, &analytic, FD_STEP)
    })?);
    Ok(out)
}
