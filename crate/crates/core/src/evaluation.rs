//! Evaluation: controllability probes, leakage and identity binned by the
//! measured edit magnitude, direction selection for unlabeled banks, and
//! paired-image export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::image::Image;
use crate::latent::{AttributeVector, EditDelta, LatentEditor, LatentVector};
use crate::models::ModelBundle;
use crate::rng::SeededRng;
use crate::transforms::TransformModule;

/// Requested magnitudes for leakage reports are drawn from `±(LO, HI)`.
pub const DELTA_RANGE: (f64, f64) = (0.05, 0.95);

/// Shift used by [`emit_pair_study`].
pub const PAIR_DELTA: f64 = 0.4;

/// Label written into report metadata describing how shifts were requested.
pub const DELTA_SCHEDULE: &str = "stratified-uniform +-(0.05, 0.95), alternating sign";

/// Cosine of identity embeddings.
pub fn identity_similarity(a: &Image, b: &Image, bundle: &ModelBundle) -> Result<f64> {
    bundle.identity_similarity(a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub samples: usize,
    /// Mean `|α̂′_t − α′_t|` over all probe samples.
    pub error: f64,
    /// The same error restricted to samples targeting each attribute.
    pub per_attribute: Vec<f64>,
}

/// Held-out controllability probe.
///
/// Sample `k` targets attribute `k mod N`: it draws `ε ~ U[-1, 1]`, clips it
/// against the measured attributes, shifts only the target, and scores
/// `|R(G(z′))_t − (α_t + δ_t)|`.
pub fn controllability<E: LatentEditor + ?Sized>(
    editor: &E,
    bundle: &ModelBundle,
    samples: usize,
    rng: &SeededRng,
) -> Result<ProbeReport> {
    probe(editor, bundle, samples, rng, false)
}

/// Like [`controllability`], but every attribute is shifted at once and the
/// error is averaged over all of them.
pub fn controllability_joint<E: LatentEditor + ?Sized>(
    editor: &E,
    bundle: &ModelBundle,
    samples: usize,
    rng: &SeededRng,
) -> Result<ProbeReport> {
    probe(editor, bundle, samples, rng, true)
}

fn probe<E: LatentEditor + ?Sized>(
    editor: &E,
    bundle: &ModelBundle,
    samples: usize,
    rng: &SeededRng,
    joint: bool,
) -> Result<ProbeReport> {
    let n = bundle.num_attributes();
    let errors: Vec<Vec<(usize, f64)>> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng.substream(&[k as u64]);
            let z = LatentVector::sample_prior(bundle.latent_dim(), &mut rng);
            let alpha = bundle.attributes_of(&z)?;
            let (_, delta) = crate::latent::sample_epsilon(&alpha, &mut rng);
            let target = k % n;
            let delta = if joint { delta } else { delta.restricted_to(target) };
            let edited = bundle.attributes_of(&editor.edit(&z, &delta)?)?;
            let goal = alpha.shifted(&delta);
            let err = |i: usize| (edited.as_slice()[i] - goal.as_slice()[i]).abs();
            Ok(if joint {
                (0..n).map(|i| (i, err(i))).collect()
            } else {
                vec![(target, err(target))]
            })
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (i, e) in errors.iter().flatten() {
        sum[*i] += e;
        count[*i] += 1;
    }
    let total: usize = count.iter().sum();
    Ok(ProbeReport {
        samples,
        error: sum.iter().sum::<f64>() / total.max(1) as f64,
        per_attribute: sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
    })
}

/// Half-open `|ε̂|` bins `(e_0, e_1], (e_1, e_2], …`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub edges: Vec<f64>,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            edges: vec![0.0, 0.3, 0.6, 0.9],
        }
    }
}

impl BinSpec {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        let b = Self { edges };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.len() < 2 {
            return Err(Error::Config {
                field: "bins.edges".into(),
                reason: "need at least two edges".into(),
            });
        }
        if self.edges.iter().any(|e| !e.is_finite()) || self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config {
                field: "bins.edges".into(),
                reason: format!("{:?} must be finite and strictly ascending", self.edges),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, bin: usize) -> String {
        format!("({}, {}]", self.edges[bin], self.edges[bin + 1])
    }

    /// Bin containing `x`, if any.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        self.edges.windows(2).position(|w| x > w[0] && x <= w[1])
    }

    /// Bin containing every value, if they share one.
    pub fn common_bin(&self, xs: &[f64]) -> Option<usize> {
        let first = self.bin_of(*xs.first()?)?;
        xs.iter().all(|&x| self.bin_of(x) == Some(first)).then_some(first)
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub targets: Vec<usize>,
    pub bin: usize,
    pub bin_label: String,
    /// `None` when fewer than two repeats put a sample in this bin.
    pub leakage: Option<Stat>,
    pub identity: Option<Stat>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attribute_names: Vec<String>,
    pub bins: BinSpec,
    pub n_images: usize,
    pub repeats: usize,
    pub delta_schedule: String,
    pub cells: Vec<ReportCell>,
}

impl EvalReport {
    pub fn cell(&self, targets: &[usize], bin: usize) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.targets == targets && c.bin == bin)
    }

    pub fn target_sets(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.targets) {
                out.push(c.targets.clone());
            }
        }
        out
    }

    /// Largest mean leakage over every reported cell.
    pub fn max_leakage(&self) -> Option<f64> {
        self.cells
            .iter()
            .filter_map(|c| c.leakage.map(|s| s.mean))
            .reduce(f64::max)
    }

    pub fn merge(mut self, other: EvalReport) -> Result<Self> {
        if self.bins != other.bins || self.attribute_names != other.attribute_names {
            return Err(Error::InvalidValue {
                field: "report".into(),
                reason: "bins or attributes differ".into(),
            });
        }
        self.cells.extend(other.cells);
        Ok(self)
    }

    fn set_name(&self, targets: &[usize]) -> String {
        targets
            .iter()
            .map(|&t| self.attribute_names.get(t).cloned().unwrap_or_else(|| t.to_string()))
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "targets,bin,leakage_mean,leakage_std,identity_mean,identity_std,count,repeats\n",
        );
        let f = |s: Option<Stat>| match s {
            Some(s) => (s.mean.to_string(), s.std.to_string()),
            None => (String::new(), String::new()),
        };
        for c in &self.cells {
            let (lm, ls) = f(c.leakage);
            let (im, is) = f(c.identity);
            let _ = writeln!(
                out,
                "{},\"{}\",{lm},{ls},{im},{is},{},{}",
                self.set_name(&c.targets),
                c.bin_label,
                c.count,
                self.repeats
            );
        }
        out
    }

    /// Two aligned tables, leakage then identity, one row per target set and
    /// one column per bin. Missing cells print as `-`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let labels: Vec<String> = (0..self.bins.len()).map(|b| self.bins.label(b)).collect();
        for (title, pick) in [
            ("leakage (mean abs change on non-target attributes)", 0),
            ("identity (cosine similarity)", 1),
        ] {
            let _ = writeln!(out, "{title}");
            let _ = write!(out, "{:<16}", "target");
            for l in &labels {
                let _ = write!(out, "{l:>20}");
            }
            out.push('\n');
            for set in self.target_sets() {
                let _ = write!(out, "{:<16}", self.set_name(&set));
                for b in 0..self.bins.len() {
                    let stat = self
                        .cell(&set, b)
                        .and_then(|c| if pick == 0 { c.leakage } else { c.identity });
                    let text = match stat {
                        Some(s) => format!("{:.3} ± {:.1e}", s.mean, s.std),
                        None => "-".into(),
                    };
                    let _ = write!(out, "{text:>20}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "images={} repeats={} deltas: {}",
            self.n_images, self.repeats, self.delta_schedule
        );
        out
    }
}

/// Requested magnitude for image `k` of `n`: one uniform draw per stratum.
fn stratified_magnitude(k: usize, n: usize, rng: &mut SeededRng) -> f64 {
    let (lo, hi) = DELTA_RANGE;
    let u = (k as f64 + rng.uniform(0.0, 1.0)) / n as f64;
    lo + (hi - lo) * u
}

struct Observation {
    bin: usize,
    leakage: f64,
    identity: f64,
}

fn observe<E: LatentEditor + ?Sized>(
    editor: &E,
    bundle: &ModelBundle,
    targets: &[usize],
    bins: &BinSpec,
    requested: &[f64],
    rng: &mut SeededRng,
) -> Result<Option<Observation>> {
    let z = LatentVector::sample_prior(bundle.latent_dim(), rng);
    let original = bundle.generator.generate(&z)?;
    let alpha = bundle.regressor.regress(&original)?;
    let delta = EditDelta::clipped(&alpha, requested)?;
    let edited = bundle.generator.generate(&editor.edit(&z, &delta)?)?;
    let after = bundle.regressor.regress(&edited)?;
    let change: Vec<f64> = after
        .as_slice()
        .iter()
        .zip(alpha.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let measured: Vec<f64> = targets.iter().map(|&t| change[t].abs()).collect();
    let Some(bin) = bins.common_bin(&measured) else {
        return Ok(None);
    };
    let others: Vec<f64> = (0..change.len())
        .filter(|i| !targets.contains(i))
        .map(|i| change[i].abs())
        .collect();
    let leakage = if others.is_empty() {
        0.0
    } else {
        others.iter().sum::<f64>() / others.len() as f64
    };
    Ok(Some(Observation {
        bin,
        leakage,
        identity: bundle.identity_similarity(&original, &edited)?,
    }))
}

/// Binned leakage and identity statistics for one target set.
///
/// Each repeat draws `n_images` latents, requests a stratified shift of the
/// same signed magnitude on every target, and bins the sample by the measured
/// change `|ε̂|` (all targets must land in the same bin). Cell statistics are
/// mean ± std of the per-repeat means.
pub fn leakage_report<E: LatentEditor + ?Sized>(
    editor: &E,
    bundle: &ModelBundle,
    targets: &[usize],
    bins: &BinSpec,
    n_images: usize,
    repeats: usize,
    rng: &SeededRng,
) -> Result<EvalReport> {
    bins.validate()?;
    let n = bundle.num_attributes();
    if n_images == 0 || repeats < 2 {
        return Err(Error::InvalidValue {
            field: "leakage_report".into(),
            reason: format!("need n_images >= 1 and repeats >= 2, got {n_images} and {repeats}"),
        });
    }
    if targets.is_empty() || targets.iter().any(|&t| t >= n) {
        return Err(Error::InvalidValue {
            field: "targets".into(),
            reason: format!("{targets:?} must be a nonempty subset of 0..{n}"),
        });
    }
    let requested_for = |k: usize, rng: &mut SeededRng| -> Vec<f64> {
        let mag = stratified_magnitude(k, n_images, rng);
        let signed = if k.is_multiple_of(2) { mag } else { -mag };
        (0..n).map(|i| if targets.contains(&i) { signed } else { 0.0 }).collect()
    };
    report_with(editor, bundle, targets, bins, n_images, repeats, rng, requested_for)
}

#[allow(clippy::too_many_arguments)]
fn report_with<E, F>(
    editor: &E,
    bundle: &ModelBundle,
    targets: &[usize],
    bins: &BinSpec,
    n_images: usize,
    repeats: usize,
    rng: &SeededRng,
    requested_for: F,
) -> Result<EvalReport>
where
    E: LatentEditor + ?Sized,
    F: Fn(usize, &mut SeededRng) -> Vec<f64> + Sync,
{
    let mut per_repeat: Vec<Vec<Vec<(f64, f64)>>> = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let obs: Vec<Option<Observation>> = (0..n_images)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng.substream(&[r as u64, k as u64]);
                let requested = requested_for(k, &mut rng);
                observe(editor, bundle, targets, bins, &requested, &mut rng)
            })
            .collect::<Result<_>>()?;
        let mut cells = vec![Vec::new(); bins.len()];
        for o in obs.into_iter().flatten() {
            cells[o.bin].push((o.leakage, o.identity));
        }
        per_repeat.push(cells);
    }
    let cells = (0..bins.len())
        .map(|b| {
            let filled: Vec<&Vec<(f64, f64)>> =
                per_repeat.iter().map(|c| &c[b]).filter(|c| !c.is_empty()).collect();
            let count = filled.iter().map(|c| c.len()).sum();
            let mean_of = |pick: fn(&(f64, f64)) -> f64| -> Option<Stat> {
                (filled.len() >= 2).then(|| {
                    let means: Vec<f64> = filled
                        .iter()
                        .map(|c| c.iter().map(pick).sum::<f64>() / c.len() as f64)
                        .collect();
                    Stat::of(&means)
                })
            };
            ReportCell {
                targets: targets.to_vec(),
                bin: b,
                bin_label: bins.label(b),
                leakage: mean_of(|o| o.0),
                identity: mean_of(|o| o.1),
                count,
            }
        })
        .collect();
    Ok(EvalReport {
        attribute_names: bundle.regressor.attribute_names(),
        bins: bins.clone(),
        n_images,
        repeats,
        delta_schedule: DELTA_SCHEDULE.into(),
        cells,
    })
}

/// Report covering each attribute as a single target.
pub fn full_report<E: LatentEditor + ?Sized>(
    editor: &E,
    bundle: &ModelBundle,
    bins: &BinSpec,
    n_images: usize,
    repeats: usize,
    rng: &SeededRng,
) -> Result<EvalReport> {
    let mut report: Option<EvalReport> = None;
    for t in 0..bundle.num_attributes() {
        let r = leakage_report(editor, bundle, &[t], bins, n_images, repeats, &rng.substream(&[t as u64]))?;
        report = Some(match report {
            None => r,
            Some(acc) => acc.merge(r)?,
        });
    }
    report.ok_or_else(|| Error::InvalidValue {
        field: "bundle".into(),
        reason: "no attributes".into(),
    })
}

/// A set of candidate directions, possibly depending on `z`.
pub trait CandidateBank: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn direction(&self, index: usize, z: &LatentVector) -> Result<Vec<f64>>;
}

impl CandidateBank for [Vec<f64>] {
    fn len(&self) -> usize {
        <[Vec<f64>]>::len(self)
    }

    fn direction(&self, index: usize, z: &LatentVector) -> Result<Vec<f64>> {
        let d = &self[index];
        check_dim("candidate", z.dim(), d.len())?;
        Ok(d.clone())
    }
}

impl CandidateBank for Vec<Vec<f64>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn direction(&self, index: usize, z: &LatentVector) -> Result<Vec<f64>> {
        self.as_slice().direction(index, z)
    }
}

/// Every direction of a transform, in attribute order.
impl CandidateBank for TransformModule {
    fn len(&self) -> usize {
        self.num_attributes()
    }

    fn direction(&self, index: usize, z: &LatentVector) -> Result<Vec<f64>> {
        Ok(self.directions(z)?.column(index).to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Chosen candidate per attribute.
    pub chosen: Vec<usize>,
    /// `responses[k][i]`: mean `|ΔR_i|` of candidate `k`.
    pub responses: Vec<Vec<f64>>,
}

/// Pick, for each attribute, the candidate with the largest mean absolute
/// regressor response when latents move by `z + s·d` for every degree `s`.
/// Ties go to the lowest index.
pub fn select_directions<B: CandidateBank + ?Sized>(
    candidates: &B,
    bundle: &ModelBundle,
    n_images: usize,
    degrees: &[f64],
    rng: &SeededRng,
) -> Result<Selection> {
    if candidates.is_empty() || degrees.is_empty() || n_images == 0 {
        return Err(Error::InvalidValue {
            field: "select_directions".into(),
            reason: "need at least one candidate, degree, and image".into(),
        });
    }
    let n = bundle.num_attributes();
    let per_image: Vec<Vec<Vec<f64>>> = (0..n_images)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng.substream(&[k as u64]);
            let z = LatentVector::sample_prior(bundle.latent_dim(), &mut rng);
            let base = bundle.attributes_of(&z)?;
            (0..candidates.len())
                .map(|c| {
                    let d = candidates.direction(c, &z)?;
                    let mut acc = vec![0.0; n];
                    for &s in degrees {
                        let moved: Vec<f64> = z.as_slice().iter().zip(&d).map(|(a, b)| a + s * b).collect();
                        let after = bundle.attributes_of(&LatentVector::new(moved)?)?;
                        for (i, a) in acc.iter_mut().enumerate() {
                            *a += (after.as_slice()[i] - base.as_slice()[i]).abs();
                        }
                    }
                    Ok(acc)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let scale = (n_images * degrees.len()) as f64;
    let mut responses = vec![vec![0.0; n]; candidates.len()];
    for img in &per_image {
        for (c, acc) in img.iter().enumerate() {
            for i in 0..n {
                responses[c][i] += acc[i] / scale;
            }
        }
    }
    let chosen = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..responses.len() {
                if responses[c][i] > responses[best][i] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(Selection { chosen, responses })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub z: LatentVector,
    pub alpha: AttributeVector,
    pub plus: Image,
    pub minus: Image,
    pub alpha_plus: AttributeVector,
    pub alpha_minus: AttributeVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairStudy {
    pub attribute: usize,
    pub pairs: Vec<ImagePair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifestEntry {
    pub pair: usize,
    pub plus: String,
    pub minus: String,
    pub alpha: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub attribute: usize,
    pub delta: f64,
    pub files: Vec<String>,
    pub pairs: Vec<PairManifestEntry>,
}

impl PairStudy {
    pub fn manifest(&self) -> PairManifest {
        let a = self.attribute;
        let pairs: Vec<PairManifestEntry> = self
            .pairs
            .iter()
            .enumerate()
            .map(|(k, p)| PairManifestEntry {
                pair: k,
                plus: format!("pair_{k:04}_plus.png"),
                minus: format!("pair_{k:04}_minus.png"),
                alpha: p.alpha.as_slice()[a],
                alpha_plus: p.alpha_plus.as_slice()[a],
                alpha_minus: p.alpha_minus.as_slice()[a],
            })
            .collect();
        PairManifest {
            attribute: a,
            delta: PAIR_DELTA,
            files: pairs.iter().flat_map(|p| [p.plus.clone(), p.minus.clone()]).collect(),
            pairs,
        }
    }

    /// Write every PNG and `manifest.json` into `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for (p, entry) in self.pairs.iter().zip(&manifest.pairs) {
            crate::persist::write_atomic(&dir.join(&entry.plus), &p.plus.to_png()?)?;
            crate::persist::write_atomic(&dir.join(&entry.minus), &p.minus.to_png()?)?;
        }
        let path = dir.join("manifest.json");
        crate::persist::write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(path)
    }
}

/// Pairs `(I+, I−)` edited by `±0.4` on one attribute, clipped as usual.
pub fn emit_pair_study<E: LatentEditor + ?Sized>(
    editor: &E,
    bundle: &ModelBundle,
    attribute: usize,
    n_pairs: usize,
    rng: &SeededRng,
) -> Result<PairStudy> {
    let n = bundle.num_attributes();
    if n_pairs == 0 {
        return Err(Error::InvalidValue {
            field: "n_pairs".into(),
            reason: "must be at least 1".into(),
        });
    }
    if attribute >= n {
        return Err(Error::InvalidValue {
            field: "attribute".into(),
            reason: format!("{attribute} out of range for {n} attributes"),
        });
    }
    let pairs = (0..n_pairs)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng.substream(&[k as u64]);
            let z = LatentVector::sample_prior(bundle.latent_dim(), &mut rng);
            let alpha = bundle.attributes_of(&z)?;
            let render = |sign: f64| -> Result<(Image, AttributeVector)> {
                let mut req = vec![0.0; n];
                req[attribute] = sign * PAIR_DELTA;
                let delta = EditDelta::clipped(&alpha, &req)?;
                let img = bundle.generator.generate(&editor.edit(&z, &delta)?)?;
                let a = bundle.regressor.regress(&img)?;
                Ok((img, a))
            };
            let (plus, alpha_plus) = render(1.0)?;
            let (minus, alpha_minus) = render(-1.0)?;
            Ok(ImagePair {
                z,
                alpha,
                plus,
                minus,
                alpha_plus,
                alpha_minus,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PairStudy { attribute, pairs })
}
