//! The training loop: sample latents and shifts, edit, score the edited image
//! against the frozen bundle, and update only the direction module.
//!
//! Each batch element draws from its own substream keyed by
//! `(iteration, batch index)`, so runs are reproducible regardless of how many
//! worker threads evaluate the batch.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{compare, survey, GradientSummary, FD_STEP};
use crate::image::{Features, Image};
use crate::latent::{sample_epsilon, AttributeVector, EditDelta, LatentEditor, LatentVector};
use crate::losses::{total_loss, LossBreakdown, LossTerms, LossWeights, RegMode};
use crate::models::ModelBundle;
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::rng::SeededRng;
use crate::transforms::{TransformKind, TransformModule};

/// Substream key reserved for parameter initialization.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Shift every attribute at once.
    #[default]
    Joint,
    /// Shift only the given attribute; the others get `δ = 0`.
    Single(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub sampling: SamplingMode,
    pub weights: LossWeights,
    pub reg_mode: RegMode,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations; 0 disables.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            optimizer: AdamConfig::default(),
            sampling: SamplingMode::Joint,
            weights: LossWeights::default(),
            reg_mode: RegMode::Standard,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Settings that converge on the toy world within the default 2000
    /// iterations: a larger step size, a content weight scaled down for the
    /// summed (not averaged) pixel-pyramid distance, and global-norm clipping.
    /// The size readout divides by the disk/background contrast, so a few
    /// samples carry huge gradients; without clipping they leak into the
    /// other directions.
    pub fn toy() -> Self {
        Self {
            optimizer: AdamConfig {
                learning_rate: 5e-2,
                grad_clip: Some(0.1),
                ..AdamConfig::default()
            },
            weights: LossWeights {
                reg: 10.0,
                disc: 0.05,
                content: 5e-4,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self, num_attributes: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config {
                field: "batch_size".into(),
                reason: "must be at least 1".into(),
            });
        }
        if let SamplingMode::Single(i) = self.sampling {
            if i >= num_attributes {
                return Err(Error::Config {
                    field: "sampling.single".into(),
                    reason: format!("attribute {i} out of range for {num_attributes} attributes"),
                });
            }
        }
        self.optimizer.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field: format!("optimizer.{field}"),
                reason,
            },
            other => other,
        })?;
        self.weights.validate()
    }
}

/// One training example: a latent, its measured attributes, and a shift.
#[derive(Clone, Debug)]
pub struct Sample {
    pub z: LatentVector,
    pub image: Image,
    pub alpha: AttributeVector,
    pub epsilon: Vec<f64>,
    pub delta: EditDelta,
}

impl Sample {
    pub fn draw(bundle: &ModelBundle, sampling: SamplingMode, rng: &mut SeededRng) -> Result<Self> {
        let z = LatentVector::sample_prior(bundle.latent_dim(), rng);
        let image = bundle.generator.generate(&z)?;
        let alpha = bundle.regressor.regress(&image)?;
        let (epsilon, delta) = sample_epsilon(&alpha, rng);
        let delta = match sampling {
            SamplingMode::Joint => delta,
            SamplingMode::Single(i) => delta.restricted_to(i),
        };
        Ok(Self {
            z,
            image,
            alpha,
            epsilon,
            delta,
        })
    }

    /// Pseudo ground truth `α′ = α + δ`.
    pub fn target(&self) -> AttributeVector {
        self.alpha.shifted(&self.delta)
    }
}

/// Samples of iteration `iteration`, one substream per batch element.
pub fn draw_batch(
    bundle: &ModelBundle,
    cfg: &TrainConfig,
    base: &SeededRng,
    iteration: u64,
) -> Result<Vec<Sample>> {
    (0..cfg.batch_size)
        .into_par_iter()
        .map(|b| {
            let mut rng = base.substream(&[iteration, b as u64]);
            Sample::draw(bundle, cfg.sampling, &mut rng)
        })
        .collect()
}

struct Forward {
    edited_latent: LatentVector,
    edited: Image,
    terms: LossTerms,
}

fn forward<E: LatentEditor + ?Sized>(
    editor: &E,
    bundle: &ModelBundle,
    sample: &Sample,
    original_features: &Features,
    mode: RegMode,
) -> Result<Forward> {
    let edited_latent = editor.edit(&sample.z, &sample.delta)?;
    let edited = bundle.generator.generate(&edited_latent)?;
    let alpha_hat = bundle.regressor.regress(&edited)?;
    let score = bundle.discriminator.discriminate(&edited)?;
    let feats = bundle.features.features(&edited)?;
    let terms = LossTerms::compute(&alpha_hat, &sample.target(), score, &feats, original_features, mode)?;
    Ok(Forward {
        edited_latent,
        edited,
        terms,
    })
}

/// Loss of one sample under any editor, without gradients.
pub fn sample_loss<E: LatentEditor + ?Sized>(
    editor: &E,
    bundle: &ModelBundle,
    sample: &Sample,
    weights: &LossWeights,
    mode: RegMode,
) -> Result<LossBreakdown> {
    let original = bundle.features.features(&sample.image)?;
    let f = forward(editor, bundle, sample, &original, mode)?;
    Ok(total_loss(&f.terms, weights).0)
}

/// Loss of one sample and its gradient with respect to the parameters of `t`.
pub fn sample_gradient(
    t: &TransformModule,
    bundle: &ModelBundle,
    sample: &Sample,
    weights: &LossWeights,
    mode: RegMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let original = bundle.features.features(&sample.image)?;
    let f = forward(t, bundle, sample, &original, mode)?;
    let (breakdown, g) = total_loss(&f.terms, weights);
    let (h, w) = f.edited.shape();
    let mut g_img = Image::filled(h, w, 0.0);
    let mut add = |img: Image| {
        for (a, b) in g_img.as_mut_slice().iter_mut().zip(img.as_slice()) {
            *a += b;
        }
    };
    if weights.reg != 0.0 {
        add(bundle.regressor.regress_vjp(&f.edited, &g.attributes)?);
    }
    if weights.disc != 0.0 {
        add(bundle.discriminator.discriminate_vjp(&f.edited, g.score)?);
    }
    if weights.content != 0.0 {
        add(bundle.features.features_vjp(&f.edited, &g.features)?);
    }
    let g_latent = bundle.generator.generate_vjp(&f.edited_latent, &g_img)?;
    let grad = t.vjp(&sample.z, &sample.delta, &g_latent)?.params;
    Ok((breakdown, grad))
}

/// Batch-mean loss and gradient.
pub fn batch_gradient(
    t: &TransformModule,
    bundle: &ModelBundle,
    batch: &[Sample],
    weights: &LossWeights,
    mode: RegMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let per: Vec<(LossBreakdown, Vec<f64>)> = batch
        .par_iter()
        .map(|s| sample_gradient(t, bundle, s, weights, mode))
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    let mut grad = vec![0.0; t.params().len()];
    for (_, g) in &per {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / n;
        }
    }
    let losses: Vec<LossBreakdown> = per.into_iter().map(|(l, _)| l).collect();
    Ok((LossBreakdown::mean(&losses).unwrap_or_default(), grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub loss: LossBreakdown,
    /// Seconds since training started.
    pub elapsed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iterations: Vec<IterationRecord>,
    pub checkpoints: Vec<String>,
}

impl TrainRecord {
    pub fn losses(&self) -> Vec<LossBreakdown> {
        self.iterations.iter().map(|r| r.loss).collect()
    }

    /// `iteration,reg,disc,content,total` with one row per iteration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,reg,disc,content,total\n");
        for r in &self.iterations {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.loss.reg, r.loss.disc, r.loss.content, r.loss.total
            ));
        }
        out
    }
}

/// Progress line printed after each iteration.
pub fn progress_line(iteration: u64, loss: &LossBreakdown) -> String {
    format!(
        "iter={iteration} reg={:.6} disc={:.6} content={:.6} total={:.6}",
        loss.reg, loss.disc, loss.content, loss.total
    )
}

/// Hooks called by [`Trainer::run`].
pub trait TrainObserver {
    fn on_iteration(&mut self, _record: &IterationRecord) -> Result<()> {
        Ok(())
    }

    /// Persist a checkpoint and return its id.
    fn on_checkpoint(&mut self, _trainer: &Trainer) -> Result<Option<String>> {
        Ok(None)
    }
}

/// Observer that does nothing.
pub struct Silent;

impl TrainObserver for Silent {}

/// Owns the transform and optimizer for the duration of training.
pub struct Trainer {
    config: TrainConfig,
    bundle: ModelBundle,
    transform: TransformModule,
    optimizer: Adam,
    rng: SeededRng,
    iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, bundle: ModelBundle, transform: TransformModule) -> Result<Self> {
        config.validate(bundle.num_attributes())?;
        check_compatible(&transform, &bundle)?;
        let optimizer = Adam::new(config.optimizer, transform.params().len())?;
        let rng = SeededRng::new(config.seed);
        Ok(Self {
            config,
            bundle,
            transform,
            optimizer,
            rng,
            iteration: 0,
        })
    }

    /// Fresh transform of `kind` initialized from the config seed.
    pub fn init_transform(config: &TrainConfig, bundle: &ModelBundle, kind: TransformKind) -> Result<TransformModule> {
        let mut rng = SeededRng::new(config.seed).substream(&[INIT_STREAM]);
        TransformModule::init(kind, bundle.latent_dim(), bundle.num_attributes(), &mut rng)
    }

    /// Continue from saved optimizer state after `iteration` completed steps.
    pub fn resume(
        config: TrainConfig,
        bundle: ModelBundle,
        transform: TransformModule,
        optimizer: AdamState,
        iteration: u64,
    ) -> Result<Self> {
        let mut t = Self::new(config, bundle, transform)?;
        t.optimizer = Adam::from_state(t.config.optimizer, optimizer)?;
        crate::error::check_dim("optimizer state", t.transform.params().len(), t.optimizer.state().m.len())?;
        t.iteration = iteration;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn transform(&self) -> &TransformModule {
        &self.transform
    }

    pub fn into_transform(self) -> TransformModule {
        self.transform
    }

    pub fn optimizer_state(&self) -> &AdamState {
        self.optimizer.state()
    }

    pub fn rng(&self) -> &SeededRng {
        &self.rng
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// One optimization step over a fresh batch.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = draw_batch(&self.bundle, &self.config, &self.rng, self.iteration)?;
        let next = self.iteration + 1;
        // Parameters large enough to push an edited latent to infinity are
        // divergence too, not a bad input.
        let (loss, grad) = batch_gradient(
            &self.transform,
            &self.bundle,
            &batch,
            &self.config.weights,
            self.config.reg_mode,
        )
        .map_err(|e| match e {
            Error::InvalidValue { reason, .. } if reason == crate::latent::NON_FINITE => {
                Error::Divergence { iteration: next }
            }
            e => e,
        })?;
        self.iteration = next;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.iteration,
            });
        }
        self.optimizer.update(self.transform.params_mut(), &grad)?;
        Ok(loss)
    }

    /// Run until `config.iterations` steps have completed.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<TrainRecord> {
        let start = Instant::now();
        let mut record = TrainRecord::default();
        while self.iteration < self.config.iterations {
            let loss = self.step()?;
            let r = IterationRecord {
                iteration: self.iteration,
                loss,
                elapsed: start.elapsed().as_secs_f64(),
            };
            observer.on_iteration(&r)?;
            record.iterations.push(r);
            let every = self.config.checkpoint_interval;
            if every > 0 && self.iteration.is_multiple_of(every) {
                if let Some(id) = observer.on_checkpoint(self)? {
                    record.checkpoints.push(id);
                }
            }
        }
        Ok(record)
    }
}

fn check_compatible(t: &TransformModule, bundle: &ModelBundle) -> Result<()> {
    crate::error::check_dim("transform latent dim", bundle.latent_dim(), t.latent_dim())?;
    crate::error::check_dim("transform attributes", bundle.num_attributes(), t.num_attributes())
}

/// Initialize a transform of `kind` and train it.
pub fn train(
    config: TrainConfig,
    bundle: ModelBundle,
    kind: TransformKind,
    observer: &mut dyn TrainObserver,
) -> Result<(TransformModule, TrainRecord)> {
    let t = Trainer::init_transform(&config, &bundle, kind)?;
    let mut trainer = Trainer::new(config, bundle, t)?;
    let record = trainer.run(observer)?;
    Ok((trainer.into_transform(), record))
}

/// Directions trained one attribute at a time: direction `i` comes from the
/// module trained in `Single(i)` mode.
#[derive(Clone, Debug, PartialEq)]
pub struct PerAttributeEditor {
    modules: Vec<TransformModule>,
}

impl PerAttributeEditor {
    pub fn new(modules: Vec<TransformModule>) -> Result<Self> {
        let first = modules.first().ok_or_else(|| Error::InvalidValue {
            field: "modules".into(),
            reason: "need one module per attribute".into(),
        })?;
        for t in &modules {
            crate::error::check_dim("module latent dim", first.latent_dim(), t.latent_dim())?;
            crate::error::check_dim("module attributes", modules.len(), t.num_attributes())?;
        }
        Ok(Self { modules })
    }

    pub fn modules(&self) -> &[TransformModule] {
        &self.modules
    }
}

impl LatentEditor for PerAttributeEditor {
    fn latent_dim(&self) -> usize {
        self.modules[0].latent_dim()
    }

    fn num_attributes(&self) -> usize {
        self.modules.len()
    }

    fn edit(&self, z: &LatentVector, delta: &EditDelta) -> Result<LatentVector> {
        crate::error::check_dim("delta", self.modules.len(), delta.len())?;
        let mut out = z.as_slice().to_vec();
        for (i, (t, &d)) in self.modules.iter().zip(delta.as_slice()).enumerate() {
            if d == 0.0 {
                continue;
            }
            let dirs = t.directions(z)?;
            for (o, v) in out.iter_mut().zip(dirs.column(i)) {
                *o += d * v;
            }
        }
        LatentVector::new(out)
    }
}

/// Train one module per attribute in single mode, all from the same seed.
pub fn train_single_mode(
    config: &TrainConfig,
    bundle: &ModelBundle,
    kind: TransformKind,
    observer: &mut dyn TrainObserver,
) -> Result<(PerAttributeEditor, Vec<TrainRecord>)> {
    let mut modules = Vec::new();
    let mut records = Vec::new();
    for i in 0..bundle.num_attributes() {
        let cfg = TrainConfig {
            sampling: SamplingMode::Single(i),
            ..config.clone()
        };
        let (t, r) = train(cfg, bundle.clone(), kind, observer)?;
        modules.push(t);
        records.push(r);
    }
    Ok((PerAttributeEditor::new(modules)?, records))
}

/// End-to-end finite-difference audit of `d(total)/d(T params)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    /// One survey per loss term (its weight alone) and one for the total.
    pub terms: Vec<GradientSummary>,
    pub max_rel_error: f64,
}

impl AuditReport {
    pub fn passes(&self) -> bool {
        self.terms.iter().all(GradientSummary::passes)
    }

    /// The survey with the largest error.
    pub fn worst(&self) -> Option<&GradientSummary> {
        self.terms
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl std::fmt::Display for AuditReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in &self.terms {
            writeln!(f, "{t}")?;
        }
        write!(f, "max_rel_error={:.3e}", self.max_rel_error)
    }
}

/// Which end-to-end losses [`gradient_audit`] differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditScope {
    /// Only the weighted total.
    #[default]
    Total,
    /// Each weighted term on its own, then the total.
    ByTerm,
}

pub fn gradient_audit(
    bundle: &ModelBundle,
    t: &TransformModule,
    n_points: usize,
    weights: &LossWeights,
    mode: RegMode,
    scope: AuditScope,
    rng: &mut SeededRng,
) -> Result<AuditReport> {
    check_compatible(t, bundle)?;
    let mut splits = Vec::new();
    if scope == AuditScope::ByTerm {
        splits.push(("end_to_end_reg", LossWeights { disc: 0.0, content: 0.0, ..*weights }));
        splits.push(("end_to_end_disc", LossWeights { reg: 0.0, content: 0.0, ..*weights }));
        splits.push(("end_to_end_content", LossWeights { reg: 0.0, disc: 0.0, ..*weights }));
    }
    splits.push(("end_to_end_total", *weights));
    let mut terms = Vec::new();
    for (name, w) in splits {
        terms.push(survey(name, n_points, rng, |rng| {
            let sample = Sample::draw(bundle, SamplingMode::Joint, rng)?;
            let (_, analytic) = sample_gradient(t, bundle, &sample, &w, mode)?;
            compare(
                |x| {
                    let mut probe = t.clone();
                    probe.params_mut().copy_from_slice(x);
                    Ok(sample_loss(&probe, bundle, &sample, &w, mode)?.total)
                },
                t.params(),
                &analytic,
                FD_STEP,
            )
        })?);
    }
    let max_rel_error = terms.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
    Ok(AuditReport { terms, max_rel_error })
}
