//! Shared fixtures for the benchmarks.

use latent_steer::trainer::draw_batch;
use latent_steer::trainer::Sample;
use latent_steer::*;

pub fn bundle() -> ModelBundle {
    ModelBundle::toy(ToyConfig::default()).expect("default toy world is valid")
}

/// A freshly initialized transform of `kind` sized for the toy world.
pub fn transform(kind: TransformKind) -> TransformModule {
    let b = bundle();
    TransformModule::init(kind, b.latent_dim(), b.num_attributes(), &mut SeededRng::new(7)).expect("valid dims")
}

pub fn latents(n: usize) -> Vec<LatentVector> {
    let mut rng = SeededRng::new(11);
    (0..n).map(|_| LatentVector::sample_prior(8, &mut rng)).collect()
}

/// One training batch under the toy preset.
pub fn batch(bundle: &ModelBundle) -> Vec<Sample> {
    draw_batch(bundle, &TrainConfig::toy(), &SeededRng::new(3), 0).expect("batch draws")
}
