//! End-to-end workflows: resuming from checkpoint files, training trends, and
//! editing inverted images.

use std::sync::OnceLock;

use latent_steer::persist::{Checkpoint, RunConfig};
use latent_steer::trainer::{Silent, TrainObserver};
use latent_steer::*;

fn bundle() -> ModelBundle {
    ModelBundle::toy(ToyConfig::default()).unwrap()
}

fn trained() -> &'static TransformModule {
    static CELL: OnceLock<TransformModule> = OnceLock::new();
    CELL.get_or_init(|| train(TrainConfig::toy(), bundle(), TransformKind::GlobalLinear, &mut Silent).unwrap().0)
}

/// Saves every checkpoint the trainer offers, with everything needed to resume.
struct Saver {
    dir: std::path::PathBuf,
    run: RunConfig,
}

impl TrainObserver for Saver {
    fn on_checkpoint(&mut self, t: &Trainer) -> Result<Option<String>> {
        let name = format!("iter_{:06}.json", t.iteration());
        Checkpoint::for_transform(t.transform())
            .with_optimizer(t.optimizer_state())
            .with_config(&self.run)
            .with_rng(t.rng().state())
            .with_iteration(t.iteration())
            .save(&self.dir.join(&name))?;
        Ok(Some(name))
    }
}

#[test]
fn resuming_from_a_checkpoint_file_continues_the_same_trajectory() {
    let run = RunConfig {
        train: TrainConfig {
            iterations: 60,
            checkpoint_interval: 25,
            ..TrainConfig::toy()
        },
        seed: 17,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut saver = Saver {
        dir: dir.path().to_path_buf(),
        run: run.clone(),
    };
    let b = run.bundle().unwrap();
    let cfg = run.train_config();
    let init = Trainer::init_transform(&cfg, &b, TransformKind::LocalLinear).unwrap();
    let mut full = Trainer::new(cfg, b, init).unwrap();
    let record = full.run(&mut saver).unwrap();
    assert_eq!(record.checkpoints, ["iter_000025.json", "iter_000050.json"]);

    let ckpt = Checkpoint::load(&dir.path().join("iter_000025.json")).unwrap();
    let snapshot = ckpt.config.clone().unwrap();
    let mut resumed = Trainer::resume(
        snapshot.train_config(),
        snapshot.bundle().unwrap(),
        ckpt.transform().unwrap(),
        ckpt.optimizer_state().unwrap().unwrap(),
        ckpt.iteration,
    )
    .unwrap();
    assert_eq!(resumed.rng().state(), ckpt.rng.unwrap());
    let tail = resumed.run(&mut Silent).unwrap();
    let expected: Vec<u64> = record.losses()[25..].iter().map(|l| l.total.to_bits()).collect();
    let got: Vec<u64> = tail.losses().iter().map(|l| l.total.to_bits()).collect();
    assert_eq!(got, expected);
    assert_eq!(resumed.transform(), full.transform());
}

#[test]
fn reg_moving_average_trends_down_over_first_1000_iterations() {
    let cfg = TrainConfig {
        iterations: 1000,
        ..TrainConfig::toy()
    };
    let (_, record) = train(cfg, bundle(), TransformKind::GlobalLinear, &mut Silent).unwrap();
    let reg: Vec<f64> = record.losses().iter().map(|l| l.reg).collect();
    let avg: Vec<f64> = reg.windows(100).map(|w| w.iter().sum::<f64>() / 100.0).collect();
    let violations = avg.windows(2).filter(|w| w[1] > w[0]).count();
    let allowed = (avg.len() - 1) / 20;
    assert!(
        violations <= allowed,
        "{violations} of {} windows increase (allowed {allowed})",
        avg.len() - 1
    );
}

/// 20 toy targets, each inverted with 500 and with 4000 steps, then edited.
#[test]
fn better_inversion_gives_no_worse_edits() {
    let b = bundle();
    let t = trained();
    let mut rng = SeededRng::new(430);
    let (mut short_sum, mut long_sum) = (0.0, 0.0);
    for k in 0..20u64 {
        let target = b.generator.generate(&LatentVector::sample_prior(8, &mut rng)).unwrap();
        let requested = [rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)];
        let run = |steps| {
            let cfg = InversionConfig {
                steps,
                ..InversionConfig::default()
            };
            invert_then_edit(&target, &b, t, &requested, &cfg, &SeededRng::new(k)).unwrap()
        };
        short_sum += run(500).report.identity;
        long_sum += run(4000).report.identity;
    }
    let (short, long) = (short_sum / 20.0, long_sum / 20.0);
    assert!(long >= short - 0.01, "4000-step {long} vs 500-step {short}");
}

/// Trained global-linear T: +0.3 on background after inversion should land
/// within ±0.07 of 0.3 on every target where the shift is not clipped.
#[test]
fn inverted_background_edit_lands_within_tolerance() {
    let b = bundle();
    let t = trained();
    let mut rng = SeededRng::new(427);
    let mut misses = Vec::new();
    let mut checked = 0;
    while checked < 20 {
        let target = b.generator.generate(&LatentVector::sample_prior(8, &mut rng)).unwrap();
        let r = invert_then_edit(&target, &b, t, &[0.3, 0.0, 0.0], &InversionConfig::default(), &rng).unwrap();
        if r.report.applied_delta.as_slice()[0] != 0.3 {
            continue;
        }
        checked += 1;
        let change = r.report.attribute_change[0];
        if (change - 0.3).abs() > 0.07 {
            misses.push((r.report.attributes_before.as_slice()[0], change));
        }
    }
    assert!(misses.is_empty(), "{} of 20 targets miss (before, change): {misses:.3?}", misses.len());
}
