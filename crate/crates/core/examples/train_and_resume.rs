//! Train a small model, checkpoint halfway, resume, and confirm the resumed
//! run lands on the same parameters as the uninterrupted one.
//!
//! cargo run --release --example train_and_resume

use epl::checkpoint::{load_checkpoint, save_checkpoint};
use epl::data::{generate_synthetic, split, SyntheticSpec};
use epl::rng::Rng;
use epl::train::{metrics_csv, train_from, TrainConfig, TrainState};

fn main() -> epl::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec { num_classes: 20, samples_per_class: 50, ..SyntheticSpec::default() })?;
    let (train_set, test_set) = split(&ds, 0.2, &mut Rng::new(1))?;
    let cfg = TrainConfig {
        epochs: 10,
        schedule: epl::train::Schedule::Step { milestones: vec![6, 8], factor: 0.1 },
        ..TrainConfig::default()
    };
    let cfg = TrainConfig { epl: epl::train::EplSettings { start_epoch: 2, ..cfg.epl }, ..cfg };

    let dir = std::env::temp_dir().join("epl-example-ckpt");
    let init = TrainState::init(&cfg, train_set.dim(), train_set.num_classes())?;
    let full = train_from(init, &cfg, &train_set, Some(&test_set), |s| {
        if s.epoch == 5 {
            save_checkpoint(&dir, &cfg, s)?;
        }
        Ok(())
    })?;
    print!("{}", metrics_csv(&full.metrics, &cfg.eval));

    let ck = load_checkpoint(&dir)?;
    println!("resuming from epoch {}", ck.state.epoch);
    let resumed = train_from(ck.state, &ck.config, &train_set, Some(&test_set), |_| Ok(()))?;
    println!("resumed run identical: {}", resumed == full);
    Ok(())
}
