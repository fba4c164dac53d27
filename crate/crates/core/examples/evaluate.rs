//! Verification, identification and embedding-geometry metrics for a
//! trained model.
//!
//! cargo run --release --example evaluate

use epl::data::{generate_synthetic, split, SyntheticSpec};
use epl::eval::{analyze, evaluate};
use epl::rng::Rng;
use epl::train::{train, TrainConfig};

fn main() -> epl::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec { num_classes: 20, samples_per_class: 50, ..SyntheticSpec::default() })?;
    let (train_set, test_set) = split(&ds, 0.2, &mut Rng::new(1))?;
    let cfg = TrainConfig { epochs: 12, schedule: epl::train::Schedule::Step { milestones: vec![8, 10], factor: 0.1 }, ..TrainConfig::default() };
    let state = train(&cfg, &train_set, None)?;

    let report = evaluate(&state.encoder, &state.prototypes, &test_set, &cfg.eval)?;
    for t in &report.tar_at_far {
        println!("TAR@FAR={:e}: {:.4} (threshold {:.4})", t.far, t.tar, t.threshold);
    }
    println!("rank-1: {:.4}", report.rank1);

    let analysis = analyze(&state.encoder, &state.prototypes, state.bank.prototypes(), &test_set, 3)?;
    let s = analysis.summary();
    println!("top-3 negative cosine: mean {:.4}, peak {:.3}", s.negative_mean, s.negative_peak);
    println!("centroid alignment (normal samples): W {:.4}, bank {:.4}", s.w_normal_mean, s.bank_normal_mean);
    println!("centroid alignment (all samples):    W {:.4}, bank {:.4}", s.w_all_mean, s.bank_all_mean);
    Ok(())
}
