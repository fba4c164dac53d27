//! Baseline vs EP-only vs full EPL on the default synthetic benchmark.
//!
//! cargo run --release --example ablation [-- <config.json> [seeds]]

use epl::cli::{dataset_for, split_for};
use epl::config::RunConfig;
use epl::eval::analyze;
use epl::train::{train, TrainConfig};

fn variants(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut baseline = base.clone();
    baseline.epl.enabled = false;
    let mut ep_only = base.clone();
    ep_only.bank.adaptive = false;
    ep_only.epl.adaptive_margin_enabled = false;
    vec![("baseline", baseline), ("ep-only", ep_only), ("full-epl", base.clone())]
}

fn main() -> epl::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seeds: u64 = args.get(1).map_or(3, |s| s.parse().expect("seed count"));
    println!("seed,variant,tar_far2,tar_far3,rank1,neg_top3,w_align,bank_align");
    for seed in 0..seeds {
        let cfg = cfg.clone().with_seed(seed);
        let ds = dataset_for(&cfg, None)?;
        let (train_set, test_set) = split_for(&cfg, &ds)?;
        for (name, t) in variants(&cfg.train) {
            let state = train(&t, &train_set, Some(&test_set))?;
            let last = state.metrics.last().expect("epochs > 0");
            let a = analyze(&state.encoder, &state.prototypes, state.bank.prototypes(), &test_set, 3)?;
            let s = a.summary();
            println!(
                "{seed},{name},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                last.eval.tar_at_far[0].tar,
                last.eval.tar_at_far[1].tar,
                last.eval.rank1,
                s.negative_mean,
                s.w_normal_mean,
                s.bank_normal_mean
            );
        }
    }
    Ok(())
}
