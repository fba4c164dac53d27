//! Bank activation and margin-scale sweep on a reduced benchmark.
//!
//! cargo run --release --example sweep [-- <config.json>]

use epl::cli::{cmd_sweep, sweep_csv};
use epl::config::RunConfig;

fn main() -> epl::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.data.num_classes = 20;
            cfg.data.samples_per_class = 40;
            cfg.train.epochs = 10;
            cfg.train.schedule = epl::train::Schedule::Step { milestones: vec![6, 8], factor: 0.1 };
            cfg.train.epl.start_epoch = 2;
            cfg
        }
    };
    let out = std::env::temp_dir().join("epl-example-sweep");
    let rows = cmd_sweep(&cfg, &out, None)?;
    print!("{}", sweep_csv(&rows, &cfg.train.eval.fars));
    Ok(())
}
