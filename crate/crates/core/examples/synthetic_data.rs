//! Generate a synthetic identity dataset, write it, read it back and split it.
//!
//! cargo run --example synthetic_data [-- out.txt]

use epl::data::{generate_synthetic, load_dataset, save_dataset, split, SyntheticSpec};
use epl::rng::Rng;

fn main() -> epl::Result<()> {
    let spec = SyntheticSpec { num_classes: 8, samples_per_class: 30, input_dim: 12, ..SyntheticSpec::default() };
    let ds = generate_synthetic(&spec)?;
    let hard = ds.is_hard.iter().filter(|&&h| h).count();
    println!("{} samples, {} classes, dim {}, {hard} hard", ds.len(), ds.num_classes(), ds.dim());

    let path = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("epl-example.txt").display().to_string());
    save_dataset(&ds, &path)?;
    assert_eq!(load_dataset(&path)?, ds);
    println!("round-tripped through {path}");

    let (train, test) = split(&ds, 0.2, &mut Rng::new(1))?;
    println!("split: {} train / {} held out", train.len(), test.len());
    Ok(())
}
