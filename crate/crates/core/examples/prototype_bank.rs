//! The empirical prototype bank: update coefficients per activation and a
//! row drifting toward a stream of noisy class features.
//!
//! cargo run --example prototype_bank

use epl::bank::{update_coefficient, Activation, BankConfig, EmpiricalPrototypeBank};
use epl::linalg::{dot, l2_normalize, random_unit_vector};
use epl::rng::Rng;

fn main() -> epl::Result<()> {
    print!("s");
    for a in Activation::ALL {
        print!(",{}", a.name());
    }
    println!();
    for k in -4..=4 {
        let s = k as f64 / 4.0;
        print!("{s:.2}");
        for a in Activation::ALL {
            print!(",{:.4}", update_coefficient(s, a));
        }
        println!();
    }

    let mut rng = Rng::new(11);
    let dim = 32;
    let center = random_unit_vector(dim, &mut rng);
    let mut bank = EmpiricalPrototypeBank::new(1, dim, BankConfig::default(), &mut rng)?;
    println!("\nstep,alpha,cos_to_center");
    for step in 0..40 {
        let x: Vec<f64> = center.iter().map(|c| c + 0.1 * rng.gaussian()).collect();
        let u = bank.update(0, &x)?;
        if step % 5 == 0 || step == 39 {
            let row = l2_normalize(bank.prototypes().row(0))?;
            println!("{step},{:.4},{:.4}", u.alpha, dot(&row, &center));
        }
    }
    Ok(())
}
