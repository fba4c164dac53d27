//! Combined prototype + bank loss on one sample, with and without the
//! adaptive margin, and the detached-margin derivative.
//!
//! cargo run --example combined_loss

use epl::bank::{BankConfig, EmpiricalPrototypeBank};
use epl::epl::{adaptive_margin, epl_loss, epl_loss_with_margin, epr_loss, EplConfig};
use epl::linalg::{random_unit_vector, Matrix};
use epl::losses::prototype_loss;
use epl::rng::Rng;

fn main() -> epl::Result<()> {
    let mut rng = Rng::new(5);
    let (n, dim) = (6, 24);
    let rows: Vec<_> = (0..n).map(|_| random_unit_vector(dim, &mut rng)).collect();
    let w = Matrix::from_rows(&rows)?;
    let mut bank = EmpiricalPrototypeBank::new(n, dim, BankConfig::default(), &mut rng)?;
    let x: Vec<f64> = w.row(2).iter().map(|v| v + 0.3 * rng.gaussian()).collect();
    // The bank row has seen other samples of the class, not this one.
    for _ in 0..3 {
        let other: Vec<f64> = w.row(2).iter().map(|v| v + 0.3 * rng.gaussian()).collect();
        bank.update(2, &other)?;
    }

    let cfg = EplConfig::default();
    let plain = prototype_loss(&x, 2, &w, &cfg.base)?;
    let full = epl_loss(&x, 2, &w, &bank, &cfg)?;
    let no_margin = epl_loss(&x, 2, &w, &bank, &EplConfig { adaptive_margin_enabled: false, ..cfg })?;
    println!("prototype loss only   {:.4}", plain.loss);
    println!("bank-only loss        {:.4}", epr_loss(&x, 2, &bank, cfg.tau)?.loss);
    // The bank negatives enter the same log-sum as the prototype negatives,
    // so the increase over the prototype loss is what they add.
    println!("combined, no margin   +{:.3e}", no_margin.loss - plain.loss);
    println!("combined, adaptive    +{:.3e}", full.loss - plain.loss);

    // The margin is treated as a constant: its derivative is not propagated.
    let xn = epl::linalg::l2_normalize(&x)?;
    let ep: Vec<f64> = bank.prototypes().row_iter().map(|r| epl::linalg::dot(&xn, r)).collect();
    let proto: Vec<f64> = w.row_iter().map(|r| epl::linalg::dot(&xn, r)).collect();
    let m = adaptive_margin(ep[2], cfg.tau);
    let terms = epl_loss_with_margin(&ep, &proto, 2, m, &cfg)?;
    println!("margin m_x            {m:.4}");
    println!("dL/ds_pos (bank)      {:.4}", terms.grad_ep_sims[2]);
    Ok(())
}
