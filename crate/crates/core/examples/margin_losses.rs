//! Prototype loss under the three margin modes, and how the positive-row
//! gradient shrinks as the sample moves toward its prototype.
//!
//! cargo run --example margin_losses

use epl::linalg::{random_unit_vector, Matrix};
use epl::losses::{prototype_grad_closed_form, prototype_loss, LossConfig, MarginMode};
use epl::rng::Rng;

fn main() -> epl::Result<()> {
    let mut rng = Rng::new(3);
    let dim = 16;
    let rows: Vec<_> = (0..5).map(|_| random_unit_vector(dim, &mut rng)).collect();
    let w = Matrix::from_rows(&rows)?;

    // Mostly a random direction, partly its prototype.
    let noise = random_unit_vector(dim, &mut rng);
    let x: Vec<f64> = w.row(0).iter().zip(noise.iter()).map(|(p, n)| 0.35 * p + 0.65 * n).collect();

    println!("mode,loss,grad_x_norm");
    for mode in [MarginMode::None, MarginMode::Cosine, MarginMode::Angular] {
        let cfg = LossConfig { margin_mode: mode, ..LossConfig::default() };
        let out = prototype_loss(&x, 0, &w, &cfg)?;
        let gnorm = out.grad_feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{mode:?},{:.4},{:.4}", out.loss, gnorm);
    }

    println!("\nt,cos_to_prototype,positive_row_coef");
    let cfg = LossConfig::default();
    for k in 6..=14 {
        let t = k as f64 / 20.0;
        let v: Vec<f64> = w.row(0).iter().zip(noise.iter()).map(|(p, n)| t * p + (1.0 - t) * n).collect();
        let vn = epl::linalg::l2_normalize(&v)?;
        let g = prototype_grad_closed_form(&vn, 0, &w, &cfg)?;
        let coef = g.row(0).iter().map(|c| c * c).sum::<f64>().sqrt();
        println!("{t:.2},{:.4},{:.3e}", epl::linalg::dot(&vn, w.row(0)), coef);
    }
    Ok(())
}
