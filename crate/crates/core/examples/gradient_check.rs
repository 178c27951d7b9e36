//! Reverse-mode gradients of a small SiLU network against central finite
//! differences.
//!
//!     cargo run --example gradient_check

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use sbdc_lab::nn::{Adam, AdamConfig, DenseNetwork, LossEval};
use sbdc_lab::rng;

fn half_sq(out: ArrayView2<'_, f64>) -> LossEval {
    LossEval { per_row: out.map_axis(Axis(1), |r| 0.5 * r.dot(&r)), grad: out.to_owned() }
}

fn main() -> sbdc_lab::Result<()> {
    let mut r = rng::stream(7, 0);
    let mut net = DenseNetwork::new(&[3, 16, 16, 2], &mut r)?;
    let x = Array2::from_shape_fn((8, 3), |_| r.random_range(-1.0..1.0));

    let bp = net.backward(x.view(), &half_sq)?;
    let analytic = bp.grads.flatten();
    let params = net.flat_params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        let mut loss_at = |v: f64| -> sbdc_lab::Result<f64> {
            p[i] = v;
            let mut n = net.clone();
            n.set_flat_params(&p)?;
            Ok(half_sq(n.forward(x.view())?.view()).total())
        };
        let fd = (loss_at(params[i] + h)? - loss_at(params[i] - h)?) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs());
        if denom > 0.0 {
            worst = worst.max((fd - analytic[i]).abs() / denom);
        }
    }
    println!("{} parameters, max relative error {worst:.2e}", params.len());

    let mut opt = Adam::new(AdamConfig::default(), &net);
    for step in 0..=200 {
        let bp = net.backward(x.view(), &half_sq)?;
        if step % 50 == 0 {
            println!("step {step:>3}  loss {:.6}", bp.loss);
        }
        opt.step(&mut net, &bp.grads)?;
    }
    Ok(())
}
