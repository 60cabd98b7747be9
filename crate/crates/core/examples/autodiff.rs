//! Reverse-mode differentiation on the tape, a finite-difference check and a
//! few AdamW steps on a least-squares problem.

use poselift::diffopt::{numerical_gradient, relative_error, AdamWConfig, AdamWState, Tape, Tensor};

fn main() -> poselift::Result<()> {
    // f(w) = mean(softmax(x w) * y) + 0.1 * |w|^2
    let x = Tensor::from_rows(&[[1.0, -2.0, 0.5], [0.3, 0.8, -1.0]])?;
    let y = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]])?;
    let w0 = Tensor::from_rows(&[[0.2, -0.1], [0.4, 0.3], [-0.5, 0.1]])?;
    let f = |w: &Tensor, grad: bool| -> poselift::Result<(f64, Option<Tensor>)> {
        let tape = Tape::new();
        let wv = if grad { tape.var(w.clone()) } else { tape.constant(w.clone()) };
        let logits = tape.constant(x.clone()).matmul(wv)?;
        let fit = logits.softmax().try_mul(tape.constant(y.clone()))?.mean();
        let loss = fit + wv.square().sum() * 0.1;
        let g = if grad { Some(tape.backward(loss)?.get(wv)) } else { None };
        Ok((loss.item(), g))
    };
    let (value, analytic) = f(&w0, true)?;
    let numeric = numerical_gradient(&w0, 1e-6, |w| f(w, false).unwrap().0);
    println!(
        "f = {value:.6}, gradient relative error vs finite differences {:.2e}",
        relative_error(&analytic.unwrap(), &numeric)
    );

    // Least squares a * t + b ~ 3 t - 1.
    let ts: Vec<f64> = (0..20).map(|i| i as f64 / 10.0).collect();
    let mut params = vec![Tensor::scalar(0.0), Tensor::scalar(0.0)];
    let mut opt = AdamWState::new(AdamWConfig::new(0.05, 0.0), &params);
    for step in 0..=400 {
        let tape = Tape::new();
        let (a, b) = (tape.var(params[0].clone()), tape.var(params[1].clone()));
        let t = tape.constant(Tensor::from_vec(ts.len(), 1, ts.clone())?);
        let target = tape.constant(Tensor::from_vec(ts.len(), 1, ts.iter().map(|t| 3.0 * t - 1.0).collect())?);
        let pred = t.try_mul(a)?.try_add(b)?;
        let loss = pred.try_sub(target)?.square().mean();
        if step % 100 == 0 {
            println!("step {step:3}: loss {:.3e}, a {:.4}, b {:.4}", loss.item(), params[0].item(), params[1].item());
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut params, &[grads.get(a), grads.get(b)])?;
    }
    Ok(())
}
