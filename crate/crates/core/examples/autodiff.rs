//! Build a small graph on the tape, run the reverse sweep and compare the
//! result with central differences. Also shows both convolution paths agree.

use guided_deblur::tensor::{conv2d_naive, grad_check, ConvAlgo, Tape, Tensor};

fn main() -> guided_deblur::Result<()> {
    let x = Tensor::from_fn([1, 2, 6, 6], |i| (i as f64 * 1.37).sin());
    let w = Tensor::from_fn([3, 2, 3, 3], |i| (i as f64 * 0.71).cos() * 0.3);
    let b = Tensor::from_fn([3], |i| i as f64 * 0.1);

    let mut tape = Tape::<f64>::new();
    let (xv, wv, bv) = (tape.param(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
    let y = tape.conv2d_same(xv, wv, bv)?;
    let y = tape.relu(y);
    let loss = tape.mean(y);
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).data()[0]);
    println!("|dL/dw| entries = {}", grads.get(wv).map_or(0, |g| g.len()));

    let err = grad_check(
        |t, v| {
            let y = t.conv2d_same(v[0], v[1], v[2])?;
            let y = t.relu(y);
            Ok(t.mean(y))
        },
        &[x.clone(), w.clone(), b.clone()],
        1e-6,
    )?;
    println!("max relative gradient error = {err:.2e}");

    let mut fast = Tape::<f64>::with_conv_algo(ConvAlgo::Im2col);
    let (xv, wv, bv) = (fast.constant(x.clone()), fast.constant(w.clone()), fast.constant(b.clone()));
    let out = fast.conv2d(xv, wv, bv, 2, 1)?;
    let reference = conv2d_naive(&x, &w, &b, 2, 1)?;
    println!("im2col vs naive (stride 2): max diff {:.1e}", fast.value(out).max_abs_diff(&reference));
    Ok(())
}
