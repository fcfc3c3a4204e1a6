//! Reverse-mode autodiff: build a small network graph, backpropagate, and
//! compare against central differences.

use cluda::tensor::{check_gradients, Attrs, Graph, Tensor};

fn main() -> cluda::Result<()> {
    // y = sum(relu(x · W + b)²)
    let x = Tensor::<f64>::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin());
    let w = Tensor::<f64>::from_fn(&[3, 2], |i| 0.5 - i as f64 * 0.2);
    let b = Tensor::<f64>::new(vec![2], vec![0.1, -0.05])?;

    let mut g = Graph::new();
    let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
    let h = g.dense(xv, wv, bv)?;
    let r = g.relu(h)?;
    let sq = g.mul(r, r)?;
    let loss = g.sum(sq)?;
    println!("loss = {:.6}", g.value(loss).item()?);
    let grads = g.backward(loss)?;
    println!("dL/dW = {:?}", grads.get(wv).map(|t| t.data().to_vec()));
    println!("dL/db = {:?}", grads.get(bv).map(|t| t.data().to_vec()));

    // the same function through the kernel catalog ids
    let mut g2 = Graph::new();
    let (xv, wv, bv) = (g2.param(x.clone()), g2.param(w.clone()), g2.param(b.clone()));
    let h = g2.apply_kernel("dense", &[xv, wv, bv], &Attrs::new())?;
    let r = g2.apply_kernel("relu", &[h], &Attrs::new())?;
    let sq = g2.apply_kernel("mul", &[r, r], &Attrs::new())?;
    let l2 = g2.apply_kernel("sum", &[sq], &Attrs::new())?;
    println!("catalog loss = {:.6}", g2.value(l2).item()?);

    let worst = check_gradients(&[x, w, b], 1e-5, |g, v| {
        let h = g.dense(v[0], v[1], v[2])?;
        let r = g.relu(h)?;
        let sq = g.mul(r, r)?;
        g.sum(sq)
    })?;
    println!("worst relative error vs finite differences: {worst:.2e}");
    Ok(())
}
