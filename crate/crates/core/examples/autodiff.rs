//! Reverse-mode gradients on a small expression, checked against central
//! differences.

use asr::gradcheck::grad_check;
use asr::{Graph, Result, Tensor, Var};

/// sum(softmax(relu(x W)) * log(1 + |x W|))
fn objective(g: &mut Graph, p: &[Var]) -> Result<Var> {
    let h = g.matmul(p[0], p[1])?;
    let r = g.relu(h)?;
    let a = g.abs(h)?;
    let a = g.add_scalar(a, 1.0)?;
    let l = g.log(a)?;
    let flat = g.reshape(r, &[6])?;
    let s = g.softmax(flat)?;
    let s = g.reshape(s, &[2, 3])?;
    let prod = g.mul(s, l)?;
    g.sum_all(prod)
}

fn main() -> Result<()> {
    let x = Tensor::new(vec![2, 4], vec![0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 1.7, -0.9])?;
    let w = Tensor::new(vec![4, 3], (0..12).map(|i| ((i * 7 % 11) as f64 - 5.3) / 6.0).collect())?;

    let mut g = Graph::new();
    let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
    let out = objective(&mut g, &[xv, wv])?;
    g.backward(out)?;
    println!("value {:.6}", g.value(out).item());
    println!("dL/dx {:?}", g.grad(xv).map(|t| t.data().to_vec()));

    let err = grad_check(&objective, &[x, w], 20, 0)?;
    println!("max relative error vs central differences: {err:.2e}");
    Ok(())
}
