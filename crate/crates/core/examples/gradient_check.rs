//! Reverse-mode gradients of a small attention-plus-layernorm expression
//! compared with central differences.

use flowrec::autodiff::{grad_check_many, Graph, Tensor};

fn main() -> anyhow::Result<()> {
    let t = |rows: usize, cols: usize, seed: f64| {
        let data = (0..rows * cols).map(|i| ((i as f64 + seed) * 0.7).sin()).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    };
    let inputs = [t(4, 6, 0.0), t(6, 6, 1.0), t(6, 6, 2.0), t(6, 6, 3.0), Tensor::new(vec![6], vec![1.0; 6])?, Tensor::zeros(vec![6])];
    let err = grad_check_many(
        |g: &mut Graph<f64>, x| {
            let q = g.matmul(x[0], x[1])?;
            let k = g.matmul(x[0], x[2])?;
            let v = g.matmul(x[0], x[3])?;
            let s = g.matmul_nt(q, k)?;
            let s = g.causal_mask(s)?;
            let a = g.softmax(s);
            let y = g.matmul(a, v)?;
            let y = g.layer_norm(y, x[4], x[5])?;
            let y = g.gelu(y);
            Ok(g.sum(y))
        },
        &inputs,
        1e-5,
    )?;
    println!("max relative gradient error {err:.2e}");
    Ok(())
}
