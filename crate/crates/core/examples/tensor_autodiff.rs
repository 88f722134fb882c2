//! Builds a small graph by hand, back-propagates, and checks one gradient
//! against central differences.

use mvcons::{gradcheck, Graph, Tensor};

fn main() -> mvcons::Result<()> {
    let mut g = Graph::<f64>::new();
    let x = g.param(&Tensor::from_f64(vec![2, 3], &[0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?);
    let w = g.param(&Tensor::from_f64(vec![4, 3], &[0.2; 12])?);
    let h = g.linear(x, w, None)?;
    let h = g.gelu(h);
    let loss = g.mean_all(h);
    g.backward(loss)?;
    println!("loss = {:.6}", g.value(loss).item()?);
    println!("dloss/dx = {:?}", g.grad(x).unwrap());

    let report = gradcheck::check(
        "linear+gelu",
        vec![gradcheck::random_tensor(&[2, 3], 1, false), gradcheck::random_tensor(&[4, 3], 2, false)],
        0,
        &|g, v| {
            let h = g.linear(v[0], v[1], None)?;
            Ok(g.gelu(h))
        },
    )?;
    println!("{}: max rel err {:.2e} over {} elements", report.name, report.max_rel_err, report.elements);
    Ok(())
}
