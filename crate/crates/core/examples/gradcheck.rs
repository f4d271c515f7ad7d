//! Builds a small expression on the tape, runs backward and compares the
//! reverse-mode gradients with central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slot_ground::autodiff::{check_gradients, GradCheckOptions, Graph, ParamSet, Tensor, Var};

/// `mean(softmax(tanh(x w)) * c)` for a fixed weighting `c`.
fn loss<'g>(g: &'g Graph, ps: &ParamSet) -> slot_ground::Result<Var<'g>> {
    let h = g.param(ps, "x")?.matmul(g.param(ps, "w")?)?.tanh()?;
    let c = g.constant(Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.3).cos()));
    h.softmax_axis(1)?.mul(c)?.mean_all()
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::randn(&[4, 3], 0.5, &mut rng))?;
    ps.insert("x", Tensor::randn(&[5, 4], 1.0, &mut rng))?;

    let g = Graph::new();
    let w = g.param(&ps, "w")?;
    let h = g.param(&ps, "x")?.matmul(w)?.tanh()?;
    let weights = g.constant(Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.3).cos()));
    let l = h.softmax_axis(1)?.mul(weights)?.mean_all()?;
    println!("loss = {:.6}", l.item()?);
    let gw = g.backward(l)?.wrt(w).expect("w reached");
    println!("dL/dw[0, ..] = {:?}", &gw.data()[..3]);

    let report = check_gradients(&ps, GradCheckOptions::default(), loss)?;
    for p in &report.params {
        println!("{:>2}: rel err {:.2e} over {} entries -> {}", p.name, p.rel_error, p.checked, if p.passed { "ok" } else { "FAIL" });
    }
    Ok(())
}
