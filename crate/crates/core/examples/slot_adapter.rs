//! Runs the slot adapter over random visual tokens and prints the slot
//! attention statistics. A freshly initialised adapter is an identity map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slot_ground::adapter::{AdapterConfig, SlotAdapter};
use slot_ground::autodiff::{Graph, Tensor};
use slot_ground::synth::slot_assignment;

fn main() -> anyhow::Result<()> {
    let cfg = AdapterConfig {
        model_dim: 32,
        bottleneck_dim: 16,
        n_slots: 4,
        n_iters: 3,
        n_heads: 2,
        ..AdapterConfig::default()
    };
    let adapter = SlotAdapter::new(cfg, "adapter.")?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = adapter.init_params(&mut rng)?;
    let x = Tensor::randn(&[2, 9, 32], 1.0, &mut rng);

    let g = Graph::new();
    let (y, out) = adapter.forward(&g, &ps, g.constant(x.clone()))?;
    println!("fresh adapter: max |y - x| = {:e}", y.to_tensor().max_abs_diff(&x));

    let attn = out.attn.to_tensor();
    println!("attention shape {:?} (frames, tokens, slots)", attn.shape());
    let labels = slot_assignment(&attn)?;
    for (f, row) in labels.chunks(9).enumerate() {
        println!("frame {f} argmax slots: {row:?}");
    }

    // give the up-projection some weight so the residual actually changes
    for v in ps.get_mut("adapter.w_up")?.data_mut() {
        *v = 0.1;
    }
    let g = Graph::new();
    let (y, _) = adapter.forward(&g, &ps, g.constant(x.clone()))?;
    println!("with non-zero w_up: max |y - x| = {:.4}", y.to_tensor().max_abs_diff(&x));
    Ok(())
}
