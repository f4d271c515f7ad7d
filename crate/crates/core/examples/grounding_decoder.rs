//! Builds the toy grounding decoder, attaches adapters and LoRA, and
//! greedy-decodes a window for one synthetic video. Untrained, so the
//! output is usually not a valid window.

use slot_ground::runner::{attach_tuning, build_decoder, init_base, predict, RunConfig};
use slot_ground::synth::gen_split;

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::desk();
    let dec = build_decoder(&cfg)?;
    let base = init_base(&cfg, &dec)?;
    let params = attach_tuning(&cfg, &dec, base)?;
    println!(
        "{} layers, width {}, adapters on {:?}, LoRA on {:?}; {} tensors, {} trainable scalars",
        cfg.decoder.n_layers,
        cfg.decoder.model_dim,
        cfg.decoder.adapter_layers,
        cfg.decoder.lora_layers,
        params.len(),
        params.trainable_count()
    );
    let video = &gen_split(&cfg.synth, "demo", 1, false)?[0];
    let (text, pred) = predict(&dec, &params, &video.sample, false)?;
    println!("ground truth {:?}", video.sample.gt_window);
    println!("decoded {text:?} -> {pred:?}");
    Ok(())
}
