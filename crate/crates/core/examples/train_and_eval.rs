//! Short end-to-end run: pretrain the toy base, tune adapters and LoRA with
//! the slot alignment loss, then evaluate on ID and shifted videos.
//!
//!     cargo run --release --example train_and_eval -- [pretrain_steps] [key=value ...]

use slot_ground::runner::{attach_tuning, build_decoder, evaluate, init_base, pretrain_base, train, RunConfig};
use slot_ground::synth::gen_split;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::desk();
    cfg.pretrain_steps = args.first().map(|s| s.parse()).transpose()?.unwrap_or(400);
    cfg.n_train = 200;
    cfg = cfg.with_overrides(args.get(1..).unwrap_or_default())?;

    let dec = build_decoder(&cfg)?;
    let mut base = init_base(&cfg, &dec)?;
    pretrain_base(&dec, &mut base, &cfg, |l| {
        if l.step % 100 == 0 {
            println!("pretrain {:>5}  ce {:.4}", l.step, l.ce);
        }
        Ok(())
    })?;
    let mut params = attach_tuning(&cfg, &dec, base)?;
    let data: Vec<_> = gen_split(&cfg.synth, "train", cfg.n_train, false)?.into_iter().map(|v| v.sample).collect();
    train(&dec, &mut params, &cfg, &data, |l, _, _| {
        if l.step % 10 == 0 {
            println!("tune {:>4}  ce {:.4}  sa {:.4}  total {:.4}", l.step, l.ce, l.sa.unwrap_or(f64::NAN), l.total);
        }
        Ok(())
    })?;
    for ood in [false, true] {
        let eval: Vec<_> = gen_split(&cfg.synth, "eval", 50, ood)?.into_iter().map(|v| v.sample).collect();
        let m = evaluate(&dec, &params, &eval, false)?.metrics;
        println!("{}: {}", if ood { "OOD" } else { "ID " }, serde_json::to_string(&m)?);
    }
    Ok(())
}
