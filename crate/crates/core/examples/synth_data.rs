//! Generates a synthetic video, prints its planted layout and query, and
//! writes the features as an SVTF file.

use slot_ground::runner::{read_svtf, write_svtf};
use slot_ground::synth::{gen_split, SynthSpec};

fn main() -> anyhow::Result<()> {
    let spec = SynthSpec { n_tokens: 16, ..SynthSpec::default() };
    let clean = &gen_split(&spec, "demo", 1, false)?[0];
    let shifted = &gen_split(&spec, "demo", 1, true)?[0];
    let side = spec.grid_side();

    println!("video {} query {:?} target type {}", clean.sample.id, clean.sample.query, clean.target_type);
    println!("target visible in frames {:?}, window {:?}", clean.target_frames, clean.sample.gt_window);
    for f in [0, clean.target_frames.0] {
        println!("frame {f} labels:");
        for r in 0..side {
            let row: Vec<String> = (0..side).map(|c| format!("{:>2}", clean.label(f, r * side + c))).collect();
            println!("  {}", row.join(" "));
        }
    }
    let diff = clean.sample.frames.max_abs_diff(&shifted.sample.frames);
    println!("domain shift moves features by up to {diff:.3}");

    let path = std::env::temp_dir().join("slot-ground-demo.svtf");
    write_svtf(&path, &clean.sample.frames)?;
    let back = read_svtf(&path)?;
    println!("wrote {} ({:?}), f32 round-trip error {:.2e}", path.display(), back.shape(), back.max_abs_diff(&clean.sample.frames));
    Ok(())
}
