//! Diagnostics without a trained model: MMD between clean and shifted
//! videos, train/test similarity ranking, and the perturbation protocol run
//! against a hand-written centroid-matching grounder.

use std::collections::HashMap;

use slot_ground::decoder::VideoSample;
use slot_ground::diagnostics::{mmd2, perturb_eval, simrank_split, PerturbMode, PerturbSpec, ReprSet};
use slot_ground::metrics::{Prediction, Window};
use slot_ground::synth::{gen_split, pooled_features, SynthSpec};

fn main() -> anyhow::Result<()> {
    let spec = SynthSpec { n_tokens: 16, ..SynthSpec::default() };
    let train = gen_split(&spec, "train", 100, false)?;
    let clean = gen_split(&spec, "eval", 100, false)?;
    let shifted = gen_split(&spec, "eval", 100, true)?;

    let set = |name: &str, v: &[slot_ground::synth::SynthVideo]| {
        ReprSet::new(name, v.iter().map(|v| pooled_features(&v.sample)).collect())
    };
    let (tr, id, ood) = (set("train", &train)?, set("id", &clean)?, set("ood", &shifted)?);
    println!("MMD2 train vs ID  {:.4}", mmd2(&tr, &id)?.estimate);
    println!("MMD2 train vs OOD {:.4}", mmd2(&tr, &ood)?.estimate);
    let ranks = simrank_split(&tr, &ood, 0.2)?;
    println!("OOD top-similar {:?}, bottom {:?}", &ranks.top[..5], &ranks.bottom[..5]);

    // a grounder that looks for tokens near the target centroid
    let centroids = spec.centroids();
    let d = spec.feature_dim;
    let targets: HashMap<String, usize> = clean.iter().map(|v| (v.sample.id.clone(), v.target_type)).collect();
    let grounder = |s: &VideoSample| -> slot_ground::Result<Prediction> {
        let c = &centroids.data()[targets[&s.id] * d..][..d];
        let n = s.tokens_per_frame();
        let hit: Vec<bool> = (0..s.n_frames())
            .map(|f| {
                (0..n).any(|i| {
                    let x = &s.frames.data()[(f * n + i) * d..][..d];
                    x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() < d as f64 * 0.25
                })
            })
            .collect();
        Ok(match (hit.iter().position(|&h| h), hit.iter().rposition(|&h| h)) {
            (Some(a), Some(b)) => Prediction::Window(Window::new(s.times[a], s.times[b])?),
            _ => Prediction::ParseFailure { reason: "target not found".into() },
        })
    };
    let samples: Vec<VideoSample> = clean.iter().map(|v| v.sample.clone()).collect();
    for mode in [PerturbMode::GtWindow, PerturbMode::RandomWindow] {
        let r = perturb_eval(&grounder, &samples, &PerturbSpec { mode, noise_scale: 1.0, seed: 0 }, 0.7)?;
        println!("{mode:?}: R1@0.7 {:.2} -> {:.2} (drop {:.0}%)", r.clean, r.perturbed, 100.0 * r.relative_drop);
    }
    Ok(())
}
