//! Temporal IoU and recall over a handful of predictions.

use slot_ground::decoder::parse_window;
use slot_ground::metrics::{GroundingMetrics, Window};

fn main() -> anyhow::Result<()> {
    let gts = vec![Window::new(2.0, 6.0)?, Window::new(0.5, 1.5)?, Window::new(4.0, 9.0)?, Window::new(1.0, 3.0)?];
    let texts = ["[2.5s, 6.0s]", "[0.0s, 1.0s]", "[9.0s, 4.0s]", "[1.0s, 3.0s]"];
    let preds: Vec<_> = texts.iter().map(|t| parse_window(t, false)).collect();
    for (t, p) in texts.iter().zip(&preds) {
        println!("{t:<14} -> {p:?}");
    }
    let m = GroundingMetrics::compute(&preds, &gts, None)?;
    println!("{}", serde_json::to_string_pretty(&m)?);

    let clamped: Vec<_> = texts.iter().map(|t| parse_window(t, true)).collect();
    let m = GroundingMetrics::compute(&clamped, &gts, None)?;
    println!("with inverted windows swapped: R1@0.5 = {:.2}, failures = {:.2}", m.r1_05, m.parse_failure_rate);
    Ok(())
}
