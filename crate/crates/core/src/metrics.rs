//! Temporal grounding metrics: interval IoU, Recall@1 at IoU thresholds and
//! mean IoU. Unparseable predictions score IoU 0.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A closed time interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        let w = Self { start, end };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.start.is_finite() || !self.end.is_finite() || self.start < 0.0 || self.start > self.end {
            return Err(Error::Value(format!(
                "invalid window [{}, {}]",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// Clamps both ends into `[0, duration]`.
    pub fn clamp_to(&self, duration: f64) -> Self {
        Self {
            start: self.start.clamp(0.0, duration),
            end: self.end.clamp(0.0, duration),
        }
    }
}

/// Outcome of decoding one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prediction {
    Window(Window),
    ParseFailure { reason: String },
}

impl Prediction {
    pub fn window(&self) -> Option<Window> {
        match self {
            Prediction::Window(w) => Some(*w),
            Prediction::ParseFailure { .. } => None,
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, Prediction::ParseFailure { .. })
    }
}

impl From<Window> for Prediction {
    fn from(w: Window) -> Self {
        Prediction::Window(w)
    }
}

pub fn temporal_iou(a: Window, b: Window) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    if a == b {
        return Ok(1.0);
    }
    let union = a.length() + b.length() - inter;
    if union == 0.0 {
        // two distinct points
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// Per-sample IoUs with failures mapped to 0 and predictions optionally
/// clamped to each video's duration.
pub fn sample_ious(preds: &[Prediction], gts: &[Window], durations: Option<&[f64]>) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::Value(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(d) = durations {
        if d.len() != gts.len() {
            return Err(Error::Value(format!("{} durations for {} samples", d.len(), gts.len())));
        }
    }
    preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, gt))| match p.window() {
            None => Ok(0.0),
            Some(w) => {
                let w = durations.map_or(w, |d| w.clamp_to(d[i]));
                temporal_iou(w, *gt)
            }
        })
        .collect()
}

pub fn recall_at_iou(preds: &[Prediction], gts: &[Window], tau: f64) -> Result<f64> {
    let ious = sample_ious(preds, gts, None)?;
    recall_from_ious(&ious, tau)
}

pub fn recall_from_ious(ious: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Value(format!("tau must be in (0, 1], got {tau}")));
    }
    if ious.is_empty() {
        return Err(Error::Value("recall over zero samples".into()));
    }
    Ok(ious.iter().filter(|&&v| v >= tau).count() as f64 / ious.len() as f64)
}

pub fn mean_iou(preds: &[Prediction], gts: &[Window]) -> Result<f64> {
    let ious = sample_ious(preds, gts, None)?;
    if ious.is_empty() {
        return Err(Error::Value("mean IoU over zero samples".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Summary written next to per-sample prediction files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    #[serde(rename = "R1@0.3")]
    pub r1_03: f64,
    #[serde(rename = "R1@0.5")]
    pub r1_05: f64,
    #[serde(rename = "R1@0.7")]
    pub r1_07: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub parse_failure_rate: f64,
    pub n: usize,
}

impl GroundingMetrics {
    pub fn compute(preds: &[Prediction], gts: &[Window], durations: Option<&[f64]>) -> Result<Self> {
        let ious = sample_ious(preds, gts, durations)?;
        if ious.is_empty() {
            return Err(Error::Value("no samples to score".into()));
        }
        let n = ious.len();
        Ok(Self {
            r1_03: recall_from_ious(&ious, 0.3)?,
            r1_05: recall_from_ious(&ious, 0.5)?,
            r1_07: recall_from_ious(&ious, 0.7)?,
            miou: ious.iter().sum::<f64>() / n as f64,
            parse_failure_rate: preds.iter().filter(|p| p.is_failure()).count() as f64 / n as f64,
            n,
        })
    }

    pub fn recall(&self, tau: f64) -> Option<f64> {
        match tau {
            t if t == 0.3 => Some(self.r1_03),
            t if t == 0.5 => Some(self.r1_05),
            t if t == 0.7 => Some(self.r1_07),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn w(a: f64, b: f64) -> Window {
        Window::new(a, b).unwrap()
    }

    fn discretized_iou(a: Window, b: Window, lo: f64, hi: f64, bins: usize) -> f64 {
        let step = (hi - lo) / bins as f64;
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..bins {
            let x = lo + (i as f64 + 0.5) * step;
            let (ia, ib) = (a.start <= x && x <= a.end, b.start <= x && x <= b.end);
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_examples() {
        assert!((temporal_iou(w(0.0, 10.0), w(5.0, 15.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(temporal_iou(w(1.0, 4.0), w(1.0, 4.0)).unwrap(), 1.0);
        assert_eq!(temporal_iou(w(0.0, 1.0), w(2.0, 3.0)).unwrap(), 0.0);
        assert_eq!(temporal_iou(w(2.0, 2.0), w(2.0, 2.0)).unwrap(), 1.0);
        assert_eq!(temporal_iou(w(2.0, 2.0), w(0.0, 4.0)).unwrap(), 0.0);
        assert!(Window::new(3.0, 1.0).is_err());
        assert!(Window::new(-1.0, 1.0).is_err());
        assert!(Window::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn recall_examples() {
        // IoUs 0.6, 0.4, 0.5 against [0, 10]
        let gts = vec![w(0.0, 10.0); 3];
        let preds: Vec<Prediction> = vec![w(0.0, 6.0).into(), w(0.0, 4.0).into(), w(0.0, 5.0).into()];
        assert!((recall_at_iou(&preds, &gts, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let fails = vec![
            Prediction::ParseFailure { reason: "x".into() };
            3
        ];
        assert_eq!(recall_at_iou(&fails, &gts, 0.3).unwrap(), 0.0);
        assert!(recall_at_iou(&preds[..2], &gts, 0.5).is_err());
        assert!(recall_at_iou(&preds, &gts, 0.0).is_err());
    }

    #[test]
    fn mean_iou_examples() {
        let gts = vec![w(1.0, 2.0), w(3.0, 5.0)];
        let perfect: Vec<Prediction> = gts.iter().map(|&g| g.into()).collect();
        assert_eq!(mean_iou(&perfect, &gts).unwrap(), 1.0);
        let half: Vec<Prediction> = vec![gts[0].into(), Prediction::ParseFailure { reason: "x".into() }];
        assert_eq!(mean_iou(&half, &gts).unwrap(), 0.5);
        assert!(mean_iou(&[], &[]).is_err());
    }

    #[test]
    fn recall_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let rand_w = |rng: &mut rand_chacha::ChaCha8Rng| {
            let (a, b): (f64, f64) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            w(a.min(b), a.max(b))
        };
        let gts: Vec<Window> = (0..200).map(|_| rand_w(&mut rng)).collect();
        let preds: Vec<Prediction> = (0..200).map(|_| rand_w(&mut rng).into()).collect();
        for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let mut hits = 0;
            for (p, g) in preds.iter().zip(&gts) {
                let p = p.window().unwrap();
                let inter = (p.end.min(g.end) - p.start.max(g.start)).max(0.0);
                let union = (p.end - p.start) + (g.end - g.start) - inter;
                if inter / union >= tau {
                    hits += 1;
                }
            }
            assert_eq!(recall_at_iou(&preds, &gts, tau).unwrap(), hits as f64 / 200.0);
        }
    }

    #[test]
    fn discretized_oracle_agrees() {
        let pairs = [(w(0.0, 10.0), w(5.0, 15.0)), (w(1.2, 3.7), w(2.9, 8.1)), (w(0.5, 9.5), w(3.0, 4.0))];
        for (a, b) in pairs {
            let want = discretized_iou(a, b, 0.0, 15.0, 10_000);
            assert!((temporal_iou(a, b).unwrap() - want).abs() < 1e-3);
        }
    }

    #[test]
    fn clamping_and_summary() {
        let gts = vec![w(0.0, 4.0), w(1.0, 2.0)];
        let preds: Vec<Prediction> = vec![w(0.0, 8.0).into(), Prediction::ParseFailure { reason: "x".into() }];
        let m = GroundingMetrics::compute(&preds, &gts, Some(&[4.0, 4.0])).unwrap();
        assert_eq!(m.r1_07, 0.5);
        assert_eq!(m.miou, 0.5);
        assert_eq!(m.parse_failure_rate, 0.5);
        let json = serde_json::to_value(&m).unwrap();
        assert!(json.get("R1@0.5").is_some() && json.get("mIoU").is_some());
    }

    fn arb_window() -> impl Strategy<Value = Window> {
        (0.0f64..50.0, 0.0f64..50.0).prop_map(|(a, b)| w(a.min(b), a.max(b)))
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_window(), b in arb_window(), c in 0.01f64..100.0) {
            let ab = temporal_iou(a, b).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, temporal_iou(b, a).unwrap());
            let s = |x: Window| w(x.start * c, x.end * c);
            prop_assert!((temporal_iou(s(a), s(b)).unwrap() - ab).abs() < 1e-9);
        }

        #[test]
        fn recall_is_monotone(ws in proptest::collection::vec((arb_window(), arb_window()), 1..30)) {
            let (preds, gts): (Vec<Prediction>, Vec<Window>) = ws.iter().map(|&(p, g)| (p.into(), g)).unzip();
            let mut last = 1.0;
            for tau in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
                let r = recall_at_iou(&preds, &gts, tau).unwrap();
                prop_assert!(r <= last);
                last = r;
            }
        }
    }
}
