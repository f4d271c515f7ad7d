//! Domain-gap and grounding-sensitivity probes: RBF-kernel MMD between pooled
//! representations, similarity-ranked test splits, and the window noise
//! perturbation experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::decoder::VideoSample;
use crate::metrics::{recall_at_iou, Prediction, Window};
use crate::rng::{derive_index, derive_seed};
use crate::{Error, Result};

/// One pooled vector per video plus a free-form source label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprSet {
    pub source: String,
    pub vectors: Vec<Vec<f64>>,
}

impl ReprSet {
    pub fn new(source: impl Into<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let d = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Dimension("representation vectors differ in length".into()));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("ReprSet::new"));
        }
        Ok(Self {
            source: source.into(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

/// Mean over all `T * N` token vectors of a `[T, N, D]` hidden state.
pub fn pool_video_repr(hidden: &Tensor) -> Result<Vec<f64>> {
    if hidden.ndim() != 3 {
        return Err(Error::Dimension(format!("hidden must be [T, N, D], got {:?}", hidden.shape())));
    }
    let d = hidden.shape()[2];
    let count = hidden.shape()[0] * hidden.shape()[1];
    if count == 0 || d == 0 {
        return Err(Error::Value("cannot pool an empty hidden state".into()));
    }
    let mut out = vec![0.0; d];
    for row in hidden.data().chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for v in &mut out {
        *v /= count as f64;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("pool_video_repr"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    /// `max(raw, 0)` of the unbiased estimate.
    pub estimate: f64,
    pub raw: f64,
    pub biased: f64,
    pub bandwidth: f64,
    pub bandwidth_fallback: bool,
    pub n_x: usize,
    pub n_y: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the union of both sets.
pub fn median_bandwidth(x: &ReprSet, y: &ReprSet) -> f64 {
    let pts: Vec<&Vec<f64>> = x.vectors.iter().chain(&y.vectors).collect();
    let mut d = Vec::with_capacity(pts.len() * pts.len() / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sq_dist(pts[i], pts[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 0 {
        0.5 * (d[m - 1] + d[m])
    } else {
        d[m]
    }
}

/// Gaussian-kernel MMD² with median-heuristic bandwidth. A zero median
/// falls back to bandwidth 1 and sets the flag.
pub fn mmd2(x: &ReprSet, y: &ReprSet) -> Result<MmdReport> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Value(format!("MMD needs at least 2 points per set, got {} and {}", x.len(), y.len())));
    }
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!("set dims {} and {}", x.dim(), y.dim())));
    }
    let mut bandwidth = median_bandwidth(x, y);
    let fallback = !(bandwidth > 0.0);
    if fallback {
        bandwidth = 1.0;
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    // (full sum, off-diagonal sum)
    let sums = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let (mut full, mut off) = (0.0, 0.0);
        for (i, u) in a.iter().enumerate() {
            for (j, v) in b.iter().enumerate() {
                let kv = k(u, v);
                full += kv;
                if i != j {
                    off += kv;
                }
            }
        }
        (full, off)
    };
    let (m, n) = (x.len() as f64, y.len() as f64);
    let (xx, xx_off) = sums(&x.vectors, &x.vectors);
    let (yy, yy_off) = sums(&y.vectors, &y.vectors);
    let (xy, _) = sums(&x.vectors, &y.vectors);
    let raw = xx_off / (m * (m - 1.0)) + yy_off / (n * (n - 1.0)) - 2.0 * xy / (m * n);
    let biased = xx / (m * m) + yy / (n * n) - 2.0 * xy / (m * n);
    if !raw.is_finite() || !biased.is_finite() {
        return Err(Error::numeric("mmd2"));
    }
    Ok(MmdReport {
        estimate: raw.max(0.0),
        raw,
        biased,
        bandwidth,
        bandwidth_fallback: fallback,
        n_x: x.len(),
        n_y: y.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRankSplit {
    /// Max cosine similarity of each test vector to the training set.
    pub scores: Vec<f64>,
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Ranks test samples by their best cosine match in the training set and
/// returns the highest and lowest `fraction` of sample indices. The ranking
/// is by score descending, then index ascending; the bottom set is the tail
/// of that same ranking, so the two never overlap.
pub fn simrank_split(train: &ReprSet, test: &ReprSet, fraction: f64) -> Result<SimRankSplit> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Value("simrank needs non-empty train and test sets".into()));
    }
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::Value(format!("fraction must be in (0, 0.5], got {fraction}")));
    }
    if train.dim() != test.dim() {
        return Err(Error::Dimension(format!("set dims {} and {}", train.dim(), test.dim())));
    }
    let scores: Vec<f64> = test
        .vectors
        .iter()
        .map(|t| train.vectors.iter().map(|r| cosine(t, r)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let k = ((fraction * scores.len() as f64) + 1e-9).floor() as usize;
    let top = order[..k].to_vec();
    let bottom = order[order.len() - k..].iter().rev().copied().collect();
    Ok(SimRankSplit { scores, top, bottom })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    GtWindow,
    RandomWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub mode: PerturbMode,
    /// Noise std as a multiple of the per-dimension feature std.
    pub noise_scale: f64,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::config("noise_scale", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Anything that maps a sample to a predicted window.
pub trait Grounder {
    fn predict(&self, sample: &VideoSample) -> Result<Prediction>;
}

impl<F: Fn(&VideoSample) -> Result<Prediction>> Grounder for F {
    fn predict(&self, sample: &VideoSample) -> Result<Prediction> {
        self(sample)
    }
}

fn frames_in(sample: &VideoSample, w: Window) -> Vec<usize> {
    (0..sample.n_frames())
        .filter(|&f| sample.times[f] >= w.start && sample.times[f] <= w.end)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    pub sample: VideoSample,
    pub frames: Vec<usize>,
    /// Random mode had to overlap the annotated window.
    pub overlapped: bool,
}

/// Adds Gaussian noise to the visual tokens of the frames chosen by `spec`.
/// Random mode picks a run of frames as long as the annotated one, avoiding
/// it when the video has room.
pub fn perturb_sample(sample: &VideoSample, spec: &PerturbSpec, rng: &mut impl Rng) -> Result<Perturbed> {
    spec.validate()?;
    let gt = frames_in(sample, sample.gt_window);
    let t = sample.n_frames();
    let (frames, overlapped) = match spec.mode {
        PerturbMode::GtWindow => (gt.clone(), false),
        PerturbMode::RandomWindow => {
            let len = gt.len().max(1).min(t);
            let free: Vec<usize> = (0..=t - len)
                .filter(|&s| (s..s + len).all(|f| !gt.contains(&f)))
                .collect();
            if free.is_empty() {
                let s = rng.gen_range(0..=t - len);
                ((s..s + len).collect(), true)
            } else {
                let s = free[rng.gen_range(0..free.len())];
                ((s..s + len).collect(), false)
            }
        }
    };

    let (n, d) = (sample.tokens_per_frame(), sample.feature_dim());
    let rows = (t * n) as f64;
    let data = sample.frames.data();
    let mut std = vec![0.0; d];
    for k in 0..d {
        let mean = data.iter().skip(k).step_by(d).sum::<f64>() / rows;
        let var = data.iter().skip(k).step_by(d).map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows;
        std[k] = spec.noise_scale * var.sqrt();
    }
    let mut out = sample.clone();
    if spec.noise_scale > 0.0 {
        let buf = out.frames.data_mut();
        for &f in &frames {
            for j in 0..n {
                for (k, s) in std.iter().enumerate() {
                    if *s > 0.0 {
                        let noise = Normal::new(0.0, *s).map_err(|e| Error::Value(e.to_string()))?;
                        buf[(f * n + j) * d + k] += noise.sample(rng);
                    }
                }
            }
        }
    }
    Ok(Perturbed {
        sample: out,
        frames,
        overlapped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub tau: f64,
    pub clean: f64,
    pub perturbed: f64,
    /// `(clean - perturbed) / clean`, 0 when the clean metric is 0.
    pub relative_drop: f64,
    pub overlap_fallbacks: usize,
    pub n: usize,
}

/// Recall at IoU `tau` before and after perturbing every sample.
pub fn perturb_eval<G: Grounder + ?Sized>(
    model: &G,
    samples: &[VideoSample],
    spec: &PerturbSpec,
    tau: f64,
) -> Result<PerturbReport> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::Value("perturbation needs at least one sample".into()));
    }
    let gts: Vec<Window> = samples.iter().map(|s| s.gt_window).collect();
    let clean: Vec<Prediction> = samples.iter().map(|s| model.predict(s)).collect::<Result<_>>()?;
    let base = derive_seed(spec.seed, "perturb");
    let mut fallbacks = 0;
    let mut noisy = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_index(base, i as u64));
        let p = perturb_sample(s, spec, &mut rng)?;
        fallbacks += usize::from(p.overlapped);
        noisy.push(model.predict(&p.sample)?);
    }
    let clean_r = recall_at_iou(&clean, &gts, tau)?;
    let pert_r = recall_at_iou(&noisy, &gts, tau)?;
    Ok(PerturbReport {
        tau,
        clean: clean_r,
        perturbed: pert_r,
        relative_drop: if clean_r > 0.0 { (clean_r - pert_r) / clean_r } else { 0.0 },
        overlap_fallbacks: fallbacks,
        n: samples.len(),
    })
}

#[cfg(test)]
mod tests;
